//! Synthetic shapes corpus: one randomly placed, scaled and rotated shape
//! per image on a textured background, with its exact pixel support as mask.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::{load_class_dataset, ClassDataset, MASK_SUFFIX};
use crate::error::{Error, Result};
use crate::seed;

pub const SHAPE_FAMILIES: [&str; 12] = [
    "disk", "square", "triangle", "ring", "cross", "diamond", "star", "crescent", "hexagon",
    "ellipse", "lshape", "arrow",
];

/// Each family comes as a filled and an outlined variant.
pub const MAX_SHAPE_CLASSES: usize = 2 * SHAPE_FAMILIES.len();

/// Fraction of the radius removed from the interior of outlined shapes.
const OUTLINE_HOLE: f64 = 0.5;

pub fn shape_class_name(index: usize) -> String {
    let family = SHAPE_FAMILIES[index % SHAPE_FAMILIES.len()];
    if index < SHAPE_FAMILIES.len() {
        family.to_string()
    } else {
        format!("{family}-outline")
    }
}

fn regular_polygon(n: usize, radius: f64, phase: f64) -> Vec<(f64, f64)> {
    (0..n)
        .map(|i| {
            let a = phase + 2.0 * PI * i as f64 / n as f64;
            (radius * a.cos(), radius * a.sin())
        })
        .collect()
}

fn star_polygon() -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { 1.0 } else { 0.45 };
            let a = -PI / 2.0 + PI * i as f64 / 5.0;
            (r * a.cos(), r * a.sin())
        })
        .collect()
}

const ARROW: [(f64, f64); 7] = [
    (-0.9, -0.25),
    (0.15, -0.25),
    (0.15, -0.7),
    (0.95, 0.0),
    (0.15, 0.7),
    (0.15, 0.25),
    (-0.9, 0.25),
];

/// Even-odd ray casting.
fn in_polygon(poly: &[(f64, f64)], u: f64, v: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Membership test in normalised shape coordinates (radius 1).
fn in_family(family: usize, u: f64, v: f64) -> bool {
    let rho2 = u * u + v * v;
    match family {
        0 => rho2 <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => in_polygon(&regular_polygon(3, 1.0, -PI / 2.0), u, v),
        3 => (0.3..=1.0).contains(&rho2),
        4 => (u.abs() <= 0.32 && v.abs() <= 1.0) || (v.abs() <= 0.32 && u.abs() <= 1.0),
        5 => u.abs() + v.abs() <= 1.0,
        6 => in_polygon(&star_polygon(), u, v),
        7 => rho2 <= 1.0 && (u - 0.5).powi(2) + v * v > 0.6,
        8 => in_polygon(&regular_polygon(6, 1.0, 0.0), u, v),
        9 => u * u + (v / 0.55).powi(2) <= 1.0,
        10 => {
            (u.abs() <= 0.85 && (0.3..=0.9).contains(&v))
                || ((-0.85..=-0.3).contains(&u) && v.abs() <= 0.9)
        }
        11 => in_polygon(&ARROW, u, v),
        _ => unreachable!("unknown shape family {family}"),
    }
}

fn in_shape(class: usize, u: f64, v: f64) -> bool {
    let family = class % SHAPE_FAMILIES.len();
    let filled = in_family(family, u, v);
    if class < SHAPE_FAMILIES.len() {
        filled
    } else {
        filled && !in_family(family, u / OUTLINE_HOLE, v / OUTLINE_HOLE)
    }
}

struct Rendered {
    rgb: Vec<[u8; 3]>,
    mask: Vec<u8>,
}

fn render(class: usize, (h, w): (usize, usize), rng: &mut impl Rng) -> Rendered {
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
    let mut fg = bg;
    for _ in 0..100 {
        fg = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        if fg.iter().zip(&bg).map(|(a, b)| (a - b).abs()).sum::<f64>() >= 0.6 {
            break;
        }
    }
    // Two sinusoidal gratings give the background its texture.
    let gratings: Vec<(f64, f64, f64, [f64; 3])> = (0..2)
        .map(|_| {
            let freq = rng.random_range(0.15..0.6);
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let gain = std::array::from_fn(|_| rng.random_range(0.5..1.0) * 0.07);
            (freq * theta.cos(), freq * theta.sin(), phase, gain)
        })
        .collect();
    let side = h.min(w) as f64;
    loop {
        let radius = rng.random_range(0.22..0.36) * side;
        let margin = 0.9 * radius;
        let cx = rng.random_range(margin..(w as f64 - margin).max(margin + 1e-6));
        let cy = rng.random_range(margin..(h as f64 - margin).max(margin + 1e-6));
        let angle = rng.random_range(0.0..2.0 * PI);
        let (sin, cos) = angle.sin_cos();
        let mut rgb = Vec::with_capacity(h * w);
        let mut mask = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (cos * dx + sin * dy) / radius;
                let v = (-sin * dx + cos * dy) / radius;
                let inside = in_shape(class, u, v);
                let noise = rng.random_range(-0.03..0.03);
                let px: [u8; 3] = std::array::from_fn(|c| {
                    let value = if inside {
                        fg[c] + noise
                    } else {
                        let tex: f64 = gratings
                            .iter()
                            .map(|(fx, fy, p, g)| g[c] * (fx * x as f64 + fy * y as f64 + p).sin())
                            .sum();
                        bg[c] + tex + noise
                    };
                    (value.clamp(0.0, 1.0) * 255.0).round() as u8
                });
                rgb.push(px);
                mask.push(inside as u8);
            }
        }
        if mask.contains(&1) {
            return Rendered { rgb, mask };
        }
    }
}

/// Writes `n_classes × per_class` image/mask pairs below `out_root` and loads
/// them back. Output is a pure function of the arguments.
pub fn generate_shapes_dataset(
    n_classes: usize,
    per_class: usize,
    size: (usize, usize),
    seed: u64,
    out_root: &Path,
) -> Result<ClassDataset> {
    if n_classes > MAX_SHAPE_CLASSES {
        return Err(Error::UnsupportedClassCount {
            requested: n_classes,
            available: MAX_SHAPE_CLASSES,
        });
    }
    if n_classes < 2 {
        return Err(Error::config("classes", "need at least 2 classes"));
    }
    if per_class == 0 {
        return Err(Error::config("per_class", "must be positive"));
    }
    if size.0 == 0 || size.1 == 0 {
        return Err(Error::config("size", "must be positive"));
    }
    let (h, w) = size;
    for class in 0..n_classes {
        let name = shape_class_name(class);
        let dir = out_root.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..per_class {
            let index = (class * 1_000_000 + i) as u64;
            let mut rng = seed::rng(seed::derive(seed, seed::STREAM_GENERATE, index));
            let r = render(class, size, &mut rng);
            let stem = format!("{name}_{i:04}");
            let flat: Vec<u8> = r.rgb.iter().flatten().copied().collect();
            let img = image::RgbImage::from_raw(w as u32, h as u32, flat).expect("buffer size");
            let mask = image::GrayImage::from_raw(
                w as u32,
                h as u32,
                r.mask.iter().map(|&m| m * 255).collect(),
            )
            .expect("buffer size");
            let img_path = dir.join(format!("{stem}.png"));
            img.save(&img_path).map_err(|e| save_error(&img_path, e))?;
            let mask_path = dir.join(format!("{stem}{MASK_SUFFIX}.png"));
            mask.save(&mask_path)
                .map_err(|e| save_error(&mask_path, e))?;
        }
    }
    load_class_dataset(out_root, size)
}

fn save_error(path: &Path, err: image::ImageError) -> Error {
    match err {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    }
}
