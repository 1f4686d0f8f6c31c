mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use protoseg::dataset::{
    generate_shapes_dataset, load_class_dataset, load_unlabeled_pool, split_class_names,
    split_classes,
};
use protoseg::Error;
use sha2::{Digest, Sha256};

fn checksums(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for class in fs::read_dir(root).unwrap() {
        let class = class.unwrap().path();
        for file in fs::read_dir(&class).unwrap() {
            let file = file.unwrap().path();
            let digest = Sha256::digest(fs::read(&file).unwrap());
            let key = file
                .strip_prefix(root)
                .unwrap()
                .to_string_lossy()
                .into_owned();
            out.insert(key, digest.iter().map(|b| format!("{b:02x}")).collect());
        }
    }
    out
}

fn write_png_rgb(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)))
        .save(path)
        .unwrap();
}

fn write_png_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    image::GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]))
        .save(path)
        .unwrap();
}

fn small_layout(root: &Path, classes: &[&str], pairs: usize) {
    for c in classes {
        let dir = root.join(c);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..pairs {
            write_png_rgb(&dir.join(format!("{c}_{i}.png")), 40, 40, |x, y| {
                [(x * 6) as u8, (y * 6) as u8, 90]
            });
            write_png_gray(&dir.join(format!("{c}_{i}_mask.png")), 40, 40, |x, _| {
                if x < 20 {
                    255
                } else {
                    0
                }
            });
        }
    }
}

#[test]
fn generated_corpus_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let ds = generate_shapes_dataset(12, 10, (64, 64), 7, a.path()).unwrap();
    assert_eq!(ds.classes.len(), 12);
    assert_eq!(ds.entries.iter().map(Vec::len).sum::<usize>(), 120);
    generate_shapes_dataset(12, 10, (64, 64), 7, b.path()).unwrap();
    generate_shapes_dataset(12, 10, (64, 64), 8, c.path()).unwrap();
    let (ha, hb, hc) = (
        checksums(a.path()),
        checksums(b.path()),
        checksums(c.path()),
    );
    assert_eq!(ha.len(), 240);
    assert_eq!(ha, hb);
    let differing = ha.iter().filter(|(k, v)| hc.get(*k) != Some(*v)).count();
    assert!(
        differing > 200,
        "only {differing} files differ across seeds"
    );
}

#[test]
fn generated_corpus_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let generated = generate_shapes_dataset(6, 4, (32, 32), 3, dir.path()).unwrap();
    let loaded = load_class_dataset(dir.path(), (32, 32)).unwrap();
    assert_eq!(generated.classes, loaded.classes);
    assert_eq!(loaded.channels, 3);
    for (ga, la) in generated.entries.iter().zip(&loaded.entries) {
        assert_eq!(ga.len(), la.len());
        for (g, l) in ga.iter().zip(la) {
            assert_eq!(g.stem, l.stem);
            assert_eq!(g.mask, l.mask);
            assert!(l.mask.count() > 0);
            assert!(l.image.is_unit_range());
        }
    }
}

#[test]
fn loads_small_layout() {
    let dir = tempfile::tempdir().unwrap();
    small_layout(dir.path(), &["c1", "c0"], 3);
    let ds = load_class_dataset(dir.path(), (32, 32)).unwrap();
    assert_eq!(ds.classes, vec!["c0", "c1"]);
    assert!(ds.entries.iter().all(|e| e.len() == 3));
    assert_eq!(ds.image_size, (32, 32));
    for s in ds.entries.iter().flatten() {
        assert_eq!((s.image.height, s.image.width), (32, 32));
        assert!(s.mask.is_binary());
        assert_eq!(s.mask.count(), 16 * 32);
    }
}

#[test]
fn resized_masks_stay_binary() {
    let dir = tempfile::tempdir().unwrap();
    let class = dir.path().join("blob");
    fs::create_dir_all(&class).unwrap();
    write_png_rgb(&class.join("a.png"), 37, 29, |_, _| [10, 20, 30]);
    write_png_gray(&class.join("a_mask.png"), 37, 29, |x, y| {
        ((x * 7 + y * 3) % 256) as u8
    });
    let ds = load_class_dataset(dir.path(), (16, 16)).unwrap();
    let m = &ds.entries[0][0].mask;
    assert!(m.data.iter().all(|&v| v <= 1));
}

#[test]
fn missing_mask_names_stem() {
    let dir = tempfile::tempdir().unwrap();
    small_layout(dir.path(), &["a"], 2);
    fs::remove_file(dir.path().join("a/a_1_mask.png")).unwrap();
    match load_class_dataset(dir.path(), (32, 32)) {
        Err(Error::MissingMask { stem, .. }) => assert_eq!(stem, "a_1"),
        other => panic!("expected MissingMask, got {other:?}"),
    }
}

#[test]
fn empty_class_corrupt_image_and_missing_root() {
    let dir = tempfile::tempdir().unwrap();
    small_layout(dir.path(), &["a"], 1);
    fs::create_dir_all(dir.path().join("empty")).unwrap();
    assert!(matches!(
        load_class_dataset(dir.path(), (32, 32)),
        Err(Error::EmptyClass { .. })
    ));

    fs::remove_dir(dir.path().join("empty")).unwrap();
    fs::write(dir.path().join("a/a_0.png"), b"not a png").unwrap();
    assert!(matches!(
        load_class_dataset(dir.path(), (32, 32)),
        Err(Error::CorruptImage { .. })
    ));

    assert!(matches!(
        load_class_dataset(&dir.path().join("nope"), (32, 32)),
        Err(Error::MissingRoot(_))
    ));
}

#[test]
fn too_many_classes_is_unsupported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        generate_shapes_dataset(1000, 1, (32, 32), 0, dir.path()),
        Err(Error::UnsupportedClassCount { .. })
    ));
}

#[test]
fn unlabeled_pool_skips_masks() {
    let dir = tempfile::tempdir().unwrap();
    small_layout(dir.path(), &["a", "b"], 2);
    let pool = load_unlabeled_pool(dir.path(), (32, 32)).unwrap();
    assert_eq!(pool.len(), 4);
    assert!(pool
        .entries
        .iter()
        .all(|(stem, _)| !stem.ends_with("_mask")));
}

#[test]
fn twelve_class_split() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_shapes_dataset(12, 2, (16, 16), 0, dir.path()).unwrap();
    let split = split_classes(&ds, 1.0 / 3.0, 0).unwrap();
    assert_eq!(split.train_classes.len(), 8);
    assert_eq!(split.test_classes.len(), 4);
    assert!(split.is_disjoint());
}

proptest! {
    #[test]
    fn split_partitions_classes(n in 2usize..60, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let names: Vec<String> = (0..n).map(|i| format!("class{i:03}")).collect();
        let split = split_class_names(&names, frac, seed).unwrap();
        prop_assert!(split.is_disjoint());
        prop_assert!(!split.train_classes.is_empty() && !split.test_classes.is_empty());
        let union: Vec<String> = split.train_classes.union(&split.test_classes).cloned().collect();
        prop_assert_eq!(union.len(), n);
        prop_assert_eq!(split_class_names(&names, frac, seed).unwrap(), split);
    }
}
