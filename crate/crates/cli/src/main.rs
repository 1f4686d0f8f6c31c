use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use protoseg::config::{PAPER_PRESET, TINY_PRESET};
use protoseg::dataset::{generate_shapes_dataset, load_class_dataset, split_classes};
use protoseg::episodes::episode_stream;
use protoseg::evaluation::{evaluate, predict_episode, summary_table, write_overlay, SummaryRow};
use protoseg::network::checkpoint::load_checkpoint;
use protoseg::trainer::train;
use protoseg::{Error, RunConfig};

const CONFIG_KEYS: &str = "\
Configuration keys (TOML; override any of them with --set key=value):
  mode                       episodic | regular
  seed                       base seed for initialisation, episodes and noise
  iterations                 optimisation steps
  learning_rate              Adam step size
  lambda                     weight of the surrogate (denoising) loss, >= 0
  k                          labelled supports per episode
  u                          unlabeled images in the surrogate batch of each step
  episodes_per_step          episodes averaged into one gradient step
  regular_batch              samples per step in regular mode
  eval_every                 held-out evaluation interval in steps (0 = off)
  pretrained_encoder         optional checkpoint whose encoder weights are loaded
  adam.beta1, adam.beta2, adam.eps
  model.in_channels          image channels
  model.input_size           [height, width]
  model.encoder_channels     widths of the four encoder blocks
  model.convs_per_block      convolutions in each encoder block
  model.decoder_channels     widths of the two segmentation decoder stages
  model.denoise_channels     widths of the two denoising decoder stages
  model.fusion               concat | cosine
  data.root                  labelled corpus: <root>/<class>/<stem>.png + <stem>_mask.png
  data.image_size            [height, width] images are resized to
  data.test_fraction         share of classes held out for evaluation
  data.split_seed            seed of the class split
  surrogate.sigma            Gaussian noise standard deviation
  surrogate.copies           noisy copies per unlabeled image
  surrogate.pool_dir         directory of unlabeled images (masks are ignored)
  evaluation.n_episodes      episodes per evaluation
  evaluation.seed            evaluation episode seed
  evaluation.k               supports per evaluation episode
  output.dir                 run directory
  output.checkpoint_every    checkpoint interval in steps (0 = final only)

Relative data.root and surrogate.pool_dir are resolved against $PROTOSEG_DATA_ROOT when set.
Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.";

#[derive(Parser)]
#[command(name = "protoseg", version, about = "Few-shot segmentation with prototype transfer and a denoising surrogate task", after_long_help = CONFIG_KEYS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes corpus.
    Generate(GenerateArgs),
    /// Train a model.
    #[command(after_long_help = CONFIG_KEYS)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out classes.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 12)]
    classes: usize,
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file; the built-in tiny preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a built-in preset (tiny or paper) instead of a file.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    lambda: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    u: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    learning_rate: Option<String>,
    /// Labelled corpus directory (data.root).
    #[arg(long)]
    data: Option<String>,
    /// Unlabeled image directory (surrogate.pool_dir).
    #[arg(long)]
    pool: Option<String>,
    /// Run directory (output.dir).
    #[arg(long)]
    out: Option<String>,
    /// Extra `key=value` overrides, applied after the named flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config; defaults to config.toml next to the checkpoint, else the tiny preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Labelled corpus directory; overrides data.root.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report directory; defaults to eval_k<k>_s<seed> next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of episodes rendered as overlay images.
    #[arg(long, default_value_t = 8)]
    overlays: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::NegativeLambda(_) | Error::NegativeSigma(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> protoseg::Result<()> {
    let ds = generate_shapes_dataset(
        args.classes,
        args.per_class,
        (args.size, args.size),
        args.seed,
        &args.out,
    )?;
    println!(
        "wrote {} classes x {} pairs ({} pairs, {}x{} px, seed {}) to {}",
        ds.classes.len(),
        args.per_class,
        ds.len(),
        args.size,
        args.size,
        args.seed,
        args.out.display()
    );
    Ok(())
}

fn train_overrides(args: &TrainArgs) -> protoseg::Result<Vec<(String, String)>> {
    let named = [
        ("lambda", &args.lambda),
        ("k", &args.k),
        ("u", &args.u),
        ("iterations", &args.iterations),
        ("seed", &args.seed),
        ("mode", &args.mode),
        ("learning_rate", &args.learning_rate),
        ("data.root", &args.data),
        ("surrogate.pool_dir", &args.pool),
        ("output.dir", &args.out),
    ];
    let mut out: Vec<(String, String)> = named
        .iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .collect();
    for item in &args.set {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::config(item, "expected key=value"))?;
        out.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn path_override(value: &Option<String>) -> Option<String> {
    // Paths are passed through as TOML strings so that `--data 1` stays a path.
    value.as_ref().map(|v| toml_string(v))
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn cmd_train(args: TrainArgs) -> protoseg::Result<()> {
    let text = match (&args.config, args.preset.as_deref()) {
        (Some(path), _) => fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        (None, None | Some("tiny")) => TINY_PRESET.to_string(),
        (None, Some("paper")) => PAPER_PRESET.to_string(),
        (None, Some(other)) => {
            return Err(Error::config("preset", format!("unknown preset `{other}`")))
        }
    };
    let args = TrainArgs {
        data: path_override(&args.data),
        pool: path_override(&args.pool),
        out: path_override(&args.out),
        ..args
    };
    let overrides = train_overrides(&args)?;
    let mut config = RunConfig::from_toml_with_overrides(&text, &overrides)?;
    config.resolve_data_paths();
    info!(
        "mode {:?}, lambda {}, k {}, u {}, {} iterations, seed {}, data {}",
        config.mode,
        config.lambda,
        config.k,
        config.u,
        config.iterations,
        config.seed,
        config.data.root.display()
    );
    let final_path = train(&config)?;
    println!("final checkpoint: {}", final_path.display());
    Ok(())
}

fn eval_config(args: &EvalArgs) -> protoseg::Result<RunConfig> {
    let beside = args.checkpoint.parent().map(|p| p.join("config.toml"));
    let mut config = match (&args.config, beside) {
        (Some(path), _) => RunConfig::from_file(path, &[])?,
        (None, Some(path)) if path.is_file() => RunConfig::from_file(&path, &[])?,
        _ => RunConfig::tiny(),
    };
    if let Some(root) = &args.data {
        config.data.root = root.clone();
    }
    config.resolve_data_paths();
    if let Some(k) = args.k {
        config.evaluation.k = k;
    }
    if let Some(n) = args.episodes {
        config.evaluation.n_episodes = n;
    }
    if let Some(seed) = args.seed {
        config.evaluation.seed = seed;
    }
    if config.evaluation.k < 1 {
        return Err(Error::config("evaluation.k", "must be at least 1"));
    }
    if config.evaluation.n_episodes < 1 {
        return Err(Error::config("evaluation.n_episodes", "must be at least 1"));
    }
    Ok(config)
}

fn cmd_eval(args: EvalArgs) -> protoseg::Result<()> {
    let config = eval_config(&args)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let [h, w] = config.data.image_size;
    let dataset = load_class_dataset(&config.data.root, (h, w))?;
    let split = split_classes(&dataset, config.data.test_fraction, config.data.split_seed)?;
    let ev = &config.evaluation;
    let report = evaluate(
        &model,
        &dataset,
        &split.test_classes,
        ev.k,
        ev.n_episodes,
        ev.seed,
    )?
    .with_checkpoint(args.checkpoint.display().to_string());

    let out = args.out.clone().unwrap_or_else(|| {
        let parent = args.checkpoint.parent().unwrap_or(Path::new("."));
        parent.join(format!("eval_k{}_s{}", ev.k, ev.seed))
    });
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    report.write_json(&out.join("report.json"))?;
    let table = summary_table(&[SummaryRow {
        model: args.checkpoint.display().to_string(),
        additional_samples: format!("{}-shot, {} episodes", ev.k, ev.n_episodes),
        mean_dsc: report.mean_dsc,
    }]);
    fs::write(out.join("summary.txt"), &table).map_err(|e| Error::io(&out, e))?;

    if args.overlays > 0 {
        let dir = out.join("overlays");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stream = episode_stream(&dataset, &split.test_classes, ev.k, 0, None, ev.seed)?;
        for i in 0..args.overlays.min(ev.n_episodes) as u64 {
            let episode = stream.get(i)?;
            let pred = match predict_episode(&model, &episode) {
                Ok(p) => p,
                Err(Error::EmptyMask) => continue,
                Err(e) => return Err(e),
            };
            let name = format!("episode_{i:04}_{}.png", episode.class_id);
            write_overlay(
                &dir.join(name),
                episode.query_image(),
                episode.query_mask(),
                &pred,
            )?;
        }
    }
    print!("{table}");
    println!(
        "mean DSC {:.4} (std {:.4}, {} unscorable); report written to {}",
        report.mean_dsc,
        report.std_dsc,
        report.n_unscorable,
        out.display()
    );
    Ok(())
}
