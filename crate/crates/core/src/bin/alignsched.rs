use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alignsched::data::NoiseSpec;
use alignsched::eval::Direction;
use alignsched::experiment::{cmd_ablation, cmd_gen, cmd_stress, cmd_train};
use alignsched::manifest::{DatasetSource, ExperimentManifest, Scenario};
use alignsched::trainer::TrainConfig;
use alignsched::{Error, Strategy};

#[derive(Parser)]
#[command(name = "alignsched", version, about = "Contrastive image-text alignment with adaptive loss-weight scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test feature files for a synthetic dataset.
    Gen(Common),
    /// Train one strategy and write checkpoint, logs, metrics and embeddings.
    Train(Common),
    /// Compare strategies over several seeds on identical batch sequences.
    Ablation(Common),
    /// Train on clean and noisy data, evaluate on the clean test split.
    Stress(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment manifest. Without one, the desk-scale synthetic corpus is used.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Strategy for `train`; comma-separated list for `ablation` and `stress`.
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<Strategy>,
    /// Base seed; repeat r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Seed of the synthetic generator when no manifest is given.
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long = "learning-rate", visible_alias = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_epsilon: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    cap_fraction: Option<f64>,
    #[arg(long)]
    target_margin: Option<f64>,
    #[arg(long)]
    entropy_clip_fraction: Option<f64>,
    #[arg(long)]
    ema_interval: Option<usize>,
    /// Fraction of training captions swapped among themselves.
    #[arg(long)]
    caption_noise: Option<f64>,
    /// Fraction of training image features corrupted with Gaussian noise.
    #[arg(long)]
    image_noise: Option<f64>,
    /// Target signal-to-noise ratio for image corruption.
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

enum Mode {
    Single,
    Many,
}

fn override_train(cfg: &mut TrainConfig, c: &Common) {
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = c.$field { cfg.$field = v; })*
        };
    }
    set!(
        seed,
        epochs,
        batch_size,
        learning_rate,
        tau,
        embed_dim,
        adam_beta1,
        adam_beta2,
        adam_epsilon,
        ema_decay,
        cap_fraction,
        target_margin,
        entropy_clip_fraction,
        ema_interval
    );
}

fn noise_scenarios(c: &Common, combined: bool) -> Option<Vec<Scenario>> {
    if c.caption_noise.is_none() && c.image_noise.is_none() && c.snr.is_none() {
        return None;
    }
    let base = NoiseSpec {
        target_snr: c.snr.unwrap_or(NoiseSpec::default().target_snr),
        seed: c.noise_seed,
        ..NoiseSpec::default()
    };
    let caption = c.caption_noise.unwrap_or(0.0);
    let image = c.image_noise.unwrap_or(0.0);
    if combined {
        let name = match (caption > 0.0, image > 0.0) {
            (true, true) => "caption-image-noise",
            (true, false) => "caption-noise",
            (false, true) => "image-noise",
            (false, false) => "clean",
        };
        let spec = NoiseSpec {
            caption_swap_fraction: caption,
            image_noise_fraction: image,
            ..base
        };
        return Some(vec![Scenario::from_noise(name, spec)]);
    }
    let mut out = vec![Scenario::clean()];
    if caption > 0.0 {
        out.push(Scenario::from_noise(
            "caption-noise",
            NoiseSpec {
                caption_swap_fraction: caption,
                ..base
            },
        ));
    }
    if image > 0.0 {
        out.push(Scenario::from_noise(
            "image-noise",
            NoiseSpec {
                image_noise_fraction: image,
                ..base
            },
        ));
    }
    Some(out)
}

fn build_manifest(c: &Common, mode: Mode) -> Result<ExperimentManifest, Error> {
    let mut m = match &c.manifest {
        Some(path) => ExperimentManifest::load(path).map_err(|e| match e {
            Error::Io { path, source } => Error::Manifest(format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => ExperimentManifest::new(DatasetSource::desk_scale(c.data_seed), TrainConfig::default()),
    };
    override_train(&mut m.train, c);
    match mode {
        Mode::Single => {
            match c.strategy.as_slice() {
                [] => {}
                [s] => m.train.strategy = *s,
                _ => return Err(Error::Manifest("train takes a single --strategy".into())),
            }
            if let Some(s) = noise_scenarios(c, true) {
                m.scenarios = s;
            }
        }
        Mode::Many => {
            if !c.strategy.is_empty() {
                m.strategies = c.strategy.clone();
            }
            if let Some(s) = noise_scenarios(c, false) {
                m.scenarios = s;
            }
        }
    }
    if let Some(r) = c.repeats {
        m.repeats = r;
    }
    if let Some(dir) = &c.out_dir {
        m.out_dir = dir.clone();
    }
    m.validate()?;
    Ok(m)
}

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.1}")).unwrap_or_else(|| "n/a".into())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen(c) => {
            let m = build_manifest(&c, Mode::Many)?;
            for p in cmd_gen(&m)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train(c) => {
            let m = build_manifest(&c, Mode::Single)?;
            let a = cmd_train(&m)?;
            let t = &a.result.test;
            println!(
                "{} best epoch {}: test R@1/5/10 i2t {}/{}/{} t2i {}/{}/{}",
                a.result.cell.run_id(),
                a.result.record().best_epoch,
                pct(t.get(Direction::I2T, 1)),
                pct(t.get(Direction::I2T, 5)),
                pct(t.get(Direction::I2T, 10)),
                pct(t.get(Direction::T2I, 1)),
                pct(t.get(Direction::T2I, 5)),
                pct(t.get(Direction::T2I, 10)),
            );
            for p in [&a.checkpoint, &a.train_log, &a.weights, &a.metrics, &a.embeddings, &a.projection] {
                println!("wrote {}", p.display());
            }
        }
        Command::Ablation(c) => {
            let m = build_manifest(&c, Mode::Many)?;
            let rep = cmd_ablation(&m)?;
            println!("{:<14} {:>7} {:>7} {:>7} {:>7}", "strategy", "R@1 i2t", "R@5 i2t", "R@1 t2i", "R@5 t2i");
            for r in &rep.rows {
                println!(
                    "{:<14} {:>7.1} {:>7.1} {:>7.1} {:>7.1}",
                    r.strategy.as_str(),
                    r.r1_i2t,
                    r.r5_i2t,
                    r.r1_t2i,
                    r.r5_t2i
                );
            }
            println!("wrote {}", rep.table.display());
        }
        Command::Stress(c) => {
            let m = build_manifest(&c, Mode::Many)?;
            let rep = cmd_stress(&m)?;
            print!("{}", std::fs::read_to_string(&rep.summary).map_err(|e| Error::Io {
                path: rep.summary.clone(),
                source: e,
            })?);
            println!("wrote {}", rep.summary.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
