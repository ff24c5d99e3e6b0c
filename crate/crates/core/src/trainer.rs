//! Adam training of the dual encoder under a loss-weight schedule, with
//! validation-based model selection and checkpoint I/O.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{batches, epoch_seed, fmt_real, parse_reals, write_reals, FeatureDataset};
use crate::encoder::{backward_cached, embed_images, embed_texts, embed_with_cache, init_params, DualEncoderParams, EncoderGradients};
use crate::error::{Error, Result};
use crate::eval::{recall_at_k, RetrievalReport};
use crate::linalg::Matrix;
use crate::loss::{embedding_gradients, infonce_components, loss_gradient, similarity_matrix, weighted_total};
use crate::scheduler::{batch_statistics, EpochSummary, SchedulerConfig, SchedulerState, Strategy};

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub tau: f64,
    pub embed_dim: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub ema_decay: f64,
    pub cap_fraction: f64,
    pub target_margin: f64,
    pub entropy_clip_fraction: f64,
    pub ema_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sched = SchedulerConfig::default();
        Self {
            learning_rate: 5e-4,
            batch_size: 32,
            epochs: 30,
            tau: crate::loss::DEFAULT_TAU,
            embed_dim: 256,
            strategy: Strategy::Fixed,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            ema_decay: sched.ema_decay,
            cap_fraction: sched.cap_fraction,
            target_margin: sched.target_margin,
            entropy_clip_fraction: sched.entropy_clip_fraction,
            ema_interval: sched.ema_interval,
        }
    }
}

impl TrainConfig {
    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig {
            strategy: self.strategy,
            ema_decay: self.ema_decay,
            cap_fraction: self.cap_fraction,
            target_margin: self.target_margin,
            entropy_clip_fraction: self.entropy_clip_fraction,
            ema_interval: self.ema_interval,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", "must be at least 2"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("tau", "must be positive"));
        }
        if self.embed_dim < 2 {
            return Err(Error::invalid("embed_dim", "must be at least 2"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, format!("{b} not in [0, 1)")));
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::invalid("adam_epsilon", "must be positive"));
        }
        self.scheduler().validate()
    }

    fn to_pairs(self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", fmt_real(self.learning_rate)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("tau", fmt_real(self.tau)),
            ("embed_dim", self.embed_dim.to_string()),
            ("strategy", self.strategy.to_string()),
            ("seed", self.seed.to_string()),
            ("adam_beta1", fmt_real(self.adam_beta1)),
            ("adam_beta2", fmt_real(self.adam_beta2)),
            ("adam_epsilon", fmt_real(self.adam_epsilon)),
            ("ema_decay", fmt_real(self.ema_decay)),
            ("cap_fraction", fmt_real(self.cap_fraction)),
            ("target_margin", fmt_real(self.target_margin)),
            ("entropy_clip_fraction", fmt_real(self.entropy_clip_fraction)),
            ("ema_interval", self.ema_interval.to_string()),
        ]
    }

    fn from_pairs(pairs: &BTreeMap<String, String>) -> std::result::Result<Self, String> {
        fn get<T: std::str::FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> std::result::Result<T, String> {
            let raw = pairs.get(key).ok_or_else(|| format!("config key `{key}` missing"))?;
            raw.parse().map_err(|_| format!("config key `{key}` has bad value `{raw}`"))
        }
        let expected = Self::default().to_pairs().len();
        if pairs.len() != expected {
            return Err(format!("config block has {} keys, expected {expected}", pairs.len()));
        }
        Ok(Self {
            learning_rate: get(pairs, "learning_rate")?,
            batch_size: get(pairs, "batch_size")?,
            epochs: get(pairs, "epochs")?,
            tau: get(pairs, "tau")?,
            embed_dim: get(pairs, "embed_dim")?,
            strategy: get(pairs, "strategy")?,
            seed: get(pairs, "seed")?,
            adam_beta1: get(pairs, "adam_beta1")?,
            adam_beta2: get(pairs, "adam_beta2")?,
            adam_epsilon: get(pairs, "adam_epsilon")?,
            ema_decay: get(pairs, "ema_decay")?,
            cap_fraction: get(pairs, "cap_fraction")?,
            target_margin: get(pairs, "target_margin")?,
            entropy_clip_fraction: get(pairs, "entropy_clip_fraction")?,
            ema_interval: get(pairs, "ema_interval")?,
        })
    }
}

/// Bias-corrected first and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: EncoderGradients,
    v: EncoderGradients,
    step: u64,
}

impl AdamState {
    pub fn new(params: &DualEncoderParams) -> Self {
        let zeros = || EncoderGradients {
            g_img: Matrix::zeros(params.w_img.rows(), params.w_img.cols()),
            g_txt: Matrix::zeros(params.w_txt.rows(), params.w_txt.cols()),
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

fn adam_update(w: &mut Matrix, g: &Matrix, m: &mut Matrix, v: &mut Matrix, lr_t: f64, cfg: &TrainConfig, bc2: f64) {
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let w = w.as_mut_slice();
    let m = m.as_mut_slice();
    let v = v.as_mut_slice();
    for (k, &gk) in g.as_slice().iter().enumerate() {
        m[k] = b1 * m[k] + (1.0 - b1) * gk;
        v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
        w[k] -= lr_t * m[k] / ((v[k] / bc2).sqrt() + eps);
    }
}

/// One Adam update of both heads. Rejects non-finite gradients before
/// touching any state.
pub fn adam_step(
    params: &mut DualEncoderParams,
    grads: &EncoderGradients,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.g_img.shape() != params.w_img.shape() || grads.g_txt.shape() != params.w_txt.shape() {
        return Err(Error::DimensionMismatch {
            op: "adam_step",
            detail: format!(
                "gradients {:?}/{:?} vs params {:?}/{:?}",
                grads.g_img.shape(),
                grads.g_txt.shape(),
                params.w_img.shape(),
                params.w_txt.shape()
            ),
        });
    }
    for (name, g) in [("image head", &grads.g_img), ("text head", &grads.g_txt)] {
        if let Some(pos) = g.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!(
                    "{name} gradient entry {pos} at optimizer step {}",
                    state.step + 1
                ),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.adam_beta1.powi(t);
    let bc2 = 1.0 - config.adam_beta2.powi(t);
    let lr_t = config.learning_rate / bc1;
    adam_update(&mut params.w_img, &grads.g_img, &mut state.m.g_img, &mut state.v.g_img, lr_t, config, bc2);
    adam_update(&mut params.w_txt, &grads.g_txt, &mut state.m.g_txt, &mut state.v.g_txt, lr_t, config, bc2);
    Ok(())
}

/// Everything logged about one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_l_i2t: f64,
    pub mean_l_t2i: f64,
    pub mean_total: f64,
    /// Weights used for every batch of this epoch.
    pub w_i: f64,
    pub w_t: f64,
    /// Weights committed at the end of this epoch for the next one.
    pub next_w_i: f64,
    pub next_w_t: f64,
    pub scheduler: EpochSummary,
    pub val_r1_i2t: f64,
    pub val_r1_t2i: f64,
    pub batch_count: usize,
    pub first_batch: Vec<usize>,
    /// FNV-1a hash of the epoch's full batch-index sequence.
    pub batch_fingerprint: u64,
}

impl EpochRecord {
    pub fn val_r1_sum(&self) -> f64 {
        self.val_r1_i2t + self.val_r1_t2i
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub strategy: Strategy,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_r1_sum: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,strategy,mean_l_i2t,mean_l_t2i,mean_total,w_i,w_t,next_w_i,next_w_t,val_r1_i2t,val_r1_t2i,val_r1_sum,sigma_i,sigma_t,entropy_i,entropy_t,margin_i,margin_t,batches,best";
pub const TRAJECTORY_HEADER: &str = "epoch,strategy,w_i,w_t,sigma_i,sigma_t,entropy_i,entropy_t,margin_i,margin_t";

impl TrainRecord {
    /// Training log: one row per epoch.
    pub fn log_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let s = &e.scheduler;
            let fields = [
                e.epoch.to_string(),
                self.strategy.to_string(),
                fmt_real(e.mean_l_i2t),
                fmt_real(e.mean_l_t2i),
                fmt_real(e.mean_total),
                fmt_real(e.w_i),
                fmt_real(e.w_t),
                fmt_real(e.next_w_i),
                fmt_real(e.next_w_t),
                fmt_real(e.val_r1_i2t),
                fmt_real(e.val_r1_t2i),
                fmt_real(e.val_r1_sum()),
                fmt_real(s.sigma_i),
                fmt_real(s.sigma_t),
                fmt_real(s.entropy_i),
                fmt_real(s.entropy_t),
                fmt_real(s.margin_i),
                fmt_real(s.margin_t),
                e.batch_count.to_string(),
                u8::from(e.epoch == self.best_epoch).to_string(),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Weight trajectory: the weights in force each epoch and the statistics
    /// observed during it.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from(TRAJECTORY_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let s = &e.scheduler;
            let fields = [
                e.epoch.to_string(),
                self.strategy.to_string(),
                fmt_real(e.w_i),
                fmt_real(e.w_t),
                fmt_real(s.sigma_i),
                fmt_real(s.sigma_t),
                fmt_real(s.entropy_i),
                fmt_real(s.entropy_t),
                fmt_real(s.margin_i),
                fmt_real(s.margin_t),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation R@1 sum.
    pub best_params: DualEncoderParams,
    pub final_params: DualEncoderParams,
    pub record: TrainRecord,
}

/// Recall on a dataset's own pairs.
pub fn evaluate(params: &DualEncoderParams, ds: &FeatureDataset, ks: &[usize]) -> Result<RetrievalReport> {
    let ei = embed_images(params, ds.img())?;
    let et = embed_texts(params, ds.txt())?;
    recall_at_k(&ei, &et, ks)
}

fn fnv1a(batches: &[Vec<usize>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in batches {
        for &i in b.iter().chain(std::iter::once(&usize::MAX)) {
            for byte in (i as u64).to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// Trains from a Xavier initialization drawn from `config.seed`.
pub fn train(train_ds: &FeatureDataset, val_ds: &FeatureDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let params = init_params(config.embed_dim, train_ds.img_dim(), train_ds.txt_dim(), config.seed)?;
    train_from(params, train_ds, val_ds, config)
}

/// Trains from the given starting parameters.
pub fn train_from(
    mut params: DualEncoderParams,
    train_ds: &FeatureDataset,
    val_ds: &FeatureDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_ds.len() < 2 || val_ds.is_empty() {
        return Err(Error::invalid(
            "datasets",
            format!("need >= 2 training pairs and >= 1 validation pair, got {} and {}", train_ds.len(), val_ds.len()),
        ));
    }
    if train_ds.img_dim() != params.img_dim()
        || train_ds.txt_dim() != params.txt_dim()
        || val_ds.img_dim() != params.img_dim()
        || val_ds.txt_dim() != params.txt_dim()
    {
        return Err(Error::DimensionMismatch {
            op: "train",
            detail: format!(
                "params expect ({}, {}) features, train has ({}, {}), val has ({}, {})",
                params.img_dim(),
                params.txt_dim(),
                train_ds.img_dim(),
                train_ds.txt_dim(),
                val_ds.img_dim(),
                val_ds.txt_dim()
            ),
        });
    }

    let mut scheduler = SchedulerState::new(config.scheduler())?;
    let mut adam = AdamState::new(&params);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, DualEncoderParams)> = None;

    for epoch in 0..config.epochs {
        let weights = scheduler.current();
        let order = batches(train_ds.len(), config.batch_size, epoch_seed(config.seed, epoch))?;
        let (mut sum_i2t, mut sum_t2i, mut sum_total) = (0.0, 0.0, 0.0);

        for (b, idx) in order.iter().enumerate() {
            let raw_img = train_ds.img().select_rows(idx);
            let raw_txt = train_ds.txt().select_rows(idx);
            let (img, txt) = embed_with_cache(&params, &raw_img, &raw_txt)?;
            let sim = similarity_matrix(&img.unit, &txt.unit, config.tau)?;

            scheduler.observe(&batch_statistics(&sim)?);

            let (l_i2t, l_t2i) = infonce_components(&sim);
            let loss = weighted_total(l_i2t, l_t2i, &weights);
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("loss at epoch {epoch}, batch {b}"),
                });
            }
            sum_i2t += l_i2t;
            sum_t2i += l_t2i;
            sum_total += loss.total;

            let d_s = loss_gradient(&sim, &weights);
            let (d_img, d_txt) = embedding_gradients(&d_s, &img.unit, &txt.unit)?;
            let grads = backward_cached(&img, &txt, &raw_img, &raw_txt, &d_img, &d_txt)?;
            adam_step(&mut params, &grads, &mut adam, config).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} (epoch {epoch}, batch {b})"),
                },
                other => other,
            })?;
        }

        let (next, summary) = scheduler.epoch_weights()?;
        let val = evaluate(&params, val_ds, &[1])?;
        let k = order.len() as f64;
        let rec = EpochRecord {
            epoch,
            mean_l_i2t: sum_i2t / k,
            mean_l_t2i: sum_t2i / k,
            mean_total: sum_total / k,
            w_i: weights.w_i,
            w_t: weights.w_t,
            next_w_i: next.w_i,
            next_w_t: next.w_t,
            scheduler: summary,
            val_r1_i2t: val.get(crate::eval::Direction::I2T, 1).unwrap_or(0.0),
            val_r1_t2i: val.get(crate::eval::Direction::T2I, 1).unwrap_or(0.0),
            batch_count: order.len(),
            first_batch: order.first().cloned().unwrap_or_default(),
            batch_fingerprint: fnv1a(&order),
        };
        let score = rec.val_r1_sum();
        // strict comparison keeps the earliest epoch on ties
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((epoch, score, params.clone()));
        }
        epochs.push(rec);
    }

    let (best_epoch, best_val_r1_sum, best_params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best_params,
        final_params: params,
        record: TrainRecord {
            strategy: config.strategy,
            epochs,
            best_epoch,
            best_val_r1_sum,
        },
    })
}

pub const CHECKPOINT_MAGIC: &str = "ALIGNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Saved model: parameters, the config that produced them, and the
/// selection result.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DualEncoderParams,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_val_r1_sum: f64,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome, config: &TrainConfig) -> Self {
        Self {
            params: outcome.best_params.clone(),
            config: *config,
            best_epoch: outcome.record.best_epoch,
            best_val_r1_sum: outcome.record.best_val_r1_sum,
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}")?;
        writeln!(out, "[config]")?;
        for (k, v) in ckpt.config.to_pairs() {
            writeln!(out, "{k} {v}")?;
        }
        writeln!(out, "[selection]")?;
        writeln!(out, "best_epoch {}", ckpt.best_epoch)?;
        writeln!(out, "best_val_r1_sum {}", fmt_real(ckpt.best_val_r1_sum))?;
        writeln!(out, "[params]")?;
        for (name, m) in [("w_img", &ckpt.params.w_img), ("w_txt", &ckpt.params.w_txt)] {
            writeln!(out, "{name} {} {}", m.rows(), m.cols())?;
            for r in 0..m.rows() {
                write_reals(&mut out, m.row(r))?;
            }
        }
        out.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).peekable();

    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    let mut toks = header.split_whitespace();
    if toks.next() != Some(CHECKPOINT_MAGIC) {
        return Err(corrupt(format!("missing `{CHECKPOINT_MAGIC}` header")));
    }
    let version = toks.next().unwrap_or("");
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version.to_string(),
            expected: CHECKPOINT_VERSION,
        });
    }

    let mut section = |name: &str| -> Result<BTreeMap<String, String>> {
        match lines.next() {
            Some((_, l)) if l.trim() == format!("[{name}]") => {}
            other => {
                return Err(corrupt(format!(
                    "expected [{name}] section, found {:?}",
                    other.map(|(_, l)| l)
                )))
            }
        }
        let mut map = BTreeMap::new();
        while let Some(&(_, l)) = lines.peek() {
            if l.starts_with('[') {
                break;
            }
            lines.next();
            let mut kv = l.splitn(2, ' ');
            let (k, v) = (kv.next().unwrap_or(""), kv.next().unwrap_or("").trim());
            if k.is_empty() || v.is_empty() || map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(corrupt(format!("bad entry `{l}` in [{name}]")));
            }
        }
        Ok(map)
    };
    let config = TrainConfig::from_pairs(&section("config")?).map_err(corrupt)?;
    config.validate()?;
    let selection = section("selection")?;
    let best_epoch: usize = selection
        .get("best_epoch")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("missing best_epoch".into()))?;
    let best_val_r1_sum: f64 = selection
        .get("best_val_r1_sum")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| corrupt("missing best_val_r1_sum".into()))?;
    if selection.len() != 2 || best_epoch >= config.epochs {
        return Err(corrupt("inconsistent [selection] block".into()));
    }

    match lines.next() {
        Some((_, "[params]")) => {}
        _ => return Err(corrupt("expected [params] section".into())),
    }
    let mut read_matrix = |name: &str| -> Result<Matrix> {
        let (_, head) = lines.next().ok_or_else(|| corrupt(format!("missing {name}")))?;
        let toks: Vec<&str> = head.split_whitespace().collect();
        let dims = match toks.as_slice() {
            [n, r, c] if *n == name => r.parse::<usize>().ok().zip(c.parse::<usize>().ok()),
            _ => None,
        };
        let (rows, cols) = dims.ok_or_else(|| corrupt(format!("bad matrix header `{head}`")))?;
        if rows != config.embed_dim {
            return Err(corrupt(format!(
                "{name} has {rows} rows but embed_dim is {}",
                config.embed_dim
            )));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (no, l) = lines
                .next()
                .ok_or_else(|| corrupt(format!("{name} ends early")))?;
            if l.starts_with("w_") {
                return Err(corrupt(format!("{name} ends early at line {no}")));
            }
            data.extend(parse_reals(path, no, l, cols)?);
        }
        Matrix::new(rows, cols, data)
    };
    let w_img = read_matrix("w_img")?;
    let w_txt = read_matrix("w_txt")?;
    if lines.any(|(_, l)| !l.trim().is_empty()) {
        return Err(corrupt("trailing data after parameters".into()));
    }
    Ok(Checkpoint {
        params: DualEncoderParams::new(w_img, w_txt)?,
        config,
        best_epoch,
        best_val_r1_sum,
    })
}
