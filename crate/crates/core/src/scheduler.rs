//! Loss-weight schedules for the two retrieval directions.
//!
//! Four strategies decide how `(w_i, w_t)` move between epochs:
//!
//! * `Fixed`: always `(0.5, 0.5)`.
//! * `Variance`: `w_i = σ_T / (σ_I + σ_T)`, `w_t = σ_I / (σ_I + σ_T)`, where
//!   `σ_I²` is the EMA of the mean within-row variance of the similarity
//!   matrix (how spread out each image's scores over all captions are) and
//!   `σ_T²` the same over columns.
//! * `Entropy`: weights proportional to the mean softmax entropy of each
//!   direction, after clipping each entropy at a fraction of `ln N`.
//! * `CosineSpread`: weights proportional to `max(0, M − Δ̄)`, where `Δ̄` is the
//!   mean gap between a query's positive score and its hardest negative.
//!
//! Statistics are observed every batch; weights are committed once per epoch
//! and each committed weight may move at most `cap_fraction` (relative) from
//! its previous value.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{entropy, mean_variance};
use crate::loss::SimilarityMatrix;

/// Raw weights are kept at least this far from 0 and 1.
pub const MIN_WEIGHT: f64 = 1e-6;

/// Below this combined spread the variance rule falls back to equal weights.
pub const DEGENERATE_SPREAD: f64 = 1e-12;

/// The convex pair `(w_i, w_t)` applied to `(l_i2t, l_t2i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_i: f64,
    pub w_t: f64,
    /// Epoch these weights apply to.
    pub epoch: usize,
}

impl LossWeights {
    pub const EQUAL: LossWeights = LossWeights {
        w_i: 0.5,
        w_t: 0.5,
        epoch: 0,
    };

    pub fn new(w_i: f64, w_t: f64, epoch: usize) -> Result<Self> {
        let ok = w_i > 0.0 && w_i < 1.0 && w_t > 0.0 && w_t < 1.0 && (w_i + w_t - 1.0).abs() <= 1e-12;
        if !ok {
            return Err(Error::invalid(
                "weights",
                format!("({w_i}, {w_t}) must lie in (0,1) and sum to 1"),
            ));
        }
        Ok(Self { w_i, w_t, epoch })
    }

    /// Bypasses validation; for boundary pairs such as `(1, 0)`.
    pub fn unchecked(w_i: f64, w_t: f64) -> Self {
        Self { w_i, w_t, epoch: 0 }
    }

    fn from_share(w_i: f64) -> Self {
        let w_i = w_i.clamp(MIN_WEIGHT, 1.0 - MIN_WEIGHT);
        Self {
            w_i,
            w_t: 1.0 - w_i,
            epoch: 0,
        }
    }

    fn proportional(a: f64, b: f64) -> Self {
        if a + b <= 0.0 || !(a + b).is_finite() {
            Self::EQUAL
        } else {
            Self::from_share(a / (a + b))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Fixed,
    Variance,
    Entropy,
    CosineSpread,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Fixed,
        Strategy::Variance,
        Strategy::Entropy,
        Strategy::CosineSpread,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Fixed => "fixed",
            Strategy::Variance => "variance",
            Strategy::Entropy => "entropy",
            Strategy::CosineSpread => "cosine-spread",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fixed" | "baseline" => Ok(Strategy::Fixed),
            "variance" | "variance-aware" => Ok(Strategy::Variance),
            "entropy" => Ok(Strategy::Entropy),
            "cosine-spread" | "cosine" | "spread" => Ok(Strategy::CosineSpread),
            other => Err(Error::invalid(
                "strategy",
                format!("unknown strategy `{other}` (fixed, variance, entropy, cosine-spread)"),
            )),
        }
    }
}

/// Per-batch observations of the similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStatistics {
    /// Mean over images of the variance of that image's row of scores.
    pub var_i: f64,
    /// Mean over captions of the variance of that caption's column.
    pub var_t: f64,
    pub entropy_i: f64,
    pub entropy_t: f64,
    pub margin_bar_i: f64,
    pub margin_bar_t: f64,
    /// Batch size the statistics were computed on.
    pub n: usize,
}

/// Computes every strategy's statistic from one similarity matrix.
pub fn batch_statistics(sim: &SimilarityMatrix) -> Result<BatchStatistics> {
    let n = sim.len();
    if n < 2 {
        return Err(Error::invalid(
            "batch",
            "hardest negative undefined for a batch of fewer than 2 pairs",
        ));
    }
    let s = sim.scores();
    let p_row = sim.row_softmax();
    let p_col = sim.column_softmax().transpose();

    let (mut var_i, mut var_t) = (0.0, 0.0);
    let (mut h_i, mut h_t) = (0.0, 0.0);
    let (mut m_i, mut m_t) = (0.0, 0.0);
    let mut col = vec![0.0; n];
    for i in 0..n {
        let row = s.row(i);
        for (r, c) in col.iter_mut().enumerate() {
            *c = s.get(r, i);
        }
        var_i += mean_variance(row)?.1;
        var_t += mean_variance(&col)?.1;
        h_i += entropy(p_row.row(i))?;
        h_t += entropy(p_col.row(i))?;

        let pos = s.get(i, i);
        let neg_row = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let neg_col = (0..n).filter(|&j| j != i).map(|j| col[j]).fold(f64::NEG_INFINITY, f64::max);
        m_i += pos - neg_row;
        m_t += pos - neg_col;
    }
    let nf = n as f64;
    Ok(BatchStatistics {
        var_i: var_i / nf,
        var_t: var_t / nf,
        entropy_i: h_i / nf,
        entropy_t: h_t / nf,
        margin_bar_i: m_i / nf,
        margin_bar_t: m_t / nf,
        n,
    })
}

/// Inverse-spread rule on standard deviations: the direction whose partner
/// direction is more spread out gets more weight.
pub fn raw_weights_variance(sigma_i: f64, sigma_t: f64) -> LossWeights {
    if sigma_i + sigma_t < DEGENERATE_SPREAD {
        return LossWeights::EQUAL;
    }
    LossWeights::from_share(sigma_t / (sigma_i + sigma_t))
}

/// Entropy-proportional rule with both entropies clipped at
/// `clip_fraction · ln n`.
pub fn raw_weights_entropy(entropy_i: f64, entropy_t: f64, n: usize, clip_fraction: f64) -> LossWeights {
    let ceiling = clip_fraction * (n.max(1) as f64).ln();
    let h_i = entropy_i.clamp(0.0, ceiling);
    let h_t = entropy_t.clamp(0.0, ceiling);
    LossWeights::proportional(h_i, h_t)
}

/// Margin-shortfall rule: `w ∝ max(0, M − Δ̄)` per direction.
pub fn raw_weights_cosine_spread(margin_i: f64, margin_t: f64, target_margin: f64) -> LossWeights {
    let short_i = (target_margin - margin_i).max(0.0);
    let short_t = (target_margin - margin_t).max(0.0);
    LossWeights::proportional(short_i, short_t)
}

/// Clamps `raw` to the pairs reachable from `prev` under a relative cap.
///
/// Each weight is confined to `[prev·(1−cap), prev·(1+cap)]`; since the pair
/// must sum to 1 the image share is clamped to the intersection of its own
/// band with the band implied by the text weight, so neither weight moves by
/// more than `cap` relative to where it was.
pub fn cap_weights(prev: &LossWeights, raw: &LossWeights, cap_fraction: f64) -> LossWeights {
    let (p, q) = (prev.w_i, prev.w_t);
    let lo = (p * (1.0 - cap_fraction)).max(1.0 - q * (1.0 + cap_fraction));
    let hi = (p * (1.0 + cap_fraction)).min(1.0 - q * (1.0 - cap_fraction));
    let target = raw.w_i / (raw.w_i + raw.w_t);
    let w_i = target.clamp(lo.min(hi), hi.max(lo));
    LossWeights::from_share(w_i)
}

/// Tunable knobs of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub strategy: Strategy,
    pub ema_decay: f64,
    pub cap_fraction: f64,
    pub target_margin: f64,
    pub entropy_clip_fraction: f64,
    /// Update the variance EMA on every `ema_interval`-th batch.
    pub ema_interval: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Fixed,
            ema_decay: 0.9,
            cap_fraction: 0.2,
            target_margin: 0.2,
            entropy_clip_fraction: 0.9,
            ema_interval: 1,
        }
    }
}

impl SchedulerConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay", format!("{} not in [0, 1)", self.ema_decay)));
        }
        if !(self.cap_fraction > 0.0 && self.cap_fraction <= 1.0) {
            return Err(Error::invalid(
                "cap_fraction",
                format!("{} not in (0, 1]", self.cap_fraction),
            ));
        }
        if !(self.target_margin > 0.0 && self.target_margin.is_finite()) {
            return Err(Error::invalid("target_margin", "must be positive"));
        }
        if !(self.entropy_clip_fraction > 0.0 && self.entropy_clip_fraction <= 1.0) {
            return Err(Error::invalid("entropy_clip_fraction", "must be in (0, 1]"));
        }
        if self.ema_interval == 0 {
            return Err(Error::invalid("ema_interval", "must be at least 1"));
        }
        Ok(())
    }
}

/// What the scheduler saw during one epoch, for the trajectory log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub sigma_i: f64,
    pub sigma_t: f64,
    pub entropy_i: f64,
    pub entropy_t: f64,
    pub margin_i: f64,
    pub margin_t: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct EpochAccumulator {
    batches: usize,
    entropy_i: f64,
    entropy_t: f64,
    margin_i: f64,
    margin_t: f64,
    max_n: usize,
}

/// Mutable schedule state, owned by the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulerState {
    config: SchedulerConfig,
    ema_var_i: Option<f64>,
    ema_var_t: Option<f64>,
    prev_weights: LossWeights,
    seen: usize,
    acc: EpochAccumulator,
}

impl SchedulerState {
    pub fn new(config: SchedulerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            ema_var_i: None,
            ema_var_t: None,
            prev_weights: LossWeights::EQUAL,
            seen: 0,
            acc: EpochAccumulator::default(),
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    /// Weights in force for the current epoch.
    pub fn current(&self) -> LossWeights {
        self.prev_weights
    }

    pub fn ema_variances(&self) -> (f64, f64) {
        (self.ema_var_i.unwrap_or(0.0), self.ema_var_t.unwrap_or(0.0))
    }

    /// Folds one batch's variances into the EMA; the first observation seeds it.
    pub fn update_ema(&mut self, stats: &BatchStatistics) {
        let d = self.config.ema_decay;
        let blend = |ema: Option<f64>, x: f64| Some(ema.map_or(x, |e| d * e + (1.0 - d) * x));
        self.ema_var_i = blend(self.ema_var_i, stats.var_i);
        self.ema_var_t = blend(self.ema_var_t, stats.var_t);
    }

    /// Records one batch: EMA update (on the configured interval) plus the
    /// epoch accumulators used by the entropy and spread rules.
    pub fn observe(&mut self, stats: &BatchStatistics) {
        if self.seen.is_multiple_of(self.config.ema_interval) {
            self.update_ema(stats);
        }
        self.seen += 1;
        let acc = &mut self.acc;
        acc.batches += 1;
        acc.entropy_i += stats.entropy_i;
        acc.entropy_t += stats.entropy_t;
        acc.margin_i += stats.margin_bar_i;
        acc.margin_t += stats.margin_bar_t;
        acc.max_n = acc.max_n.max(stats.n);
    }

    /// Caps `raw` against the previous weights and makes the result current
    /// for the next epoch.
    pub fn apply_cap_and_commit(&mut self, raw: &LossWeights) -> LossWeights {
        let mut next = match self.config.strategy {
            Strategy::Fixed => LossWeights::EQUAL,
            _ => cap_weights(&self.prev_weights, raw, self.config.cap_fraction),
        };
        next.epoch = self.prev_weights.epoch + 1;
        self.prev_weights = next;
        next
    }

    /// Summary of the statistics accumulated so far this epoch.
    pub fn epoch_summary(&self) -> Result<EpochSummary> {
        let acc = &self.acc;
        if acc.batches == 0 {
            return Err(Error::invalid("scheduler", "no batches observed this epoch"));
        }
        let k = acc.batches as f64;
        let (vi, vt) = self.ema_variances();
        Ok(EpochSummary {
            sigma_i: vi.sqrt(),
            sigma_t: vt.sqrt(),
            entropy_i: acc.entropy_i / k,
            entropy_t: acc.entropy_t / k,
            margin_i: acc.margin_i / k,
            margin_t: acc.margin_t / k,
        })
    }

    /// Raw weights the configured rule proposes from this epoch's statistics.
    pub fn raw_weights(&self) -> Result<LossWeights> {
        let summary = self.epoch_summary()?;
        Ok(match self.config.strategy {
            Strategy::Fixed => LossWeights::EQUAL,
            Strategy::Variance => raw_weights_variance(summary.sigma_i, summary.sigma_t),
            Strategy::Entropy => raw_weights_entropy(
                summary.entropy_i,
                summary.entropy_t,
                self.acc.max_n,
                self.config.entropy_clip_fraction,
            ),
            Strategy::CosineSpread => raw_weights_cosine_spread(
                summary.margin_i,
                summary.margin_t,
                self.config.target_margin,
            ),
        })
    }

    /// End-of-epoch update: dispatch to the strategy rule, cap, commit, and
    /// reset the per-epoch accumulators.
    pub fn epoch_weights(&mut self) -> Result<(LossWeights, EpochSummary)> {
        let summary = self.epoch_summary()?;
        let raw = self.raw_weights()?;
        let committed = self.apply_cap_and_commit(&raw);
        self.acc = EpochAccumulator::default();
        Ok((committed, summary))
    }
}
