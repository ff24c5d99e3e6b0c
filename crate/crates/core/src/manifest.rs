//! Experiment manifests: a TOML file naming the data source, the training
//! configuration, and the strategy × scenario × seed grid to run.
//!
//! ```toml
//! out_dir = "runs/ablation"
//! strategies = ["fixed", "variance"]
//! repeats = 2
//!
//! [dataset]
//! source = "synthetic"
//! pairs = 800
//! latent_dim = 16
//! d_img = 64
//! d_txt = 64
//! noise_scale = 1.7
//! seed = 7
//!
//! [train]
//! epochs = 30
//! embed_dim = 64
//!
//! [[scenarios]]
//! name = "caption-noise"
//! caption_swap_fraction = 0.2
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_features, split, FeatureDataset, NoiseSpec, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::scheduler::Strategy;
use crate::trainer::TrainConfig;

fn default_train_fraction() -> f64 {
    0.75
}

fn default_val_fraction() -> f64 {
    0.125
}

/// Where the three splits come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic {
        pairs: usize,
        latent_dim: usize,
        d_img: usize,
        d_txt: usize,
        noise_scale: f64,
        seed: u64,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
        /// Defaults to the generator seed.
        #[serde(default)]
        split_seed: Option<u64>,
    },
    Files {
        train: PathBuf,
        val: PathBuf,
        test: PathBuf,
    },
}

/// Noise scale of the default desk-scale corpus.
pub const DESK_NOISE_SCALE: f64 = 1.7;

impl DatasetSource {
    /// 800 pairs, 16 latent factors, 64-dim features on both sides.
    pub fn desk_scale(seed: u64) -> Self {
        Self::synthetic(SyntheticSpec {
            pairs: 800,
            latent_dim: 16,
            d_img: 64,
            d_txt: 64,
            noise_scale: DESK_NOISE_SCALE,
            seed,
        })
    }

    pub fn synthetic(spec: SyntheticSpec) -> Self {
        DatasetSource::Synthetic {
            pairs: spec.pairs,
            latent_dim: spec.latent_dim,
            d_img: spec.d_img,
            d_txt: spec.d_txt,
            noise_scale: spec.noise_scale,
            seed: spec.seed,
            train_fraction: default_train_fraction(),
            val_fraction: default_val_fraction(),
            split_seed: None,
        }
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match *self {
            DatasetSource::Synthetic {
                pairs,
                latent_dim,
                d_img,
                d_txt,
                noise_scale,
                seed,
                ..
            } => Some(SyntheticSpec {
                pairs,
                latent_dim,
                d_img,
                d_txt,
                noise_scale,
                seed,
            }),
            DatasetSource::Files { .. } => None,
        }
    }
}

/// The three splits of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: FeatureDataset,
    pub val: FeatureDataset,
    pub test: FeatureDataset,
}

/// Generates or loads the train/val/test splits.
pub fn load_splits(source: &DatasetSource) -> Result<Splits> {
    match source {
        DatasetSource::Synthetic {
            train_fraction,
            val_fraction,
            split_seed,
            ..
        } => {
            let spec = source.synthetic_spec().expect("synthetic source");
            let full = generate_synthetic(&spec)?;
            let (train, val, test) = split(&full, *train_fraction, *val_fraction, split_seed.unwrap_or(spec.seed))?;
            Ok(Splits { train, val, test })
        }
        DatasetSource::Files { train, val, test } => {
            let load = |p: &Path, s: Split| load_features(p).map(|d| d.with_split(Some(s)));
            let splits = Splits {
                train: load(train, Split::Train)?,
                val: load(val, Split::Val)?,
                test: load(test, Split::Test)?,
            };
            let dims = |d: &FeatureDataset| (d.img_dim(), d.txt_dim());
            if dims(&splits.train) != dims(&splits.val) || dims(&splits.train) != dims(&splits.test) {
                return Err(Error::DimensionMismatch {
                    op: "load_splits",
                    detail: format!(
                        "train {:?}, val {:?}, test {:?}",
                        dims(&splits.train),
                        dims(&splits.val),
                        dims(&splits.test)
                    ),
                });
            }
            Ok(splits)
        }
    }
}

/// A named training-noise scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub caption_swap_fraction: f64,
    #[serde(default)]
    pub image_noise_fraction: f64,
    #[serde(default = "default_snr")]
    pub target_snr: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_snr() -> f64 {
    NoiseSpec::default().target_snr
}

impl Scenario {
    pub fn clean() -> Self {
        Self::from_noise("clean", NoiseSpec::default())
    }

    pub fn from_noise(name: impl Into<String>, noise: NoiseSpec) -> Self {
        Self {
            name: name.into(),
            caption_swap_fraction: noise.caption_swap_fraction,
            image_noise_fraction: noise.image_noise_fraction,
            target_snr: noise.target_snr,
            seed: noise.seed,
        }
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            caption_swap_fraction: self.caption_swap_fraction,
            image_noise_fraction: self.image_noise_fraction,
            target_snr: self.target_snr,
            seed: self.seed,
        }
    }

    pub fn is_clean(&self) -> bool {
        self.noise().is_clean()
    }
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Fixed]
}

fn default_scenarios() -> Vec<Scenario> {
    vec![Scenario::clean()]
}

fn default_repeats() -> usize {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Full description of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<Scenario>,
    /// Seeds `train.seed, train.seed + 1, ...` are used, one per repeat.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl ExperimentManifest {
    pub fn new(dataset: DatasetSource, train: TrainConfig) -> Self {
        Self {
            dataset,
            train,
            strategies: default_strategies(),
            scenarios: default_scenarios(),
            repeats: default_repeats(),
            out_dir: default_out_dir(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    /// Reads a manifest; relative feature-file paths resolve against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text).map_err(|e| match e {
            Error::Manifest(msg) => Error::Manifest(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DatasetSource::Files { train, val, test } = &mut m.dataset {
            for p in [train, val, test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Manifest("at least one strategy is required".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Manifest("repeats must be at least 1".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Manifest("at least one scenario is required".into()));
        }
        for (i, s) in self.scenarios.iter().enumerate() {
            if s.name.is_empty() || s.name.contains([',', '/', '\\']) || s.name.contains(char::is_whitespace) {
                return Err(Error::Manifest(format!("scenario name `{}` is not a plain token", s.name)));
            }
            if self.scenarios[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Manifest(format!("duplicate scenario `{}`", s.name)));
            }
            s.noise().validate()?;
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return Err(Error::Manifest(format!("strategy `{s}` listed twice")));
            }
        }
        if let Some(spec) = self.dataset.synthetic_spec() {
            spec.validate()?;
        }
        self.train.validate()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats as u64).map(|r| self.train.seed.wrapping_add(r)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
out_dir = "out"
strategies = ["fixed", "variance", "cosine-spread"]
repeats = 2

[dataset]
source = "synthetic"
pairs = 40
latent_dim = 4
d_img = 8
d_txt = 6
noise_scale = 0.5
seed = 3

[train]
epochs = 2
embed_dim = 8
seed = 10

[[scenarios]]
name = "clean"

[[scenarios]]
name = "caption-noise"
caption_swap_fraction = 0.2
"#;

    #[test]
    fn parses_sample() {
        let m = ExperimentManifest::parse(SAMPLE).unwrap();
        assert_eq!(m.strategies.len(), 3);
        assert_eq!(m.seeds(), vec![10, 11]);
        assert_eq!(m.train.batch_size, 32);
        assert_eq!(m.scenarios[1].noise().caption_swap_fraction, 0.2);
        assert_eq!(m.scenarios[1].target_snr, 10.0);
        let splits = load_splits(&m.dataset).unwrap();
        assert_eq!((splits.train.len(), splits.val.len(), splits.test.len()), (30, 5, 5));
    }

    #[test]
    fn toml_round_trip() {
        let m = ExperimentManifest::parse(SAMPLE).unwrap();
        let again = ExperimentManifest::parse(&m.to_toml().unwrap()).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn rejects_bad_manifests() {
        let bad = [
            SAMPLE.replace("repeats = 2", "repeats = 0"),
            SAMPLE.replace(r#"strategies = ["fixed", "variance", "cosine-spread"]"#, "strategies = []"),
            SAMPLE.replace("epochs = 2", "epochs = 2\nbogus = 1"),
            SAMPLE.replace("\"variance\"", "\"sometimes\""),
            SAMPLE.replace("caption_swap_fraction = 0.2", "caption_swap_fraction = 1.5"),
            SAMPLE.replace("name = \"caption-noise\"", "name = \"clean\""),
        ];
        for text in &bad {
            let err = ExperimentManifest::parse(text).unwrap_err();
            assert!(err.is_usage(), "{err}");
        }
    }
}
