//! Paired feature corpora: synthetic generation, the on-disk feature format,
//! seeded splitting and batching, and the two training-noise protocols.
//!
//! Every operation here is a pure function of its inputs and seed.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};

pub const FEATURE_MAGIC: &str = "ALIGNFEAT";
pub const FEATURE_VERSION: u32 = 1;

// RNG streams, so each use of a seed draws independent numbers.
const STREAM_MIXING: u64 = 0;
const STREAM_SAMPLES: u64 = 1;
const STREAM_CAPTIONS: u64 = 2;
const STREAM_IMAGES: u64 = 3;
const STREAM_SPLIT: u64 = 4;
const STREAM_BATCHES: u64 = 5;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn from_stem(stem: &str) -> Option<Split> {
        match stem {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row `k` of `img` and row `k` of `txt` form the pair `ids[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    img: Matrix,
    txt: Matrix,
    ids: Vec<String>,
    split: Option<Split>,
}

impl FeatureDataset {
    pub fn new(img: Matrix, txt: Matrix, ids: Vec<String>, split: Option<Split>) -> Result<Self> {
        if img.rows() != txt.rows() || img.rows() != ids.len() {
            return Err(Error::DimensionMismatch {
                op: "FeatureDataset::new",
                detail: format!(
                    "{} image rows, {} text rows, {} ids",
                    img.rows(),
                    txt.rows(),
                    ids.len()
                ),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if id.is_empty() || id.chars().any(char::is_whitespace) {
                return Err(Error::invalid("ids", format!("`{id}` is not a single token")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self { img, txt, ids, split })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn img(&self) -> &Matrix {
        &self.img
    }

    pub fn txt(&self) -> &Matrix {
        &self.txt
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn split(&self) -> Option<Split> {
        self.split
    }

    pub fn img_dim(&self) -> usize {
        self.img.cols()
    }

    pub fn txt_dim(&self) -> usize {
        self.txt.cols()
    }

    pub fn with_split(mut self, split: Option<Split>) -> Self {
        self.split = split;
        self
    }

    /// Sub-dataset of the listed rows, in the given order.
    pub fn subset(&self, rows: &[usize], split: Option<Split>) -> FeatureDataset {
        FeatureDataset {
            img: self.img.select_rows(rows),
            txt: self.txt.select_rows(rows),
            ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
            split,
        }
    }
}

/// Parameters of the latent-factor generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub pairs: usize,
    pub latent_dim: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.latent_dim > self.d_img.min(self.d_txt) {
            return Err(Error::invalid(
                "latent_dim",
                format!(
                    "must be in 1..=min(d_img, d_txt) = {}, got {}",
                    self.d_img.min(self.d_txt),
                    self.latent_dim
                ),
            ));
        }
        if self.pairs == 0 {
            return Err(Error::invalid("pairs", "must be positive"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid("noise_scale", "must be a finite value >= 0"));
        }
        Ok(())
    }
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    Matrix::new(rows, cols, data).expect("gaussian samples are finite")
}

/// The fixed mixing matrices `A (d_img × latent)` and `B (d_txt × latent)`
/// that [`generate_synthetic`] draws for `spec`. Entries are `N(0, 1/latent)`.
pub fn synthetic_mixing(spec: &SyntheticSpec) -> Result<(Matrix, Matrix)> {
    spec.validate()?;
    let mut r = rng(spec.seed, STREAM_MIXING);
    let scale = 1.0 / (spec.latent_dim as f64).sqrt();
    let a = gaussian_matrix(spec.d_img, spec.latent_dim, scale, &mut r);
    let b = gaussian_matrix(spec.d_txt, spec.latent_dim, scale, &mut r);
    Ok((a, b))
}

/// `img_k = A z_k + σ ε_k`, `txt_k = B z_k + σ ε'_k` with `z_k ~ N(0, I)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    let (a, b) = synthetic_mixing(spec)?;
    generate_with_mixing(spec.pairs, &a, &b, spec.noise_scale, spec.seed)
}

/// Generator core with caller-supplied mixing matrices.
pub fn generate_with_mixing(
    pairs: usize,
    img_mixing: &Matrix,
    txt_mixing: &Matrix,
    noise_scale: f64,
    seed: u64,
) -> Result<FeatureDataset> {
    let latent = img_mixing.cols();
    if txt_mixing.cols() != latent {
        return Err(Error::DimensionMismatch {
            op: "generate_with_mixing",
            detail: format!("latent widths {} and {}", latent, txt_mixing.cols()),
        });
    }
    let mut r = rng(seed, STREAM_SAMPLES);
    let (d_img, d_txt) = (img_mixing.rows(), txt_mixing.rows());
    let mut img = Vec::with_capacity(pairs * d_img);
    let mut txt = Vec::with_capacity(pairs * d_txt);
    let mut z = vec![0.0; latent];
    for _ in 0..pairs {
        z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut r));
        for (out, mixing, dim) in [(&mut img, img_mixing, d_img), (&mut txt, txt_mixing, d_txt)] {
            for row in 0..dim {
                let signal = crate::linalg::dot(mixing.row(row), &z);
                let eps: f64 = StandardNormal.sample(&mut r);
                out.push(signal + noise_scale * eps);
            }
        }
    }
    let width = pairs.to_string().len().max(4);
    let ids = (0..pairs).map(|k| format!("p{k:0width$}")).collect();
    FeatureDataset::new(
        Matrix::new(pairs, d_img, img)?,
        Matrix::new(pairs, d_txt, txt)?,
        ids,
        None,
    )
}

/// Partition sizes for `p` pairs; the test split takes the remainder.
pub fn split_sizes(p: usize, train_frac: f64, val_frac: f64) -> Result<(usize, usize, usize)> {
    let ok = train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0;
    if !ok {
        return Err(Error::invalid(
            "fractions",
            format!("need positive train/val fractions summing below 1, got {train_frac} and {val_frac}"),
        ));
    }
    let n_train = (train_frac * p as f64).round() as usize;
    let n_val = (val_frac * p as f64).round() as usize;
    let n_test = p.saturating_sub(n_train + n_val);
    if n_train == 0 || n_val == 0 || n_test == 0 || n_train + n_val > p {
        return Err(Error::invalid(
            "fractions",
            format!("split of {p} pairs gives {n_train}/{n_val}/{n_test}; every split must be non-empty"),
        ));
    }
    Ok((n_train, n_val, n_test))
}

/// Seeded shuffle-then-cut into train/val/test. Each split keeps the
/// original row order of its members.
pub fn split(
    ds: &FeatureDataset,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset, FeatureDataset)> {
    let (n_train, n_val, _) = split_sizes(ds.len(), train_frac, val_frac)?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng(seed, STREAM_SPLIT));
    let take = |range: std::ops::Range<usize>, tag| {
        let mut rows = order[range].to_vec();
        rows.sort_unstable();
        ds.subset(&rows, Some(tag))
    };
    let train = take(0..n_train, Split::Train);
    let val = take(n_train..n_train + n_val, Split::Val);
    let test = take(n_train + n_val..ds.len(), Split::Test);
    Ok((train, val, test))
}

/// Seed for one epoch's shuffle, derived from a run seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One epoch of shuffled index batches. A trailing batch with fewer than two
/// pairs is dropped.
pub fn batches(len: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::invalid("batch_size", format!("must be at least 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng(epoch_seed, STREAM_BATCHES));
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Training-noise scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub caption_swap_fraction: f64,
    pub image_noise_fraction: f64,
    pub target_snr: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            caption_swap_fraction: 0.0,
            image_noise_fraction: 0.0,
            target_snr: 10.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("caption_swap_fraction", self.caption_swap_fraction),
            ("image_noise_fraction", self.image_noise_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid("noise", format!("{name} = {f} is outside [0, 1]")));
            }
        }
        if !(self.target_snr > 0.0) {
            return Err(Error::invalid("target_snr", format!("must be positive, got {}", self.target_snr)));
        }
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        self.caption_swap_fraction == 0.0 && self.image_noise_fraction == 0.0
    }
}

fn noisy_count(fraction: f64, p: usize) -> usize {
    // guard against 0.2 * 100 = 20.000000000000004 style rounding
    (fraction * p as f64 + 1e-9).floor() as usize
}

/// Replaces a seeded subset of captions with a derangement of that subset,
/// so every touched pair is mismatched.
pub fn inject_caption_noise(ds: &FeatureDataset, spec: &NoiseSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    if spec.caption_swap_fraction == 0.0 {
        return Ok(ds.clone());
    }
    let k = noisy_count(spec.caption_swap_fraction, ds.len());
    if k < 2 {
        return Err(Error::invalid(
            "caption_swap_fraction",
            format!("selects {k} of {} captions; a derangement needs at least 2", ds.len()),
        ));
    }
    let mut r = rng(spec.seed, STREAM_CAPTIONS);
    let mut chosen = index::sample(&mut r, ds.len(), k).into_vec();
    chosen.sort_unstable();
    let mut perm: Vec<usize> = (0..k).collect();
    loop {
        perm.shuffle(&mut r);
        if perm.iter().enumerate().all(|(a, &b)| a != b) {
            break;
        }
    }
    let mut txt = ds.txt.clone();
    for (slot, &src) in perm.iter().enumerate() {
        let to = chosen[slot];
        let from = chosen[src];
        txt.row_mut(to).copy_from_slice(ds.txt.row(from));
    }
    Ok(FeatureDataset {
        txt,
        ..ds.clone()
    })
}

/// Adds isotropic Gaussian noise to a seeded subset of image rows, scaled per
/// row so that `‖x‖² / E‖n‖² = target_snr`.
pub fn inject_image_noise(ds: &FeatureDataset, spec: &NoiseSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    if spec.image_noise_fraction == 0.0 {
        return Ok(ds.clone());
    }
    let k = noisy_count(spec.image_noise_fraction, ds.len());
    if k == 0 {
        return Err(Error::invalid(
            "image_noise_fraction",
            format!("selects no rows out of {}", ds.len()),
        ));
    }
    let mut r = rng(spec.seed, STREAM_IMAGES);
    let mut chosen = index::sample(&mut r, ds.len(), k).into_vec();
    chosen.sort_unstable();
    let dim = ds.img_dim() as f64;
    let mut img = ds.img.clone();
    for &row in &chosen {
        let x = img.row_mut(row);
        let signal = norm(x);
        if signal == 0.0 {
            return Err(Error::ZeroNormRow { row });
        }
        let sd = signal / (spec.target_snr * dim).sqrt();
        for v in x.iter_mut() {
            let eps: f64 = StandardNormal.sample(&mut r);
            *v += sd * eps;
        }
    }
    Ok(FeatureDataset {
        img,
        ..ds.clone()
    })
}

/// Applies caption noise, then image noise, as configured.
pub fn apply_noise(ds: &FeatureDataset, spec: &NoiseSpec) -> Result<FeatureDataset> {
    let captions = inject_caption_noise(ds, spec)?;
    inject_image_noise(&captions, spec)
}

/// Formats a real with 17 significant digits.
pub(crate) fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn write_reals(out: &mut impl Write, row: &[f64]) -> std::io::Result<()> {
    let mut first = true;
    for v in row {
        if !first {
            out.write_all(b" ")?;
        }
        first = false;
        out.write_all(fmt_real(*v).as_bytes())?;
    }
    out.write_all(b"\n")
}

pub(crate) fn parse_reals(path: &Path, line_no: usize, line: &str, expected: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(expected);
    for tok in line.split_whitespace() {
        let v: f64 = tok.parse().map_err(|_| Error::BadNumber {
            path: path.to_path_buf(),
            line: line_no,
            token: tok.to_string(),
        })?;
        if !v.is_finite() {
            return Err(Error::BadNumber {
                path: path.to_path_buf(),
                line: line_no,
                token: tok.to_string(),
            });
        }
        out.push(v);
    }
    if out.len() != expected {
        return Err(Error::RowLength {
            path: path.to_path_buf(),
            line: line_no,
            expected,
            found: out.len(),
        });
    }
    Ok(out)
}

/// Writes the feature file: a header line then three lines per pair
/// (id, image reals, text reals).
pub fn save_features(ds: &FeatureDataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        writeln!(
            out,
            "{FEATURE_MAGIC} {FEATURE_VERSION} {} {} {}",
            ds.len(),
            ds.img_dim(),
            ds.txt_dim()
        )?;
        for (k, id) in ds.ids.iter().enumerate() {
            writeln!(out, "{id}")?;
            write_reals(out, ds.img.row(k))?;
            write_reals(out, ds.txt.row(k))?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

fn parse_count(path: &Path, tok: Option<&str>, what: &str) -> Result<usize> {
    let tok = tok.ok_or_else(|| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: format!("missing {what}"),
    })?;
    tok.parse().map_err(|_| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: format!("{what} `{tok}` is not a non-negative integer"),
    })
}

/// Reads a feature file. The split tag is taken from the file stem when it
/// is `train`, `val` or `test`.
pub fn load_features(path: &Path) -> Result<FeatureDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let header = match lines.next() {
        Some((_, h)) if !h.trim().is_empty() => h,
        _ => {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: "empty file".into(),
            })
        }
    };
    let mut toks = header.split_whitespace();
    if toks.next() != Some(FEATURE_MAGIC) {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("expected `{FEATURE_MAGIC}` tag"),
        });
    }
    let version = toks.next().unwrap_or("");
    if version != FEATURE_VERSION.to_string() {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version.to_string(),
            expected: FEATURE_VERSION,
        });
    }
    let p = parse_count(path, toks.next(), "record count")?;
    let d_img = parse_count(path, toks.next(), "image dimension")?;
    let d_txt = parse_count(path, toks.next(), "text dimension")?;
    if toks.next().is_some() {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "trailing tokens".into(),
        });
    }

    let mut body: Vec<(usize, &str)> = lines.collect();
    while body.last().is_some_and(|(_, l)| l.trim().is_empty()) {
        body.pop();
    }
    if body.len() != 3 * p {
        return Err(Error::RecordCount {
            path: path.to_path_buf(),
            declared: p,
            found: body.len() / 3,
        });
    }
    let mut img = Vec::with_capacity(p * d_img);
    let mut txt = Vec::with_capacity(p * d_txt);
    let mut ids = Vec::with_capacity(p);
    for rec in body.chunks(3) {
        let (id_line, id) = rec[0];
        let id = id.trim();
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("line {id_line}: `{id}` is not an id token"),
            });
        }
        ids.push(id.to_string());
        img.extend(parse_reals(path, rec[1].0, rec[1].1, d_img)?);
        txt.extend(parse_reals(path, rec[2].0, rec[2].1, d_txt)?);
    }
    let split = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(Split::from_stem);
    FeatureDataset::new(
        Matrix::new(p, d_img, img)?,
        Matrix::new(p, d_txt, txt)?,
        ids,
        split,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(pairs: usize) -> SyntheticSpec {
        SyntheticSpec {
            pairs,
            latent_dim: 4,
            d_img: 6,
            d_txt: 5,
            noise_scale: 0.3,
            seed: 9,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&spec(30)).unwrap();
        assert_eq!(a, generate_synthetic(&spec(30)).unwrap());
        assert_ne!(
            a,
            generate_synthetic(&SyntheticSpec { seed: 10, ..spec(30) }).unwrap()
        );
    }

    #[test]
    fn shared_mixing_without_noise_gives_identical_rows() {
        let s = SyntheticSpec {
            d_txt: 6,
            noise_scale: 0.0,
            ..spec(10)
        };
        let (a, _) = synthetic_mixing(&s).unwrap();
        let ds = generate_with_mixing(10, &a, &a, 0.0, 3).unwrap();
        assert_eq!(ds.img(), ds.txt());
    }

    #[test]
    fn generation_rejects_wide_latent() {
        let s = SyntheticSpec {
            latent_dim: 7,
            ..spec(10)
        };
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn split_600_100_100() {
        assert_eq!(split_sizes(8000, 0.75, 0.125).unwrap(), (6000, 1000, 1000));
        assert_eq!(split_sizes(800, 0.75, 0.125).unwrap(), (600, 100, 100));
        assert!(split_sizes(3, 0.75, 0.125).is_err());
        assert!(split_sizes(100, 0.9, 0.1).is_err());
    }

    #[test]
    fn split_partitions_and_is_deterministic() {
        let ds = generate_synthetic(&spec(40)).unwrap();
        let (a, b, c) = split(&ds, 0.5, 0.25, 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (20, 10, 10));
        let mut all: Vec<&String> = a.ids().iter().chain(b.ids()).chain(c.ids()).collect();
        all.sort();
        let mut orig: Vec<&String> = ds.ids().iter().collect();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(split(&ds, 0.5, 0.25, 1).unwrap().0, a);
        assert_eq!(a.split(), Some(Split::Train));
        assert_eq!(c.split(), Some(Split::Test));
    }

    #[test]
    fn batching_rules() {
        let b = batches(64, 32, 5).unwrap();
        assert_eq!(b.len(), 2);
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..64).collect::<Vec<_>>());
        assert_eq!(b, batches(64, 32, 5).unwrap());
        assert_ne!(b, batches(64, 32, 6).unwrap());

        let b = batches(65, 32, 5).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.concat().len(), 64);

        let b = batches(70, 32, 5).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 6]);
        assert!(batches(10, 1, 0).is_err());
    }

    #[test]
    fn epoch_seeds_differ() {
        assert_ne!(epoch_seed(1, 0), epoch_seed(1, 1));
        assert_ne!(epoch_seed(1, 0), epoch_seed(2, 0));
        assert_eq!(epoch_seed(7, 3), epoch_seed(7, 3));
    }

    #[test]
    fn caption_noise_cases() {
        let ds = generate_synthetic(&spec(100)).unwrap();
        let none = NoiseSpec::default();
        assert_eq!(inject_caption_noise(&ds, &none).unwrap(), ds);

        let two = generate_synthetic(&spec(2)).unwrap();
        let full = NoiseSpec {
            caption_swap_fraction: 1.0,
            ..NoiseSpec::default()
        };
        let swapped = inject_caption_noise(&two, &full).unwrap();
        assert_eq!(swapped.txt().row(0), two.txt().row(1));
        assert_eq!(swapped.txt().row(1), two.txt().row(0));

        let fifth = NoiseSpec {
            caption_swap_fraction: 0.2,
            seed: 4,
            ..NoiseSpec::default()
        };
        let noisy = inject_caption_noise(&ds, &fifth).unwrap();
        let changed: Vec<usize> = (0..100).filter(|&k| noisy.txt().row(k) != ds.txt().row(k)).collect();
        assert_eq!(changed.len(), 20);
        assert_eq!(noisy.img(), ds.img());
        assert_eq!(noisy.ids(), ds.ids());
        // each corrupted caption came from another selected pair
        for &k in &changed {
            let src = (0..100).find(|&j| ds.txt().row(j) == noisy.txt().row(k)).unwrap();
            assert_ne!(src, k);
            assert!(changed.contains(&src));
        }

        let tiny = NoiseSpec {
            caption_swap_fraction: 0.01,
            ..NoiseSpec::default()
        };
        assert!(inject_caption_noise(&ds, &tiny).is_err());
    }

    #[test]
    fn caption_noise_is_a_derangement_for_small_sets() {
        for p in 2..=8 {
            let ds = generate_synthetic(&spec(p)).unwrap();
            for seed in 0..50 {
                let s = NoiseSpec {
                    caption_swap_fraction: 1.0,
                    seed,
                    ..NoiseSpec::default()
                };
                let noisy = inject_caption_noise(&ds, &s).unwrap();
                for k in 0..p {
                    assert_ne!(noisy.txt().row(k), ds.txt().row(k), "p={p} seed={seed} row {k}");
                }
            }
        }
    }

    #[test]
    fn image_noise_cases() {
        let ds = generate_synthetic(&spec(50)).unwrap();
        assert_eq!(inject_image_noise(&ds, &NoiseSpec::default()).unwrap(), ds);

        let s = NoiseSpec {
            image_noise_fraction: 0.2,
            seed: 3,
            ..NoiseSpec::default()
        };
        let noisy = inject_image_noise(&ds, &s).unwrap();
        let changed = (0..50).filter(|&k| noisy.img().row(k) != ds.img().row(k)).count();
        assert_eq!(changed, 10);
        assert_eq!(noisy.txt(), ds.txt());

        let quiet = NoiseSpec {
            image_noise_fraction: 1.0,
            target_snr: 1e16,
            ..NoiseSpec::default()
        };
        let barely = inject_image_noise(&ds, &quiet).unwrap();
        for k in 0..50 {
            let d: Vec<f64> = barely.img().row(k).iter().zip(ds.img().row(k)).map(|(a, b)| a - b).collect();
            assert!(norm(&d) < 1e-6 * norm(ds.img().row(k)));
        }
    }

    #[test]
    fn image_noise_hits_target_snr_on_average() {
        let one = generate_synthetic(&SyntheticSpec {
            d_img: 64,
            d_txt: 8,
            ..spec(1)
        })
        .unwrap();
        let x = one.img().row(0).to_vec();
        let signal = norm(&x).powi(2);
        let mut ratio = 0.0;
        for seed in 0..1000 {
            let s = NoiseSpec {
                image_noise_fraction: 1.0,
                target_snr: 10.0,
                seed,
                ..NoiseSpec::default()
            };
            let noisy = inject_image_noise(&one, &s).unwrap();
            let n2: f64 = noisy.img().row(0).iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum();
            ratio += n2 / signal;
        }
        ratio /= 1000.0;
        assert!((ratio - 0.1).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn image_noise_rejects_zero_rows() {
        let ds = FeatureDataset::new(
            Matrix::zeros(2, 3),
            Matrix::identity(2),
            vec!["a".into(), "b".into()],
            None,
        )
        .unwrap();
        let s = NoiseSpec {
            image_noise_fraction: 1.0,
            ..NoiseSpec::default()
        };
        assert!(matches!(inject_image_noise(&ds, &s), Err(Error::ZeroNormRow { .. })));
    }

    #[test]
    fn file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&spec(10)).unwrap();
        let path = dir.path().join("train.feat");
        save_features(&ds, &path).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back, ds.clone().with_split(Some(Split::Train)));

        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("ALIGNFEAT 1 10 6 5\n"));

        // header promises 10 records, body holds 9
        let truncated: Vec<&str> = text.lines().take(1 + 27).collect();
        let short = dir.path().join("short.feat");
        fs::write(&short, truncated.join("\n")).unwrap();
        assert!(matches!(
            load_features(&short),
            Err(Error::RecordCount { declared: 10, found: 9, .. })
        ));

        let empty = dir.path().join("empty.feat");
        fs::write(&empty, "").unwrap();
        assert!(matches!(load_features(&empty), Err(Error::MalformedHeader { .. })));

        let bad_row = dir.path().join("badrow.feat");
        fs::write(&bad_row, "ALIGNFEAT 1 1 2 1\na\n1.0\n2.0\n").unwrap();
        assert!(matches!(load_features(&bad_row), Err(Error::RowLength { .. })));

        let dup = dir.path().join("dup.feat");
        fs::write(&dup, "ALIGNFEAT 1 2 1 1\na\n1\n2\na\n3\n4\n").unwrap();
        assert!(matches!(load_features(&dup), Err(Error::DuplicateId(_))));

        let ver = dir.path().join("ver.feat");
        fs::write(&ver, "ALIGNFEAT 2 0 1 1\n").unwrap();
        assert!(matches!(load_features(&ver), Err(Error::Version { .. })));
    }

    proptest! {
        #[test]
        fn features_round_trip_exactly(
            vals in proptest::collection::vec(-1e300f64..1e300, 6),
            tiny in proptest::collection::vec(-1e-300f64..1e-300, 3),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let img = Matrix::new(3, 2, vals).unwrap();
            let txt = Matrix::new(3, 1, tiny).unwrap();
            let ds = FeatureDataset::new(img, txt, vec!["x".into(), "y".into(), "z".into()], None).unwrap();
            let path = dir.path().join("corpus.feat");
            save_features(&ds, &path).unwrap();
            prop_assert_eq!(load_features(&path).unwrap(), ds);
        }
    }
}
