//! Synthetic labelled feature datasets with AU pseudo-labels and controlled
//! label corruption.
//!
//! Each class gets a random prototype direction scaled to `class_spread`;
//! samples are the prototype plus isotropic Gaussian noise. AU bits come
//! from the class row of an [`EmotionAuTable`] with independent bit flips.
//! The true label is kept next to the observed one so label corrections can
//! be audited.
//!
//! # File format
//!
//! A header of `key=value` lines (`C`, `M`, `D`, `n`, `corruption_rate`,
//! `seed`, in any order) followed by one line per sample:
//!
//! ```text
//! id,observed_label,true_label,au_1,...,au_M,x_1,...,x_D
//! ```
//!
//! AU bits are `0`/`1`; features use 17 significant digits so values
//! round-trip exactly. Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub observed_label: usize,
    /// Ground truth, never shown to training.
    pub true_label: usize,
    pub au_labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub aus: usize,
    pub dim: usize,
    pub corruption_rate: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of samples whose observed label disagrees with the truth.
    pub fn noisy_count(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.observed_label != s.true_label)
            .count()
    }

    pub fn noise_rate(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.noisy_count() as f64 / self.samples.len() as f64
        }
    }

    pub fn observed_labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.observed_label).collect()
    }

    pub fn class_histogram(&self, observed: bool) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for s in &self.samples {
            h[if observed { s.observed_label } else { s.true_label }] += 1;
        }
        h
    }

    /// Splits into `[0, at)` and `[at, n)`, renumbering ids from zero in each
    /// part. Corruption rates are recomputed per part.
    pub fn split_at(&self, at: usize) -> (Dataset, Dataset) {
        let at = at.min(self.samples.len());
        let part = |samples: &[Sample]| {
            let samples: Vec<Sample> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| Sample { id: i, ..s.clone() })
                .collect();
            let mut ds = Dataset {
                samples,
                classes: self.classes,
                aus: self.aus,
                dim: self.dim,
                corruption_rate: 0.0,
                seed: self.seed,
            };
            ds.corruption_rate = ds.noise_rate();
            ds
        };
        (part(&self.samples[..at]), part(&self.samples[at..]))
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.id != i {
                return Err(Error::Validation(format!(
                    "sample ids must be contiguous from 0; found {} at position {i}",
                    s.id
                )));
            }
            if s.observed_label >= self.classes || s.true_label >= self.classes {
                return Err(Error::Validation(format!(
                    "sample {i}: label out of range for C={}",
                    self.classes
                )));
            }
            if s.au_labels.len() != self.aus || s.features.len() != self.dim {
                return Err(Error::Validation(format!(
                    "sample {i}: expected {} AU bits and {} features",
                    self.aus, self.dim
                )));
            }
        }
        Ok(())
    }
}

/// C×M bit table mapping each expression class to its prototype AU pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionAuTable {
    rows: Vec<Vec<bool>>,
}

/// AU columns of the default table.
pub const DEFAULT_AUS: [u8; 12] = [1, 2, 4, 5, 6, 7, 9, 12, 14, 15, 20, 26];

/// Class rows of the default table.
pub const DEFAULT_CLASSES: [&str; 7] = [
    "anger",
    "disgust",
    "fear",
    "happiness",
    "sadness",
    "surprise",
    "contempt",
];

const DEFAULT_ACTIVATIONS: [&[u8]; 7] = [
    &[4, 5, 7],
    &[9, 15],
    &[1, 2, 4, 5, 7, 20, 26],
    &[6, 12],
    &[1, 4, 15],
    &[1, 2, 26],
    &[12, 14],
];

impl EmotionAuTable {
    pub fn new(rows: Vec<Vec<bool>>) -> Result<Self> {
        let table = EmotionAuTable { rows };
        table.check()?;
        Ok(table)
    }

    /// The 7×12 basic-emotion table.
    pub fn facs_default() -> Self {
        let rows = DEFAULT_ACTIVATIONS
            .iter()
            .map(|active| DEFAULT_AUS.iter().map(|au| active.contains(au)).collect())
            .collect();
        EmotionAuTable { rows }
    }

    /// Table for `classes` × `aus`. Uses the top-left block of the default
    /// table when that block is itself valid; otherwise draws a random valid
    /// table from `seed`.
    pub fn for_shape(classes: usize, aus: usize, seed: u64) -> Result<Self> {
        if classes <= DEFAULT_CLASSES.len() && aus <= DEFAULT_AUS.len() {
            let full = Self::facs_default();
            let block = EmotionAuTable {
                rows: full.rows[..classes]
                    .iter()
                    .map(|r| r[..aus].to_vec())
                    .collect(),
            };
            if block.check().is_ok() {
                return Ok(block);
            }
        }
        Self::random(classes, aus, seed)
    }

    fn random(classes: usize, aus: usize, seed: u64) -> Result<Self> {
        if aus < 63 && (1u64 << aus) - 1 < classes as u64 {
            return Err(Error::Config(format!(
                "cannot build {classes} distinct non-empty AU patterns over {aus} AUs"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a0_7ab1e);
        let mut rows: Vec<Vec<bool>> = Vec::with_capacity(classes);
        while rows.len() < classes {
            let row: Vec<bool> = (0..aus).map(|_| rng.random_bool(0.3)).collect();
            if row.iter().any(|&b| b) && !rows.contains(&row) {
                rows.push(row);
            }
        }
        Ok(EmotionAuTable { rows })
    }

    fn check(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if !r.iter().any(|&b| b) {
                return Err(Error::Config(format!("class {i} activates no AU")));
            }
            if self.rows[..i].contains(r) {
                return Err(Error::Config(format!("class {i} duplicates an earlier row")));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    pub fn aus(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn row(&self, class: usize) -> &[bool] {
        &self.rows[class]
    }
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub classes: usize,
    pub aus: usize,
    pub dim: usize,
    pub n: usize,
    pub class_spread: f64,
    pub within_noise: f64,
    /// Per-bit flip probability applied to the class AU pattern.
    pub au_noise: f64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            classes: 7,
            aus: 12,
            dim: 16,
            n: 1000,
            class_spread: 4.0,
            within_noise: 1.0,
            au_noise: 0.05,
            seed: 0,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.aus < 4 {
            return bad(format!("need at least 4 AUs, got {}", self.aus));
        }
        if self.dim == 0 {
            return bad("feature dimension must be positive".into());
        }
        if self.dim == 1 && self.classes > 2 {
            return bad(format!(
                "a 1-dimensional feature space holds only 2 distinct prototypes, got C={}",
                self.classes
            ));
        }
        if self.n < self.classes {
            return bad(format!(
                "sample count n={} is smaller than class count C={}",
                self.n, self.classes
            ));
        }
        if !(self.within_noise >= 0.0 && self.class_spread > self.within_noise) {
            return bad(format!(
                "need class_spread > within_noise >= 0, got {} and {}",
                self.class_spread, self.within_noise
            ));
        }
        if !(0.0..=1.0).contains(&self.au_noise) {
            return bad(format!("au_noise must be in [0, 1], got {}", self.au_noise));
        }
        Ok(())
    }
}

/// Dataset together with the class prototypes that generated it.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: Dataset,
    pub prototypes: Vec<Vec<f64>>,
    pub table: EmotionAuTable,
}

pub fn generate(params: &GenParams) -> Result<Dataset> {
    generate_with_prototypes(params).map(|g| g.dataset)
}

/// Clean dataset: observed labels equal true labels. Sample `i` belongs to
/// class `i mod C`, so any prefix is class-balanced.
pub fn generate_with_prototypes(params: &GenParams) -> Result<Generated> {
    params.validate()?;
    let table = EmotionAuTable::for_shape(params.classes, params.aus, params.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(params.classes);
    while prototypes.len() < params.classes {
        let mut dir: Vec<f64> = (0..params.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let len = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len == 0.0 {
            continue;
        }
        dir.iter_mut().for_each(|x| *x *= params.class_spread / len);
        // Coincident prototypes would make two classes indistinguishable.
        if prototypes.iter().any(|p| distance(p, &dir) == 0.0) {
            continue;
        }
        prototypes.push(dir);
    }

    let samples = (0..params.n)
        .map(|id| {
            let class = id % params.classes;
            let features = prototypes[class]
                .iter()
                .map(|&mu| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    mu + params.within_noise * z
                })
                .collect();
            let au_labels = table
                .row(class)
                .iter()
                .map(|&bit| bit ^ rng.random_bool(params.au_noise))
                .collect();
            Sample {
                id,
                features,
                observed_label: class,
                true_label: class,
                au_labels,
            }
        })
        .collect();

    Ok(Generated {
        dataset: Dataset {
            samples,
            classes: params.classes,
            aus: params.aus,
            dim: params.dim,
            corruption_rate: 0.0,
            seed: params.seed,
        },
        prototypes,
        table,
    })
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Symmetric label noise: exactly `round(rate · n)` samples, chosen
/// uniformly, receive a label drawn uniformly from the classes other than
/// their true one.
pub fn corrupt_labels(ds: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("corruption rate must be in [0, 1), got {rate}")));
    }
    let mut out = ds.clone();
    let n = out.samples.len();
    let count = (rate * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, n, count).into_vec() {
        let s = &mut out.samples[i];
        let mut label = rng.random_range(0..out.classes - 1);
        if label >= s.true_label {
            label += 1;
        }
        s.observed_label = label;
    }
    out.corruption_rate = out.noise_rate();
    Ok(out)
}

/// Deterministic shuffle of sample indices into `ceil(n / batch_size)` batches.
pub fn batches(ds: &Dataset, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let n = ds.samples.len();
    let batch_size = batch_size.clamp(1, n.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    let order = index::sample(&mut rng, n, n).into_vec();
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn to_text(ds: &Dataset) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "C={}", ds.classes);
    let _ = writeln!(out, "M={}", ds.aus);
    let _ = writeln!(out, "D={}", ds.dim);
    let _ = writeln!(out, "n={}", ds.samples.len());
    let _ = writeln!(out, "corruption_rate={:?}", ds.corruption_rate);
    let _ = writeln!(out, "seed={}", ds.seed);
    for s in &ds.samples {
        let _ = write!(out, "{},{},{}", s.id, s.observed_label, s.true_label);
        for &b in &s.au_labels {
            out.push_str(if b { ",1" } else { ",0" });
        }
        for &x in &s.features {
            let _ = write!(out, ",{x:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn from_text(text: &str) -> Result<Dataset> {
    let parse_err = |line: usize, msg: String| Error::Parse { line, msg };

    let mut header: [Option<String>; 6] = Default::default();
    const KEYS: [&str; 6] = ["C", "M", "D", "n", "corruption_rate", "seed"];
    let mut body: Vec<(usize, &str)> = Vec::new();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if body.is_empty() {
            if let Some((k, v)) = line.split_once('=') {
                let k = k.trim();
                let slot = KEYS
                    .iter()
                    .position(|&key| key == k)
                    .ok_or_else(|| parse_err(line_no, format!("unknown header key `{k}`")))?;
                header[slot] = Some(v.trim().to_string());
                continue;
            }
        }
        body.push((line_no, line));
    }

    let mut get = |slot: usize| {
        header[slot]
            .take()
            .ok_or_else(|| parse_err(1, format!("missing header key `{}`", KEYS[slot])))
    };
    let num = |v: String, key: &str| {
        v.parse::<usize>()
            .map_err(|e| parse_err(1, format!("header `{key}`: {e}")))
    };
    let classes = num(get(0)?, "C")?;
    let aus = num(get(1)?, "M")?;
    let dim = num(get(2)?, "D")?;
    let n = num(get(3)?, "n")?;
    let corruption_rate: f64 = get(4)?
        .parse()
        .map_err(|e| parse_err(1, format!("header `corruption_rate`: {e}")))?;
    let seed: u64 = get(5)?
        .parse()
        .map_err(|e| parse_err(1, format!("header `seed`: {e}")))?;

    let width = 3 + aus + dim;
    let mut samples = Vec::with_capacity(body.len());
    for (line_no, line) in body {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width {
            return Err(parse_err(
                line_no,
                format!("expected {width} fields, found {}", fields.len()),
            ));
        }
        let int = |k: usize| {
            fields[k]
                .parse::<usize>()
                .map_err(|e| parse_err(line_no, format!("field {}: {e}", k + 1)))
        };
        let (id, observed_label, true_label) = (int(0)?, int(1)?, int(2)?);
        let au_labels = fields[3..3 + aus]
            .iter()
            .map(|f| match *f {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(parse_err(line_no, format!("AU bit must be 0 or 1, got `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let features = fields[3 + aus..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| parse_err(line_no, format!("feature `{f}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id,
            features,
            observed_label,
            true_label,
            au_labels,
        });
    }

    if samples.len() != n {
        return Err(Error::Validation(format!(
            "header declares n={n} but body has {} samples",
            samples.len()
        )));
    }
    let ds = Dataset {
        samples,
        classes,
        aus,
        dim,
        corruption_rate,
        seed,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_text(ds)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
