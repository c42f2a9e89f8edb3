//! Long-tailed datasets: synthesis, CSV persistence, shot splits and input
//! noise augmentation.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const DEFAULT_TEST_PER_CLASS: usize = 50;
pub const DEFAULT_AUGMENT_SIGMA: f64 = 0.01;

/// Labelled feature vectors with per-class counts.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
    pub name: String,
}

/// Content equality; `name` is metadata and not compared.
impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.features.shape() == other.features.shape()
            && self.features.data() == other.features.data()
            && self.labels == other.labels
            && self.class_counts == other.class_counts
    }
}

impl Dataset {
    /// Builds a dataset over `num_classes` classes from row-major features.
    pub fn new(
        name: impl Into<String>,
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("dataset has no instances".into()));
        }
        let features = Tensor::new(features, &[labels.len(), dim])?;
        features.check_finite("dataset features")?;
        let mut class_counts = vec![0; num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Validation(format!(
                    "instance {i} has label {y} but only {num_classes} classes exist"
                )));
            }
            class_counts[y] += 1;
        }
        Ok(Dataset {
            features,
            labels,
            class_counts,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    /// Instance indices grouped by class.
    pub fn class_members(&self) -> Vec<Vec<usize>> {
        let mut members = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            members[y].push(i);
        }
        members
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.features.data()[i * d..(i + 1) * d]
    }

    /// Features and labels of the given instances, in order.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let d = self.dim();
        let mut x = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            x.extend_from_slice(self.row(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(x, &[indices.len(), d])?, labels))
    }

    /// Writes the canonical CSV form: `label,f0,...,f{d-1}` then one row per
    /// instance. Floats use the shortest representation that parses back to
    /// the same bits.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str("label");
        for j in 0..self.dim() {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&self.labels[i].to_string());
            for v in self.row(i) {
                out.push(',');
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Loads a CSV, inferring the class count from the largest label.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_impl(path.as_ref(), None)
    }

    /// Loads a CSV whose labels must all be below `num_classes`.
    pub fn load_with_classes(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        Self::load_impl(path.as_ref(), Some(num_classes))
    }

    fn load_impl(path: &Path, num_classes: Option<usize>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse_csv(&text, name, num_classes)
    }

    pub fn parse_csv(text: &str, name: String, num_classes: Option<usize>) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty file".into(),
        })?;
        let columns: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
        if columns.first() != Some(&"label") || columns.len() < 2 {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `label,f0,...`, got `{header}`"),
            });
        }
        for (j, col) in columns[1..].iter().enumerate() {
            if *col != format!("f{j}") {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("column {} should be `f{j}`, got `{col}`", j + 1),
                });
            }
        }
        let dim = columns.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (idx, raw) in lines {
            let line = idx + 1;
            let raw = raw.trim_end_matches('\r');
            if raw.is_empty() {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, got {}", dim + 1, fields.len()),
                });
            }
            let label: usize = fields[0].parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid label `{}`", fields[0]),
            })?;
            labels.push(label);
            for f in &fields[1..] {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("invalid feature `{f}`"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("non-finite feature `{f}`"),
                    });
                }
                features.push(v);
            }
        }
        if labels.is_empty() {
            return Err(Error::Parse {
                line: 2,
                message: "no instances".into(),
            });
        }
        let inferred = labels.iter().max().map_or(0, |m| m + 1);
        let num_classes = num_classes.unwrap_or(inferred);
        Self::new(name, features, dim, labels, num_classes)
    }
}

/// Reporting bucket of a class by its training count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotTag {
    Many,
    Mid,
    Few,
}

impl fmt::Display for ShotTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShotTag::Many => "many",
            ShotTag::Mid => "mid",
            ShotTag::Few => "few",
        })
    }
}

/// Many-shot: `n_j > many`; few-shot: `n_j < few`; mid-shot otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotSplit {
    pub many: usize,
    pub few: usize,
}

impl Default for ShotSplit {
    fn default() -> Self {
        ShotSplit { many: 100, few: 20 }
    }
}

impl ShotSplit {
    /// Desk-scale thresholds: 60% and 20% of the head class count.
    pub fn relative_to_head(head_count: usize) -> Self {
        ShotSplit {
            many: (0.6 * head_count as f64).round() as usize,
            few: (0.2 * head_count as f64).round() as usize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.few > self.many {
            return Err(Error::Validation(format!(
                "few threshold {} exceeds many threshold {}",
                self.few, self.many
            )));
        }
        Ok(())
    }

    pub fn tag(&self, count: usize) -> ShotTag {
        if count > self.many {
            ShotTag::Many
        } else if count < self.few {
            ShotTag::Few
        } else {
            ShotTag::Mid
        }
    }

    /// Tags every class of `counts`.
    pub fn assign(&self, counts: &[usize]) -> Result<Vec<ShotTag>> {
        self.validate()?;
        Ok(counts.iter().map(|&n| self.tag(n)).collect())
    }
}

pub fn split_classes(d: &Dataset, split: &ShotSplit) -> Result<Vec<ShotTag>> {
    split.assign(d.class_counts())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Decay {
    /// `n_j = head · (tail/head)^(j/(c−1))`
    Exponential,
    /// `n_j = head / (1 + a·j)^s`, with `a` fixed so the last class gets `tail`.
    Zipf { s: f64 },
}

/// Recipe for a synthetic long-tailed dataset of Gaussian class clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailProfile {
    pub num_classes: usize,
    pub head_count: usize,
    pub tail_count: usize,
    #[serde(default = "default_decay")]
    pub decay: Decay,
    pub feature_dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
}

fn default_decay() -> Decay {
    Decay::Exponential
}

fn default_test_per_class() -> usize {
    DEFAULT_TEST_PER_CLASS
}

impl LongTailProfile {
    /// The fixed benchmark: 20 classes from 200 down to 5 training
    /// instances in 16 dimensions, 50 test instances per class.
    pub fn benchmark(seed: u64) -> Self {
        LongTailProfile {
            num_classes: 20,
            head_count: 200,
            tail_count: 5,
            decay: Decay::Exponential,
            feature_dim: 16,
            class_separation: 3.0,
            noise_sigma: 1.0,
            seed,
            test_per_class: DEFAULT_TEST_PER_CLASS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.tail_count < 1 || self.head_count < self.tail_count {
            return fail(format!(
                "need head_count >= tail_count >= 1, got {} and {}",
                self.head_count, self.tail_count
            ));
        }
        if self.feature_dim < 1 {
            return fail("feature_dim must be positive".into());
        }
        if self.test_per_class < 1 {
            return fail("test_per_class must be positive".into());
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return fail("class_separation must be positive".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return fail("noise_sigma must be non-negative".into());
        }
        if let Decay::Zipf { s } = self.decay {
            if !(s.is_finite() && s > 0.0) {
                return fail(format!("zipf exponent must be positive, got {s}"));
            }
        }
        Ok(())
    }

    /// Training count per class, non-increasing from `head_count` to
    /// `tail_count`.
    pub fn class_counts(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let c = self.num_classes;
        let (head, tail) = (self.head_count as f64, self.tail_count as f64);
        let last = (c - 1) as f64;
        let counts = (0..c)
            .map(|j| {
                let n = match self.decay {
                    Decay::Exponential => head * (tail / head).powf(j as f64 / last),
                    Decay::Zipf { s } => {
                        let a = ((head / tail).powf(1.0 / s) - 1.0) / last;
                        head / (1.0 + a * j as f64).powf(s)
                    }
                };
                n.round() as usize
            })
            .collect();
        Ok(counts)
    }
}

/// Draws per-class Gaussian clusters: a long-tailed training set and a
/// balanced test set from independent sample streams.
pub fn synthesize(profile: &LongTailProfile) -> Result<(Dataset, Dataset)> {
    let counts = profile.class_counts()?;
    let d = profile.feature_dim;
    let mut mean_rng = rng::rng_for(profile.seed, rng::stream::CLASS_MEANS);
    let means: Vec<Vec<f64>> = (0..profile.num_classes)
        .map(|_| {
            let raw: Vec<f64> = (0..d)
                .map(|_| StandardNormal.sample(&mut mean_rng))
                .collect();
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            raw.iter()
                .map(|x| x / norm * profile.class_separation)
                .collect()
        })
        .collect();

    let draw = |per_class: &dyn Fn(usize) -> usize, stream: u64, name: &str| -> Result<Dataset> {
        let mut rng = rng::rng_for(profile.seed, stream);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (j, mean) in means.iter().enumerate() {
            for _ in 0..per_class(j) {
                for m in mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features.push(m + profile.noise_sigma * z);
                }
                labels.push(j);
            }
        }
        Dataset::new(name, features, d, labels, profile.num_classes)
    };

    let train = draw(&|j| counts[j], rng::stream::TRAIN_SAMPLES, "train")?;
    let test = draw(
        &|_| profile.test_per_class,
        rng::stream::TEST_SAMPLES,
        "test",
    )?;
    Ok((train, test))
}

/// Adds i.i.d. `N(0, sigma²)` noise to every input value.
pub fn augment(x: &Tensor, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Validation(format!(
            "augment sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let noise = Normal::new(0.0, sigma).expect("sigma validated");
    let data = x.data().iter().map(|v| v + noise.sample(rng)).collect();
    Ok(Tensor::new(data, x.shape())?)
}

/// Uniform index in `0..n`.
pub(crate) fn uniform_index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
