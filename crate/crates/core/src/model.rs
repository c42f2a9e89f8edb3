//! MLP feature extractor, cosine classifier, ensemble projection head and
//! nearest-class-mean probe.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Tensor, TensorError, NORM_EPS};

pub const DEFAULT_GAMMA: f64 = 16.0;
pub const DEFAULT_WIDTHS: [usize; 2] = [64, 32];

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// He-normal weights `N(0, 2/fan_in)`, row-major `[fan_in × fan_out]`.
pub fn he_normal(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Vec<f64> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect()
}

/// Unit-Gaussian `[d × c]` matrix with every column scaled to unit norm.
pub fn classifier_weights(d: usize, c: usize, rng: &mut Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..d * c).map(|_| StandardNormal.sample(rng)).collect();
    for j in 0..c {
        let norm = (0..d)
            .map(|i| w[i * c + j].powi(2))
            .sum::<f64>()
            .sqrt()
            .max(NORM_EPS);
        for i in 0..d {
            w[i * c + j] /= norm;
        }
    }
    w
}

/// Affine layer `x · W + b` with `W` stored `[in × out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.add_row(&self.bias)?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn detached(&self) -> Linear {
        Linear {
            weight: self.weight.detach(),
            bias: self.bias.detach(),
        }
    }
}

/// ReLU MLP; the last layer is linear and produces the descriptor.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub layers: Vec<Linear>,
}

impl FeatureExtractor {
    /// `widths = [d_in, h1, ..., d]`.
    pub fn init(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                Ok(Linear {
                    weight: Tensor::param(he_normal(w[0], w[1], rng), &[w[0], w[1]])?,
                    bias: Tensor::param(vec![0.0; w[1]], &[w[1]])?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(FeatureExtractor { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim()
    }

    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        let (_, width) = x.dims2("extract")?;
        if width != self.input_dim() {
            return Err(TensorError::Shape {
                op: "extract",
                detail: format!(
                    "input width {width}, extractor expects {}",
                    self.input_dim()
                ),
            }
            .into());
        }
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }
}

/// `z = γ · normalize_rows(v) · normalize_cols(W)`.
#[derive(Debug, Clone)]
pub struct CosineClassifier {
    pub weight: Tensor,
    pub gamma: f64,
}

impl CosineClassifier {
    pub fn init(d: usize, c: usize, gamma: f64, rng: &mut Rng) -> Result<Self> {
        Ok(CosineClassifier {
            weight: Tensor::param(classifier_weights(d, c, rng), &[d, c])?,
            gamma,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn classify(&self, v: &Tensor) -> Result<Tensor> {
        let (_, width) = v.dims2("classify")?;
        if width != self.input_dim() {
            return Err(TensorError::Shape {
                op: "classify",
                detail: format!(
                    "feature width {width}, classifier expects {}",
                    self.input_dim()
                ),
            }
            .into());
        }
        let w_cols = self
            .weight
            .transpose()?
            .l2_normalize(NORM_EPS)
            .transpose()?;
        let v_rows = v.l2_normalize(NORM_EPS);
        Ok(v_rows.matmul(&w_cols)?.scale(self.gamma))
    }
}

/// Linear map `R^d → R^{d·K}` feeding the classifier in the ensemble variant.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub linear: Linear,
    pub k: usize,
}

impl ProjectionHead {
    /// `K` stacked copies of `I_d / √K` and a zero bias, so every teacher
    /// block starts aligned with the student descriptor.
    pub fn block_identity(d: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("projection head needs K >= 1".into()));
        }
        let scale = 1.0 / (k as f64).sqrt();
        let out = d * k;
        let mut w = vec![0.0; d * out];
        for i in 0..d {
            for block in 0..k {
                w[i * out + block * d + i] = scale;
            }
        }
        Ok(ProjectionHead {
            linear: Linear {
                weight: Tensor::param(w, &[d, out])?,
                bias: Tensor::param(vec![0.0; out], &[out])?,
            },
            k,
        })
    }

    pub fn project(&self, v: &Tensor) -> Result<Tensor> {
        let (_, width) = v.dims2("project")?;
        if width != self.linear.in_dim() {
            return Err(TensorError::Shape {
                op: "project",
                detail: format!("input width {width}, head expects {}", self.linear.in_dim()),
            }
            .into());
        }
        self.linear.forward(v)
    }
}

/// Architecture of a [`Model`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Hidden widths followed by the descriptor width `d`.
    pub widths: Vec<usize>,
    pub num_classes: usize,
    pub gamma: f64,
    /// `Some(K)` adds a projection head to `d·K` dimensions.
    pub ensemble_k: Option<usize>,
}

impl ModelSpec {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            widths: DEFAULT_WIDTHS.to_vec(),
            num_classes,
            gamma: DEFAULT_GAMMA,
            ensemble_k: None,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    /// Width seen by the classifier.
    pub fn embedding_dim(&self) -> usize {
        self.feature_dim() * self.ensemble_k.unwrap_or(1)
    }
}

/// Outputs of one forward pass.
pub struct Forward {
    /// Extractor descriptor `v`.
    pub features: Tensor,
    /// Classifier input: `h(v)` with a projection head, otherwise `v`.
    pub embedding: Tensor,
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub extractor: FeatureExtractor,
    pub head: Option<ProjectionHead>,
    pub classifier: CosineClassifier,
}

impl Model {
    /// Fresh parameters drawn from `seed` alone.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        if spec.widths.is_empty() || spec.num_classes < 2 {
            return Err(Error::Config(format!(
                "model needs widths and >= 2 classes, got {:?} / {}",
                spec.widths, spec.num_classes
            )));
        }
        if !(spec.gamma.is_finite() && spec.gamma > 0.0) {
            return Err(Error::Config(format!(
                "gamma must be positive, got {}",
                spec.gamma
            )));
        }
        let mut rng = rng::rng_for(seed, rng::stream::INIT);
        let mut widths = vec![spec.input_dim];
        widths.extend(&spec.widths);
        let extractor = FeatureExtractor::init(&widths, &mut rng)?;
        let classifier =
            CosineClassifier::init(spec.embedding_dim(), spec.num_classes, spec.gamma, &mut rng)?;
        let head = spec
            .ensemble_k
            .map(|k| ProjectionHead::block_identity(spec.feature_dim(), k))
            .transpose()?;
        Ok(Model {
            spec: spec.clone(),
            extractor,
            head,
            classifier,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Forward> {
        let features = self.extractor.extract(x)?;
        let embedding = match &self.head {
            Some(h) => h.project(&features)?,
            None => features.clone(),
        };
        let logits = self.classifier.classify(&embedding)?;
        Ok(Forward {
            features,
            embedding,
            logits,
        })
    }

    /// Copy whose parameters are constants; forward passes record no graph.
    pub fn detached(&self) -> Model {
        Model {
            spec: self.spec.clone(),
            extractor: FeatureExtractor {
                layers: self.extractor.layers.iter().map(Linear::detached).collect(),
            },
            head: self.head.as_ref().map(|h| ProjectionHead {
                linear: h.linear.detached(),
                k: h.k,
            }),
            classifier: CosineClassifier {
                weight: self.classifier.weight.detach(),
                gamma: self.classifier.gamma,
            },
        }
    }

    /// Deep copy with fresh leaves: trainable parameters stay trainable,
    /// frozen ones stay constant, and no gradient state is shared.
    pub fn duplicate(&self) -> Model {
        let copy = |t: &Tensor| {
            if t.requires_grad() {
                t.to_param()
            } else {
                t.detach()
            }
        };
        let linear = |l: &Linear| Linear {
            weight: copy(&l.weight),
            bias: copy(&l.bias),
        };
        Model {
            spec: self.spec.clone(),
            extractor: FeatureExtractor {
                layers: self.extractor.layers.iter().map(linear).collect(),
            },
            head: self.head.as_ref().map(|h| ProjectionHead {
                linear: linear(&h.linear),
                k: h.k,
            }),
            classifier: CosineClassifier {
                weight: copy(&self.classifier.weight),
                gamma: self.classifier.gamma,
            },
        }
    }

    /// Named parameters in a fixed order.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.extractor.layers.iter().enumerate() {
            out.push((format!("extractor.{i}.weight"), &l.weight));
            out.push((format!("extractor.{i}.bias"), &l.bias));
        }
        if let Some(h) = &self.head {
            out.push(("head.weight".into(), &h.linear.weight));
            out.push(("head.bias".into(), &h.linear.bias));
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.extractor.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(h) = &mut self.head {
            out.push(&mut h.linear.weight);
            out.push(&mut h.linear.bias);
        }
        out.push(&mut self.classifier.weight);
        out
    }

    pub fn extractor_parameters(&self) -> Vec<&Tensor> {
        self.extractor
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    /// Turns extractor and head parameters into constants.
    pub fn freeze_representation(&mut self) {
        for l in &mut self.extractor.layers {
            *l = l.detached();
        }
        if let Some(h) = &mut self.head {
            h.linear = h.linear.detached();
        }
    }

    /// Replaces the classifier with a fresh draw from `seed`.
    pub fn reinit_classifier(&mut self, seed: u64) -> Result<()> {
        let mut rng = rng::rng_for(seed, rng::stream::CLASSIFIER_REINIT);
        self.classifier = CosineClassifier::init(
            self.spec.embedding_dim(),
            self.spec.num_classes,
            self.spec.gamma,
            &mut rng,
        )?;
        Ok(())
    }

    /// Row-major classifier inputs for every instance of `d`, `[n × d_eff]`.
    pub fn embed(&self, d: &Dataset) -> Result<Vec<f64>> {
        Ok(self
            .detached()
            .forward(d.features())?
            .embedding
            .data()
            .to_vec())
    }

    /// Row-major descriptors `v` for every instance of `d`.
    pub fn describe(&self, d: &Dataset) -> Result<Vec<f64>> {
        Ok(self
            .detached()
            .forward(d.features())?
            .features
            .data()
            .to_vec())
    }

    pub fn logits(&self, d: &Dataset) -> Result<Vec<f64>> {
        Ok(self
            .detached()
            .forward(d.features())?
            .logits
            .data()
            .to_vec())
    }

    pub fn predict(&self, d: &Dataset) -> Result<Vec<usize>> {
        let c = self.spec.num_classes;
        Ok(self.logits(d)?.chunks(c).map(argmax).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let ckpt = Checkpoint {
            spec: self.spec.clone(),
            config_hash: config_hash.to_string(),
            tensors: self
                .named_parameters()
                .into_iter()
                .map(|(name, t)| StoredTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        let path = path.as_ref();
        let text = serde_json::to_string(&ckpt).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Restores a model and the config hash it was saved with.
    pub fn load(path: impl AsRef<Path>) -> Result<(Model, String)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let mut model = Model::init(&ckpt.spec, 0)?;
        let names: Vec<String> = model
            .named_parameters()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        if names.len() != ckpt.tensors.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} tensors, architecture needs {}",
                ckpt.tensors.len(),
                names.len()
            )));
        }
        for ((slot, name), stored) in model
            .parameters_mut()
            .into_iter()
            .zip(&names)
            .zip(ckpt.tensors)
        {
            if &stored.name != name || stored.shape != slot.shape() {
                return Err(Error::Validation(format!(
                    "checkpoint tensor {} {:?} does not match {name} {:?}",
                    stored.name,
                    stored.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::param(stored.data, &stored.shape)?;
        }
        Ok((model, ckpt.config_hash))
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    spec: ModelSpec,
    config_hash: String,
    tensors: Vec<StoredTensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// One unit-norm centroid per class.
#[derive(Debug, Clone)]
pub struct NcmClassifier {
    centroids: Vec<f64>,
    dim: usize,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    v.iter().map(|x| x / norm).collect()
}

impl NcmClassifier {
    /// Centroid of class `j`: the re-normalized mean of the normalized
    /// features labelled `j`. `features` is row-major `[n × dim]`.
    pub fn fit(features: &[f64], dim: usize, labels: &[usize], num_classes: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Fit(format!(
                "{} feature values for {} labels of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        let mut sums = vec![0.0; num_classes * dim];
        let mut counts = vec![0usize; num_classes];
        for (row, &y) in features.chunks(dim).zip(labels) {
            if y >= num_classes {
                return Err(Error::Fit(format!("label {y} out of range")));
            }
            for (s, v) in sums[y * dim..(y + 1) * dim].iter_mut().zip(normalized(row)) {
                *s += v;
            }
            counts[y] += 1;
        }
        if let Some(j) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Fit(format!("class {j} has no features")));
        }
        let centroids = sums
            .chunks(dim)
            .zip(&counts)
            .flat_map(|(s, &n)| {
                let mean: Vec<f64> = s.iter().map(|x| x / n as f64).collect();
                normalized(&mean)
            })
            .collect();
        Ok(NcmClassifier { centroids, dim })
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.len() / self.dim
    }

    /// Class whose centroid has the highest cosine with `v`.
    pub fn predict(&self, v: &[f64]) -> usize {
        let q = normalized(v);
        let scores: Vec<f64> = self
            .centroids
            .chunks(self.dim)
            .map(|c| c.iter().zip(&q).map(|(a, b)| a * b).sum())
            .collect();
        argmax(&scores)
    }

    pub fn predict_all(&self, features: &[f64]) -> Vec<usize> {
        features.chunks(self.dim).map(|v| self.predict(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng as _, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn identity_extractor_passes_input_through() {
        let fe = FeatureExtractor {
            layers: vec![Linear {
                weight: Tensor::param(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap(),
                bias: Tensor::param(vec![0.0, 0.0], &[2]).unwrap(),
            }],
        };
        let x = Tensor::new(vec![0.3, -2.0, 4.0, 5.5], &[2, 2]).unwrap();
        assert_eq!(fe.extract(&x).unwrap().data(), x.data());
    }

    #[test]
    fn zero_extractor_yields_bias_values() {
        let mut rng = Rng::seed_from_u64(0);
        let mut fe = FeatureExtractor::init(&[3, 4, 2], &mut rng).unwrap();
        for l in &mut fe.layers {
            l.weight = Tensor::zeros(l.weight.shape()).unwrap();
            l.bias = Tensor::zeros(l.bias.shape()).unwrap();
        }
        let x = rand_tensor(&[5, 3], 1);
        assert!(fe.extract(&x).unwrap().data().iter().all(|v| *v == 0.0));
        let bad = rand_tensor(&[5, 4], 1);
        assert!(fe.extract(&bad).is_err());
    }

    #[test]
    fn extractor_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from_u64(2);
        let fe = FeatureExtractor::init(&[3, 5, 4], &mut rng).unwrap();
        let x = rand_tensor(&[6, 3], 3);
        let params: Vec<Tensor> = fe
            .layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .collect();
        let check = gradcheck::<_, Error>(
            &params,
            |p| {
                let fe = FeatureExtractor {
                    layers: p
                        .chunks(2)
                        .map(|w| Linear {
                            weight: w[0].clone(),
                            bias: w[1].clone(),
                        })
                        .collect(),
                };
                Ok(fe.extract(&x)?.sum())
            },
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn cosine_logit_anchor_values() {
        let w = Tensor::param(vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0], &[3, 2]).unwrap();
        let cc = CosineClassifier {
            weight: w,
            gamma: 16.0,
        };
        // column 0 of W, scaled
        let v = Tensor::new(vec![3.0, 0.0, 0.0], &[1, 3]).unwrap();
        let z = cc.classify(&v).unwrap();
        assert!((z.data()[0] - 16.0).abs() < 1e-12);
        assert_eq!(argmax(z.data()), 0);
        // orthogonal to column 1
        assert_eq!(z.data()[1], 0.0);
        let scaled = Tensor::new(vec![3.0 * 7.3, 0.0, 0.0], &[1, 3]).unwrap();
        let z2 = cc.classify(&scaled).unwrap();
        assert!((z2.data()[0] - z.data()[0]).abs() < 1e-9);
    }

    #[test]
    fn projection_head_shapes() {
        let h = ProjectionHead::block_identity(3, 1).unwrap();
        let v = rand_tensor(&[2, 3], 4);
        assert_eq!(h.project(&v).unwrap().data(), v.data());
        let h2 = ProjectionHead::block_identity(2, 2).unwrap();
        let v2 = rand_tensor(&[5, 2], 5);
        assert_eq!(h2.project(&v2).unwrap().shape(), &[5, 4]);
        assert!(ProjectionHead::block_identity(2, 0).is_err());
    }

    #[test]
    fn project_then_classify_gradients() {
        let h = ProjectionHead::block_identity(3, 2).unwrap();
        let mut rng = Rng::seed_from_u64(8);
        let cc = CosineClassifier::init(6, 4, 16.0, &mut rng).unwrap();
        let v = rand_tensor(&[4, 3], 9);
        let mix = rand_tensor(&[4, 4], 10);
        let check = gradcheck::<_, Error>(
            &[
                v,
                h.linear.weight.clone(),
                h.linear.bias.clone(),
                cc.weight.clone(),
            ],
            |p| {
                let head = ProjectionHead {
                    linear: Linear {
                        weight: p[1].clone(),
                        bias: p[2].clone(),
                    },
                    k: 2,
                };
                let cls = CosineClassifier {
                    weight: p[3].clone(),
                    gamma: 16.0,
                };
                let z = cls.classify(&head.project(&p[0])?)?;
                Ok(z.mul(&mix)?.sum())
            },
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn init_is_seeded() {
        let spec = ModelSpec::new(16, 5);
        let a = Model::init(&spec, 3).unwrap();
        let b = Model::init(&spec, 3).unwrap();
        let c = Model::init(&spec, 4).unwrap();
        let flat = |m: &Model| -> Vec<f64> {
            m.named_parameters()
                .iter()
                .flat_map(|(_, t)| t.data().to_vec())
                .collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
        // columns of W are unit norm
        let w = a.classifier.weight.data();
        for j in 0..5 {
            let n: f64 = (0..32).map(|i| w[i * 5 + j].powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn he_init_std() {
        let mut rng = Rng::seed_from_u64(1);
        let w = he_normal(64, 64, &mut rng);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = (2.0f64 / 64.0).sqrt();
        assert!((var.sqrt() - target).abs() < 0.2 * target);
    }

    #[test]
    fn ncm_basics() {
        let feats = vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 3.0];
        let ncm = NcmClassifier::fit(&feats, 2, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(ncm.predict(&[0.9, 0.1]), 0);
        assert_eq!(ncm.predict(&[0.1, 0.9]), 1);
        assert_eq!(ncm.predict(&[1.0, 1.0]), 0);
        assert!(matches!(
            NcmClassifier::fit(&feats, 2, &[0, 0, 0, 0], 2),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut spec = ModelSpec::new(4, 3);
        spec.ensemble_k = Some(2);
        let m = Model::init(&spec, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path, "abc").unwrap();
        let (back, hash) = Model::load(&path).unwrap();
        assert_eq!(hash, "abc");
        let x = rand_tensor(&[3, 4], 12);
        assert_eq!(
            m.forward(&x).unwrap().logits.data(),
            back.forward(&x).unwrap().logits.data()
        );
    }
}
