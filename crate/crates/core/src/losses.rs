//! Training objectives: cross-entropy, feature distillation, classifier
//! distillation, their hybrid, and ensemble feature distillation.
//!
//! Every loss is a batch mean. Teacher tensors are detached on entry, so no
//! gradient ever reaches them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softmax_raw, Tensor, TensorError, NORM_EPS};

pub const DEFAULT_ALPHA: f64 = 0.4;
pub const DEFAULT_BETA: f64 = 100.0;
pub const DEFAULT_TEMPERATURE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    None,
    Feature,
    Classifier,
    Hybrid,
    Ensemble,
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistillMode::None => "none",
            DistillMode::Feature => "feature",
            DistillMode::Classifier => "classifier",
            DistillMode::Hybrid => "hybrid",
            DistillMode::Ensemble => "ensemble",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub mode: DistillMode,
    /// Number of concatenated teacher descriptors (ensemble mode).
    pub k: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            temperature: DEFAULT_TEMPERATURE,
            mode: DistillMode::Feature,
            k: 1,
        }
    }
}

impl DistillConfig {
    pub fn none() -> Self {
        DistillConfig {
            mode: DistillMode::None,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        Ok(())
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Validation(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        data[i * classes + y] = 1.0;
    }
    Ok(Tensor::new(data, &[labels.len(), classes])?)
}

fn batch_rows(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, c) = logits.dims2("cross_entropy")?;
    if b != labels.len() {
        return Err(TensorError::Shape {
            op: "cross_entropy",
            detail: format!("{b} logit rows for {} labels", labels.len()),
        }
        .into());
    }
    Ok((b, c))
}

/// Mean of `−log softmax(z)[y]` over the batch.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = batch_rows(logits, labels)?;
    let picked = logits.log_softmax().mul(&one_hot(labels, c)?)?;
    Ok(picked.sum().scale(-1.0 / b as f64))
}

/// Mean of `−Σ_j σ(ẑ/T)_j · log σ(z/T)_j`; the teacher side is a constant.
pub fn soft_cross_entropy(
    logits: &Tensor,
    teacher_logits: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    let (b, c) = logits.dims2("soft_cross_entropy")?;
    if teacher_logits.shape() != logits.shape() {
        return Err(TensorError::Shape {
            op: "soft_cross_entropy",
            detail: format!(
                "student {:?} vs teacher {:?}",
                logits.shape(),
                teacher_logits.shape()
            ),
        }
        .into());
    }
    let scaled: Vec<f64> = teacher_logits
        .data()
        .iter()
        .map(|z| z / temperature)
        .collect();
    let target = Tensor::new(softmax_raw(&scaled, c), &[b, c])?;
    let log_q = logits.scale(1.0 / temperature).log_softmax();
    Ok(log_q.mul(&target)?.sum().scale(-1.0 / b as f64))
}

/// Mean of `1 − cos(v_i, v̂_i)`, in `[0, 2]`.
pub fn feature_distance(v: &Tensor, v_hat: &Tensor) -> Result<Tensor> {
    let (_, d) = v.dims2("feature_distance")?;
    if v_hat.shape() != v.shape() {
        return Err(TensorError::Shape {
            op: "feature_distance",
            detail: format!(
                "student {:?} vs teacher {:?} (width {d})",
                v.shape(),
                v_hat.shape()
            ),
        }
        .into());
    }
    let target = v_hat.detach().l2_normalize(NORM_EPS);
    let cos = v.l2_normalize(NORM_EPS).mul(&target)?.sum_rows();
    Ok(Tensor::scalar(1.0).sub(&cos.mean())?)
}

/// `(1−α)·CE + α·β·ℓ_F(v, v̂)`.
pub fn cbd_loss(
    logits: &Tensor,
    labels: &[usize],
    v: &Tensor,
    v_hat: &Tensor,
    cfg: &DistillConfig,
) -> Result<Tensor> {
    let ce = cross_entropy(logits, labels)?;
    let lf = feature_distance(v, v_hat)?;
    combine(&ce, &lf.scale(cfg.beta), cfg.alpha)
}

/// `(1−α)·CE + α·T²·CE(σ(z/T), σ(ẑ/T))`.
pub fn classifier_distill_loss(
    logits: &Tensor,
    labels: &[usize],
    teacher_logits: &Tensor,
    cfg: &DistillConfig,
) -> Result<Tensor> {
    let ce = cross_entropy(logits, labels)?;
    let t = cfg.temperature;
    let soft = soft_cross_entropy(logits, teacher_logits, t)?;
    combine(&ce, &soft.scale(t * t), cfg.alpha)
}

/// `(1−α)·CE + α·(β·ℓ_F + T²·CE_soft)/2`.
pub fn hybrid_loss(
    logits: &Tensor,
    labels: &[usize],
    v: &Tensor,
    v_hat: &Tensor,
    teacher_logits: &Tensor,
    cfg: &DistillConfig,
) -> Result<Tensor> {
    let ce = cross_entropy(logits, labels)?;
    let t = cfg.temperature;
    let feat = feature_distance(v, v_hat)?.scale(cfg.beta);
    let soft = soft_cross_entropy(logits, teacher_logits, t)?.scale(t * t);
    combine(&ce, &feat.add(&soft)?.scale(0.5), cfg.alpha)
}

/// `(1−α)·CE + α·β·(1 − cos(h(v), V̂))` with `V̂` the concatenation of `K`
/// normalized teacher descriptors.
pub fn ensemble_loss(
    logits: &Tensor,
    labels: &[usize],
    hv: &Tensor,
    teacher_concat: &Tensor,
    cfg: &DistillConfig,
) -> Result<Tensor> {
    let (_, width) = hv.dims2("ensemble_loss")?;
    let (_, target_width) = teacher_concat.dims2("ensemble_loss")?;
    if width != target_width || cfg.k == 0 || target_width % cfg.k != 0 {
        return Err(TensorError::Shape {
            op: "ensemble_loss",
            detail: format!(
                "projected width {width} and teacher width {target_width} must both equal d·K with K={}",
                cfg.k
            ),
        }
        .into());
    }
    let ce = cross_entropy(logits, labels)?;
    let lf = feature_distance(hv, teacher_concat)?;
    combine(&ce, &lf.scale(cfg.beta), cfg.alpha)
}

fn combine(ce: &Tensor, distill: &Tensor, alpha: f64) -> Result<Tensor> {
    Ok(ce.scale(1.0 - alpha).add(&distill.scale(alpha))?)
}

/// Concatenates per-teacher descriptors row by row, normalizing each block.
/// Every entry of `per_teacher` is row-major `[n × d]`.
pub fn concat_teacher_features(per_teacher: &[&[f64]], rows: usize, d: usize) -> Result<Vec<f64>> {
    if per_teacher.iter().any(|t| t.len() != rows * d) {
        return Err(Error::Validation(
            "teacher descriptor tables differ in size".into(),
        ));
    }
    let k = per_teacher.len();
    let mut out = Vec::with_capacity(rows * d * k);
    for i in 0..rows {
        for table in per_teacher {
            let row = &table[i * d..(i + 1) * d];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            out.extend(row.iter().map(|x| x / norm));
        }
    }
    Ok(out)
}

/// Teacher signals for one batch, aligned with the batch rows.
pub struct TeacherBatch {
    /// `v̂` (single teacher) or `V̂` (ensemble).
    pub features: Option<Tensor>,
    pub logits: Option<Tensor>,
}

/// A training loss together with the values of its parts.
pub struct Objective {
    pub total: Tensor,
    pub cross_entropy: f64,
    pub distillation: Option<f64>,
}

/// Student outputs consumed by [`objective`].
pub struct StudentBatch<'a> {
    pub logits: &'a Tensor,
    pub features: &'a Tensor,
    pub embedding: &'a Tensor,
    pub labels: &'a [usize],
}

/// Dispatches on `cfg.mode`.
pub fn objective(
    student: &StudentBatch<'_>,
    teacher: &TeacherBatch,
    cfg: &DistillConfig,
) -> Result<Objective> {
    let need = |t: &Option<Tensor>, what: &str| -> Result<Tensor> {
        t.clone()
            .ok_or_else(|| Error::Config(format!("{} distillation needs teacher {what}", cfg.mode)))
    };
    let ce = cross_entropy(student.logits, student.labels)?;
    let ce_value = ce.item()?;
    let (total, distill) = match cfg.mode {
        DistillMode::None => {
            return Ok(Objective {
                total: ce,
                cross_entropy: ce_value,
                distillation: None,
            })
        }
        DistillMode::Feature => {
            let v_hat = need(&teacher.features, "features")?;
            let total = cbd_loss(
                student.logits,
                student.labels,
                student.features,
                &v_hat,
                cfg,
            )?;
            let lf = feature_distance(student.features, &v_hat)?.item()?;
            (total, lf)
        }
        DistillMode::Classifier => {
            let z_hat = need(&teacher.logits, "logits")?;
            let total = classifier_distill_loss(student.logits, student.labels, &z_hat, cfg)?;
            let soft = soft_cross_entropy(student.logits, &z_hat, cfg.temperature)?.item()?;
            (total, soft)
        }
        DistillMode::Hybrid => {
            let v_hat = need(&teacher.features, "features")?;
            let z_hat = need(&teacher.logits, "logits")?;
            let total = hybrid_loss(
                student.logits,
                student.labels,
                student.features,
                &v_hat,
                &z_hat,
                cfg,
            )?;
            let lf = feature_distance(student.features, &v_hat)?.item()?;
            (total, lf)
        }
        DistillMode::Ensemble => {
            let v_cat = need(&teacher.features, "features")?;
            let total = ensemble_loss(
                student.logits,
                student.labels,
                student.embedding,
                &v_cat,
                cfg,
            )?;
            let lf = feature_distance(student.embedding, &v_cat)?.item()?;
            (total, lf)
        }
    };
    Ok(Objective {
        total,
        cross_entropy: ce_value,
        distillation: Some(distill),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;

    fn t(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn cross_entropy_anchors() {
        let confident = t(&[50.0, 0.0, 0.0], &[1, 3]);
        assert!(cross_entropy(&confident, &[0]).unwrap().item().unwrap() < 1e-6);
        let uniform = t(&[0.3, 0.3, 0.3], &[1, 3]);
        let l = cross_entropy(&uniform, &[2]).unwrap().item().unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        // −log(e²/(e+e²)) = log(1 + e⁻¹)
        let z = t(&[1.0, 2.0], &[1, 2]);
        let l = cross_entropy(&z, &[1]).unwrap().item().unwrap();
        assert!((l - 0.31326).abs() < 1e-4);
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn feature_distance_anchors() {
        let a = t(&[1.0, 0.0], &[1, 2]);
        let b = t(&[0.0, 3.0], &[1, 2]);
        let c = t(&[-2.0, 0.0], &[1, 2]);
        assert!(feature_distance(&a, &a).unwrap().item().unwrap().abs() < 1e-15);
        assert!((feature_distance(&a, &b).unwrap().item().unwrap() - 1.0).abs() < 1e-15);
        assert!((feature_distance(&a, &c).unwrap().item().unwrap() - 2.0).abs() < 1e-15);
        assert!(feature_distance(&a, &t(&[1.0, 0.0, 0.0], &[1, 3])).is_err());
    }

    #[test]
    fn cbd_loss_endpoints() {
        let z = t(&[0.2, -1.0, 0.7, 0.1, 0.0, 0.3], &[2, 3]);
        let v = t(&[1.0, 2.0, 0.5, -1.0], &[2, 2]);
        let v_hat = t(&[0.5, 2.0, 1.0, 1.0], &[2, 2]);
        let labels = [2, 0];
        let ce = cross_entropy(&z, &labels).unwrap().item().unwrap();
        let lf = feature_distance(&v, &v_hat).unwrap().item().unwrap();
        let mut cfg = DistillConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert_eq!(
            cbd_loss(&z, &labels, &v, &v_hat, &cfg)
                .unwrap()
                .item()
                .unwrap(),
            ce
        );
        cfg.alpha = 1.0;
        assert_eq!(
            cbd_loss(&z, &labels, &v, &v_hat, &cfg)
                .unwrap()
                .item()
                .unwrap(),
            cfg.beta * lf
        );
    }

    #[test]
    fn cbd_loss_default_weights_arithmetic() {
        // combine() with CE = 1.0 and ℓ_F = 0.25
        let cfg = DistillConfig::default();
        let total = combine(
            &Tensor::scalar(1.0),
            &Tensor::scalar(0.25).scale(cfg.beta),
            cfg.alpha,
        )
        .unwrap()
        .item()
        .unwrap();
        assert!((total - 10.6).abs() < 1e-12);
    }

    #[test]
    fn classifier_distillation_is_stationary_at_teacher() {
        let z = t(&[0.3, -1.2, 2.0, 0.5, 0.5, -0.7], &[2, 3]);
        let shifted = t(&[3.3, 1.8, 5.0, -1.5, -1.5, -2.7], &[2, 3]);
        let student = z.to_param();
        let soft = soft_cross_entropy(&student, &shifted, 2.0).unwrap();
        soft.backward().unwrap();
        let g = student.grad().unwrap();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "{norm}");
    }

    #[test]
    fn temperature_one_alpha_one_is_soft_target_ce() {
        let z = t(&[0.3, -1.2, 2.0], &[1, 3]);
        let z_hat = t(&[1.0, 0.0, -1.0], &[1, 3]);
        let cfg = DistillConfig {
            alpha: 1.0,
            temperature: 1.0,
            mode: DistillMode::Classifier,
            ..Default::default()
        };
        let p = softmax_raw(z_hat.data(), 3);
        let q = softmax_raw(z.data(), 3);
        let expected: f64 = -p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>();
        let got = classifier_distill_loss(&z, &[0], &z_hat, &cfg)
            .unwrap()
            .item()
            .unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn hybrid_decomposes() {
        let z = t(&[0.3, -1.2, 2.0, 0.1, 0.2, 0.3], &[2, 3]);
        let z_hat = t(&[1.0, 0.0, -1.0, 0.0, 2.0, 0.0], &[2, 3]);
        let v = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let labels = [1, 2];
        let cfg = DistillConfig {
            mode: DistillMode::Hybrid,
            ..Default::default()
        };
        let a0 = DistillConfig { alpha: 0.0, ..cfg };
        let ce = cross_entropy(&z, &labels).unwrap().item().unwrap();
        assert_eq!(
            hybrid_loss(&z, &labels, &v, &v, &z_hat, &a0)
                .unwrap()
                .item()
                .unwrap(),
            ce
        );

        let soft = soft_cross_entropy(&z, &z_hat, cfg.temperature)
            .unwrap()
            .item()
            .unwrap();
        let expected = (1.0 - cfg.alpha) * ce + cfg.alpha * 0.5 * cfg.temperature.powi(2) * soft;
        let got = hybrid_loss(&z, &labels, &v, &v, &z_hat, &cfg)
            .unwrap()
            .item()
            .unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn ensemble_of_one_matches_cbd() {
        let z = t(&[0.3, -1.2, 2.0, 0.1, 0.2, 0.3], &[2, 3]);
        let v = t(&[1.0, 2.0, -3.0, 4.0], &[2, 2]);
        let v_hat = [0.5, 1.0, 2.0, -1.0];
        let cfg = DistillConfig::default();
        let cat = concat_teacher_features(&[&v_hat], 2, 2).unwrap();
        let ens = ensemble_loss(&z, &[0, 1], &v, &t(&cat, &[2, 2]), &cfg)
            .unwrap()
            .item()
            .unwrap();
        let cbd = cbd_loss(&z, &[0, 1], &v, &t(&v_hat, &[2, 2]), &cfg)
            .unwrap()
            .item()
            .unwrap();
        assert!((ens - cbd).abs() < 1e-12);
    }

    #[test]
    fn ensemble_cosine_over_concatenation() {
        let teacher_a = [3.0, 4.0];
        let teacher_b = [0.0, -2.0];
        let cat = concat_teacher_features(&[&teacher_a, &teacher_b], 1, 2).unwrap();
        assert_eq!(cat, vec![0.6, 0.8, 0.0, -1.0]);
        let hv = t(&[1.0, 1.0, 1.0, 1.0], &[1, 4]);
        let cfg = DistillConfig {
            alpha: 1.0,
            beta: 1.0,
            k: 2,
            mode: DistillMode::Ensemble,
            ..Default::default()
        };
        let got = ensemble_loss(&t(&[0.0, 0.0], &[1, 2]), &[0], &hv, &t(&cat, &[1, 4]), &cfg)
            .unwrap()
            .item()
            .unwrap();
        // brute force: cos([1,1,1,1], [0.6,0.8,0,-1]) = 0.4 / (2 · √2)
        let dot = 0.6 + 0.8 + 0.0 - 1.0;
        let cos = dot / (2.0 * (0.36f64 + 0.64 + 1.0).sqrt());
        assert!((got - (1.0 - cos)).abs() < 1e-12);
        let parallel = t(&cat.iter().map(|x| 2.0 * x).collect::<Vec<_>>(), &[1, 4]);
        let zero = ensemble_loss(
            &t(&[0.0, 0.0], &[1, 2]),
            &[0],
            &parallel,
            &t(&cat, &[1, 4]),
            &cfg,
        )
        .unwrap()
        .item()
        .unwrap();
        assert!(zero.abs() < 1e-12);
        let bad = DistillConfig { k: 3, ..cfg };
        assert!(
            ensemble_loss(&t(&[0.0, 0.0], &[1, 2]), &[0], &hv, &t(&cat, &[1, 4]), &bad).is_err()
        );
    }

    #[test]
    fn teachers_receive_no_gradient() {
        let z = Tensor::param(vec![0.3, -1.2, 2.0], &[1, 3]).unwrap();
        let z_hat = Tensor::param(vec![1.0, 0.0, -1.0], &[1, 3]).unwrap();
        let v = Tensor::param(vec![1.0, 2.0], &[1, 2]).unwrap();
        let v_hat = Tensor::param(vec![2.0, -1.0], &[1, 2]).unwrap();
        let cfg = DistillConfig::default();
        hybrid_loss(&z, &[1], &v, &v_hat, &z_hat, &cfg)
            .unwrap()
            .backward()
            .unwrap();
        assert!(z_hat.grad().is_none());
        assert!(v_hat.grad().is_none());
        assert!(z.grad().is_some() && v.grad().is_some());
    }

    #[test]
    fn hybrid_gradient_check() {
        let z = t(&[0.3, -1.2, 2.0, 0.1, 0.2, 0.3], &[2, 3]);
        let z_hat = t(&[1.0, 0.0, -1.0, 0.0, 2.0, 0.0], &[2, 3]);
        let v = t(&[1.0, 2.0, -0.5, 4.0], &[2, 2]);
        let v_hat = t(&[0.2, 1.0, 1.0, 1.0], &[2, 2]);
        let cfg = DistillConfig {
            mode: DistillMode::Hybrid,
            ..Default::default()
        };
        let check = gradcheck::<_, Error>(
            &[z, v],
            |p| hybrid_loss(&p[0], &[1, 0], &p[1], &v_hat, &z_hat, &cfg),
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig {
            alpha: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DistillConfig {
            beta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DistillConfig {
            temperature: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DistillConfig::default().validate().is_ok());
    }
}
