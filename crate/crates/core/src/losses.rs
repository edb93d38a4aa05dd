//! Training objectives: supervised losses, soft-target knowledge transfer,
//! the three InfoMax-Bottleneck terms, and their composition into the total
//! factorization objective.
//!
//! Every loss that participates in training has a `_with_grad` companion
//! returning the analytic gradient with respect to the differentiable input;
//! those gradients are validated against central finite differences in the
//! test suite. All values are in nats.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{KfError, Result};

/// Variance floor applied before logs and divisions.
pub const VAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// Loss weights and bound hyperparameters for one factorization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorizationConfig {
    /// Weight on the I(X, Z) lower bound (InfoMax side).
    pub alpha: f64,
    /// Weight on the I(X, T_j) upper bound (bottleneck side).
    pub beta: f64,
    /// Weight of the IMB objective in the total loss.
    pub lambda_i: f64,
    /// Weight of the knowledge-transfer loss inside L_sf.
    pub lambda_kt: f64,
    /// Soft-target temperature.
    pub temperature: f64,
    /// Backbone tap index used by the critic; `None` selects the final
    /// pre-head feature.
    #[serde(default)]
    pub critic_layer: Option<usize>,
    /// Draw t_j from the batch Gaussian instead of using it deterministically.
    #[serde(default)]
    pub sample_tsn: bool,
    /// Per-task kind; classification unless stated otherwise.
    #[serde(default)]
    pub task_types: Vec<TaskKind>,
}

impl Default for FactorizationConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1e-3,
            lambda_i: 1.0,
            lambda_kt: 0.1,
            temperature: 10.0,
            critic_layer: None,
            sample_tsn: false,
            task_types: Vec::new(),
        }
    }
}

impl FactorizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(KfError::invalid("alpha must be > 0"));
        }
        if !(self.beta > 0.0) {
            return Err(KfError::invalid("beta must be > 0"));
        }
        if self.lambda_i < 0.0 || self.lambda_kt < 0.0 {
            return Err(KfError::invalid("lambda_i and lambda_kt must be >= 0"));
        }
        if !(self.temperature > 0.0) {
            return Err(KfError::invalid("temperature must be > 0"));
        }
        Ok(())
    }
}

/// Ground truth for one task: class indices or regression targets.
#[derive(Debug, Clone)]
pub enum TaskTarget<'a> {
    Classes(&'a [usize]),
    Values(&'a Array2<f64>),
}

impl TaskTarget<'_> {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskTarget::Classes(_) => TaskKind::Classification,
            TaskTarget::Values(_) => TaskKind::Regression,
        }
    }
}

fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean supervised loss over a batch: softmax cross-entropy in nats for
/// classification, mean squared error for regression.
pub fn supervised_loss(prediction: &Array2<f64>, target: &TaskTarget) -> Result<f64> {
    supervised_loss_with_grad(prediction, target).map(|(v, _)| v)
}

/// Supervised loss and its gradient with respect to `prediction`.
pub fn supervised_loss_with_grad(
    prediction: &Array2<f64>,
    target: &TaskTarget,
) -> Result<(f64, Array2<f64>)> {
    if prediction.iter().any(|v| !v.is_finite()) {
        return Err(KfError::invalid("supervised_loss: non-finite prediction"));
    }
    match target {
        TaskTarget::Classes(labels) => {
            let (n, k) = prediction.dim();
            if labels.len() != n {
                return Err(KfError::shape(format!(
                    "batch {} predictions vs {} labels",
                    n,
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
                return Err(KfError::invalid(format!(
                    "label {bad} out of range for {k} classes"
                )));
            }
            let logp = log_softmax_rows(prediction);
            let mut loss = 0.0;
            let mut grad = logp.mapv(f64::exp);
            for (i, &y) in labels.iter().enumerate() {
                loss -= logp[[i, y]];
                grad[[i, y]] -= 1.0;
            }
            let nf = n as f64;
            Ok((loss / nf, grad / nf))
        }
        TaskTarget::Values(values) => {
            if values.dim() != prediction.dim() {
                return Err(KfError::shape(format!(
                    "prediction {:?} vs target {:?}",
                    prediction.dim(),
                    values.dim()
                )));
            }
            let count = prediction.len() as f64;
            let diff = prediction - *values;
            let loss = diff.mapv(|d| d * d).sum() / count;
            let grad = diff * (2.0 / count);
            Ok((loss, grad))
        }
    }
}

/// Soft-target knowledge-transfer loss:
/// T^2 * KL( softmax(teacher/T) || softmax(student/T) ), mean over the batch.
///
/// The teacher side is treated as a constant (no gradient flows to it).
pub fn soft_target_kd(
    teacher_logits: &Array2<f64>,
    student_logits: &Array2<f64>,
    temperature: f64,
) -> Result<f64> {
    soft_target_kd_with_grad(teacher_logits, student_logits, temperature).map(|(v, _)| v)
}

/// Soft-target loss and its gradient with respect to the student logits.
pub fn soft_target_kd_with_grad(
    teacher_logits: &Array2<f64>,
    student_logits: &Array2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    if !(temperature > 0.0) {
        return Err(KfError::invalid("temperature must be > 0"));
    }
    if teacher_logits.dim() != student_logits.dim() {
        return Err(KfError::shape(format!(
            "teacher {:?} vs student {:?}",
            teacher_logits.dim(),
            student_logits.dim()
        )));
    }
    if teacher_logits.iter().chain(student_logits.iter()).any(|v| !v.is_finite()) {
        return Err(KfError::invalid("soft_target_kd: non-finite logits"));
    }
    let t = temperature;
    let n = teacher_logits.nrows() as f64;
    let logp = log_softmax_rows(&(teacher_logits / t));
    let logq = log_softmax_rows(&(student_logits / t));
    let p = logp.mapv(f64::exp);
    let q = logq.mapv(f64::exp);
    let kl_sum = p
        .iter()
        .zip(logp.iter().zip(logq.iter()))
        .map(|(&pi, (&lp, &lq))| if pi > 0.0 { pi * (lp - lq) } else { 0.0 })
        .sum::<f64>();
    let loss = t * t * kl_sum / n;
    // d/ds of T^2/n * KL = T/n * (q - p)
    let grad = (&q - &p) * (t / n);
    Ok((loss, grad))
}

/// Per-channel mean and variance of a feature batch (the Gaussian posterior
/// parameters of the bottleneck term).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mu: Array1<f64>,
    pub var: Array1<f64>,
}

impl GaussianStats {
    /// Population mean/variance per column across the batch, with the
    /// variance floored at [`VAR_FLOOR`].
    pub fn from_features(features: &Array2<f64>) -> Result<Self> {
        let (n, d) = features.dim();
        if n == 0 || d == 0 {
            return Err(KfError::invalid("empty feature batch"));
        }
        let nf = n as f64;
        let mut mu = Array1::zeros(d);
        let mut var = Array1::zeros(d);
        for j in 0..d {
            let col = features.column(j);
            let m = col.sum() / nf;
            let v = col.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / nf;
            mu[j] = m;
            var[j] = v.max(VAR_FLOOR);
        }
        Ok(Self { mu, var })
    }

    pub fn new(mu: Array1<f64>, var: Array1<f64>) -> Result<Self> {
        if mu.len() != var.len() {
            return Err(KfError::shape("mu and var lengths differ"));
        }
        if var.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(KfError::invalid("variance must be strictly positive"));
        }
        Ok(Self { mu, var })
    }
}

/// KL( N(mu, diag(var)) || N(0, I) ) in closed form:
/// 1/2 * sum_l ( mu_l^2 + var_l - ln var_l - 1 ). Always >= 0.
pub fn kl_to_standard_normal(stats: &GaussianStats) -> Result<f64> {
    if stats.var.iter().any(|&v| v <= 0.0) {
        return Err(KfError::invalid("kl_to_standard_normal: nonpositive variance"));
    }
    let kl = stats
        .mu
        .iter()
        .zip(stats.var.iter())
        .map(|(&m, &v)| m * m + v - v.ln() - 1.0)
        .sum::<f64>()
        * 0.5;
    Ok(kl)
}

/// KL of the batch Gaussian of `features` against N(0, I), with the gradient
/// with respect to each feature entry.
///
/// Channels whose variance sits at the floor contribute no variance gradient.
pub fn kl_feature_grad(features: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let stats = GaussianStats::from_features(features)?;
    let kl = kl_to_standard_normal(&stats)?;
    let (n, d) = features.dim();
    let nf = n as f64;
    let mut grad = Array2::zeros((n, d));
    for j in 0..d {
        let m = stats.mu[j];
        let v = stats.var[j];
        let raw_var_active = v > VAR_FLOOR;
        let dkl_dv = 0.5 * (1.0 - 1.0 / v);
        for i in 0..n {
            let x = features[[i, j]];
            // dKL/dmu * dmu/dx + dKL/dvar * dvar/dx
            let mut g = m / nf;
            if raw_var_active {
                g += dkl_dv * 2.0 * (x - m) / nf;
            }
            grad[[i, j]] = g;
        }
    }
    Ok((kl, grad))
}

/// Donsker-Varadhan lower bound from a batch score matrix:
/// mean(diagonal) - log-mean-exp over all n^2 entries.
///
/// Diagonal entries are critic scores on joint pairs; the full matrix is
/// treated as samples from the product of marginals.
pub fn dv_lower_bound(scores: &Array2<f64>) -> Result<f64> {
    dv_lower_bound_with_grad(scores).map(|(v, _)| v)
}

/// DV bound and its gradient with respect to every score entry.
pub fn dv_lower_bound_with_grad(scores: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let (n, m) = scores.dim();
    if n != m {
        return Err(KfError::shape(format!("score matrix must be square, got {n}x{m}")));
    }
    if n < 2 {
        return Err(KfError::invalid("dv_lower_bound needs a batch of at least 2"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(KfError::invalid("dv_lower_bound: non-finite scores"));
    }
    let nf = n as f64;
    let joint = scores.diag().sum() / nf;
    let smax = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|&s| (s - smax).exp()).sum();
    let lme = smax + (z / (nf * nf)).ln();
    let mut grad = scores.mapv(|s| -(s - smax).exp() / z);
    for i in 0..n {
        grad[[i, i]] += 1.0 / nf;
    }
    Ok((joint - lme, grad))
}

/// The per-task IMB value to MAXIMIZE:
/// (-term1_pred_loss) + alpha * dv_bound - beta * kl_term.
///
/// `term1_pred_loss` is the auxiliary head's supervised loss; its negation is
/// the Term-1 lower bound up to the constant H(Y).
pub fn imb_loss(
    term1_pred_loss: f64,
    dv_bound: f64,
    kl_term: f64,
    config: &FactorizationConfig,
) -> Result<f64> {
    for (name, v) in [
        ("term1_pred_loss", term1_pred_loss),
        ("dv_bound", dv_bound),
        ("kl_term", kl_term),
    ] {
        if !v.is_finite() {
            return Err(KfError::invalid(format!("imb_loss: non-finite {name}")));
        }
    }
    Ok(-term1_pred_loss + config.alpha * dv_bound - config.beta * kl_term)
}

/// Structural factorization loss for one task: L_sup + lambda_kt * L_kt.
pub fn structural_factorization_loss(
    supervised: f64,
    knowledge_transfer: f64,
    config: &FactorizationConfig,
) -> f64 {
    supervised + config.lambda_kt * knowledge_transfer
}

/// The overall quantity to minimize: sum_j L_sf^(j) - lambda_I * sum_j L_I^(j).
pub fn total_objective(
    per_task_sf: &[f64],
    per_task_imb: &[f64],
    config: &FactorizationConfig,
) -> Result<f64> {
    if per_task_sf.is_empty() {
        return Err(KfError::invalid("total_objective: empty task list"));
    }
    if per_task_sf.len() != per_task_imb.len() {
        return Err(KfError::shape(format!(
            "{} L_sf values vs {} L_I values",
            per_task_sf.len(),
            per_task_imb.len()
        )));
    }
    let sf: f64 = per_task_sf.iter().sum();
    let imb: f64 = per_task_imb.iter().sum();
    Ok(sf - config.lambda_i * imb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn uniform_logits_cost_ln_k() {
        let logits = Array2::zeros((3, 5));
        let labels = [0usize, 2, 4];
        let loss = supervised_loss(&logits, &TaskTarget::Classes(&labels)).unwrap();
        assert_abs_diff_eq!(loss, 5.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_near_zero() {
        let mut logits = Array2::zeros((2, 3));
        logits[[0, 1]] = 50.0;
        logits[[1, 0]] = 50.0;
        let loss = supervised_loss(&logits, &TaskTarget::Classes(&[1, 0])).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn exact_regression_is_zero() {
        let pred = array![[1.0, 2.0]];
        let loss = supervised_loss(&pred, &TaskTarget::Values(&pred.clone())).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Array2::zeros((1, 3));
        assert!(supervised_loss(&logits, &TaskTarget::Classes(&[3])).is_err());
    }

    #[test]
    fn kd_zero_when_matching() {
        let logits = array![[0.3, -1.2, 4.0], [0.0, 0.0, 1.0]];
        let loss = soft_target_kd(&logits, &logits, 10.0).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kd_two_class_reference_value() {
        // Hand oracle: exact softmaxes and KL summation at T = 1.
        let teacher = array![[2.0, 0.0]];
        let student = array![[0.0, 2.0]];
        let p = [(2.0_f64).exp() / ((2.0_f64).exp() + 1.0), 1.0 / ((2.0_f64).exp() + 1.0)];
        let q = [p[1], p[0]];
        let expect: f64 = p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln();
        let loss = soft_target_kd(&teacher, &student, 1.0).unwrap();
        assert_abs_diff_eq!(loss, expect, epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 1.5232, epsilon = 1e-4);
    }

    #[test]
    fn kd_nonnegative_on_random_logits() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-3.0..3.0));
            let b = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-3.0..3.0));
            for t in [0.5, 1.0, 10.0] {
                assert!(soft_target_kd(&a, &b, t).unwrap() >= -1e-12);
            }
        }
    }

    #[test]
    fn kd_rejects_non_finite() {
        let a = array![[f64::NAN, 0.0]];
        let b = array![[0.0, 0.0]];
        assert!(soft_target_kd(&a, &b, 1.0).is_err());
    }

    #[test]
    fn kl_standard_prior_is_zero() {
        let stats =
            GaussianStats::new(Array1::zeros(7), Array1::ones(7)).unwrap();
        assert_abs_diff_eq!(kl_to_standard_normal(&stats).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_reference_values() {
        let s = GaussianStats::new(array![1.0], array![1.0]).unwrap();
        assert_abs_diff_eq!(kl_to_standard_normal(&s).unwrap(), 0.5, epsilon = 1e-15);
        let s = GaussianStats::new(array![0.0], array![0.25]).unwrap();
        let expect = 0.5 * (0.25 - 0.25_f64.ln() - 1.0);
        assert_abs_diff_eq!(kl_to_standard_normal(&s).unwrap(), expect, epsilon = 1e-15);
        assert_abs_diff_eq!(kl_to_standard_normal(&s).unwrap(), 0.3181, epsilon = 1e-4);
    }

    #[test]
    fn kl_rejects_nonpositive_variance() {
        assert!(GaussianStats::new(array![0.0], array![0.0]).is_err());
        assert!(GaussianStats::new(array![0.0], array![-1.0]).is_err());
    }

    #[test]
    fn dv_constant_scores_give_zero() {
        let scores = Array2::from_elem((5, 5), 3.7);
        assert_abs_diff_eq!(dv_lower_bound(&scores).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn dv_requires_batch_of_two() {
        assert!(dv_lower_bound(&Array2::zeros((1, 1))).is_err());
        assert!(dv_lower_bound(&Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn dv_matches_exact_mi_on_count_materialized_batch() {
        // Joint [[0.4, 0.1], [0.1, 0.4]] as a 10-sample batch with exact
        // counts (4, 1, 1, 4); the empirical joint then equals the true one
        // and the batch estimator reproduces the exact DV value.
        use crate::mi::{exact_mi_discrete, optimal_critic, JointTable};
        let table = JointTable::new(array![[0.4, 0.1], [0.1, 0.4]]).unwrap();
        let critic = optimal_critic(&table).unwrap();
        let xs = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let zs = [0, 0, 0, 0, 1, 0, 1, 1, 1, 1];
        let mut scores = Array2::zeros((10, 10));
        for i in 0..10 {
            for k in 0..10 {
                scores[[i, k]] = critic[[xs[k], zs[i]]];
            }
        }
        let dv = dv_lower_bound(&scores).unwrap();
        assert_abs_diff_eq!(dv, exact_mi_discrete(&table), epsilon = 1e-12);
    }

    #[test]
    fn imb_reference_arithmetic() {
        let cfg = FactorizationConfig::default();
        let v = imb_loss(0.2, 0.1, 3.0, &cfg).unwrap();
        assert_abs_diff_eq!(v, -0.103, epsilon = 1e-12);
        let mut cfg0 = cfg.clone();
        cfg0.alpha = f64::MIN_POSITIVE;
        cfg0.beta = f64::MIN_POSITIVE;
        let v = imb_loss(0.7, 123.0, 456.0, &cfg0).unwrap();
        assert_abs_diff_eq!(v, -0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(imb_loss(0.0, 0.0, 0.0, &cfg).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn total_objective_arithmetic() {
        let mut cfg = FactorizationConfig::default();
        cfg.lambda_i = 0.0;
        cfg.lambda_kt = 0.0;
        assert_abs_diff_eq!(
            total_objective(&[0.9], &[5.0], &cfg).unwrap(),
            0.9,
            epsilon = 1e-15
        );
        cfg.lambda_i = 2.0;
        let base = total_objective(&[0.5, 0.7], &[0.2, 0.3], &cfg).unwrap();
        assert_abs_diff_eq!(base, 1.2 - 2.0 * 0.5, epsilon = 1e-12);
        // Doubling lambda_I shifts the objective by exactly -lambda_I * sum(L_I).
        cfg.lambda_i = 4.0;
        let doubled = total_objective(&[0.5, 0.7], &[0.2, 0.3], &cfg).unwrap();
        assert_abs_diff_eq!(doubled - base, -2.0 * 0.5, epsilon = 1e-12);
        assert!(total_objective(&[], &[], &cfg).is_err());
    }
}
