//! Exact mutual-information oracles.
//!
//! Discrete enumeration over small joint tables and the analytic Gaussian
//! case. These are the reference values every variational bound in this
//! crate is validated against; nothing here is estimated.
//!
//! All information quantities are in nats.

use ndarray::Array2;

use crate::error::{KfError, Result};

/// A joint probability table over two discrete variables.
///
/// Rows index the first variable, columns the second. Entries must be
/// nonnegative and sum to one within 1e-12.
#[derive(Debug, Clone)]
pub struct JointTable {
    probs: Array2<f64>,
}

impl JointTable {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(KfError::invalid("joint table must be non-empty"));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(KfError::invalid("joint table entries must be finite and >= 0"));
        }
        let total: f64 = probs.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(KfError::invalid(format!(
                "joint table must sum to 1 (got {total})"
            )));
        }
        Ok(Self { probs })
    }

    /// Build a table from nonnegative weights, normalizing them to sum to 1.
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        let total: f64 = weights.sum();
        if !(total > 0.0) {
            return Err(KfError::invalid("weights must have positive sum"));
        }
        Self::new(weights / total)
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    /// Marginal distribution over rows.
    pub fn row_marginal(&self) -> Vec<f64> {
        self.probs.rows().into_iter().map(|r| r.sum()).collect()
    }

    /// Marginal distribution over columns.
    pub fn col_marginal(&self) -> Vec<f64> {
        self.probs.columns().into_iter().map(|c| c.sum()).collect()
    }

    /// Transposed table (swaps the two variables).
    pub fn transposed(&self) -> Self {
        Self { probs: self.probs.t().to_owned() }
    }

    /// Merge columns `a` and `b` into one (a deterministic coarsening of the
    /// second variable). Used by the data-processing sanity checks.
    pub fn merge_cols(&self, a: usize, b: usize) -> Result<Self> {
        let (m, n) = self.probs.dim();
        if a >= n || b >= n || a == b {
            return Err(KfError::invalid("merge_cols: bad column pair"));
        }
        let (lo, hi) = (a.min(b), a.max(b));
        let mut out = Array2::zeros((m, n - 1));
        for i in 0..m {
            let mut k = 0;
            for j in 0..n {
                if j == hi {
                    continue;
                }
                let mut p = self.probs[[i, j]];
                if j == lo {
                    p += self.probs[[i, hi]];
                }
                out[[i, k]] = p;
                k += 1;
            }
        }
        Ok(Self { probs: out })
    }
}

/// Exact mutual information of a discrete joint table, in nats.
///
/// I(X,Y) = sum_ij p_ij ln( p_ij / (p_i. p_.j) ), with 0 ln 0 := 0.
pub fn exact_mi_discrete(table: &JointTable) -> f64 {
    let px = table.row_marginal();
    let py = table.col_marginal();
    let mut mi = 0.0;
    for (i, row) in table.probs.rows().into_iter().enumerate() {
        for (j, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * (p / (px[i] * py[j])).ln();
            }
        }
    }
    // Round-off can leave a tiny negative residue on independent tables.
    mi.max(0.0)
}

/// Mutual information of a bivariate Gaussian with correlation `rho`:
/// -1/2 ln(1 - rho^2). Errors for |rho| >= 1 where MI diverges.
pub fn gaussian_mi(rho: f64) -> Result<f64> {
    if !rho.is_finite() || rho.abs() >= 1.0 {
        return Err(KfError::invalid(format!(
            "gaussian_mi requires |rho| < 1 (got {rho})"
        )));
    }
    Ok(-0.5 * (1.0 - rho * rho).ln())
}

/// The critic attaining equality in the Donsker-Varadhan bound: the
/// pointwise log density ratio ln( p_ij / (p_i. p_.j) ).
///
/// Requires strictly positive marginals so every ratio is defined.
pub fn optimal_critic(table: &JointTable) -> Result<Array2<f64>> {
    let px = table.row_marginal();
    let py = table.col_marginal();
    if px.iter().chain(py.iter()).any(|&p| p <= 0.0) {
        return Err(KfError::invalid("optimal_critic requires positive marginals"));
    }
    let (m, n) = table.probs.dim();
    let mut critic = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            let p = table.probs[[i, j]];
            // Cells with zero joint mass get score -inf in theory; they carry
            // zero weight in the joint expectation, but the marginal-product
            // expectation still sees them, so clamp to a very negative finite
            // score instead.
            critic[[i, j]] = if p > 0.0 {
                (p / (px[i] * py[j])).ln()
            } else {
                -1e6
            };
        }
    }
    Ok(critic)
}

/// Donsker-Varadhan lower bound evaluated with exact expectations over a
/// discrete joint: E_p(x,y)[f] - ln E_p(x)p(y)[e^f].
///
/// This is the oracle side of the dual route: `losses::dv_lower_bound`
/// estimates the same quantity from batch score matrices.
pub fn dv_bound_exact(table: &JointTable, critic: &Array2<f64>) -> Result<f64> {
    if critic.dim() != table.probs.dim() {
        return Err(KfError::shape(format!(
            "critic shape {:?} != table shape {:?}",
            critic.dim(),
            table.probs.dim()
        )));
    }
    let px = table.row_marginal();
    let py = table.col_marginal();
    let joint_term: f64 = table
        .probs
        .iter()
        .zip(critic.iter())
        .map(|(&p, &f)| if p > 0.0 { p * f } else { 0.0 })
        .sum();
    // ln E_{p(x)p(y)}[e^f], stabilized by the max score.
    let fmax = critic.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (i, row) in critic.rows().into_iter().enumerate() {
        for (j, &f) in row.iter().enumerate() {
            z += px[i] * py[j] * (f - fmax).exp();
        }
    }
    Ok(joint_term - (fmax + z.ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn table_2x2() -> JointTable {
        JointTable::new(array![[0.4, 0.1], [0.1, 0.4]]).unwrap()
    }

    #[test]
    fn product_table_has_zero_mi() {
        // p(x)p(y) with p(x) = (0.3, 0.7), p(y) = (0.2, 0.8)
        let t = JointTable::new(array![[0.06, 0.24], [0.14, 0.56]]).unwrap();
        assert_abs_diff_eq!(exact_mi_discrete(&t), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn diagonal_uniform_mi_is_ln_k() {
        let mut probs = Array2::zeros((4, 4));
        for i in 0..4 {
            probs[[i, i]] = 0.25;
        }
        let t = JointTable::new(probs).unwrap();
        assert_abs_diff_eq!(exact_mi_discrete(&t), 4.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn mi_of_reference_table() {
        // Direct summation: 0.8 ln 1.6 + 0.2 ln 0.4
        let expect = 0.8 * 1.6_f64.ln() + 0.2 * 0.4_f64.ln();
        assert_abs_diff_eq!(exact_mi_discrete(&table_2x2()), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(exact_mi_discrete(&table_2x2()), 0.1927, epsilon = 1e-4);
    }

    #[test]
    fn mi_symmetric_under_transpose() {
        let t = JointTable::new(array![[0.5, 0.1], [0.05, 0.35]]).unwrap();
        assert_abs_diff_eq!(
            exact_mi_discrete(&t),
            exact_mi_discrete(&t.transposed()),
            epsilon = 1e-14
        );
    }

    #[test]
    fn gaussian_mi_values() {
        assert_eq!(gaussian_mi(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(gaussian_mi(0.5).unwrap(), 0.1438, epsilon = 1e-4);
        assert!(gaussian_mi(1.0).is_err());
        assert!(gaussian_mi(-1.0).is_err());
    }

    #[test]
    fn optimal_critic_values() {
        let c = optimal_critic(&table_2x2()).unwrap();
        assert_abs_diff_eq!(c[[0, 0]], 1.6_f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(c[[0, 1]], 0.4_f64.ln(), epsilon = 1e-12);
        let indep = JointTable::new(array![[0.06, 0.24], [0.14, 0.56]]).unwrap();
        let c0 = optimal_critic(&indep).unwrap();
        for &v in c0.iter() {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dv_exact_equals_mi_at_optimal_critic() {
        let t = table_2x2();
        let c = optimal_critic(&t).unwrap();
        let dv = dv_bound_exact(&t, &c).unwrap();
        assert_abs_diff_eq!(dv, exact_mi_discrete(&t), epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(JointTable::new(array![[0.5, 0.4]]).is_err());
        assert!(JointTable::new(array![[1.2, -0.2]]).is_err());
    }

    #[test]
    fn merge_cols_never_increases_mi() {
        let t = JointTable::new(array![[0.3, 0.1, 0.1], [0.05, 0.25, 0.2]]).unwrap();
        let merged = t.merge_cols(0, 2).unwrap();
        assert!(exact_mi_discrete(&merged) <= exact_mi_discrete(&t) + 1e-12);
    }
}
