//! Executable bound-validity checks: every variational bound in the crate is
//! compared against exact oracles (enumeration, closed forms, quadrature).
//!
//! The checks take the functions under test as inputs so a corrupted
//! implementation is detected and named; the CLI exposes the suite as
//! `verify-bounds`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::GaussianStats;
use crate::mi::JointTable;

/// Implementations under test; defaults point at the crate's own.
pub struct BoundFns {
    pub kl_to_standard_normal: fn(&GaussianStats) -> Result<f64>,
    pub dv_bound_exact: fn(&JointTable, &Array2<f64>) -> Result<f64>,
    pub dv_lower_bound: fn(&Array2<f64>) -> Result<f64>,
    pub exact_mi_discrete: fn(&JointTable) -> f64,
    pub optimal_critic: fn(&JointTable) -> Result<Array2<f64>>,
    pub gaussian_mi: fn(f64) -> Result<f64>,
}

impl Default for BoundFns {
    fn default() -> Self {
        Self {
            kl_to_standard_normal: crate::losses::kl_to_standard_normal,
            dv_bound_exact: crate::mi::dv_bound_exact,
            dv_lower_bound: crate::losses::dv_lower_bound,
            exact_mi_discrete: crate::mi::exact_mi_discrete,
            optimal_critic: crate::mi::optimal_critic,
            gaussian_mi: crate::mi::gaussian_mi,
        }
    }
}

/// One property's outcome.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Whole-suite outcome.
#[derive(Debug, Clone)]
pub struct BoundCheckReport {
    pub checks: Vec<CheckResult>,
}

impl BoundCheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// One line per property: PASS/FAIL, name, detail.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "[{}] {}: {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        out
    }
}

/// Random strictly-positive joint table.
pub fn random_table(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> JointTable {
    let weights = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(0.05..1.0));
    JointTable::from_weights(weights).expect("positive weights normalize")
}

/// Simpson integration of `f` over [lo, hi] with `n` panels (n even).
fn simpson<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + h * i as f64);
    }
    acc * h / 3.0
}

/// Quadrature oracle for KL( N(mu, var) || N(0, 1) ): direct integration of
/// p ln(p/q), independent of the closed form it validates.
pub fn kl_gaussian_quadrature(mu: f64, var: f64) -> f64 {
    let sigma = var.sqrt();
    let lo = (mu - 14.0 * sigma).min(-14.0);
    let hi = (mu + 14.0 * sigma).max(14.0);
    let log_norm_p = -(0.5 * (std::f64::consts::TAU * var).ln());
    let log_norm_q = -(0.5 * std::f64::consts::TAU.ln());
    simpson(
        |x| {
            let lp = log_norm_p - (x - mu) * (x - mu) / (2.0 * var);
            let lq = log_norm_q - x * x / 2.0;
            lp.exp() * (lp - lq)
        },
        lo,
        hi,
        40_000,
    )
}

/// 2-D quadrature oracle for the bivariate-Gaussian MI at correlation rho.
pub fn gaussian_mi_quadrature(rho: f64) -> f64 {
    let det = 1.0 - rho * rho;
    let log_norm_joint = -(std::f64::consts::TAU.ln() + 0.5 * det.ln());
    let log_norm_marg = -(0.5 * std::f64::consts::TAU.ln());
    let f = |x: f64, y: f64| {
        let quad = (x * x - 2.0 * rho * x * y + y * y) / (2.0 * det);
        let lp_joint = log_norm_joint - quad;
        let lp_margs = 2.0 * log_norm_marg - x * x / 2.0 - y * y / 2.0;
        lp_joint.exp() * (lp_joint - lp_margs)
    };
    let (lo, hi, n) = (-9.0, 9.0, 600);
    simpson(|x| simpson(|y| f(x, y), lo, hi, n), lo, hi, n)
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name: name.to_string(), passed, detail }
}

/// Run every bound-validity property. Deterministic per seed.
pub fn run_bound_checks(fns: &BoundFns, seed: u64) -> BoundCheckReport {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // 1. DV lower bound never exceeds exact MI, any critic.
    {
        let mut worst = f64::NEG_INFINITY;
        let mut ok = true;
        for _ in 0..120 {
            let table = random_table(&mut rng, 4, 4);
            let critic = Array2::from_shape_fn((4, 4), |_| rng.gen_range(-3.0..3.0));
            let mi = (fns.exact_mi_discrete)(&table);
            match (fns.dv_bound_exact)(&table, &critic) {
                Ok(dv) => {
                    worst = worst.max(dv - mi);
                    ok &= dv <= mi + 1e-9;
                }
                Err(_) => ok = false,
            }
        }
        checks.push(check(
            "dv-below-exact-mi",
            ok,
            format!("worst dv - MI = {worst:.3e} over 120 random 4x4 joints and critics"),
        ));
    }

    // 2. Equality at the log-density-ratio critic.
    {
        let mut worst: f64 = 0.0;
        let mut ok = true;
        for _ in 0..120 {
            let table = random_table(&mut rng, 4, 4);
            let mi = (fns.exact_mi_discrete)(&table);
            match (fns.optimal_critic)(&table).and_then(|c| (fns.dv_bound_exact)(&table, &c)) {
                Ok(dv) => {
                    worst = worst.max((dv - mi).abs());
                    ok &= (dv - mi).abs() < 1e-9;
                }
                Err(_) => ok = false,
            }
        }
        checks.push(check(
            "dv-tight-at-optimal-critic",
            ok,
            format!("worst |dv - MI| = {worst:.3e} over 120 random joints"),
        ));
    }

    // 3. Batch DV estimator agrees with the exact evaluation on batches that
    //    materialize a rational joint by counts.
    {
        let table = JointTable::new(ndarray::array![[0.4, 0.1], [0.1, 0.4]]).expect("valid");
        let critic = (fns.optimal_critic)(&table).expect("positive marginals");
        let xs = [0usize, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let zs = [0usize, 0, 0, 0, 1, 0, 1, 1, 1, 1];
        let mut scores = Array2::zeros((10, 10));
        for i in 0..10 {
            for k in 0..10 {
                scores[[i, k]] = critic[[xs[k], zs[i]]];
            }
        }
        let mi = (fns.exact_mi_discrete)(&table);
        let ok;
        let detail;
        match (fns.dv_lower_bound)(&scores) {
            Ok(dv) => {
                ok = (dv - mi).abs() < 1e-9;
                detail = format!("batch estimator {dv:.6} vs exact MI {mi:.6}");
            }
            Err(e) => {
                ok = false;
                detail = format!("estimator failed: {e}");
            }
        }
        checks.push(check("dv-batch-estimator-consistent", ok, detail));
    }

    // 4. Closed-form KL matches quadrature; exact anchors at (0,1) and (1,1).
    {
        let mut worst: f64 = 0.0;
        let mut ok = true;
        for _ in 0..100 {
            let mu = rng.gen_range(-3.0..3.0);
            let var = rng.gen_range(0.05..5.0);
            let stats = GaussianStats::new(Array1::from_elem(1, mu), Array1::from_elem(1, var))
                .expect("positive variance");
            match (fns.kl_to_standard_normal)(&stats) {
                Ok(kl) => {
                    let quad = kl_gaussian_quadrature(mu, var);
                    worst = worst.max((kl - quad).abs());
                    ok &= (kl - quad).abs() < 1e-6 && kl >= 0.0;
                }
                Err(_) => ok = false,
            }
        }
        let zero = GaussianStats::new(Array1::zeros(3), Array1::ones(3)).expect("valid");
        let unit = GaussianStats::new(Array1::ones(1), Array1::ones(1)).expect("valid");
        ok &= (fns.kl_to_standard_normal)(&zero).map(|v| v.abs() < 1e-12).unwrap_or(false);
        ok &= (fns.kl_to_standard_normal)(&unit)
            .map(|v| (v - 0.5).abs() < 1e-12)
            .unwrap_or(false);
        checks.push(check(
            "kl-quadrature-match",
            ok,
            format!("worst |closed form - quadrature| = {worst:.3e} over 100 cases"),
        ));
    }

    // 5. The expected KL upper-bounds MI on linear-Gaussian channels
    //    T = aX + eps: E_x KL(p(t|x) || N(0,1)) >= I(X, T).
    {
        let mut worst_margin = f64::INFINITY;
        let mut ok = true;
        for _ in 0..60 {
            let a = rng.gen_range(-2.0..2.0f64);
            let s2 = rng.gen_range(0.05..3.0f64);
            // E_x[KL] in closed form from the per-x posterior N(ax, s^2):
            // E_x[ (a x)^2 + s^2 - ln s^2 - 1 ] / 2 with x ~ N(0,1)
            let expected_kl = 0.5 * (a * a + s2 - s2.ln() - 1.0);
            let rho = a / (a * a + s2).sqrt();
            match (fns.gaussian_mi)(rho) {
                Ok(mi) => {
                    worst_margin = worst_margin.min(expected_kl - mi);
                    ok &= expected_kl + 1e-12 >= mi;
                }
                Err(_) => ok = false,
            }
        }
        checks.push(check(
            "kl-channel-upper-bounds-mi",
            ok,
            format!("smallest E[KL] - MI margin = {worst_margin:.3e} over 60 channels"),
        ));
    }

    // 6. Analytic Gaussian MI matches 2-D quadrature.
    {
        let mut worst: f64 = 0.0;
        let mut ok = true;
        for rho in [-0.95, -0.8, -0.5, 0.0, 0.3, 0.5, 0.8, 0.95] {
            match (fns.gaussian_mi)(rho) {
                Ok(mi) => {
                    let quad = gaussian_mi_quadrature(rho);
                    worst = worst.max((mi - quad).abs());
                    ok &= (mi - quad).abs() < 1e-6;
                }
                Err(_) => ok = false,
            }
        }
        checks.push(check(
            "gaussian-mi-quadrature-match",
            ok,
            format!("worst |analytic - quadrature| = {worst:.3e} over 8 correlations"),
        ));
    }

    // 7. MI basics: nonnegative, symmetric, zero on products.
    {
        let mut ok = true;
        for _ in 0..60 {
            let table = random_table(&mut rng, 3, 5);
            let mi = (fns.exact_mi_discrete)(&table);
            let mi_t = (fns.exact_mi_discrete)(&table.transposed());
            ok &= mi >= 0.0 && (mi - mi_t).abs() < 1e-12;
        }
        let px = [0.3, 0.7];
        let py = [0.2, 0.5, 0.3];
        let product = Array2::from_shape_fn((2, 3), |(i, j)| px[i] * py[j]);
        let product = JointTable::new(product).expect("valid product table");
        ok &= (fns.exact_mi_discrete)(&product).abs() < 1e-12;
        checks.push(check(
            "mi-nonneg-symmetric-zero-on-products",
            ok,
            "60 random tables plus an exact product table".to_string(),
        ));
    }

    // 8. Data processing: merging two columns never increases MI.
    {
        let mut worst = f64::NEG_INFINITY;
        let mut ok = true;
        for _ in 0..60 {
            let table = random_table(&mut rng, 4, 4);
            let a = rng.gen_range(0..4);
            let mut b = rng.gen_range(0..4);
            if a == b {
                b = (b + 1) % 4;
            }
            let merged = table.merge_cols(a, b).expect("valid merge");
            let delta = (fns.exact_mi_discrete)(&merged) - (fns.exact_mi_discrete)(&table);
            worst = worst.max(delta);
            ok &= delta <= 1e-12;
        }
        checks.push(check(
            "coarsening-never-increases-mi",
            ok,
            format!("worst MI increase under merging = {worst:.3e} over 60 tables"),
        ));
    }

    BoundCheckReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_oracles_self_check() {
        // KL(N(0,1) || N(0,1)) = 0, KL(N(1,1) || N(0,1)) = 1/2
        assert!(kl_gaussian_quadrature(0.0, 1.0).abs() < 1e-9);
        assert!((kl_gaussian_quadrature(1.0, 1.0) - 0.5).abs() < 1e-9);
        // MI at rho = 0 is 0
        assert!(gaussian_mi_quadrature(0.0).abs() < 1e-9);
    }

    #[test]
    fn suite_passes_with_real_implementations() {
        let report = run_bound_checks(&BoundFns::default(), 0);
        assert!(report.all_passed(), "{}", report.render());
        assert!(report.checks.len() >= 6);
    }

    #[test]
    fn sign_flip_mutation_is_caught_and_named() {
        fn flipped_kl(stats: &GaussianStats) -> Result<f64> {
            crate::losses::kl_to_standard_normal(stats).map(|v| -v)
        }
        let fns = BoundFns { kl_to_standard_normal: flipped_kl, ..Default::default() };
        let report = run_bound_checks(&fns, 0);
        assert!(!report.all_passed());
        let failing: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        assert!(failing.contains(&"kl-quadrature-match"), "failing: {failing:?}");
    }
}
