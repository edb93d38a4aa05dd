//! Central finite-difference gradient checking.
//!
//! Compares analytic gradients against (f(x+h) - f(x-h)) / 2h at f64
//! precision. Used by the test suite to validate every loss and every model
//! forward; exposed as a library module so the acceptance suite can reuse it.

use ndarray::ArrayD;

use crate::exec;
use crate::nn::Parameterized;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Default relative-error tolerance.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Relative error with an absolute floor: gradients below the floor are
/// compared on the floor's scale, since central differences carry ~1e-11 of
/// cancellation noise that would otherwise dominate a near-zero denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central finite-difference gradient of `f` over a flat vector.
pub fn finite_diff<F>(f: F, point: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    exec::map_indexed(point.len(), |i| {
        let mut p = point.to_vec();
        p[i] = point[i] + h;
        let up = f(&p);
        p[i] = point[i] - h;
        let down = f(&p);
        (up - down) / (2.0 * h)
    })
}

/// Check an analytic gradient against finite differences over a flat input.
/// Returns the worst relative error.
pub fn check_flat<F>(f: F, point: &[f64], analytic: &[f64], h: f64) -> f64
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    assert_eq!(point.len(), analytic.len());
    let numeric = finite_diff(f, point, h);
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Flat copy of every parameter of a module, in visitation order.
pub fn flatten_params(module: &impl Parameterized) -> Vec<f64> {
    let mut out = Vec::new();
    module.for_each_param("", &mut |_, v| out.extend(v.iter().copied()));
    out
}

/// Overwrite every parameter of a module from a flat vector.
pub fn load_flat_params(module: &mut impl Parameterized, flat: &[f64]) {
    let mut offset = 0;
    module.visit_params("", &mut |_, mut w, _| {
        for v in w.iter_mut() {
            *v = flat[offset];
            offset += 1;
        }
    });
    assert_eq!(offset, flat.len(), "flat parameter vector length mismatch");
}

/// Flat copy of every accumulated gradient, in visitation order.
pub fn flatten_grads(module: &mut impl Parameterized) -> Vec<f64> {
    let mut out = Vec::new();
    module.visit_params("", &mut |_, _, g| out.extend(g.iter().copied()));
    out
}

/// Check a module's parameter gradients against finite differences.
///
/// `loss_fn` evaluates the scalar loss on a fresh perturbed clone each call.
/// Returns the worst relative error over all parameters.
pub fn check_module_params<M, F>(module: &M, analytic: &[f64], loss_fn: F, h: f64) -> f64
where
    M: Parameterized + Clone + Send + Sync,
    F: Fn(&M) -> f64 + Sync,
{
    let point = flatten_params(module);
    assert_eq!(point.len(), analytic.len());
    let numeric: Vec<f64> = exec::map_indexed(point.len(), |i| {
        let mut up = module.clone();
        let mut down = module.clone();
        let mut p = point.clone();
        p[i] = point[i] + h;
        load_flat_params(&mut up, &p);
        p[i] = point[i] - h;
        load_flat_params(&mut down, &p);
        (loss_fn(&up) - loss_fn(&down)) / (2.0 * h)
    });
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Finite-difference gradient of a scalar function of a tensor input.
pub fn finite_diff_tensor<F>(f: F, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    F: Fn(&ArrayD<f64>) -> f64 + Sync,
{
    let flat: Vec<f64> = x.iter().copied().collect();
    let shape = x.raw_dim();
    let grads = exec::map_indexed(flat.len(), |i| {
        let mut p = flat.clone();
        p[i] = flat[i] + h;
        let up = f(&ArrayD::from_shape_vec(shape.clone(), p.clone()).expect("shape"));
        p[i] = flat[i] - h;
        let down = f(&ArrayD::from_shape_vec(shape.clone(), p).expect("shape"));
        (up - down) / (2.0 * h)
    });
    ArrayD::from_shape_vec(shape, grads).expect("shape")
}

/// Worst relative error between an analytic tensor gradient and finite
/// differences of `f` at `x`.
pub fn check_tensor_grad<F>(f: F, x: &ArrayD<f64>, analytic: &ArrayD<f64>, h: f64) -> f64
where
    F: Fn(&ArrayD<f64>) -> f64 + Sync,
{
    assert_eq!(x.shape(), analytic.shape());
    let numeric = finite_diff_tensor(f, x, h);
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_recovers_polynomial_gradient() {
        // f(x, y) = x^2 + 3xy
        let f = |v: &[f64]| v[0] * v[0] + 3.0 * v[0] * v[1];
        let g = finite_diff(f, &[2.0, -1.0], 1e-6);
        assert!(rel_err(g[0], 2.0 * 2.0 + 3.0 * -1.0) < 1e-8);
        assert!(rel_err(g[1], 3.0 * 2.0) < 1e-8);
    }

    #[test]
    fn rel_err_has_absolute_floor() {
        assert!(rel_err(0.0, 1e-12) < 1e-3);
        assert!(rel_err(1.0, 2.0) > 0.4);
    }
}
