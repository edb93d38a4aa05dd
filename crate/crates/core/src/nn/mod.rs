//! Minimal differentiable building blocks.
//!
//! Layers own their parameters and accumulated gradients; backward passes are
//! hand-derived and validated against central finite differences. Everything
//! runs in f64 so the same code path serves training and the gradient-check
//! harness.

pub mod layers;
pub mod optim;

use ndarray::{ArrayViewD, ArrayViewMutD};

/// Visitor over (name, parameter, gradient) triples, in a fixed order.
pub type ParamVisitor<'a> = dyn FnMut(&str, ArrayViewMutD<'_, f64>, ArrayViewMutD<'_, f64>) + 'a;

/// Anything holding trainable parameters.
pub trait Parameterized {
    /// Visit every parameter tensor together with its gradient buffer.
    /// `prefix` namespaces the tensors of composed modules.
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>);

    /// Read-only walk over parameter tensors, same order and names as
    /// `visit_params`.
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, f64>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param("", &mut |_, v| n += v.len());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params("", &mut |_, _, mut g| g.fill(0.0));
    }

    /// Global L2 norm of all gradients.
    fn grad_norm(&mut self) -> f64 {
        let mut sq = 0.0;
        self.visit_params("", &mut |_, _, g| {
            sq += g.iter().map(|&v| v * v).sum::<f64>();
        });
        sq.sqrt()
    }

    /// Scale gradients so the global norm does not exceed `max_norm`.
    fn clip_grad_norm(&mut self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            self.visit_params("", &mut |_, _, mut g| g.mapv_inplace(|v| v * scale));
        }
    }
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}
