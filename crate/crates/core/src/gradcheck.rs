//! Central finite-difference checks for scalar functions of one tensor.

use crate::autograd::{grad_values, Var};
use crate::tensor::Tensor;

/// Step used for central differences at f64.
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖numeric‖₂, 1e-12)`.
    pub fn relative_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .data()
            .iter()
            .zip(self.numeric.data())
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = self.numeric.data().iter().map(|n| n * n).sum::<f64>().sqrt();
        diff / norm.max(1e-12)
    }

    /// Whether the numeric gradient is non-trivial, so a check is meaningful.
    pub fn is_nonzero(&self) -> bool {
        self.numeric.max_abs() > 1e-9
    }
}

/// Compare the reverse-mode gradient of `f` at `x` with central differences.
pub fn check(x: &Tensor, f: impl Fn(&Var) -> Var) -> GradCheck {
    let v = Var::parameter(x.clone());
    let analytic = grad_values(&f(&v), &[&v]).remove(0);
    let mut numeric = vec![0.0; x.numel()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= STEP;
        let fp = f(&Var::parameter(plus)).item();
        let fm = f(&Var::parameter(minus)).item();
        *slot = (fp - fm) / (2.0 * STEP);
    }
    GradCheck {
        analytic,
        numeric: Tensor::from_vec(x.shape(), numeric),
    }
}
