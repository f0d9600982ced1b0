use serde::{Deserialize, Serialize};

/// Cauchy loss `ρ(x) = a²·ln(1 + x/a²)` on a squared residual `x`, with `ρ'(x)`.
pub fn cauchy(x: f64, a: f64) -> (f64, f64) {
    let a2 = a * a;
    let inner = 1.0 + x / a2;
    (a2 * inner.ln(), 1.0 / inner)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Trivial,
    Cauchy,
}

/// Robust loss applied to the squared norm of a residual block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustLoss {
    pub kind: LossKind,
    pub scale: f64,
}

impl RobustLoss {
    pub const TRIVIAL: RobustLoss = RobustLoss {
        kind: LossKind::Trivial,
        scale: 1.0,
    };

    pub fn cauchy(scale: f64) -> Self {
        assert!(scale > 0.0, "Cauchy scale must be positive, got {scale}");
        Self {
            kind: LossKind::Cauchy,
            scale,
        }
    }

    /// `[ρ(s), ρ'(s), ρ''(s)]` for a squared norm `s ≥ 0`.
    pub fn evaluate(&self, s: f64) -> [f64; 3] {
        match self.kind {
            LossKind::Trivial => [s, 1.0, 0.0],
            LossKind::Cauchy => {
                let a2 = self.scale * self.scale;
                let (rho, d1) = cauchy(s, self.scale);
                [rho, d1, -d1 * d1 / a2]
            }
        }
    }
}

impl Default for RobustLoss {
    fn default() -> Self {
        Self::TRIVIAL
    }
}

/// Triggs-style correction that lets a robustified block enter the
/// Gauss-Newton system as if it were a plain least-squares block.
pub(crate) struct Corrector {
    sqrt_rho1: f64,
    residual_scaling: f64,
    alpha_sq_norm: f64,
}

impl Corrector {
    pub(crate) fn new(sq_norm: f64, rho: [f64; 3]) -> Self {
        let sqrt_rho1 = rho[1].sqrt();
        if sq_norm == 0.0 || rho[2] <= 0.0 {
            return Self {
                sqrt_rho1,
                residual_scaling: sqrt_rho1,
                alpha_sq_norm: 0.0,
            };
        }
        // Only reached for losses with positive curvature; Cauchy takes the
        // branch above.
        let d = 1.0 + 2.0 * sq_norm * rho[2] / rho[1];
        let alpha = 1.0 - d.sqrt();
        Self {
            sqrt_rho1,
            residual_scaling: sqrt_rho1 / (1.0 - alpha),
            alpha_sq_norm: alpha / sq_norm,
        }
    }

    pub(crate) fn correct_residual(&self, r: &mut nalgebra::DVector<f64>) {
        *r *= self.residual_scaling;
    }

    /// Must be called with the uncorrected residual.
    pub(crate) fn correct_jacobian(&self, r: &nalgebra::DVector<f64>, j: &mut nalgebra::DMatrix<f64>) {
        if self.alpha_sq_norm == 0.0 {
            *j *= self.sqrt_rho1;
            return;
        }
        let rt_j = r.transpose() * &*j;
        *j -= (r * rt_j) * self.alpha_sq_norm;
        *j *= self.sqrt_rho1;
    }
}
