//! Closed-form toy losses with exact gradients.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnalyticLoss {
    /// `½·c·‖θ‖²` in `dim` dimensions.
    Quadratic { curvature: f64, dim: usize },
    /// `c_sharp·θ²` for `θ < 0`, `c_flat·θ²` for `θ ≥ 0`. Value and slope
    /// are continuous at 0.
    AsymmetricValley { sharp: f64, flat: f64 },
    /// Two inverted Gaussian wells of equal depth:
    /// `−depth·(exp(−(θ−a)²/2σ_a²) + exp(−(θ−b)²/2σ_b²))`.
    SharpFlatBimodal {
        sharp_center: f64,
        sharp_width: f64,
        flat_center: f64,
        flat_width: f64,
        depth: f64,
    },
    /// `(a − x)² + b·(y − x²)²`.
    Rosenbrock { a: f64, b: f64 },
}

/// Which well of the bimodal loss a point drains into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Well {
    Sharp,
    Flat,
}

impl AnalyticLoss {
    pub fn quadratic(dim: usize) -> Self {
        Self::Quadratic { curvature: 1.0, dim }
    }

    pub fn asymmetric_valley() -> Self {
        Self::AsymmetricValley { sharp: 50.0, flat: 0.5 }
    }

    pub fn sharp_flat_bimodal() -> Self {
        Self::SharpFlatBimodal {
            sharp_center: -1.0,
            sharp_width: 0.05,
            flat_center: 1.0,
            flat_width: 1.0,
            depth: 1.0,
        }
    }

    pub fn rosenbrock() -> Self {
        Self::Rosenbrock { a: 1.0, b: 100.0 }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Quadratic { dim, .. } => *dim,
            Self::AsymmetricValley { .. } | Self::SharpFlatBimodal { .. } => 1,
            Self::Rosenbrock { .. } => 2,
        }
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        self.eval(theta).map(|(v, _)| v)
    }

    /// Loss value and exact gradient at `theta`.
    pub fn eval(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        if theta.len() != self.dim() {
            return Err(Error::Shape(format!(
                "point of dimension {} for a {}-dimensional loss",
                theta.len(),
                self.dim()
            )));
        }
        Ok(match *self {
            Self::Quadratic { curvature, .. } => {
                let v = 0.5 * curvature * theta.iter().map(|t| t * t).sum::<f64>();
                (v, theta.iter().map(|t| curvature * t).collect())
            }
            Self::AsymmetricValley { sharp, flat } => {
                let t = theta[0];
                let c = if t < 0.0 { sharp } else { flat };
                (c * t * t, vec![2.0 * c * t])
            }
            Self::SharpFlatBimodal { sharp_center, sharp_width, flat_center, flat_width, depth } => {
                let t = theta[0];
                let mut v = 0.0;
                let mut g = 0.0;
                for (c, s) in [(sharp_center, sharp_width), (flat_center, flat_width)] {
                    let e = (-(t - c).powi(2) / (2.0 * s * s)).exp();
                    v -= depth * e;
                    g += depth * (t - c) / (s * s) * e;
                }
                (v, vec![g])
            }
            Self::Rosenbrock { a, b } => {
                let (x, y) = (theta[0], theta[1]);
                let v = (a - x).powi(2) + b * (y - x * x).powi(2);
                let gx = -2.0 * (a - x) - 4.0 * b * x * (y - x * x);
                let gy = 2.0 * b * (y - x * x);
                (v, vec![gx, gy])
            }
        })
    }

    fn slope(&self, t: f64) -> f64 {
        self.eval(&[t]).map(|(_, g)| g[0]).unwrap_or(f64::NAN)
    }

    /// Critical point of the bimodal loss near `start`, by Newton's method on
    /// the gradient with a central-difference second derivative.
    pub fn critical_point_near(&self, start: f64) -> Result<f64> {
        let Self::SharpFlatBimodal { sharp_width, flat_width, .. } = *self else {
            return Err(Error::Config("critical points are only located for the bimodal loss".into()));
        };
        let h = 1e-4 * sharp_width.min(flat_width);
        let mut t = start;
        for _ in 0..100 {
            let g = self.slope(t);
            let curv = (self.slope(t + h) - self.slope(t - h)) / (2.0 * h);
            if curv == 0.0 || !curv.is_finite() {
                break;
            }
            let step = g / curv;
            t -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        Ok(t)
    }

    /// The local maximum separating the two wells, by bisection on the
    /// gradient sign between the wells' minima.
    pub fn ridge(&self) -> Result<f64> {
        let Self::SharpFlatBimodal { sharp_center, flat_center, .. } = *self else {
            return Err(Error::Config("only the bimodal loss has a ridge".into()));
        };
        let (mut lo, mut hi) = (self.critical_point_near(sharp_center)?, self.critical_point_near(flat_center)?);
        let sign_lo = self.slope(lo + 1e-9 * (hi - lo)).signum();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.slope(mid).signum() == sign_lo {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// The well whose gradient-flow basin contains `t`.
    pub fn basin(&self, t: f64) -> Result<Well> {
        let Self::SharpFlatBimodal { sharp_center, flat_center, .. } = *self else {
            return Err(Error::Config("only the bimodal loss has basins".into()));
        };
        let ridge = self.ridge()?;
        let sharp_side = (t - ridge).signum() == (sharp_center - ridge).signum();
        debug_assert!((flat_center - ridge).signum() != (sharp_center - ridge).signum());
        Ok(if sharp_side { Well::Sharp } else { Well::Flat })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::ParameterVector;

    fn fd(loss: &AnalyticLoss, t: &[f64], h: f64) -> Vec<f64> {
        (0..t.len())
            .map(|i| {
                let mut a = t.to_vec();
                let mut b = t.to_vec();
                a[i] += h;
                b[i] -= h;
                (loss.value(&a).unwrap() - loss.value(&b).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn fixed_points() {
        assert_eq!(AnalyticLoss::quadratic(1).eval(&[0.0]).unwrap(), (0.0, vec![0.0]));
        assert_eq!(AnalyticLoss::quadratic(1).value(&[2.0]).unwrap(), 2.0);
        assert_eq!(AnalyticLoss::rosenbrock().eval(&[1.0, 1.0]).unwrap(), (0.0, vec![0.0, 0.0]));
        assert!(AnalyticLoss::rosenbrock().eval(&[1.0]).is_err());
    }

    #[test]
    fn bimodal_minima_are_critical() {
        let l = AnalyticLoss::sharp_flat_bimodal();
        for c in [-1.0, 1.0] {
            let t = l.critical_point_near(c).unwrap();
            assert!((t - c).abs() < 1e-3, "minimum at {t}");
            let (_, g) = l.eval(&[t]).unwrap();
            assert!(g[0].abs() < 1e-12, "gradient {} at {t}", g[0]);
        }
        // The flat well is the only contribution at +1.
        assert_eq!(l.eval(&[1.0]).unwrap().1[0], 0.0);
    }

    #[test]
    fn bimodal_ridge_and_basins() {
        let l = AnalyticLoss::sharp_flat_bimodal();
        let r = l.ridge().unwrap();
        assert!(r > -1.0 && r < 1.0);
        assert!(l.eval(&[r]).unwrap().1[0].abs() < 1e-9);
        assert_eq!(l.basin(-1.2).unwrap(), Well::Sharp);
        assert_eq!(l.basin(r - 1e-3).unwrap(), Well::Sharp);
        assert_eq!(l.basin(r + 1e-3).unwrap(), Well::Flat);
        assert_eq!(l.basin(2.0).unwrap(), Well::Flat);
    }

    #[test]
    fn asymmetric_valley_is_c1_at_zero() {
        let l = AnalyticLoss::asymmetric_valley();
        assert_eq!(l.eval(&[0.0]).unwrap(), (0.0, vec![0.0]));
        assert_eq!(l.value(&[-0.1]).unwrap(), 50.0 * 0.01);
        assert!((l.value(&[0.1]).unwrap() - 0.005).abs() < 1e-18);
    }

    #[test]
    fn quadratic_agrees_with_autodiff() {
        // ½‖θ‖² written as a one-row squared error against zero.
        let theta = ParameterVector::from_vec(vec![0.3, -1.2, 2.5]);
        let mut row = theta.layout().segments()[0].clone();
        row.shape = vec![1, 3];
        let mut tape = Tape::new();
        let leaf = tape.param(&theta, &row);
        let l = tape.half_squared_error(leaf, &[0.0; 3]).unwrap();
        let m = tape.mean(l);
        let g = tape.backward(m, 3).unwrap();
        let (v, exact) = AnalyticLoss::quadratic(3).eval(theta.values()).unwrap();
        assert!((tape.value(m).data[0] - v).abs() < 1e-15);
        assert_eq!(g, exact);
    }

    proptest::proptest! {
        #[test]
        fn gradients_match_finite_differences(x in -2.0f64..2.0, y in -1.0f64..3.0) {
            let cases = [
                (AnalyticLoss::quadratic(2), vec![x, y]),
                (AnalyticLoss::Quadratic { curvature: 3.5, dim: 1 }, vec![x]),
                (AnalyticLoss::asymmetric_valley(), vec![x]),
                (AnalyticLoss::sharp_flat_bimodal(), vec![x]),
                (AnalyticLoss::rosenbrock(), vec![x, y]),
            ];
            for (loss, t) in cases {
                // Skip the kink of the asymmetric valley's second derivative.
                if matches!(loss, AnalyticLoss::AsymmetricValley { .. }) && t[0].abs() < 1e-3 {
                    continue;
                }
                let (_, g) = loss.eval(&t).unwrap();
                let num = fd(&loss, &t, 1e-6);
                for (a, b) in g.iter().zip(&num) {
                    let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-2);
                    proptest::prop_assert!(rel < 1e-8, "{loss:?} at {t:?}: {a} vs {b}");
                }
            }
        }
    }
}
