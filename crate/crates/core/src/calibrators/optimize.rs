//! Bounded derivative-free minimisation used by every fitted calibrator.

use crate::error::{Error, Result};

pub const GOLDEN_TOLERANCE: f64 = 1e-4;

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section search on `[lo, hi]`, stopping once the bracket is no
/// wider than `tol`. Returns the bracket midpoint.
pub fn minimize_scalar<F>(mut objective: F, lo: f64, hi: f64, tol: f64) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid(format!("empty search interval [{lo}, {hi}]")));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let mut eval = |x: f64| -> Result<f64> {
        let v = objective(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("objective value {v} at {x}")))
        }
    };
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c)?;
    let mut fd = eval(d)?;
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

/// Cyclic coordinate descent with a golden-section line search per
/// coordinate. A coordinate move is kept only when it lowers the objective,
/// so the result is never worse than `start`.
pub(crate) fn coordinate_descent<F>(
    mut objective: F,
    start: Vec<f64>,
    bounds: &[(f64, f64)],
    tol: f64,
    max_passes: usize,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> f64,
{
    debug_assert_eq!(start.len(), bounds.len());
    let mut x = start;
    let mut best = objective(&x);
    if !best.is_finite() {
        return Err(Error::NonFinite("objective at starting point".into()));
    }
    for _ in 0..max_passes {
        let before = best;
        for i in 0..x.len() {
            let (lo, hi) = bounds[i];
            let mut probe = x.clone();
            let xi = minimize_scalar(
                |v| {
                    probe[i] = v;
                    objective(&probe)
                },
                lo,
                hi,
                tol,
            )?;
            let mut cand = x.clone();
            cand[i] = xi;
            let v = objective(&cand);
            if v < best {
                best = v;
                x = cand;
            }
        }
        if before - best <= 1e-12 * before.abs().max(1.0) {
            break;
        }
    }
    Ok((x, best))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_minimum() {
        let x = minimize_scalar(|x| (x - 2.0).powi(2), 0.05, 20.0, GOLDEN_TOLERANCE).unwrap();
        assert!((x - 2.0).abs() < 1e-3, "{x}");
    }

    #[test]
    fn monotone_objective_hits_lower_boundary() {
        let x = minimize_scalar(|x| x, 0.05, 20.0, GOLDEN_TOLERANCE).unwrap();
        assert!((x - 0.05).abs() <= GOLDEN_TOLERANCE, "{x}");
        let x = minimize_scalar(|x| -x, 0.05, 20.0, GOLDEN_TOLERANCE).unwrap();
        assert!((x - 20.0).abs() <= GOLDEN_TOLERANCE, "{x}");
    }

    #[test]
    fn constant_objective_stays_in_range() {
        let x = minimize_scalar(|_| 3.0, 0.05, 20.0, GOLDEN_TOLERANCE).unwrap();
        assert!((0.05..=20.0).contains(&x));
    }

    #[test]
    fn rejects_non_finite_and_bad_interval() {
        assert!(minimize_scalar(|x| if x > 1.0 { f64::NAN } else { x }, 0.0, 5.0, 1e-4).is_err());
        assert!(minimize_scalar(|x| x, 1.0, 1.0, 1e-4).is_err());
    }

    #[test]
    fn deterministic() {
        let f = |x: f64| (x - 1.234).abs() + 0.1 * x.sin();
        let a = minimize_scalar(f, -3.0, 3.0, 1e-6).unwrap();
        let b = minimize_scalar(f, -3.0, 3.0, 1e-6).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn coordinate_descent_on_separable_bowl() {
        let (x, v) = coordinate_descent(
            |p| (p[0] - 1.0).powi(2) + (p[1] + 2.0).powi(2),
            vec![0.0, 0.0],
            &[(-5.0, 5.0), (-5.0, 5.0)],
            1e-6,
            20,
        )
        .unwrap();
        assert!((x[0] - 1.0).abs() < 1e-5 && (x[1] + 2.0).abs() < 1e-5);
        assert!(v < 1e-9);
    }
}
