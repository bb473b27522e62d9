//! Weighted isotonic regression (pool adjacent violators) and the
//! piecewise-linear monotone map built on top of it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighted least-squares nondecreasing fit of `y`.
pub fn pava(y: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if y.is_empty() {
        return Err(Error::EmptySet);
    }
    if y.len() != w.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} values for {} weights",
            y.len(),
            w.len()
        )));
    }
    if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid("isotonic weights must be positive and finite"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("isotonic target".into()));
    }

    // Each block: (weighted mean, total weight, number of points).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&yi, &wi) in y.iter().zip(w) {
        let mut cur = (yi, wi, 1usize);
        while let Some(&(mean, weight, len)) = blocks.last() {
            if mean <= cur.0 {
                break;
            }
            blocks.pop();
            let total = weight + cur.1;
            cur = ((mean * weight + cur.0 * cur.1) / total, total, len + cur.2);
        }
        blocks.push(cur);
    }

    let mut out = Vec::with_capacity(y.len());
    for (mean, _, len) in blocks {
        out.extend(std::iter::repeat_n(mean, len));
    }
    Ok(out)
}

/// Nondecreasing map defined by sorted breakpoints, linearly interpolated
/// between them and clamped outside `[x_min, x_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicMap {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl IsotonicMap {
    pub fn from_points(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(Error::invalid("isotonic map needs matching, non-empty point lists"));
        }
        if breakpoints.windows(2).any(|p| !(p[0] < p[1])) {
            return Err(Error::invalid("isotonic breakpoints must be strictly increasing"));
        }
        if values.windows(2).any(|p| p[0] > p[1]) {
            return Err(Error::invalid("isotonic values must be nondecreasing"));
        }
        Ok(IsotonicMap { breakpoints, values })
    }

    pub fn identity() -> Self {
        IsotonicMap {
            breakpoints: vec![0.0, 1.0],
            values: vec![0.0, 1.0],
        }
    }

    /// Fits targets `y` against inputs `x` (unit weights). Equal inputs are
    /// pooled before the monotone fit so the result is a function of `x`.
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} inputs for {} targets",
                x.len(),
                y.len()
            )));
        }
        if x.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));

        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        let mut ws: Vec<f64> = Vec::new();
        for &i in &order {
            match xs.last() {
                Some(&last) if last == x[i] => {
                    let k = ys.len() - 1;
                    ys[k] += y[i];
                    ws[k] += 1.0;
                }
                _ => {
                    xs.push(x[i]);
                    ys.push(y[i]);
                    ws.push(1.0);
                }
            }
        }
        for (yk, wk) in ys.iter_mut().zip(&ws) {
            *yk /= wk;
        }
        let values = pava(&ys, &ws)?;
        Ok(IsotonicMap {
            breakpoints: xs,
            values,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let xs = &self.breakpoints;
        let n = xs.len();
        if x <= xs[0] {
            return self.values[0];
        }
        if x >= xs[n - 1] {
            return self.values[n - 1];
        }
        // first index with xs[i] > x; 1 <= hi <= n-1
        let hi = xs.partition_point(|&b| b <= x);
        let lo = hi - 1;
        let t = (x - xs[lo]) / (xs[hi] - xs[lo]);
        let v = self.values[lo] + t * (self.values[hi] - self.values[lo]);
        v.clamp(self.values[lo], self.values[hi])
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive oracle: every contiguous partition of the points, each
    /// block set to its weighted mean, keeping partitions whose block means
    /// are nondecreasing; the lowest weighted squared error wins.
    pub(crate) fn brute_force(y: &[f64], w: &[f64]) -> Vec<f64> {
        let n = y.len();
        let mut best = (f64::INFINITY, Vec::new());
        for cuts in 0u32..(1 << (n - 1)) {
            let mut fit = vec![0.0; n];
            let mut prev = f64::NEG_INFINITY;
            let mut ok = true;
            let mut s = 0;
            for e in 0..n {
                let boundary = e == n - 1 || cuts & (1 << e) != 0;
                if boundary {
                    let ws: f64 = w[s..=e].iter().sum();
                    let m = (s..=e).map(|i| w[i] * y[i]).sum::<f64>() / ws;
                    if m < prev {
                        ok = false;
                        break;
                    }
                    prev = m;
                    fit[s..=e].iter_mut().for_each(|v| *v = m);
                    s = e + 1;
                }
            }
            if !ok {
                continue;
            }
            let loss: f64 = fit.iter().zip(y).zip(w).map(|((f, y), w)| w * (f - y).powi(2)).sum();
            if loss < best.0 {
                best = (loss, fit);
            }
        }
        best.1
    }

    #[test]
    fn single_pool() {
        assert_eq!(pava(&[1.0, 0.0], &[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn already_monotone() {
        assert_eq!(pava(&[0.2, 0.8], &[1.0, 1.0]).unwrap(), vec![0.2, 0.8]);
    }

    #[test]
    fn three_point_pool_matches_brute_force() {
        let fit = pava(&[3.0, 1.0, 2.0], &[1.0; 3]).unwrap();
        assert_eq!(fit, vec![2.0, 2.0, 2.0]);
        assert_eq!(brute_force(&[3.0, 1.0, 2.0], &[1.0; 3]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn errors() {
        assert!(pava(&[], &[]).is_err());
        assert!(pava(&[1.0], &[0.0]).is_err());
        assert!(pava(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn map_interpolates_and_clamps() {
        let m = IsotonicMap::from_points(vec![0.2, 0.6], vec![0.1, 0.5]).unwrap();
        assert_eq!(m.eval(0.0), 0.1);
        assert_eq!(m.eval(1.0), 0.5);
        assert!((m.eval(0.4) - 0.3).abs() < 1e-12);
        assert_eq!(IsotonicMap::identity().eval(0.37), 0.37);
    }

    #[test]
    fn fit_pools_duplicate_inputs() {
        let m = IsotonicMap::fit(&[0.5, 0.5, 0.9], &[0.0, 1.0, 1.0]).unwrap();
        assert_eq!(m.breakpoints(), &[0.5, 0.9]);
        assert_eq!(m.values(), &[0.5, 1.0]);
    }

    proptest! {
        #[test]
        fn pava_is_idempotent_and_monotone(
            y in proptest::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let w = vec![1.0; y.len()];
            let f = pava(&y, &w).unwrap();
            prop_assert!(f.windows(2).all(|p| p[0] <= p[1]));
            prop_assert_eq!(pava(&f, &w).unwrap(), f);
        }

        #[test]
        fn pava_matches_brute_force(
            yw in proptest::collection::vec((-3.0f64..3.0, 0.1f64..3.0), 1..=6),
        ) {
            let (y, w): (Vec<f64>, Vec<f64>) = yw.into_iter().unzip();
            let fit = pava(&y, &w).unwrap();
            let bf = brute_force(&y, &w);
            for (a, b) in fit.iter().zip(&bf) {
                prop_assert!((a - b).abs() <= 1e-6, "{:?} vs {:?}", fit, bf);
            }
        }

        #[test]
        fn fitted_map_is_nondecreasing(
            pts in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..50),
            a in 0.0f64..1.0, b in 0.0f64..1.0,
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let m = IsotonicMap::fit(&x, &y).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(m.eval(lo) <= m.eval(hi));
        }
    }
}
