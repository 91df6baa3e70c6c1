//! Tricube-weighted local linear regression.

use crate::error::{Error, Result};

/// Number of evaluation points on the fitted grid.
pub const GRID_POINTS: usize = 512;
pub const DEFAULT_SPAN: f64 = 0.75;
const MIN_POINTS: usize = 10;

/// A loess curve evaluated on an evenly spaced grid over the data range.
#[derive(Debug, Clone, PartialEq)]
pub struct LoessFit {
    pub grid: Vec<f64>,
    pub fitted: Vec<f64>,
    pub span: f64,
    pub n_points: usize,
}

impl LoessFit {
    /// Index of the smallest fitted value; ties go to the lowest grid point.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (k, v) in self.fitted.iter().enumerate() {
            if *v < self.fitted[best] {
                best = k;
            }
        }
        best
    }
}

/// Data prepared for repeated local fits.
#[derive(Debug, Clone)]
pub struct LocalRegression {
    x: Vec<f64>,
    y: Vec<f64>,
    span: f64,
    q: usize,
}

impl LocalRegression {
    pub fn new(x: &[f64], y: &[f64], span: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Data(format!(
                "loess: {} predictor values but {} responses",
                x.len(),
                y.len()
            )));
        }
        if !(span > 0.0 && span <= 1.0) {
            return Err(Error::Usage(format!("loess span {span} outside (0, 1]")));
        }
        if x.len() < MIN_POINTS {
            return Err(Error::Data(format!(
                "loess needs at least {MIN_POINTS} points, got {}",
                x.len()
            )));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Data("loess: non-finite input".into()));
        }
        let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs[0].0 == pairs[pairs.len() - 1].0 {
            return Err(Error::Data("loess: predictor values are all equal".into()));
        }
        let n = pairs.len();
        let q = ((span * n as f64).floor() as usize).clamp(3, n);
        let (x, y) = pairs.into_iter().unzip();
        Ok(LocalRegression { x, y, span, q })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    /// Index window `[lo, hi)` of the `q` points nearest to `x0`.
    fn neighbourhood(&self, x0: f64) -> (usize, usize) {
        let n = self.x.len();
        let mut hi = self.x.partition_point(|v| *v < x0);
        let mut lo = hi;
        while hi - lo < self.q {
            let take_left = if lo == 0 {
                false
            } else if hi == n {
                true
            } else {
                x0 - self.x[lo - 1] <= self.x[hi] - x0
            };
            if take_left {
                lo -= 1;
            } else {
                hi += 1;
            }
        }
        (lo, hi)
    }

    /// Local linear estimate at `x0`.
    pub fn predict(&self, x0: f64) -> f64 {
        let (lo, hi) = self.neighbourhood(x0);
        let h = (x0 - self.x[lo]).abs().max((self.x[hi - 1] - x0).abs());
        if h == 0.0 {
            return self.y[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        }
        let (mut sw, mut swx, mut swy, mut swxx, mut swxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in lo..hi {
            let d = self.x[k] - x0;
            let u = d.abs() / h;
            if u >= 1.0 {
                continue;
            }
            let w = (1.0 - u * u * u).powi(3);
            sw += w;
            swx += w * d;
            swy += w * self.y[k];
            swxx += w * d * d;
            swxy += w * d * self.y[k];
        }
        if sw == 0.0 {
            return self.y[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        }
        let denom = sw * swxx - swx * swx;
        if denom <= 1e-12 * sw * swxx {
            // Locally constant predictor: fall back to the weighted mean.
            return swy / sw;
        }
        (swxx * swy - swx * swxy) / denom
    }

    pub fn span(&self) -> f64 {
        self.span
    }

    /// Evaluates the curve on `GRID_POINTS` evenly spaced points over the data range.
    pub fn fit_grid(&self) -> LoessFit {
        let (a, b) = self.x_range();
        let step = (b - a) / (GRID_POINTS - 1) as f64;
        let grid: Vec<f64> = (0..GRID_POINTS)
            .map(|k| if k == GRID_POINTS - 1 { b } else { a + step * k as f64 })
            .collect();
        let fitted = grid.iter().map(|&g| self.predict(g)).collect();
        LoessFit {
            grid,
            fitted,
            span: self.span,
            n_points: self.x.len(),
        }
    }
}

pub fn fit_loess(x: &[f64], y: &[f64], span: f64) -> Result<LoessFit> {
    Ok(LocalRegression::new(x, y, span)?.fit_grid())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reproduces_lines() {
        let x: Vec<f64> = (0..200).map(|k| (k as f64 * 0.37).sin() * 3.0 + 4.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.25).collect();
        for span in [0.05, 0.3, 0.75, 1.0] {
            let fit = fit_loess(&x, &y, span).unwrap();
            for (g, f) in fit.grid.iter().zip(&fit.fitted).skip(1).take(GRID_POINTS - 2) {
                assert!((f - (2.5 * g - 1.25)).abs() < 1e-8, "span {span}: {f} at {g}");
            }
        }
    }

    #[test]
    fn constant_response() {
        let x: Vec<f64> = (0..50).map(|k| k as f64).collect();
        let fit = fit_loess(&x, &vec![0.1; 50], 0.75).unwrap();
        assert!(fit.fitted.iter().all(|v| (v - 0.1).abs() < 1e-14));
        assert_eq!(fit.argmin(), fit.fitted.iter().position(|v| *v == fit.fitted[fit.argmin()]).unwrap());
    }

    #[test]
    fn grid_shape() {
        let x: Vec<f64> = (0..30).map(|k| 1.0 + k as f64 * 0.1).collect();
        let fit = fit_loess(&x, &x, 0.5).unwrap();
        assert_eq!(fit.grid.len(), GRID_POINTS);
        assert_eq!(fit.grid[0], 1.0);
        assert_eq!(*fit.grid.last().unwrap(), x[29]);
        assert!(fit.grid.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(fit.n_points, 30);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(fit_loess(&[1.0; 5], &[1.0; 5], 0.75).is_err());
        assert!(fit_loess(&[2.0; 20], &[1.0; 20], 0.75).is_err());
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        assert!(fit_loess(&x, &x, 0.0).is_err());
        assert!(fit_loess(&x, &x, 1.5).is_err());
    }

    /// Brute-force local linear fit at one point: full sort by distance.
    fn brute_local_fit(x: &[f64], y: &[f64], span: f64, x0: f64) -> f64 {
        let n = x.len();
        let q = ((span * n as f64).floor() as usize).clamp(3, n);
        let mut d: Vec<(f64, usize)> = x.iter().enumerate().map(|(k, v)| ((v - x0).abs(), k)).collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0));
        let h = d[q - 1].0;
        // weighted least squares via normal equations on (1, x)
        let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(dist, k) in &d[..q] {
            let u = dist / h;
            if u >= 1.0 {
                continue;
            }
            let w = (1.0 - u.powi(3)).powi(3);
            a11 += w;
            a12 += w * x[k];
            a22 += w * x[k] * x[k];
            b1 += w * y[k];
            b2 += w * x[k] * y[k];
        }
        let det = a11 * a22 - a12 * a12;
        let c0 = (a22 * b1 - a12 * b2) / det;
        let c1 = (a11 * b2 - a12 * b1) / det;
        c0 + c1 * x0
    }

    #[test]
    fn noisy_parabola_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = 2.3;
        let x: Vec<f64> = (0..2000).map(|_| rng.random_range(0.5..5.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 0.1 + 0.05 * (v - x0) * (v - x0) + rng.random_range(-0.02..0.02))
            .collect();
        let fit = fit_loess(&x, &y, 0.3).unwrap();

        // dense brute-force oracle on a finer grid
        let (a, b) = (fit.grid[0], *fit.grid.last().unwrap());
        let dense: Vec<f64> = (0..2048).map(|k| a + (b - a) * k as f64 / 2047.0).collect();
        let brute: Vec<f64> = dense.iter().map(|&g| brute_local_fit(&x, &y, 0.3, g)).collect();
        let kmin = (0..brute.len()).min_by(|&i, &j| brute[i].total_cmp(&brute[j])).unwrap();
        // the curve is flat near its minimum, so compare levels rather than
        // locations
        let got = fit.grid[fit.argmin()];
        let fitted_min = fit.fitted[fit.argmin()];
        assert!(fitted_min >= brute[kmin] - 1e-9);
        assert!(fitted_min - brute[kmin] < 1e-4, "{fitted_min} vs {}", brute[kmin]);
        assert!((got - dense[kmin]).abs() < 0.1);
        assert!((got - x0).abs() < 0.2);

        for (g, f) in fit.grid.iter().zip(&fit.fitted).step_by(37) {
            assert!((f - brute_local_fit(&x, &y, 0.3, *g)).abs() < 1e-9);
        }
    }
}
