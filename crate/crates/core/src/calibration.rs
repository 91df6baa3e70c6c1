//! Estimation of the Scale-AR(1) parameters from historical scale factors.
//!
//! The scale factor of a region is its TFR divided by the national TFR.
//! Its long-run absolute deviation from one and its absolute first
//! difference are smoothed against national TFR; the curves' values at the
//! minimum of the first one are converted to standard deviations under a
//! normal assumption and mapped to (phi, sigma) through the stationary AR(1)
//! moment identities.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use rayon::join;

use crate::data::{Country, MomentSummary, ScaleAr1Params};
use crate::error::{Error, Result};
use crate::loess::LocalRegression;
use crate::stats::sample_variance;

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaRow {
    pub country_id: String,
    pub region_id: String,
    pub period_index: i32,
    pub alpha: f64,
    /// Change from the previous period's scale factor, when that exists.
    pub delta_alpha: Option<f64>,
    /// National TFR at this period; the smoothing predictor.
    pub tfr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlphaPanel {
    pub rows: Vec<AlphaRow>,
}

impl AlphaPanel {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Collects every (region, period) scale factor where both the regional and
/// the national value are observed.
pub fn build_alpha_panel(countries: &[Country]) -> Result<AlphaPanel> {
    let mut rows = Vec::new();
    for c in countries {
        let national = c.national();
        for region in c.regions() {
            let mut prev: Option<f64> = None;
            for pos in 0..region.len() {
                let alpha = match (region.get(pos), national.get(pos)) {
                    (Some(r), Some(n)) => Some((r / n, n)),
                    _ => None,
                };
                match alpha {
                    Some((a, n)) => {
                        rows.push(AlphaRow {
                            country_id: c.country_id().to_string(),
                            region_id: region.geography_id().to_string(),
                            period_index: region.periods()[pos].index,
                            alpha: a,
                            delta_alpha: prev.map(|p| a - p),
                            tfr: n,
                        });
                        prev = Some(a);
                    }
                    None => prev = None,
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Data(
            "no period with both regional and national TFR observed".into(),
        ));
    }
    Ok(AlphaPanel { rows })
}

/// Smoothed asymptotic moments of the scale-factor process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticMoments {
    /// Minimum over TFR of the smoothed E|alpha - 1|.
    pub e_abs_alpha: f64,
    /// Smoothed E|delta alpha| at `tfr_at_min`.
    pub e_abs_delta: f64,
    pub tfr_at_min: f64,
}

pub fn find_asymptotic_moments(panel: &AlphaPanel, span: f64) -> Result<AsymptoticMoments> {
    if panel.is_empty() {
        return Err(Error::Data("empty scale-factor panel".into()));
    }
    let (xa, ya): (Vec<f64>, Vec<f64>) = panel.rows.iter().map(|r| (r.tfr, (r.alpha - 1.0).abs())).unzip();
    let (xd, yd): (Vec<f64>, Vec<f64>) = panel
        .rows
        .iter()
        .filter_map(|r| r.delta_alpha.map(|d| (r.tfr, d.abs())))
        .unzip();

    let (level, change) = join(
        || LocalRegression::new(&xa, &ya, span),
        || LocalRegression::new(&xd, &yd, span),
    );
    let level = level?.fit_grid();
    let change = change?;
    let k = level.argmin();
    let tfr_at_min = level.grid[k];
    Ok(AsymptoticMoments {
        e_abs_alpha: level.fitted[k],
        e_abs_delta: change.predict(tfr_at_min),
        tfr_at_min,
    })
}

/// Global AR(1) persistence and innovation scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalAr1 {
    pub phi: f64,
    pub sigma: f64,
}

/// Standard deviation of a zero-mean normal from its mean absolute value.
pub fn sd_from_mean_abs(mean_abs: f64) -> f64 {
    FRAC_PI_2.sqrt() * mean_abs
}

/// Maps the two mean absolute moments to (phi, sigma):
/// `phi = 1 - Var(d)/(2 Var(a))`, `sigma^2 = Var(d) - (1-phi)^2 Var(a)`.
pub fn derive_phi_sigma(e_abs_alpha: f64, e_abs_delta: f64) -> Result<GlobalAr1> {
    if !(e_abs_alpha > 0.0 && e_abs_delta > 0.0) {
        return Err(Error::Numeric(format!(
            "moments must be positive (E|alpha-1| = {e_abs_alpha}, E|delta alpha| = {e_abs_delta})"
        )));
    }
    let var_alpha = sd_from_mean_abs(e_abs_alpha).powi(2);
    let var_delta = sd_from_mean_abs(e_abs_delta).powi(2);
    let phi = 1.0 - var_delta / (2.0 * var_alpha);
    if !(phi > 0.0 && phi < 1.0) {
        return Err(Error::Numeric(format!(
            "phi = {phi} outside (0, 1) for E|alpha-1| = {e_abs_alpha}, E|delta alpha| = {e_abs_delta}"
        )));
    }
    let radicand = var_delta - (1.0 - phi).powi(2) * var_alpha;
    if radicand <= 0.0 {
        return Err(Error::Numeric(format!(
            "sigma^2 = {radicand} not positive for E|alpha-1| = {e_abs_alpha}, E|delta alpha| = {e_abs_delta}"
        )));
    }
    Ok(GlobalAr1 {
        phi,
        sigma: radicand.sqrt(),
    })
}

/// Country innovation scale: `sqrt(min(sigma^2, (1-phi^2) Var_r(alpha_P)))`.
///
/// Countries with fewer than two regions with a defined last scale factor
/// get the global sigma.
pub fn derive_sigma_c(global: GlobalAr1, country: &Country) -> f64 {
    let alphas: Vec<f64> = country
        .regions()
        .iter()
        .filter_map(|r| country.last_scale_factor(r.geography_id()).map(|(_, a)| a))
        .collect();
    if alphas.len() < 2 {
        return global.sigma;
    }
    let cap = (1.0 - global.phi * global.phi) * sample_variance(&alphas);
    cap.min(global.sigma * global.sigma).sqrt()
}

/// Assembles a full parameter set for the given countries from global values.
pub fn params_from_global(global: GlobalAr1, countries: &[Country]) -> ScaleAr1Params {
    let mut sigma_c = BTreeMap::new();
    let mut alpha_init = BTreeMap::new();
    for c in countries {
        sigma_c.insert(c.country_id().to_string(), derive_sigma_c(global, c));
        for r in c.regions() {
            if let Some((_, a)) = c.last_scale_factor(r.geography_id()) {
                alpha_init.insert(r.geography_id().to_string(), a);
            }
        }
    }
    ScaleAr1Params {
        phi: global.phi,
        sigma: global.sigma,
        sigma_c,
        alpha_init,
        provenance: None,
    }
}

/// Full calibration: panel, smoothing, moment identities, country scales.
pub fn calibrate(countries: &[Country], span: f64) -> Result<ScaleAr1Params> {
    let panel = build_alpha_panel(countries)?;
    let moments = find_asymptotic_moments(&panel, span)?;
    let global = derive_phi_sigma(moments.e_abs_alpha, moments.e_abs_delta)?;
    let mut params = params_from_global(global, countries);
    params.provenance = Some(MomentSummary {
        e_abs_alpha: moments.e_abs_alpha,
        e_abs_delta: moments.e_abs_delta,
        tfr_at_min: moments.tfr_at_min,
        span,
        n_points: panel.len(),
    });
    Ok(params)
}
