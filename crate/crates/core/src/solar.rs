//! Solar ephemeris, UAV-Sun geometry, LOESS detrending and the sinusoidal
//! heading-error model of the downwelling spectrometer.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::par;
use crate::spectral::{GeoLocation, Spectrum};

pub const DEFAULT_MIN_ALTITUDE_DEG: f64 = 40.0;
pub const DEFAULT_LOESS_SPAN: f64 = 0.75;
pub const DEFAULT_LOESS_DEGREE: usize = 2;
pub const DEFAULT_BACKFIT_ITERATIONS: usize = 10;
pub const MIN_ROTATION_SAMPLES: usize = 6;
pub const MIN_ANGULAR_COVERAGE_DEG: f64 = 270.0;
const MAX_ITERATIONS: usize = 100;
const STEP_TOL: f64 = 1e-9;
const DAMPING_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolarGeometry {
    pub altitude_deg: f64,
    /// Clockwise from north, in [0, 360).
    pub azimuth_deg: f64,
    pub timestamp: DateTime<Utc>,
}

fn julian_day(t: DateTime<Utc>) -> f64 {
    t.timestamp_millis() as f64 / 86_400_000.0 + 2_440_587.5
}

/// Low-precision solar ephemeris (NOAA / Meeus): declination, equation of
/// time and hour angle. No refraction correction.
pub fn solar_position(t: DateTime<Utc>, loc: &GeoLocation) -> SolarGeometry {
    let jc = (julian_day(t) - 2_451_545.0) / 36_525.0;
    let l0 = (280.46646 + jc * (36000.76983 + jc * 0.0003032)).rem_euclid(360.0);
    let m = 357.52911 + jc * (35999.05029 - 0.0001537 * jc);
    let e = 0.016708634 - jc * (0.000042037 + 0.0000001267 * jc);
    let mr = m.to_radians();
    let center = mr.sin() * (1.914602 - jc * (0.004817 + 0.000014 * jc))
        + (2.0 * mr).sin() * (0.019993 - 0.000101 * jc)
        + (3.0 * mr).sin() * 0.000289;
    let true_long = l0 + center;
    let omega = (125.04 - 1934.136 * jc).to_radians();
    let app_long = (true_long - 0.00569 - 0.00478 * omega.sin()).to_radians();
    let eps0 = 23.0 + (26.0 + (21.448 - jc * (46.815 + jc * (0.00059 - jc * 0.001813))) / 60.0) / 60.0;
    let eps = (eps0 + 0.00256 * omega.cos()).to_radians();
    let decl = (eps.sin() * app_long.sin()).asin();

    let y = (eps / 2.0).tan().powi(2);
    let l0r = l0.to_radians();
    let eot_min = 4.0
        * (y * (2.0 * l0r).sin() - 2.0 * e * mr.sin() + 4.0 * e * y * mr.sin() * (2.0 * l0r).cos()
            - 0.5 * y * y * (4.0 * l0r).sin()
            - 1.25 * e * e * (2.0 * mr).sin())
        .to_degrees();

    let day_start = t.date_naive().and_hms_opt(0, 0, 0).expect("midnight exists").and_utc();
    let minutes = (t - day_start).num_milliseconds() as f64 / 60_000.0;
    let true_solar = (minutes + eot_min + 4.0 * loc.longitude_deg).rem_euclid(1440.0);
    let hour_angle = (true_solar / 4.0 - 180.0).to_radians();

    let lat = loc.latitude_deg.to_radians();
    let cos_zen = (lat.sin() * decl.sin() + lat.cos() * decl.cos() * hour_angle.cos()).clamp(-1.0, 1.0);
    let altitude_deg = 90.0 - cos_zen.acos().to_degrees();
    let az = (-hour_angle.sin()).atan2(decl.tan() * lat.cos() - lat.sin() * hour_angle.cos());
    let mut azimuth_deg = az.to_degrees().rem_euclid(360.0);
    if azimuth_deg >= 360.0 {
        azimuth_deg = 0.0;
    }
    SolarGeometry { altitude_deg, azimuth_deg, timestamp: t }
}

/// `(heading - azimuth) mod 360`.
pub fn uav_sun_angle(uav_heading_deg: f64, sun_azimuth_deg: f64) -> f64 {
    let a = (uav_heading_deg - sun_azimuth_deg).rem_euclid(360.0);
    if a >= 360.0 { 0.0 } else { a }
}

/// Local weighted polynomial regression with a tricube kernel over the
/// `span` fraction of nearest neighbours, evaluated at each abscissa.
pub fn loess_smooth(x: &[f64], y: &[f64], span: f64, degree: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} abscissae for {} values", y.len())));
    }
    let needed = 4.max(degree + 2);
    if n < needed {
        return Err(Error::TooFewPoints { needed, got: n });
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::InvalidParameter(format!("span {span} not in (0, 1]")));
    }
    let q = ((span * n as f64).floor() as usize).clamp(degree + 2, n);
    let out = par::map_range(n, |i| loess_at(x, y, x[i], q, degree));
    out.into_iter().collect()
}

fn loess_at(x: &[f64], y: &[f64], x0: f64, q: usize, degree: usize) -> Result<f64> {
    let mut dist: Vec<f64> = x.iter().map(|v| (v - x0).abs()).collect();
    let (_, h, _) = dist.select_nth_unstable_by(q - 1, f64::total_cmp);
    let h = *h;
    let mut xs = Vec::with_capacity(q);
    let mut ws = Vec::with_capacity(q);
    let mut ys = Vec::with_capacity(q);
    for (xi, yi) in x.iter().zip(y) {
        let d = (xi - x0).abs();
        let w = if h > 0.0 {
            let u = d / h;
            if u < 1.0 { (1.0 - u * u * u).powi(3) } else { 0.0 }
        } else if d == 0.0 {
            1.0
        } else {
            0.0
        };
        if w > 0.0 {
            xs.push(if h > 0.0 { (xi - x0) / h } else { 0.0 });
            ws.push(w.sqrt());
            ys.push(yi * w.sqrt());
        }
    }
    let mut deg = degree.min(xs.len().saturating_sub(1));
    loop {
        let columns: Vec<Vec<f64>> = (0..=deg).map(|p| xs.iter().zip(&ws).map(|(u, w)| w * u.powi(p as i32)).collect()).collect();
        match linalg::lstsq(&columns, &ys) {
            // the local polynomial is centred at x0, so its value there is the constant term
            Ok(fit) => return Ok(fit.coefficients[0]),
            Err(Error::CollinearPredictors { .. } | Error::DegenerateFit(_)) if deg > 0 => deg -= 1,
            Err(e) => return Err(e),
        }
    }
}

/// `(dn - smoothed) / smoothed`.
pub fn standardized_deviation(dn: f64, smoothed_dn: f64) -> Result<f64> {
    if smoothed_dn == 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok((dn - smoothed_dn) / smoothed_dn)
}

/// One DS reading taken during a rotation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationSample {
    pub timestamp: DateTime<Utc>,
    pub uav_heading_deg: f64,
    pub ds_dn: Vec<f64>,
    pub geometry: SolarGeometry,
}

impl RotationSample {
    pub fn uav_sun_deg(&self) -> f64 {
        uav_sun_angle(self.uav_heading_deg, self.geometry.azimuth_deg)
    }
}

/// Standardized deviations of every DS band at one UAV-Sun angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationSample {
    pub uav_sun_deg: f64,
    pub altitude_deg: f64,
    pub delta: Vec<f64>,
}

/// Anything carrying the solar altitude at its acquisition time.
pub trait SolarAltitude {
    fn solar_altitude_deg(&self) -> f64;
}

impl SolarAltitude for SolarGeometry {
    fn solar_altitude_deg(&self) -> f64 {
        self.altitude_deg
    }
}

impl SolarAltitude for RotationSample {
    fn solar_altitude_deg(&self) -> f64 {
        self.geometry.altitude_deg
    }
}

impl SolarAltitude for DeviationSample {
    fn solar_altitude_deg(&self) -> f64 {
        self.altitude_deg
    }
}

impl<T: SolarAltitude> SolarAltitude for (T, SolarGeometry) {
    fn solar_altitude_deg(&self) -> f64 {
        self.1.altitude_deg
    }
}

/// Keep observations whose solar altitude is at least `min_alt_deg`.
pub fn altitude_gate<T: SolarAltitude + Clone>(observations: &[T], min_alt_deg: f64) -> Vec<T> {
    observations.iter().filter(|o| o.solar_altitude_deg() >= min_alt_deg).cloned().collect()
}

/// Drop samples taken less than `settle_s` seconds after a heading change.
pub fn exclude_settling(samples: &[RotationSample], settle_s: f64) -> Vec<RotationSample> {
    let mut last_change: Option<DateTime<Utc>> = None;
    let mut prev_heading: Option<f64> = None;
    let mut out = Vec::new();
    for s in samples {
        if let Some(h) = prev_heading {
            let diff = uav_sun_angle(s.uav_heading_deg, h);
            if diff.min(360.0 - diff) > 1.0 {
                last_change = Some(s.timestamp);
            }
        }
        prev_heading = Some(s.uav_heading_deg);
        let settled = last_change.is_none_or(|t| (s.timestamp - t).num_milliseconds() as f64 / 1000.0 >= settle_s);
        if settled {
            out.push(s.clone());
        }
    }
    out
}

/// Fitted `delta = A cos(alt) sin(uav_sun + phi0)` coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadingCorrection {
    pub wavelengths_nm: Vec<f64>,
    /// Dimensionless fraction per DS band.
    pub amplitude: Vec<f64>,
    pub initial_phase_deg: Vec<f64>,
    pub fit_residual_rms: Vec<f64>,
    pub amplitude_mean: f64,
    pub initial_phase_mean_deg: f64,
}

/// Which coefficients [`apply_heading_correction`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CorrectionMode {
    #[default]
    BandAveraged,
    PerBand,
}

impl HeadingCorrection {
    /// A correction that changes nothing.
    pub fn zero(wavelengths_nm: Vec<f64>) -> Self {
        let n = wavelengths_nm.len();
        Self {
            wavelengths_nm,
            amplitude: vec![0.0; n],
            initial_phase_deg: vec![0.0; n],
            fit_residual_rms: vec![0.0; n],
            amplitude_mean: 0.0,
            initial_phase_mean_deg: 0.0,
        }
    }

    /// Build from per-band coefficients, averaging them as the band-level summary.
    pub fn from_bands(wavelengths_nm: Vec<f64>, amplitude: Vec<f64>, initial_phase_deg: Vec<f64>, fit_residual_rms: Vec<f64>) -> Self {
        let n = amplitude.len().max(1) as f64;
        let amplitude_mean = amplitude.iter().sum::<f64>() / n;
        let initial_phase_mean_deg = initial_phase_deg.iter().sum::<f64>() / n;
        Self { wavelengths_nm, amplitude, initial_phase_deg, fit_residual_rms, amplitude_mean, initial_phase_mean_deg }
    }

    /// Predicted deviation for one band (or the band average).
    pub fn delta_hat(&self, band: Option<usize>, uav_sun_deg: f64, alt_deg: f64) -> f64 {
        let (a, phi) = match band {
            Some(b) => (self.amplitude[b], self.initial_phase_deg[b]),
            None => (self.amplitude_mean, self.initial_phase_mean_deg),
        };
        sinusoid(a, phi.to_radians(), alt_deg.to_radians().cos(), uav_sun_deg.to_radians())
    }
}

fn sinusoid(a: f64, phi_rad: f64, cos_alt: f64, gamma_rad: f64) -> f64 {
    a * cos_alt * (gamma_rad + phi_rad).sin()
}

/// 360 minus the largest circular gap between the sampled angles.
pub fn angular_coverage_deg(angles_deg: &[f64]) -> f64 {
    if angles_deg.is_empty() {
        return 0.0;
    }
    let mut a: Vec<f64> = angles_deg.iter().map(|v| v.rem_euclid(360.0)).collect();
    a.sort_by(f64::total_cmp);
    let wrap = a[0] + 360.0 - a[a.len() - 1];
    let max_gap = a.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::max);
    360.0 - max_gap
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidFit {
    pub amplitude: f64,
    pub phase_deg: f64,
    pub residual_rms: f64,
    pub iterations: usize,
}

/// Put the phase into (-90, 90] by flipping the sign of the amplitude.
fn canonicalize(a: f64, phi_deg: f64) -> (f64, f64) {
    let mut phi = phi_deg.rem_euclid(360.0);
    if phi > 180.0 {
        phi -= 360.0;
    }
    let (mut a, mut phi) = (a, phi);
    if phi > 90.0 {
        phi -= 180.0;
        a = -a;
    } else if phi <= -90.0 {
        phi += 180.0;
        a = -a;
    }
    if a == 0.0 {
        phi = 0.0;
    }
    (a, phi)
}

/// Damped Gauss-Newton fit of one band's deviations.
pub fn fit_sinusoid(uav_sun_deg: &[f64], altitude_deg: &[f64], delta: &[f64]) -> Result<SinusoidFit> {
    let n = delta.len();
    if uav_sun_deg.len() != n || altitude_deg.len() != n {
        return Err(Error::ShapeMismatch("sinusoid inputs differ in length".into()));
    }
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let gamma: Vec<f64> = uav_sun_deg.iter().map(|v| v.to_radians()).collect();
    let c: Vec<f64> = altitude_deg.iter().map(|v| v.to_radians().cos()).collect();
    let sse = |a: f64, phi: f64| -> f64 {
        (0..n).map(|i| (delta[i] - sinusoid(a, phi, c[i], gamma[i])).powi(2)).sum()
    };

    let (lo, hi) = delta.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let mean_cos = (altitude_deg.iter().sum::<f64>() / n as f64).to_radians().cos();
    let mut a = (hi - lo) / (2.0 * mean_cos.max(1e-6));
    let mut phi = 0.0f64;
    let mut current = sse(a, phi);
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let (mut j00, mut j01, mut j11, mut g0, mut g1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let s = (gamma[i] + phi).sin();
            let co = (gamma[i] + phi).cos();
            let da = c[i] * s;
            let dp = a * c[i] * co;
            let r = delta[i] - a * da;
            j00 += da * da;
            j01 += da * dp;
            j11 += dp * dp;
            g0 += da * r;
            g1 += dp * r;
        }
        let det = j00 * j11 - j01 * j01;
        let (step_a, step_p) = if det > 1e-14 * (j00 * j11).max(f64::MIN_POSITIVE) && j11 > 0.0 {
            ((j11 * g0 - j01 * g1) / det, (j00 * g1 - j01 * g0) / det)
        } else if j00 > 0.0 {
            // phase unidentifiable at A = 0: refine the amplitude only
            (g0 / j00, 0.0)
        } else {
            return Err(Error::FitDiverged("zero Jacobian".into()));
        };

        let mut lambda = 1.0;
        let (mut next_a, mut next_p, mut next) = (a + step_a, phi + step_p, sse(a + step_a, phi + step_p));
        while next > current && lambda > DAMPING_FLOOR {
            lambda *= 0.5;
            next_a = a + lambda * step_a;
            next_p = phi + lambda * step_p;
            next = sse(next_a, next_p);
        }
        let step_norm = lambda * (step_a * step_a + step_p * step_p).sqrt();
        if next > current {
            if step_norm < STEP_TOL || (current - next).abs() <= 1e-14 * current.max(f64::MIN_POSITIVE) {
                break;
            }
            return Err(Error::FitDiverged(format!("residual not decreasing at iteration {iterations}")));
        }
        a = next_a;
        phi = next_p;
        current = next;
        if step_norm < STEP_TOL {
            break;
        }
    }
    let (amplitude, phase_deg) = canonicalize(a, phi.to_degrees());
    Ok(SinusoidFit { amplitude, phase_deg, residual_rms: (current / n as f64).sqrt(), iterations })
}

/// Fit every band's deviation sinusoid.
pub fn fit_heading_correction(wavelengths_nm: &[f64], samples: &[DeviationSample]) -> Result<HeadingCorrection> {
    if samples.len() < MIN_ROTATION_SAMPLES {
        return Err(Error::TooFewPoints { needed: MIN_ROTATION_SAMPLES, got: samples.len() });
    }
    let bands = wavelengths_nm.len();
    if let Some(s) = samples.iter().find(|s| s.delta.len() != bands) {
        return Err(Error::BandMismatch(format!("sample with {} bands, expected {bands}", s.delta.len())));
    }
    let angles: Vec<f64> = samples.iter().map(|s| s.uav_sun_deg).collect();
    let covered = angular_coverage_deg(&angles);
    if covered < MIN_ANGULAR_COVERAGE_DEG {
        return Err(Error::InsufficientAngularCoverage { covered_deg: covered, required_deg: MIN_ANGULAR_COVERAGE_DEG });
    }
    let alts: Vec<f64> = samples.iter().map(|s| s.altitude_deg).collect();
    let fits: Vec<SinusoidFit> = par::map_range(bands, |b| {
        let delta: Vec<f64> = samples.iter().map(|s| s.delta[b]).collect();
        fit_sinusoid(&angles, &alts, &delta)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(HeadingCorrection::from_bands(
        wavelengths_nm.to_vec(),
        fits.iter().map(|f| f.amplitude).collect(),
        fits.iter().map(|f| f.phase_deg).collect(),
        fits.iter().map(|f| f.residual_rms).collect(),
    ))
}

/// LOESS-detrend every band of a rotation series and form the deviations.
pub fn standardized_deviations(samples: &[RotationSample], span: f64, degree: usize) -> Result<Vec<DeviationSample>> {
    deviations_against(samples, span, degree, None)
}

fn seconds_since_first(samples: &[RotationSample]) -> Vec<f64> {
    let t0 = samples.first().map(|s| s.timestamp);
    samples.iter().map(|s| t0.map_or(0.0, |t0| (s.timestamp - t0).num_milliseconds() as f64 / 1000.0)).collect()
}

fn deviations_against(samples: &[RotationSample], span: f64, degree: usize, prior: Option<&HeadingCorrection>) -> Result<Vec<DeviationSample>> {
    let first = samples.first().ok_or(Error::TooFewPoints { needed: MIN_ROTATION_SAMPLES, got: 0 })?;
    let bands = first.ds_dn.len();
    if let Some(s) = samples.iter().find(|s| s.ds_dn.len() != bands) {
        return Err(Error::BandMismatch(format!("sample with {} bands, expected {bands}", s.ds_dn.len())));
    }
    let t = seconds_since_first(samples);
    let per_band: Vec<Vec<f64>> = par::map_range(bands, |b| -> Result<Vec<f64>> {
        // remove the current sinusoid estimate before smoothing so it does not leak into the baseline
        let detrended: Vec<f64> = samples
            .iter()
            .map(|s| {
                let d = prior.map_or(0.0, |hc| hc.delta_hat(Some(b), s.uav_sun_deg(), s.geometry.altitude_deg));
                s.ds_dn[b] / (1.0 + d)
            })
            .collect();
        let smooth = loess_smooth(&t, &detrended, span, degree)?;
        samples.iter().zip(&smooth).map(|(s, m)| standardized_deviation(s.ds_dn[b], *m)).collect()
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(samples
        .iter()
        .enumerate()
        .map(|(i, s)| DeviationSample {
            uav_sun_deg: s.uav_sun_deg(),
            altitude_deg: s.geometry.altitude_deg,
            delta: per_band.iter().map(|band| band[i]).collect(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationFitOptions {
    pub span: f64,
    pub degree: usize,
    pub backfit_iterations: usize,
}

impl Default for RotationFitOptions {
    fn default() -> Self {
        Self { span: DEFAULT_LOESS_SPAN, degree: DEFAULT_LOESS_DEGREE, backfit_iterations: DEFAULT_BACKFIT_ITERATIONS }
    }
}

/// LOESS detrending followed by the sinusoid fit, alternated
/// `backfit_iterations` extra times.
pub fn fit_rotation_experiment(
    wavelengths_nm: &[f64],
    samples: &[RotationSample],
    opts: &RotationFitOptions,
) -> Result<(HeadingCorrection, Vec<DeviationSample>)> {
    let mut deviations = standardized_deviations(samples, opts.span, opts.degree)?;
    let mut hc = fit_heading_correction(wavelengths_nm, &deviations)?;
    for _ in 0..opts.backfit_iterations {
        deviations = deviations_against(samples, opts.span, opts.degree, Some(&hc))?;
        hc = fit_heading_correction(wavelengths_nm, &deviations)?;
    }
    Ok((hc, deviations))
}

/// `DN * (1 - delta_hat)` for every band.
pub fn apply_heading_correction(s: &Spectrum, hc: &HeadingCorrection, uav_sun_deg: f64, alt_deg: f64, mode: CorrectionMode) -> Result<Spectrum> {
    if mode == CorrectionMode::PerBand && hc.amplitude.len() != s.dn.len() {
        return Err(Error::BandMismatch(format!("{} fitted bands for a {}-band spectrum", hc.amplitude.len(), s.dn.len())));
    }
    let mut out = s.clone();
    for (b, v) in out.dn.iter_mut().enumerate() {
        let band = (mode == CorrectionMode::PerBand).then_some(b);
        *v -= hc.delta_hat(band, uav_sun_deg, alt_deg) * *v;
    }
    Ok(out)
}

/// Peak-to-peak relative DN swing `|A| cos(alt) * 2` from the band-averaged amplitude.
pub fn max_deviation_pct(hc: &HeadingCorrection, alt_deg: f64) -> f64 {
    hc.amplitude_mean.abs() * alt_deg.to_radians().cos() * 2.0
}
