//! Synthetic diurnal scenes with known ground truth: downwelling spectra,
//! panel observations, rotation experiments, flight strips and small
//! panel cubes.

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::preprocess::Roi;
use crate::solar::{solar_position, uav_sun_angle, RotationSample, SolarGeometry};
use crate::spectral::{default_msi_bands, match_nearest_band, reference_panels, BandDef, GeoLocation, ImageCube, PanelObservation, PanelSpec, Spectrum, WavelengthGrid};

pub const TRUTH_FORMAT_VERSION: u32 = 1;
/// Pivot wavelength of the spectral tilt terms.
const TILT_PIVOT_NM: f64 = 766.0;

// independent random streams derived from one seed
const STREAM_DS: u64 = 1;
const STREAM_MSI: u64 = 2;
const STREAM_SCENARIO: u64 = 3;
const STREAM_CUBE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CloudModel {
    Clear,
    /// `c = 1 - amplitude * logistic(3 s(t))` with `s` a sum of random-phase sinusoids.
    Fluctuating { amplitude: f64, timescale_s: f64 },
    Partial { events: Vec<Occlusion> },
}

/// One cloud passage: linear ramps into and out of a plateau of `1 - depth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub start_s: f64,
    pub duration_s: f64,
    pub depth: f64,
    pub ramp_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionFeature {
    pub center_nm: f64,
    /// Fractional depth at unit airmass.
    pub depth: f64,
    pub width_nm: f64,
    /// Relative jitter of the depth.
    pub variability: f64,
    /// Features sharing a group share one jitter process.
    #[serde(default)]
    pub group: u32,
}

/// Water-vapour (group 0) and oxygen (group 1) features near the
/// high-variance wavelengths.
pub fn default_absorption() -> Vec<AbsorptionFeature> {
    let f = |center_nm, depth, width_nm, group| AbsorptionFeature { center_nm, depth, width_nm, variability: 0.3, group };
    vec![f(718.0, 0.12, 5.0, 0), f(727.0, 0.10, 5.0, 0), f(762.0, 0.35, 4.0, 1), f(814.0, 0.15, 6.0, 0), f(898.0, 0.18, 7.0, 0), f(914.0, 0.22, 7.0, 0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadingError {
    pub amplitude: f64,
    pub phase_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub msi_sigma: f64,
    pub ds_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DsGridConfig {
    pub start_nm: f64,
    pub stop_nm: f64,
    pub step_nm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubeConfig {
    pub rows: usize,
    pub cols: usize,
    /// Emit a cube for every n-th MSI frame.
    pub every: usize,
    pub flat_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub location: GeoLocation,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub ds_interval_s: f64,
    pub msi_interval_s: f64,
    pub cloud: CloudModel,
    /// Spectral slope of cloud attenuation; 0 is gray.
    #[serde(default)]
    pub cloud_tilt: f64,
    /// Spectral slope growing with airmass.
    pub airmass_tilt: f64,
    pub absorption: Vec<AbsorptionFeature>,
    pub heading_error: HeadingError,
    /// Fixed DS heading during diurnal acquisition.
    pub ds_heading_deg: f64,
    pub noise: NoiseConfig,
    pub panels: Vec<PanelSpec>,
    pub msi_bands: Vec<BandDef>,
    pub ds_grid: DsGridConfig,
    /// Peak normalized DS DN of the clear-sky envelope.
    pub irradiance_scale: f64,
    pub gain_mean: f64,
    pub gain_spread: f64,
    pub ds_exposure_ms: f64,
    pub msi_exposure_ms: f64,
    pub ds_dark_dn: f64,
    pub msi_dark_dn: f64,
    pub msi_saturation_dn: f64,
    pub condition: String,
    pub seed: u64,
    #[serde(default)]
    pub cubes: Option<CubeConfig>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let start = "2024-05-08T01:00:00Z".parse().expect("valid literal");
        let end = "2024-05-08T07:00:00Z".parse().expect("valid literal");
        Self {
            location: GeoLocation::hangzhou(),
            start,
            end,
            ds_interval_s: 1.0,
            msi_interval_s: 30.0,
            cloud: CloudModel::Clear,
            cloud_tilt: 0.0,
            airmass_tilt: 0.02,
            absorption: default_absorption(),
            heading_error: HeadingError { amplitude: -0.057, phase_deg: -15.0 },
            ds_heading_deg: 0.0,
            noise: NoiseConfig { msi_sigma: 0.01, ds_sigma: 0.01 },
            panels: reference_panels(),
            msi_bands: default_msi_bands(),
            ds_grid: DsGridConfig { start_nm: 632.0, stop_nm: 932.0, step_nm: 6.0 },
            irradiance_scale: 12_000.0,
            gain_mean: 0.25,
            gain_spread: 0.2,
            ds_exposure_ms: 50.0,
            msi_exposure_ms: 1.0,
            ds_dark_dn: 100.0,
            msi_dark_dn: 64.0,
            msi_saturation_dn: 4095.0,
            condition: "sunny".into(),
            seed: 1,
            cubes: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ds_interval_s > 0.0 && self.msi_interval_s > 0.0) {
            return Err(Error::InvalidParameter("sampling intervals must be positive".into()));
        }
        if self.end < self.start {
            return Err(Error::InvalidParameter("end precedes start".into()));
        }
        if let Some(f) = self.absorption.iter().find(|f| !(0.0..1.0).contains(&f.depth) || f.width_nm <= 0.0) {
            return Err(Error::InvalidParameter(format!("absorption feature at {} nm: depth in [0, 1) and width > 0 required", f.center_nm)));
        }
        if self.noise.msi_sigma < 0.0 || self.noise.ds_sigma < 0.0 {
            return Err(Error::InvalidParameter("noise sigma must be >= 0".into()));
        }
        match &self.cloud {
            CloudModel::Fluctuating { amplitude, timescale_s } if !(0.0..1.0).contains(amplitude) || *timescale_s <= 0.0 => {
                return Err(Error::InvalidParameter("fluctuating cloud needs amplitude in [0, 1) and timescale > 0".into()))
            }
            CloudModel::Partial { events } if events.iter().any(|e| !(0.0..1.0).contains(&e.depth)) => {
                return Err(Error::InvalidParameter("occlusion depth must be in [0, 1)".into()))
            }
            _ => {}
        }
        if self.ds_exposure_ms <= 0.0 || self.msi_exposure_ms <= 0.0 {
            return Err(Error::ExposureInvalid(self.ds_exposure_ms.min(self.msi_exposure_ms)));
        }
        self.ds_grid()?;
        Ok(())
    }

    pub fn ds_grid(&self) -> Result<WavelengthGrid> {
        WavelengthGrid::regular(self.ds_grid.start_nm, self.ds_grid.stop_nm, self.ds_grid.step_nm)
    }
}

fn rng_for(seed: u64, index: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index));
    r.set_stream(stream);
    r
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Smooth random process in [-1, 1]: normalized sum of sinusoids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Wave {
    periods_s: Vec<f64>,
    phases: Vec<f64>,
}

impl Wave {
    fn draw(rng: &mut ChaCha8Rng, timescale_s: f64) -> Self {
        let ratios = [0.7, 1.3, 2.1, 3.4];
        Self {
            periods_s: ratios.iter().map(|r| timescale_s * r * rng.random_range(0.8..1.25)).collect(),
            phases: ratios.iter().map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
        }
    }

    fn at(&self, t_s: f64) -> f64 {
        let n = self.periods_s.len() as f64;
        self.periods_s.iter().zip(&self.phases).map(|(p, ph)| (std::f64::consts::TAU * t_s / p + ph).sin()).sum::<f64>() / n
    }
}

/// Scenario-level random draws: sensor gains and the smooth processes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDraws {
    pub gains: Vec<f64>,
    cloud: Wave,
    groups: Vec<Wave>,
}

impl ScenarioDraws {
    pub fn new(config: &ScenarioConfig) -> Self {
        let mut rng = rng_for(config.seed, 0, STREAM_SCENARIO);
        let gains = config.msi_bands.iter().map(|_| config.gain_mean * (1.0 + config.gain_spread * rng.random_range(-1.0..1.0))).collect();
        let timescale = match config.cloud {
            CloudModel::Fluctuating { timescale_s, .. } => timescale_s,
            _ => 600.0,
        };
        let cloud = Wave::draw(&mut rng, timescale);
        let n_groups = config.absorption.iter().map(|f| f.group as usize + 1).max().unwrap_or(0);
        let groups = (0..n_groups).map(|_| Wave::draw(&mut rng, 1800.0)).collect();
        Self { gains, cloud, groups }
    }
}

/// Illumination state at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlluminationState {
    pub timestamp: DateTime<Utc>,
    pub geometry: SolarGeometry,
    pub airmass: f64,
    pub cloud_factor: f64,
    pub absorption_depths: Vec<f64>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn seconds_between(a: DateTime<Utc>, b: DateTime<Utc>) -> f64 {
    (b - a).num_milliseconds() as f64 / 1000.0
}

/// Cloud transmission factor at `t`.
pub fn cloud_factor(config: &ScenarioConfig, draws: &ScenarioDraws, t: DateTime<Utc>) -> f64 {
    let ts = seconds_between(config.start, t);
    match &config.cloud {
        CloudModel::Clear => 1.0,
        CloudModel::Fluctuating { amplitude, .. } => 1.0 - amplitude * logistic(3.0 * draws.cloud.at(ts) * 2.0),
        CloudModel::Partial { events } => events.iter().fold(1.0, |c, e| {
            let into = ts - e.start_s;
            let ramp = e.ramp_s.max(1e-9);
            let w = if into < 0.0 || into > e.duration_s {
                0.0
            } else {
                (into / ramp).min((e.duration_s - into) / ramp).min(1.0)
            };
            c * (1.0 - e.depth * w)
        }),
    }
}

pub fn illumination(config: &ScenarioConfig, draws: &ScenarioDraws, t: DateTime<Utc>) -> IlluminationState {
    let geometry = solar_position(t, &config.location);
    let sin_alt = geometry.altitude_deg.to_radians().sin().max(0.05);
    let airmass = 1.0 / sin_alt;
    let ts = seconds_between(config.start, t);
    let absorption_depths = config
        .absorption
        .iter()
        .map(|f| {
            let jitter = draws.groups.get(f.group as usize).map_or(0.0, |w| w.at(ts));
            (f.depth * airmass.sqrt() * (1.0 + f.variability * jitter)).clamp(0.0, 0.95)
        })
        .collect();
    IlluminationState { timestamp: t, geometry, airmass, cloud_factor: cloud_factor(config, draws, t), absorption_depths }
}

fn envelope(nm: f64) -> f64 {
    (-((nm - 660.0) / 420.0).powi(2)).exp()
}

/// Noise-free downwelling irradiance (normalized DS DN) at one wavelength.
pub fn irradiance_at(config: &ScenarioConfig, state: &IlluminationState, nm: f64) -> f64 {
    let sin_alt = state.geometry.altitude_deg.to_radians().sin().max(0.0);
    let x = (nm - TILT_PIVOT_NM) / 100.0;
    let tilt = (config.airmass_tilt * (state.airmass - 1.0) * x + config.cloud_tilt * (1.0 - state.cloud_factor) * x).exp();
    let absorb: f64 = config
        .absorption
        .iter()
        .zip(&state.absorption_depths)
        .map(|(f, d)| 1.0 - d * (-0.5 * ((nm - f.center_nm) / f.width_nm).powi(2)).exp())
        .product();
    config.irradiance_scale * envelope(nm) * sin_alt * state.cloud_factor * tilt * absorb
}

/// Millisecond offset from the scenario start, used to derive per-sample seeds.
fn sample_index(config: &ScenarioConfig, t: DateTime<Utc>) -> u64 {
    (t - config.start).num_milliseconds().unsigned_abs()
}

fn heading_delta(config: &ScenarioConfig, geometry: &SolarGeometry, heading_deg: f64) -> f64 {
    let g = uav_sun_angle(heading_deg, geometry.azimuth_deg);
    config.heading_error.amplitude * geometry.altitude_deg.to_radians().cos() * (g + config.heading_error.phase_deg).to_radians().sin()
}

/// Normalized DS spectrum at `t` seen at `heading_deg`, with noise.
fn ds_spectrum(config: &ScenarioConfig, grid: &WavelengthGrid, state: &IlluminationState, heading_deg: f64, rng: &mut ChaCha8Rng) -> Result<Spectrum> {
    let delta = heading_delta(config, &state.geometry, heading_deg);
    let dn = grid
        .centers()
        .iter()
        .map(|nm| irradiance_at(config, state, *nm) * (1.0 + delta) * (1.0 + config.noise.ds_sigma * gauss(rng)))
        .collect();
    Spectrum::new(grid.clone(), dn, state.timestamp, crate::preprocess::DS_STANDARD_EXPOSURE_MS)
}

/// One downwelling spectrum at `t` and its illumination record.
pub fn simulate_solar_spectrum(config: &ScenarioConfig, t: DateTime<Utc>) -> Result<(Spectrum, IlluminationState)> {
    let draws = ScenarioDraws::new(config);
    let grid = config.ds_grid()?;
    let state = illumination(config, &draws, t);
    let mut rng = rng_for(config.seed, sample_index(config, t), STREAM_DS);
    Ok((ds_spectrum(config, &grid, &state, config.ds_heading_deg, &mut rng)?, state))
}

/// Irradiance sampled for each MSI band at its nearest DS-grid wavelength.
fn msi_irradiance(config: &ScenarioConfig, grid: &WavelengthGrid, state: &IlluminationState) -> Vec<f64> {
    config
        .msi_bands
        .iter()
        .map(|b| irradiance_at(config, state, grid.centers()[match_nearest_band(b.center_nm, grid).index]))
        .collect()
}

/// Panel observations of one MSI frame at `t`, with the DS spectrum taken at the same instant.
pub fn simulate_panel_observations(config: &ScenarioConfig, t: DateTime<Utc>) -> Result<(Vec<PanelObservation>, Spectrum)> {
    let draws = ScenarioDraws::new(config);
    let grid = config.ds_grid()?;
    panel_frame(config, &draws, &grid, t)
}

fn panel_frame(config: &ScenarioConfig, draws: &ScenarioDraws, grid: &WavelengthGrid, t: DateTime<Utc>) -> Result<(Vec<PanelObservation>, Spectrum)> {
    let state = illumination(config, draws, t);
    let index = sample_index(config, t);
    let mut ds_rng = rng_for(config.seed, index, STREAM_DS);
    let spectrum = ds_spectrum(config, grid, &state, config.ds_heading_deg, &mut ds_rng)?;
    let irr = msi_irradiance(config, grid, &state);
    let mut rng = rng_for(config.seed, index, STREAM_MSI);
    let obs = config
        .panels
        .iter()
        .map(|p| {
            let truth: Vec<f64> = config.msi_bands.iter().map(|b| p.reflectance_at(b.center_nm)).collect();
            let dn = truth
                .iter()
                .zip(&irr)
                .zip(&draws.gains)
                .map(|((r, e), g)| g * e * r * (1.0 + config.noise.msi_sigma * gauss(&mut rng)))
                .collect();
            PanelObservation::new(p.panel_id.clone(), t, dn, truth, config.condition.clone())
        })
        .collect::<Result<_>>()?;
    Ok((obs, spectrum))
}

/// Timestamps from `start` to `end` inclusive at `interval_s`.
pub fn sample_times(start: DateTime<Utc>, end: DateTime<Utc>, interval_s: f64) -> Vec<DateTime<Utc>> {
    let step = (interval_s * 1000.0).round() as i64;
    let span = (end - start).num_milliseconds();
    if step <= 0 || span < 0 {
        return Vec::new();
    }
    (0..=span / step).map(|k| start + Duration::milliseconds(k * step)).collect()
}

/// Truth recorded at every MSI frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub timestamp: DateTime<Utc>,
    pub altitude_deg: f64,
    pub azimuth_deg: f64,
    pub cloud_factor: f64,
    pub heading_delta: f64,
    pub absorption_depths: Vec<f64>,
    /// Noise-free irradiance on the DS grid.
    pub irradiance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub format_version: u32,
    pub seed: u64,
    pub gains: Vec<f64>,
    pub heading_error: HeadingError,
    pub panels: Vec<PanelSpec>,
    pub msi_bands: Vec<BandDef>,
    pub ds_wavelengths_nm: Vec<f64>,
    pub records: Vec<TruthRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiurnalDataset {
    /// Normalized DS spectra at the DS interval.
    pub spectra: Vec<Spectrum>,
    /// Normalized panel DN at the MSI interval, all panels per frame.
    pub observations: Vec<PanelObservation>,
    pub truth: SyntheticTruth,
}

/// Full day: DS at its interval, panel frames at the MSI interval.
pub fn simulate_diurnal_dataset(config: &ScenarioConfig) -> Result<DiurnalDataset> {
    config.validate()?;
    let draws = ScenarioDraws::new(config);
    let grid = config.ds_grid()?;
    let ds_times = sample_times(config.start, config.end, config.ds_interval_s);
    let msi_times = sample_times(config.start, config.end, config.msi_interval_s);

    let spectra: Vec<Spectrum> = par::map_slice(&ds_times, |t| {
        let state = illumination(config, &draws, *t);
        let mut rng = rng_for(config.seed, sample_index(config, *t), STREAM_DS);
        ds_spectrum(config, &grid, &state, config.ds_heading_deg, &mut rng)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let frames: Vec<(Vec<PanelObservation>, TruthRecord)> = par::map_slice(&msi_times, |t| -> Result<_> {
        let (obs, _) = panel_frame(config, &draws, &grid, *t)?;
        let state = illumination(config, &draws, *t);
        let record = TruthRecord {
            timestamp: *t,
            altitude_deg: state.geometry.altitude_deg,
            azimuth_deg: state.geometry.azimuth_deg,
            cloud_factor: state.cloud_factor,
            heading_delta: heading_delta(config, &state.geometry, config.ds_heading_deg),
            irradiance: grid.centers().iter().map(|nm| irradiance_at(config, &state, *nm)).collect(),
            absorption_depths: state.absorption_depths,
        };
        Ok((obs, record))
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut observations = Vec::with_capacity(frames.len() * config.panels.len());
    let mut records = Vec::with_capacity(frames.len());
    for (o, r) in frames {
        observations.extend(o);
        records.push(r);
    }
    Ok(DiurnalDataset {
        spectra,
        observations,
        truth: SyntheticTruth {
            format_version: TRUTH_FORMAT_VERSION,
            seed: config.seed,
            gains: draws.gains,
            heading_error: config.heading_error,
            panels: config.panels.clone(),
            msi_bands: config.msi_bands.clone(),
            ds_wavelengths_nm: grid.centers().to_vec(),
            records,
        },
    })
}

/// DS readings while the UAV dwells `dwell_s` at each heading in turn.
pub fn simulate_rotation_experiment(config: &ScenarioConfig, start: DateTime<Utc>, headings_deg: &[f64], dwell_s: f64) -> Result<Vec<RotationSample>> {
    if headings_deg.is_empty() {
        return Err(Error::InvalidParameter("no headings".into()));
    }
    let per = ((dwell_s / config.ds_interval_s).round() as usize).max(1);
    let schedule: Vec<(DateTime<Utc>, f64)> = headings_deg
        .iter()
        .enumerate()
        .flat_map(|(k, h)| {
            (0..per).map(move |s| {
                let ms = (((k * per + s) as f64) * config.ds_interval_s * 1000.0).round() as i64;
                (start + Duration::milliseconds(ms), h.rem_euclid(360.0))
            })
        })
        .collect();
    rotation_samples(config, &schedule)
}

/// DS readings during a continuous turn at `rate_deg_s` for `cycles` full turns.
pub fn simulate_continuous_rotation(config: &ScenarioConfig, start: DateTime<Utc>, rate_deg_s: f64, cycles: f64) -> Result<Vec<RotationSample>> {
    if rate_deg_s == 0.0 || cycles <= 0.0 {
        return Err(Error::InvalidParameter("rotation needs a non-zero rate and positive cycles".into()));
    }
    let duration = 360.0 * cycles / rate_deg_s.abs();
    let n = (duration / config.ds_interval_s).round() as usize;
    let schedule: Vec<(DateTime<Utc>, f64)> = (0..n)
        .map(|k| {
            let ts = k as f64 * config.ds_interval_s;
            (start + Duration::milliseconds((ts * 1000.0).round() as i64), (rate_deg_s * ts).rem_euclid(360.0))
        })
        .collect();
    rotation_samples(config, &schedule)
}

fn rotation_samples(config: &ScenarioConfig, schedule: &[(DateTime<Utc>, f64)]) -> Result<Vec<RotationSample>> {
    let draws = ScenarioDraws::new(config);
    let grid = config.ds_grid()?;
    par::map_slice(schedule, |(t, h)| {
        let state = illumination(config, &draws, *t);
        let mut rng = rng_for(config.seed, sample_index(config, *t), STREAM_DS);
        let s = ds_spectrum(config, &grid, &state, *h, &mut rng)?;
        Ok(RotationSample { timestamp: *t, uav_heading_deg: *h, ds_dn: s.dn, geometry: state.geometry })
    })
    .into_iter()
    .collect()
}

/// A flight over a homogeneous target, plus panel frames for the empirical line.
#[derive(Debug, Clone, PartialEq)]
pub struct StripDataset {
    /// Mean DN of the target at each strip position, with the DS spectrum at that instant.
    pub positions: Vec<(PanelObservation, Spectrum)>,
    /// Panel frames imaged around the flight.
    pub references: Vec<PanelObservation>,
    pub target: PanelSpec,
}

/// `n_positions` target views every `interval_s` from `start`, plus panel
/// frames every `config.msi_interval_s` over `reference_span_s` either side.
pub fn simulate_strip(
    config: &ScenarioConfig,
    target: &PanelSpec,
    start: DateTime<Utc>,
    n_positions: usize,
    interval_s: f64,
    reference_span_s: f64,
) -> Result<StripDataset> {
    config.validate()?;
    let draws = ScenarioDraws::new(config);
    let grid = config.ds_grid()?;
    let flight_end = start + Duration::milliseconds(((n_positions.max(1) - 1) as f64 * interval_s * 1000.0).round() as i64);
    let span = Duration::milliseconds((reference_span_s * 1000.0).round() as i64);
    let mut ref_times = sample_times(start - span, start, config.msi_interval_s);
    ref_times.extend(sample_times(flight_end, flight_end + span, config.msi_interval_s).into_iter().skip(1));
    ref_times.retain(|t| *t != start);
    let references: Vec<PanelObservation> = par::map_slice(&ref_times, |t| panel_frame(config, &draws, &grid, *t).map(|(o, _)| o))
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let truth: Vec<f64> = config.msi_bands.iter().map(|b| target.reflectance_at(b.center_nm)).collect();
    let positions = par::map_range(n_positions, |k| -> Result<(PanelObservation, Spectrum)> {
        let t = start + Duration::milliseconds((k as f64 * interval_s * 1000.0).round() as i64);
        let state = illumination(config, &draws, t);
        let index = sample_index(config, t);
        let mut ds_rng = rng_for(config.seed, index, STREAM_DS);
        let spectrum = ds_spectrum(config, &grid, &state, config.ds_heading_deg, &mut ds_rng)?;
        let irr = msi_irradiance(config, &grid, &state);
        let mut rng = rng_for(config.seed, index, STREAM_MSI);
        let dn = truth
            .iter()
            .zip(&irr)
            .zip(&draws.gains)
            .map(|((r, e), g)| g * e * r * (1.0 + config.noise.msi_sigma * gauss(&mut rng)))
            .collect();
        Ok((PanelObservation::new(target.panel_id.clone(), t, dn, truth.clone(), config.condition.clone())?, spectrum))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(StripDataset { positions, references, target: target.clone() })
}

/// Where each panel sits in a simulated cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelLayout {
    pub panel_id: String,
    pub roi: Roi,
    /// Columns (relative to the ROI) covered by a shadow stripe.
    pub shadow_cols: (usize, usize),
}

/// Five panels in a row across the middle of the frame, each with a shadow stripe.
pub fn panel_layout(config: &ScenarioConfig, rows: usize, cols: usize) -> Result<Vec<PanelLayout>> {
    let n = config.panels.len();
    let size = 20;
    let pitch = size + 4;
    if rows < size + 4 || cols < n * pitch + 4 {
        return Err(Error::RoiTooSmall(format!("{rows}x{cols} frame for {n} panels")));
    }
    let row0 = (rows - size) / 2;
    Ok(config
        .panels
        .iter()
        .enumerate()
        .map(|(i, p)| PanelLayout {
            panel_id: p.panel_id.clone(),
            roi: Roi { row0, col0: 4 + i * pitch, rows: size, cols: size },
            shadow_cols: (9, 12),
        })
        .collect())
}

fn vignette(r: usize, c: usize, rows: usize, cols: usize) -> f64 {
    let dy = r as f64 - (rows - 1) as f64 / 2.0;
    let dx = c as f64 - (cols - 1) as f64 / 2.0;
    let focal = 1.5 * rows.max(cols) as f64;
    ((dx * dx + dy * dy).sqrt() / focal).atan().cos().powi(4)
}

const BACKGROUND_REFLECTANCE: f64 = 0.1;
const SHADOW_FACTOR: f64 = 0.6;

/// Raw MSI frame at `t` (dark and vignetting included) with the panel layout.
pub fn simulate_panel_cube(config: &ScenarioConfig, t: DateTime<Utc>, rows: usize, cols: usize) -> Result<(ImageCube, Vec<PanelLayout>)> {
    let layout = panel_layout(config, rows, cols)?;
    let draws = ScenarioDraws::new(config);
    let grid = config.ds_grid()?;
    let state = illumination(config, &draws, t);
    let irr = msi_irradiance(config, &grid, &state);
    let mut rng = rng_for(config.seed, sample_index(config, t), STREAM_CUBE);
    let mut data = Vec::with_capacity(config.msi_bands.len() * rows * cols);
    for (b, band) in config.msi_bands.iter().enumerate() {
        for r in 0..rows {
            for c in 0..cols {
                let mut refl = BACKGROUND_REFLECTANCE;
                for (l, p) in layout.iter().zip(&config.panels) {
                    let roi = &l.roi;
                    if (roi.row0..roi.row0 + roi.rows).contains(&r) && (roi.col0..roi.col0 + roi.cols).contains(&c) {
                        refl = p.reflectance_at(band.center_nm);
                        let rc = c - roi.col0;
                        if (l.shadow_cols.0..l.shadow_cols.1).contains(&rc) {
                            refl *= SHADOW_FACTOR;
                        }
                    }
                }
                let signal = draws.gains[b] * irr[b] * refl * vignette(r, c, rows, cols) * (1.0 + config.noise.msi_sigma * gauss(&mut rng));
                let raw = (signal * config.msi_exposure_ms + config.msi_dark_dn).min(config.msi_saturation_dn);
                data.push(raw);
            }
        }
    }
    let cube = ImageCube::new(config.msi_bands.clone(), rows, cols, data, t, config.msi_exposure_ms, config.msi_saturation_dn)?;
    Ok((cube, layout))
}

/// Raw frames of a uniform target filling the view, for building the flat field.
pub fn simulate_flat_frames(config: &ScenarioConfig, t: DateTime<Utc>, rows: usize, cols: usize, count: usize) -> Result<Vec<ImageCube>> {
    let draws = ScenarioDraws::new(config);
    let grid = config.ds_grid()?;
    let state = illumination(config, &draws, t);
    let irr = msi_irradiance(config, &grid, &state);
    let panel = config.panels.iter().max_by(|a, b| a.reflectance_at(750.0).total_cmp(&b.reflectance_at(750.0)));
    let panel = panel.ok_or_else(|| Error::InvalidParameter("no panels".into()))?;
    (0..count)
        .map(|k| {
            let mut rng = rng_for(config.seed, sample_index(config, t) + k as u64, STREAM_CUBE);
            let mut data = Vec::with_capacity(config.msi_bands.len() * rows * cols);
            for (b, band) in config.msi_bands.iter().enumerate() {
                let level = draws.gains[b] * irr[b] * panel.reflectance_at(band.center_nm) * 0.5;
                for r in 0..rows {
                    for c in 0..cols {
                        let noise = 1.0 + config.noise.msi_sigma * 0.1 * gauss(&mut rng);
                        data.push((level * vignette(r, c, rows, cols) * noise * config.msi_exposure_ms + config.msi_dark_dn).min(config.msi_saturation_dn));
                    }
                }
            }
            ImageCube::new(config.msi_bands.clone(), rows, cols, data, t, config.msi_exposure_ms, config.msi_saturation_dn)
        })
        .collect()
}

/// Raw DS reading corresponding to a normalized spectrum.
pub fn to_raw_spectrum(s: &Spectrum, exposure_ms: f64, dark_dn: f64) -> Result<Spectrum> {
    let scale = exposure_ms / crate::preprocess::DS_STANDARD_EXPOSURE_MS;
    Spectrum::new(s.grid.clone(), s.dn.iter().map(|v| v * scale + dark_dn).collect(), s.timestamp, exposure_ms)
}

/// Largest relative increase of `values` within any window of `window` samples.
pub fn max_relative_increase(values: &[f64], window: usize) -> f64 {
    let mut best = 0.0f64;
    for i in 0..values.len() {
        for j in i + 1..values.len().min(i + window + 1) {
            if values[i] > 0.0 {
                best = best.max(values[j] / values[i] - 1.0);
            }
        }
    }
    best
}
