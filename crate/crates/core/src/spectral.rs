//! Shared domain types: wavelength grids, spectra, image cubes, panels and
//! the nearest-band pairing between the imager and the spectrometer.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default DS working range in nm.
///
/// The upper bound sits past 900 nm so that a 30 nm window centred on the
/// 915 nm candidate band still holds spectrometer samples.
pub const DEFAULT_DS_RANGE_NM: (f64, f64) = (632.0, 935.0);

/// Ordered band-centre wavelengths of a spectral sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WavelengthGrid {
    centers: Vec<f64>,
    spacing_hint: f64,
}

impl WavelengthGrid {
    pub fn new(centers: Vec<f64>, spacing_hint: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::InvalidGrid("grid is empty".into()));
        }
        if let Some(bad) = centers.iter().find(|c| !c.is_finite() || **c <= 0.0) {
            return Err(Error::InvalidGrid(format!("center {bad} is not a positive finite wavelength")));
        }
        if centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("centers are not strictly increasing".into()));
        }
        Ok(Self { centers, spacing_hint })
    }

    /// Regular grid `start, start + step, ...` up to and including `stop`.
    pub fn regular(start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(stop >= start) {
            return Err(Error::InvalidGrid(format!("bad regular grid {start}..{stop} step {step}")));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        let centers = (0..n).map(|i| start + step * i as f64).collect();
        Self::new(centers, step)
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn spacing_hint(&self) -> f64 {
        self.spacing_hint
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Width of the cell owned by each sample: half-way to each neighbour,
    /// mirrored at the ends. A single-sample grid uses `spacing_hint`.
    pub fn cell_bounds(&self) -> Vec<(f64, f64)> {
        let c = &self.centers;
        let n = c.len();
        if n == 1 {
            let h = self.spacing_hint.max(0.0) / 2.0;
            return vec![(c[0] - h, c[0] + h)];
        }
        (0..n)
            .map(|i| {
                let lo = if i == 0 { c[0] - (c[1] - c[0]) / 2.0 } else { (c[i - 1] + c[i]) / 2.0 };
                let hi = if i == n - 1 { c[n - 1] + (c[n - 1] - c[n - 2]) / 2.0 } else { (c[i] + c[i + 1]) / 2.0 };
                (lo, hi)
            })
            .collect()
    }
}

/// Result of pairing one band centre with its closest grid sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandMatch {
    pub index: usize,
    pub distance_nm: f64,
}

/// Index of the grid band whose centre is closest to `center_nm`.
/// Ties go to the lower wavelength.
pub fn match_nearest_band(center_nm: f64, grid: &WavelengthGrid) -> BandMatch {
    let c = grid.centers();
    // first index with c[i] >= center
    let upper = c.partition_point(|&x| x < center_nm);
    let candidates = [upper.checked_sub(1), (upper < c.len()).then_some(upper)];
    let mut best = BandMatch { index: 0, distance_nm: f64::INFINITY };
    for i in candidates.into_iter().flatten() {
        let d = (c[i] - center_nm).abs();
        if d < best.distance_nm {
            best = BandMatch { index: i, distance_nm: d };
        }
    }
    best
}

/// One downwelling-spectrometer reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub grid: WavelengthGrid,
    pub dn: Vec<f64>,
    pub timestamp: DateTime<Utc>,
    pub exposure_ms: f64,
    /// Number of bands whose DN went negative during correction.
    #[serde(default)]
    pub negative_dn: usize,
}

impl Spectrum {
    pub fn new(grid: WavelengthGrid, dn: Vec<f64>, timestamp: DateTime<Utc>, exposure_ms: f64) -> Result<Self> {
        if dn.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!("{} DN values for {} grid bands", dn.len(), grid.len())));
        }
        if !(exposure_ms > 0.0) {
            return Err(Error::ExposureInvalid(exposure_ms));
        }
        Ok(Self { grid, dn, timestamp, exposure_ms, negative_dn: 0 })
    }

    /// Restrict the spectrum to bands with `lo_nm <= center <= hi_nm`.
    pub fn trim_to_valid_range(&self, lo_nm: f64, hi_nm: f64) -> Result<Spectrum> {
        if !(lo_nm < hi_nm) {
            return Err(Error::InvalidParameter(format!("trim range [{lo_nm}, {hi_nm}] is empty")));
        }
        let keep: Vec<usize> = self
            .grid
            .centers()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c >= lo_nm && c <= hi_nm)
            .map(|(i, _)| i)
            .collect();
        if keep.is_empty() {
            return Err(Error::EmptyRange { lo_nm, hi_nm });
        }
        let centers = keep.iter().map(|&i| self.grid.centers()[i]).collect();
        let dn: Vec<f64> = keep.iter().map(|&i| self.dn[i]).collect();
        Ok(Spectrum {
            grid: WavelengthGrid::new(centers, self.grid.spacing_hint())?,
            negative_dn: dn.iter().filter(|v| **v < 0.0).count(),
            dn,
            timestamp: self.timestamp,
            exposure_ms: self.exposure_ms,
        })
    }
}

/// Centre and full width at half maximum of one imager band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandDef {
    pub center_nm: f64,
    pub fwhm_nm: f64,
}

/// 25-band snapshot imager layout over 600-875 nm used as the default.
pub fn default_msi_bands() -> Vec<BandDef> {
    const CENTERS: [f64; 25] = [
        603.0, 611.0, 620.0, 632.0, 641.0, 649.0, 657.0, 666.0, 675.0, 679.0, 693.0, 707.0, 718.0,
        732.0, 745.0, 758.0, 771.0, 784.0, 796.0, 808.0, 827.0, 838.0, 849.0, 859.0, 868.0,
    ];
    CENTERS
        .iter()
        .enumerate()
        .map(|(i, &c)| BandDef { center_nm: c, fwhm_nm: 10.0 + 5.0 * i as f64 / 24.0 })
        .collect()
}

/// One multispectral frame, band-sequential `data[band][row][col]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCube {
    pub bands: Vec<BandDef>,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub timestamp: DateTime<Utc>,
    pub exposure_ms: f64,
    pub saturation_dn: f64,
    #[serde(default)]
    pub negative_dn: usize,
}

impl ImageCube {
    pub fn new(
        bands: Vec<BandDef>,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        timestamp: DateTime<Utc>,
        exposure_ms: f64,
        saturation_dn: f64,
    ) -> Result<Self> {
        if data.len() != bands.len() * rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} bands x {rows} x {cols}",
                data.len(),
                bands.len()
            )));
        }
        if !(exposure_ms > 0.0) {
            return Err(Error::ExposureInvalid(exposure_ms));
        }
        if !(saturation_dn > 0.0) {
            return Err(Error::InvalidParameter(format!("saturation_dn must be > 0, got {saturation_dn}")));
        }
        Ok(Self { bands, rows, cols, data, timestamp, exposure_ms, saturation_dn, negative_dn: 0 })
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn plane_len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn plane(&self, band: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[band * n..(band + 1) * n]
    }

    pub fn plane_mut(&mut self, band: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[band * n..(band + 1) * n]
    }

    pub fn get(&self, band: usize, row: usize, col: usize) -> f64 {
        self.data[(band * self.rows + row) * self.cols + col]
    }

    pub fn same_geometry(&self, other: &ImageCube) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.bands.len() == other.bands.len()
    }
}

/// Ground-truth reflectance of a reference panel (fractions, not percent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub panel_id: String,
    pub wavelengths_nm: Vec<f64>,
    pub reflectance: Vec<f64>,
}

impl PanelSpec {
    pub fn new(panel_id: impl Into<String>, wavelengths_nm: Vec<f64>, reflectance: Vec<f64>) -> Result<Self> {
        if wavelengths_nm.is_empty() || wavelengths_nm.len() != reflectance.len() {
            return Err(Error::ShapeMismatch("panel wavelength and reflectance lengths differ".into()));
        }
        if wavelengths_nm.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid("panel wavelengths are not strictly increasing".into()));
        }
        if let Some(r) = reflectance.iter().find(|r| !(0.0..=1.2).contains(*r)) {
            return Err(Error::InvalidParameter(format!("panel reflectance {r} outside [0, 1.2]")));
        }
        Ok(Self { panel_id: panel_id.into(), wavelengths_nm, reflectance })
    }

    /// Spectrally flat panel.
    pub fn flat(panel_id: impl Into<String>, reflectance: f64) -> Result<Self> {
        Self::new(panel_id, vec![350.0, 2500.0], vec![reflectance, reflectance])
    }

    /// Linear interpolation, clamped to the end values outside the grid.
    pub fn reflectance_at(&self, nm: f64) -> f64 {
        let w = &self.wavelengths_nm;
        let r = &self.reflectance;
        if nm <= w[0] {
            return r[0];
        }
        if nm >= w[w.len() - 1] {
            return r[r.len() - 1];
        }
        let i = w.partition_point(|&x| x <= nm);
        let t = (nm - w[i - 1]) / (w[i] - w[i - 1]);
        r[i - 1] + t * (r[i] - r[i - 1])
    }
}

/// The five reference panels with their measured 600-900 nm means.
pub fn reference_panels() -> Vec<PanelSpec> {
    [("RP1", 0.084), ("RP2", 0.170), ("RP3", 0.316), ("RP4", 0.513), ("RP5", 0.730)]
        .iter()
        .map(|(id, r)| PanelSpec::flat(*id, *r).expect("static panel table"))
        .collect()
}

/// Per-panel, per-band mean normalized DN paired with its truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelObservation {
    pub panel_id: String,
    pub timestamp: DateTime<Utc>,
    pub mean_dn: Vec<f64>,
    pub truth_reflectance: Vec<f64>,
    /// Free-form weather tag ("sunny", "cloudy", ...).
    #[serde(default)]
    pub condition: String,
}

impl PanelObservation {
    pub fn new(
        panel_id: impl Into<String>,
        timestamp: DateTime<Utc>,
        mean_dn: Vec<f64>,
        truth_reflectance: Vec<f64>,
        condition: impl Into<String>,
    ) -> Result<Self> {
        if mean_dn.len() != truth_reflectance.len() {
            return Err(Error::ShapeMismatch("mean DN and truth lengths differ".into()));
        }
        Ok(Self {
            panel_id: panel_id.into(),
            timestamp,
            mean_dn,
            truth_reflectance,
            condition: condition.into(),
        })
    }
}

/// Site location; `utc_offset_hours` only matters for local-time input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoLocation {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    #[serde(default)]
    pub utc_offset_hours: f64,
}

impl GeoLocation {
    pub fn new(latitude_deg: f64, longitude_deg: f64, utc_offset_hours: f64) -> Result<Self> {
        if !(latitude_deg.abs() <= 90.0) || !(longitude_deg.abs() <= 180.0) {
            return Err(Error::InvalidParameter(format!(
                "location ({latitude_deg}, {longitude_deg}) out of range"
            )));
        }
        Ok(Self { latitude_deg, longitude_deg, utc_offset_hours })
    }

    /// Experimental site at Zhejiang University, Hangzhou.
    pub fn hangzhou() -> Self {
        Self {
            latitude_deg: 30.0 + 17.0 / 60.0 + 51.0 / 3600.0,
            longitude_deg: 120.0 + 5.0 / 60.0 + 24.52 / 3600.0,
            utc_offset_hours: 8.0,
        }
    }
}

/// Converts a fraction to percent at an IO boundary.
pub fn to_percent(fraction: f64) -> f64 {
    fraction * 100.0
}
