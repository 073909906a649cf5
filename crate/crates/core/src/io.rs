//! On-disk formats: band-sequential cubes behind a JSON header, CSV series
//! for spectra, observations, rotations and reflectance, panel spec CSV,
//! and versioned JSON for models and heading corrections.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{Prediction, ReflectanceModel, TrainingSet};
use crate::preprocess::{Roi, VignetteField};
use crate::solar::{CorrectionMode, HeadingCorrection, RotationSample};
use crate::spectral::{BandDef, ImageCube, PanelObservation, PanelSpec, Spectrum, WavelengthGrid};

pub const FORMAT_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CUBE_DTYPE: &str = "float32";
pub const CUBE_LAYOUT: &str = "band-sequential";
pub const CUBE_BYTE_ORDER: &str = "little-endian";

/// A value rounded to 9 significant digits, printed in its shortest exact form.
pub fn fmt_value(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

pub fn fmt_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| Error::Parse(format!("timestamp `{s}`: {e}")))
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse(format!("{what}: `{s}` is not a number")))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

// ---- cubes ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeHeader {
    pub format_version: u32,
    pub rows: usize,
    pub cols: usize,
    pub bands: Vec<BandDef>,
    pub exposure_ms: f64,
    pub timestamp: DateTime<Utc>,
    pub saturation_dn: f64,
    #[serde(default)]
    pub negative_dn: usize,
    pub dtype: String,
    pub layout: String,
    pub byte_order: String,
    /// Payload file name, relative to the header.
    pub payload: String,
}

fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

pub fn encode_cube(cube: &ImageCube, payload: &str) -> (CubeHeader, Vec<u8>) {
    let header = CubeHeader {
        format_version: FORMAT_VERSION,
        rows: cube.rows,
        cols: cube.cols,
        bands: cube.bands.clone(),
        exposure_ms: cube.exposure_ms,
        timestamp: cube.timestamp,
        saturation_dn: cube.saturation_dn,
        negative_dn: cube.negative_dn,
        dtype: CUBE_DTYPE.into(),
        layout: CUBE_LAYOUT.into(),
        byte_order: CUBE_BYTE_ORDER.into(),
        payload: payload.into(),
    };
    let bytes = cube.data.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    (header, bytes)
}

pub fn decode_cube(header: &CubeHeader, bytes: &[u8]) -> Result<ImageCube> {
    if header.format_version != FORMAT_VERSION {
        return Err(Error::FormatVersionMismatch { expected: FORMAT_VERSION, found: header.format_version });
    }
    if (header.dtype.as_str(), header.layout.as_str(), header.byte_order.as_str()) != (CUBE_DTYPE, CUBE_LAYOUT, CUBE_BYTE_ORDER) {
        return Err(Error::Parse(format!(
            "unsupported cube encoding {}/{}/{}; only {CUBE_DTYPE}/{CUBE_LAYOUT}/{CUBE_BYTE_ORDER}",
            header.dtype, header.layout, header.byte_order
        )));
    }
    let expected = header.rows * header.cols * header.bands.len() * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadLengthMismatch { expected, found: bytes.len() });
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let mut cube = ImageCube::new(header.bands.clone(), header.rows, header.cols, data, header.timestamp, header.exposure_ms, header.saturation_dn)?;
    cube.negative_dn = header.negative_dn;
    Ok(cube)
}

/// Header at `header_path`, payload beside it with a `.bin` extension.
pub fn save_cube(cube: &ImageCube, header_path: &Path) -> Result<()> {
    let payload = payload_path(header_path);
    let name = payload.file_name().and_then(|n| n.to_str()).ok_or_else(|| Error::Io(format!("bad cube path {}", header_path.display())))?;
    let (header, bytes) = encode_cube(cube, name);
    write_text(header_path, &to_json(&header)?)?;
    fs::write(&payload, bytes).map_err(|e| io_err(&payload, e))
}

pub fn load_cube(header_path: &Path) -> Result<ImageCube> {
    let header: CubeHeader = serde_json::from_str(&read_text(header_path)?)?;
    let payload = header_path.parent().unwrap_or(Path::new(".")).join(&header.payload);
    let bytes = fs::read(&payload).map_err(|e| io_err(&payload, e))?;
    decode_cube(&header, &bytes)
}

/// A vignetting gain field stored as a cube of gains.
pub fn save_vignette(field: &VignetteField, header_path: &Path) -> Result<()> {
    let cube = ImageCube::new(field.bands.clone(), field.rows, field.cols, field.gain.clone(), DateTime::<Utc>::UNIX_EPOCH, 1.0, f64::MAX)?;
    save_cube(&cube, header_path)
}

pub fn load_vignette(header_path: &Path) -> Result<VignetteField> {
    let cube = load_cube(header_path)?;
    Ok(VignetteField { bands: cube.bands, rows: cube.rows, cols: cube.cols, gain: cube.data })
}

// ---- CSV series ----

fn column_name(prefix: &str, nm: f64) -> String {
    format!("{prefix}{nm}")
}

/// Splits a header into the expected leading columns and `<prefix><nm>` columns.
fn parse_header(header: &csv::StringRecord, lead: &[&str], prefixes: &[&str]) -> Result<Vec<Vec<f64>>> {
    for (i, name) in lead.iter().enumerate() {
        match header.get(i) {
            Some(h) if h == *name => {}
            Some(h) => return Err(Error::UnknownColumn(format!("{h} (expected {name})"))),
            None => return Err(Error::Parse(format!("missing column {name}"))),
        }
    }
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); prefixes.len()];
    let mut current = 0;
    for h in header.iter().skip(lead.len()) {
        let (k, nm) = prefixes
            .iter()
            .enumerate()
            .skip(current)
            .find_map(|(k, p)| h.strip_prefix(p).and_then(|s| s.parse::<f64>().ok()).map(|nm| (k, nm)))
            .ok_or_else(|| Error::UnknownColumn(h.to_string()))?;
        current = k;
        out[k].push(nm);
    }
    Ok(out)
}

fn check_monotonic(times: &[DateTime<Utc>]) -> Result<()> {
    match times.windows(2).position(|w| w[1] < w[0]) {
        Some(i) => Err(Error::NonMonotonicTimestamps(i + 2)),
        None => Ok(()),
    }
}

fn grid_from_header(centers: Vec<f64>) -> Result<WavelengthGrid> {
    let hint = if centers.len() > 1 { centers[1] - centers[0] } else { 0.0 };
    WavelengthGrid::new(centers, hint)
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes())
}

/// `timestamp,exposure_ms,wl_<nm>...`; every spectrum must share one grid.
pub fn write_spectra(spectra: &[Spectrum]) -> Result<String> {
    let grid = spectra.first().map(|s| s.grid.clone()).ok_or(Error::TooFewValues { needed: 1, got: 0 })?;
    let mut w = writer();
    let mut head = vec!["timestamp".to_string(), "exposure_ms".to_string()];
    head.extend(grid.centers().iter().map(|c| column_name("wl_", *c)));
    w.write_record(&head).map_err(csv_err)?;
    for s in spectra {
        if s.grid.centers() != grid.centers() {
            return Err(Error::BandMismatch(format!("spectrum at {} has a different grid", fmt_timestamp(s.timestamp))));
        }
        let mut rec = vec![fmt_timestamp(s.timestamp), fmt_value(s.exposure_ms)];
        rec.extend(s.dn.iter().map(|v| fmt_value(*v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_spectra(text: &str) -> Result<Vec<Spectrum>> {
    let mut r = reader(text);
    let cols = parse_header(r.headers().map_err(csv_err)?, &["timestamp", "exposure_ms"], &["wl_"])?;
    let grid = grid_from_header(cols[0].clone())?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let dn = rec.iter().skip(2).map(|v| parse_f64(v, "DN")).collect::<Result<Vec<_>>>()?;
        out.push(Spectrum::new(grid.clone(), dn, parse_timestamp(&rec[0])?, parse_f64(&rec[1], "exposure_ms")?)?);
    }
    check_monotonic(&out.iter().map(|s| s.timestamp).collect::<Vec<_>>())?;
    Ok(out)
}

/// One row of a rotation experiment file.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationRecord {
    pub timestamp: DateTime<Utc>,
    pub heading_deg: f64,
    pub dn: Vec<f64>,
}

/// `timestamp,heading_deg,wl_<nm>...` with normalized DS DN.
pub fn write_rotation(grid: &WavelengthGrid, samples: &[RotationSample]) -> Result<String> {
    let mut w = writer();
    let mut head = vec!["timestamp".to_string(), "heading_deg".to_string()];
    head.extend(grid.centers().iter().map(|c| column_name("wl_", *c)));
    w.write_record(&head).map_err(csv_err)?;
    for s in samples {
        if s.ds_dn.len() != grid.len() {
            return Err(Error::BandMismatch(format!("{} DN values on a {}-band grid", s.ds_dn.len(), grid.len())));
        }
        let mut rec = vec![fmt_timestamp(s.timestamp), fmt_value(s.uav_heading_deg)];
        rec.extend(s.ds_dn.iter().map(|v| fmt_value(*v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_rotation(text: &str) -> Result<(WavelengthGrid, Vec<RotationRecord>)> {
    let mut r = reader(text);
    let cols = parse_header(r.headers().map_err(csv_err)?, &["timestamp", "heading_deg"], &["wl_"])?;
    let grid = grid_from_header(cols[0].clone())?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        out.push(RotationRecord {
            timestamp: parse_timestamp(&rec[0])?,
            heading_deg: parse_f64(&rec[1], "heading_deg")?,
            dn: rec.iter().skip(2).map(|v| parse_f64(v, "DN")).collect::<Result<_>>()?,
        });
    }
    check_monotonic(&out.iter().map(|s| s.timestamp).collect::<Vec<_>>())?;
    Ok((grid, out))
}

/// `panel_id,timestamp,condition,dn_<nm>...,truth_<nm>...`.
pub fn write_observations(band_centers: &[f64], obs: &[PanelObservation]) -> Result<String> {
    let mut w = writer();
    let mut head = vec!["panel_id".to_string(), "timestamp".to_string(), "condition".to_string()];
    head.extend(band_centers.iter().map(|c| column_name("dn_", *c)));
    head.extend(band_centers.iter().map(|c| column_name("truth_", *c)));
    w.write_record(&head).map_err(csv_err)?;
    for o in obs {
        if o.mean_dn.len() != band_centers.len() {
            return Err(Error::BandMismatch(format!("observation of {} has {} bands", o.panel_id, o.mean_dn.len())));
        }
        let mut rec = vec![o.panel_id.clone(), fmt_timestamp(o.timestamp), o.condition.clone()];
        rec.extend(o.mean_dn.iter().chain(&o.truth_reflectance).map(|v| fmt_value(*v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish(w)
}

/// Band centers from the header and the observations.
pub fn read_observations(text: &str) -> Result<(Vec<f64>, Vec<PanelObservation>)> {
    let mut r = reader(text);
    let cols = parse_header(r.headers().map_err(csv_err)?, &["panel_id", "timestamp", "condition"], &["dn_", "truth_"])?;
    if cols[0] != cols[1] {
        return Err(Error::BandMismatch("dn_ and truth_ columns name different bands".into()));
    }
    let n = cols[0].len();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let values = rec.iter().skip(3).map(|v| parse_f64(v, "value")).collect::<Result<Vec<_>>>()?;
        if values.len() != 2 * n {
            return Err(Error::ShapeMismatch(format!("row with {} values for {n} bands", values.len())));
        }
        out.push(PanelObservation::new(&rec[0], parse_timestamp(&rec[1])?, values[..n].to_vec(), values[n..].to_vec(), &rec[2])?);
    }
    check_monotonic(&out.iter().map(|o| o.timestamp).collect::<Vec<_>>())?;
    Ok((cols[0].clone(), out))
}

/// A predicted reflectance row; `None` for excluded bands.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectanceRow {
    pub panel_id: String,
    pub timestamp: DateTime<Utc>,
    pub condition: String,
    pub reflectance: Vec<Option<f64>>,
}

impl ReflectanceRow {
    pub fn new(obs: &PanelObservation, p: &Prediction) -> Self {
        Self { panel_id: obs.panel_id.clone(), timestamp: obs.timestamp, condition: obs.condition.clone(), reflectance: p.reflectance.clone() }
    }
}

/// `panel_id,timestamp,condition,refl_<nm>...` as fractions; empty cells for excluded bands.
pub fn write_reflectance(band_centers: &[f64], rows: &[ReflectanceRow]) -> Result<String> {
    let mut w = writer();
    let mut head = vec!["panel_id".to_string(), "timestamp".to_string(), "condition".to_string()];
    head.extend(band_centers.iter().map(|c| column_name("refl_", *c)));
    w.write_record(&head).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.panel_id.clone(), fmt_timestamp(r.timestamp), r.condition.clone()];
        rec.extend(r.reflectance.iter().map(|v| v.map_or(String::new(), fmt_value)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_reflectance(text: &str) -> Result<(Vec<f64>, Vec<ReflectanceRow>)> {
    let mut r = reader(text);
    let cols = parse_header(r.headers().map_err(csv_err)?, &["panel_id", "timestamp", "condition"], &["refl_"])?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let reflectance = rec
            .iter()
            .skip(3)
            .map(|v| if v.trim().is_empty() { Ok(None) } else { parse_f64(v, "reflectance").map(Some) })
            .collect::<Result<Vec<_>>>()?;
        out.push(ReflectanceRow { panel_id: rec[0].to_string(), timestamp: parse_timestamp(&rec[1])?, condition: rec[2].to_string(), reflectance });
    }
    Ok((cols[0].clone(), out))
}

/// `panel_id,wl_nm,reflectance`, one row per tabulated wavelength.
pub fn write_panels(panels: &[PanelSpec]) -> Result<String> {
    let mut w = writer();
    w.write_record(["panel_id", "wl_nm", "reflectance"]).map_err(csv_err)?;
    for p in panels {
        for (nm, r) in p.wavelengths_nm.iter().zip(&p.reflectance) {
            w.write_record([p.panel_id.clone(), fmt_value(*nm), fmt_value(*r)]).map_err(csv_err)?;
        }
    }
    finish(w)
}

/// Panels in first-appearance order.
pub fn read_panels(text: &str) -> Result<Vec<PanelSpec>> {
    let mut r = reader(text);
    parse_header(r.headers().map_err(csv_err)?, &["panel_id", "wl_nm", "reflectance"], &[])?;
    let mut table: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let (nm, refl) = (parse_f64(&rec[1], "wl_nm")?, parse_f64(&rec[2], "reflectance")?);
        match table.iter_mut().find(|(id, _, _)| id == &rec[0]) {
            Some((_, w, v)) => {
                w.push(nm);
                v.push(refl);
            }
            None => table.push((rec[0].to_string(), vec![nm], vec![refl])),
        }
    }
    table.into_iter().map(|(id, w, v)| PanelSpec::new(id, w, v)).collect()
}

// ---- JSON documents ----

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Parse a versioned document, checking `format_version` before the body.
pub fn from_versioned_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    let found = v.get("format_version").and_then(|f| f.as_u64()).ok_or_else(|| Error::Parse("missing format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::FormatVersionMismatch { expected: FORMAT_VERSION, found: found as u32 });
    }
    Ok(serde_json::from_value(v)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiEntry {
    pub panel_id: String,
    pub roi: Roi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiFile {
    pub format_version: u32,
    pub panels: Vec<RoiEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadingBlock {
    pub correction: HeadingCorrection,
    pub mode: CorrectionMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadingFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub heading: HeadingBlock,
    /// Rotation samples kept after gating.
    pub samples_used: usize,
    pub min_altitude_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub training_sha256: String,
    pub seed: u64,
    pub conditions: Vec<String>,
    pub tool_version: String,
    pub n_train: usize,
    pub n_test: usize,
    pub min_altitude_deg: f64,
    pub pair_tolerance_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub model: ReflectanceModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heading: Option<HeadingBlock>,
    pub provenance: Provenance,
}

impl ModelFile {
    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        from_versioned_json(text)
    }
}

/// Hex SHA-256 of the canonical JSON of a training set.
pub fn training_hash(set: &TrainingSet) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(set)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub const FORMAT_DOCS: &str = r#"reflgen file formats (format_version 1)

All timestamps are ISO-8601 UTC with millisecond precision, e.g.
2024-05-08T04:00:00.000Z. Reflectances are fractions. CSV files use a
header row, comma separators and LF line ends. Numbers are written
rounded to 9 significant digits in their shortest exact decimal form.

Cube (header.json + header.bin)
  header: {"format_version", "rows", "cols", "bands": [{"center_nm",
  "fwhm_nm"}], "exposure_ms", "timestamp", "saturation_dn",
  "negative_dn", "dtype": "float32", "layout": "band-sequential",
  "byte_order": "little-endian", "payload": "<file name>"}
  payload: rows*cols*bands IEEE-754 float32 little-endian values,
  band-major, then row-major. Its length must equal rows*cols*bands*4
  bytes. A vignetting field is stored as a cube whose values are gains.

Spectrum series CSV
  timestamp,exposure_ms,wl_<nm>,...   one row per spectrum, timestamps
  non-decreasing, one column per DS band. Normalized spectra carry
  exposure_ms = 100.

Rotation CSV
  timestamp,heading_deg,wl_<nm>,...   normalized DS DN at each UAV heading.

Panel observation CSV
  panel_id,timestamp,condition,dn_<nm>,...,truth_<nm>,...
  mean normalized MSI DN of each panel and its true reflectance.

Reflectance CSV
  panel_id,timestamp,condition,refl_<nm>,...   empty cell = band excluded.

Panel spec CSV
  panel_id,wl_nm,reflectance   one row per tabulated wavelength.

ROI JSON
  {"format_version", "panels": [{"panel_id", "roi": {"row0", "col0",
  "rows", "cols"}}]}

Model JSON
  {"format_version", "model": {"kind": {"kind": "elm"|"direct"|"dls"|
  "pcr"|"mlr", ...}, "msi_bands", "ds_grid", "bands": [per-band
  coefficients or null], "excluded_bands", "warnings"}, "heading"
  (optional), "provenance": {"training_sha256", "seed", "conditions",
  "tool_version", "n_train", "n_test", "min_altitude_deg",
  "pair_tolerance_s"}}
  Readers reject any other format_version.

Heading correction JSON
  {"format_version", "correction": {"wavelengths_nm", "amplitude",
  "initial_phase_deg", "fit_residual_rms", "amplitude_mean",
  "initial_phase_mean_deg"}, "mode": "BandAveraged"|"PerBand",
  "samples_used", "min_altitude_deg"}

Truth sidecar JSON (simulator only)
  {"format_version", "seed", "gains", "heading_error", "panels",
  "msi_bands", "ds_wavelengths_nm", "records": [{"timestamp",
  "altitude_deg", "azimuth_deg", "cloud_factor", "heading_delta",
  "absorption_depths", "irradiance"}]}
"#;
