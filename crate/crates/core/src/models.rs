//! Reflectance models: empirical line, direct ratio, broadband DLS,
//! principal component regression and band-integrated MLR, plus PCA and the
//! exhaustive band-subset search.

use std::collections::BTreeMap;
use std::ops::Range;

use chrono::{DateTime, Utc};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluate;
use crate::io::fmt_value;
use crate::linalg::{self, OlsFit};
use crate::par;
use crate::spectral::{match_nearest_band, BandDef, PanelObservation, Spectrum, WavelengthGrid};

pub const DEFAULT_PAIR_TOLERANCE_S: f64 = 1.5;
pub const DEFAULT_COVERAGE_NM: f64 = 10.0;
pub const DEFAULT_BANDWIDTH_NM: f64 = 30.0;
pub const DEFAULT_ELM_WINDOW_S: f64 = 900.0;
/// The band set chosen for the 4-band MLR.
pub const MLR_BANDS_NM: [f64; 4] = [722.0, 773.0, 800.0, 915.0];
/// Wavelengths with the most significant PC loadings.
pub const CANDIDATE_BANDS_NM: [f64; 6] = [722.0, 773.0, 800.0, 822.0, 874.0, 915.0];
/// Eigenvalues below this fraction of the largest are treated as zero.
pub const RANK_TOL: f64 = 1e-10;
pub const MAX_SEARCH_CANDIDATES: usize = 12;

/// A panel observation with the DS spectrum nearest to it in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub observation: PanelObservation,
    pub spectrum: Spectrum,
}

impl TrainingPair {
    pub fn gap_s(&self) -> f64 {
        (self.observation.timestamp - self.spectrum.timestamp).num_milliseconds().abs() as f64 / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub pairs: Vec<TrainingPair>,
    pub pairing_tolerance_s: f64,
}

impl TrainingSet {
    pub fn new(pairs: Vec<TrainingPair>, pairing_tolerance_s: f64) -> Result<Self> {
        if let Some(p) = pairs.iter().find(|p| p.gap_s() > pairing_tolerance_s) {
            return Err(Error::InvalidParameter(format!(
                "pair at {} is {} s apart, tolerance {pairing_tolerance_s} s",
                p.observation.timestamp,
                p.gap_s()
            )));
        }
        Ok(Self { pairs, pairing_tolerance_s })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The DS grid shared by every pair.
    pub fn ds_grid(&self) -> Result<&WavelengthGrid> {
        let first = self.pairs.first().ok_or(Error::TooFewPoints { needed: 2, got: 0 })?;
        let g = &first.spectrum.grid;
        if self.pairs.iter().any(|p| &p.spectrum.grid != g) {
            return Err(Error::BandMismatch("training spectra use different DS grids".into()));
        }
        Ok(g)
    }

    pub fn msi_band_count(&self) -> Result<usize> {
        let first = self.pairs.first().ok_or(Error::TooFewPoints { needed: 2, got: 0 })?;
        let n = first.observation.mean_dn.len();
        if self.pairs.iter().any(|p| p.observation.mean_dn.len() != n) {
            return Err(Error::BandMismatch("observations differ in MSI band count".into()));
        }
        Ok(n)
    }

    pub fn subset(&self, indices: &[usize]) -> TrainingSet {
        TrainingSet { pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(), pairing_tolerance_s: self.pairing_tolerance_s }
    }

    /// Sorted distinct condition tags.
    pub fn conditions(&self) -> Vec<String> {
        let mut c: Vec<String> = self.pairs.iter().map(|p| p.observation.condition.clone()).collect();
        c.sort();
        c.dedup();
        c
    }

    pub fn with_condition(&self, condition: &str) -> TrainingSet {
        TrainingSet {
            pairs: self.pairs.iter().filter(|p| p.observation.condition == condition).cloned().collect(),
            pairing_tolerance_s: self.pairing_tolerance_s,
        }
    }

    fn truth(&self, band: usize) -> Vec<f64> {
        self.pairs.iter().map(|p| p.observation.truth_reflectance[band]).collect()
    }
}

/// An observation with no spectrum inside the pairing tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unpaired {
    pub index: usize,
    pub panel_id: String,
    pub timestamp: DateTime<Utc>,
    pub nearest_gap_s: Option<f64>,
}

fn check_sorted<T>(items: &[T], ts: impl Fn(&T) -> DateTime<Utc>) -> Result<()> {
    match items.windows(2).position(|w| ts(&w[1]) < ts(&w[0])) {
        Some(i) => Err(Error::NonMonotonicTimestamps(i + 1)),
        None => Ok(()),
    }
}

/// Pair each observation with the nearest spectrum in time (ties go to the
/// earlier spectrum). Observations without a spectrum inside the tolerance
/// are returned separately.
pub fn pair_observations(obs: &[PanelObservation], spectra: &[Spectrum], tolerance_s: f64) -> Result<(TrainingSet, Vec<Unpaired>)> {
    check_sorted(obs, |o| o.timestamp)?;
    check_sorted(spectra, |s| s.timestamp)?;
    let gap = |a: DateTime<Utc>, b: DateTime<Utc>| (a - b).num_milliseconds().abs() as f64 / 1000.0;
    let mut pairs = Vec::new();
    let mut unpaired = Vec::new();
    for (i, o) in obs.iter().enumerate() {
        let after = spectra.partition_point(|s| s.timestamp < o.timestamp);
        let best = match (after.checked_sub(1), (after < spectra.len()).then_some(after)) {
            (Some(b), Some(a)) => {
                if gap(o.timestamp, spectra[a].timestamp) < gap(o.timestamp, spectra[b].timestamp) {
                    Some(a)
                } else {
                    Some(b)
                }
            }
            (b, a) => b.or(a),
        };
        match best {
            Some(j) if gap(o.timestamp, spectra[j].timestamp) <= tolerance_s => {
                pairs.push(TrainingPair { observation: o.clone(), spectrum: spectra[j].clone() })
            }
            other => unpaired.push(Unpaired {
                index: i,
                panel_id: o.panel_id.clone(),
                timestamp: o.timestamp,
                nearest_gap_s: other.map(|j| gap(o.timestamp, spectra[j].timestamp)),
            }),
        }
    }
    Ok((TrainingSet { pairs, pairing_tolerance_s: tolerance_s }, unpaired))
}

fn check_reference(ds_dn: &[f64]) -> Result<()> {
    match ds_dn.iter().position(|v| !(*v > 0.0)) {
        Some(i) => Err(Error::NonPositiveReference(i)),
        None => Ok(()),
    }
}

/// `msi_dn / ds_dn` for every DS band.
pub fn compute_ratio(msi_dn: f64, ds_dn: &[f64]) -> Result<Vec<f64>> {
    check_reference(ds_dn)?;
    Ok(ds_dn.iter().map(|d| msi_dn / d).collect())
}

/// Rectangle-rule integral of a ratio vector over `[center - bw/2, center + bw/2]`.
/// Each DS sample contributes its value times the overlap of its cell with
/// the window.
pub fn integrate_band(ratio: &[f64], grid: &WavelengthGrid, center_nm: f64, bandwidth_nm: f64) -> Result<f64> {
    if ratio.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!("{} ratios on a {}-band grid", ratio.len(), grid.len())));
    }
    let (lo, hi) = (center_nm - bandwidth_nm / 2.0, center_nm + bandwidth_nm / 2.0);
    let inside = grid.centers().iter().filter(|c| **c >= lo && **c <= hi).count();
    if inside < 2 {
        return Err(Error::WindowEmpty { lo_nm: lo, hi_nm: hi });
    }
    Ok(grid
        .cell_bounds()
        .iter()
        .zip(ratio)
        .map(|((a, b), r)| r * (b.min(hi) - a.max(lo)).max(0.0))
        .sum())
}

/// Principal components of standardized columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// Indices of the input columns kept (non-constant).
    pub columns: Vec<usize>,
    pub dropped_columns: Vec<usize>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    /// One unit-length loading vector per component, over the kept columns.
    pub loadings: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub explained_ratio: Vec<f64>,
}

impl Pca {
    /// Components whose eigenvalue is numerically non-zero.
    pub fn rank(&self) -> usize {
        let top = self.eigenvalues.first().copied().unwrap_or(0.0);
        self.eigenvalues.iter().filter(|e| **e > RANK_TOL * top).count()
    }

    pub fn cumulative_explained(&self, k: usize) -> f64 {
        self.explained_ratio.iter().take(k).sum()
    }

    /// First `k` component scores of one input row.
    pub fn scores(&self, row: &[f64], k: usize) -> Vec<f64> {
        let z: Vec<f64> = self.columns.iter().zip(self.means.iter().zip(&self.scales)).map(|(&c, (m, s))| (row[c] - m) / s).collect();
        self.loadings.iter().take(k).map(|l| l.iter().zip(&z).map(|(a, b)| a * b).sum()).collect()
    }
}

/// Centre and scale every column (sample std), drop constant columns, and
/// eigendecompose the correlation matrix. Components are ordered by
/// decreasing eigenvalue; each one's largest-magnitude loading is positive.
pub fn pca_fit(rows: &[Vec<f64>]) -> Result<Pca> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let p = rows[0].len();
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::ShapeMismatch("rows differ in length".into()));
    }
    let mut columns = Vec::new();
    let mut dropped_columns = Vec::new();
    let mut means = Vec::new();
    let mut scales = Vec::new();
    for j in 0..p {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        if sd > 1e-12 * mean.abs().max(f64::MIN_POSITIVE) && sd > 0.0 {
            columns.push(j);
            means.push(mean);
            scales.push(sd);
        } else {
            dropped_columns.push(j);
        }
    }
    if columns.is_empty() {
        return Err(Error::AllColumnsConstant);
    }
    let q = columns.len();
    let z = DMatrix::from_fn(n, q, |i, k| (rows[i][columns[k]] - means[k]) / scales[k]);
    let corr = (z.transpose() * &z) / (n - 1) as f64;
    let eig = SymmetricEigen::new(corr);
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let loadings: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| {
            let v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            orient(v)
        })
        .collect();
    let total: f64 = eigenvalues.iter().sum();
    let explained_ratio = eigenvalues.iter().map(|e| e / total).collect();
    Ok(Pca { columns, dropped_columns, means, scales, loadings, eigenvalues, explained_ratio })
}

/// Flip the vector so its largest-magnitude entry is positive (first one on ties).
pub(crate) fn orient(mut v: Vec<f64>) -> Vec<f64> {
    let pivot = v.iter().enumerate().fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Wavelengths with the largest |loading| in each of the components in `pcs`
/// (skipping zero-eigenvalue components), deduplicated and sorted.
pub fn select_candidate_bands(pca: &Pca, wavelengths_nm: &[f64], pcs: Range<usize>, n_per_pc: usize) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for pc in pcs.take_while(|&i| i < pca.rank()) {
        let l = &pca.loadings[pc];
        let mut idx: Vec<usize> = (0..l.len()).collect();
        idx.sort_by(|&a, &b| l[b].abs().total_cmp(&l[a].abs()).then(a.cmp(&b)));
        out.extend(idx.iter().take(n_per_pc).map(|&k| wavelengths_nm[pca.columns[k]]));
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Centers whose whole window lies within the grid's cells.
pub fn window_centers(grid: &WavelengthGrid, bandwidth_nm: f64) -> Vec<f64> {
    let cells = grid.cell_bounds();
    let (lo, hi) = (cells[0].0, cells[cells.len() - 1].1);
    grid.centers().iter().copied().filter(|c| c - bandwidth_nm / 2.0 >= lo && c + bandwidth_nm / 2.0 <= hi).collect()
}

/// Integrated ratios of one MSI band at each of `centers_nm`, one row per pair.
pub fn integrated_ratio_matrix(training: &TrainingSet, msi_band: usize, centers_nm: &[f64], bandwidth_nm: f64) -> Result<Vec<Vec<f64>>> {
    let grid = training.ds_grid()?;
    training.pairs.iter().map(|p| mlr_features(p.observation.mean_dn[msi_band], &p.spectrum, grid, centers_nm, bandwidth_nm)).collect()
}

/// Which formula a model applies per band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Elm,
    Direct { coverage_nm: f64 },
    Dls,
    Pcr { k: usize },
    Mlr { bands_nm: Vec<f64>, bandwidth_nm: f64 },
}

impl ModelKind {
    pub fn label(&self) -> String {
        match self {
            ModelKind::Elm => "ELM".into(),
            ModelKind::Direct { .. } => "Direct".into(),
            ModelKind::Dls => "DLS".into(),
            ModelKind::Pcr { k } => format!("PCR{k}"),
            ModelKind::Mlr { bands_nm, .. } => format!("MLR{}", bands_nm.len()),
        }
    }

    pub fn needs_reference(&self) -> bool {
        !matches!(self, ModelKind::Elm)
    }
}

/// Coefficients of one MSI band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum BandModel {
    /// `R = slope * x + intercept`, with `x` the DN (ELM) or DN over the summed DS (DLS).
    Linear { slope: f64, intercept: f64 },
    /// `R = slope * DN / DS[ds_index] + intercept`.
    Ratio { ds_index: usize, slope: f64, intercept: f64 },
    Pcr { pca: Pca, k: usize, weights: Vec<f64>, intercept: f64 },
    Mlr { weights: Vec<f64>, intercept: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectanceModel {
    pub kind: ModelKind,
    pub msi_bands: Vec<BandDef>,
    pub ds_grid: Option<WavelengthGrid>,
    /// `None` for bands the model does not cover.
    pub bands: Vec<Option<BandModel>>,
    pub excluded_bands: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Per-band reflectance; `None` where the model has no coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub reflectance: Vec<Option<f64>>,
    pub negative: usize,
}

fn line(model: &OlsFit) -> (f64, f64) {
    (model.weights[0], model.intercept)
}

fn fit_single(x: &[f64], y: &[f64]) -> Result<OlsFit> {
    let (first, rest) = x.split_first().ok_or(Error::DegenerateFit("no samples".into()))?;
    if x.len() < 2 {
        return Err(Error::DegenerateFit(format!("{} points for a line", x.len())));
    }
    if rest.iter().all(|v| v == first) {
        return Err(Error::DegenerateFit("all predictor values are equal".into()));
    }
    linalg::ols(&[x.to_vec()], y).map_err(|e| match e {
        Error::CollinearPredictors { .. } => Error::DegenerateFit("predictor is (numerically) constant".into()),
        e => e,
    })
}

fn check_bands(msi_bands: &[BandDef], count: usize) -> Result<()> {
    if msi_bands.len() != count {
        return Err(Error::BandMismatch(format!("{} band definitions for {count} observed bands", msi_bands.len())));
    }
    Ok(())
}

/// Per-band least-squares line `R = a * DN + b` over the pooled panel points.
pub fn fit_elm(references: &[PanelObservation], msi_bands: &[BandDef]) -> Result<ReflectanceModel> {
    let first = references.first().ok_or(Error::DegenerateFit("no reference observations".into()))?;
    check_bands(msi_bands, first.mean_dn.len())?;
    if references.iter().any(|o| o.mean_dn.len() != msi_bands.len()) {
        return Err(Error::BandMismatch("reference observations differ in band count".into()));
    }
    let bands = (0..msi_bands.len())
        .map(|b| {
            let x: Vec<f64> = references.iter().map(|o| o.mean_dn[b]).collect();
            let y: Vec<f64> = references.iter().map(|o| o.truth_reflectance[b]).collect();
            let (slope, intercept) = line(&fit_single(&x, &y)?);
            Ok(Some(BandModel::Linear { slope, intercept }))
        })
        .collect::<Result<_>>()?;
    Ok(ReflectanceModel { kind: ModelKind::Elm, msi_bands: msi_bands.to_vec(), ds_grid: None, bands, excluded_bands: vec![], warnings: vec![] })
}

/// How ELM reference frames are drawn around each target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElmProtocol {
    pub window_s: f64,
    pub seed: u64,
}

impl Default for ElmProtocol {
    fn default() -> Self {
        Self { window_s: DEFAULT_ELM_WINDOW_S, seed: 0 }
    }
}

/// Observations grouped by acquisition instant (one MSI frame each), in time order.
pub fn group_frames(obs: &[PanelObservation]) -> Vec<(DateTime<Utc>, Vec<PanelObservation>)> {
    let mut frames: BTreeMap<DateTime<Utc>, Vec<PanelObservation>> = BTreeMap::new();
    for o in obs {
        frames.entry(o.timestamp).or_default().push(o.clone());
    }
    frames.into_iter().collect()
}

impl ElmProtocol {
    /// One randomly drawn frame from each side of `target` within the window,
    /// never the target's own frame.
    pub fn references(&self, frames: &[(DateTime<Utc>, Vec<PanelObservation>)], target: DateTime<Utc>) -> Result<Vec<PanelObservation>> {
        let dt = |t: DateTime<Utc>| (t - target).num_milliseconds() as f64 / 1000.0;
        let before: Vec<usize> = (0..frames.len()).filter(|&i| (-self.window_s..0.0).contains(&dt(frames[i].0))).collect();
        let after: Vec<usize> = (0..frames.len()).filter(|&i| dt(frames[i].0) > 0.0 && dt(frames[i].0) <= self.window_s).collect();
        if before.is_empty() && after.is_empty() {
            return Err(Error::NoReferenceFrame { window_s: self.window_s });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (target.timestamp_millis() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut out = Vec::new();
        for side in [&before, &after] {
            if !side.is_empty() {
                out.extend(frames[side[rng.random_range(0..side.len())]].1.iter().cloned());
            }
        }
        Ok(out)
    }
}

/// ELM reflectance for each target observation, each from its own
/// reference frames drawn out of `all_obs`.
pub fn predict_elm_series(
    all_obs: &[PanelObservation],
    targets: &[PanelObservation],
    msi_bands: &[BandDef],
    protocol: &ElmProtocol,
) -> Vec<Result<Prediction>> {
    let frames = group_frames(all_obs);
    par::map_slice(targets, |t| {
        let refs = protocol.references(&frames, t.timestamp)?;
        let model = fit_elm(&refs, msi_bands)?;
        predict_reflectance(&model, &t.mean_dn, None)
    })
}

/// Per covered MSI band, `R = a * Ratio + b` with the nearest DS band.
/// Bands with no DS band within `coverage_nm` are excluded.
pub fn fit_direct(training: &TrainingSet, msi_bands: &[BandDef], coverage_nm: f64) -> Result<ReflectanceModel> {
    let grid = training.ds_grid()?.clone();
    check_bands(msi_bands, training.msi_band_count()?)?;
    for p in &training.pairs {
        check_reference(&p.spectrum.dn)?;
    }
    let fits: Vec<Result<Option<BandModel>>> = par::map_range(msi_bands.len(), |b| {
        let m = match_nearest_band(msi_bands[b].center_nm, &grid);
        if m.distance_nm > coverage_nm {
            return Ok(None);
        }
        let x: Vec<f64> = training.pairs.iter().map(|p| p.observation.mean_dn[b] / p.spectrum.dn[m.index]).collect();
        let (slope, intercept) = line(&fit_single(&x, &training.truth(b))?);
        Ok(Some(BandModel::Ratio { ds_index: m.index, slope, intercept }))
    });
    let bands: Vec<Option<BandModel>> = fits.into_iter().collect::<Result<_>>()?;
    let excluded_bands = bands.iter().enumerate().filter(|(_, m)| m.is_none()).map(|(i, _)| i).collect();
    Ok(ReflectanceModel { kind: ModelKind::Direct { coverage_nm }, msi_bands: msi_bands.to_vec(), ds_grid: Some(grid), bands, excluded_bands, warnings: vec![] })
}

fn broadband(ds: &[f64]) -> f64 {
    ds.iter().sum()
}

/// Per MSI band, `R = a * DN / sum(DS) + b`.
pub fn fit_dls(training: &TrainingSet, msi_bands: &[BandDef]) -> Result<ReflectanceModel> {
    let grid = training.ds_grid()?.clone();
    check_bands(msi_bands, training.msi_band_count()?)?;
    for p in &training.pairs {
        check_reference(&p.spectrum.dn)?;
    }
    let bands = par::map_range(msi_bands.len(), |b| {
        let x: Vec<f64> = training.pairs.iter().map(|p| p.observation.mean_dn[b] / broadband(&p.spectrum.dn)).collect();
        let (slope, intercept) = line(&fit_single(&x, &training.truth(b))?);
        Ok(Some(BandModel::Linear { slope, intercept }))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    Ok(ReflectanceModel { kind: ModelKind::Dls, msi_bands: msi_bands.to_vec(), ds_grid: Some(grid), bands, excluded_bands: vec![], warnings: vec![] })
}

/// Per MSI band: PCA of the full ratio vectors, then least squares of
/// reflectance on the top `k` component scores.
pub fn fit_pcr(training: &TrainingSet, msi_bands: &[BandDef], k: usize) -> Result<ReflectanceModel> {
    let grid = training.ds_grid()?.clone();
    check_bands(msi_bands, training.msi_band_count()?)?;
    if k == 0 {
        return Err(Error::RankDeficient { requested: 0, available: 0 });
    }
    let fits = par::map_range(msi_bands.len(), |b| -> Result<(BandModel, Option<String>)> {
        let rows: Vec<Vec<f64>> =
            training.pairs.iter().map(|p| compute_ratio(p.observation.mean_dn[b], &p.spectrum.dn)).collect::<Result<_>>()?;
        let pca = pca_fit(&rows)?;
        let available = pca.rank();
        if k > available {
            return Err(Error::RankDeficient { requested: k, available });
        }
        let scores: Vec<Vec<f64>> = rows.iter().map(|r| pca.scores(r, k)).collect();
        let columns: Vec<Vec<f64>> = (0..k).map(|j| scores.iter().map(|s| s[j]).collect()).collect();
        let fit = linalg::ols(&columns, &training.truth(b))?;
        let warning = (!pca.dropped_columns.is_empty())
            .then(|| format!("band {b}: dropped constant DS columns {:?}", pca.dropped_columns));
        Ok((BandModel::Pcr { pca, k, weights: fit.weights, intercept: fit.intercept }, warning))
    });
    let mut bands = Vec::new();
    let mut warnings = Vec::new();
    for f in fits {
        let (m, w) = f?;
        bands.push(Some(m));
        warnings.extend(w);
    }
    Ok(ReflectanceModel { kind: ModelKind::Pcr { k }, msi_bands: msi_bands.to_vec(), ds_grid: Some(grid), bands, excluded_bands: vec![], warnings })
}

/// Integrated ratios of one MSI DN against one spectrum at each center.
pub fn mlr_features(msi_dn: f64, spectrum: &Spectrum, grid: &WavelengthGrid, centers_nm: &[f64], bandwidth_nm: f64) -> Result<Vec<f64>> {
    let ratio = compute_ratio(msi_dn, &spectrum.dn)?;
    centers_nm.iter().map(|c| integrate_band(&ratio, grid, *c, bandwidth_nm)).collect()
}

fn mlr_columns(training: &TrainingSet, grid: &WavelengthGrid, band: usize, bands_nm: &[f64], bandwidth_nm: f64) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = training
        .pairs
        .iter()
        .map(|p| mlr_features(p.observation.mean_dn[band], &p.spectrum, grid, bands_nm, bandwidth_nm))
        .collect::<Result<_>>()?;
    Ok((0..bands_nm.len()).map(|j| rows.iter().map(|r| r[j]).collect()).collect())
}

/// Per MSI band, OLS of reflectance on the integrated ratios at `bands_nm`.
pub fn fit_mlr(training: &TrainingSet, msi_bands: &[BandDef], bands_nm: &[f64], bandwidth_nm: f64) -> Result<ReflectanceModel> {
    if bands_nm.is_empty() {
        return Err(Error::InvalidParameter("MLR needs at least one band".into()));
    }
    let grid = training.ds_grid()?.clone();
    check_bands(msi_bands, training.msi_band_count()?)?;
    let fits = par::map_range(msi_bands.len(), |b| -> Result<(BandModel, Option<String>)> {
        let cols = mlr_columns(training, &grid, b, bands_nm, bandwidth_nm)?;
        let fit = linalg::ols(&cols, &training.truth(b))?;
        let warning = fit.near_collinear().then(|| format!("band {b}: near-collinear predictors (condition {:.3e})", fit.condition));
        Ok((BandModel::Mlr { weights: fit.weights, intercept: fit.intercept }, warning))
    });
    let mut bands = Vec::new();
    let mut warnings = Vec::new();
    for f in fits {
        let (m, w) = f?;
        bands.push(Some(m));
        warnings.extend(w);
    }
    Ok(ReflectanceModel {
        kind: ModelKind::Mlr { bands_nm: bands_nm.to_vec(), bandwidth_nm },
        msi_bands: msi_bands.to_vec(),
        ds_grid: Some(grid),
        bands,
        excluded_bands: vec![],
        warnings,
    })
}

/// Apply the model to one observation's MSI DN and its paired DS spectrum.
pub fn predict_reflectance(model: &ReflectanceModel, msi_dn: &[f64], ds: Option<&Spectrum>) -> Result<Prediction> {
    if msi_dn.len() != model.msi_bands.len() {
        return Err(Error::BandMismatch(format!("{} DN values for a {}-band model", msi_dn.len(), model.msi_bands.len())));
    }
    let ds = match (&model.kind, ds) {
        (ModelKind::Elm, _) => None,
        (_, None) => return Err(Error::MissingReference),
        (_, Some(s)) => {
            if model.ds_grid.as_ref() != Some(&s.grid) {
                return Err(Error::BandMismatch("spectrum grid differs from the model's DS grid".into()));
            }
            check_reference(&s.dn)?;
            Some(s)
        }
    };
    let reflectance: Vec<Option<f64>> = model
        .bands
        .iter()
        .enumerate()
        .map(|(b, m)| -> Result<Option<f64>> {
            let Some(m) = m else { return Ok(None) };
            let dn = msi_dn[b];
            let v = match (m, &model.kind) {
                (BandModel::Linear { slope, intercept }, ModelKind::Elm) => OlsFit::line(*slope, *intercept).predict(&[dn]),
                (BandModel::Linear { slope, intercept }, _) => {
                    OlsFit::line(*slope, *intercept).predict(&[dn / broadband(&ds.expect("checked above").dn)])
                }
                (BandModel::Ratio { ds_index, slope, intercept }, _) => {
                    OlsFit::line(*slope, *intercept).predict(&[dn / ds.expect("checked above").dn[*ds_index]])
                }
                (BandModel::Pcr { pca, k, weights, intercept }, _) => {
                    let ratio = compute_ratio(dn, &ds.expect("checked above").dn)?;
                    OlsFit::with(weights.clone(), *intercept).predict(&pca.scores(&ratio, *k))
                }
                (BandModel::Mlr { weights, intercept }, ModelKind::Mlr { bands_nm, bandwidth_nm }) => {
                    let s = ds.expect("checked above");
                    let x = mlr_features(dn, s, &s.grid, bands_nm, *bandwidth_nm)?;
                    OlsFit::with(weights.clone(), *intercept).predict(&x)
                }
                (BandModel::Mlr { .. }, _) => return Err(Error::InvalidParameter("MLR coefficients on a non-MLR model".into())),
            };
            Ok(Some(v))
        })
        .collect::<Result<_>>()?;
    let negative = reflectance.iter().flatten().filter(|v| **v < 0.0).count();
    Ok(Prediction { reflectance, negative })
}

/// Predictions for every pair of a set.
pub fn predict_set(model: &ReflectanceModel, set: &TrainingSet) -> Result<Vec<Prediction>> {
    par::map_slice(&set.pairs, |p| predict_reflectance(model, &p.observation.mean_dn, Some(&p.spectrum))).into_iter().collect()
}

/// Band-averaged accuracy of one subset under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub bands_nm: Vec<f64>,
    pub condition: String,
    pub rmse: f64,
    pub rrmse: Option<f64>,
}

/// A subset whose MLR could not be fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetFailure {
    pub bands_nm: Vec<f64>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSearchTable {
    pub candidates_nm: Vec<f64>,
    pub bandwidth_nm: f64,
    pub subsets_evaluated: usize,
    /// Sorted by size, then condition, then RMSE.
    pub rows: Vec<SubsetScore>,
    pub failures: Vec<SubsetFailure>,
}

pub use crate::evaluate::ALL_CONDITIONS;

impl BandSearchTable {
    /// Lowest-RMSE subset of each size under `condition`.
    pub fn best_per_size(&self, condition: &str) -> Vec<&SubsetScore> {
        let mut best: BTreeMap<usize, &SubsetScore> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.condition == condition) {
            let e = best.entry(r.bands_nm.len()).or_insert(r);
            if r.rmse < e.rmse {
                *e = r;
            }
        }
        best.into_values().collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("size,bands,condition,rmse,rrmse\n");
        for r in &self.rows {
            let bands: Vec<String> = r.bands_nm.iter().map(|b| fmt_value(*b)).collect();
            let rrmse = r.rrmse.map_or(String::new(), fmt_value);
            out.push_str(&format!("{},{},{},{},{}\n", r.bands_nm.len(), bands.join(";"), r.condition, fmt_value(r.rmse), rrmse));
        }
        out
    }
}

/// Band-averaged RMSE/rRMSE of predictions against a set's truth.
pub fn band_averaged_accuracy(predictions: &[Prediction], set: &TrainingSet) -> Result<(f64, Option<f64>)> {
    let n_bands = set.msi_band_count()?;
    let mut rmse_sum = 0.0;
    let mut rrmse_sum = Some(0.0);
    let mut count = 0;
    for b in 0..n_bands {
        let (pred, truth): (Vec<f64>, Vec<f64>) = predictions
            .iter()
            .zip(&set.pairs)
            .filter_map(|(p, s)| p.reflectance[b].map(|v| (v, s.observation.truth_reflectance[b])))
            .unzip();
        if pred.is_empty() {
            continue;
        }
        let acc = evaluate::rmse_rrmse(&pred, &truth)?;
        rmse_sum += acc.rmse;
        rrmse_sum = rrmse_sum.zip(acc.rrmse).map(|(a, b)| a + b);
        count += 1;
    }
    if count == 0 {
        return Err(Error::TooFewValues { needed: 1, got: 0 });
    }
    Ok((rmse_sum / count as f64, rrmse_sum.map(|s| s / count as f64)))
}

/// Every non-empty subset of `candidates`, in lexicographic-by-mask order.
pub fn all_subsets(candidates: &[f64]) -> Vec<Vec<f64>> {
    (1u32..(1 << candidates.len()))
        .map(|mask| candidates.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, c)| *c).collect())
        .collect()
}

/// Fit an MLR for every subset of `candidates` on `train` and score it on
/// `test`, overall and per condition tag.
pub fn search_band_subsets(
    train: &TrainingSet,
    test: &TrainingSet,
    msi_bands: &[BandDef],
    candidates_nm: &[f64],
    bandwidth_nm: f64,
) -> Result<BandSearchTable> {
    if candidates_nm.is_empty() || candidates_nm.len() > MAX_SEARCH_CANDIDATES {
        return Err(Error::InvalidParameter(format!("{} candidates, need 1..={MAX_SEARCH_CANDIDATES}", candidates_nm.len())));
    }
    let subsets = all_subsets(candidates_nm);
    let mut groups: Vec<(String, TrainingSet)> = vec![(ALL_CONDITIONS.to_string(), test.clone())];
    groups.extend(test.conditions().into_iter().map(|c| {
        let s = test.with_condition(&c);
        (c, s)
    }));
    let scored = par::map_slice(&subsets, |subset| -> std::result::Result<Vec<SubsetScore>, SubsetFailure> {
        let fail = |e: Error| SubsetFailure { bands_nm: subset.clone(), error: e.to_string() };
        let model = fit_mlr(train, msi_bands, subset, bandwidth_nm).map_err(fail)?;
        groups
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(cond, s)| {
                let preds = predict_set(&model, s).map_err(fail)?;
                let (rmse, rrmse) = band_averaged_accuracy(&preds, s).map_err(fail)?;
                Ok(SubsetScore { bands_nm: subset.clone(), condition: cond.clone(), rmse, rrmse })
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for s in scored {
        match s {
            Ok(r) => rows.extend(r),
            Err(f) => failures.push(f),
        }
    }
    rows.sort_by(|a, b| {
        a.bands_nm
            .len()
            .cmp(&b.bands_nm.len())
            .then_with(|| a.condition.cmp(&b.condition))
            .then_with(|| a.rmse.total_cmp(&b.rmse))
    });
    Ok(BandSearchTable { candidates_nm: candidates_nm.to_vec(), bandwidth_nm, subsets_evaluated: subsets.len(), rows, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 5, 8, 2, 0, 0).unwrap()
    }

    fn grid() -> WavelengthGrid {
        WavelengthGrid::regular(632.0, 932.0, 6.0).unwrap()
    }

    fn spectrum_at(t: DateTime<Utc>, dn: Vec<f64>) -> Spectrum {
        let n = dn.len();
        let g = WavelengthGrid::regular(632.0, 632.0 + 6.0 * (n - 1) as f64, 6.0).unwrap();
        Spectrum::new(g, dn, t, 100.0).unwrap()
    }

    fn obs(t: DateTime<Utc>, dn: Vec<f64>, truth: Vec<f64>) -> PanelObservation {
        PanelObservation::new("RP", t, dn, truth, "sunny").unwrap()
    }

    /// Independent Jacobi eigensolver for symmetric matrices.
    pub(crate) fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k][p], a[k][q]);
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p][k], a[q][k]);
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let (vp, vq) = (row[p], row[q]);
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&x, &y| a[y][y].total_cmp(&a[x][x]));
        (idx.iter().map(|&i| a[i][i]).collect(), idx.iter().map(|&i| orient((0..n).map(|k| v[k][i]).collect())).collect())
    }

    /// Correlation matrix by direct summation.
    pub(crate) fn correlation(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = rows.len() as f64;
        let p = rows[0].len();
        let mean: Vec<f64> = (0..p).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let sd: Vec<f64> = (0..p).map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()).collect();
        (0..p)
            .map(|a| {
                (0..p)
                    .map(|b| rows.iter().map(|r| (r[a] - mean[a]) / sd[a] * (r[b] - mean[b]) / sd[b]).sum::<f64>() / (n - 1.0))
                    .collect()
            })
            .collect()
    }

    pub(crate) fn lcg_matrix(seed: u64, n: usize, p: usize) -> Vec<Vec<f64>> {
        let mut s = seed.wrapping_add(0x1234_5678);
        (0..n)
            .map(|_| {
                (0..p)
                    .map(|_| {
                        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        (s >> 11) as f64 / (1u64 << 53) as f64
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn pairing_examples() {
        let t = t0();
        let o = obs(t + Duration::seconds(10), vec![1.0], vec![0.1]);
        let s = vec![
            spectrum_at(t + Duration::milliseconds(9600), vec![1.0]),
            spectrum_at(t + Duration::milliseconds(10400), vec![2.0]),
        ];
        let (set, un) = pair_observations(std::slice::from_ref(&o), &s, 1.5).unwrap();
        assert!(un.is_empty());
        assert_eq!(set.pairs[0].spectrum.dn, vec![1.0]);

        let far = vec![spectrum_at(t + Duration::seconds(12), vec![1.0])];
        let (set, un) = pair_observations(&[o], &far, 1.5).unwrap();
        assert!(set.is_empty());
        assert_eq!(un[0].nearest_gap_s, Some(2.0));
    }

    #[test]
    fn dense_pairing_matches_exhaustive_oracle() {
        let t = t0();
        let spectra: Vec<Spectrum> = (0..600).map(|k| spectrum_at(t + Duration::milliseconds(1000 * k + 250), vec![k as f64 + 1.0])).collect();
        let frames: Vec<PanelObservation> = (0..20).map(|k| obs(t + Duration::seconds(30 * k), vec![1.0], vec![0.1])).collect();
        let (set, un) = pair_observations(&frames, &spectra, 1.5).unwrap();
        assert!(un.is_empty());
        for p in &set.pairs {
            let best = spectra
                .iter()
                .map(|s| (p.observation.timestamp - s.timestamp).num_milliseconds().abs())
                .min()
                .unwrap();
            assert_eq!((p.observation.timestamp - p.spectrum.timestamp).num_milliseconds().abs(), best);
            assert!(p.gap_s() <= 0.5);
        }
    }

    #[test]
    fn unsorted_inputs_rejected() {
        let t = t0();
        let s = vec![spectrum_at(t + Duration::seconds(2), vec![1.0]), spectrum_at(t, vec![1.0])];
        assert_eq!(pair_observations(&[], &s, 1.5).unwrap_err(), Error::NonMonotonicTimestamps(1));
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(compute_ratio(10.0, &[100.0; 3]).unwrap(), vec![0.1; 3]);
        assert_eq!(compute_ratio(0.0, &[100.0; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(compute_ratio(1.0, &[1.0, 0.0]), Err(Error::NonPositiveReference(1)));
    }

    #[test]
    fn integration_examples() {
        let g = grid();
        assert!((integrate_band(&vec![2.0; g.len()], &g, 722.0, 30.0).unwrap() - 60.0).abs() < 1e-12);
        assert!((integrate_band(&vec![2.0; g.len()], &g, 773.0, 30.0).unwrap() - 60.0).abs() < 1e-12);
        assert_eq!(integrate_band(&vec![0.0; g.len()], &g, 800.0, 30.0).unwrap(), 0.0);
        // ramp r = 0.01 * wl; closed form over [785, 815]
        let ramp: Vec<f64> = g.centers().iter().map(|w| 0.01 * w).collect();
        let exact = 0.005 * (815.0f64.powi(2) - 785.0f64.powi(2));
        assert!((integrate_band(&ramp, &g, 800.0, 30.0).unwrap() - exact).abs() <= 0.01 * 815.0 * 6.0);
        assert!(matches!(integrate_band(&vec![1.0; g.len()], &g, 1000.0, 30.0), Err(Error::WindowEmpty { .. })));
        // 915 nm fits inside the extended working range
        assert!((integrate_band(&vec![1.0; g.len()], &g, 915.0, 30.0).unwrap() - 30.0).abs() < 1e-12);
    }

    #[test]
    fn elm_examples() {
        let bands = vec![BandDef { center_nm: 700.0, fwhm_nm: 10.0 }];
        let refs = vec![obs(t0(), vec![100.0], vec![0.1]), obs(t0(), vec![900.0], vec![0.9])];
        let m = fit_elm(&refs, &bands).unwrap();
        let BandModel::Linear { slope, intercept } = m.bands[0].clone().unwrap() else { panic!() };
        assert!((slope - 0.001).abs() < 1e-15 && intercept.abs() < 1e-13);
        let p = predict_reflectance(&m, &[500.0], None).unwrap();
        assert!((p.reflectance[0].unwrap() - 0.5).abs() < 1e-12);
        let dup = vec![obs(t0(), vec![300.0], vec![0.3]), obs(t0(), vec![300.0], vec![0.3])];
        assert!(matches!(fit_elm(&dup, &bands), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn elm_references_are_seeded_and_windowed() {
        let t = t0();
        let all: Vec<PanelObservation> = (0..61).map(|k| obs(t + Duration::seconds(30 * k), vec![k as f64], vec![0.1])).collect();
        let frames = group_frames(&all);
        let target = t + Duration::seconds(900);
        let p = ElmProtocol { window_s: 900.0, seed: 4 };
        let a = p.references(&frames, target).unwrap();
        assert_eq!(a, p.references(&frames, target).unwrap());
        assert_eq!(a.len(), 2);
        assert!(a[0].timestamp < target && a[1].timestamp > target);
        assert!(a.iter().all(|o| (o.timestamp - target).num_seconds().abs() <= 900));
        let lonely = group_frames(&all[..1]);
        assert!(matches!(p.references(&lonely, t), Err(Error::NoReferenceFrame { .. })));
    }

    fn synthetic_set(n: usize, bands: &[BandDef], tilt: f64) -> TrainingSet {
        let g = grid();
        let pairs = (0..n)
            .map(|i| {
                let t = t0() + Duration::seconds(30 * i as i64);
                let level = 1.0 + 0.4 * ((i as f64) * 0.37).sin();
                let slope = tilt * ((i as f64) * 0.91).cos();
                let irr: Vec<f64> = g.centers().iter().map(|w| 1000.0 * level * (1.0 + slope * (w - 780.0) / 150.0)).collect();
                let r = [0.084, 0.170, 0.316, 0.513, 0.730][i % 5];
                let dn: Vec<f64> = bands
                    .iter()
                    .map(|b| {
                        let m = match_nearest_band(b.center_nm, &g);
                        2.0 * irr[m.index] * r
                    })
                    .collect();
                TrainingPair { observation: obs(t, dn, vec![r; bands.len()]), spectrum: Spectrum::new(g.clone(), irr, t, 100.0).unwrap() }
            })
            .collect();
        TrainingSet::new(pairs, 1.5).unwrap()
    }

    fn rmse_of(model: &ReflectanceModel, set: &TrainingSet) -> f64 {
        band_averaged_accuracy(&predict_set(model, set).unwrap(), set).unwrap().0
    }

    #[test]
    fn direct_excludes_three_uncovered_bands() {
        let bands = crate::spectral::default_msi_bands();
        let set = synthetic_set(30, &bands, 0.2);
        let m = fit_direct(&set, &bands, DEFAULT_COVERAGE_NM).unwrap();
        assert_eq!(m.excluded_bands, vec![0, 1, 2]);
        assert!(rmse_of(&m, &set) < 1e-3);
    }

    #[test]
    fn direct_exact_line() {
        let bands = vec![BandDef { center_nm: 632.0, fwhm_nm: 10.0 }];
        let mk = |dn: f64, r: f64, k: i64| {
            let t = t0() + Duration::seconds(k);
            TrainingPair { observation: obs(t, vec![dn], vec![r]), spectrum: spectrum_at(t, vec![100.0, 100.0]) }
        };
        let set = TrainingSet::new(vec![mk(10.0, 0.2, 0), mk(30.0, 0.6, 1)], 1.5).unwrap();
        let m = fit_direct(&set, &bands, 10.0).unwrap();
        let Some(BandModel::Ratio { slope, intercept, .. }) = m.bands[0] else { panic!() };
        assert!((slope - 2.0).abs() < 1e-12 && intercept.abs() < 1e-12);
    }

    #[test]
    fn dls_matches_direct_under_flat_illumination() {
        let bands = crate::spectral::default_msi_bands()[3..].to_vec();
        let set = synthetic_set(30, &bands, 0.0);
        let direct = fit_direct(&set, &bands, 10.0).unwrap();
        let dls = fit_dls(&set, &bands).unwrap();
        for p in &set.pairs {
            let a = predict_reflectance(&direct, &p.observation.mean_dn, Some(&p.spectrum)).unwrap();
            let b = predict_reflectance(&dls, &p.observation.mean_dn, Some(&p.spectrum)).unwrap();
            for (x, y) in a.reflectance.iter().zip(&b.reflectance) {
                assert!((x.unwrap() - y.unwrap()).abs() < 1e-9);
            }
        }
        let tilted = synthetic_set(30, &bands, 0.3);
        assert!(rmse_of(&fit_dls(&tilted, &bands).unwrap(), &tilted) > rmse_of(&fit_direct(&tilted, &bands, 10.0).unwrap(), &tilted));
    }

    #[test]
    fn dls_divisor_is_sum() {
        assert_eq!(broadband(&[1.0, 2.0, 3.0]), 6.0);
    }

    #[test]
    fn pca_rank_one() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let p = pca_fit(&rows).unwrap();
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p.loadings[0][0] - h).abs() < 1e-12 && (p.loadings[0][1] - h).abs() < 1e-12);
        assert_eq!(p.rank(), 1);
    }

    #[test]
    fn pca_matches_jacobi_oracle() {
        for seed in 0..5 {
            let rows = lcg_matrix(seed, 10, 5);
            let p = pca_fit(&rows).unwrap();
            let (vals, vecs) = jacobi_eigen(correlation(&rows));
            for k in 0..5 {
                assert!((p.eigenvalues[k] - vals[k]).abs() < 1e-8);
                for j in 0..5 {
                    assert!((p.loadings[k][j] - vecs[k][j]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn pca_drops_constant_columns() {
        let mut rows = lcg_matrix(3, 12, 4);
        rows.iter_mut().for_each(|r| r[2] = 5.0);
        let p = pca_fit(&rows).unwrap();
        assert_eq!(p.dropped_columns, vec![2]);
        assert!((p.eigenvalues.iter().sum::<f64>() - 3.0).abs() < 1e-10);
        let constant = vec![vec![1.0, 2.0]; 5];
        assert_eq!(pca_fit(&constant), Err(Error::AllColumnsConstant));
    }

    #[test]
    fn candidate_selection() {
        // columns every 5 nm; narrow features on six wavelengths, one per component
        let wl: Vec<f64> = (0..61).map(|i| 620.0 + 5.0 * i as f64).collect();
        let injected = [720.0, 775.0, 800.0, 820.0, 875.0, 915.0];
        let rows: Vec<Vec<f64>> = lcg_matrix(11, 80, 7)
            .iter()
            .map(|z| {
                wl.iter()
                    .map(|w| {
                        let mut v = 1.0 + 0.5 * z[0];
                        for (f, c) in injected.iter().enumerate() {
                            v += 0.3 * (z[f + 1] - 0.5) * (-((w - c) / 2.0).powi(2)).exp();
                        }
                        v
                    })
                    .collect()
            })
            .collect();
        let p = pca_fit(&rows).unwrap();
        assert_eq!(select_candidate_bands(&p, &wl, 1..7, 1), injected.to_vec());
        // rank-1 data: only PC1
        let flat: Vec<Vec<f64>> = (0..10).map(|i| wl.iter().enumerate().map(|(j, _)| (i + 1) as f64 * (1.0 + j as f64)).collect()).collect();
        let p1 = pca_fit(&flat).unwrap();
        assert_eq!(select_candidate_bands(&p1, &wl, 0..6, 1).len(), 1);
        // duplicate winners collapse
        assert_eq!(select_candidate_bands(&p, &wl, 1..2, 1), select_candidate_bands(&p, &wl, 1..2, 1));
    }

    #[test]
    fn pcr_and_mlr_round_trip() {
        let bands = crate::spectral::default_msi_bands();
        let set = synthetic_set(40, &bands, 0.3);
        let pcr = fit_pcr(&set, &bands, 4).unwrap();
        let mlr = fit_mlr(&set, &bands, &MLR_BANDS_NM, 30.0).unwrap();
        assert!(rmse_of(&pcr, &set) < 1e-3);
        assert!(rmse_of(&mlr, &set) < 1e-3);
        assert!(matches!(fit_pcr(&set, &bands, 60), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn pcr_in_sample_prediction_is_exact() {
        let bands = crate::spectral::default_msi_bands()[10..12].to_vec();
        let set = synthetic_set(25, &bands, 0.3);
        let model = fit_pcr(&set, &bands, 2).unwrap();
        let Some(BandModel::Pcr { pca, k, weights, intercept }) = model.bands[0].clone() else { panic!() };
        let rows: Vec<Vec<f64>> = set.pairs.iter().map(|p| compute_ratio(p.observation.mean_dn[0], &p.spectrum.dn).unwrap()).collect();
        let scores: Vec<Vec<f64>> = rows.iter().map(|r| pca.scores(r, k)).collect();
        let cols: Vec<Vec<f64>> = (0..k).map(|j| scores.iter().map(|s| s[j]).collect()).collect();
        let fit = linalg::ols(&cols, &set.truth(0)).unwrap();
        assert_eq!((fit.weights.clone(), fit.intercept), (weights, intercept));
        for (p, f) in set.pairs.iter().zip(&fit.fitted) {
            let pred = predict_reflectance(&model, &p.observation.mean_dn, Some(&p.spectrum)).unwrap();
            assert_eq!(pred.reflectance[0].unwrap(), *f);
        }
    }

    #[test]
    fn pcr_residual_non_increasing_in_k() {
        let bands = vec![BandDef { center_nm: 722.0, fwhm_nm: 12.0 }];
        let mut set = synthetic_set(40, &bands, 0.3);
        // perturb truth so residuals are non-zero
        set.pairs.iter_mut().enumerate().for_each(|(i, p)| p.observation.truth_reflectance[0] += 0.01 * ((i * 7 % 5) as f64 - 2.0));
        let mut prev = f64::INFINITY;
        for k in 1..=4 {
            let r = rmse_of(&fit_pcr(&set, &bands, k).unwrap(), &set);
            assert!(r <= prev + 1e-12);
            prev = r;
        }
    }

    #[test]
    fn mlr_matches_normal_equations() {
        let bands = vec![BandDef { center_nm: 760.0, fwhm_nm: 12.0 }];
        let mut set = synthetic_set(30, &bands, 0.3);
        set.pairs.iter_mut().enumerate().for_each(|(i, p)| p.observation.truth_reflectance[0] += 0.002 * ((i * 3 % 7) as f64 - 3.0));
        let m = fit_mlr(&set, &bands, &[722.0, 800.0], 30.0).unwrap();
        let Some(BandModel::Mlr { weights, intercept }) = m.bands[0].clone() else { panic!() };
        let g = grid();
        let x: Vec<Vec<f64>> = set.pairs.iter().map(|p| mlr_features(p.observation.mean_dn[0], &p.spectrum, &g, &[722.0, 800.0], 30.0).unwrap()).collect();
        // normal equations with Cramer's rule on the 3x3 system
        let n = x.len() as f64;
        let y = set.truth(0);
        let s = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).sum::<f64>();
        let m3 = [
            [n, s(&|i| x[i][0]), s(&|i| x[i][1])],
            [s(&|i| x[i][0]), s(&|i| x[i][0] * x[i][0]), s(&|i| x[i][0] * x[i][1])],
            [s(&|i| x[i][1]), s(&|i| x[i][0] * x[i][1]), s(&|i| x[i][1] * x[i][1])],
        ];
        let rhs = [s(&|i| y[i]), s(&|i| x[i][0] * y[i]), s(&|i| x[i][1] * y[i])];
        let det = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(m3);
        let solve = |c: usize| {
            let mut mm = m3;
            for r in 0..3 {
                mm[r][c] = rhs[r];
            }
            det(mm) / d
        };
        let oracle = [solve(0), solve(1), solve(2)];
        let scale = oracle.iter().map(|v| v.abs()).fold(1.0, f64::max);
        assert!((intercept - oracle[0]).abs() < 1e-9 * scale);
        assert!((weights[0] - oracle[1]).abs() < 1e-9 * scale);
        assert!((weights[1] - oracle[2]).abs() < 1e-9 * scale);
    }

    #[test]
    fn prediction_errors() {
        let bands = crate::spectral::default_msi_bands();
        let set = synthetic_set(20, &bands, 0.1);
        let m = fit_dls(&set, &bands).unwrap();
        let p = &set.pairs[0];
        assert_eq!(predict_reflectance(&m, &p.observation.mean_dn, None), Err(Error::MissingReference));
        assert!(matches!(predict_reflectance(&m, &p.observation.mean_dn[..3], Some(&p.spectrum)), Err(Error::BandMismatch(_))));
    }

    #[test]
    fn subset_search_counts_and_nesting() {
        let bands = vec![BandDef { center_nm: 760.0, fwhm_nm: 12.0 }];
        let mut set = synthetic_set(60, &bands, 0.3);
        set.pairs.iter_mut().enumerate().for_each(|(i, p)| p.observation.truth_reflectance[0] += 0.003 * ((i * 5 % 9) as f64 - 4.0));
        let cands = [722.0, 773.0, 800.0, 822.0, 874.0, 915.0];
        let table = search_band_subsets(&set, &set, &bands, &cands, 30.0).unwrap();
        assert_eq!(table.subsets_evaluated, 63);
        assert_eq!(all_subsets(&cands).len(), 63);
        // in-sample: the full set is at least as good as any proper subset
        let full = table.rows.iter().find(|r| r.bands_nm.len() == 6 && r.condition == ALL_CONDITIONS).unwrap();
        let ok = table.rows.iter().filter(|r| r.condition == ALL_CONDITIONS).all(|r| full.rmse <= r.rmse + 1e-12);
        assert!(ok || !table.failures.is_empty());
        assert!(table.to_csv().starts_with("size,bands,condition,rmse,rrmse\n"));
    }

    #[test]
    fn elm_is_not_illumination_invariant() {
        let bands = vec![BandDef { center_nm: 700.0, fwhm_nm: 10.0 }];
        let refs = vec![obs(t0(), vec![100.0], vec![0.1]), obs(t0(), vec![900.0], vec![0.9])];
        let m = fit_elm(&refs, &bands).unwrap();
        let a = predict_reflectance(&m, &[500.0], None).unwrap().reflectance[0].unwrap();
        let b = predict_reflectance(&m, &[1000.0], None).unwrap().reflectance[0].unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    fn scale_fixture() -> &'static (TrainingSet, Vec<ReflectanceModel>) {
        static FIXTURE: std::sync::OnceLock<(TrainingSet, Vec<ReflectanceModel>)> = std::sync::OnceLock::new();
        FIXTURE.get_or_init(|| {
            let bands = crate::spectral::default_msi_bands();
            let set = synthetic_set(30, &bands, 0.3);
            let models = vec![
                fit_direct(&set, &bands, 10.0).unwrap(),
                fit_dls(&set, &bands).unwrap(),
                fit_pcr(&set, &bands, 3).unwrap(),
                fit_mlr(&set, &bands, &MLR_BANDS_NM, 30.0).unwrap(),
            ];
            (set, models)
        })
    }

    proptest! {
        #[test]
        fn ratio_models_scale_invariant(scale in 0.01f64..100.0, idx in 0usize..30) {
            let (set, models) = scale_fixture();
            let p = &set.pairs[idx];
            let dn: Vec<f64> = p.observation.mean_dn.iter().map(|v| v * scale).collect();
            let mut s = p.spectrum.clone();
            s.dn.iter_mut().for_each(|v| *v *= scale);
            for m in models {
                let a = predict_reflectance(m, &p.observation.mean_dn, Some(&p.spectrum)).unwrap();
                let b = predict_reflectance(m, &dn, Some(&s)).unwrap();
                for (x, y) in a.reflectance.iter().zip(&b.reflectance) {
                    if let (Some(x), Some(y)) = (x, y) {
                        prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{} {} vs {}", m.kind.label(), x, y);
                    }
                }
            }
        }

        #[test]
        fn pca_loadings_orthonormal(seed in 0u64..500) {
            let p = pca_fit(&lcg_matrix(seed, 15, 6)).unwrap();
            for a in 0..6 {
                for b in 0..6 {
                    let d: f64 = p.loadings[a].iter().zip(&p.loadings[b]).map(|(x, y)| x * y).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    prop_assert!((d - want).abs() < 1e-10);
                }
            }
            prop_assert!((p.eigenvalues.iter().sum::<f64>() - 6.0).abs() < 1e-10);
        }
    }
}
