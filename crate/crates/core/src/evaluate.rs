//! Accuracy and consistency metrics, vegetation indices, the train/test
//! split and model-comparison reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_value;
use crate::models::Prediction;
use crate::spectral::{BandDef, ImageCube, PanelObservation};

/// Truth means below this magnitude make rRMSE undefined.
pub const ZERO_MEAN_TOL: f64 = 1e-9;
pub const DEFAULT_RED_NM: f64 = 679.0;
pub const DEFAULT_NIR_NM: f64 = 796.0;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
/// Name of the shuffle used by [`split_train_test`]; recorded in reports.
pub const SHUFFLE_ALGORITHM: &str = "splitmix64-fisher-yates-v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub rmse: f64,
    /// `None` when the truth mean is (near) zero.
    pub rrmse: Option<f64>,
}

impl Accuracy {
    pub fn rrmse(&self) -> Result<f64> {
        self.rrmse.ok_or(Error::ZeroTruthMean)
    }
}

/// `rmse = sqrt(mean((p - t)^2))`, `rrmse = rmse / mean(t)`.
pub fn rmse_rrmse(predicted: &[f64], truth: &[f64]) -> Result<Accuracy> {
    if predicted.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} truth values", predicted.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::TooFewValues { needed: 1, got: 0 });
    }
    let n = truth.len() as f64;
    let mse = predicted.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let rmse = mse.sqrt();
    let mean = truth.iter().sum::<f64>() / n;
    let rrmse = (mean.abs() >= ZERO_MEAN_TOL).then(|| rmse / mean);
    Ok(Accuracy { rmse, rrmse })
}

/// Sample standard deviation (n - 1) over the mean.
pub fn cv(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: values.len() });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::ZeroMean);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(var.sqrt() / mean)
}

/// `(ndvi, dvi)`; NDVI is `None` when `nir + red == 0`.
pub fn vegetation_indices(nir: f64, red: f64) -> (Option<f64>, f64) {
    let sum = nir + red;
    let ndvi = (sum != 0.0).then(|| (nir - red) / sum);
    (ndvi, nir - red)
}

fn nearest_band(bands: &[BandDef], nm: f64) -> Result<usize> {
    bands
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1.center_nm - nm).abs().total_cmp(&(b.1.center_nm - nm).abs()))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::BandMismatch("no MSI bands".into()))
}

/// Indices of the MSI bands nearest to the red and NIR wavelengths.
pub fn index_bands(bands: &[BandDef], red_nm: f64, nir_nm: f64) -> Result<(usize, usize)> {
    Ok((nearest_band(bands, red_nm)?, nearest_band(bands, nir_nm)?))
}

/// NDVI and DVI per pixel of a reflectance cube. Undefined NDVI pixels are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexMaps {
    pub rows: usize,
    pub cols: usize,
    pub ndvi: Vec<f64>,
    pub dvi: Vec<f64>,
    pub undefined_ndvi: usize,
}

pub fn index_maps(cube: &ImageCube, red_nm: f64, nir_nm: f64) -> Result<IndexMaps> {
    let (r, n) = index_bands(&cube.bands, red_nm, nir_nm)?;
    let (red, nir) = (cube.plane(r), cube.plane(n));
    let mut undefined_ndvi = 0;
    let mut ndvi = Vec::with_capacity(red.len());
    let mut dvi = Vec::with_capacity(red.len());
    for (a, b) in nir.iter().zip(red) {
        let (nd, d) = vegetation_indices(*a, *b);
        if nd.is_none() {
            undefined_ndvi += 1;
        }
        ndvi.push(nd.unwrap_or(f64::NAN));
        dvi.push(d);
    }
    Ok(IndexMaps { rows: cube.rows, cols: cube.cols, ndvi, dvi, undefined_ndvi })
}

/// SplitMix64 step.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform integer in `0..bound` by rejection, so the shuffle is unbiased.
fn below(state: &mut u64, bound: u64) -> u64 {
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let v = splitmix64(state);
        if v < zone {
            return v % bound;
        }
    }
}

/// Shuffled index order under `seed`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut state = seed;
    for i in (1..n).rev() {
        let j = below(&mut state, i as u64 + 1) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Train/test index lists: shuffle, then the first `floor(n * fraction)` train.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("train fraction {fraction} not in (0, 1)")));
    }
    let idx = shuffled_indices(n, seed);
    let cut = (n as f64 * fraction).floor() as usize;
    let (a, b) = idx.split_at(cut);
    Ok((a.to_vec(), b.to_vec()))
}

pub fn split_train_test<T: Clone>(samples: &[T], fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    let (a, b) = split_indices(samples.len(), fraction, seed)?;
    Ok((a.iter().map(|&i| samples[i].clone()).collect(), b.iter().map(|&i| samples[i].clone()).collect()))
}

/// One model's predictions on a test set, aligned with the test observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelResult {
    pub label: String,
    /// `None` where prediction failed for that observation.
    pub predictions: Vec<Option<Prediction>>,
    pub excluded_bands: Vec<usize>,
    pub annotations: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandGroup {
    All,
    InDs,
    OutOfDs,
}

impl BandGroup {
    pub fn label(self) -> &'static str {
        match self {
            BandGroup::All => "all",
            BandGroup::InDs => "in_ds",
            BandGroup::OutOfDs => "out_of_ds",
        }
    }
}

/// One report cell. `band_nm` is set on per-band rows; group rows average
/// the per-band metrics of their bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub condition: String,
    pub group: BandGroup,
    pub band_nm: Option<f64>,
    pub n: usize,
    pub rmse: f64,
    pub rrmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFlags {
    pub model: String,
    pub negative_predictions: usize,
    pub failed_predictions: usize,
    pub excluded_bands: Vec<usize>,
    pub annotations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub flags: Vec<ModelFlags>,
    pub shuffle_algorithm: String,
}

pub const ALL_CONDITIONS: &str = "all";

/// Per model x condition x band group accuracy, plus per-band rows.
/// `in_ds[b]` says whether MSI band `b` lies inside the DS wavelength range.
pub fn compare_models(results: &[ModelResult], test: &[PanelObservation], msi_bands: &[BandDef], in_ds: &[bool]) -> Result<EvaluationReport> {
    if in_ds.len() != msi_bands.len() {
        return Err(Error::BandMismatch("in-range flags do not match the band list".into()));
    }
    let mut conditions: Vec<String> = test.iter().map(|o| o.condition.clone()).collect();
    conditions.sort();
    conditions.dedup();
    conditions.insert(0, ALL_CONDITIONS.to_string());

    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for r in results {
        if r.predictions.len() != test.len() {
            return Err(Error::ShapeMismatch(format!("{}: {} predictions for {} observations", r.label, r.predictions.len(), test.len())));
        }
        flags.push(ModelFlags {
            model: r.label.clone(),
            negative_predictions: r.predictions.iter().flatten().map(|p| p.negative).sum(),
            failed_predictions: r.predictions.iter().filter(|p| p.is_none()).count(),
            excluded_bands: r.excluded_bands.clone(),
            annotations: r.annotations.clone(),
        });
        for cond in &conditions {
            let keep = |o: &PanelObservation| cond == ALL_CONDITIONS || &o.condition == cond;
            let mut per_band: Vec<Option<ReportRow>> = Vec::with_capacity(msi_bands.len());
            for (b, def) in msi_bands.iter().enumerate() {
                let (p, t): (Vec<f64>, Vec<f64>) = r
                    .predictions
                    .iter()
                    .zip(test)
                    .filter(|(_, o)| keep(o))
                    .filter_map(|(p, o)| p.as_ref().and_then(|p| p.reflectance[b]).map(|v| (v, o.truth_reflectance[b])))
                    .unzip();
                per_band.push(if p.is_empty() {
                    None
                } else {
                    let acc = rmse_rrmse(&p, &t)?;
                    Some(ReportRow {
                        model: r.label.clone(),
                        condition: cond.clone(),
                        group: if in_ds[b] { BandGroup::InDs } else { BandGroup::OutOfDs },
                        band_nm: Some(def.center_nm),
                        n: p.len(),
                        rmse: acc.rmse,
                        rrmse: acc.rrmse,
                    })
                });
            }
            for group in [BandGroup::All, BandGroup::InDs, BandGroup::OutOfDs] {
                let members: Vec<&ReportRow> = per_band.iter().flatten().filter(|row| group == BandGroup::All || row.group == group).collect();
                if members.is_empty() {
                    continue;
                }
                let k = members.len() as f64;
                let rrmse = members.iter().map(|m| m.rrmse).sum::<Option<f64>>().map(|s| s / k);
                rows.push(ReportRow {
                    model: r.label.clone(),
                    condition: cond.clone(),
                    group,
                    band_nm: None,
                    n: members.iter().map(|m| m.n).sum(),
                    rmse: members.iter().map(|m| m.rmse).sum::<f64>() / k,
                    rrmse,
                });
            }
            rows.extend(per_band.into_iter().flatten());
        }
    }
    Ok(EvaluationReport { rows, flags, shuffle_algorithm: SHUFFLE_ALGORITHM.to_string() })
}

fn scale(v: f64, percent: bool) -> f64 {
    if percent { v * 100.0 } else { v }
}

impl EvaluationReport {
    /// Band-averaged row for one model, condition and group.
    pub fn summary(&self, model: &str, condition: &str, group: BandGroup) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.model == model && r.condition == condition && r.group == group && r.band_nm.is_none())
    }

    /// Long-format CSV, one row per model x condition x group/band.
    /// Report rows with metrics as fractions.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,condition,group,band_nm,n,rmse,rrmse\n");
        for r in &self.rows {
            let band = r.band_nm.map_or(String::new(), fmt_value);
            let rrmse = r.rrmse.map_or(String::new(), fmt_value);
            let _ = writeln!(out, "{},{},{},{},{},{},{}", r.model, r.condition, r.group.label(), band, r.n, fmt_value(r.rmse), rrmse);
        }
        out
    }

    pub fn to_text(&self, percent: bool) -> String {
        let unit = if percent { "%" } else { "" };
        let mut out = format!("split: {}\n", self.shuffle_algorithm);
        for r in self.rows.iter().filter(|r| r.band_nm.is_none()) {
            let rrmse = r.rrmse.map_or("undefined".to_string(), |v| format!("{:.4}{unit}", scale(v, percent)));
            let _ = writeln!(
                out,
                "{:<10} {:<12} {:<10} n={:<6} rmse={:.4}{unit} rrmse={}",
                r.model,
                r.condition,
                r.group.label(),
                r.n,
                scale(r.rmse, percent),
                rrmse
            );
        }
        for f in &self.flags {
            let _ = writeln!(
                out,
                "{}: negative={} failed={} excluded_bands={:?}",
                f.model, f.negative_predictions, f.failed_predictions, f.excluded_bands
            );
            for a in &f.annotations {
                let _ = writeln!(out, "  note: {a}");
            }
        }
        out
    }
}

/// CVs along a strip of homogeneous positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripConsistency {
    pub band_cv: Vec<f64>,
    /// Mean of `band_cv` over every band.
    pub mean_band_cv: f64,
    pub ndvi_cv: f64,
    pub dvi_cv: f64,
}

/// Per-band CV of positional means, plus CVs of the NDVI and DVI computed
/// from those means.
pub fn strip_consistency(position_means: &[Vec<f64>], bands: &[BandDef], red_nm: f64, nir_nm: f64) -> Result<StripConsistency> {
    if position_means.len() < 2 {
        return Err(Error::TooFewValues { needed: 2, got: position_means.len() });
    }
    if position_means.iter().any(|p| p.len() != bands.len()) {
        return Err(Error::BandMismatch("position means do not match the band list".into()));
    }
    let band_cv: Vec<f64> = (0..bands.len())
        .map(|b| cv(&position_means.iter().map(|p| p[b]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let (r, n) = index_bands(bands, red_nm, nir_nm)?;
    let mut ndvi = Vec::new();
    let mut dvi = Vec::new();
    for p in position_means {
        let (nd, d) = vegetation_indices(p[n], p[r]);
        ndvi.push(nd.ok_or(Error::ZeroMean)?);
        dvi.push(d);
    }
    Ok(StripConsistency {
        mean_band_cv: band_cv.iter().sum::<f64>() / band_cv.len() as f64,
        band_cv,
        ndvi_cv: cv(&ndvi)?,
        dvi_cv: cv(&dvi)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    #[test]
    fn rmse_examples() {
        let a = rmse_rrmse(&[0.1, 0.2], &[0.1, 0.2]).unwrap();
        assert_eq!((a.rmse, a.rrmse), (0.0, Some(0.0)));
        let a = rmse_rrmse(&[0.12, 0.18], &[0.10, 0.20]).unwrap();
        assert!((a.rmse - 0.02).abs() < 1e-12);
        assert!((a.rrmse.unwrap() - 0.02 / 0.15).abs() < 1e-12);
        let z = rmse_rrmse(&[0.1, -0.1], &[0.0, 0.0]).unwrap();
        assert!((z.rmse - 0.1).abs() < 1e-15);
        assert_eq!(z.rrmse(), Err(Error::ZeroTruthMean));
    }

    #[test]
    fn cv_examples() {
        assert_eq!(cv(&[3.0; 5]).unwrap(), 0.0);
        assert!((cv(&[2.0, 4.0, 6.0]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(cv(&[1.0]), Err(Error::TooFewValues { needed: 2, got: 1 }));
        assert_eq!(cv(&[1.0, -1.0]), Err(Error::ZeroMean));
    }

    #[test]
    fn index_examples() {
        let (nd, d) = vegetation_indices(0.5, 0.1);
        assert!((d - 0.4).abs() < 1e-15 && (nd.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(vegetation_indices(0.3, 0.3), (Some(0.0), 0.0));
        assert_eq!(vegetation_indices(0.0, 0.0).0, None);
    }

    #[test]
    fn index_cube_marks_undefined() {
        let bands = crate::spectral::default_msi_bands();
        let (r, n) = index_bands(&bands, 679.0, 796.0).unwrap();
        assert_eq!((bands[r].center_nm, bands[n].center_nm), (679.0, 796.0));
        let mut data = vec![0.2; bands.len() * 4];
        data[n * 4] = 0.6;
        data[r * 4 + 1] = 0.0;
        data[n * 4 + 1] = 0.0;
        let cube = ImageCube::new(bands, 2, 2, data, Utc.with_ymd_and_hms(2024, 5, 8, 4, 0, 0).unwrap(), 1.0, 1.0).unwrap();
        let m = index_maps(&cube, 679.0, 796.0).unwrap();
        assert!((m.ndvi[0] - 0.5).abs() < 1e-15);
        assert!(m.ndvi[1].is_nan());
        assert_eq!(m.undefined_ndvi, 1);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let items: Vec<usize> = (0..6510).collect();
        let (a, b) = split_train_test(&items, 0.8, 7).unwrap();
        assert_eq!((a.len(), b.len()), (5208, 1302));
        assert_eq!(split_train_test(&items, 0.8, 7).unwrap(), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort();
        assert_eq!(all, items);
        assert!(split_indices(10, 1.0, 0).is_err());
    }

    #[test]
    fn shuffle_is_pinned() {
        // bit-stability across platforms and crate versions
        assert_eq!(shuffled_indices(10, 42), shuffled_indices(10, 42));
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
    }

    fn obs(cond: &str, truth: f64) -> PanelObservation {
        PanelObservation::new("RP", Utc.with_ymd_and_hms(2024, 5, 8, 4, 0, 0).unwrap(), vec![1.0, 1.0], vec![truth, truth], cond).unwrap()
    }

    fn pred(v: [f64; 2]) -> Option<Prediction> {
        Some(Prediction { reflectance: vec![Some(v[0]), Some(v[1])], negative: v.iter().filter(|x| **x < 0.0).count() })
    }

    #[test]
    fn perfect_model_reports_zero() {
        let bands = vec![BandDef { center_nm: 610.0, fwhm_nm: 10.0 }, BandDef { center_nm: 700.0, fwhm_nm: 10.0 }];
        let test = vec![obs("sunny", 0.2), obs("cloudy", 0.5)];
        let r = ModelResult { label: "m".into(), predictions: vec![pred([0.2, 0.2]), pred([0.5, 0.5])], excluded_bands: vec![], annotations: vec![] };
        let rep = compare_models(&[r], &test, &bands, &[false, true]).unwrap();
        assert!(rep.rows.iter().all(|r| r.rmse == 0.0));
        assert!(rep.summary("m", "cloudy", BandGroup::InDs).is_some());
    }

    #[test]
    fn report_cells_match_recomputation() {
        let bands = vec![BandDef { center_nm: 610.0, fwhm_nm: 10.0 }, BandDef { center_nm: 700.0, fwhm_nm: 10.0 }];
        let test = vec![obs("sunny", 0.2), obs("sunny", 0.4), obs("cloudy", 0.5)];
        let preds = vec![pred([0.25, 0.2]), pred([0.4, 0.3]), pred([0.5, 0.6])];
        let r = ModelResult { label: "m".into(), predictions: preds, excluded_bands: vec![], annotations: vec![] };
        let rep = compare_models(&[r], &test, &bands, &[false, true]).unwrap();
        let sunny0 = rmse_rrmse(&[0.25, 0.4], &[0.2, 0.4]).unwrap().rmse;
        let sunny1 = rmse_rrmse(&[0.2, 0.3], &[0.2, 0.4]).unwrap().rmse;
        let all = rep.summary("m", "sunny", BandGroup::All).unwrap();
        assert!((all.rmse - (sunny0 + sunny1) / 2.0).abs() < 1e-15);
        assert_eq!(all.n, 4);
        assert!((rep.summary("m", "sunny", BandGroup::OutOfDs).unwrap().rmse - sunny0).abs() < 1e-15);
        let csv = rep.to_csv();
        assert!(csv.lines().count() == rep.rows.len() + 1);
        assert!(rep.to_text(false).contains("split: splitmix64-fisher-yates-v1"));
    }

    #[test]
    fn strip_examples() {
        let bands = crate::spectral::default_msi_bands();
        let uniform = vec![vec![0.3; bands.len()]; 5];
        let mut u = uniform.clone();
        let (_, n) = index_bands(&bands, 679.0, 796.0).unwrap();
        u.iter_mut().for_each(|p| p[n] = 0.6);
        let s = strip_consistency(&u, &bands, 679.0, 796.0).unwrap();
        assert!(s.band_cv.iter().all(|c| *c == 0.0) && s.ndvi_cv == 0.0 && s.dvi_cv == 0.0);
        assert!(strip_consistency(&uniform[..1], &bands, 679.0, 796.0).is_err());
        // CVs equal the definition applied to the positional means
        let ramp: Vec<Vec<f64>> = (0..6).map(|k| bands.iter().map(|b| 0.2 + 0.01 * k as f64 + b.center_nm * 1e-4).collect()).collect();
        let s = strip_consistency(&ramp, &bands, 679.0, 796.0).unwrap();
        assert_eq!(s.band_cv[4], cv(&ramp.iter().map(|p| p[4]).collect::<Vec<_>>()).unwrap());
    }

    proptest! {
        #[test]
        fn rmse_symmetric_and_permutation_invariant(v in prop::collection::vec((0.01f64..1.0, 0.01f64..1.0), 1..50), rot in 0usize..50) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.iter().copied().unzip();
            let a = rmse_rrmse(&p, &t).unwrap().rmse;
            prop_assert!((a - rmse_rrmse(&t, &p).unwrap().rmse).abs() < 1e-15);
            let k = rot % p.len();
            let mut p2 = p.clone(); p2.rotate_left(k);
            let mut t2 = t.clone(); t2.rotate_left(k);
            prop_assert!((a - rmse_rrmse(&p2, &t2).unwrap().rmse).abs() < 1e-12);
        }

        #[test]
        fn ndvi_bounded_and_scale_invariant(nir in 0.0f64..1.0, red in 0.0f64..1.0, k in 0.1f64..10.0) {
            prop_assume!(nir + red > 0.0);
            let (nd, d) = vegetation_indices(nir, red);
            let nd = nd.unwrap();
            prop_assert!((-1.0..=1.0).contains(&nd));
            let (nd2, d2) = vegetation_indices(k * nir, k * red);
            prop_assert!((nd2.unwrap() - nd).abs() < 1e-12);
            prop_assert!((d2 - k * d).abs() < 1e-12);
        }

        #[test]
        fn cv_scale_invariant(v in prop::collection::vec(0.1f64..10.0, 2..40), k in 0.01f64..100.0) {
            let s: Vec<f64> = v.iter().map(|x| x * k).collect();
            prop_assert!((cv(&v).unwrap() - cv(&s).unwrap()).abs() < 1e-10);
        }
    }
}
