//! Raw DN to normalized DN: dark current, exposure, vignetting, plus the
//! shadow-aware extraction of reference-panel DN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::spectral::{BandDef, ImageCube, Spectrum};

/// Imager frames are normalized to this exposure.
pub const MSI_STANDARD_EXPOSURE_MS: f64 = 1.0;
/// Spectrometer readings are normalized to this exposure.
pub const DS_STANDARD_EXPOSURE_MS: f64 = 100.0;
pub const DEFAULT_SEGMENT_WINDOW: usize = 15;
pub const DEFAULT_SEGMENT_RHO: f64 = 0.1;
pub const DEFAULT_OVEREXPOSURE_FRAC: f64 = 0.98;

/// `(raw - dark) / exposure_ms`, normalized to a 1 ms exposure.
pub fn correct_msi_frame(raw: &ImageCube, dark: &[f64]) -> Result<ImageCube> {
    if !(raw.exposure_ms > 0.0) {
        return Err(Error::ExposureInvalid(raw.exposure_ms));
    }
    if dark.len() != raw.band_count() {
        return Err(Error::ShapeMismatch(format!("{} dark values for {} bands", dark.len(), raw.band_count())));
    }
    let mut out = raw.clone();
    let plane = out.plane_len().max(1);
    let scale = raw.exposure_ms / MSI_STANDARD_EXPOSURE_MS;
    par::for_each_chunk_mut(&mut out.data, plane, |band, values| {
        let d = dark[band];
        values.iter_mut().for_each(|v| *v = (*v - d) / scale);
    });
    out.exposure_ms = MSI_STANDARD_EXPOSURE_MS;
    out.negative_dn = out.data.iter().filter(|v| **v < 0.0).count();
    Ok(out)
}

/// `(raw - dark) / (exposure_ms / 100)`, normalized to a 100 ms exposure.
pub fn correct_ds_spectrum(raw: &Spectrum, dark: &[f64]) -> Result<Spectrum> {
    if !(raw.exposure_ms > 0.0) {
        return Err(Error::ExposureInvalid(raw.exposure_ms));
    }
    if dark.len() != raw.dn.len() {
        return Err(Error::ShapeMismatch(format!("{} dark values for {} bands", dark.len(), raw.dn.len())));
    }
    let scale = raw.exposure_ms / DS_STANDARD_EXPOSURE_MS;
    let dn: Vec<f64> = raw.dn.iter().zip(dark).map(|(v, d)| (v - d) / scale).collect();
    Ok(Spectrum {
        grid: raw.grid.clone(),
        negative_dn: dn.iter().filter(|v| **v < 0.0).count(),
        dn,
        timestamp: raw.timestamp,
        exposure_ms: DS_STANDARD_EXPOSURE_MS,
    })
}

/// Per-pixel multiplicative flat-field gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VignetteField {
    pub bands: Vec<BandDef>,
    pub rows: usize,
    pub cols: usize,
    /// Band-sequential gains, same layout as [`ImageCube::data`].
    pub gain: Vec<f64>,
}

impl VignetteField {
    pub fn gain_at(&self, band: usize, row: usize, col: usize) -> f64 {
        self.gain[(band * self.rows + row) * self.cols + col]
    }
}

/// Top-left corner of the 3x3 reference block, anchored at floor(center).
fn center_block_origin(n: usize) -> usize {
    (n - 1) / 2 - 1
}

/// Average the panel frames, then `gain = mean(center 3x3) / averaged`.
pub fn build_vignette_field(frames: &[ImageCube]) -> Result<VignetteField> {
    let first = frames.first().ok_or_else(|| Error::InvalidParameter("no panel frames".into()))?;
    if first.rows < 3 || first.cols < 3 {
        return Err(Error::ShapeMismatch("vignette frames must be at least 3x3".into()));
    }
    if let Some(f) = frames.iter().find(|f| !f.same_geometry(first)) {
        return Err(Error::ShapeMismatch(format!(
            "frame {}x{}x{} differs from {}x{}x{}",
            f.band_count(),
            f.rows,
            f.cols,
            first.band_count(),
            first.rows,
            first.cols
        )));
    }
    let (rows, cols) = (first.rows, first.cols);
    let plane = rows * cols;
    let count = frames.len() as f64;
    let mut gain = vec![0.0; first.data.len()];
    par::for_each_chunk_mut(&mut gain, plane, |band, g| {
        for f in frames {
            g.iter_mut().zip(f.plane(band)).for_each(|(a, v)| *a += v);
        }
        g.iter_mut().for_each(|a| *a /= count);
    });

    for (i, v) in gain.iter().enumerate() {
        if !(*v > 0.0) {
            let band = i / plane;
            let rest = i % plane;
            return Err(Error::NonPositivePanelDn { band, row: rest / cols, col: rest % cols });
        }
    }

    let (r0, c0) = (center_block_origin(rows), center_block_origin(cols));
    par::for_each_chunk_mut(&mut gain, plane, |_, g| {
        let mut reference = 0.0;
        for r in r0..r0 + 3 {
            for c in c0..c0 + 3 {
                reference += g[r * cols + c];
            }
        }
        reference /= 9.0;
        g.iter_mut().for_each(|a| *a = reference / *a);
    });

    Ok(VignetteField { bands: first.bands.clone(), rows, cols, gain })
}

/// Multiply every pixel by its flat-field gain.
pub fn apply_vignette(img: &ImageCube, field: &VignetteField) -> Result<ImageCube> {
    if img.rows != field.rows || img.cols != field.cols || img.band_count() != field.bands.len() {
        return Err(Error::ShapeMismatch("vignette field geometry does not match the image".into()));
    }
    let mut out = img.clone();
    let plane = out.plane_len().max(1);
    par::for_each_chunk_mut(&mut out.data, plane, |band, values| {
        let g = &field.gain[band * plane..(band + 1) * plane];
        values.iter_mut().zip(g).for_each(|(v, k)| *v *= k);
    });
    Ok(out)
}

/// Rectangular region of an image plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Roi {
    pub fn full(img: &ImageCube) -> Self {
        Roi { row0: 0, col0: 0, rows: img.rows, cols: img.cols }
    }

    fn fits(&self, img: &ImageCube) -> bool {
        self.rows > 0 && self.cols > 0 && self.row0 + self.rows <= img.rows && self.col0 + self.cols <= img.cols
    }

    /// Copy one band of the region into a row-major buffer.
    pub fn extract(&self, img: &ImageCube, band: usize) -> Result<Vec<f64>> {
        if !self.fits(img) {
            return Err(Error::ShapeMismatch(format!("{self:?} outside a {}x{} image", img.rows, img.cols)));
        }
        let p = img.plane(band);
        Ok((self.row0..self.row0 + self.rows)
            .flat_map(|r| p[r * img.cols + self.col0..r * img.cols + self.col0 + self.cols].iter().copied())
            .collect())
    }
}

/// Boolean mask over a region; `true` marks excluded (shadowed) pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShadowMask {
    pub rows: usize,
    pub cols: usize,
    pub mask: Vec<bool>,
}

impl ShadowMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, mask: vec![false; rows * cols] }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Adaptive local threshold `T = mean - rho * std` over a `window x window`
/// neighbourhood (clipped at the borders), `mask = value < T`, refined by a
/// binary opening then closing with a 3x3 cross.
pub fn segment_panel(values: &[f64], rows: usize, cols: usize, rho: f64, window: usize) -> Result<ShadowMask> {
    if values.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!("{} values for a {rows}x{cols} region", values.len())));
    }
    if window.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("window {window} must be odd")));
    }
    if window > rows.min(cols) {
        return Err(Error::RoiTooSmall(format!("{rows}x{cols} region for a {window}x{window} window")));
    }
    if !(rho >= 0.0) {
        return Err(Error::InvalidParameter(format!("rho {rho} must be >= 0")));
    }
    let threshold = local_threshold(values, rows, cols, rho, window)?;
    let raw: Vec<bool> = values.iter().zip(&threshold).map(|(v, t)| v < t).collect();
    let opened = dilate(&erode(&raw, rows, cols), rows, cols);
    let closed = erode(&dilate(&opened, rows, cols), rows, cols);
    Ok(ShadowMask { rows, cols, mask: closed })
}

/// Per-pixel `mean - rho * std` over a clipped `window x window` neighbourhood.
pub fn local_threshold(values: &[f64], rows: usize, cols: usize, rho: f64, window: usize) -> Result<Vec<f64>> {
    if values.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!("{} values for a {rows}x{cols} region", values.len())));
    }
    if window.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!("window {window} must be odd")));
    }
    let half = window / 2;
    Ok(par::map_range(rows * cols, |i| {
        let (r, c) = (i / cols, i % cols);
        let (r_lo, r_hi) = (r.saturating_sub(half), (r + half).min(rows - 1));
        let (c_lo, c_hi) = (c.saturating_sub(half), (c + half).min(cols - 1));
        let n = ((r_hi - r_lo + 1) * (c_hi - c_lo + 1)) as f64;
        let rows_iter = || (r_lo..=r_hi).flat_map(|rr| values[rr * cols + c_lo..=rr * cols + c_hi].iter());
        let mean = rows_iter().sum::<f64>() / n;
        let std = (rows_iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        mean - rho * std
    }))
}

const CROSS: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

fn cross_neighbours(i: usize, rows: usize, cols: usize) -> impl Iterator<Item = usize> {
    let (r, c) = ((i / cols) as isize, (i % cols) as isize);
    CROSS.iter().filter_map(move |(dr, dc)| {
        let (rr, cc) = (r + dr, c + dc);
        (rr >= 0 && cc >= 0 && rr < rows as isize && cc < cols as isize).then(|| rr as usize * cols + cc as usize)
    })
}

// Out-of-bounds neighbours are ignored by both operators.
fn erode(m: &[bool], rows: usize, cols: usize) -> Vec<bool> {
    (0..m.len()).map(|i| cross_neighbours(i, rows, cols).all(|j| m[j])).collect()
}

fn dilate(m: &[bool], rows: usize, cols: usize) -> Vec<bool> {
    (0..m.len()).map(|i| cross_neighbours(i, rows, cols).any(|j| m[j])).collect()
}

/// Per-band mean DN over the unmasked pixels of `roi`.
pub fn panel_mean_dn(img: &ImageCube, roi: &Roi, mask: &ShadowMask) -> Result<Vec<f64>> {
    if !roi.fits(img) {
        return Err(Error::ShapeMismatch(format!("{roi:?} outside a {}x{} image", img.rows, img.cols)));
    }
    if mask.rows != roi.rows || mask.cols != roi.cols {
        return Err(Error::ShapeMismatch("mask extent differs from the ROI".into()));
    }
    let kept = mask.mask.iter().filter(|m| !**m).count();
    if kept == 0 {
        return Err(Error::AllMasked);
    }
    (0..img.band_count())
        .map(|b| {
            let vals = roi.extract(img, b)?;
            let sum: f64 = vals.iter().zip(&mask.mask).filter(|(_, m)| !**m).map(|(v, _)| v).sum();
            Ok(sum / kept as f64)
        })
        .collect()
}

/// Segment band `seg_band` of the ROI and average every band over the kept pixels.
pub fn extract_panel_dn(img: &ImageCube, roi: &Roi, seg_band: usize, rho: f64, window: usize) -> Result<(Vec<f64>, ShadowMask)> {
    let values = roi.extract(img, seg_band)?;
    let mask = segment_panel(&values, roi.rows, roi.cols, rho, window)?;
    let means = panel_mean_dn(img, roi, &mask)?;
    Ok((means, mask))
}

/// Bands in which any pixel reaches `threshold_frac * saturation_dn`.
pub fn detect_overexposure(img: &ImageCube, threshold_frac: f64) -> Result<Vec<usize>> {
    if !(threshold_frac > 0.0 && threshold_frac <= 1.0) {
        return Err(Error::InvalidParameter(format!("threshold fraction {threshold_frac} not in (0, 1]")));
    }
    let limit = threshold_frac * img.saturation_dn;
    let flagged = par::map_range(img.band_count(), |b| img.plane(b).iter().any(|v| *v >= limit));
    Ok(flagged.iter().enumerate().filter(|(_, f)| **f).map(|(b, _)| b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{default_msi_bands, WavelengthGrid};
    use chrono::{TimeZone, Utc};
    use proptest::prelude::*;

    fn cube(bands: usize, rows: usize, cols: usize, f: impl Fn(usize, usize, usize) -> f64, exposure: f64) -> ImageCube {
        let defs = (0..bands).map(|i| BandDef { center_nm: 600.0 + 10.0 * i as f64, fwhm_nm: 12.0 }).collect();
        let mut data = Vec::with_capacity(bands * rows * cols);
        for b in 0..bands {
            for r in 0..rows {
                for c in 0..cols {
                    data.push(f(b, r, c));
                }
            }
        }
        ImageCube::new(defs, rows, cols, data, Utc.with_ymd_and_hms(2024, 5, 8, 4, 0, 0).unwrap(), exposure, 4095.0).unwrap()
    }

    #[test]
    fn msi_exposure_examples() {
        let raw = cube(2, 3, 3, |_, _, _| 1000.0, 2.0);
        let out = correct_msi_frame(&raw, &[100.0, 100.0]).unwrap();
        assert!(out.data.iter().all(|v| *v == 450.0));
        assert_eq!(out.exposure_ms, 1.0);
        assert_eq!(out.timestamp, raw.timestamp);

        let out = correct_msi_frame(&raw, &[1000.0, 1000.0]).unwrap();
        assert!(out.data.iter().all(|v| *v == 0.0));

        let raw1 = cube(2, 3, 3, |b, r, c| (b * 100 + r * 10 + c) as f64, 1.0);
        assert_eq!(correct_msi_frame(&raw1, &[0.0, 0.0]).unwrap().data, raw1.data);
    }

    #[test]
    fn msi_errors() {
        let mut raw = cube(2, 3, 3, |_, _, _| 1.0, 1.0);
        assert!(matches!(correct_msi_frame(&raw, &[0.0]), Err(Error::ShapeMismatch(_))));
        raw.exposure_ms = 0.0;
        assert!(matches!(correct_msi_frame(&raw, &[0.0, 0.0]), Err(Error::ExposureInvalid(_))));
    }

    fn spectrum(dn: Vec<f64>, exposure: f64) -> Spectrum {
        let g = WavelengthGrid::regular(632.0, 632.0 + 6.0 * (dn.len() - 1) as f64, 6.0).unwrap();
        Spectrum::new(g, dn, Utc.with_ymd_and_hms(2024, 5, 8, 4, 0, 0).unwrap(), exposure).unwrap()
    }

    #[test]
    fn ds_exposure_examples() {
        let out = correct_ds_spectrum(&spectrum(vec![5100.0], 50.0), &[100.0]).unwrap();
        assert_eq!(out.dn, vec![10000.0]);
        assert_eq!(out.exposure_ms, 100.0);

        let s = spectrum(vec![1.0, 2.0, 3.0], 100.0);
        assert_eq!(correct_ds_spectrum(&s, &[0.0; 3]).unwrap().dn, s.dn);

        let out = correct_ds_spectrum(&spectrum(vec![50.0, 200.0], 100.0), &[100.0, 100.0]).unwrap();
        assert_eq!(out.dn, vec![-50.0, 100.0]);
        assert_eq!(out.negative_dn, 1);
    }

    #[test]
    fn flat_panel_gives_unit_gain() {
        let f = cube(3, 8, 9, |_, _, _| 500.0, 1.0);
        let field = build_vignette_field(&[f.clone(), f]).unwrap();
        assert!(field.gain.iter().all(|g| *g == 1.0));
    }

    #[test]
    fn half_brightness_pixel_gets_gain_two() {
        let f = cube(1, 5, 5, |_, r, c| if (r, c) == (0, 0) { 250.0 } else { 500.0 }, 1.0);
        let field = build_vignette_field(&[f]).unwrap();
        assert_eq!(field.gain_at(0, 0, 0), 2.0);
        assert_eq!(field.gain_at(0, 2, 2), 1.0);
    }

    #[test]
    fn vignette_errors() {
        assert!(build_vignette_field(&[]).is_err());
        let f = cube(1, 5, 5, |_, r, _| if r == 4 { 0.0 } else { 1.0 }, 1.0);
        assert!(matches!(build_vignette_field(&[f]), Err(Error::NonPositivePanelDn { band: 0, row: 4, .. })));
        let a = cube(1, 5, 5, |_, _, _| 1.0, 1.0);
        let b = cube(1, 5, 6, |_, _, _| 1.0, 1.0);
        assert!(matches!(build_vignette_field(&[a.clone(), b.clone()]), Err(Error::ShapeMismatch(_))));
        let field = build_vignette_field(&[a]).unwrap();
        assert!(matches!(apply_vignette(&b, &field), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn even_dimensions_anchor_center_block() {
        // 6x6: floor center index 2, block rows/cols 1..=3
        assert_eq!(center_block_origin(6), 1);
        assert_eq!(center_block_origin(409), 203);
        assert_eq!(center_block_origin(216), 106);
        let f = cube(1, 6, 6, |_, r, c| if (1..=3).contains(&r) && (1..=3).contains(&c) { 900.0 } else { 300.0 }, 1.0);
        let field = build_vignette_field(&[f]).unwrap();
        assert_eq!(field.gain_at(0, 5, 5), 3.0);
    }

    #[test]
    fn apply_examples() {
        let img = cube(1, 4, 4, |_, r, c| if (r, c) == (0, 0) { 400.0 } else { 100.0 }, 1.0);
        let mut field = build_vignette_field(&[cube(1, 4, 4, |_, _, _| 1.0, 1.0)]).unwrap();
        assert_eq!(apply_vignette(&img, &field).unwrap(), img);
        field.gain[0] = 2.0;
        assert_eq!(apply_vignette(&img, &field).unwrap().get(0, 0, 0), 800.0);
    }

    #[test]
    fn cos4_falloff_is_inverted() {
        let (rows, cols) = (41, 61);
        let falloff = |r: usize, c: usize| {
            let dy = r as f64 - 20.0;
            let dx = c as f64 - 30.0;
            let theta = ((dx * dx + dy * dy).sqrt() / 80.0).atan();
            theta.cos().powi(4)
        };
        let frames: Vec<ImageCube> =
            (0..48).map(|k| cube(2, rows, cols, |b, r, c| (1000.0 + 50.0 * b as f64) * falloff(r, c) * (1.0 + 0.001 * k as f64), 1.0)).collect();
        let field = build_vignette_field(&frames).unwrap();
        // the reference block surrounds the optical center, so gain = ref_mean / falloff
        let ref_mean: f64 = (19..22).flat_map(|r| (29..32).map(move |c| falloff(r, c))).sum::<f64>() / 9.0;
        for r in 0..rows {
            for c in 0..cols {
                let want = ref_mean / falloff(r, c);
                assert!((field.gain_at(1, r, c) - want).abs() / want < 1e-6);
            }
        }
    }

    #[test]
    fn uniform_region_is_not_masked() {
        let m = segment_panel(&vec![7.0; 400], 20, 20, 0.1, 15).unwrap();
        assert_eq!(m.masked_count(), 0);
    }

    #[test]
    fn threshold_formula_example() {
        // 3x3 window with mean 100 and population std 10 => T = 99
        let d = 10.0 * (9.0f64 / 8.0).sqrt();
        let v = vec![100.0 - d, 100.0 + d, 100.0 - d, 100.0 + d, 100.0, 100.0 - d, 100.0 + d, 100.0 - d, 100.0 + d];
        let t = local_threshold(&v, 3, 3, 0.1, 3).unwrap();
        assert!((t[4] - 99.0).abs() < 1e-9);
        assert!(95.0 < t[4]);
    }

    #[test]
    fn window_validation() {
        let v = vec![1.0; 100];
        assert!(matches!(segment_panel(&v, 10, 10, 0.1, 15), Err(Error::RoiTooSmall(_))));
        assert!(segment_panel(&v, 10, 10, 0.1, 4).is_err());
        assert!(segment_panel(&v, 10, 10, -0.1, 5).is_err());
    }

    fn striped_panel(rows: usize, cols: usize, noise: f64) -> (Vec<f64>, Vec<bool>) {
        let mut s = 99u64;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let stripe = |c: usize| (20..23).contains(&c);
        let mut vals = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..rows {
            for c in 0..cols {
                let base = if stripe(c) { 600.0 } else { 1000.0 };
                vals.push(base * (1.0 + noise * next()));
                truth.push(stripe(c));
            }
        }
        (vals, truth)
    }

    #[test]
    fn stripe_is_masked() {
        let (rows, cols) = (40, 50);
        let (vals, truth) = striped_panel(rows, cols, 0.0);
        let m = segment_panel(&vals, rows, cols, 0.1, 15).unwrap();
        let stripe_masked = m.mask.iter().zip(&truth).filter(|(m, t)| **t && **m).count();
        assert_eq!(stripe_masked, truth.iter().filter(|t| **t).count());
        let bright = truth.iter().filter(|t| !**t).count();
        let bright_masked = m.mask.iter().zip(&truth).filter(|(m, t)| !**t && **m).count();
        assert!(bright_masked as f64 <= 0.02 * bright as f64, "{bright_masked} of {bright}");
    }

    #[test]
    fn stripe_mean_recovered() {
        let (rows, cols) = (40, 50);
        let (vals, _) = striped_panel(rows, cols, 0.0);
        let defs = vec![BandDef { center_nm: 700.0, fwhm_nm: 10.0 }];
        let img = ImageCube::new(defs, rows, cols, vals, Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(), 1.0, 4095.0).unwrap();
        let (means, _) = extract_panel_dn(&img, &Roi::full(&img), 0, 0.1, 15).unwrap();
        assert!((means[0] - 1000.0).abs() / 1000.0 < 0.005);
    }

    #[test]
    fn panel_mean_examples() {
        let img = cube(2, 4, 4, |b, _, c| if c < 2 { 0.0 } else { 100.0 * (b + 1) as f64 }, 1.0);
        let roi = Roi::full(&img);
        let mut mask = ShadowMask::empty(4, 4);
        let plain = panel_mean_dn(&img, &roi, &mask).unwrap();
        assert_eq!(plain, vec![50.0, 100.0]);
        for r in 0..4 {
            for c in 0..2 {
                mask.mask[r * 4 + c] = true;
            }
        }
        assert_eq!(panel_mean_dn(&img, &roi, &mask).unwrap(), vec![100.0, 200.0]);
        mask.mask.iter_mut().for_each(|m| *m = true);
        assert_eq!(panel_mean_dn(&img, &roi, &mask), Err(Error::AllMasked));
    }

    #[test]
    fn overexposure_examples() {
        let img = cube(10, 4, 4, |_, _, _| 2047.5, 1.0);
        assert!(detect_overexposure(&img, 0.98).unwrap().is_empty());
        let mut img2 = img.clone();
        img2.plane_mut(7)[5] = 4095.0;
        assert_eq!(detect_overexposure(&img2, 0.98).unwrap(), vec![7]);
        assert!(detect_overexposure(&img, 0.0).is_err());
    }

    #[test]
    fn overexposure_pattern_649_to_679() {
        // bright 75% panel with a spectral peak saturating the 649-679 nm bands
        let bands = default_msi_bands();
        let (rows, cols) = (12, 12);
        let mut data = Vec::new();
        for b in &bands {
            let level = if (649.0..=679.0).contains(&b.center_nm) { 4095.0 } else { 0.8 * 4095.0 };
            for r in 0..rows {
                for c in 0..cols {
                    let on_panel = (3..9).contains(&r) && (3..9).contains(&c);
                    data.push(if on_panel { level } else { 0.1 * level });
                }
            }
        }
        let img = ImageCube::new(bands.clone(), rows, cols, data, Utc.with_ymd_and_hms(2024, 5, 8, 0, 47, 0).unwrap(), 1.0, 4095.0).unwrap();
        let flagged = detect_overexposure(&img, 0.98).unwrap();
        let want: Vec<usize> = bands.iter().enumerate().filter(|(_, b)| (649.0..=679.0).contains(&b.center_nm)).map(|(i, _)| i).collect();
        assert_eq!(flagged, want);
        assert_eq!(want.len(), 5);
    }

    proptest! {
        #[test]
        fn exposure_scale_equivariance(raw in 10.0f64..4000.0, dark in 0.0f64..10.0, exp in 0.1f64..50.0, k in 0.1f64..10.0) {
            let a = correct_ds_spectrum(&spectrum(vec![raw], exp), &[dark]).unwrap();
            let b = correct_ds_spectrum(&spectrum(vec![dark + (raw - dark) * k], exp * k), &[dark]).unwrap();
            prop_assert!((a.dn[0] - b.dn[0]).abs() <= 1e-9 * a.dn[0].abs().max(1.0));
        }

        #[test]
        fn segmentation_shift_invariant(seed in 0u64..1000, shift in -500i32..500) {
            let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
            let vals: Vec<f64> = (0..400).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) % 64) as f64
            }).collect();
            let shifted: Vec<f64> = vals.iter().map(|v| v + shift as f64).collect();
            let a = segment_panel(&vals, 20, 20, 0.1, 5).unwrap();
            let b = segment_panel(&shifted, 20, 20, 0.1, 5).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn vignette_round_trip_flattens(seed in 0u64..50) {
            let frames: Vec<ImageCube> = (0..3).map(|k| cube(2, 7, 9, |b, r, c| {
                let h = ((r * 31 + c * 17 + b * 7) as u64 ^ seed) % 97;
                (200.0 + h as f64) * (1.0 + 0.01 * k as f64)
            }, 1.0)).collect();
            let field = build_vignette_field(&frames).unwrap();
            let mut avg = frames[0].clone();
            for i in 0..avg.data.len() {
                avg.data[i] = frames.iter().map(|f| f.data[i]).sum::<f64>() / 3.0;
            }
            let flat = apply_vignette(&avg, &field).unwrap();
            for b in 0..2 {
                let p = flat.plane(b);
                let m = p.iter().sum::<f64>() / p.len() as f64;
                prop_assert!(p.iter().all(|v| (v - m).abs() / m < 1e-6));
            }
        }
    }
}
