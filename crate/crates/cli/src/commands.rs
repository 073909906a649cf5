use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Duration, Utc};

use reflgen::evaluate::{self, compare_models, index_bands, index_maps, split_indices, vegetation_indices, ModelResult};
use reflgen::io::{self, HeadingBlock, HeadingFile, ModelFile, Provenance, ReflectanceRow, RoiEntry, RoiFile, FORMAT_VERSION, TOOL_VERSION};
use reflgen::models::{self, ElmProtocol, ModelKind, ReflectanceModel, TrainingSet};
use reflgen::preprocess;
use reflgen::simulate::{self, ScenarioConfig};
use reflgen::solar::{self, CorrectionMode, RotationFitOptions, RotationSample};
use reflgen::spectral::{BandDef, GeoLocation, ImageCube, PanelObservation, Spectrum};

use crate::{Command, Global, ModeArg, ModelArg};

/// A flag value outside its valid domain.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(g: &Global, command: Command) -> Result<()> {
    let cfg = load_config(g)?;
    match command {
        Command::Simulate { out, rotation_at, rotation_dwell, rotation_cycles } => simulate(g, cfg, &out, rotation_at, rotation_dwell, rotation_cycles),
        Command::Preprocess { spectra, ds_dark, out, ds_range, cubes, msi_dark, vignette, out_dir } => {
            if spectra.is_none() && cubes.is_empty() {
                return Err(usage("preprocess needs --spectra and/or --cubes"));
            }
            if let (Some(s), Some(d), Some(o)) = (&spectra, &ds_dark, &out) {
                preprocess_spectra(s, d, o, (ds_range[0], ds_range[1]))?;
            }
            if let (Some(d), Some(o)) = (&msi_dark, &out_dir) {
                preprocess_cubes(&cubes, d, vignette.as_deref(), o)?;
            }
            Ok(())
        }
        Command::BuildVignette { frames, msi_dark, out } => build_vignette(&frames, msi_dark.as_deref(), &out),
        Command::SegmentPanels { cubes, rois, panels, segment_band, rho, window, condition, out } => {
            let condition = condition.unwrap_or_else(|| cfg.condition.clone());
            segment_panels(&cubes, &rois, &panels, segment_band, rho, window, &condition, &out)
        }
        Command::FitHeading { rotation, span, degree, backfit, settle, mode, out } => {
            let opts = RotationFitOptions { span, degree: degree as usize, backfit_iterations: backfit };
            fit_heading(g, &cfg, &rotation, &opts, settle, mode, &out)
        }
        Command::ApplyHeading { spectra, heading, uav_heading, mode, out } => {
            let file: HeadingFile = io::from_versioned_json(&io::read_text(&heading)?)?;
            let mut block = file.heading;
            if let Some(m) = mode {
                block.mode = correction_mode(m);
            }
            let s = io::read_spectra(&io::read_text(&spectra)?)?;
            let corrected = correct_spectra(&s, &block, uav_heading, &cfg.location)?;
            io::write_text(&out, &io::write_spectra(&corrected)?)?;
            Ok(())
        }
        Command::Train { observations, spectra, model, k, bands, bandwidth, coverage, train_fraction, heading, uav_heading, out, test_out } => {
            let spec = ModelSpec { model, k, bands, bandwidth, coverage };
            train(g, &cfg, &observations, &spectra, &spec, train_fraction, heading.as_deref(), uav_heading, &out, test_out.as_deref())
        }
        Command::BandSelect { observations, spectra, candidates, bandwidth, train_fraction, out } => {
            band_select(g, &cfg, &observations, &spectra, &candidates, bandwidth, train_fraction, &out)
        }
        Command::Predict { model, observations, spectra, cube, out_cube, uav_heading, out } => {
            let mf = ModelFile::from_json(&io::read_text(&model)?)?;
            let spectra = match &spectra {
                Some(p) => Some(load_spectra_for(&mf, p, uav_heading, &cfg.location)?),
                None => None,
            };
            if mf.model.kind.needs_reference() && spectra.is_none() {
                return Err(usage(format!("--spectra is required for a {} model", mf.model.kind.label())));
            }
            if let (Some(o), Some(out)) = (&observations, &out) {
                predict_observations(g, &mf.model, o, spectra.as_deref(), out)?;
            }
            if let (Some(c), Some(oc)) = (&cube, &out_cube) {
                predict_cube(g, &mf.model, c, spectra.as_deref(), oc)?;
            }
            Ok(())
        }
        Command::Evaluate { models, observations, spectra, elm_references, elm_window, uav_heading, out } => {
            evaluate_models(g, &cfg, &models, &observations, &spectra, elm_references.as_deref(), elm_window, uav_heading, &out)
        }
        Command::Indices { reflectance, cube, red, nir, out, out_dir } => {
            if let (Some(r), Some(o)) = (&reflectance, &out) {
                indices_rows(r, red, nir, o)?;
            }
            if let (Some(c), Some(d)) = (&cube, &out_dir) {
                indices_cube(c, red, nir, d)?;
            }
            Ok(())
        }
    }
}

fn load_config(g: &Global) -> Result<ScenarioConfig> {
    let cfg = match &g.config {
        Some(p) => serde_json::from_str(&io::read_text(p)?).with_context(|| format!("reading scenario {}", p.display()))?,
        None => ScenarioConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn correction_mode(m: ModeArg) -> CorrectionMode {
    match m {
        ModeArg::BandAveraged => CorrectionMode::BandAveraged,
        ModeArg::PerBand => CorrectionMode::PerBand,
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn file_name(p: &Path) -> Result<&std::ffi::OsStr> {
    p.file_name().with_context(|| format!("{} has no file name", p.display()))
}

/// Band definitions for the centres named in a file, taken from the scenario.
fn resolve_bands(centers: &[f64], cfg: &ScenarioConfig) -> Result<Vec<BandDef>> {
    centers
        .iter()
        .map(|c| {
            cfg.msi_bands
                .iter()
                .find(|b| (b.center_nm - c).abs() < 1e-9)
                .cloned()
                .ok_or_else(|| reflgen::Error::BandMismatch(format!("band {c} nm is not in the configured MSI band list")).into())
        })
        .collect()
}

fn read_observations(path: &Path, cfg: &ScenarioConfig) -> Result<(Vec<BandDef>, Vec<PanelObservation>)> {
    let (centers, obs) = io::read_observations(&io::read_text(path)?).with_context(|| format!("reading {}", path.display()))?;
    Ok((resolve_bands(&centers, cfg)?, obs))
}

fn per_band_mean(values: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = values.first().context("dark file holds no data")?;
    let n = values.len() as f64;
    Ok((0..first.len()).map(|b| values.iter().map(|v| v[b]).sum::<f64>() / n).collect())
}

fn cube_dark(path: &Path) -> Result<Vec<f64>> {
    let dark = io::load_cube(path)?;
    let planes: Vec<Vec<f64>> = (0..dark.band_count()).map(|b| dark.plane(b).to_vec()).collect();
    Ok(planes.iter().map(|p| p.iter().sum::<f64>() / p.len().max(1) as f64).collect())
}

fn correct_spectra(spectra: &[Spectrum], block: &HeadingBlock, uav_heading: f64, loc: &GeoLocation) -> Result<Vec<Spectrum>> {
    spectra
        .iter()
        .map(|s| {
            let geo = solar::solar_position(s.timestamp, loc);
            let gamma = solar::uav_sun_angle(uav_heading, geo.azimuth_deg);
            Ok(solar::apply_heading_correction(s, &block.correction, gamma, geo.altitude_deg, block.mode)?)
        })
        .collect()
}

fn load_spectra_for(mf: &ModelFile, path: &Path, uav_heading: f64, loc: &GeoLocation) -> Result<Vec<Spectrum>> {
    let s = io::read_spectra(&io::read_text(path)?)?;
    match &mf.heading {
        Some(block) => correct_spectra(&s, block, uav_heading, loc),
        None => Ok(s),
    }
}

/// Spectrum closest in time to `t`, if within `tolerance_s`. `spectra` must be time-sorted.
fn nearest_spectrum(spectra: &[Spectrum], t: DateTime<Utc>, tolerance_s: f64) -> Option<&Spectrum> {
    let i = spectra.partition_point(|s| s.timestamp < t);
    let gap = |s: &Spectrum| (s.timestamp - t).num_milliseconds().abs() as f64 / 1000.0;
    [i.checked_sub(1), Some(i)]
        .into_iter()
        .flatten()
        .filter_map(|j| spectra.get(j))
        .min_by(|a, b| gap(a).total_cmp(&gap(b)))
        .filter(|s| gap(s) <= tolerance_s)
}

fn gate(set: &TrainingSet, loc: &GeoLocation, min_alt: f64) -> TrainingSet {
    let keep: Vec<usize> = (0..set.len())
        .filter(|&i| solar::solar_position(set.pairs[i].observation.timestamp, loc).altitude_deg >= min_alt)
        .collect();
    set.subset(&keep)
}

/// Paired, altitude-gated set and its train/test split.
fn load_split(
    g: &Global,
    cfg: &ScenarioConfig,
    observations: &Path,
    spectra: &[Spectrum],
    fraction: f64,
) -> Result<(Vec<BandDef>, TrainingSet, TrainingSet)> {
    let (bands, obs) = read_observations(observations, cfg)?;
    let (set, unpaired) = models::pair_observations(&obs, spectra, g.pair_tolerance)?;
    if !unpaired.is_empty() {
        eprintln!("warning: {} observations have no spectrum within {} s", unpaired.len(), g.pair_tolerance);
    }
    let set = gate(&set, &cfg.location, g.min_altitude);
    if set.is_empty() {
        bail!(reflgen::Error::TooFewValues { needed: 2, got: 0 });
    }
    let (tr, te) = split_indices(set.len(), fraction, g.seed.unwrap_or(0))?;
    Ok((bands, set.subset(&tr), set.subset(&te)))
}

fn simulate(g: &Global, mut cfg: ScenarioConfig, out: &Path, rotation_at: f64, dwell: f64, cycles: u32) -> Result<()> {
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    create_dir(out)?;
    let data = simulate::simulate_diurnal_dataset(&cfg)?;
    let grid = cfg.ds_grid()?;
    let centers: Vec<f64> = cfg.msi_bands.iter().map(|b| b.center_nm).collect();

    let raw: Vec<Spectrum> = data.spectra.iter().map(|s| simulate::to_raw_spectrum(s, cfg.ds_exposure_ms, cfg.ds_dark_dn)).collect::<Result<_, _>>()?;
    io::write_text(&out.join("ds_raw.csv"), &io::write_spectra(&raw)?)?;
    let dark = Spectrum::new(grid.clone(), vec![cfg.ds_dark_dn; grid.len()], cfg.start, cfg.ds_exposure_ms)?;
    io::write_text(&out.join("ds_dark.csv"), &io::write_spectra(&[dark])?)?;
    io::write_text(&out.join("observations.csv"), &io::write_observations(&centers, &data.observations)?)?;
    io::write_text(&out.join("panels.csv"), &io::write_panels(&cfg.panels)?)?;
    io::write_text(&out.join("truth.json"), &io::to_json(&data.truth)?)?;
    io::write_text(&out.join("scenario.json"), &io::to_json(&cfg)?)?;

    let headings: Vec<f64> = (0..8 * cycles).map(|k| 45.0 * (k % 8) as f64).collect();
    let t_rot = cfg.start + Duration::milliseconds((rotation_at * 1000.0).round() as i64);
    let rotation = simulate::simulate_rotation_experiment(&cfg, t_rot, &headings, dwell)?;
    io::write_text(&out.join("rotation.csv"), &io::write_rotation(&grid, &rotation)?)?;

    let mut n_cubes = 0;
    if let Some(cc) = cfg.cubes {
        let cube_dir = out.join("cubes");
        create_dir(&cube_dir)?;
        let times = simulate::sample_times(cfg.start, cfg.end, cfg.msi_interval_s);
        let mut layout = Vec::new();
        for (i, t) in times.iter().enumerate().step_by(cc.every.max(1)) {
            let (cube, l) = simulate::simulate_panel_cube(&cfg, *t, cc.rows, cc.cols)?;
            io::save_cube(&cube, &cube_dir.join(format!("frame_{i:04}.json")))?;
            layout = l;
            n_cubes += 1;
        }
        let rois = RoiFile { format_version: FORMAT_VERSION, panels: layout.into_iter().map(|l| RoiEntry { panel_id: l.panel_id, roi: l.roi }).collect() };
        io::write_text(&out.join("rois.json"), &io::to_json(&rois)?)?;
        let n = cc.rows * cc.cols * cfg.msi_bands.len();
        let dark = ImageCube::new(cfg.msi_bands.clone(), cc.rows, cc.cols, vec![cfg.msi_dark_dn; n], cfg.start, cfg.msi_exposure_ms, cfg.msi_saturation_dn)?;
        io::save_cube(&dark, &out.join("msi_dark.json"))?;
        let flat_dir = out.join("flats");
        create_dir(&flat_dir)?;
        let mid = cfg.start + (cfg.end - cfg.start) / 2;
        for (k, f) in simulate::simulate_flat_frames(&cfg, mid, cc.rows, cc.cols, cc.flat_frames)?.iter().enumerate() {
            io::save_cube(f, &flat_dir.join(format!("flat_{k:02}.json")))?;
        }
    }
    println!(
        "simulated {} spectra, {} panel observations, {} rotation samples, {n_cubes} cubes -> {}",
        data.spectra.len(),
        data.observations.len(),
        rotation.len(),
        out.display()
    );
    Ok(())
}

fn preprocess_spectra(spectra: &Path, dark: &Path, out: &Path, range: (f64, f64)) -> Result<()> {
    let raw = io::read_spectra(&io::read_text(spectra)?)?;
    let dark = per_band_mean(&io::read_spectra(&io::read_text(dark)?)?.into_iter().map(|s| s.dn).collect::<Vec<_>>())?;
    let norm: Vec<Spectrum> = raw
        .iter()
        .map(|s| preprocess::correct_ds_spectrum(s, &dark).and_then(|c| c.trim_to_valid_range(range.0, range.1)))
        .collect::<Result<_, _>>()?;
    let negative: usize = norm.iter().map(|s| s.negative_dn).sum();
    if negative > 0 {
        eprintln!("warning: {negative} negative DN values after dark subtraction");
    }
    io::write_text(out, &io::write_spectra(&norm)?)?;
    Ok(())
}

fn preprocess_cubes(cubes: &[PathBuf], dark: &Path, vignette: Option<&Path>, out_dir: &Path) -> Result<()> {
    let dark = cube_dark(dark)?;
    let field = vignette.map(io::load_vignette).transpose()?;
    create_dir(out_dir)?;
    for p in cubes {
        let raw = io::load_cube(p).with_context(|| format!("loading {}", p.display()))?;
        let mut c = preprocess::correct_msi_frame(&raw, &dark)?;
        if let Some(f) = &field {
            c = preprocess::apply_vignette(&c, f)?;
        }
        io::save_cube(&c, &out_dir.join(file_name(p)?))?;
    }
    Ok(())
}

fn build_vignette(frames: &[PathBuf], dark: Option<&Path>, out: &Path) -> Result<()> {
    let dark = dark.map(cube_dark).transpose()?;
    let cubes: Vec<ImageCube> = frames
        .iter()
        .map(|p| {
            let c = io::load_cube(p)?;
            Ok(match &dark {
                Some(d) => preprocess::correct_msi_frame(&c, d)?,
                None => c,
            })
        })
        .collect::<Result<_>>()?;
    let field = preprocess::build_vignette_field(&cubes)?;
    io::save_vignette(&field, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn segment_panels(cubes: &[PathBuf], rois: &Path, panels: &Path, seg_nm: f64, rho: f64, window: usize, condition: &str, out: &Path) -> Result<()> {
    let rois: RoiFile = io::from_versioned_json(&io::read_text(rois)?)?;
    let specs = io::read_panels(&io::read_text(panels)?)?;
    let mut loaded: Vec<ImageCube> = cubes.iter().map(|p| io::load_cube(p)).collect::<Result<_, _>>()?;
    loaded.sort_by_key(|c| c.timestamp);
    let Some(first) = loaded.first() else { bail!(usage("no cubes given")) };
    let bands = first.bands.clone();
    let seg_band = bands
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1.center_nm - seg_nm).abs().total_cmp(&(b.1.center_nm - seg_nm).abs()))
        .map(|(i, _)| i)
        .expect("cube has bands");
    let mut obs = Vec::new();
    for cube in &loaded {
        if cube.bands != bands {
            bail!(reflgen::Error::BandMismatch(format!("cube at {} has a different band list", io::fmt_timestamp(cube.timestamp))));
        }
        for entry in &rois.panels {
            let spec = specs
                .iter()
                .find(|s| s.panel_id == entry.panel_id)
                .ok_or_else(|| reflgen::Error::InvalidParameter(format!("panel {} has no spec", entry.panel_id)))?;
            let (dn, _) = preprocess::extract_panel_dn(cube, &entry.roi, seg_band, rho, window)?;
            let truth = bands.iter().map(|b| spec.reflectance_at(b.center_nm)).collect();
            obs.push(PanelObservation::new(entry.panel_id.clone(), cube.timestamp, dn, truth, condition)?);
        }
    }
    let centers: Vec<f64> = bands.iter().map(|b| b.center_nm).collect();
    io::write_text(out, &io::write_observations(&centers, &obs)?)?;
    Ok(())
}

fn fit_heading(g: &Global, cfg: &ScenarioConfig, rotation: &Path, opts: &RotationFitOptions, settle: f64, mode: ModeArg, out: &Path) -> Result<()> {
    let (grid, records) = io::read_rotation(&io::read_text(rotation)?)?;
    let mut samples: Vec<RotationSample> = records
        .into_iter()
        .map(|r| RotationSample { geometry: solar::solar_position(r.timestamp, &cfg.location), timestamp: r.timestamp, uav_heading_deg: r.heading_deg, ds_dn: r.dn })
        .collect();
    if settle > 0.0 {
        samples = solar::exclude_settling(&samples, settle);
    }
    let samples = solar::altitude_gate(&samples, g.min_altitude);
    let (hc, _) = solar::fit_rotation_experiment(grid.centers(), &samples, opts)?;
    println!("amplitude_mean {:.6} initial_phase_mean_deg {:.3} samples {}", hc.amplitude_mean, hc.initial_phase_mean_deg, samples.len());
    let file = HeadingFile {
        format_version: FORMAT_VERSION,
        heading: HeadingBlock { correction: hc, mode: correction_mode(mode) },
        samples_used: samples.len(),
        min_altitude_deg: g.min_altitude,
    };
    io::write_text(out, &io::to_json(&file)?)?;
    Ok(())
}

pub struct ModelSpec {
    pub model: ModelArg,
    pub k: usize,
    pub bands: Vec<f64>,
    pub bandwidth: f64,
    pub coverage: f64,
}

fn fit_model(spec: &ModelSpec, train: &TrainingSet, bands: &[BandDef]) -> Result<ReflectanceModel> {
    Ok(match spec.model {
        ModelArg::Elm => {
            let refs: Vec<PanelObservation> = train.pairs.iter().map(|p| p.observation.clone()).collect();
            models::fit_elm(&refs, bands)?
        }
        ModelArg::Direct => models::fit_direct(train, bands, spec.coverage)?,
        ModelArg::Dls => models::fit_dls(train, bands)?,
        ModelArg::Pcr => {
            if spec.k == 0 {
                bail!(usage("--k must be >= 1"));
            }
            models::fit_pcr(train, bands, spec.k)?
        }
        ModelArg::Mlr => {
            if spec.bands.is_empty() {
                bail!(usage("--bands needs at least one wavelength"));
            }
            models::fit_mlr(train, bands, &spec.bands, spec.bandwidth)?
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn train(
    g: &Global,
    cfg: &ScenarioConfig,
    observations: &Path,
    spectra: &Path,
    spec: &ModelSpec,
    fraction: f64,
    heading: Option<&Path>,
    uav_heading: f64,
    out: &Path,
    test_out: Option<&Path>,
) -> Result<()> {
    let block = heading
        .map(|p| -> Result<HeadingBlock> { Ok(io::from_versioned_json::<HeadingFile>(&io::read_text(p)?)?.heading) })
        .transpose()?;
    let mut s = io::read_spectra(&io::read_text(spectra)?)?;
    if let Some(b) = &block {
        s = correct_spectra(&s, b, uav_heading, &cfg.location)?;
    }
    let (bands, train, test) = load_split(g, cfg, observations, &s, fraction)?;
    let model = fit_model(spec, &train, &bands)?;
    for w in &model.warnings {
        eprintln!("warning: {w}");
    }
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        heading: block,
        provenance: Provenance {
            training_sha256: io::training_hash(&train)?,
            seed: g.seed.unwrap_or(0),
            conditions: train.conditions(),
            tool_version: TOOL_VERSION.to_string(),
            n_train: train.len(),
            n_test: test.len(),
            min_altitude_deg: g.min_altitude,
            pair_tolerance_s: g.pair_tolerance,
        },
        model,
    };
    io::write_text(out, &file.to_json()?)?;
    if let Some(p) = test_out {
        let centers: Vec<f64> = bands.iter().map(|b| b.center_nm).collect();
        let mut obs: Vec<PanelObservation> = test.pairs.iter().map(|p| p.observation.clone()).collect();
        obs.sort_by_key(|o| o.timestamp);
        io::write_text(p, &io::write_observations(&centers, &obs)?)?;
    }
    println!("{}: trained on {} pairs, {} held out", file.model.kind.label(), file.provenance.n_train, file.provenance.n_test);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn band_select(g: &Global, cfg: &ScenarioConfig, observations: &Path, spectra: &Path, candidates: &[f64], bw: f64, fraction: f64, out: &Path) -> Result<()> {
    let s = io::read_spectra(&io::read_text(spectra)?)?;
    let (bands, train, test) = load_split(g, cfg, observations, &s, fraction)?;
    let table = models::search_band_subsets(&train, &test, &bands, candidates, bw)?;
    io::write_text(out, &table.to_csv())?;
    println!("{} subsets evaluated, {} failed", table.subsets_evaluated, table.failures.len());
    for best in table.best_per_size(evaluate::ALL_CONDITIONS) {
        let names: Vec<String> = best.bands_nm.iter().map(|b| format!("{b}")).collect();
        let rmse = if g.percent { reflgen::spectral::to_percent(best.rmse) } else { best.rmse };
        println!("size {}: {} rmse {}", best.bands_nm.len(), names.join(","), io::fmt_value(rmse));
    }
    Ok(())
}

fn check_model_bands(model: &ReflectanceModel, centers: &[f64]) -> Result<()> {
    let want: Vec<f64> = model.msi_bands.iter().map(|b| b.center_nm).collect();
    if want != centers {
        bail!(reflgen::Error::BandMismatch("observation bands differ from the model's".into()));
    }
    Ok(())
}

fn predict_observations(g: &Global, model: &ReflectanceModel, observations: &Path, spectra: Option<&[Spectrum]>, out: &Path) -> Result<()> {
    let (centers, obs) = io::read_observations(&io::read_text(observations)?)?;
    check_model_bands(model, &centers)?;
    let mut rows = Vec::new();
    let mut skipped = 0;
    for o in &obs {
        let ds = spectra.and_then(|s| nearest_spectrum(s, o.timestamp, g.pair_tolerance));
        if model.kind.needs_reference() && ds.is_none() {
            skipped += 1;
            continue;
        }
        rows.push(ReflectanceRow::new(o, &models::predict_reflectance(model, &o.mean_dn, ds)?));
    }
    if skipped > 0 {
        eprintln!("warning: {skipped} observations skipped, no spectrum within {} s", g.pair_tolerance);
    }
    io::write_text(out, &io::write_reflectance(&centers, &rows)?)?;
    Ok(())
}

fn predict_cube(g: &Global, model: &ReflectanceModel, cube: &Path, spectra: Option<&[Spectrum]>, out: &Path) -> Result<()> {
    let c = io::load_cube(cube)?;
    if c.bands != model.msi_bands {
        bail!(reflgen::Error::BandMismatch("cube bands differ from the model's".into()));
    }
    let ds = spectra.and_then(|s| nearest_spectrum(s, c.timestamp, g.pair_tolerance));
    if model.kind.needs_reference() && ds.is_none() {
        bail!(reflgen::Error::MissingReference);
    }
    let plane = c.plane_len();
    let pixels = reflgen::par::map_range(plane, |p| {
        let dn: Vec<f64> = (0..c.band_count()).map(|b| c.data[b * plane + p]).collect();
        models::predict_reflectance(model, &dn, ds)
    });
    let mut data = vec![f64::NAN; c.data.len()];
    for (p, pred) in pixels.into_iter().enumerate() {
        for (b, v) in pred?.reflectance.into_iter().enumerate() {
            data[b * plane + p] = v.unwrap_or(f64::NAN);
        }
    }
    let refl = ImageCube::new(c.bands.clone(), c.rows, c.cols, data, c.timestamp, c.exposure_ms, c.saturation_dn)?;
    io::save_cube(&refl, out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_models(
    g: &Global,
    cfg: &ScenarioConfig,
    model_paths: &[PathBuf],
    observations: &Path,
    spectra: &Path,
    elm_refs: Option<&Path>,
    elm_window: f64,
    uav_heading: f64,
    out: &Path,
) -> Result<()> {
    let (bands, obs) = read_observations(observations, cfg)?;
    let centers: Vec<f64> = bands.iter().map(|b| b.center_nm).collect();
    let raw = io::read_spectra(&io::read_text(spectra)?)?;
    let grid = raw.first().map(|s| s.grid.clone()).context("spectrum file is empty")?;
    let mut results = Vec::new();
    for p in model_paths {
        let mf = ModelFile::from_json(&io::read_text(p)?).with_context(|| format!("reading {}", p.display()))?;
        check_model_bands(&mf.model, &centers)?;
        let s = match &mf.heading {
            Some(b) => correct_spectra(&raw, b, uav_heading, &cfg.location)?,
            None => raw.clone(),
        };
        let predictions = obs
            .iter()
            .map(|o| {
                let ds = nearest_spectrum(&s, o.timestamp, g.pair_tolerance);
                models::predict_reflectance(&mf.model, &o.mean_dn, ds).ok()
            })
            .collect();
        let label = match mf.model.kind {
            ModelKind::Elm => "ELM-static".to_string(),
            _ => mf.model.kind.label(),
        };
        results.push(ModelResult { label, predictions, excluded_bands: mf.model.excluded_bands.clone(), annotations: mf.model.warnings.clone() });
    }
    if let Some(r) = elm_refs {
        let (_, refs) = read_observations(r, cfg)?;
        let protocol = ElmProtocol { window_s: elm_window, seed: g.seed.unwrap_or(0) };
        let predictions = models::predict_elm_series(&refs, &obs, &bands, &protocol).into_iter().map(|p| p.ok()).collect();
        results.push(ModelResult { label: "ELM".into(), predictions, excluded_bands: vec![], annotations: vec![] });
    }
    let (lo, hi) = (grid.centers()[0], grid.centers()[grid.len() - 1]);
    let in_ds: Vec<bool> = bands.iter().map(|b| b.center_nm >= lo && b.center_nm <= hi).collect();
    let report = compare_models(&results, &obs, &bands, &in_ds)?;
    io::write_text(out, &report.to_csv())?;
    print!("{}", report.to_text(g.percent));
    Ok(())
}

fn indices_rows(reflectance: &Path, red: f64, nir: f64, out: &Path) -> Result<()> {
    let (centers, rows) = io::read_reflectance(&io::read_text(reflectance)?)?;
    let bands: Vec<BandDef> = centers.iter().map(|c| BandDef { center_nm: *c, fwhm_nm: 0.0 }).collect();
    let (r, n) = index_bands(&bands, red, nir)?;
    let mut text = String::from("panel_id,timestamp,condition,ndvi,dvi\n");
    let mut ndvi_all = Vec::new();
    let mut dvi_all = Vec::new();
    for row in &rows {
        let (ndvi, dvi) = match (row.reflectance[n], row.reflectance[r]) {
            (Some(nv), Some(rv)) => {
                let (nd, d) = vegetation_indices(nv, rv);
                nd.into_iter().for_each(|v| ndvi_all.push(v));
                dvi_all.push(d);
                (nd.map_or(String::new(), io::fmt_value), io::fmt_value(d))
            }
            _ => (String::new(), String::new()),
        };
        text.push_str(&format!("{},{},{},{ndvi},{dvi}\n", row.panel_id, io::fmt_timestamp(row.timestamp), row.condition));
    }
    io::write_text(out, &text)?;
    for (name, v) in [("ndvi", &ndvi_all), ("dvi", &dvi_all)] {
        match evaluate::cv(v) {
            Ok(cv) => println!("{name} cv {}", io::fmt_value(cv)),
            Err(e) => println!("{name} cv undefined ({e})"),
        }
    }
    Ok(())
}

fn indices_cube(cube: &Path, red: f64, nir: f64, out_dir: &Path) -> Result<()> {
    let c = io::load_cube(cube)?;
    let maps = index_maps(&c, red, nir)?;
    create_dir(out_dir)?;
    let band = vec![BandDef { center_nm: nir, fwhm_nm: 0.0 }];
    for (name, data) in [("ndvi", maps.ndvi), ("dvi", maps.dvi)] {
        let m = ImageCube::new(band.clone(), maps.rows, maps.cols, data, c.timestamp, 1.0, f64::MAX)?;
        io::save_cube(&m, &out_dir.join(format!("{name}.json")))?;
    }
    if maps.undefined_ndvi > 0 {
        eprintln!("warning: NDVI undefined at {} pixels", maps.undefined_ndvi);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use reflgen::spectral::WavelengthGrid;

    fn spectra(offsets_s: &[i64]) -> Vec<Spectrum> {
        let grid = WavelengthGrid::regular(632.0, 644.0, 6.0).unwrap();
        let t0: DateTime<Utc> = "2024-05-08T02:00:00Z".parse().unwrap();
        offsets_s.iter().map(|s| Spectrum::new(grid.clone(), vec![1.0; 3], t0 + Duration::seconds(*s), 100.0).unwrap()).collect()
    }

    #[test]
    fn nearest_spectrum_picks_closest_within_tolerance() {
        let s = spectra(&[0, 10, 20]);
        let t0 = s[0].timestamp;
        assert_eq!(nearest_spectrum(&s, t0 + Duration::seconds(11), 1.5).unwrap().timestamp, s[1].timestamp);
        assert_eq!(nearest_spectrum(&s, t0 + Duration::seconds(19), 1.5).unwrap().timestamp, s[2].timestamp);
        assert!(nearest_spectrum(&s, t0 + Duration::seconds(5), 1.5).is_none());
        assert_eq!(nearest_spectrum(&s, t0 - Duration::seconds(1), 1.5).unwrap().timestamp, t0);
        assert!(nearest_spectrum(&s, t0 + Duration::seconds(40), 1.5).is_none());
        assert!(nearest_spectrum(&[], t0, 1.5).is_none());
    }

    #[test]
    fn resolve_bands_uses_configured_widths() {
        let cfg = ScenarioConfig::default();
        let b = resolve_bands(&[603.0, 868.0], &cfg).unwrap();
        assert_eq!(b, vec![cfg.msi_bands[0], cfg.msi_bands[24]]);
        let err = resolve_bands(&[700.0], &cfg).unwrap_err();
        assert_eq!(err.downcast_ref::<reflgen::Error>().unwrap().kind(), "BandMismatch");
    }

    #[test]
    fn per_band_mean_averages_rows() {
        assert_eq!(per_band_mean(&[vec![1.0, 4.0], vec![3.0, 8.0]]).unwrap(), vec![2.0, 6.0]);
        assert!(per_band_mean(&[]).is_err());
    }

    #[test]
    fn mode_mapping() {
        assert_eq!(correction_mode(ModeArg::PerBand), CorrectionMode::PerBand);
        assert_eq!(correction_mode(ModeArg::BandAveraged), CorrectionMode::BandAveraged);
    }
}
