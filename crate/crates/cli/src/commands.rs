//! Subcommand implementations wiring the library pipeline to files.

use std::path::Path;

use debrisflow_core::ensemble::{ensemble_stats, failure_count, run_ensemble_with};
use debrisflow_core::error::{Error, Result};
use debrisflow_core::evaluation::{classify_change, macro_f1, parameter_sweep, CLASSES};
use debrisflow_core::raster::{resample_nearest, Raster};
use debrisflow_core::render::{write_ppm, ColorRamp};
use debrisflow_core::solver::{run_with, MaterialParams, SourceForcing};
use debrisflow_core::source_model::{
    collect_training, fit_logistic, predict_probability, sample_sources, FitOptions,
    LogisticModel, SourceFeatures, SourceRealization,
};
use debrisflow_core::swi::{max_swi_raster, swi_series, RainPulse, TankParams};
use debrisflow_core::synthetic::v_valley_catchment;
use debrisflow_core::terrain::analyze;

use crate::config::RunConfig;
use crate::manifest::Manifest;

fn read_raster(path: &Path) -> Result<Raster> {
    Raster::read_ascii_path(path)
}

/// Finite data range over live cells, padded when degenerate.
fn data_range(r: &Raster) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in r.values() {
        if r.is_nodata_value(v) || !v.is_finite() {
            continue;
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo, lo + 1.0);
    }
    (lo, hi)
}

/// Symmetric range around zero for signed fields.
fn symmetric_range(r: &Raster) -> (f64, f64) {
    let (lo, hi) = data_range(r);
    let m = lo.abs().max(hi.abs()).max(1e-12);
    (-m, m)
}

fn write_outputs(
    raster: &Raster,
    out_dir: &Path,
    stem: &str,
    ramp: ColorRamp,
    range: (f64, f64),
    m: &mut Manifest,
) -> Result<()> {
    let asc = out_dir.join(format!("{stem}.asc"));
    raster.write_ascii_path(&asc)?;
    m.set(&format!("output.{stem}"), asc.display());
    let ppm = out_dir.join(format!("{stem}.ppm"));
    write_ppm(raster, ramp, range.0, range.1, &ppm)?;
    m.set(&format!("output.{stem}_image"), ppm.display());
    println!("wrote {}", asc.display());
    Ok(())
}

/// Parses a two-column rainfall series: `duration_h,intensity_mm_h` per
/// line, optional header.
fn read_rain_csv(path: &Path) -> Result<Vec<RainPulse>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::domain(format!("cannot read {}: {e}", path.display())))?;
    let mut pulses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut cols = trimmed.split(',').map(str::trim);
        let (Some(a), Some(b)) = (cols.next(), cols.next()) else {
            return Err(Error::domain(format!(
                "{}:{}: expected `duration_h,intensity_mm_h`",
                path.display(),
                i + 1
            )));
        };
        match (a.parse::<f64>(), b.parse::<f64>()) {
            (Ok(duration_h), Ok(intensity_mm_h)) => {
                pulses.push(RainPulse { duration_h, intensity_mm_h })
            }
            _ if i == 0 => continue, // header row
            _ => {
                return Err(Error::domain(format!(
                    "{}:{}: cannot parse `{trimmed}` as two numbers",
                    path.display(),
                    i + 1
                )));
            }
        }
    }
    if pulses.is_empty() {
        return Err(Error::domain(format!(
            "{} holds no rainfall pulses",
            path.display()
        )));
    }
    Ok(pulses)
}

/// Produces the maximum soil-water-index raster from whichever rain input
/// the config supplies (precomputed raster, gridded stack, or scalar
/// series spread over the coarse grid).
fn swi_input(cfg: &RunConfig, m: &mut Manifest) -> Result<Raster> {
    if let Some(path) = &cfg.paths.swi {
        m.set("swi.source", "file");
        return read_raster(path);
    }
    let tank = TankParams::default();
    if !cfg.paths.rain_stack.is_empty() {
        let stack: Vec<Raster> = cfg
            .paths
            .rain_stack
            .iter()
            .map(|p| read_raster(p))
            .collect::<Result<_>>()?;
        m.set("swi.source", "rain_stack");
        m.set("swi.frames", stack.len());
        m.set("swi.interval_minutes", cfg.run.rain_interval_minutes);
        return max_swi_raster(&stack, cfg.run.rain_interval_minutes, &tank);
    }
    if let Some(csv) = &cfg.paths.rain_csv {
        let pulses = read_rain_csv(csv)?;
        let series = swi_series(&pulses, &tank, None)?;
        let coarse = read_raster(cfg.require("dem_coarse", &cfg.paths.dem_coarse)?)?;
        m.set("swi.source", "rain_csv");
        m.set("swi.pulses", pulses.len());
        m.set("swi.max", series.max_swi);
        let mut out = Raster::filled(*coarse.geometry(), coarse.nodata(), series.max_swi)?;
        for i in 0..coarse.values().len() {
            if coarse.is_nodata_value(coarse.values()[i]) {
                out.values_mut()[i] = out.nodata();
            }
        }
        return Ok(out);
    }
    Err(Error::domain(format!(
        "config {} is missing rain input: set [paths] swi, rain_stack, or rain_csv",
        cfg.origin.display()
    )))
}

pub fn cmd_swi(cfg: &RunConfig, out_dir: &Path, m: &mut Manifest) -> Result<()> {
    let swi = m.stage("integrate", |m| swi_input(cfg, m))?;
    let range = data_range(&swi);
    m.stage("write", |m| {
        write_outputs(&swi, out_dir, "swi_max", ColorRamp::Heat, (0.0, range.1), m)
    })
}

/// Loads or fits the susceptibility coefficients.
fn model_input(
    cfg: &RunConfig,
    features: &SourceFeatures,
    out_dir: &Path,
    m: &mut Manifest,
) -> Result<LogisticModel> {
    if let Some(path) = &cfg.model.coefficients {
        m.set("model.source", "coefficients");
        return LogisticModel::read_path(path);
    }
    if let Some(labels_path) = &cfg.model.labels {
        let labels = read_raster(labels_path)?;
        let (rows, outcomes) = collect_training(features, &labels)?;
        let fitted = fit_logistic(&rows, &outcomes, &FitOptions::default())?;
        m.set("model.source", "fitted");
        m.set("model.training_rows", rows.len());
        let path = out_dir.join("fitted_model.txt");
        fitted.write_path(&path)?;
        m.set("output.fitted_model", path.display());
        return Ok(fitted);
    }
    m.set("model.source", "builtin");
    Ok(LogisticModel::builtin())
}

pub fn cmd_susceptibility(cfg: &RunConfig, out_dir: &Path, m: &mut Manifest) -> Result<()> {
    let dem = read_raster(cfg.require("dem_coarse", &cfg.paths.dem_coarse)?)?;
    let swi = m.stage("swi", |m| swi_input(cfg, m))?;
    let swi = if swi.geometry() == dem.geometry() {
        swi
    } else {
        resample_nearest(&swi, dem.geometry())?
    };
    let terrain = m.stage("terrain", |_| analyze(&dem))?;
    let mask = match &cfg.paths.geology_mask {
        Some(p) => Some(read_raster(p)?),
        None => None,
    };
    let features = SourceFeatures {
        swi_max: &swi,
        terrain: &terrain,
        mask: mask.as_ref(),
    };
    let model = m.stage("model", |m| model_input(cfg, &features, out_dir, m))?;
    let prob = m.stage("predict", |_| predict_probability(&features, &model))?;
    m.set("probability.live_cells", prob.live_cells());
    m.stage("write", |m| {
        write_outputs(&prob, out_dir, "probability", ColorRamp::Heat, (0.0, 1.0), m)
    })
}

pub fn cmd_sample(
    cfg: &RunConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let prob = read_raster(cfg.require("probability", &cfg.paths.probability)?)?;
    let seed = seed_override.unwrap_or(cfg.ensemble.base_seed);
    m.set("seed", seed);
    let real = m.stage("sample", |_| sample_sources(&prob, seed))?;
    m.set("realization.cells", real.cells.len());
    let path = out_dir.join("realization.csv");
    real.write_csv_path(&path)?;
    m.set("output.realization", path.display());
    println!("wrote {} ({} source cells)", path.display(), real.cells.len());
    Ok(())
}

/// Loads the source forcing for a fine-grid run: an explicit realization
/// file when configured, otherwise a seeded draw from the probability
/// raster.
fn forcing_input(
    cfg: &RunConfig,
    dem: &Raster,
    seed_override: Option<u64>,
    m: &mut Manifest,
) -> Result<SourceForcing> {
    if let Some(path) = &cfg.paths.realization {
        let real = SourceRealization::read_csv_path(path)?;
        m.set("sources.from", "realization");
        m.set("sources.seed", real.seed);
        m.set("sources.cells", real.cells.len());
        return SourceForcing::from_realization(&real, dem.geometry());
    }
    if let Some(path) = &cfg.paths.probability {
        let prob = read_raster(path)?;
        let seed = seed_override.unwrap_or(cfg.ensemble.base_seed);
        let real = sample_sources(&prob, seed)?;
        m.set("sources.from", "sampled");
        m.set("sources.seed", seed);
        m.set("sources.cells", real.cells.len());
        return SourceForcing::from_realization(&real, dem.geometry());
    }
    Err(Error::domain(format!(
        "config {} is missing source input: set [paths] realization or probability",
        cfg.origin.display()
    )))
}

pub fn cmd_simulate(
    cfg: &RunConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let dem = read_raster(cfg.require("dem_fine", &cfg.paths.dem_fine)?)?;
    let forcing = forcing_input(cfg, &dem, seed_override, m)?;
    m.set_material(&cfg.material);
    m.set("run.duration_s", cfg.run.duration_s);
    m.set("run.dt_max", cfg.run.dt_max);
    let case = m.stage("run", |_| run_with(&dem, &forcing, cfg.material, cfg.run.options()))?;
    m.set("run.steps", case.steps);
    m.set("run.wall_s", format!("{:.6}", case.runtime_s));
    m.set("ledger.water_residual", format!("{:e}", case.ledger.water_residual()));
    m.set(
        "ledger.sediment_residual",
        format!("{:e}", case.ledger.sediment_residual()),
    );
    m.stage("write", |m| {
        let ledger_path = out_dir.join("ledger.txt");
        std::fs::write(&ledger_path, case.ledger.to_text())
            .map_err(|e| Error::domain(format!("cannot write {}: {e}", ledger_path.display())))?;
        m.set("output.ledger", ledger_path.display());
        for (t, depth) in &case.snapshots {
            let path = out_dir.join(format!("depth_{t:07.1}.asc"));
            depth.write_ascii_path(&path)?;
        }
        write_outputs(
            &case.delta_z,
            out_dir,
            "delta_z",
            ColorRamp::Diverging,
            symmetric_range(&case.delta_z),
            m,
        )
    })
}

pub fn cmd_calibrate(
    cfg: &RunConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let dem = read_raster(cfg.require("dem_fine", &cfg.paths.dem_fine)?)?;
    let observed = read_raster(cfg.require("observed_dz", &cfg.paths.observed_dz)?)?;
    let forcing = forcing_input(cfg, &dem, seed_override, m)?;
    let candidates = cfg.sweep.candidates(&cfg.material);
    m.set("sweep.candidates", candidates.len());
    m.set("sweep.epsilon", cfg.sweep.epsilon);
    m.set("run.duration_s", cfg.run.duration_s);
    let report = m.stage("sweep", |_| {
        parameter_sweep(
            &dem,
            &forcing,
            &candidates,
            &observed,
            cfg.sweep.epsilon,
            cfg.run.options(),
        )
    })?;
    let best = report.best();
    m.set("sweep.failures", report.failure_count());
    m.set("best.f1_ave", best.f1_ave);
    m.set("best.index", best.index);
    m.set(
        "best.params",
        format!(
            "d_m={} d_e={} phi_deg={} r_c={} q_add={} t_add={}",
            best.params.d_m,
            best.params.d_e,
            best.params.phi_deg,
            best.params.r_c,
            best.params.q_add,
            best.params.t_add
        ),
    );
    m.stage("write", |m| {
        let csv_path = out_dir.join("sweep.csv");
        std::fs::write(&csv_path, report.to_csv())
            .map_err(|e| Error::domain(format!("cannot write {}: {e}", csv_path.display())))?;
        m.set("output.sweep", csv_path.display());
        let scatter_path = out_dir.join("sweep_scatter.csv");
        std::fs::write(&scatter_path, report.scatter_csv()).map_err(|e| {
            Error::domain(format!("cannot write {}: {e}", scatter_path.display()))
        })?;
        m.set("output.sweep_scatter", scatter_path.display());
        println!(
            "wrote {} ({} candidates, best f1_ave {:.4})",
            csv_path.display(),
            report.records.len(),
            best.f1_ave
        );
        Ok(())
    })
}

pub fn cmd_ensemble(
    cfg: &RunConfig,
    seed_override: Option<u64>,
    out_dir: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let dem = read_raster(cfg.require("dem_fine", &cfg.paths.dem_fine)?)?;
    let prob = read_raster(cfg.require("probability", &cfg.paths.probability)?)?;
    let base_seed = seed_override.unwrap_or(cfg.ensemble.base_seed);
    m.set_material(&cfg.material);
    m.set("ensemble.n_cases", cfg.ensemble.n_cases);
    m.set("ensemble.base_seed", base_seed);
    m.set("ensemble.epsilon", cfg.ensemble.epsilon);
    m.set("run.duration_s", cfg.run.duration_s);
    let cases = m.stage("cases", |_| {
        run_ensemble_with(
            &dem,
            &prob,
            cfg.ensemble.n_cases,
            base_seed,
            cfg.material,
            cfg.run.options(),
        )
    })?;
    for c in &cases {
        let key = format!("case.{}", c.index);
        m.set(&format!("{key}.seed"), c.seed);
        m.set(&format!("{key}.wall_s"), format!("{:.6}", c.wall_time_s));
        match &c.outcome {
            Ok(r) => {
                m.set(&format!("{key}.status"), "ok");
                m.set(&format!("{key}.steps"), r.steps);
            }
            Err(e) => {
                m.set(&format!("{key}.status"), "error");
                m.set(&format!("{key}.error"), e.replace('\n', " "));
            }
        }
    }
    let failures = failure_count(&cases);
    m.set("ensemble.failures", failures);
    if failures > 0 {
        eprintln!("warning: {failures} of {} cases failed", cases.len());
    }
    let stats = m.stage("aggregate", |_| ensemble_stats(&cases, cfg.ensemble.epsilon))?;
    m.set("ensemble.successful_cases", stats.n_cases);
    m.stage("write", |m| {
        write_outputs(
            &stats.mean_dz,
            out_dir,
            "mean_dz",
            ColorRamp::Diverging,
            symmetric_range(&stats.mean_dz),
            m,
        )?;
        write_outputs(
            &stats.rel_std_log10,
            out_dir,
            "rel_std_log10",
            ColorRamp::Gray,
            data_range(&stats.rel_std_log10),
            m,
        )?;
        write_outputs(
            &stats.hit_frequency,
            out_dir,
            "hit_frequency",
            ColorRamp::Heat,
            (0.0, 1.0),
            m,
        )
    })
}

pub fn cmd_evaluate(cfg: &RunConfig, out_dir: &Path, m: &mut Manifest) -> Result<()> {
    let pred = read_raster(cfg.require("predicted_dz", &cfg.paths.predicted_dz)?)?;
    let obs = read_raster(cfg.require("observed_dz", &cfg.paths.observed_dz)?)?;
    m.set("evaluate.epsilon", cfg.sweep.epsilon);
    let metrics = m.stage("score", |_| {
        let p = classify_change(&pred, cfg.sweep.epsilon)?;
        let o = classify_change(&obs, cfg.sweep.epsilon)?;
        macro_f1(&p, &o)
    })?;
    let mut text = String::new();
    for (k, class) in CLASSES.iter().enumerate() {
        let cm = metrics.per_class[k];
        text.push_str(&format!(
            "class={} precision={} recall={} f1={}\n",
            class.label(),
            cm.precision,
            cm.recall,
            cm.f1
        ));
        m.set(&format!("f1.{}", class.label()), cm.f1);
    }
    text.push_str(&format!("f1_ave={}\n", metrics.f1_ave));
    m.set("f1_ave", metrics.f1_ave);
    let path = out_dir.join("metrics.txt");
    std::fs::write(&path, &text)
        .map_err(|e| Error::domain(format!("cannot write {}: {e}", path.display())))?;
    m.set("output.metrics", path.display());
    print!("{text}");
    Ok(())
}

pub fn cmd_render(
    input: &Path,
    ramp_name: &str,
    lo: Option<f64>,
    hi: Option<f64>,
    out_dir: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let ramp = match ramp_name.to_ascii_lowercase().as_str() {
        "gray" | "grey" => ColorRamp::Gray,
        "diverging" => ColorRamp::Diverging,
        "heat" => ColorRamp::Heat,
        other => {
            return Err(Error::domain(format!(
                "unknown ramp `{other}`; expected gray, diverging, or heat"
            )));
        }
    };
    let raster = read_raster(input)?;
    let (dlo, dhi) = data_range(&raster);
    let (lo, hi) = (lo.unwrap_or(dlo), hi.unwrap_or(dhi));
    m.set("render.input", input.display());
    m.set("render.ramp", ramp_name);
    m.set("render.lo", lo);
    m.set("render.hi", hi);
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("raster");
    let path = out_dir.join(format!("{stem}.ppm"));
    write_ppm(&raster, ramp, lo, hi, &path)?;
    m.set("output.image", path.display());
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_synth(
    size: usize,
    with_observed: bool,
    observed_duration: f64,
    seed_override: Option<u64>,
    out_dir: &Path,
    m: &mut Manifest,
) -> Result<()> {
    let seed = seed_override.unwrap_or(7);
    m.set("synth.size", size);
    m.set("synth.seed", seed);
    let catchment = m.stage("generate", |_| v_valley_catchment(size))?;
    let rain_dir = out_dir.join("rain");
    std::fs::create_dir_all(&rain_dir)
        .map_err(|e| Error::domain(format!("cannot create {}: {e}", rain_dir.display())))?;
    let mut rain_names = Vec::new();
    m.stage("write", |_| {
        catchment
            .dem_fine
            .write_ascii_path(out_dir.join("dem_fine.asc"))?;
        catchment
            .dem_coarse
            .write_ascii_path(out_dir.join("dem_coarse.asc"))?;
        for (k, frame) in catchment.rain_stack.iter().enumerate() {
            let name = format!("rain/rain_{k:02}.asc");
            frame.write_ascii_path(out_dir.join(&name))?;
            rain_names.push(name);
        }
        Ok(())
    })?;
    m.set("output.dem_fine", out_dir.join("dem_fine.asc").display());
    m.set("output.dem_coarse", out_dir.join("dem_coarse.asc").display());
    m.set("output.rain_frames", rain_names.len());

    let mut observed_line = String::new();
    if with_observed {
        let observed = m.stage("observed", |m| {
            let terrain = analyze(&catchment.dem_coarse)?;
            let tank = TankParams::default();
            let swi = max_swi_raster(
                &catchment.rain_stack,
                catchment.rain_interval_minutes,
                &tank,
            )?;
            let swi = resample_nearest(&swi, catchment.dem_coarse.geometry())?;
            let features = SourceFeatures {
                swi_max: &swi,
                terrain: &terrain,
                mask: None,
            };
            let prob = predict_probability(&features, &LogisticModel::builtin())?;
            let real = sample_sources(&prob, seed)?;
            m.set("observed.sources", real.cells.len());
            let forcing =
                SourceForcing::from_realization(&real, catchment.dem_fine.geometry())?;
            let opts = debrisflow_core::solver::RunOptions {
                duration_s: observed_duration,
                ..Default::default()
            };
            let case = run_with(&catchment.dem_fine, &forcing, MaterialParams::default(), opts)?;
            m.set("observed.steps", case.steps);
            Ok(case.delta_z)
        })?;
        observed.write_ascii_path(out_dir.join("observed_dz.asc"))?;
        m.set("output.observed_dz", out_dir.join("observed_dz.asc").display());
        observed_line = "observed_dz = observed_dz.asc\n".to_string();
    }

    // A ready-to-run config next to the data; later pipeline stages write
    // into the same directory, so the chained inputs resolve once those
    // stages have run.
    let config = format!(
        "# Generated demo configuration.\n\
         [paths]\n\
         dem_fine = dem_fine.asc\n\
         dem_coarse = dem_coarse.asc\n\
         rain_stack = {rain_list}\n\
         probability = probability.asc\n\
         realization = realization.csv\n\
         predicted_dz = delta_z.asc\n\
         {observed_line}\
         \n\
         [run]\n\
         duration_s = 3600\n\
         dt_max = 0.5\n\
         rain_interval_minutes = {interval}\n\
         \n\
         [ensemble]\n\
         n_cases = 10\n\
         base_seed = {seed}\n\
         epsilon = 0.05\n\
         \n\
         [sweep]\n\
         epsilon = 0.05\n\
         d_m = 0.02, 0.05\n\
         t_add = 10, 100\n\
         \n\
         [output]\n\
         dir = .\n",
        rain_list = rain_names.join(", "),
        interval = catchment.rain_interval_minutes,
        observed_line = observed_line,
        seed = seed,
    );
    let config_path = out_dir.join("synthetic.conf");
    std::fs::write(&config_path, config)
        .map_err(|e| Error::domain(format!("cannot write {}: {e}", config_path.display())))?;
    m.set("output.config", config_path.display());
    println!("wrote {}", config_path.display());
    Ok(())
}
