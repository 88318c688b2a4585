//! End-to-end tests driving the compiled binary on tiny grids.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_debrisflow"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Writes a small ESRI ASCII grid.
fn write_asc(path: &Path, nrows: usize, ncols: usize, cellsize: f64, values: &[f64]) {
    assert_eq!(values.len(), nrows * ncols);
    let mut text = format!(
        "ncols {ncols}\nnrows {nrows}\nxllcorner 0\nyllcorner 0\ncellsize {cellsize}\nNODATA_value -9999\n"
    );
    for r in 0..nrows {
        let row: Vec<String> = (0..ncols).map(|c| values[r * ncols + c].to_string()).collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

/// A 30x30 fine ramp at 1 m with a nested 3x3 coarse probability grid
/// whose center cell always fires.
fn write_scene(dir: &Path) -> PathBuf {
    let n = 30;
    let mut dem = Vec::with_capacity(n * n);
    for r in 0..n {
        for _ in 0..n {
            dem.push(1.5 * ((14 - r as i64).max(0)) as f64);
        }
    }
    write_asc(&dir.join("dem_fine.asc"), n, n, 1.0, &dem);
    let mut prob = vec![0.0; 9];
    prob[1] = 1.0; // coarse cell (0, 1): fine rows 0..10, cols 10..20
    write_asc(&dir.join("probability.asc"), 3, 3, 10.0, &prob);
    let config = "\
[paths]
dem_fine = dem_fine.asc
probability = probability.asc
realization = realization.csv
predicted_dz = delta_z.asc
observed_dz = delta_z.asc

[run]
duration_s = 8
dt_max = 0.25

[ensemble]
n_cases = 2
base_seed = 11
epsilon = 0.01

[sweep]
epsilon = 0.000001
d_m = 0.02, 0.05

[output]
dir = .
";
    let path = dir.join("run.conf");
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn unknown_subcommand_exits_with_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.to_ascii_lowercase().contains("usage"), "{err}");
}

#[test]
fn help_lists_every_subcommand() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for name in [
        "swi",
        "susceptibility",
        "sample",
        "simulate",
        "calibrate",
        "ensemble",
        "evaluate",
        "render",
        "synth",
    ] {
        assert!(text.contains(name), "help is missing `{name}`:\n{text}");
    }
}

#[test]
fn missing_required_path_names_the_key_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "[output]\ndir = .\n").unwrap();
    let out = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dem_fine") || err.contains("realization"), "{err}");
    // The failure still leaves a manifest recording the error.
    let manifest = read(&dir.path().join("manifest_simulate.txt"));
    assert!(manifest.contains("status=error"), "{manifest}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "[paths]\ndem_fin = x.asc\n").unwrap();
    let out = run(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dem_fin"));
}

#[test]
fn synth_writes_catchment_data_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let out_arg = dir.path().to_str().unwrap();
    let out = run(&["synth", "--size", "24", "--out", out_arg]);
    assert_ok(&out);
    for name in ["dem_fine.asc", "dem_coarse.asc", "rain/rain_00.asc", "rain/rain_23.asc", "synthetic.conf"] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let manifest = read(&dir.path().join("manifest_synth.txt"));
    assert!(manifest.contains("subcommand=synth"));
    assert!(manifest.contains("synth.size=24"));
    assert!(manifest.ends_with("status=ok\n"), "{manifest}");
    // The generated config immediately drives the rainfall stage.
    let cfg = dir.path().join("synthetic.conf");
    let out = run(&["swi", "--config", cfg.to_str().unwrap()]);
    assert_ok(&out);
    assert!(dir.path().join("swi_max.asc").exists());
    assert!(dir.path().join("swi_max.ppm").exists());
}

#[test]
fn pipeline_chains_from_sample_to_render() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_scene(dir.path());
    let cfg = cfg_path.to_str().unwrap();

    let out = run(&["sample", "--config", cfg]);
    assert_ok(&out);
    let realization = read(&dir.path().join("realization.csv"));
    assert!(realization.contains("# seed=11"), "{realization}");
    // Exactly the probability-one cell fires.
    assert!(realization.lines().filter(|l| !l.starts_with('#') && !l.starts_with("row,")).count() == 1);
    assert!(realization.contains("0,1,"), "{realization}");

    let out = run(&["simulate", "--config", cfg]);
    assert_ok(&out);
    let manifest = read(&dir.path().join("manifest_simulate.txt"));
    assert!(manifest.contains("sources.from=realization"), "{manifest}");
    assert!(manifest.contains("run.steps="), "{manifest}");
    assert!(manifest.contains("ledger.water_residual="), "{manifest}");
    assert!(manifest.contains("material.d_m=0.02"), "{manifest}");
    assert!(manifest.contains("config_sha256="), "{manifest}");
    assert!(dir.path().join("delta_z.asc").exists());
    assert!(dir.path().join("delta_z.ppm").exists());
    assert!(read(&dir.path().join("ledger.txt")).contains("water_residual="));

    // Self-evaluation of the change map it just wrote.
    let out = run(&["evaluate", "--config", cfg]);
    assert_ok(&out);
    let metrics = read(&dir.path().join("metrics.txt"));
    assert!(metrics.contains("class=erosion"), "{metrics}");
    let f1_ave: f64 = metrics
        .lines()
        .find_map(|l| l.strip_prefix("f1_ave="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(f1_ave > 0.6, "self-evaluation should score high: {metrics}");

    // Two-candidate sweep against the map the first candidate produced.
    let out = run(&["calibrate", "--config", cfg]);
    assert_ok(&out);
    let sweep = read(&dir.path().join("sweep.csv"));
    assert_eq!(sweep.lines().count(), 3, "{sweep}");
    let best = sweep.lines().nth(1).unwrap();
    assert!(best.starts_with("1,"), "rank-1 line: {best}");
    let fields: Vec<&str> = best.split(',').collect();
    assert_eq!(fields[2], "0.02", "best d_m: {best}");
    assert!(dir.path().join("sweep_scatter.csv").exists());

    let out = run(&["ensemble", "--config", cfg]);
    assert_ok(&out);
    for name in ["mean_dz.asc", "rel_std_log10.asc", "hit_frequency.asc", "hit_frequency.ppm"] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let manifest = read(&dir.path().join("manifest_ensemble.txt"));
    assert!(manifest.contains("case.0.status=ok"), "{manifest}");
    assert!(manifest.contains("case.1.seed=12"), "{manifest}");
    assert!(manifest.contains("ensemble.failures=0"), "{manifest}");

    let dz = dir.path().join("delta_z.asc");
    let out = run(&[
        "render",
        dz.to_str().unwrap(),
        "--ramp",
        "diverging",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_ok(&out);
    // render na\u{ef}vely overwrote the simulate image with the same name.
    assert!(dir.path().join("delta_z.ppm").exists());
    let bad = run(&["render", dz.to_str().unwrap(), "--ramp", "nope"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_scene(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    assert_ok(&run(&["sample", "--config", cfg]));

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let res = run(&[
            "ensemble",
            "--config",
            cfg,
            "--workers",
            "1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_ok(&res);
    }
    for name in ["mean_dz.asc", "rel_std_log10.asc", "hit_frequency.asc", "mean_dz.ppm"] {
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs between identical runs");
    }
}

#[test]
fn seed_override_flows_into_sampling() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_scene(dir.path());
    let cfg = cfg_path.to_str().unwrap();
    let out = run(&["sample", "--config", cfg, "--seed", "99"]);
    assert_ok(&out);
    let realization = read(&dir.path().join("realization.csv"));
    assert!(realization.contains("# seed=99"), "{realization}");
    let manifest = read(&dir.path().join("manifest_sample.txt"));
    assert!(manifest.contains("seed=99"), "{manifest}");
}

#[test]
fn swi_accepts_a_scalar_rain_series() {
    let dir = tempfile::tempdir().unwrap();
    write_asc(&dir.path().join("dem_coarse.asc"), 3, 3, 10.0, &[5.0; 9]);
    std::fs::write(
        dir.path().join("rain.csv"),
        "duration_h,intensity_mm_h\n1,20\n2,40\n1,5\n",
    )
    .unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(
        &cfg,
        "[paths]\ndem_coarse = dem_coarse.asc\nrain_csv = rain.csv\n[output]\ndir = .\n",
    )
    .unwrap();
    let out = run(&["swi", "--config", cfg.to_str().unwrap()]);
    assert_ok(&out);
    let swi = read(&dir.path().join("swi_max.asc"));
    assert!(swi.contains("ncols 3"), "{swi}");
    let manifest = read(&dir.path().join("manifest_swi.txt"));
    assert!(manifest.contains("swi.source=rain_csv"), "{manifest}");
    assert!(manifest.contains("swi.pulses=3"), "{manifest}");
}
