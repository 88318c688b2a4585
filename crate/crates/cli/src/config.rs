//! Flat-sectioned key=value run configuration.
//!
//! The file format is deliberately small: `[section]` headers, one
//! `key = value` pair per line, `#` or `;` comments, and blank lines.
//! Lists are comma-separated. Unknown sections or keys are rejected by
//! name so typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use debrisflow_core::error::{Error, Result};
use debrisflow_core::evaluation::CandidateLists;
use debrisflow_core::solver::{MaterialParams, RunOptions};

/// Parsed and validated configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub material: MaterialParams,
    pub run: RunSection,
    pub ensemble: EnsembleSection,
    pub sweep: SweepSection,
    /// Output directory from `[output] dir`.
    pub out_dir: Option<PathBuf>,
    /// Raw file bytes, kept for the manifest hash.
    pub raw: String,
    pub origin: PathBuf,
}

/// Input file locations. Relative paths resolve against the config file's
/// directory.
#[derive(Clone, Debug, Default)]
pub struct Paths {
    pub dem_fine: Option<PathBuf>,
    pub dem_coarse: Option<PathBuf>,
    pub geology_mask: Option<PathBuf>,
    pub rain_stack: Vec<PathBuf>,
    pub rain_csv: Option<PathBuf>,
    pub swi: Option<PathBuf>,
    pub probability: Option<PathBuf>,
    pub realization: Option<PathBuf>,
    pub observed_dz: Option<PathBuf>,
    pub predicted_dz: Option<PathBuf>,
}

/// Where the susceptibility coefficients come from.
#[derive(Clone, Debug, Default)]
pub struct ModelConfig {
    /// Read coefficients from this text file.
    pub coefficients: Option<PathBuf>,
    /// Fit coefficients against this labelled source raster.
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunSection {
    pub duration_s: f64,
    pub dt_max: f64,
    pub snapshot_every: Option<f64>,
    pub max_steps: Option<u64>,
    pub rain_interval_minutes: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        let o = RunOptions::default();
        Self {
            duration_s: o.duration_s,
            dt_max: o.dt_max,
            snapshot_every: None,
            max_steps: None,
            rain_interval_minutes: 60.0,
        }
    }
}

impl RunSection {
    pub fn options(&self) -> RunOptions {
        RunOptions {
            duration_s: self.duration_s,
            dt_max: self.dt_max,
            snapshot_every: self.snapshot_every,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleSection {
    pub n_cases: usize,
    pub base_seed: u64,
    /// Hit tolerance on |bed change| (m).
    pub epsilon: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { n_cases: 10, base_seed: 0, epsilon: 0.05 }
    }
}

#[derive(Clone, Debug)]
pub struct SweepSection {
    /// Candidate values per parameter; `None` keeps the built-in grid.
    pub lists: Option<CandidateLists>,
    /// Classification tolerance on |bed change| (m).
    pub epsilon: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { lists: None, epsilon: 0.05 }
    }
}

impl SweepSection {
    /// Expands the configured (or default) grid over `base`.
    pub fn candidates(&self, base: &MaterialParams) -> Vec<MaterialParams> {
        let defaults = CandidateLists::default();
        let singleton = |list: &[f64], fallback: f64| {
            if list.is_empty() { vec![fallback] } else { list.to_vec() }
        };
        let lists = match &self.lists {
            Some(l) => CandidateLists {
                d_m: singleton(&l.d_m, base.d_m),
                d_e: singleton(&l.d_e, base.d_e),
                phi_deg: singleton(&l.phi_deg, base.phi_deg),
                r_c: singleton(&l.r_c, base.r_c),
                q_add: singleton(&l.q_add, base.q_add),
                t_add: singleton(&l.t_add, base.t_add),
            },
            None => defaults,
        };
        lists.expand(base)
    }
}

/// One parsed `key = value` with its location for error messages.
struct Entry {
    section: String,
    key: String,
    value: String,
    line: usize,
}

fn parse_entries(text: &str, origin: &Path) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with(';') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[') {
            let Some(name) = name.strip_suffix(']') else {
                return Err(Error::domain(format!(
                    "{}:{line}: unterminated section header `{trimmed}`",
                    origin.display()
                )));
            };
            section = name.trim().to_ascii_lowercase();
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::domain(format!(
                "{}:{line}: expected `key = value`, got `{trimmed}`",
                origin.display()
            )));
        };
        if section.is_empty() {
            return Err(Error::domain(format!(
                "{}:{line}: `{}` appears before any [section] header",
                origin.display(),
                key.trim()
            )));
        }
        entries.push(Entry {
            section: section.clone(),
            key: key.trim().to_ascii_lowercase(),
            value: value.trim().to_string(),
            line,
        });
    }
    Ok(entries)
}

fn parse_f64(e: &Entry, origin: &Path) -> Result<f64> {
    e.value.parse().map_err(|_| {
        Error::domain(format!(
            "{}:{}: [{}] {} must be a number, got `{}`",
            origin.display(),
            e.line,
            e.section,
            e.key,
            e.value
        ))
    })
}

fn parse_u64(e: &Entry, origin: &Path) -> Result<u64> {
    e.value.parse().map_err(|_| {
        Error::domain(format!(
            "{}:{}: [{}] {} must be a non-negative integer, got `{}`",
            origin.display(),
            e.line,
            e.section,
            e.key,
            e.value
        ))
    })
}

fn parse_f64_list(e: &Entry, origin: &Path) -> Result<Vec<f64>> {
    e.value
        .split(',')
        .map(|part| {
            part.trim().parse::<f64>().map_err(|_| {
                Error::domain(format!(
                    "{}:{}: [{}] {} must be a comma-separated number list, got `{}`",
                    origin.display(),
                    e.line,
                    e.section,
                    e.key,
                    part.trim()
                ))
            })
        })
        .collect()
}

/// Resolves a configured path against the config file's directory.
fn resolve(origin: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value);
    if p.is_absolute() {
        p
    } else {
        origin.parent().unwrap_or(Path::new(".")).join(p)
    }
}

impl RunConfig {
    /// Parses the given text as if read from `origin`.
    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let entries = parse_entries(text, origin)?;
        let mut cfg = RunConfig {
            paths: Paths::default(),
            model: ModelConfig::default(),
            material: MaterialParams::default(),
            run: RunSection::default(),
            ensemble: EnsembleSection::default(),
            sweep: SweepSection::default(),
            out_dir: None,
            raw: text.to_string(),
            origin: origin.to_path_buf(),
        };
        let mut sweep_lists = CandidateLists {
            d_m: vec![],
            d_e: vec![],
            phi_deg: vec![],
            r_c: vec![],
            q_add: vec![],
            t_add: vec![],
        };
        let mut any_sweep_list = false;
        let mut seen = BTreeMap::new();
        for e in &entries {
            if let Some(prev) = seen.insert((e.section.clone(), e.key.clone()), e.line) {
                return Err(Error::domain(format!(
                    "{}:{}: [{}] {} already set on line {prev}",
                    origin.display(),
                    e.line,
                    e.section,
                    e.key
                )));
            }
            match (e.section.as_str(), e.key.as_str()) {
                ("paths", "dem_fine") => cfg.paths.dem_fine = Some(resolve(origin, &e.value)),
                ("paths", "dem_coarse") => cfg.paths.dem_coarse = Some(resolve(origin, &e.value)),
                ("paths", "geology_mask") => {
                    cfg.paths.geology_mask = Some(resolve(origin, &e.value))
                }
                ("paths", "rain_stack") => {
                    cfg.paths.rain_stack = e
                        .value
                        .split(',')
                        .map(|p| resolve(origin, p.trim()))
                        .collect()
                }
                ("paths", "rain_csv") => cfg.paths.rain_csv = Some(resolve(origin, &e.value)),
                ("paths", "swi") => cfg.paths.swi = Some(resolve(origin, &e.value)),
                ("paths", "probability") => {
                    cfg.paths.probability = Some(resolve(origin, &e.value))
                }
                ("paths", "realization") => {
                    cfg.paths.realization = Some(resolve(origin, &e.value))
                }
                ("paths", "observed_dz") => {
                    cfg.paths.observed_dz = Some(resolve(origin, &e.value))
                }
                ("paths", "predicted_dz") => {
                    cfg.paths.predicted_dz = Some(resolve(origin, &e.value))
                }
                ("model", "coefficients") => {
                    cfg.model.coefficients = Some(resolve(origin, &e.value))
                }
                ("model", "labels") => cfg.model.labels = Some(resolve(origin, &e.value)),
                ("material", "d_m") => cfg.material.d_m = parse_f64(e, origin)?,
                ("material", "d_e") => cfg.material.d_e = parse_f64(e, origin)?,
                ("material", "phi_deg") => cfg.material.phi_deg = parse_f64(e, origin)?,
                ("material", "r_c") => cfg.material.r_c = parse_f64(e, origin)?,
                ("material", "q_add") => cfg.material.q_add = parse_f64(e, origin)?,
                ("material", "t_add") => cfg.material.t_add = parse_f64(e, origin)?,
                ("material", "n_m") => cfg.material.n_m = parse_f64(e, origin)?,
                ("material", "sigma") => cfg.material.sigma = parse_f64(e, origin)?,
                ("material", "c_star0") => cfg.material.c_star0 = parse_f64(e, origin)?,
                ("material", "delta_e") => cfg.material.delta_e = parse_f64(e, origin)?,
                ("material", "delta_d") => cfg.material.delta_d = parse_f64(e, origin)?,
                ("material", "g") => cfg.material.g = parse_f64(e, origin)?,
                ("material", "h_min") => cfg.material.h_min = parse_f64(e, origin)?,
                ("material", "courant") => cfg.material.courant = parse_f64(e, origin)?,
                ("run", "duration_s") => cfg.run.duration_s = parse_f64(e, origin)?,
                ("run", "dt_max") => cfg.run.dt_max = parse_f64(e, origin)?,
                ("run", "snapshot_every") => {
                    cfg.run.snapshot_every = Some(parse_f64(e, origin)?)
                }
                ("run", "max_steps") => cfg.run.max_steps = Some(parse_u64(e, origin)?),
                ("run", "rain_interval_minutes") => {
                    cfg.run.rain_interval_minutes = parse_f64(e, origin)?
                }
                ("ensemble", "n_cases") => {
                    cfg.ensemble.n_cases = parse_u64(e, origin)? as usize
                }
                ("ensemble", "base_seed") => cfg.ensemble.base_seed = parse_u64(e, origin)?,
                ("ensemble", "epsilon") => cfg.ensemble.epsilon = parse_f64(e, origin)?,
                ("sweep", "epsilon") => cfg.sweep.epsilon = parse_f64(e, origin)?,
                ("sweep", "d_m") => {
                    sweep_lists.d_m = parse_f64_list(e, origin)?;
                    any_sweep_list = true;
                }
                ("sweep", "d_e") => {
                    sweep_lists.d_e = parse_f64_list(e, origin)?;
                    any_sweep_list = true;
                }
                ("sweep", "phi_deg") => {
                    sweep_lists.phi_deg = parse_f64_list(e, origin)?;
                    any_sweep_list = true;
                }
                ("sweep", "r_c") => {
                    sweep_lists.r_c = parse_f64_list(e, origin)?;
                    any_sweep_list = true;
                }
                ("sweep", "q_add") => {
                    sweep_lists.q_add = parse_f64_list(e, origin)?;
                    any_sweep_list = true;
                }
                ("sweep", "t_add") => {
                    sweep_lists.t_add = parse_f64_list(e, origin)?;
                    any_sweep_list = true;
                }
                ("output", "dir") => cfg.out_dir = Some(resolve(origin, &e.value)),
                (section, key) => {
                    return Err(Error::domain(format!(
                        "{}:{}: unknown configuration key [{section}] {key}",
                        origin.display(),
                        e.line
                    )));
                }
            }
        }
        if any_sweep_list {
            cfg.sweep.lists = Some(sweep_lists);
        }
        cfg.material.validate()?;
        if !(cfg.run.duration_s > 0.0 && cfg.run.duration_s.is_finite()) {
            return Err(Error::domain(format!(
                "[run] duration_s must be positive, got {}",
                cfg.run.duration_s
            )));
        }
        if !(cfg.run.dt_max > 0.0 && cfg.run.dt_max.is_finite()) {
            return Err(Error::domain(format!(
                "[run] dt_max must be positive, got {}",
                cfg.run.dt_max
            )));
        }
        Ok(cfg)
    }

    /// Loads and parses a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::domain(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_text(&text, path)
    }

    /// Fails with the offending key when a required path is absent.
    pub fn require<'a>(&'a self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        match value {
            Some(p) => Ok(p.as_path()),
            None => Err(Error::domain(format!(
                "config {} is missing required key [paths] {key}",
                self.origin.display()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::from_text(text, Path::new("/cfg/run.conf"))
    }

    #[test]
    fn defaults_apply_when_sections_are_absent() {
        let cfg = parse("[paths]\ndem_fine = dem.asc\n").unwrap();
        assert_eq!(cfg.material, MaterialParams::default());
        assert_eq!(cfg.run.duration_s, 3600.0);
        assert_eq!(cfg.ensemble.n_cases, 10);
        assert_eq!(cfg.ensemble.epsilon, 0.05);
        assert_eq!(cfg.sweep.epsilon, 0.05);
        assert!(cfg.sweep.lists.is_none());
        assert!(cfg.out_dir.is_none());
        // Relative paths resolve against the config directory.
        assert_eq!(cfg.paths.dem_fine.as_deref(), Some(Path::new("/cfg/dem.asc")));
    }

    #[test]
    fn full_config_round_trips_every_section() {
        let cfg = parse(
            "# demo\n[paths]\ndem_fine = a.asc\ndem_coarse = b.asc\n\
             rain_stack = r0.asc, r1.asc\nobserved_dz = o.asc\n\
             [model]\ncoefficients = gamma.txt\n\
             [material]\nd_m = 0.05\nphi_deg = 35\n\
             [run]\nduration_s = 120\ndt_max = 0.2\nrain_interval_minutes = 30\n\
             [ensemble]\nn_cases = 4\nbase_seed = 7\nepsilon = 0.1\n\
             [sweep]\nd_m = 0.02, 0.05\nt_add = 10,100\nepsilon = 0.01\n\
             [output]\ndir = results\n",
        )
        .unwrap();
        assert_eq!(cfg.paths.rain_stack.len(), 2);
        assert_eq!(cfg.paths.rain_stack[1], Path::new("/cfg/r1.asc"));
        assert_eq!(cfg.material.d_m, 0.05);
        assert_eq!(cfg.material.phi_deg, 35.0);
        assert_eq!(cfg.material.d_e, 1.0);
        assert_eq!(cfg.run.duration_s, 120.0);
        assert_eq!(cfg.run.rain_interval_minutes, 30.0);
        assert_eq!(cfg.ensemble.base_seed, 7);
        assert_eq!(cfg.sweep.epsilon, 0.01);
        assert_eq!(cfg.out_dir.as_deref(), Some(Path::new("/cfg/results")));
        // Configured sweep lists expand against the configured material;
        // unset parameters collapse to the base value.
        let cands = cfg.sweep.candidates(&cfg.material);
        assert_eq!(cands.len(), 4);
        assert_eq!(cands[0].phi_deg, 35.0);
        assert_eq!(cands[0].d_m, 0.02);
        assert_eq!(cands[3].d_m, 0.05);
        assert_eq!(cands[3].t_add, 100.0);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse("[paths]\ndem_fin = a.asc\n").unwrap_err().to_string();
        assert!(err.contains("dem_fin"), "{err}");
        let err = parse("[nope]\nx = 1\n").unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn malformed_lines_are_rejected_with_location() {
        let err = parse("[paths]\njust a line\n").unwrap_err().to_string();
        assert!(err.contains(":2"), "{err}");
        let err = parse("dem_fine = a.asc\n").unwrap_err().to_string();
        assert!(err.contains("before any"), "{err}");
        let err = parse("[paths\n").unwrap_err().to_string();
        assert!(err.contains("unterminated"), "{err}");
        let err = parse("[material]\nd_m = soft\n").unwrap_err().to_string();
        assert!(err.contains("must be a number"), "{err}");
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        let err = parse("[material]\nd_m = 0.1\nd_m = 0.2\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("already set"), "{err}");
    }

    #[test]
    fn invalid_material_overrides_fail_validation() {
        assert!(parse("[material]\nsigma = 0.5\n").is_err());
        assert!(parse("[run]\nduration_s = -1\n").is_err());
    }

    #[test]
    fn default_sweep_grid_is_the_full_table() {
        let cfg = parse("[paths]\ndem_fine = a.asc\n").unwrap();
        assert_eq!(cfg.sweep.candidates(&cfg.material).len(), 720);
    }

    #[test]
    fn missing_required_key_names_itself() {
        let cfg = parse("[paths]\ndem_fine = a.asc\n").unwrap();
        let err = cfg
            .require("dem_coarse", &cfg.paths.dem_coarse)
            .unwrap_err()
            .to_string();
        assert!(err.contains("dem_coarse"), "{err}");
        assert!(cfg.require("dem_fine", &cfg.paths.dem_fine).is_ok());
    }
}
