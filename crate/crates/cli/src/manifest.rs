//! Machine-readable run manifest.
//!
//! Every subcommand writes one `key=value`-per-line report recording what
//! ran: the config hash, effective seeds, the full material parameter
//! set, per-stage wall times, and per-case outcomes. The file is the
//! reproducibility receipt for a run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use debrisflow_core::error::{Error, Result};
use debrisflow_core::solver::MaterialParams;
use sha2::{Digest, Sha256};

pub struct Manifest {
    lines: Vec<(String, String)>,
    started: Instant,
}

impl Manifest {
    pub fn new(subcommand: &str) -> Self {
        let mut m = Manifest { lines: Vec::new(), started: Instant::now() };
        m.set("tool", format!("debrisflow {}", env!("CARGO_PKG_VERSION")));
        m.set("subcommand", subcommand);
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    /// Records the config provenance: path and SHA-256 of the raw bytes.
    pub fn set_config(&mut self, origin: &Path, raw: &str) {
        self.set("config_path", origin.display());
        let mut hasher = Sha256::new();
        hasher.update(raw.as_bytes());
        let digest = hasher.finalize();
        let hex: String = digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
        self.set("config_sha256", hex);
    }

    /// Records the full material parameter set.
    pub fn set_material(&mut self, m: &MaterialParams) {
        self.set("material.d_m", m.d_m);
        self.set("material.d_e", m.d_e);
        self.set("material.phi_deg", m.phi_deg);
        self.set("material.r_c", m.r_c);
        self.set("material.q_add", m.q_add);
        self.set("material.t_add", m.t_add);
        self.set("material.n_m", m.n_m);
        self.set("material.sigma", m.sigma);
        self.set("material.c_star0", m.c_star0);
        self.set("material.delta_e", m.delta_e);
        self.set("material.delta_d", m.delta_d);
        self.set("material.g", m.g);
        self.set("material.h_min", m.h_min);
        self.set("material.courant", m.courant);
    }

    /// Times a pipeline stage and records its wall time. The closure gets
    /// the manifest back so stages can record their own facts.
    pub fn stage<T>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> Result<T> {
        let started = Instant::now();
        let out = f(self);
        self.set(
            &format!("stage.{name}.wall_s"),
            format!("{:.6}", started.elapsed().as_secs_f64()),
        );
        out
    }

    /// Serializes the report, appending the total wall time and status.
    pub fn to_text(&self, status: &str, error: Option<&str>) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(out, "{k}={v}");
        }
        if let Some(e) = error {
            let _ = writeln!(out, "error={}", e.replace('\n', " "));
        }
        let _ = writeln!(out, "total_wall_s={:.6}", self.started.elapsed().as_secs_f64());
        let _ = writeln!(out, "status={status}");
        out
    }

    /// Writes `manifest_<subcommand>.txt` into the output directory.
    pub fn write(&self, out_dir: &Path, status: &str, error: Option<&str>) -> Result<PathBuf> {
        let sub = self
            .lines
            .iter()
            .find(|(k, _)| k == "subcommand")
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| "run".to_string());
        let path = out_dir.join(format!("manifest_{sub}.txt"));
        std::fs::write(&path, self.to_text(status, error))
            .map_err(|e| Error::domain(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}
