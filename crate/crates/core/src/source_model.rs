//! Logistic debris-flow source susceptibility: prediction, maximum-likelihood
//! fitting, and seeded Bernoulli realization of source cells.
//!
//! The linear predictor combines five per-cell features in fixed order:
//! maximum soil-water index (mm), log10 of contributing area (m^2), slope
//! (degrees), plan curvature and tangential curvature (1/m).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{SMatrix, SVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::{Geometry, Raster};
use crate::terrain::TerrainDerivatives;

/// Intercept plus five feature coefficients.
pub const N_COEF: usize = 6;

type Mat = SMatrix<f64, N_COEF, N_COEF>;
type Vec6 = SVector<f64, N_COEF>;

/// Numerically stable logistic function: never overflows, maps large
/// negative arguments to subnormal-free small probabilities.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fitted coefficients with Wald diagnostics. Index 0 is the intercept,
/// 1..=5 follow the feature order above.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub gamma: [f64; N_COEF],
    pub std_err: [f64; N_COEF],
    pub z_value: [f64; N_COEF],
    pub p_value: [f64; N_COEF],
}

impl LogisticModel {
    /// Reference coefficient set bundled with the toolkit, fitted to a
    /// granite-catchment debris-flow inventory from a 2018 heavy-rain event.
    pub fn builtin() -> Self {
        LogisticModel {
            gamma: [-18.5350, 0.0417, -0.7764, 0.0467, 10.2806, -37.8506],
            std_err: [0.3805, 0.0017, 0.0604, 0.0020, 1.9080, 1.5203],
            z_value: [-48.7111, 25.1712, -12.8494, 23.2909, 5.3882, -24.8971],
            p_value: [0.0, 0.0, 0.0, 0.0, 7.1169e-8, 0.0],
        }
    }

    /// Linear predictor for one feature vector.
    pub fn eta(&self, x: &[f64; 5]) -> f64 {
        let g = &self.gamma;
        g[0] + g[1] * x[0] + g[2] * x[1] + g[3] * x[2] + g[4] * x[3] + g[5] * x[4]
    }

    pub fn probability(&self, x: &[f64; 5]) -> f64 {
        stable_sigmoid(self.eta(x))
    }

    /// Serialize as six `key=value` lines; floats use shortest round-trip
    /// formatting so a read-back reproduces every coefficient bit-exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in 0..N_COEF {
            let _ = writeln!(
                out,
                "gamma{i}={} std_err={} z={} p={}",
                self.gamma[i], self.std_err[i], self.z_value[i], self.p_value[i]
            );
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut model = LogisticModel {
            gamma: [0.0; N_COEF],
            std_err: [0.0; N_COEF],
            z_value: [0.0; N_COEF],
            p_value: [0.0; N_COEF],
        };
        let mut found = [false; N_COEF];
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut idx = None;
            for field in line.split_whitespace() {
                let (key, raw) = field.split_once('=').ok_or_else(|| {
                    Error::parse(origin, lineno, format!("expected key=value, got `{field}`"))
                })?;
                let value: f64 = raw.parse().map_err(|_| {
                    Error::parse(origin, lineno, format!("invalid number `{raw}` for `{key}`"))
                })?;
                if let Some(rest) = key.strip_prefix("gamma") {
                    let i: usize = rest.parse().map_err(|_| {
                        Error::parse(origin, lineno, format!("bad coefficient key `{key}`"))
                    })?;
                    if i >= N_COEF {
                        return Err(Error::parse(origin, lineno, format!("coefficient index {i} out of range")));
                    }
                    model.gamma[i] = value;
                    found[i] = true;
                    idx = Some(i);
                } else {
                    let i = idx.ok_or_else(|| {
                        Error::parse(origin, lineno, "diagnostics must follow their gamma key")
                    })?;
                    match key {
                        "std_err" => model.std_err[i] = value,
                        "z" => model.z_value[i] = value,
                        "p" => model.p_value[i] = value,
                        other => {
                            return Err(Error::parse(origin, lineno, format!("unknown field `{other}`")))
                        }
                    }
                }
            }
        }
        if found.iter().any(|f| !f) {
            return Err(Error::parse(origin, 0, "model file must define gamma0..gamma5"));
        }
        Ok(model)
    }

    pub fn write_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }
}

/// Per-cell predictor stack. All rasters must share one geometry; the
/// optional mask silences cells that are zero or nodata in it.
#[derive(Debug, Clone, Copy)]
pub struct SourceFeatures<'a> {
    pub swi_max: &'a Raster,
    pub terrain: &'a TerrainDerivatives,
    pub mask: Option<&'a Raster>,
}

impl<'a> SourceFeatures<'a> {
    fn validate(&self) -> Result<()> {
        let t = self.terrain;
        let all = [&t.slope_deg, &t.plan_curv, &t.tan_curv, &t.flow_acc];
        for r in all {
            if !r.same_geometry(self.swi_max) {
                return Err(Error::domain("feature rasters do not share one geometry"));
            }
        }
        if let Some(m) = self.mask {
            if !m.same_geometry(self.swi_max) {
                return Err(Error::domain("mask geometry does not match the feature rasters"));
            }
        }
        Ok(())
    }

    /// Feature vector at a cell, or None where any input (or the mask) is
    /// silent. Fails on non-positive contributing area.
    fn vector(&self, row: usize, col: usize) -> Result<Option<[f64; 5]>> {
        if let Some(m) = self.mask {
            if m.is_nodata(row, col) || m.get(row, col) == 0.0 {
                return Ok(None);
            }
        }
        let t = self.terrain;
        let swi = self.swi_max.get(row, col);
        let acc = t.flow_acc.get(row, col);
        let slope = t.slope_deg.get(row, col);
        let plan = t.plan_curv.get(row, col);
        let tan = t.tan_curv.get(row, col);
        if self.swi_max.is_nodata_value(swi)
            || t.flow_acc.is_nodata_value(acc)
            || t.slope_deg.is_nodata_value(slope)
            || t.plan_curv.is_nodata_value(plan)
            || t.tan_curv.is_nodata_value(tan)
        {
            return Ok(None);
        }
        if acc <= 0.0 {
            return Err(Error::domain(format!(
                "contributing area must be positive to take log10, got {acc} at ({row}, {col})"
            )));
        }
        Ok(Some([swi, acc.log10(), slope, plan, tan]))
    }
}

/// Per-cell source probability. Cells silent in any feature stay nodata.
pub fn predict_probability(features: &SourceFeatures, model: &LogisticModel) -> Result<Raster> {
    features.validate()?;
    let geom = *features.swi_max.geometry();
    let nodata = features.swi_max.nodata();
    let mut out = Raster::filled(geom, nodata, nodata)?;
    for row in 0..geom.nrows {
        for col in 0..geom.ncols {
            if let Some(x) = features.vector(row, col)? {
                out.set(row, col, model.probability(&x));
            }
        }
    }
    Ok(out)
}

/// Assemble fitting rows from the feature stack and a label raster
/// (nonzero = source cell). Cells silent in features or labels are dropped.
pub fn collect_training(features: &SourceFeatures, labels: &Raster) -> Result<(Vec<[f64; 5]>, Vec<bool>)> {
    features.validate()?;
    if !labels.same_geometry(features.swi_max) {
        return Err(Error::domain("label raster geometry does not match the features"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for row in 0..labels.nrows() {
        for col in 0..labels.ncols() {
            if labels.is_nodata(row, col) {
                continue;
            }
            if let Some(x) = features.vector(row, col)? {
                xs.push(x);
                ys.push(labels.get(row, col) != 0.0);
            }
        }
    }
    Ok((xs, ys))
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence threshold on the max absolute coefficient update.
    pub tol: f64,
    /// Declare separation when any |coefficient| exceeds this bound.
    pub divergence_bound: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iter: 100, tol: 1e-8, divergence_bound: 1e3 }
    }
}

/// Maximum-likelihood logistic fit by Newton iteration on the score
/// equations (iteratively reweighted least squares).
pub fn fit_logistic(rows: &[[f64; 5]], labels: &[bool], opts: &FitOptions) -> Result<LogisticModel> {
    if rows.len() != labels.len() {
        return Err(Error::domain(format!(
            "{} feature rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::domain("fit requires at least one positive and one negative label"));
    }
    for (i, x) in rows.iter().enumerate() {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain(format!("non-finite feature in row {i}")));
        }
    }

    let design = |x: &[f64; 5]| {
        Vec6::from([1.0, x[0], x[1], x[2], x[3], x[4]])
    };

    let mut beta = Vec6::zeros();
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let mut info = Mat::zeros();
        let mut score = Vec6::zeros();
        for (x, &y) in rows.iter().zip(labels) {
            let xv = design(x);
            let p = stable_sigmoid(beta.dot(&xv));
            let w = p * (1.0 - p);
            score += xv * (f64::from(y) - p);
            info += xv * xv.transpose() * w;
        }
        let delta = info
            .lu()
            .solve(&score)
            .ok_or(Error::SingularFit)?;
        beta += delta;
        if beta.amax() > opts.divergence_bound {
            return Err(Error::Separation(opts.divergence_bound));
        }
        if delta.amax() < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence(opts.max_iter));
    }

    // Wald diagnostics from the inverse information at the optimum.
    let mut info = Mat::zeros();
    for x in rows {
        let xv = design(x);
        let p = stable_sigmoid(beta.dot(&xv));
        info += xv * xv.transpose() * (p * (1.0 - p));
    }
    let cov = info.try_inverse().ok_or(Error::SingularFit)?;

    let mut model = LogisticModel {
        gamma: [0.0; N_COEF],
        std_err: [0.0; N_COEF],
        z_value: [0.0; N_COEF],
        p_value: [0.0; N_COEF],
    };
    for i in 0..N_COEF {
        let var = cov[(i, i)];
        if !(var.is_finite() && var > 0.0) {
            return Err(Error::SingularFit);
        }
        let se = var.sqrt();
        let z = beta[i] / se;
        model.gamma[i] = beta[i];
        model.std_err[i] = se;
        model.z_value[i] = z;
        // Two-sided normal tail.
        model.p_value[i] = libm::erfc(z.abs() / std::f64::consts::SQRT_2);
    }
    Ok(model)
}

/// A sampled set of source cells on the probability raster's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceRealization {
    pub seed: u64,
    pub cells: Vec<(usize, usize)>,
    pub geometry: Geometry,
}

/// Draw one Bernoulli trial per live cell, row-major.
///
/// The generator is ChaCha8 seeded via `seed_from_u64`; each live cell
/// consumes exactly one `next_u64`, mapped to [0, 1) through the top 53 bits,
/// so realizations are reproducible across platforms. Nodata cells consume
/// nothing.
pub fn sample_sources(prob: &Raster, seed: u64) -> Result<SourceRealization> {
    for (i, &p) in prob.values().iter().enumerate() {
        if prob.is_nodata_value(p) {
            continue;
        }
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::domain(format!(
                "probability {p} outside [0, 1] at cell ({}, {})",
                i / prob.ncols(),
                i % prob.ncols()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cells = Vec::new();
    for row in 0..prob.nrows() {
        for col in 0..prob.ncols() {
            let p = prob.get(row, col);
            if prob.is_nodata_value(p) {
                continue;
            }
            let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u < p {
                cells.push((row, col));
            }
        }
    }
    Ok(SourceRealization { seed, cells, geometry: *prob.geometry() })
}

impl SourceRealization {
    /// CSV with header `row,col,x_center,y_center`; the seed and grid travel
    /// in comment lines so a file round-trips into an equal realization.
    pub fn to_csv(&self) -> String {
        let g = &self.geometry;
        let mut out = String::new();
        let _ = writeln!(out, "# seed={}", self.seed);
        let _ = writeln!(
            out,
            "# grid nrows={} ncols={} xllcorner={} yllcorner={} cellsize={}",
            g.nrows, g.ncols, g.xll, g.yll, g.cellsize
        );
        out.push_str("row,col,x_center,y_center\n");
        for &(row, col) in &self.cells {
            let _ = writeln!(out, "{row},{col},{},{}", g.x_center(col), g.y_center(row));
        }
        out
    }

    pub fn from_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut seed = None;
        let mut geom = None;
        let mut cells = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("seed=") {
                    seed = Some(v.parse::<u64>().map_err(|_| {
                        Error::parse(origin, lineno, format!("bad seed `{v}`"))
                    })?);
                } else if let Some(spec) = rest.strip_prefix("grid ") {
                    let mut vals = [0.0f64; 5];
                    let keys = ["nrows", "ncols", "xllcorner", "yllcorner", "cellsize"];
                    for part in spec.split_whitespace() {
                        let (k, v) = part.split_once('=').ok_or_else(|| {
                            Error::parse(origin, lineno, format!("bad grid field `{part}`"))
                        })?;
                        let slot = keys.iter().position(|&key| key == k).ok_or_else(|| {
                            Error::parse(origin, lineno, format!("unknown grid key `{k}`"))
                        })?;
                        vals[slot] = v.parse().map_err(|_| {
                            Error::parse(origin, lineno, format!("bad grid value `{v}`"))
                        })?;
                    }
                    geom = Some(Geometry::new(
                        vals[0] as usize,
                        vals[1] as usize,
                        vals[2],
                        vals[3],
                        vals[4],
                    )?);
                }
                continue;
            }
            if line.starts_with("row,") {
                continue;
            }
            let mut it = line.split(',');
            let row: usize = it
                .next()
                .and_then(|t| t.trim().parse().ok())
                .ok_or_else(|| Error::parse(origin, lineno, "bad row index"))?;
            let col: usize = it
                .next()
                .and_then(|t| t.trim().parse().ok())
                .ok_or_else(|| Error::parse(origin, lineno, "bad col index"))?;
            cells.push((row, col));
        }
        let geometry = geom.ok_or_else(|| Error::parse(origin, 0, "missing `# grid ...` line"))?;
        for &(row, col) in &cells {
            if row >= geometry.nrows || col >= geometry.ncols {
                return Err(Error::domain(format!(
                    "source cell ({row}, {col}) outside the {}x{} grid",
                    geometry.nrows, geometry.ncols
                )));
            }
        }
        Ok(SourceRealization { seed: seed.unwrap_or(0), cells, geometry })
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }
}
