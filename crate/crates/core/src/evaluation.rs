//! Three-class scoring of simulated against observed bed change, and the
//! grid calibration sweep built on it.
//!
//! Cells are labelled Erosion / NotAffected / Deposition from the final
//! bed-elevation change with a symmetric tolerance band around zero. Each
//! class is scored one-vs-rest with precision, recall, and F1; the macro
//! score `f1_ave` is the unweighted mean of the three F1 values. A
//! parameter sweep runs one simulation per candidate parameter set against
//! fixed sources and ranks candidates by `f1_ave`.

use rayon::iter::{IndexedParallelIterator, IntoParallelRefIterator, ParallelIterator};

use crate::error::{Error, Result};
use crate::raster::{Geometry, Raster};
use crate::solver::{run_with, MaterialParams, RunOptions, SourceForcing};

/// Per-cell bed-change label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChangeClass {
    Erosion,
    NotAffected,
    Deposition,
}

/// The three labels in reporting order.
pub const CLASSES: [ChangeClass; 3] = [
    ChangeClass::Erosion,
    ChangeClass::NotAffected,
    ChangeClass::Deposition,
];

impl ChangeClass {
    /// Stable lowercase label for reports.
    pub fn label(self) -> &'static str {
        match self {
            ChangeClass::Erosion => "erosion",
            ChangeClass::NotAffected => "not_affected",
            ChangeClass::Deposition => "deposition",
        }
    }
}

/// Classified grid; `None` marks nodata cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRaster {
    geometry: Geometry,
    cells: Vec<Option<ChangeClass>>,
}

impl ClassRaster {
    /// Builds a classified grid from explicit labels.
    pub fn new(geometry: Geometry, cells: Vec<Option<ChangeClass>>) -> Result<Self> {
        if cells.len() != geometry.len() {
            return Err(Error::domain(format!(
                "{} labels for a {}x{} grid",
                cells.len(),
                geometry.nrows,
                geometry.ncols
            )));
        }
        Ok(Self { geometry, cells })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn cells(&self) -> &[Option<ChangeClass>] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> Option<ChangeClass> {
        self.cells[row * self.geometry.ncols + col]
    }
}

/// Labels bed change: below `-epsilon` erosion, above `+epsilon`
/// deposition, within the band not affected. Nodata passes through.
pub fn classify_change(delta_z: &Raster, epsilon: f64) -> Result<ClassRaster> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::domain(format!(
            "classification tolerance must be non-negative, got {epsilon}"
        )));
    }
    let nodata = delta_z.nodata();
    let cells = delta_z
        .values()
        .iter()
        .map(|&v| {
            if v == nodata || !v.is_finite() {
                None
            } else if v < -epsilon {
                Some(ChangeClass::Erosion)
            } else if v > epsilon {
                Some(ChangeClass::Deposition)
            } else {
                Some(ChangeClass::NotAffected)
            }
        })
        .collect();
    ClassRaster::new(*delta_z.geometry(), cells)
}

/// One-vs-rest confusion counts for a single target class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub true_negative: u64,
}

impl ConfusionCounts {
    /// All scored cells.
    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.false_negative + self.true_negative
    }
}

/// Counts agreement between `pred` and `obs` for one target class. Cells
/// nodata in either raster are excluded.
pub fn confusion_counts(
    pred: &ClassRaster,
    obs: &ClassRaster,
    target: ChangeClass,
) -> Result<ConfusionCounts> {
    if pred.geometry != obs.geometry {
        return Err(Error::domain(
            "prediction and observation grids have different geometry",
        ));
    }
    let mut counts = ConfusionCounts::default();
    for (p, o) in pred.cells.iter().zip(obs.cells.iter()) {
        let (Some(p), Some(o)) = (p, o) else { continue };
        match (*p == target, *o == target) {
            (true, true) => counts.true_positive += 1,
            (true, false) => counts.false_positive += 1,
            (false, true) => counts.false_negative += 1,
            (false, false) => counts.true_negative += 1,
        }
    }
    Ok(counts)
}

/// Precision, recall, and F1 for one class.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Metrics from one-vs-rest counts; 0/0 ratios yield 0 by convention.
pub fn f1_metrics(counts: &ConfusionCounts) -> ClassMetrics {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let tp = counts.true_positive;
    ClassMetrics {
        precision: ratio(tp, tp + counts.false_positive),
        recall: ratio(tp, tp + counts.false_negative),
        f1: ratio(2 * tp, 2 * tp + counts.false_positive + counts.false_negative),
    }
}

/// Macro scores over the three classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MacroF1 {
    /// Per-class metrics in [`CLASSES`] order.
    pub per_class: [ClassMetrics; 3],
    /// Unweighted mean of the three F1 values.
    pub f1_ave: f64,
}

/// Scores a prediction against an observation over all three classes.
pub fn macro_f1(pred: &ClassRaster, obs: &ClassRaster) -> Result<MacroF1> {
    let mut per_class = [ClassMetrics::default(); 3];
    for (k, class) in CLASSES.iter().enumerate() {
        per_class[k] = f1_metrics(&confusion_counts(pred, obs, *class)?);
    }
    let f1_ave = (per_class[0].f1 + per_class[1].f1 + per_class[2].f1) / 3.0;
    Ok(MacroF1 { per_class, f1_ave })
}

/// Candidate values per calibrated material parameter. [`Default`] holds
/// the full calibration grid.
#[derive(Clone, Debug)]
pub struct CandidateLists {
    pub d_m: Vec<f64>,
    pub d_e: Vec<f64>,
    pub phi_deg: Vec<f64>,
    pub r_c: Vec<f64>,
    pub q_add: Vec<f64>,
    pub t_add: Vec<f64>,
}

impl Default for CandidateLists {
    fn default() -> Self {
        Self {
            d_m: vec![0.02, 0.05, 0.1],
            d_e: vec![1.0, 2.0],
            phi_deg: vec![35.0, 25.0],
            r_c: vec![0.0, 0.1, 0.2],
            q_add: vec![0.1, 0.2, 1.0, 10.0],
            t_add: vec![1.0, 10.0, 100.0, 500.0, 1000.0],
        }
    }
}

impl CandidateLists {
    /// Number of combinations the lists expand to.
    pub fn len(&self) -> usize {
        self.d_m.len()
            * self.d_e.len()
            * self.phi_deg.len()
            * self.r_c.len()
            * self.q_add.len()
            * self.t_add.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Expands the grid in lexicographic order (d_m outermost, t_add
    /// innermost), overriding `base` per combination.
    pub fn expand(&self, base: &MaterialParams) -> Vec<MaterialParams> {
        let mut out = Vec::with_capacity(self.len());
        for &d_m in &self.d_m {
            for &d_e in &self.d_e {
                for &phi_deg in &self.phi_deg {
                    for &r_c in &self.r_c {
                        for &q_add in &self.q_add {
                            for &t_add in &self.t_add {
                                out.push(MaterialParams {
                                    d_m,
                                    d_e,
                                    phi_deg,
                                    r_c,
                                    q_add,
                                    t_add,
                                    ..*base
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Outcome of one sweep candidate.
#[derive(Clone, Debug)]
pub struct SweepRecord {
    /// Candidate position in the expansion order.
    pub index: usize,
    pub params: MaterialParams,
    /// Per-class metrics; `None` when the simulation failed.
    pub metrics: Option<MacroF1>,
    /// Macro F1, or -1 when the simulation failed.
    pub f1_ave: f64,
    /// 1-based rank after sorting.
    pub rank: usize,
    pub error: Option<String>,
    pub runtime_s: f64,
}

/// Ranked sweep outcome.
#[derive(Clone, Debug)]
pub struct SweepReport {
    /// Records sorted by rank (best first).
    pub records: Vec<SweepRecord>,
}

impl SweepReport {
    /// The top-ranked candidate.
    pub fn best(&self) -> &SweepRecord {
        &self.records[0]
    }

    /// Number of failed candidates.
    pub fn failure_count(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }

    /// One CSV row per candidate: rank, index, parameters, per-class
    /// precision/recall/F1, macro F1, and the error message if any.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "rank,index,d_m,d_e,phi_deg,r_c,q_add,t_add,\
             precision_erosion,recall_erosion,f1_erosion,\
             precision_not_affected,recall_not_affected,f1_not_affected,\
             precision_deposition,recall_deposition,f1_deposition,\
             f1_ave,runtime_s,error\n",
        );
        for r in &self.records {
            let p = &r.params;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},",
                r.rank, r.index, p.d_m, p.d_e, p.phi_deg, p.r_c, p.q_add, p.t_add
            ));
            match &r.metrics {
                Some(m) => {
                    for cm in &m.per_class {
                        out.push_str(&format!("{},{},{},", cm.precision, cm.recall, cm.f1));
                    }
                }
                None => out.push_str(",,,,,,,,,"),
            }
            let err = r
                .error
                .as_deref()
                .unwrap_or("")
                .replace([',', '\n'], ";");
            out.push_str(&format!("{},{},{}\n", r.f1_ave, r.runtime_s, err));
        }
        out
    }

    /// Long-format scatter data relating each parameter value to the macro
    /// F1 of every successful candidate: `parameter,value,f1_ave` rows.
    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("parameter,value,f1_ave\n");
        for r in &self.records {
            if r.error.is_some() {
                continue;
            }
            let p = &r.params;
            for (name, value) in [
                ("d_m", p.d_m),
                ("d_e", p.d_e),
                ("phi_deg", p.phi_deg),
                ("r_c", p.r_c),
                ("q_add", p.q_add),
                ("t_add", p.t_add),
            ] {
                out.push_str(&format!("{name},{value},{}\n", r.f1_ave));
            }
        }
        out
    }
}

/// Lexicographic key over the calibrated parameters, used to break score
/// ties deterministically.
fn param_key(p: &MaterialParams) -> [f64; 6] {
    [p.d_m, p.d_e, p.phi_deg, p.r_c, p.q_add, p.t_add]
}

/// Runs one simulation per candidate against fixed sources, scores each
/// result against the observed bed change, and ranks candidates by macro
/// F1 (descending; ties by lexicographic parameter order, then index).
/// Failed candidates score -1 instead of aborting the sweep.
pub fn parameter_sweep(
    dem: &Raster,
    forcing: &SourceForcing,
    candidates: &[MaterialParams],
    observed_delta_z: &Raster,
    epsilon: f64,
    opts: RunOptions,
) -> Result<SweepReport> {
    if candidates.is_empty() {
        return Err(Error::domain("parameter sweep needs at least one candidate"));
    }
    if observed_delta_z.geometry() != dem.geometry() {
        return Err(Error::domain(
            "observed bed change does not match the terrain grid",
        ));
    }
    let observed = classify_change(observed_delta_z, epsilon)?;
    let mut records: Vec<SweepRecord> = candidates
        .par_iter()
        .enumerate()
        .map(|(index, params)| {
            let started = std::time::Instant::now();
            let scored = run_with(dem, forcing, *params, opts).and_then(|case| {
                let pred = classify_change(&case.delta_z, epsilon)?;
                macro_f1(&pred, &observed)
            });
            let runtime_s = started.elapsed().as_secs_f64();
            match scored {
                Ok(metrics) => SweepRecord {
                    index,
                    params: *params,
                    f1_ave: metrics.f1_ave,
                    metrics: Some(metrics),
                    rank: 0,
                    error: None,
                    runtime_s,
                },
                Err(e) => SweepRecord {
                    index,
                    params: *params,
                    metrics: None,
                    f1_ave: -1.0,
                    rank: 0,
                    error: Some(e.to_string()),
                    runtime_s,
                },
            }
        })
        .collect();
    records.sort_by(|a, b| {
        b.f1_ave
            .total_cmp(&a.f1_ave)
            .then_with(|| {
                let (ka, kb) = (param_key(&a.params), param_key(&b.params));
                ka.iter()
                    .zip(kb.iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .then_with(|| a.index.cmp(&b.index))
    });
    for (k, r) in records.iter_mut().enumerate() {
        r.rank = k + 1;
    }
    Ok(SweepReport { records })
}
