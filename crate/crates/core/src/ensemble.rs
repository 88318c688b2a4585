//! Monte Carlo hazard statistics over many sampled source realizations.
//!
//! Each case draws its own source set from the susceptibility raster with
//! a per-case seed (`base_seed + k`), runs the flow solver to completion,
//! and keeps the bed-change map. Failed cases are recorded and excluded
//! from the statistics. From the successful cases the aggregation builds a
//! mean bed-change map, a log-scaled relative-spread map, and a hit
//! frequency (share of cases whose |bed change| exceeds a tolerance).

use rayon::iter::{IntoParallelIterator, ParallelIterator};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::solver::{run_with, CaseResult, MaterialParams, RunOptions, SourceForcing};
use crate::source_model::sample_sources;

/// One Monte Carlo case: its seed and either the finished run or the
/// failure message.
#[derive(Clone, Debug)]
pub struct EnsembleCase {
    /// Case position `k` in `0..n_cases`.
    pub index: usize,
    /// Seed used to draw this case's sources.
    pub seed: u64,
    pub outcome: std::result::Result<CaseResult, String>,
    pub wall_time_s: f64,
}

/// Number of failed cases in an ensemble.
pub fn failure_count(cases: &[EnsembleCase]) -> usize {
    cases.iter().filter(|c| c.outcome.is_err()).count()
}

/// Runs `n_cases` Monte Carlo cases at the default one-hour duration.
/// Case `k` samples sources with seed `base_seed + k`, so the whole
/// ensemble is reproducible from `base_seed`. Cases run concurrently; the
/// returned list is ordered by case index.
pub fn run_ensemble(
    dem: &Raster,
    source_probability: &Raster,
    n_cases: usize,
    base_seed: u64,
    mat: MaterialParams,
) -> Result<Vec<EnsembleCase>> {
    run_ensemble_with(
        dem,
        source_probability,
        n_cases,
        base_seed,
        mat,
        RunOptions::default(),
    )
}

/// [`run_ensemble`] with explicit run options.
pub fn run_ensemble_with(
    dem: &Raster,
    source_probability: &Raster,
    n_cases: usize,
    base_seed: u64,
    mat: MaterialParams,
    opts: RunOptions,
) -> Result<Vec<EnsembleCase>> {
    if n_cases == 0 {
        return Err(Error::domain("an ensemble needs at least one case"));
    }
    let cases: Vec<EnsembleCase> = (0..n_cases)
        .into_par_iter()
        .map(|index| {
            let started = std::time::Instant::now();
            let seed = base_seed.wrapping_add(index as u64);
            let outcome = sample_sources(source_probability, seed)
                .and_then(|real| {
                    let forcing = SourceForcing::from_realization(&real, dem.geometry())?;
                    run_with(dem, &forcing, mat, opts)
                })
                .map_err(|e| e.to_string());
            EnsembleCase {
                index,
                seed,
                outcome,
                wall_time_s: started.elapsed().as_secs_f64(),
            }
        })
        .collect();
    Ok(cases)
}

/// Aggregated ensemble maps.
#[derive(Clone, Debug)]
pub struct EnsembleStats {
    /// Per-cell mean bed change over the successful cases.
    pub mean_dz: Raster,
    /// log10 of (sample standard deviation / |mean|), floored at
    /// log10(1e-12); nodata where |mean| is within the tolerance or fewer
    /// than two cases succeeded.
    pub rel_std_log10: Raster,
    /// Share of successful cases with |bed change| above the tolerance.
    pub hit_frequency: Raster,
    /// Number of successful cases behind the statistics.
    pub n_cases: usize,
}

/// Reduces an ensemble to its statistics maps. Failed cases are skipped;
/// at least one case must have succeeded. The reduction runs sequentially
/// in case order, so the result is deterministic for a given case list.
pub fn ensemble_stats(cases: &[EnsembleCase], epsilon: f64) -> Result<EnsembleStats> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::domain(format!(
            "hit tolerance must be non-negative, got {epsilon}"
        )));
    }
    let successful: Vec<&CaseResult> = cases
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok())
        .collect();
    let Some(first) = successful.first() else {
        return Err(Error::domain("every ensemble case failed"));
    };
    let geometry = *first.delta_z.geometry();
    if successful.iter().any(|c| *c.delta_z.geometry() != geometry) {
        return Err(Error::domain("ensemble cases disagree on grid geometry"));
    }
    let n = successful.len();
    let len = geometry.len();
    let nodata = first.delta_z.nodata();

    let mut sum = vec![0.0f64; len];
    let mut hits = vec![0u64; len];
    let mut masked = vec![false; len];
    for case in &successful {
        for (i, &dz) in case.delta_z.values().iter().enumerate() {
            if dz == nodata || !dz.is_finite() {
                masked[i] = true;
                continue;
            }
            sum[i] += dz;
            if dz.abs() > epsilon {
                hits[i] += 1;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();

    // Second pass for the sample variance around the mean.
    let mut sq = vec![0.0f64; len];
    if n >= 2 {
        for case in &successful {
            for (i, &dz) in case.delta_z.values().iter().enumerate() {
                if dz == nodata || !dz.is_finite() {
                    continue;
                }
                let d = dz - mean[i];
                sq[i] += d * d;
            }
        }
    }

    let mut mean_dz = vec![nodata; len];
    let mut rel = vec![nodata; len];
    let mut freq = vec![nodata; len];
    for i in 0..len {
        if masked[i] {
            continue;
        }
        mean_dz[i] = mean[i];
        freq[i] = hits[i] as f64 / n as f64;
        if n >= 2 && mean[i].abs() > epsilon {
            let sd = (sq[i] / (n as f64 - 1.0)).sqrt();
            rel[i] = (sd / mean[i].abs()).max(1e-12).log10();
        }
    }
    Ok(EnsembleStats {
        mean_dz: Raster::new(geometry, nodata, mean_dz)?,
        rel_std_log10: Raster::new(geometry, nodata, rel)?,
        hit_frequency: Raster::new(geometry, nodata, freq)?,
        n_cases: n,
    })
}
