//! Soil-water index from a serial three-tank rainfall-runoff cascade.
//!
//! Each tank drains through side outlets above fixed levels and percolates
//! into the tank below; the index is the summed storage of all three tanks.
//! Integration is explicit Euler at one-minute sub-steps, storages clamped
//! non-negative.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::Raster;

/// One-minute sub-step, in hours.
pub const SUBSTEP_H: f64 = 1.0 / 60.0;

/// Side-outlet coefficients `alpha` (1/h), percolation coefficients `beta`
/// (1/h), and outlet levels (mm). `levels[0..2]` belong to tank 1,
/// `levels[2]` to tank 2 and `levels[3]` to tank 3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TankParams {
    pub alpha: [f64; 4],
    pub beta: [f64; 3],
    pub levels: [f64; 4],
}

impl Default for TankParams {
    fn default() -> Self {
        TankParams {
            alpha: [0.1, 0.15, 0.05, 0.01],
            beta: [0.12, 0.05, 0.01],
            levels: [15.0, 60.0, 15.0, 15.0],
        }
    }
}

impl TankParams {
    pub fn validate(&self) -> Result<()> {
        let all = self.alpha.iter().chain(self.beta.iter()).chain(self.levels.iter());
        for &v in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::domain(format!("tank parameters must be finite and non-negative, got {v}")));
            }
        }
        if self.levels[1] < self.levels[0] {
            return Err(Error::domain("upper outlet level must not sit below the lower outlet"));
        }
        Ok(())
    }
}

/// Storage of the three tanks in mm.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TankState {
    pub storage: [f64; 3],
}

impl TankState {
    pub fn new(s1: f64, s2: f64, s3: f64) -> Self {
        TankState { storage: [s1, s2, s3] }
    }

    /// Soil-water index: total storage across the cascade, in mm.
    pub fn swi(&self) -> f64 {
        self.storage.iter().sum()
    }
}

/// One explicit Euler step. `rain_mm_h` is the rainfall intensity over the
/// step, `dt_h` the step length in hours (positive, at most one minute).
/// Outflows are evaluated on the incoming state and storages clamped at zero.
pub fn tank_step(state: TankState, rain_mm_h: f64, dt_h: f64, p: &TankParams) -> Result<TankState> {
    if !(rain_mm_h.is_finite() && rain_mm_h >= 0.0) {
        return Err(Error::domain(format!("rain intensity must be finite and non-negative, got {rain_mm_h}")));
    }
    if !(dt_h.is_finite() && dt_h > 0.0 && dt_h <= SUBSTEP_H + 1e-12) {
        return Err(Error::domain(format!("tank step must satisfy 0 < dt <= 1/60 h, got {dt_h}")));
    }
    let [s1, s2, s3] = state.storage;
    let [a1, a2, a3, a4] = p.alpha;
    let [b1, b2, b3] = p.beta;
    let [l1, l2, l3, l4] = p.levels;

    let q1 = if s1 > l2 {
        a1 * (s1 - l1) + a2 * (s1 - l2)
    } else if s1 > l1 {
        a1 * (s1 - l1)
    } else {
        0.0
    };
    let q2 = if s2 > l3 { a3 * (s2 - l3) } else { 0.0 };
    let q3 = if s3 > l4 { a4 * (s3 - l4) } else { 0.0 };

    let n1 = s1 + dt_h * (rain_mm_h - b1 * s1 - q1);
    let n2 = s2 + dt_h * (b1 * s1 - b2 * s2 - q2);
    let n3 = s3 + dt_h * (b2 * s2 - b3 * s3 - q3);
    Ok(TankState::new(n1.max(0.0), n2.max(0.0), n3.max(0.0)))
}

/// A constant-intensity rainfall block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RainPulse {
    pub duration_h: f64,
    pub intensity_mm_h: f64,
}

/// Result of integrating a rainfall series.
#[derive(Debug, Clone)]
pub struct SwiSeries {
    /// (elapsed hours, index) recorded at the end of every pulse.
    pub checkpoints: Vec<(f64, f64)>,
    /// Running maximum of the index at sub-step granularity.
    pub max_swi: f64,
    pub final_state: TankState,
}

/// Integrate a pulse series from `init` (zero storages when None) at fixed
/// one-minute sub-steps; a trailing fraction of a minute is integrated with a
/// correspondingly shorter step.
pub fn swi_series(pulses: &[RainPulse], p: &TankParams, init: Option<TankState>) -> Result<SwiSeries> {
    p.validate()?;
    let mut state = init.unwrap_or_default();
    let mut max_swi = state.swi();
    let mut t = 0.0;
    let mut checkpoints = Vec::with_capacity(pulses.len());
    for pulse in pulses {
        if !(pulse.duration_h.is_finite() && pulse.duration_h > 0.0) {
            return Err(Error::domain(format!("pulse duration must be positive, got {}", pulse.duration_h)));
        }
        let mut remaining = pulse.duration_h;
        while remaining > 0.0 {
            let dt = remaining.min(SUBSTEP_H);
            state = tank_step(state, pulse.intensity_mm_h, dt, p)?;
            max_swi = max_swi.max(state.swi());
            remaining -= dt;
        }
        t += pulse.duration_h;
        checkpoints.push((t, state.swi()));
    }
    Ok(SwiSeries { checkpoints, max_swi, final_state: state })
}

/// Per-cell maximum soil-water index over a stack of rainfall rasters.
///
/// Each raster holds intensities (mm/h) valid for `interval_minutes`; every
/// cell integrates its own series from the zero state. A cell that is nodata
/// in any layer is nodata in the output.
pub fn max_swi_raster(stack: &[Raster], interval_minutes: f64, p: &TankParams) -> Result<Raster> {
    p.validate()?;
    let first = stack
        .first()
        .ok_or_else(|| Error::domain("rain stack must contain at least one raster"))?;
    if !(interval_minutes.is_finite() && interval_minutes > 0.0) {
        return Err(Error::domain(format!("rain interval must be positive, got {interval_minutes} min")));
    }
    for (k, r) in stack.iter().enumerate() {
        if !r.same_geometry(first) {
            return Err(Error::domain(format!("rain raster {k} does not match the stack geometry")));
        }
    }
    let duration_h = interval_minutes / 60.0;
    let nodata = first.nodata();
    let n = first.geometry().len();
    let ncols = first.ncols();

    let mut out = vec![nodata; n];
    out.par_chunks_mut(ncols).enumerate().try_for_each(|(row, chunk)| -> Result<()> {
        for (col, slot) in chunk.iter_mut().enumerate() {
            let idx = row * ncols + col;
            if stack.iter().any(|r| r.is_nodata_value(r.values()[idx])) {
                continue;
            }
            let mut state = TankState::default();
            let mut max_swi = 0.0f64;
            for r in stack {
                let intensity = r.values()[idx];
                if intensity < 0.0 {
                    return Err(Error::domain(format!(
                        "negative rain intensity {intensity} at cell ({row}, {col})"
                    )));
                }
                let mut remaining = duration_h;
                while remaining > 0.0 {
                    let dt = remaining.min(SUBSTEP_H);
                    state = tank_step(state, intensity, dt, p)?;
                    max_swi = max_swi.max(state.swi());
                    remaining -= dt;
                }
            }
            *slot = max_swi;
        }
        Ok(())
    })?;
    Raster::new(*first.geometry(), nodata, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Geometry;
    use approx::assert_relative_eq;

    #[test]
    fn single_step_decay_matches_hand_integration() {
        // S1 = 10 below both outlets: only percolation acts, so one minute of
        // decay is 10 - 0.12 * 10 / 60 = 9.98.
        let p = TankParams::default();
        let s = tank_step(TankState::new(10.0, 0.0, 0.0), 0.0, SUBSTEP_H, &p).unwrap();
        assert_relative_eq!(s.storage[0], 9.98, epsilon = 1e-12);
        assert_relative_eq!(s.storage[1], 0.12 * 10.0 / 60.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_rain_converges_to_analytic_fixed_point() {
        let p = TankParams::default();
        let mut state = TankState::default();
        for _ in 0..600 * 60 {
            state = tank_step(state, 1.0, SUBSTEP_H, &p).unwrap();
        }
        assert_relative_eq!(state.storage[0], 25.0 / 3.0, max_relative = 5e-3);
        assert_relative_eq!(state.storage[1], 17.5, max_relative = 5e-3);
        assert_relative_eq!(state.storage[2], 51.25, max_relative = 5e-3);
        assert_relative_eq!(state.swi(), 77.0833333333, max_relative = 5e-3);
    }

    #[test]
    fn storages_never_go_negative() {
        let p = TankParams { alpha: [0.9, 0.9, 0.9, 0.9], beta: [0.9, 0.9, 0.9], levels: [0.0, 0.0, 0.0, 0.0] };
        let mut state = TankState::new(100.0, 100.0, 100.0);
        for _ in 0..10_000 {
            state = tank_step(state, 0.0, SUBSTEP_H, &p).unwrap();
            for s in state.storage {
                assert!(s >= 0.0);
            }
        }
    }

    #[test]
    fn invalid_inputs_are_domain_errors() {
        let p = TankParams::default();
        assert!(tank_step(TankState::default(), -1.0, SUBSTEP_H, &p).is_err());
        assert!(tank_step(TankState::default(), 0.0, 0.0, &p).is_err());
        assert!(tank_step(TankState::default(), 0.0, 0.5, &p).is_err());
        assert!(tank_step(TankState::default(), f64::NAN, SUBSTEP_H, &p).is_err());
    }

    #[test]
    fn series_tracks_peak_not_final_value() {
        let p = TankParams::default();
        let pulses = [
            RainPulse { duration_h: 2.0, intensity_mm_h: 40.0 },
            RainPulse { duration_h: 10.0, intensity_mm_h: 0.0 },
        ];
        let out = swi_series(&pulses, &p, None).unwrap();
        assert_eq!(out.checkpoints.len(), 2);
        let end_of_rain = out.checkpoints[0].1;
        let final_swi = out.checkpoints[1].1;
        assert!(final_swi < end_of_rain);
        assert!(out.max_swi >= end_of_rain);
        assert!(out.max_swi > final_swi);
    }

    #[test]
    fn fractional_minute_durations_are_integrated_exactly_once() {
        let p = TankParams::default();
        // 90 seconds of rain split as 1 min + 30 s must equal a single pulse
        // of 1.5 minutes.
        let joined = swi_series(&[RainPulse { duration_h: 1.5 / 60.0, intensity_mm_h: 30.0 }], &p, None).unwrap();
        let split = swi_series(
            &[
                RainPulse { duration_h: 1.0 / 60.0, intensity_mm_h: 30.0 },
                RainPulse { duration_h: 0.5 / 60.0, intensity_mm_h: 30.0 },
            ],
            &p,
            None,
        )
        .unwrap();
        assert_relative_eq!(joined.final_state.swi(), split.final_state.swi(), epsilon = 1e-9);
    }

    #[test]
    fn warm_start_continues_from_given_state() {
        let p = TankParams::default();
        let pulses = [RainPulse { duration_h: 1.0, intensity_mm_h: 10.0 }];
        let cold = swi_series(&pulses, &p, None).unwrap();
        let warm = swi_series(&pulses, &p, Some(cold.final_state)).unwrap();
        assert!(warm.final_state.swi() > cold.final_state.swi());
    }

    #[test]
    fn raster_stack_takes_per_cell_maximum_and_keeps_nodata() {
        let g = Geometry::new(1, 3, 0.0, 0.0, 1.0).unwrap();
        let r1 = Raster::new(g, -9999.0, vec![60.0, 0.0, -9999.0]).unwrap();
        let r2 = Raster::new(g, -9999.0, vec![0.0, 10.0, 5.0]).unwrap();
        let out = max_swi_raster(&[r1, r2], 60.0, &TankParams::default()).unwrap();
        assert!(out.get(0, 0) > out.get(0, 1));
        assert!(out.get(0, 1) > 0.0);
        assert!(out.is_nodata(0, 2), "nodata in any layer silences the cell");
    }

    #[test]
    fn raster_stack_geometry_mismatch_is_rejected() {
        let a = Raster::filled(Geometry::new(2, 2, 0.0, 0.0, 1.0).unwrap(), -9999.0, 1.0).unwrap();
        let b = Raster::filled(Geometry::new(2, 3, 0.0, 0.0, 1.0).unwrap(), -9999.0, 1.0).unwrap();
        assert!(max_swi_raster(&[a, b], 10.0, &TankParams::default()).is_err());
    }
}
