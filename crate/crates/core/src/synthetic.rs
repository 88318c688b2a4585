//! Procedurally generated demo catchment.
//!
//! [`v_valley_catchment`] builds a self-contained input set from closed
//! formulas: a fine simulation DEM shaped like a V-valley draining into a
//! gentle fan, a nested coarse DEM for susceptibility modelling, and a
//! coarse rainfall stack with a triangular storm. Everything is
//! deterministic, free of nodata, and mirror-symmetric about the valley
//! axis on the fine grid, which makes the set convenient for end-to-end
//! tests and demos without shipping measured data.

use crate::error::{Error, Result};
use crate::raster::{resample_nearest, Geometry, Raster};

/// Nodata marker used by all generated rasters.
pub const SYNTH_NODATA: f64 = -9999.0;

/// Fine-grid cell size [m].
const FINE_CELLSIZE: f64 = 1.0;
/// Coarse grid aggregates this many fine cells per axis.
const COARSE_FACTOR: usize = 10;
/// Rainfall grid is always 3x3 at this cell size [m].
const RAIN_CELLSIZE: f64 = 250.0;
/// Number of rainfall frames in the storm.
const RAIN_FRAMES: usize = 24;
/// Minutes between rainfall frames.
const RAIN_INTERVAL_MINUTES: f64 = 60.0;
/// Peak storm intensity [mm/h] before the spatial gradient; sized so the
/// wet end of the catchment reaches susceptibility-relevant soil-water
/// index values while the dry corner stays quiet.
const RAIN_PEAK_MM_H: f64 = 80.0;

/// Valley-floor elevation above the outlet at normalized distance `yn`
/// from the head, the integral of a downslope gradient
/// `0.04 + 0.55 (1 - yn)^2` (steep chute relaxing into a fan).
fn floor_elevation(yn: f64, length: f64) -> f64 {
    let d = 1.0 - yn;
    length * (0.04 * d + 0.55 * d * d * d / 3.0)
}

/// Cross-valley wall gradient, steep near the head and flaring out.
fn wall_gradient(yn: f64) -> f64 {
    0.05 + 0.45 * (1.0 - yn)
}

/// Generated input set.
#[derive(Clone, Debug)]
pub struct SyntheticCatchment {
    /// Simulation terrain, `n`x`n` cells at 1 m.
    pub dem_fine: Raster,
    /// Susceptibility terrain, nested in the fine grid at 10 m.
    pub dem_coarse: Raster,
    /// Rainfall frames, each 3x3 at 250 m, oldest first.
    pub rain_stack: Vec<Raster>,
    /// Minutes between consecutive rainfall frames.
    pub rain_interval_minutes: f64,
}

/// Builds the demo catchment with an `n`x`n` fine grid (`n >= 20` so the
/// coarse grid keeps at least two cells per axis).
pub fn v_valley_catchment(n: usize) -> Result<SyntheticCatchment> {
    if n < 2 * COARSE_FACTOR {
        return Err(Error::domain(format!(
            "synthetic catchment needs at least {} cells per axis, got {n}",
            2 * COARSE_FACTOR
        )));
    }
    let fine_geom = Geometry::new(n, n, 0.0, 0.0, FINE_CELLSIZE)?;
    let length = (n - 1) as f64 * FINE_CELLSIZE;
    let half = (n - 1) as f64 / 2.0;
    let mut z = Vec::with_capacity(n * n);
    for row in 0..n {
        let yn = row as f64 / (n - 1) as f64;
        let down = floor_elevation(yn, length);
        let wall = wall_gradient(yn);
        for col in 0..n {
            // Offset from the valley axis; integer arithmetic keeps the
            // two mirrored columns bit-identical.
            let u = (col as f64 - half).abs();
            let cross = wall * u * FINE_CELLSIZE;
            let texture = 0.35
                * (std::f64::consts::TAU * 6.0 * u / (n - 1) as f64).cos()
                * (std::f64::consts::TAU * 9.0 * yn).cos();
            z.push(down + cross + texture + 0.35);
        }
    }
    let dem_fine = Raster::new(fine_geom, SYNTH_NODATA, z)?;

    let nc = n / COARSE_FACTOR;
    let coarse_geom = Geometry::new(nc, nc, 0.0, 0.0, FINE_CELLSIZE * COARSE_FACTOR as f64)?;
    let dem_coarse = resample_nearest(&dem_fine, &coarse_geom)?;

    let rain_geom = Geometry::new(3, 3, 0.0, 0.0, RAIN_CELLSIZE)?;
    let mut rain_stack = Vec::with_capacity(RAIN_FRAMES);
    for k in 0..RAIN_FRAMES {
        // Triangular hyetograph peaking mid-storm, never fully dry.
        let tri = 1.0 - (k as f64 - 11.5).abs() / 12.5;
        let mut frame = Vec::with_capacity(9);
        for row in 0..3 {
            // Heavier rain over the catchment head (north rows).
            let row_f = 1.2 - 0.2 * row as f64;
            for col in 0..3 {
                let col_f = 0.9 + 0.1 * col as f64;
                frame.push(RAIN_PEAK_MM_H * tri * row_f * col_f);
            }
        }
        rain_stack.push(Raster::new(rain_geom, SYNTH_NODATA, frame)?);
    }
    Ok(SyntheticCatchment {
        dem_fine,
        dem_coarse,
        rain_stack,
        rain_interval_minutes: RAIN_INTERVAL_MINUTES,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_tiny_grids() {
        assert!(v_valley_catchment(19).is_err());
        assert!(v_valley_catchment(20).is_ok());
    }

    #[test]
    fn shapes_and_alignment_are_as_documented() {
        let c = v_valley_catchment(64).unwrap();
        assert_eq!(c.dem_fine.nrows(), 64);
        assert_eq!(c.dem_fine.ncols(), 64);
        assert_eq!(c.dem_fine.cellsize(), 1.0);
        assert_eq!(c.dem_coarse.nrows(), 6);
        assert_eq!(c.dem_coarse.cellsize(), 10.0);
        assert!(c
            .dem_fine
            .geometry()
            .contains_extent(c.dem_coarse.geometry()));
        assert_eq!(c.rain_stack.len(), RAIN_FRAMES);
        assert_eq!(c.rain_interval_minutes, 60.0);
        for frame in &c.rain_stack {
            assert_eq!(frame.nrows(), 3);
            assert_eq!(frame.cellsize(), 250.0);
            assert!(frame
                .geometry()
                .contains_extent(c.dem_coarse.geometry()));
            assert!(frame.values().iter().all(|&v| v > 0.0 && v < 110.0));
        }
        // No nodata anywhere.
        assert_eq!(c.dem_fine.live_cells(), 64 * 64);
        assert_eq!(c.dem_coarse.live_cells(), 36);
    }

    #[test]
    fn fine_dem_is_mirror_symmetric_and_valley_shaped() {
        let c = v_valley_catchment(50).unwrap();
        let dem = &c.dem_fine;
        let n = dem.ncols();
        for row in 0..n {
            for col in 0..n / 2 {
                assert_eq!(dem.get(row, col), dem.get(row, n - 1 - col));
            }
            // The rim stands well above the axis on every row.
            assert!(dem.get(row, 0) > dem.get(row, n / 2) + 1.0);
        }
        // The head of the valley stands far above the outlet.
        assert!(dem.get(0, n / 2) > dem.get(n - 1, n / 2) + 5.0);
        assert!(dem.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn coarse_dem_samples_the_fine_grid() {
        let c = v_valley_catchment(40).unwrap();
        let (fine, coarse) = (&c.dem_fine, &c.dem_coarse);
        for row in 0..coarse.nrows() {
            for col in 0..coarse.ncols() {
                let x = coarse.geometry().x_center(col);
                let y = coarse.geometry().y_center(row);
                let (fr, fc) = fine.geometry().cell_at(x, y).unwrap();
                assert_eq!(coarse.get(row, col), fine.get(fr, fc));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = v_valley_catchment(30).unwrap();
        let b = v_valley_catchment(30).unwrap();
        assert_eq!(a.dem_fine, b.dem_fine);
        assert_eq!(a.dem_coarse, b.dem_coarse);
        assert_eq!(a.rain_stack, b.rain_stack);
    }

    #[test]
    fn storm_rises_and_falls() {
        let c = v_valley_catchment(20).unwrap();
        let series: Vec<f64> = c.rain_stack.iter().map(|f| f.get(1, 1)).collect();
        let peak_at = series
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((10..14).contains(&peak_at));
        assert!(series[0] < series[peak_at]);
        assert!(series[RAIN_FRAMES - 1] < series[peak_at]);
    }
}
