//! Terrain derivatives used as debris-flow source predictors: slope,
//! curvatures, and D8 contributing area.
//!
//! All operators work on a 3x3 neighborhood and leave the grid border (and any
//! cell touching nodata) as nodata. Flow accumulation first fills closed
//! depressions with a tiny gradient so every interior cell has a strict
//! descent path to the grid edge.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::Result;
use crate::raster::Raster;

/// Neighbor offsets in the fixed scan order used for steepest-descent ties:
/// E, SE, S, SW, W, NW, N, NE. Row offsets grow southward.
const D8: [(isize, isize); 8] = [
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
    (-1, -1),
    (-1, 0),
    (-1, 1),
];

/// Elevation increment applied along flooded flats so descent is strict.
const FLAT_EPS: f64 = 1e-6;

/// The stacked per-cell predictors consumed by the source model.
#[derive(Debug, Clone)]
pub struct TerrainDerivatives {
    pub slope_deg: Raster,
    pub plan_curv: Raster,
    pub tan_curv: Raster,
    /// Contributing area in squared map units (upstream cell count times
    /// cellsize^2, the cell itself included).
    pub flow_acc: Raster,
}

/// Convenience wrapper running all terrain operators on one DEM.
pub fn analyze(dem: &Raster) -> Result<TerrainDerivatives> {
    let slope_deg = slope_from_dem(dem)?;
    let (plan_curv, tan_curv) = curvatures_from_dem(dem)?;
    let flow_acc = flow_accumulation(dem)?;
    Ok(TerrainDerivatives { slope_deg, plan_curv, tan_curv, flow_acc })
}

struct Stencil {
    /// z1..z9 in compass layout: NW N NE / W C E / SW S SE.
    z: [f64; 9],
}

fn stencil(dem: &Raster, row: usize, col: usize) -> Option<Stencil> {
    if row == 0 || col == 0 || row + 1 >= dem.nrows() || col + 1 >= dem.ncols() {
        return None;
    }
    let mut z = [0.0; 9];
    let mut k = 0;
    for dr in -1isize..=1 {
        for dc in -1isize..=1 {
            let v = dem.get((row as isize + dr) as usize, (col as isize + dc) as usize);
            if dem.is_nodata_value(v) {
                return None;
            }
            z[k] = v;
            k += 1;
        }
    }
    Some(Stencil { z })
}

/// Slope in degrees from Horn's weighted central differences. Border cells
/// and cells with nodata in the neighborhood are nodata.
pub fn slope_from_dem(dem: &Raster) -> Result<Raster> {
    let cs = dem.cellsize();
    let mut out = Raster::filled(*dem.geometry(), dem.nodata(), dem.nodata())?;
    for row in 0..dem.nrows() {
        for col in 0..dem.ncols() {
            let Some(s) = stencil(dem, row, col) else { continue };
            let [nw, n, ne, w, _, e, sw, sth, se] = s.z;
            let zx = ((ne + 2.0 * e + se) - (nw + 2.0 * w + sw)) / (8.0 * cs);
            let zy = ((nw + 2.0 * n + ne) - (sw + 2.0 * sth + se)) / (8.0 * cs);
            out.set(row, col, (zx * zx + zy * zy).sqrt().atan().to_degrees());
        }
    }
    Ok(out)
}

/// Plan and tangential curvature from the Zevenbergen-Thorne quadratic fit.
///
/// With p, q the first and r, s, t the second derivatives of the fitted
/// surface, the contour (plan) curvature is
///   (q^2 r - 2 p q s + p^2 t) / (p^2 + q^2)^(3/2)
/// and the tangential curvature divides by (p^2 + q^2) sqrt(1 + p^2 + q^2)
/// instead. Convex terrain comes out negative (a dome of radius R has
/// tangential curvature -1/R); cells with zero gradient report 0.
pub fn curvatures_from_dem(dem: &Raster) -> Result<(Raster, Raster)> {
    let cs = dem.cellsize();
    let mut plan = Raster::filled(*dem.geometry(), dem.nodata(), dem.nodata())?;
    let mut tang = plan.clone();
    for row in 0..dem.nrows() {
        for col in 0..dem.ncols() {
            let Some(st) = stencil(dem, row, col) else { continue };
            let [nw, n, ne, w, c, e, sw, sth, se] = st.z;
            let p = (e - w) / (2.0 * cs);
            let q = (n - sth) / (2.0 * cs);
            let r = (e + w - 2.0 * c) / (cs * cs);
            let t = (n + sth - 2.0 * c) / (cs * cs);
            let s = (ne - nw - se + sw) / (4.0 * cs * cs);
            let g2 = p * p + q * q;
            if g2 == 0.0 {
                plan.set(row, col, 0.0);
                tang.set(row, col, 0.0);
                continue;
            }
            let num = q * q * r - 2.0 * p * q * s + p * p * t;
            plan.set(row, col, num / g2.powf(1.5));
            tang.set(row, col, num / (g2 * (1.0 + g2).sqrt()));
        }
    }
    Ok((plan, tang))
}

/// Min-heap entry ordered by filled elevation, then insertion sequence so
/// traversal is deterministic.
#[derive(PartialEq)]
struct FloodCell {
    z: f64,
    seq: u64,
    idx: usize,
}

impl Eq for FloodCell {}

impl Ord for FloodCell {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want lowest elevation first.
        other
            .z
            .partial_cmp(&self.z)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for FloodCell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Priority-flood depression filling. Returns the filled surface on which
/// every live cell not on a drainage edge has a strictly lower neighbor.
pub fn fill_depressions(dem: &Raster) -> Result<Raster> {
    let (nr, nc) = (dem.nrows(), dem.ncols());
    let mut filled = dem.clone();
    let mut visited = vec![false; nr * nc];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;

    // Seed with every live cell that can drain off-grid: border cells and
    // cells adjacent to nodata.
    for row in 0..nr {
        for col in 0..nc {
            if dem.is_nodata(row, col) {
                visited[row * nc + col] = true;
                continue;
            }
            let mut edge = row == 0 || col == 0 || row == nr - 1 || col == nc - 1;
            if !edge {
                edge = D8.iter().any(|&(dr, dc)| {
                    dem.is_nodata((row as isize + dr) as usize, (col as isize + dc) as usize)
                });
            }
            if edge {
                let idx = row * nc + col;
                visited[idx] = true;
                heap.push(FloodCell { z: dem.get(row, col), seq, idx });
                seq += 1;
            }
        }
    }

    while let Some(FloodCell { z, idx, .. }) = heap.pop() {
        let (row, col) = (idx / nc, idx % nc);
        for &(dr, dc) in &D8 {
            let (r, c) = (row as isize + dr, col as isize + dc);
            if r < 0 || c < 0 || r as usize >= nr || c as usize >= nc {
                continue;
            }
            let nidx = r as usize * nc + c as usize;
            if visited[nidx] {
                continue;
            }
            visited[nidx] = true;
            let zn = filled.get(r as usize, c as usize);
            let fz = if zn > z + FLAT_EPS { zn } else { z + FLAT_EPS };
            filled.set(r as usize, c as usize, fz);
            heap.push(FloodCell { z: fz, seq, idx: nidx });
            seq += 1;
        }
    }
    Ok(filled)
}

/// D8 receiver of each live cell on a filled surface: index of the
/// steepest-descent neighbor (drop / distance), or None when the cell drains
/// off-grid or into nodata. Ties keep the first neighbor in scan order.
fn d8_receivers(filled: &Raster) -> Vec<Option<usize>> {
    let (nr, nc) = (filled.nrows(), filled.ncols());
    let mut rec = vec![None; nr * nc];
    for row in 0..nr {
        for col in 0..nc {
            if filled.is_nodata(row, col) {
                continue;
            }
            let z = filled.get(row, col);
            let mut best: Option<(f64, usize)> = None;
            for &(dr, dc) in &D8 {
                let (r, c) = (row as isize + dr, col as isize + dc);
                if r < 0 || c < 0 || r as usize >= nr || c as usize >= nc {
                    continue;
                }
                if filled.is_nodata(r as usize, c as usize) {
                    continue;
                }
                let zn = filled.get(r as usize, c as usize);
                if zn >= z {
                    continue;
                }
                let dist = if dr != 0 && dc != 0 { std::f64::consts::SQRT_2 } else { 1.0 };
                let grade = (z - zn) / dist;
                // Strict > keeps the earliest neighbor in scan order on ties.
                if best.is_none_or(|(g, _)| grade > g) {
                    best = Some((grade, r as usize * nc + c as usize));
                }
            }
            rec[row * nc + col] = best.map(|(_, i)| i);
        }
    }
    rec
}

/// Contributing area per cell: upstream live-cell count (self included)
/// times cellsize^2, routed by single-direction D8 on the filled surface.
pub fn flow_accumulation(dem: &Raster) -> Result<Raster> {
    let filled = fill_depressions(dem)?;
    let (nr, nc) = (filled.nrows(), filled.ncols());
    let rec = d8_receivers(&filled);

    // Process from high to low so every donor is finished before its
    // receiver; (z, index) ordering makes the pass deterministic.
    let mut order: Vec<usize> = (0..nr * nc).filter(|&i| !filled.is_nodata(i / nc, i % nc)).collect();
    order.sort_by(|&a, &b| {
        let za = filled.get(a / nc, a % nc);
        let zb = filled.get(b / nc, b % nc);
        zb.partial_cmp(&za).unwrap_or(Ordering::Equal).then_with(|| a.cmp(&b))
    });

    let mut count = vec![0u64; nr * nc];
    for &i in &order {
        count[i] += 1;
        if let Some(j) = rec[i] {
            count[j] += count[i];
        }
    }

    let cell_area = dem.cellsize() * dem.cellsize();
    let mut out = Raster::filled(*dem.geometry(), dem.nodata(), dem.nodata())?;
    for row in 0..nr {
        for col in 0..nc {
            if !dem.is_nodata(row, col) {
                out.set(row, col, count[row * nc + col] as f64 * cell_area);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Geometry;
    use approx::assert_relative_eq;

    fn dem_from_fn(n: usize, cs: f64, f: impl Fn(f64, f64) -> f64) -> Raster {
        let g = Geometry::new(n, n, 0.0, 0.0, cs).unwrap();
        let mut vals = Vec::with_capacity(n * n);
        for row in 0..n {
            for col in 0..n {
                vals.push(f(g.x_center(col), g.y_center(row)));
            }
        }
        Raster::new(g, -9999.0, vals).unwrap()
    }

    #[test]
    fn inclined_plane_slope_is_exact() {
        let t30 = 30f64.to_radians().tan();
        let dem = dem_from_fn(9, 1.0, |x, _| x * t30);
        let slope = slope_from_dem(&dem).unwrap();
        for row in 1..8 {
            for col in 1..8 {
                assert_relative_eq!(slope.get(row, col), 30.0, max_relative = 1e-9);
            }
        }
        assert!(slope.is_nodata(0, 4), "border must be nodata");
    }

    #[test]
    fn plane_has_zero_curvature_and_flat_center_is_zero() {
        let dem = dem_from_fn(7, 1.0, |x, y| 3.0 + 0.2 * x - 0.1 * y);
        let (plan, tang) = curvatures_from_dem(&dem).unwrap();
        for row in 1..6 {
            for col in 1..6 {
                assert_relative_eq!(plan.get(row, col), 0.0, epsilon = 1e-12);
                assert_relative_eq!(tang.get(row, col), 0.0, epsilon = 1e-12);
            }
        }
        // Zero gradient: horizontal plane reports 0 rather than NaN.
        let flat = dem_from_fn(5, 1.0, |_, _| 2.0);
        let (plan, tang) = curvatures_from_dem(&flat).unwrap();
        assert_eq!(plan.get(2, 2), 0.0);
        assert_eq!(tang.get(2, 2), 0.0);
    }

    #[test]
    fn hemisphere_tangential_curvature_matches_radius() {
        // Dome z = sqrt(R^2 - x^2 - y^2), sampled finely off the summit.
        let r = 2000.0;
        let n = 41;
        let cs = 2.0;
        let g = Geometry::new(n, n, 300.0, 300.0, cs).unwrap();
        let mut vals = Vec::new();
        for row in 0..n {
            for col in 0..n {
                let x = g.x_center(col);
                let y = g.y_center(row);
                vals.push((r * r - x * x - y * y).sqrt());
            }
        }
        let dem = Raster::new(g, -9999.0, vals).unwrap();
        let (_, tang) = curvatures_from_dem(&dem).unwrap();
        let mid = n / 2;
        let got = tang.get(mid, mid);
        assert_relative_eq!(got, -1.0 / r, max_relative = 0.05);
    }

    #[test]
    fn curvature_sign_flips_between_dome_and_bowl() {
        let dome = dem_from_fn(9, 1.0, |x, y| {
            let (dx, dy) = (x - 4.5, y - 4.5);
            100.0 - 0.05 * (dx * dx + dy * dy)
        });
        let bowl = dem_from_fn(9, 1.0, |x, y| {
            let (dx, dy) = (x - 4.5, y - 4.5);
            0.05 * (dx * dx + dy * dy)
        });
        let (pd, td) = curvatures_from_dem(&dome).unwrap();
        let (pb, tb) = curvatures_from_dem(&bowl).unwrap();
        assert!(pd.get(2, 2) < 0.0 && td.get(2, 2) < 0.0);
        assert!(pb.get(2, 2) > 0.0 && tb.get(2, 2) > 0.0);
    }

    #[test]
    fn derivatives_unchanged_by_vertical_offset() {
        // Integer-valued DEM keeps the finite differences exact under +1000.
        let base = dem_from_fn(9, 1.0, |x, y| ((x * 7.0) as i64 % 13) as f64 + ((y * 3.0) as i64 % 5) as f64);
        let mut shifted = base.clone();
        for v in shifted.values_mut() {
            *v += 1000.0;
        }
        assert_eq!(slope_from_dem(&base).unwrap(), slope_from_dem(&shifted).unwrap());
        let (p0, t0) = curvatures_from_dem(&base).unwrap();
        let (p1, t1) = curvatures_from_dem(&shifted).unwrap();
        assert_eq!(p0, p1);
        assert_eq!(t0, t1);
        assert_eq!(flow_accumulation(&base).unwrap(), flow_accumulation(&shifted).unwrap());
    }

    #[test]
    fn mirroring_the_dem_mirrors_the_derivatives() {
        let dem = dem_from_fn(9, 1.0, |x, y| (0.3 * x).sin() * 2.0 + 0.1 * y + 0.02 * x * x);
        let mut mirrored = dem.clone();
        for row in 0..9 {
            for col in 0..9 {
                mirrored.set(row, col, dem.get(row, 8 - col));
            }
        }
        let s = slope_from_dem(&dem).unwrap();
        let sm = slope_from_dem(&mirrored).unwrap();
        let (p, t) = curvatures_from_dem(&dem).unwrap();
        let (pm, tm) = curvatures_from_dem(&mirrored).unwrap();
        for row in 1..8 {
            for col in 1..8 {
                assert_relative_eq!(s.get(row, col), sm.get(row, 8 - col), epsilon = 1e-12);
                assert_relative_eq!(p.get(row, col), pm.get(row, 8 - col), epsilon = 1e-12);
                assert_relative_eq!(t.get(row, col), tm.get(row, 8 - col), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn monotone_ramp_accumulates_downslope() {
        // Plane descending east: each cell drains due east, so area grows
        // linearly along every row.
        let dem = dem_from_fn(5, 1.0, |x, _| -x);
        let acc = flow_accumulation(&dem).unwrap();
        for row in 0..5 {
            for col in 0..5 {
                assert_eq!(acc.get(row, col), (col + 1) as f64);
            }
        }
    }

    #[test]
    fn pit_drains_through_fill() {
        // A closed pit in the middle of an outward-draining cone must not
        // trap area: the fill raises it and routing continues to the edge.
        let mut dem = dem_from_fn(7, 1.0, |x, y| {
            let (dx, dy) = (x - 3.5, y - 3.5);
            (dx * dx + dy * dy).sqrt()
        });
        dem.set(3, 3, -5.0);
        dem.set(3, 4, -4.0);
        let acc = flow_accumulation(&dem).unwrap();
        let filled = fill_depressions(&dem).unwrap();
        assert!(filled.get(3, 3) > -5.0);
        // Every cell drains somewhere: total area exiting the grid equals the
        // full catchment area.
        let rec = d8_receivers(&filled);
        let mut order: Vec<usize> = (0..49).collect();
        order.sort_by(|&a, &b| {
            filled.values()[b].partial_cmp(&filled.values()[a]).unwrap().then(a.cmp(&b))
        });
        let mut count = vec![0f64; 49];
        let mut out_total = 0.0;
        for &i in &order {
            count[i] += 1.0;
            match rec[i] {
                Some(j) => count[j] += count[i],
                None => out_total += count[i],
            }
        }
        assert_eq!(out_total, 49.0);
        let _ = acc;
    }

    #[test]
    fn flat_dem_drains_everything_after_epsilon_sloping() {
        let dem = dem_from_fn(6, 1.0, |_, _| 10.0);
        let filled = fill_depressions(&dem).unwrap();
        let rec = d8_receivers(&filled);
        let mut order: Vec<usize> = (0..36).collect();
        order.sort_by(|&a, &b| {
            filled.values()[b].partial_cmp(&filled.values()[a]).unwrap().then(a.cmp(&b))
        });
        let mut count = vec![0f64; 36];
        let mut boundary_outflow = 0.0;
        for &i in &order {
            count[i] += 1.0;
            match rec[i] {
                Some(j) => count[j] += count[i],
                None => boundary_outflow += count[i],
            }
        }
        assert_eq!(boundary_outflow, 36.0, "flat grid must shed its whole area");
    }

    #[test]
    fn v_valley_axis_dominates_hillslopes() {
        // V-shaped valley descending south: the axis column collects the
        // hillslopes, so its area must strictly dominate every off-axis cell
        // of the same row.
        let n = 15;
        let dem = dem_from_fn(n, 1.0, |x, y| 0.3 * y + 0.5 * (x - 7.5).abs());
        let acc = flow_accumulation(&dem).unwrap();
        for row in 2..n {
            let axis = acc.get(row, 7);
            for col in 0..n {
                if col != 7 {
                    assert!(
                        axis > acc.get(row, col),
                        "row {row}: axis {axis} <= hillslope {} at col {col}",
                        acc.get(row, col)
                    );
                }
            }
        }
        // Accumulation grows monotonically down the axis.
        for row in 1..n {
            assert!(acc.get(row, 7) >= acc.get(row - 1, 7));
        }
    }

    #[test]
    fn nodata_neighborhood_propagates() {
        let mut dem = dem_from_fn(5, 1.0, |x, _| x);
        dem.set(2, 2, -9999.0);
        let slope = slope_from_dem(&dem).unwrap();
        for row in 1..4 {
            for col in 1..4 {
                assert!(slope.is_nodata(row, col));
            }
        }
        let acc = flow_accumulation(&dem).unwrap();
        assert!(acc.is_nodata(2, 2));
    }
}
