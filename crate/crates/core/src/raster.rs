//! Single-band f64 rasters with ESRI ASCII grid I/O.
//!
//! Values are stored row-major with row 0 at the northern edge, matching the
//! on-disk layout of `.asc` files. Nodata is a sentinel value carried by the
//! raster; arithmetic never mixes nodata cells with live cells.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Grid georeferencing: cell counts, lower-left corner, square cell size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub nrows: usize,
    pub ncols: usize,
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
}

impl Geometry {
    pub fn new(nrows: usize, ncols: usize, xll: f64, yll: f64, cellsize: f64) -> Result<Self> {
        if nrows == 0 || ncols == 0 {
            return Err(Error::domain("grid must have at least one row and column"));
        }
        if !(cellsize.is_finite() && cellsize > 0.0) {
            return Err(Error::domain(format!("cellsize must be positive, got {cellsize}")));
        }
        if !xll.is_finite() || !yll.is_finite() {
            return Err(Error::domain("grid origin must be finite"));
        }
        Ok(Geometry { nrows, ncols, xll, yll, cellsize })
    }

    pub fn len(&self) -> usize {
        self.nrows * self.ncols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Easting of the center of column `col`.
    pub fn x_center(&self, col: usize) -> f64 {
        self.xll + (col as f64 + 0.5) * self.cellsize
    }

    /// Northing of the center of row `row` (row 0 is the northern edge).
    pub fn y_center(&self, row: usize) -> f64 {
        self.yll + (self.nrows - 1 - row) as f64 * self.cellsize + 0.5 * self.cellsize
    }

    pub fn width(&self) -> f64 {
        self.ncols as f64 * self.cellsize
    }

    pub fn height(&self) -> f64 {
        self.nrows as f64 * self.cellsize
    }

    /// Cell containing the point, or None if outside the grid extent.
    pub fn cell_at(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = (x - self.xll) / self.cellsize;
        let fy = (y - self.yll) / self.cellsize;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let col = fx.floor() as usize;
        let row_south = fy.floor() as usize;
        if col >= self.ncols || row_south >= self.nrows {
            return None;
        }
        Some((self.nrows - 1 - row_south, col))
    }

    /// True when `other` lies entirely inside this extent (small slack for
    /// floating-point edges).
    pub fn contains_extent(&self, other: &Geometry) -> bool {
        let eps = 1e-9 * self.cellsize;
        other.xll >= self.xll - eps
            && other.yll >= self.yll - eps
            && other.xll + other.width() <= self.xll + self.width() + eps
            && other.yll + other.height() <= self.yll + self.height() + eps
    }
}

/// Row-major single-band grid. Non-nodata values are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    geom: Geometry,
    nodata: f64,
    values: Vec<f64>,
}

impl Raster {
    pub fn new(geom: Geometry, nodata: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != geom.len() {
            return Err(Error::domain(format!(
                "value buffer holds {} cells, geometry needs {}",
                values.len(),
                geom.len()
            )));
        }
        if !nodata.is_finite() {
            return Err(Error::domain("nodata sentinel must be finite"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite value at cell ({}, {})",
                i / geom.ncols,
                i % geom.ncols
            )));
        }
        Ok(Raster { geom, nodata, values })
    }

    /// Constant-valued raster.
    pub fn filled(geom: Geometry, nodata: f64, fill: f64) -> Result<Self> {
        Raster::new(geom, nodata, vec![fill; geom.len()])
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn nrows(&self) -> usize {
        self.geom.nrows
    }

    pub fn ncols(&self) -> usize {
        self.geom.ncols
    }

    pub fn cellsize(&self) -> f64 {
        self.geom.cellsize
    }

    pub fn nodata(&self) -> f64 {
        self.nodata
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.geom.nrows && col < self.geom.ncols);
        row * self.geom.ncols + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.index(row, col)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        let i = self.index(row, col);
        self.values[i] = v;
    }

    #[inline]
    pub fn is_nodata(&self, row: usize, col: usize) -> bool {
        self.get(row, col) == self.nodata
    }

    #[inline]
    pub fn is_nodata_value(&self, v: f64) -> bool {
        v == self.nodata
    }

    /// Count of live (non-nodata) cells.
    pub fn live_cells(&self) -> usize {
        self.values.iter().filter(|&&v| v != self.nodata).count()
    }

    pub fn same_geometry(&self, other: &Raster) -> bool {
        self.geom == other.geom
    }

    pub fn read_ascii_path(path: impl AsRef<Path>) -> Result<Raster> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        read_ascii_grid(BufReader::new(file), path)
    }

    pub fn write_ascii_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        write_ascii_grid(self, &mut w).map_err(|e| Error::io(path, e))
    }
}

const HEADER_KEYS: [&str; 6] = [
    "ncols",
    "nrows",
    "xllcorner",
    "yllcorner",
    "cellsize",
    "nodata_value",
];

/// Parse an ESRI ASCII grid. Header keys are case-insensitive and may appear
/// in any order; the six standard keys must all be present before the data
/// block. Values are row-major, northernmost row first.
pub fn read_ascii_grid<R: BufRead>(reader: R, path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let mut header: [Option<f64>; 6] = [None; 6];
    let mut seen = 0usize;
    let mut values: Vec<f64> = Vec::new();
    let mut expected: Option<usize> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let mut tokens = line.split_whitespace().peekable();
        if tokens.peek().is_none() {
            continue;
        }
        if seen < 6 {
            let key = tokens.next().unwrap();
            let lower = key.to_ascii_lowercase();
            let slot = HEADER_KEYS
                .iter()
                .position(|&k| k == lower)
                .ok_or_else(|| {
                    Error::parse(path, lineno, format!("unknown header key `{key}`"))
                })?;
            if header[slot].is_some() {
                return Err(Error::parse(path, lineno, format!("duplicate header key `{key}`")));
            }
            let raw = tokens.next().ok_or_else(|| {
                Error::parse(path, lineno, format!("header key `{key}` has no value"))
            })?;
            let parsed: f64 = raw.parse().map_err(|_| {
                Error::parse(path, lineno, format!("invalid number `{raw}` for `{key}`"))
            })?;
            if tokens.next().is_some() {
                return Err(Error::parse(path, lineno, "trailing tokens after header value"));
            }
            header[slot] = Some(parsed);
            seen += 1;
            continue;
        }
        if expected.is_none() {
            let ncols = header[0].unwrap();
            let nrows = header[1].unwrap();
            if ncols.fract() != 0.0 || nrows.fract() != 0.0 || ncols < 1.0 || nrows < 1.0 {
                return Err(Error::parse(path, lineno, "ncols/nrows must be positive integers"));
            }
            let n = (nrows as usize) * (ncols as usize);
            values.reserve_exact(n);
            expected = Some(n);
        }
        for tok in tokens {
            let v: f64 = tok.parse().map_err(|_| {
                Error::parse(path, lineno, format!("invalid data value `{tok}`"))
            })?;
            values.push(v);
            if values.len() > expected.unwrap() {
                return Err(Error::parse(path, lineno, "more data values than nrows * ncols"));
            }
        }
    }

    if seen < 6 {
        let missing: Vec<&str> = HEADER_KEYS
            .iter()
            .zip(header.iter())
            .filter(|(_, v)| v.is_none())
            .map(|(k, _)| *k)
            .collect();
        return Err(Error::parse(
            path,
            0,
            format!("incomplete header, missing: {}", missing.join(", ")),
        ));
    }
    let ncols = header[0].unwrap() as usize;
    let nrows = header[1].unwrap() as usize;
    let expected = nrows * ncols;
    if values.len() != expected {
        return Err(Error::parse(
            path,
            0,
            format!("expected {expected} data values, found {}", values.len()),
        ));
    }
    let nodata = header[5].unwrap();
    let geom = Geometry::new(nrows, ncols, header[2].unwrap(), header[3].unwrap(), header[4].unwrap())?;
    // Map any non-finite payload cells onto the sentinel so the finiteness
    // invariant holds for files written by other tools.
    let values = values
        .into_iter()
        .map(|v| if v.is_finite() { v } else { nodata })
        .collect();
    Raster::new(geom, nodata, values)
}

/// Serialize in canonical key order. Scalars use shortest round-trip
/// formatting, so read(write(r)) reproduces every value bit-exactly and a
/// second write is byte-identical.
pub fn write_ascii_grid<W: Write>(raster: &Raster, w: &mut W) -> std::io::Result<()> {
    let g = raster.geometry();
    writeln!(w, "ncols {}", g.ncols)?;
    writeln!(w, "nrows {}", g.nrows)?;
    writeln!(w, "xllcorner {}", g.xll)?;
    writeln!(w, "yllcorner {}", g.yll)?;
    writeln!(w, "cellsize {}", g.cellsize)?;
    writeln!(w, "NODATA_value {}", raster.nodata())?;
    let mut line = String::new();
    for row in 0..g.nrows {
        line.clear();
        for col in 0..g.ncols {
            if col > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{}", raster.get(row, col)));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Nearest-neighbor resampling onto `target`. Every target cell center must
/// fall inside the source extent; nodata propagates.
pub fn resample_nearest(src: &Raster, target: &Geometry) -> Result<Raster> {
    if !src.geometry().contains_extent(target) {
        return Err(Error::domain(format!(
            "target extent ({} x {} at {},{}) is not contained in source extent",
            target.width(),
            target.height(),
            target.xll,
            target.yll
        )));
    }
    let sg = *src.geometry();
    let mut out = Vec::with_capacity(target.len());
    for row in 0..target.nrows {
        let y = target.y_center(row);
        // Clamp guards cell centers that sit exactly on the shared outer edge.
        let fy = ((y - sg.yll) / sg.cellsize).floor();
        let row_south = (fy.max(0.0) as usize).min(sg.nrows - 1);
        let src_row = sg.nrows - 1 - row_south;
        for col in 0..target.ncols {
            let x = target.x_center(col);
            let fx = ((x - sg.xll) / sg.cellsize).floor();
            let src_col = (fx.max(0.0) as usize).min(sg.ncols - 1);
            // Nodata propagates: the sentinel is copied through unchanged.
            out.push(src.get(src_row, src_col));
        }
    }
    Raster::new(*target, src.nodata(), out)
}
