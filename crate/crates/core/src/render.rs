//! Raster visualization as binary PPM (P6) images.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Nodata cells render in magenta so gaps are never mistaken for data.
pub const NODATA_COLOR: [u8; 3] = [255, 0, 255];

/// Named color ramps. Each is a piecewise-linear gradient over [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorRamp {
    /// Black to white.
    Gray,
    /// Blue through near-white to red; the range midpoint maps to the
    /// central stop, which suits signed fields like bed change.
    Diverging,
    /// Black, red, yellow, white.
    Heat,
}

impl ColorRamp {
    fn stops(self) -> &'static [[u8; 3]] {
        match self {
            ColorRamp::Gray => &[[0, 0, 0], [255, 255, 255]],
            ColorRamp::Diverging => &[[33, 102, 172], [247, 247, 247], [178, 24, 43]],
            ColorRamp::Heat => &[[0, 0, 0], [255, 0, 0], [255, 255, 0], [255, 255, 255]],
        }
    }

    /// Color at position `t` in [0, 1] (clamped).
    pub fn color_at(self, t: f64) -> [u8; 3] {
        let stops = self.stops();
        let t = t.clamp(0.0, 1.0);
        let scaled = t * (stops.len() - 1) as f64;
        let i = (scaled.floor() as usize).min(stops.len() - 2);
        let f = scaled - i as f64;
        let a = stops[i];
        let b = stops[i + 1];
        let mut out = [0u8; 3];
        for k in 0..3 {
            out[k] = (a[k] as f64 + (b[k] as f64 - a[k] as f64) * f).round() as u8;
        }
        out
    }
}

impl FromStr for ColorRamp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gray" | "grey" => Ok(ColorRamp::Gray),
            "diverging" => Ok(ColorRamp::Diverging),
            "heat" => Ok(ColorRamp::Heat),
            other => Err(Error::domain(format!(
                "unknown color ramp `{other}` (available: gray, diverging, heat)"
            ))),
        }
    }
}

/// Render to an in-memory binary PPM. Values map linearly from
/// `[lo, hi]` onto the ramp and are clamped outside the range; nodata cells
/// take the reserved color. Rendering never fails on nodata-bearing rasters.
pub fn render_image(raster: &Raster, ramp: ColorRamp, lo: f64, hi: f64) -> Result<Vec<u8>> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::domain(format!(
            "render range must be finite with lo < hi, got ({lo}, {hi})"
        )));
    }
    let (nr, nc) = (raster.nrows(), raster.ncols());
    let mut out = Vec::with_capacity(32 + nr * nc * 3);
    out.extend_from_slice(format!("P6\n{nc} {nr}\n255\n").as_bytes());
    let span = hi - lo;
    for &v in raster.values() {
        let px = if raster.is_nodata_value(v) {
            NODATA_COLOR
        } else {
            ramp.color_at((v - lo) / span)
        };
        out.extend_from_slice(&px);
    }
    Ok(out)
}

pub fn write_ppm(raster: &Raster, ramp: ColorRamp, lo: f64, hi: f64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = render_image(raster, ramp, lo, hi)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Geometry;

    fn raster(values: Vec<f64>) -> Raster {
        let n = values.len();
        let g = Geometry::new(1, n, 0.0, 0.0, 1.0).unwrap();
        Raster::new(g, -9999.0, values).unwrap()
    }

    #[test]
    fn ppm_header_and_size() {
        let img = render_image(&raster(vec![0.0, 0.5, 1.0]), ColorRamp::Gray, 0.0, 1.0).unwrap();
        assert!(img.starts_with(b"P6\n3 1\n255\n"));
        assert_eq!(img.len(), b"P6\n3 1\n255\n".len() + 9);
    }

    #[test]
    fn diverging_midpoint_hits_central_stop() {
        let img = render_image(&raster(vec![0.0]), ColorRamp::Diverging, -1.0, 1.0).unwrap();
        let px = &img[img.len() - 3..];
        assert_eq!(px, &[247, 247, 247]);
    }

    #[test]
    fn values_clamp_to_range() {
        let img = render_image(&raster(vec![-10.0, 10.0]), ColorRamp::Gray, 0.0, 1.0).unwrap();
        let data = &img[img.len() - 6..];
        assert_eq!(&data[..3], &[0, 0, 0]);
        assert_eq!(&data[3..], &[255, 255, 255]);
    }

    #[test]
    fn nodata_uses_reserved_color() {
        let img = render_image(&raster(vec![-9999.0]), ColorRamp::Heat, 0.0, 1.0).unwrap();
        assert_eq!(&img[img.len() - 3..], &NODATA_COLOR);
    }

    #[test]
    fn degenerate_range_is_domain_error() {
        assert!(render_image(&raster(vec![0.0]), ColorRamp::Gray, 1.0, 1.0).is_err());
        assert!("plasma".parse::<ColorRamp>().is_err());
    }
}
