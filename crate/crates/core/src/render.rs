//! Heatmap rendering to binary PPM (P6): header `P6\n<width> <height>\n255\n`
//! followed by row-major RGB bytes, one pixel per grid cell, top row first.

use std::path::Path;

use crate::container::write_file;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Piecewise-linear colour ramp. Values outside the range clamp to the end
/// colours.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorMap {
    pub name: String,
    points: Vec<(f64, [u8; 3])>,
}

impl ColorMap {
    pub fn new(name: &str, points: Vec<(f64, [u8; 3])>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Config("a colour map needs at least two control points".into()));
        }
        if points.iter().any(|(f, _)| !(0.0..=1.0).contains(f)) || points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("control points must be strictly increasing within [0, 1]".into()));
        }
        Ok(ColorMap { name: name.to_string(), points })
    }

    /// Dark blue through teal and green to yellow.
    pub fn sequential() -> Self {
        Self::new(
            "sequential",
            vec![
                (0.0, [68, 1, 84]),
                (0.25, [59, 82, 139]),
                (0.5, [33, 145, 140]),
                (0.75, [94, 201, 98]),
                (1.0, [253, 231, 37]),
            ],
        )
        .expect("valid map")
    }

    /// Blue, white at the centre, red.
    pub fn diverging() -> Self {
        Self::new("diverging", vec![(0.0, [33, 102, 172]), (0.5, [247, 247, 247]), (1.0, [178, 24, 43])]).expect("valid map")
    }

    pub fn points(&self) -> &[(f64, [u8; 3])] {
        &self.points
    }

    /// Colour at fraction `t` of the range.
    pub fn color(&self, t: f64) -> [u8; 3] {
        let first = self.points[0];
        let last = self.points[self.points.len() - 1];
        if t.is_nan() || t <= first.0 {
            return first.1;
        }
        if t >= last.0 {
            return last.1;
        }
        let i = self.points.windows(2).position(|w| t <= w[1].0).expect("t inside the ramp");
        let ((f0, c0), (f1, c1)) = (self.points[i], self.points[i + 1]);
        let s = (t - f0) / (f1 - f0);
        std::array::from_fn(|k| (c0[k] as f64 + (c1[k] as f64 - c0[k] as f64) * s).round() as u8)
    }
}

fn plane<T: Scalar>(field: &Tensor<T>) -> Result<(usize, usize, Vec<f64>)> {
    let s = field.shape();
    let ok = match s.len() {
        2 => true,
        3 => s[0] == 1,
        4 => s[0] == 1 && s[1] == 1,
        _ => false,
    };
    if !ok {
        return Err(Error::shape("render", format!("expected a single 2-D field, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((h, w, field.data().iter().map(|v| v.to_f64_lossy()).collect()))
}

fn check_range(lo: f64, hi: f64) -> Result<()> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!("render range needs finite lo < hi, got ({lo}, {hi})")));
    }
    Ok(())
}

fn ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Separator colour between panels.
pub const SEPARATOR: [u8; 3] = [255, 255, 255];
pub const SEPARATOR_WIDTH: usize = 2;

pub fn heatmap_bytes<T: Scalar>(field: &Tensor<T>, range: (f64, f64), cmap: &ColorMap) -> Result<Vec<u8>> {
    panel_bytes(&[("", field)], range, cmap)
}

/// Fields side by side, left to right in input order, separated by
/// 2-pixel white columns.
pub fn panel_bytes<T: Scalar>(panels: &[(&str, &Tensor<T>)], range: (f64, f64), cmap: &ColorMap) -> Result<Vec<u8>> {
    check_range(range.0, range.1)?;
    if panels.is_empty() {
        return Err(Error::Empty("no panels to render".into()));
    }
    let planes = panels.iter().map(|(_, f)| plane(*f)).collect::<Result<Vec<_>>>()?;
    let (h, w) = (planes[0].0, planes[0].1);
    if planes.iter().any(|p| (p.0, p.1) != (h, w)) {
        return Err(Error::shape("render_panel", "panels have different sizes"));
    }
    let k = planes.len();
    let width = k * w + SEPARATOR_WIDTH * (k - 1);
    let span = range.1 - range.0;
    let mut rgb = Vec::with_capacity(width * h * 3);
    for y in 0..h {
        for (i, (_, _, v)) in planes.iter().enumerate() {
            if i > 0 {
                for _ in 0..SEPARATOR_WIDTH {
                    rgb.extend_from_slice(&SEPARATOR);
                }
            }
            for x in 0..w {
                rgb.extend_from_slice(&cmap.color((v[y * w + x] - range.0) / span));
            }
        }
    }
    Ok(ppm(width, h, &rgb))
}

pub fn render_heatmap<T: Scalar>(field: &Tensor<T>, range: (f64, f64), cmap: &ColorMap, path: &Path) -> Result<()> {
    write_file(path, &heatmap_bytes(field, range, cmap)?)
}

/// Writes the panel image and a `.txt` sidecar listing each label with its
/// left pixel offset.
pub fn render_panel<T: Scalar>(panels: &[(&str, &Tensor<T>)], range: (f64, f64), cmap: &ColorMap, path: &Path) -> Result<()> {
    let bytes = panel_bytes(panels, range, cmap)?;
    let w = panels[0].1.shape().last().copied().unwrap_or(0);
    let mut labels = format!("range {} {}\ncolormap {}\n", range.0, range.1, cmap.name);
    for (i, (label, _)) in panels.iter().enumerate() {
        labels += &format!("{} {}\n", i * (w + SEPARATOR_WIDTH), label);
    }
    write_file(path, &bytes)?;
    write_file(&path.with_extension("txt"), labels.as_bytes())
}

/// Joint (min, max) over several fields, widened if degenerate.
pub fn shared_range<T: Scalar>(fields: &[&Tensor<T>]) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for f in fields {
        for v in f.data() {
            let v = v.to_f64_lossy();
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !(lo < hi) {
        let c = if lo.is_finite() { lo } else { 0.0 };
        return (c - 1.0, c + 1.0);
    }
    (lo, hi)
}

/// `(-r, r)` with `r = max |d|`, so zero difference maps to the centre colour.
pub fn symmetric_range<T: Scalar>(fields: &[&Tensor<T>]) -> (f64, f64) {
    let r = fields
        .iter()
        .flat_map(|f| f.data().iter().map(|v| v.to_f64_lossy().abs()))
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let r = if r > 0.0 { r } else { 1.0 };
    (-r, r)
}

/// `<variable>_<method>_<kind>.ppm`
pub fn image_name(variable: &str, method: &str, kind: &str) -> String {
    format!("{variable}_{method}_{kind}.ppm")
}
