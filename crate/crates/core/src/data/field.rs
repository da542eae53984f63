//! Smooth random fields and grid resampling.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stationary Gaussian random fields on an `h x w` periodic grid, made by
/// filtering complex white noise with a radial power-law amplitude spectrum
/// `|k|^-amplitude_exponent` (the mean mode is removed). Every pixel has
/// zero mean and unit variance in expectation.
pub struct SpectralGenerator {
    h: usize,
    w: usize,
    amp: Vec<f64>,
    row_fft: Arc<dyn Fft<f64>>,
    col_fft: Arc<dyn Fft<f64>>,
}

impl SpectralGenerator {
    pub fn new(h: usize, w: usize, amplitude_exponent: f64) -> Result<Self> {
        if h < 2 || w < 2 {
            return Err(Error::shape("spectral field", format!("grid {h}x{w} is too small")));
        }
        let freq = |i: usize, n: usize| {
            let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
            k / n as f64
        };
        let mut amp = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let k = freq(y, h).hypot(freq(x, w));
                if k > 0.0 {
                    amp[y * w + x] = k.powf(-amplitude_exponent);
                }
            }
        }
        let norm = amp.iter().map(|a| a * a).sum::<f64>().sqrt();
        amp.iter_mut().for_each(|a| *a /= norm);
        let mut planner = FftPlanner::new();
        Ok(SpectralGenerator { h, w, amp, row_fft: planner.plan_fft_inverse(w), col_fft: planner.plan_fft_inverse(h) })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    /// One field, row-major.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let mut buf: Vec<Complex<f64>> = self
            .amp
            .iter()
            .map(|&a| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex::new(re * a, im * a)
            })
            .collect();
        self.row_fft.process(&mut buf);
        let mut col = vec![Complex::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            self.col_fft.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        buf.into_iter().map(|c| c.re).collect()
    }
}

fn plane_dims<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() < 2 {
        return Err(Error::shape(op, format!("need at least 2 dims, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Ok((t.numel() / (h * w).max(1), h, w))
}

/// Non-overlapping `factor x factor` block means over the last two dims.
pub fn coarsen<T: Scalar>(t: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims(t, "coarsen")?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape("coarsen", format!("{h}x{w} is not divisible by {factor}")));
    }
    let (ch, cw) = (h / factor, w / factor);
    let inv = T::one() / T::lit((factor * factor) as f64);
    let mut out = Vec::with_capacity(planes * ch * cw);
    for p in t.data().chunks(h * w) {
        for cy in 0..ch {
            for cx in 0..cw {
                let mut s = T::zero();
                for y in cy * factor..(cy + 1) * factor {
                    for x in cx * factor..(cx + 1) * factor {
                        s += p[y * w + x];
                    }
                }
                out.push(s * inv);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ch;
    shape[r - 1] = cw;
    Tensor::new(shape, out)
}

/// Source index and weight for each target cell along one axis. Cell centres
/// are aligned (target cell `i` sits at source coordinate
/// `(i + 0.5) * m / n - 0.5`); beyond the outermost source centres the edge
/// interval is extended linearly, so affine fields are reproduced exactly.
fn axis_weights(m: usize, n: usize) -> Vec<(usize, f64)> {
    (0..n)
        .map(|i| {
            let pos = (i as f64 + 0.5) * m as f64 / n as f64 - 0.5;
            let i0 = (pos.floor().max(0.0) as usize).min(m - 2);
            (i0, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of the last two dims onto `th x tw`.
pub fn regrid_bilinear<T: Scalar>(t: &Tensor<T>, th: usize, tw: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = plane_dims(t, "regrid_bilinear")?;
    if h < 2 || w < 2 {
        return Err(Error::shape("regrid_bilinear", format!("source {h}x{w} needs at least 2x2 cells")));
    }
    if th == 0 || tw == 0 {
        return Err(Error::shape("regrid_bilinear", "empty target grid".to_string()));
    }
    let ys = axis_weights(h, th);
    let xs = axis_weights(w, tw);
    let mut out = Vec::with_capacity(planes * th * tw);
    for p in t.data().chunks(h * w) {
        for &(y0, ty) in &ys {
            let ty = T::lit(ty);
            for &(x0, tx) in &xs {
                let tx = T::lit(tx);
                let at = |y: usize, x: usize| p[y * w + x];
                let top = at(y0, x0) + (at(y0, x0 + 1) - at(y0, x0)) * tx;
                let bottom = at(y0 + 1, x0) + (at(y0 + 1, x0 + 1) - at(y0 + 1, x0)) * tx;
                out.push(top + (bottom - top) * ty);
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = th;
    shape[r - 1] = tw;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plane(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[1, 1, h, w], |i| f(i / w, i % w))
    }

    #[test]
    fn coarsen_examples() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(coarsen(&t, 2).unwrap().data(), &[2.5]);
        let c = coarsen(&plane(16, 8, |_, _| 3.25), 4).unwrap();
        assert_eq!(c.shape(), &[1, 1, 4, 2]);
        assert!(c.data().iter().all(|&v| v == 3.25));
        assert!(coarsen(&plane(10, 8, |_, _| 0.0), 4).is_err());
    }

    #[test]
    fn coarsen_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Tensor::from_fn(&[2, 1, 64, 64], |_| rng.gen_range(0.0..100.0));
        let c = coarsen(&f, 8).unwrap();
        let (sf, sc): (f64, f64) = (f.data().iter().sum(), c.data().iter().sum());
        assert!((sc * 64.0 - sf).abs() / sf < 1e-9);
    }

    #[test]
    fn regrid_preserves_constants_and_affine_fields() {
        let c = regrid_bilinear(&plane(4, 5, |_, _| -2.5), 32, 40).unwrap();
        assert!(c.data().iter().all(|&v| (v + 2.5).abs() < 1e-14));
        let ramp = |y: f64, x: f64| 1.5 + 0.75 * y - 2.0 * x;
        // coarse cell centres in fine-pixel coordinates: (8j + 3.5)
        let coarse = plane(8, 8, |y, x| ramp(8.0 * y as f64 + 3.5, 8.0 * x as f64 + 3.5));
        let fine = regrid_bilinear(&coarse, 64, 64).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let v = fine.data()[y * 64 + x];
                assert!((v - ramp(y as f64, x as f64)).abs() < 1e-12, "{y},{x}");
            }
        }
        // coarsening a fine ramp and regridding returns it
        let f = plane(64, 64, |y, x| ramp(y as f64, x as f64));
        let back = regrid_bilinear(&coarsen(&f, 8).unwrap(), 64, 64).unwrap();
        for (a, b) in back.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn regrid_rejects_degenerate_sources() {
        assert!(regrid_bilinear(&plane(1, 4, |_, _| 0.0), 8, 8).is_err());
        assert!(regrid_bilinear(&plane(4, 4, |_, _| 0.0), 0, 8).is_err());
    }

    #[test]
    fn spectral_fields_have_unit_pixel_variance() {
        let g = SpectralGenerator::new(32, 48, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400;
        let mut s2 = 0.0;
        let mut s1 = 0.0;
        for _ in 0..n {
            let f = g.sample(&mut rng);
            s1 += f[100];
            s2 += f[100] * f[100] + f[1000] * f[1000];
        }
        let var = s2 / (2 * n) as f64;
        assert!((var - 1.0).abs() < 0.15, "{var}");
        assert!((s1 / n as f64).abs() < 0.15);
    }
}
