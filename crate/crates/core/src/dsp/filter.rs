use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

use super::stft::{plan_forward, plan_inverse};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    LowPass,
    HighPass,
}

/// First-order algebraic filter with normalized angular cutoff in `(0, pi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterSpec {
    pub cutoff: f64,
    pub kind: FilterKind,
}

impl FilterSpec {
    pub fn new(cutoff: f64, kind: FilterKind) -> Result<Self> {
        if !(cutoff > 0.0 && cutoff <= PI) {
            return Err(Error::invalid("spectral_filter", format!("cutoff {cutoff} outside (0, pi]")));
        }
        Ok(Self { cutoff, kind })
    }

    pub fn low_pass(cutoff: f64) -> Result<Self> {
        Self::new(cutoff, FilterKind::LowPass)
    }

    pub fn high_pass(cutoff: f64) -> Result<Self> {
        Self::new(cutoff, FilterKind::HighPass)
    }

    /// `H_LP = 1 / (1 + j w/wc)`, `H_HP = (j w/wc) / (1 + j w/wc)`.
    pub fn transfer(&self, omega: f64) -> Complex64 {
        let r = Complex64::new(0.0, omega / self.cutoff);
        let lp = Complex64::new(1.0, 0.0) / (Complex64::new(1.0, 0.0) + r);
        match self.kind {
            FilterKind::LowPass => lp,
            FilterKind::HighPass => r * lp,
        }
    }

    /// Full-length Hermitian response for a sequence of `len` samples. The
    /// `K = len/2 + 1` nonnegative bins sit at `pi k / (K - 1)`; negative
    /// bins take the conjugate, and self-conjugate bins keep the real part,
    /// so filtering a real sequence stays real.
    fn response(&self, len: usize) -> Vec<Complex64> {
        let k_bins = len / 2 + 1;
        let mut d = vec![Complex64::default(); len];
        for k in 0..k_bins {
            let h = self.transfer(PI * k as f64 / (k_bins - 1) as f64);
            let mirror = (len - k) % len;
            if mirror == k {
                d[k] = Complex64::new(h.re, 0.0);
            } else {
                d[k] = h;
                d[mirror] = h.conj();
            }
        }
        d
    }
}

/// Applies `d` along the last axis of row-major `rows x len` data.
fn apply_response(x: &[f64], len: usize, d: &[Complex64]) -> Vec<f64> {
    let fwd = plan_forward(len);
    let inv = plan_inverse(len);
    let mut out = Vec::with_capacity(x.len());
    let mut buf = vec![Complex64::default(); len];
    for row in x.chunks(len) {
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = Complex64::new(v, 0.0);
        }
        fwd.process(&mut buf);
        for (b, h) in buf.iter_mut().zip(d) {
            *b *= h;
        }
        inv.process(&mut buf);
        out.extend(buf.iter().map(|c| c.re / len as f64));
    }
    out
}

impl Tape {
    /// Frequency-domain filtering along the last axis, independently per row.
    pub fn spectral_filter(&mut self, x: Var, spec: FilterSpec) -> Result<Var> {
        let spec = FilterSpec::new(spec.cutoff, spec.kind)?;
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| Error::shape("spectral_filter", "scalar input"))?;
        if len < 2 {
            return Err(Error::shape("spectral_filter", format!("sequence length {len} < 2")));
        }
        let d = spec.response(len);
        let y = apply_response(self.data(x), len, &d);
        let out = Tensor::new(&shape, y)?;
        let dc: Vec<Complex64> = d.iter().map(|h| h.conj()).collect();
        self.push("spectral_filter", out, &[x], move |g, _| vec![Some(apply_response(g, len, &dc))])
    }

    /// Keeps every `factor`-th sample along the last axis, starting at 0.
    pub fn decimate(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("decimate", "factor must be >= 1"));
        }
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| Error::shape("decimate", "scalar input"))?;
        let out_len = len.div_ceil(factor);
        let rows = self.value(x).numel() / len;
        let idx = (0..rows)
            .flat_map(|r| (0..out_len).map(move |t| r * len + t * factor))
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_len;
        self.gather(x, idx, &out_shape)
    }

    /// Linear interpolation to `factor` times the length along the last
    /// axis; output sample `i` sits at input position `i / factor`, held at
    /// the final sample past the end.
    pub fn interpolate_linear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("interpolate_linear", "factor must be >= 1"));
        }
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| Error::shape("interpolate_linear", "scalar input"))?;
        let out_len = len * factor;
        let taps: Vec<(usize, usize, f64)> = (0..out_len)
            .map(|i| {
                let i0 = i / factor;
                let t = (i % factor) as f64 / factor as f64;
                (i0, (i0 + 1).min(len - 1), t)
            })
            .collect();
        let xd = self.data(x);
        let mut y = Vec::with_capacity(xd.len() * factor);
        for row in xd.chunks(len) {
            y.extend(taps.iter().map(|&(a, b, t)| row[a] + t * (row[b] - row[a])));
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_len;
        let out = Tensor::new(&out_shape, y)?;
        self.push("interpolate_linear", out, &[x], move |g, _| {
            let mut gx = vec![0.0; g.len() / factor];
            for (gr, gxr) in g.chunks(out_len).zip(gx.chunks_mut(len)) {
                for (&gv, &(a, b, t)) in gr.iter().zip(&taps) {
                    gxr[a] += gv * (1.0 - t);
                    gxr[b] += gv * t;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Low-pass filter, then decimate.
    pub fn downsample(&mut self, x: Var, factor: usize, cutoff: f64) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("downsample", "factor must be >= 1"));
        }
        let y = self.spectral_filter(x, FilterSpec::low_pass(cutoff)?)?;
        self.decimate(y, factor)
    }

    /// Linear interpolation, then high-pass filter.
    pub fn upsample(&mut self, x: Var, factor: usize, cutoff: f64) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("upsample", "factor must be >= 1"));
        }
        let spec = FilterSpec::high_pass(cutoff)?;
        let y = self.interpolate_linear(x, factor)?;
        self.spectral_filter(y, spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient_check, GradCheckOpts};

    fn run(x: Vec<f64>, f: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Vec<f64> {
        let mut tape = Tape::new();
        let n = x.len();
        let v = tape.constant(Tensor::new(&[n], x).unwrap());
        let y = f(&mut tape, v).unwrap();
        tape.data(y).to_vec()
    }

    #[test]
    fn complementary_pair() {
        let lp = FilterSpec::low_pass(0.7).unwrap();
        let hp = FilterSpec::high_pass(0.7).unwrap();
        for i in 0..=200 {
            let w = PI * i as f64 / 200.0;
            let (a, b) = (lp.transfer(w), hp.transfer(w));
            assert!((a + b - Complex64::new(1.0, 0.0)).norm() < 1e-9);
            assert!((a.norm_sqr() + b.norm_sqr() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn magnitudes_are_monotone() {
        let lp = FilterSpec::low_pass(PI / 2.0).unwrap();
        let hp = FilterSpec::high_pass(PI / 2.0).unwrap();
        let mut prev = (f64::INFINITY, -1.0);
        for i in 0..=100 {
            let w = PI * i as f64 / 100.0;
            let (a, b) = (lp.transfer(w).norm(), hp.transfer(w).norm());
            assert!(a <= prev.0 && b >= prev.1);
            prev = (a, b);
        }
    }

    #[test]
    fn half_power_at_cutoff() {
        for wc in [0.3, PI / 2.0, PI] {
            let h = FilterSpec::low_pass(wc).unwrap().transfer(wc).norm();
            assert!((h - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
        }
    }

    #[test]
    fn cutoff_out_of_range() {
        assert!(FilterSpec::low_pass(0.0).is_err());
        assert!(FilterSpec::high_pass(3.2).is_err());
        assert!(FilterSpec::low_pass(PI).is_ok());
    }

    #[test]
    fn constant_sequences() {
        let lp = run(vec![2.5; 9], |t, x| t.spectral_filter(x, FilterSpec::low_pass(1.0)?));
        assert!(lp.iter().all(|v| (v - 2.5).abs() < 1e-12));
        let hp = run(vec![2.5; 10], |t, x| t.spectral_filter(x, FilterSpec::high_pass(1.0)?));
        assert!(hp.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn filtered_pair_sums_to_input() {
        for n in [8, 11] {
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.9).sin() + 0.1 * i as f64).collect();
            let a = run(x.clone(), |t, v| t.spectral_filter(v, FilterSpec::low_pass(1.2)?));
            let b = run(x.clone(), |t, v| t.spectral_filter(v, FilterSpec::high_pass(1.2)?));
            for i in 0..n {
                assert!((a[i] + b[i] - x[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resampling_lengths() {
        assert_eq!(run(vec![1.0; 16], |t, x| t.downsample(x, 2, PI / 2.0)).len(), 8);
        assert_eq!(run(vec![1.0; 8], |t, x| t.upsample(x, 2, PI / 2.0)).len(), 16);
    }

    #[test]
    fn downsample_attenuates_high_tone() {
        let n = 64;
        // Normalized frequency 3 pi / 4, above the half-band cutoff.
        let x: Vec<f64> = (0..n).map(|i| (0.75 * PI * i as f64).cos()).collect();
        let y = run(x.clone(), |t, v| t.spectral_filter(v, FilterSpec::low_pass(PI / 2.0)?));
        let e = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        assert!(e(&y) < 0.5 * e(&x), "{} vs {}", e(&y), e(&x));
    }

    #[test]
    fn interpolation_preserves_dc_and_ramps() {
        let y = run(vec![3.0; 5], |t, x| t.interpolate_linear(x, 3));
        assert!(y.iter().all(|&v| v == 3.0));
        let y = run(vec![0.0, 2.0, 4.0], |t, x| t.interpolate_linear(x, 2));
        assert_eq!(y, vec![0.0, 1.0, 2.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn filter_gradients() {
        let x = Tensor::new(&[2, 7], (0..14).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::new(&[2, 7], (0..14).map(|i| (i as f64 * 1.3).cos()).collect()).unwrap();
        for kind in [FilterKind::LowPass, FilterKind::HighPass] {
            let wt = w.clone();
            let r = gradient_check(
                move |t, x| {
                    let y = t.spectral_filter(x, FilterSpec::new(1.1, kind)?)?;
                    let w = t.constant(wt.clone());
                    let p = t.mul(y, w)?;
                    t.sum(p)
                },
                &x,
                GradCheckOpts::default(),
            )
            .unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn resampling_gradients() {
        let x = Tensor::new(&[3, 6], (0..18).map(|i| (i as f64 * 0.61).sin()).collect()).unwrap();
        let r = gradient_check(
            |t, x| {
                let d = t.downsample(x, 2, PI / 2.0)?;
                let u = t.upsample(d, 2, PI / 2.0)?;
                let s = t.square(u)?;
                t.sum(s)
            },
            &x,
            GradCheckOpts::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
