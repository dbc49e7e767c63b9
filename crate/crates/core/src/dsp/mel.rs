use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::Fft;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

use super::stft::{frame_count, plan_forward, stft, Window};

/// Power floor added before log compression.
pub const MEL_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MelParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper edge; `None` means Nyquist.
    pub f_max: Option<f64>,
    pub window: Window,
}

impl Default for MelParams {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 256,
            n_mels: 128,
            f_min: 0.0,
            f_max: None,
            window: Window::Hann,
        }
    }
}

impl MelParams {
    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        let nyq = self.sample_rate as f64 / 2.0;
        if self.sample_rate == 0 {
            return Err(Error::config("mel.sample_rate", "must be positive"));
        }
        if self.n_fft < 2 || self.hop == 0 || self.n_mels == 0 {
            return Err(Error::config("mel", "n_fft >= 2, hop >= 1 and n_mels >= 1 required"));
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max() && self.f_max() <= nyq) {
            return Err(Error::config(
                "mel.f_max",
                format!("need 0 <= f_min < f_max <= {nyq}"),
            ));
        }
        Ok(())
    }

    pub fn frames_for(&self, len: usize) -> Option<usize> {
        frame_count(len, self.n_fft, self.hop)
    }
}

/// Triangular filters equally spaced on the mel scale, `[n_mels, n_fft/2+1]`
/// row-major. Fails if any filter covers no FFT bin.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<Tensor> {
    let nyq = sample_rate as f64 / 2.0;
    if !(f_min >= 0.0 && f_min < f_max && f_max <= nyq) || n_mels == 0 || n_fft < 2 {
        return Err(Error::invalid(
            "mel_filterbank",
            format!("bad range f_min={f_min} f_max={f_max} (nyquist {nyq}), n_mels={n_mels}"),
        ));
    }
    let bins = n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let freq = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
    let mut w = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut w[m * bins..(m + 1) * bins];
        for (k, v) in row.iter_mut().enumerate() {
            let f = freq(k);
            let up = (f - lo) / (c - lo);
            let down = (hi - f) / (hi - c);
            *v = up.min(down).max(0.0);
        }
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::invalid(
                "mel_filterbank",
                format!("filter {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; n_mels too large for n_fft {n_fft}"),
            ));
        }
    }
    Tensor::new(&[n_mels, bins], w)
}

/// Log-compressed mel power spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    /// `[n_mels, n_frames]`.
    pub values: Tensor,
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.values.shape()[1]
    }

    /// Values shifted so that silence maps to zero.
    pub fn floor_referenced(&self) -> Tensor {
        let off = MEL_FLOOR.ln();
        let data = self.values.data().iter().map(|v| v - off).collect();
        Tensor::new(self.values.shape(), data).expect("same shape")
    }
}

/// Precomputed filterbank, window and FFT plan for one parameter set.
#[derive(Clone)]
pub struct MelExtractor {
    params: MelParams,
    filters: Arc<Tensor>,
    window: Arc<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(params: &MelParams) -> Result<Self> {
        params.validate()?;
        let filters = mel_filterbank(params.n_mels, params.n_fft, params.sample_rate, params.f_min, params.f_max())?;
        Ok(Self {
            params: params.clone(),
            filters: Arc::new(filters),
            window: Arc::new(params.window.coefficients(params.n_fft)),
            fft: plan_forward(params.n_fft),
        })
    }

    pub fn params(&self) -> &MelParams {
        &self.params
    }

    pub fn filters(&self) -> &Tensor {
        &self.filters
    }

    /// Mel-weighted power before log compression, `[n_mels, n_frames]`.
    pub fn mel_power(&self, x: &[f64]) -> Result<Tensor> {
        let p = &self.params;
        let spec = stft(x, p.n_fft, p.hop, p.window)?;
        let power = spec.power();
        let mel = project(&self.filters, &power, spec.bins, spec.frames);
        Tensor::new(&[p.n_mels, spec.frames], mel)
    }

    pub fn compute(&self, x: &[f64]) -> Result<MelSpectrogram> {
        let power = self.mel_power(x)?;
        let values = power.data().iter().map(|&v| (v + MEL_FLOOR).ln()).collect();
        Ok(MelSpectrogram {
            values: Tensor::new(power.shape(), values)?,
            sample_rate: self.params.sample_rate,
            n_fft: self.params.n_fft,
            hop: self.params.hop,
            n_mels: self.params.n_mels,
        })
    }

    /// Differentiable log-mel of the flat waveform `x`; output
    /// `[n_mels, n_frames]`.
    pub fn op(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = self.params.clone();
        let xv = tape.value(x).clone();
        let len = xv.numel();
        let frames = p
            .frames_for(len)
            .ok_or_else(|| Error::invalid("mel_spectrogram", format!("input length {len} shorter than n_fft {}", p.n_fft)))?;
        let n = p.n_fft;
        let bins = n / 2 + 1;
        let mut spectra = Vec::with_capacity(bins * frames);
        let mut buf = vec![Complex64::default(); n];
        for t in 0..frames {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(xv.data()[t * p.hop + i] * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            spectra.extend_from_slice(&buf[..bins]);
        }
        let power: Vec<f64> = spectra.iter().map(|c| c.norm_sqr()).collect();
        let mel = project(&self.filters, &power, bins, frames);
        let y: Vec<f64> = mel.iter().map(|&v| (v + MEL_FLOOR).ln()).collect();
        let out = Tensor::new(&[p.n_mels, frames], y)?;

        let filters = Arc::clone(&self.filters);
        let window = Arc::clone(&self.window);
        let fft = Arc::clone(&self.fft);
        tape.push("mel_spectrogram", out, &[x], move |g, _| {
            let n_mels = p.n_mels;
            let fd = filters.data();
            let mut gx = vec![0.0; len];
            let mut gpow = vec![0.0; bins];
            let mut buf = vec![Complex64::default(); n];
            for t in 0..frames {
                gpow.iter_mut().for_each(|v| *v = 0.0);
                for m in 0..n_mels {
                    let gm = g[m * frames + t] / (mel[m * frames + t] + MEL_FLOOR);
                    if gm == 0.0 {
                        continue;
                    }
                    let row = &fd[m * bins..(m + 1) * bins];
                    for (gp, &f) in gpow.iter_mut().zip(row) {
                        *gp += gm * f;
                    }
                }
                buf.iter_mut().for_each(|b| *b = Complex64::default());
                for k in 0..bins {
                    buf[k] = spectra[t * bins + k].conj() * gpow[k];
                }
                fft.process(&mut buf);
                for i in 0..n {
                    gx[t * p.hop + i] += 2.0 * buf[i].re * window[i];
                }
            }
            vec![Some(gx)]
        })
    }
}

fn project(filters: &Tensor, power: &[f64], bins: usize, frames: usize) -> Vec<f64> {
    let n_mels = filters.shape()[0];
    let fd = filters.data();
    let mut mel = vec![0.0; n_mels * frames];
    for m in 0..n_mels {
        let row = &fd[m * bins..(m + 1) * bins];
        for t in 0..frames {
            let frame = &power[t * bins..(t + 1) * bins];
            mel[m * frames + t] = row.iter().zip(frame).map(|(a, b)| a * b).sum();
        }
    }
    mel
}

pub fn mel_spectrogram(x: &[f64], params: &MelParams) -> Result<MelSpectrogram> {
    MelExtractor::new(params)?.compute(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(len: usize, freq: f64, sr: f64, amp: f64) -> Vec<f64> {
        (0..len)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin())
            .collect()
    }

    #[test]
    fn mel_scale_roundtrip() {
        for f in [0.0, 100.0, 700.0, 4000.0, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn default_filterbank_has_no_empty_rows() {
        let fb = mel_filterbank(128, 1024, 16_000, 0.0, 8000.0).unwrap();
        assert_eq!(fb.shape(), &[128, 513]);
        for m in 0..128 {
            assert!(fb.data()[m * 513..(m + 1) * 513].iter().sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn every_interior_bin_is_covered() {
        let (sr, n_fft, f_min, f_max) = (16_000u32, 512, 60.0, 7000.0);
        let fb = mel_filterbank(40, n_fft, sr, f_min, f_max).unwrap();
        let bins = n_fft / 2 + 1;
        for k in 0..bins {
            let f = k as f64 * sr as f64 / n_fft as f64;
            if f > f_min && f < f_max {
                let total: f64 = (0..40).map(|m| fb.data()[m * bins + k]).sum();
                assert!(total > 0.0, "bin {k} at {f} Hz uncovered");
            }
        }
    }

    #[test]
    fn adjacent_filters_overlap() {
        let fb = mel_filterbank(32, 512, 16_000, 0.0, 8000.0).unwrap();
        let bins = 257;
        for m in 0..31 {
            let overlap = (0..bins).any(|k| fb.data()[m * bins + k] > 0.0 && fb.data()[(m + 1) * bins + k] > 0.0);
            assert!(overlap, "filters {m} and {}", m + 1);
        }
    }

    #[test]
    fn too_many_mels_is_an_error() {
        assert!(mel_filterbank(200, 64, 16_000, 0.0, 8000.0).is_err());
        assert!(mel_filterbank(10, 64, 16_000, 500.0, 400.0).is_err());
    }

    #[test]
    fn silence_sits_on_the_floor() {
        let mel = mel_spectrogram(&[0.0; 2048], &MelParams::default()).unwrap();
        assert_eq!(mel.n_frames(), (2048 - 1024) / 256 + 1);
        assert!(mel.values.data().iter().all(|&v| v == MEL_FLOOR.ln()));
        assert!(mel.floor_referenced().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_waveforms_identical_mels() {
        let x = tone(3000, 440.0, 16_000.0, 0.3);
        let a = mel_spectrogram(&x, &MelParams::default()).unwrap();
        let b = mel_spectrogram(&x.clone(), &MelParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn doubling_amplitude_quadruples_power() {
        let ex = MelExtractor::new(&MelParams::default()).unwrap();
        let x = tone(3000, 440.0, 16_000.0, 0.2);
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let (p1, p2) = (ex.mel_power(&x).unwrap(), ex.mel_power(&x2).unwrap());
        for (a, b) in p1.data().iter().zip(p2.data()) {
            assert!((b - 4.0 * a).abs() <= 1e-9 * b.abs().max(1e-30));
        }
    }

    #[test]
    fn tape_op_matches_plain_path_and_gradients() {
        let params = MelParams {
            n_fft: 32,
            hop: 16,
            n_mels: 6,
            ..MelParams::default()
        };
        let ex = MelExtractor::new(&params).unwrap();
        let x = tone(96, 1500.0, 16_000.0, 0.5);
        let plain = ex.compute(&x).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(x.clone()));
        let y = ex.op(&mut tape, v).unwrap();
        assert_eq!(tape.value(y), &plain.values);

        let noisy: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + 0.1 * (i as f64 * 1.7).cos()).collect();
        let r = crate::tensor::gradient_check(
            |t, x| {
                let m = ex.op(t, x)?;
                t.mean(m)
            },
            &Tensor::vector(noisy),
            Default::default(),
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
