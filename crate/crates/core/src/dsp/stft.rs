use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Periodic Hann, `0.5 - 0.5 cos(2 pi n / N)`.
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

/// One-sided complex spectrogram, `bins = n_fft / 2 + 1` rows by frames.
#[derive(Clone, Debug)]
pub struct Spectrogram {
    pub n_fft: usize,
    pub hop: usize,
    pub bins: usize,
    pub frames: usize,
    /// Frame-major: `data[t * bins + k]`.
    pub data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> Complex64 {
        self.data[frame * self.bins + bin]
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    /// Energy of frame `t` reconstructed from the one-sided spectrum
    /// (`sum_n |f_n|^2 = (1/N) sum_k |X_k|^2` over the full spectrum).
    pub fn frame_energy(&self, t: usize) -> f64 {
        let n = self.n_fft;
        let f = self.frame(t);
        let mut e = 0.0;
        for (k, c) in f.iter().enumerate() {
            let mirrored = k != 0 && !(n % 2 == 0 && k == n / 2);
            e += c.norm_sqr() * if mirrored { 2.0 } else { 1.0 };
        }
        e / n as f64
    }

    pub fn power(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Frame count with centered padding disabled.
pub fn frame_count(len: usize, n_fft: usize, hop: usize) -> Option<usize> {
    (len >= n_fft && hop > 0).then(|| (len - n_fft) / hop + 1)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn plan_forward(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

pub(crate) fn plan_inverse(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

pub fn stft(x: &[f64], n_fft: usize, hop: usize, window: Window) -> Result<Spectrogram> {
    if n_fft == 0 || hop == 0 {
        return Err(Error::invalid("stft", "n_fft and hop must be positive"));
    }
    let frames = frame_count(x.len(), n_fft, hop).ok_or_else(|| {
        Error::invalid("stft", format!("input length {} shorter than n_fft {n_fft}", x.len()))
    })?;
    let win = window.coefficients(n_fft);
    let fft = plan_forward(n_fft);
    let bins = n_fft / 2 + 1;
    let mut data = Vec::with_capacity(bins * frames);
    let mut buf = vec![Complex64::default(); n_fft];
    for t in 0..frames {
        let seg = &x[t * hop..t * hop + n_fft];
        for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&win) {
            *b = Complex64::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(Spectrogram {
        n_fft,
        hop,
        bins,
        frames,
        data,
    })
}
