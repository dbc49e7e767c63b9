//! Objective audio metrics: MFCCs, subsequence DTW, a WARP-Q-style score,
//! log-spectral distance and mel-cepstral distance, plus a CSV report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dsp::{stft, MelExtractor, MelParams, MEL_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const REPORT_SCHEMA: &str = "# dpn-metrics v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricParams {
    pub mel: MelParams,
    pub n_coeffs: usize,
    pub patch_seconds: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self {
            mel: MelParams {
                n_fft: 512,
                hop: 128,
                n_mels: 40,
                ..MelParams::default()
            },
            n_coeffs: 13,
            patch_seconds: 0.4,
        }
    }
}

impl MetricParams {
    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        if self.n_coeffs == 0 || self.n_coeffs > self.mel.n_mels {
            return Err(Error::config("metrics.n_coeffs", format!("need 1..={}", self.mel.n_mels)));
        }
        if !(self.patch_seconds > 0.0 && self.patch_seconds.is_finite()) {
            return Err(Error::config("metrics.patch_seconds", "must be positive"));
        }
        Ok(())
    }
}

/// Orthonormal DCT-II of each column of `x: [n, frames]`, keeping the first
/// `keep` rows.
fn dct2_columns(x: &Tensor, keep: usize) -> Tensor {
    let (n, frames) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let basis: Vec<f64> = (0..keep)
        .flat_map(|k| {
            let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
            (0..n).map(move |i| scale * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n as f64).cos())
        })
        .collect();
    let mut out = vec![0.0; keep * frames];
    for k in 0..keep {
        for i in 0..n {
            let b = basis[k * n + i];
            let row = &xd[i * frames..(i + 1) * frames];
            out[k * frames..(k + 1) * frames].iter_mut().zip(row).for_each(|(o, &v)| *o += b * v);
        }
    }
    Tensor::new(&[keep, frames], out).expect("consistent shape")
}

/// MFCCs `[n_coeffs, frames]` from a prepared extractor.
pub fn mfcc_with(mel: &MelExtractor, x: &[f64], n_coeffs: usize) -> Result<Tensor> {
    let n_mels = mel.params().n_mels;
    if n_coeffs == 0 || n_coeffs > n_mels {
        return Err(Error::invalid("mfcc", format!("{n_coeffs} coefficients from {n_mels} mel bands")));
    }
    let m = mel.compute(x)?;
    Ok(dct2_columns(&m.values, n_coeffs))
}

pub fn mfcc(x: &[f64], params: &MelParams, n_coeffs: usize) -> Result<Tensor> {
    mfcc_with(&MelExtractor::new(params)?, x, n_coeffs)
}

fn frame_dist(a: &Tensor, i: usize, b: &Tensor, j: usize) -> f64 {
    let (ra, fa) = (a.shape()[0], a.shape()[1]);
    let fb = b.shape()[1];
    let (ad, bd) = (a.data(), b.data());
    (0..ra).map(|r| (ad[r * fa + i] - bd[r * fb + j]).powi(2)).sum::<f64>().sqrt()
}

fn check_pair(op: &'static str, patch: &Tensor, reference: &Tensor) -> Result<(usize, usize)> {
    let (ps, rs) = (patch.shape(), reference.shape());
    if ps.len() != 2 || rs.len() != 2 || ps[0] != rs[0] {
        return Err(Error::shape(op, format!("patch {ps:?}, reference {rs:?}")));
    }
    if ps[1] == 0 || rs[1] == 0 || ps[0] == 0 {
        return Err(Error::invalid(op, "empty input"));
    }
    if ps[1] > rs[1] {
        return Err(Error::invalid(op, format!("patch has {} frames, reference {}", ps[1], rs[1])));
    }
    Ok((ps[1], rs[1]))
}

/// Accumulated cost and cell count of a partial path. Lower cost wins; on an
/// exact tie the longer path wins.
#[derive(Clone, Copy, Debug)]
struct Acc {
    cost: f64,
    len: usize,
}

impl Acc {
    fn better(self, other: Acc) -> bool {
        self.cost < other.cost || (self.cost == other.cost && self.len > other.len)
    }
}

fn best(cands: impl IntoIterator<Item = Acc>) -> Acc {
    cands
        .into_iter()
        .reduce(|a, b| if b.better(a) { b } else { a })
        .expect("at least one candidate")
}

/// Subsequence DTW of `patch: [d, n]` inside `reference: [d, m]`: the
/// minimal accumulated Euclidean frame distance over monotone paths with
/// steps (1,0), (0,1), (1,1), free start and end in the reference, divided
/// by the number of cells on that path.
pub fn sdtw_cost(patch: &Tensor, reference: &Tensor) -> Result<f64> {
    let (n, m) = check_pair("sdtw_cost", patch, reference)?;
    let mut prev: Vec<Acc> = Vec::with_capacity(m);
    for i in 0..n {
        let mut row: Vec<Acc> = Vec::with_capacity(m);
        for j in 0..m {
            let d = frame_dist(patch, i, reference, j);
            let mut cands = Vec::with_capacity(3);
            if i == 0 {
                cands.push(Acc { cost: 0.0, len: 0 });
            } else {
                cands.push(prev[j]);
                if j > 0 {
                    cands.push(prev[j - 1]);
                }
            }
            if j > 0 {
                cands.push(row[j - 1]);
            }
            let b = best(cands);
            row.push(Acc {
                cost: d + b.cost,
                len: b.len + 1,
            });
        }
        prev = row;
    }
    let end = best(prev);
    Ok(end.cost / end.len as f64)
}

/// Exhaustive enumeration of every admissible path; exponential, intended
/// for checking [`sdtw_cost`] on a handful of frames.
pub fn sdtw_cost_bruteforce(patch: &Tensor, reference: &Tensor) -> Result<f64> {
    let (n, m) = check_pair("sdtw_cost_bruteforce", patch, reference)?;
    if n > 8 || m > 8 {
        return Err(Error::invalid("sdtw_cost_bruteforce", "at most 8 frames per input"));
    }
    fn walk(p: &Tensor, r: &Tensor, n: usize, m: usize, i: usize, j: usize, acc: Acc, found: &mut Option<Acc>) {
        let here = Acc {
            cost: frame_dist(p, i, r, j) + acc.cost,
            len: acc.len + 1,
        };
        if i == n - 1 && found.is_none_or(|f| here.better(f)) {
            *found = Some(here);
        }
        for (di, dj) in [(1, 0), (0, 1), (1, 1)] {
            let (ni, nj) = (i + di, j + dj);
            if ni < n && nj < m {
                walk(p, r, n, m, ni, nj, here, found);
            }
        }
    }
    let mut found = None;
    for j in 0..m {
        walk(patch, reference, n, m, 0, j, Acc { cost: 0.0, len: 0 }, &mut found);
    }
    let f = found.expect("paths exist");
    Ok(f.cost / f.len as f64)
}

fn slice_frames(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (rows, frames) = (x.shape()[0], x.shape()[1]);
    let data = (0..rows)
        .flat_map(|r| x.data()[r * frames + start..r * frames + start + len].iter().copied())
        .collect();
    Tensor::new(&[rows, len], data).expect("consistent shape")
}

/// Precomputed state for repeated metric evaluation with one parameter set.
#[derive(Clone)]
pub struct Evaluator {
    params: MetricParams,
    mel: MelExtractor,
}

impl Evaluator {
    pub fn new(params: &MetricParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params: params.clone(),
            mel: MelExtractor::new(&params.mel)?,
        })
    }

    pub fn params(&self) -> &MetricParams {
        &self.params
    }

    pub fn mfcc(&self, x: &[f64]) -> Result<Tensor> {
        mfcc_with(&self.mel, x, self.params.n_coeffs)
    }

    pub fn patch_frames(&self) -> usize {
        let p = &self.params;
        ((p.patch_seconds * p.mel.sample_rate as f64 / p.mel.hop as f64).round() as usize).max(1)
    }

    /// Median SDTW cost of the degraded clip's non-overlapping MFCC patches
    /// against the whole reference. A degraded clip shorter than one patch
    /// is scored as a single truncated patch; a trailing partial patch is
    /// dropped otherwise. Lower is better.
    pub fn warpq(&self, reference: &[f64], degraded: &[f64]) -> Result<f64> {
        if reference.is_empty() || degraded.is_empty() {
            return Err(Error::invalid("warpq", "empty clip"));
        }
        let r = self.mfcc(reference)?;
        let d = self.mfcc(degraded)?;
        let (rf, df) = (r.shape()[1], d.shape()[1]);
        let size = self.patch_frames().min(rf);
        let mut costs = Vec::new();
        if df <= size {
            costs.push(sdtw_cost(&slice_frames(&d, 0, df.min(rf)), &r)?);
        } else {
            for k in 0..df / size {
                costs.push(sdtw_cost(&slice_frames(&d, k * size, size), &r)?);
            }
        }
        Ok(median(&mut costs))
    }

    /// Mean over frames of the RMS dB difference of the power spectra.
    pub fn log_spectral_distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let (a, b) = truncate_pair("log_spectral_distance", a, b);
        let p = &self.params.mel;
        let sa = stft(a, p.n_fft, p.hop, p.window)?;
        let sb = stft(b, p.n_fft, p.hop, p.window)?;
        let db = |c: rustfft::num_complex::Complex64| 10.0 * (c.norm_sqr() + MEL_FLOOR).log10();
        let mut total = 0.0;
        for t in 0..sa.frames {
            let ms: f64 = sa.frame(t).iter().zip(sb.frame(t)).map(|(&x, &y)| (db(x) - db(y)).powi(2)).sum::<f64>()
                / sa.bins as f64;
            total += ms.sqrt();
        }
        Ok(total / sa.frames as f64)
    }

    /// RMS difference of MFCCs with the energy coefficient c0 excluded.
    pub fn mel_cepstral_distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let (a, b) = truncate_pair("mel_cepstral_distance", a, b);
        let (ma, mb) = (self.mfcc(a)?, self.mfcc(b)?);
        let frames = ma.shape()[1];
        let rows = ma.shape()[0];
        if rows < 2 {
            return Err(Error::invalid("mel_cepstral_distance", "needs at least two coefficients"));
        }
        let (x, y) = (&ma.data()[frames..], &mb.data()[frames..]);
        let ms = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / x.len() as f64;
        Ok(ms.sqrt())
    }

    pub fn score(&self, name: &str, reference: &[f64], degraded: &[f64]) -> Result<ClipScores> {
        Ok(ClipScores {
            name: name.to_string(),
            warpq: self.warpq(reference, degraded)?,
            lsd: self.log_spectral_distance(reference, degraded)?,
            mcd: self.mel_cepstral_distance(reference, degraded)?,
        })
    }
}

fn truncate_pair<'a>(op: &str, a: &'a [f64], b: &'a [f64]) -> (&'a [f64], &'a [f64]) {
    if a.len() != b.len() {
        log::warn!("{op}: lengths {} and {} differ, truncating to the shorter", a.len(), b.len());
    }
    let n = a.len().min(b.len());
    (&a[..n], &b[..n])
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn warpq(reference: &[f64], degraded: &[f64], params: &MetricParams) -> Result<f64> {
    Evaluator::new(params)?.warpq(reference, degraded)
}

pub fn log_spectral_distance(a: &[f64], b: &[f64], params: &MetricParams) -> Result<f64> {
    Evaluator::new(params)?.log_spectral_distance(a, b)
}

pub fn mel_cepstral_distance(a: &[f64], b: &[f64], params: &MetricParams) -> Result<f64> {
    Evaluator::new(params)?.mel_cepstral_distance(a, b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipScores {
    pub name: String,
    pub warpq: f64,
    pub lsd: f64,
    pub mcd: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    fn of(xs: impl Iterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = xs.collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Summary {
            mean,
            median: median(&mut v),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub params: MetricParams,
    pub clips: Vec<ClipScores>,
}

impl MetricReport {
    pub fn new(params: MetricParams, clips: Vec<ClipScores>) -> Result<Self> {
        if let Some(c) = clips.iter().find(|c| ![c.warpq, c.lsd, c.mcd].iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("metric report", format!("clip `{}` has a non-finite score", c.name)));
        }
        Ok(Self { params, clips })
    }

    /// `(warpq, lsd, mcd)` summaries; `None` for an empty report.
    pub fn summary(&self) -> Option<(Summary, Summary, Summary)> {
        if self.clips.is_empty() {
            return None;
        }
        Some((
            Summary::of(self.clips.iter().map(|c| c.warpq)),
            Summary::of(self.clips.iter().map(|c| c.lsd)),
            Summary::of(self.clips.iter().map(|c| c.mcd)),
        ))
    }

    /// Schema line, a parameter comment, the header, one row per clip, then
    /// `mean` and `median` rows. `pesq` and `stoi` are reserved empty columns
    /// for externally computed scores.
    pub fn to_csv(&self) -> String {
        let p = &self.params;
        let mut s = String::new();
        let _ = writeln!(s, "{REPORT_SCHEMA}");
        let _ = writeln!(
            s,
            "# sample_rate={} n_fft={} hop={} n_mels={} n_coeffs={} patch_seconds={}",
            p.mel.sample_rate, p.mel.n_fft, p.mel.hop, p.mel.n_mels, p.n_coeffs, p.patch_seconds
        );
        let _ = writeln!(s, "clip,warpq_style,lsd,mcd,pesq,stoi");
        for c in &self.clips {
            let _ = writeln!(s, "{},{},{},{},,", csv_field(&c.name), c.warpq, c.lsd, c.mcd);
        }
        if let Some((w, l, m)) = self.summary() {
            let _ = writeln!(s, "mean,{},{},{},,", w.mean, l.mean, m.mean);
            let _ = writeln!(s, "median,{},{},{},,", w.median, l.median, m.median);
        }
        s
    }

    pub fn summary_text(&self) -> String {
        match self.summary() {
            None => "no clips evaluated".to_string(),
            Some((w, l, m)) => format!(
                "{} clips\n  warpq-style  mean {:.4}  median {:.4}\n  lsd (dB)     mean {:.4}  median {:.4}\n  mcd          mean {:.4}  median {:.4}",
                self.clips.len(),
                w.mean,
                w.median,
                l.mean,
                l.median,
                m.mean,
                m.median
            ),
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
