//! WAV I/O, corpus loading, metadata encoding, the synthetic harmonic
//! corpus, noise perturbation, splits and batching.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::{resample, MelExtractor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mono audio in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("AudioClip", "sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::invalid(
                "AudioClip",
                format!("sample {i} = {} outside [-1, 1]", samples[i]),
            ));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

fn wav_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Wav {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

/// Reads 16-bit PCM; stereo (or wider) input is averaged to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => wav_err(path, other),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(wav_err(
            path,
            format!(
                "unsupported encoding: {:?} {}-bit (only 16-bit PCM)",
                spec.sample_format, spec.bits_per_sample
            ),
        ));
    }
    let ch = usize::from(spec.channels.max(1));
    let expected = reader.len() as usize;
    let raw = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(path, e))?;
    if raw.len() != expected || raw.len() % ch != 0 {
        return Err(wav_err(path, format!("truncated data: {} of {expected} samples", raw.len())));
    }
    let scale = 1.0 / (32768.0 * ch as f64);
    let samples = raw
        .chunks_exact(ch)
        .map(|fr| fr.iter().map(|&s| f64::from(s)).sum::<f64>() * scale)
        .collect();
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes mono 16-bit PCM, rounding to the nearest code.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in &clip.samples {
        let code = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(code).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

/// Block layout of the metadata vector: class one-hot, speaker one-hot,
/// scalar attributes, zero padding up to `width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetadataLayout {
    pub width: usize,
    pub classes: usize,
    pub speakers: usize,
    pub scalars: usize,
}

impl Default for MetadataLayout {
    fn default() -> Self {
        Self {
            width: 152,
            classes: 10,
            speakers: 60,
            scalars: 8,
        }
    }
}

impl MetadataLayout {
    pub fn validate(&self) -> Result<()> {
        if self.classes + self.speakers + self.scalars > self.width {
            return Err(Error::config(
                "data.metadata.width",
                format!(
                    "{} class + {} speaker + {} scalar slots exceed width {}",
                    self.classes, self.speakers, self.scalars, self.width
                ),
            ));
        }
        Ok(())
    }

    pub fn speaker_offset(&self) -> usize {
        self.classes
    }

    pub fn scalar_offset(&self) -> usize {
        self.classes + self.speakers
    }

    pub fn padding_offset(&self) -> usize {
        self.classes + self.speakers + self.scalars
    }

    /// Encodes one clip's attributes. Out-of-range ids and surplus scalars
    /// have no slot and fall into the (zero) padding block.
    pub fn encode(&self, class: Option<usize>, speaker: Option<usize>, scalars: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        if let Some(c) = class.filter(|&c| c < self.classes) {
            v[c] = 1.0;
        }
        if let Some(s) = speaker.filter(|&s| s < self.speakers) {
            v[self.speaker_offset() + s] = 1.0;
        }
        for (i, &x) in scalars.iter().take(self.scalars).enumerate() {
            v[self.scalar_offset() + i] = x;
        }
        v
    }
}

/// One corpus entry.
#[derive(Clone, Debug)]
pub struct Example {
    pub name: String,
    pub clip: AudioClip,
    pub class: Option<usize>,
    pub speaker: Option<usize>,
    pub meta: Vec<f64>,
}

/// Fundamental of synthetic class `k`.
pub fn class_fundamental(k: usize) -> f64 {
    110.0 * 2f64.powf(k as f64 / 10.0)
}

pub const SYNTH_CLASSES: usize = 10;

/// Deterministic harmonic corpus: item `i` belongs to class `i % 10` and sums
/// one to three harmonics of the class fundamental under a decaying envelope.
pub fn synth_dataset(n_items: usize, length: usize, sample_rate: u32, seed: u64, layout: &MetadataLayout) -> Result<Vec<Example>> {
    layout.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = f64::from(sample_rate);
    let mut out = Vec::with_capacity(n_items);
    for i in 0..n_items {
        let class = i % SYNTH_CLASSES;
        let f0 = class_fundamental(class);
        let harmonics = rng.random_range(1..=3usize);
        let partials: Vec<(f64, f64, f64)> = (1..=harmonics)
            .map(|h| {
                let amp = if h == 1 {
                    rng.random_range(0.6..1.0)
                } else {
                    rng.random_range(0.1..0.5) / h as f64
                };
                (h as f64 * f0, amp, rng.random_range(0.0..2.0 * PI))
            })
            .filter(|&(f, _, _)| f < sr / 2.0)
            .collect();
        let decay = rng.random_range(0.0..3.0) / length.max(1) as f64;
        let attack = (length / 20).max(1) as f64;
        let mut samples: Vec<f64> = (0..length)
            .map(|t| {
                let tf = t as f64;
                let env = (tf / attack).min(1.0) * (-decay * tf).exp();
                env * partials
                    .iter()
                    .map(|&(f, a, ph)| a * (2.0 * PI * f * tf / sr + ph).sin())
                    .sum::<f64>()
            })
            .collect();
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            let gain = rng.random_range(0.5..0.9) / peak;
            samples.iter_mut().for_each(|v| *v *= gain);
        }
        out.push(Example {
            name: format!("synth_{i:05}"),
            clip: AudioClip::new(samples, sample_rate)?,
            class: Some(class),
            speaker: None,
            meta: layout.encode(Some(class), None, &[f0 / 1000.0]),
        });
    }
    Ok(out)
}

/// Adds `scale * N(0, 1)` per sample and clips to `[-1, 1]`.
pub fn add_noise(clip: &AudioClip, scale: f64, seed: u64) -> Result<AudioClip> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::invalid("add_noise", format!("scale must be finite and >= 0, got {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = clip
        .samples
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            (v + scale * n).clamp(-1.0, 1.0)
        })
        .collect();
    AudioClip::new(samples, clip.sample_rate)
}

pub const SIDECAR_HEADER: &str = "# dpn-sidecar v1";

/// Parsed sidecar line.
#[derive(Clone, Debug, PartialEq)]
pub struct SidecarEntry {
    pub path: PathBuf,
    pub class: Option<usize>,
    pub speaker: Option<usize>,
    pub scalars: Vec<f64>,
}

fn parse_id(field: &str) -> Option<usize> {
    match field.trim() {
        "" | "-" => None,
        s => s.parse().ok(),
    }
}

/// Parses a tab-separated sidecar: `path, class, speaker, scalars...`.
/// Ids that are blank, `-` or non-numeric are treated as unknown.
pub fn parse_sidecar(text: &str) -> Result<Vec<SidecarEntry>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if let Some(rest) = line.strip_prefix("# dpn-sidecar") {
            if rest.trim() != "v1" {
                return Err(Error::format("sidecar", format!("line {}: unsupported version `{}`", n + 1, rest.trim())));
            }
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let path = cols.next().unwrap_or("").trim();
        if path.is_empty() {
            return Err(Error::format("sidecar", format!("line {}: missing path", n + 1)));
        }
        let class = cols.next().and_then(parse_id);
        let speaker = cols.next().and_then(parse_id);
        let scalars = cols
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format("sidecar", format!("line {}: bad scalar `{c}`", n + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(SidecarEntry {
            path: PathBuf::from(path),
            class,
            speaker,
            scalars,
        });
    }
    Ok(out)
}

/// Loads every sidecar entry relative to `root`, resampling to
/// `sample_rate` where needed.
pub fn load_corpus(root: &Path, sidecar: &Path, sample_rate: u32, layout: &MetadataLayout) -> Result<Vec<Example>> {
    layout.validate()?;
    let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let entries = parse_sidecar(&text)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let full = root.join(&e.path);
        let mut clip = read_wav(&full)?;
        if clip.sample_rate != sample_rate {
            let s = resample(&clip.samples, clip.sample_rate, sample_rate)?;
            clip = AudioClip::new(s.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), sample_rate)?;
        }
        out.push(Example {
            name: e.path.to_string_lossy().into_owned(),
            clip,
            class: e.class,
            speaker: e.speaker,
            meta: layout.encode(e.class, e.speaker, &e.scalars),
        });
    }
    Ok(out)
}

/// Writes a synthetic corpus as WAVs plus a sidecar; returns the sidecar
/// path.
pub fn write_corpus(dir: &Path, items: &[Example]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut sidecar = String::from(SIDECAR_HEADER);
    sidecar.push('\n');
    for it in items {
        let rel = format!("{}.wav", it.name);
        write_wav(dir.join(&rel), &it.clip)?;
        let id = |v: Option<usize>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        sidecar.push_str(&format!("{rel}\t{}\t{}\n", id(it.class), id(it.speaker)));
    }
    let path = dir.join("sidecar.tsv");
    fs::write(&path, sidecar).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Shuffled split with `floor(f * n)` items per part.
pub fn make_split(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || a + b + c > 1.0 + 1e-9 {
        return Err(Error::invalid("make_split", format!("fractions {fractions:?} must be in [0, 1] and sum to <= 1")));
    }
    let count = |f: f64| (f * n as f64 + 1e-9).floor() as usize;
    let (na, nb, nc) = (count(a), count(b), count(c));
    for (name, f, k) in [("train", a, na), ("validation", b, nb), ("test", c, nc)] {
        if f > 0.0 && k == 0 {
            return Err(Error::invalid("make_split", format!("{name} fraction {f} of {n} items is empty")));
        }
    }
    if na == 0 {
        return Err(Error::invalid("make_split", "empty training split"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(DatasetSplit {
        train: idx[..na].to_vec(),
        validation: idx[na..na + nb].to_vec(),
        test: idx[na + nb..na + nb + nc].to_vec(),
        seed,
    })
}

/// Crops (at a random offset) or zero-pads to exactly `len` samples.
pub fn fit_length<R: Rng>(x: &[f64], len: usize, rng: &mut R) -> Vec<f64> {
    if x.len() >= len {
        let start = rng.random_range(0..=x.len() - len);
        x[start..start + len].to_vec()
    } else {
        let mut v = x.to_vec();
        v.resize(len, 0.0);
        v
    }
}

/// One training batch; all tensors carry the batch on axis 0.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, n_mels, n_frames]` log-mel.
    pub mels: Tensor,
    /// `[B, W]`.
    pub meta: Tensor,
    /// `[B, len]`.
    pub waves: Tensor,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    /// Row `b` of a batched tensor with the batch axis dropped.
    pub fn item(t: &Tensor, b: usize) -> Tensor {
        let shape = &t.shape()[1..];
        let n: usize = shape.iter().product();
        Tensor::new(shape, t.data()[b * n..(b + 1) * n].to_vec()).expect("row of a batched tensor")
    }
}

/// Epoch-wise batching of a fixed index list.
#[derive(Clone)]
pub struct Batcher {
    items: Arc<Vec<Example>>,
    indices: Vec<usize>,
    batch_size: usize,
    length: usize,
    seed: u64,
    mel: Arc<MelExtractor>,
}

impl Batcher {
    pub fn new(items: Arc<Vec<Example>>, indices: Vec<usize>, batch_size: usize, length: usize, seed: u64, mel: Arc<MelExtractor>) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if indices.is_empty() {
            return Err(Error::invalid("batch_iter", "no items to batch"));
        }
        if let Some(&i) = indices.iter().find(|&&i| i >= items.len()) {
            return Err(Error::invalid("batch_iter", format!("index {i} outside corpus of {}", items.len())));
        }
        Ok(Self {
            items,
            indices,
            batch_size,
            length,
            seed,
            mel,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.indices.len().div_ceil(self.batch_size)
    }

    /// Item order of `epoch`.
    pub fn order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order = self.indices.clone();
        order.shuffle(&mut rng);
        order
    }

    /// Each batch draws its crop offsets from its own block of the epoch's
    /// stream, so any batch can be rebuilt without replaying the others.
    fn batch_rng(&self, epoch: u64, k: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        rng.set_word_pos((k as u128 + 1) << 32);
        rng
    }

    fn build(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<Batch> {
        let p = self.mel.params();
        let frames = p
            .frames_for(self.length)
            .ok_or_else(|| Error::config("mel.n_fft", format!("longer than the training length {}", self.length)))?;
        let width = self.items[idx[0]].meta.len();
        let b = idx.len();
        let mut mels = Vec::with_capacity(b * p.n_mels * frames);
        let mut meta = Vec::with_capacity(b * width);
        let mut waves = Vec::with_capacity(b * self.length);
        for &i in idx {
            let it = &self.items[i];
            let w = fit_length(&it.clip.samples, self.length, rng);
            mels.extend_from_slice(self.mel.compute(&w)?.values.data());
            if it.meta.len() != width {
                return Err(Error::shape("batch_iter", format!("item {i} metadata width {} vs {width}", it.meta.len())));
            }
            meta.extend_from_slice(&it.meta);
            waves.extend(w);
        }
        Ok(Batch {
            indices: idx.to_vec(),
            mels: Tensor::new(&[b, p.n_mels, frames], mels)?,
            meta: Tensor::new(&[b, width], meta)?,
            waves: Tensor::new(&[b, self.length], waves)?,
        })
    }

    /// Batches `start..` of `epoch` in order; the last one may be short.
    pub fn epoch_from(&self, epoch: u64, start: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = self.order(epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(self.batch_size).map(<[usize]>::to_vec).collect();
        chunks
            .into_iter()
            .enumerate()
            .skip(start)
            .map(move |(k, c)| self.build(&c, &mut self.batch_rng(epoch, k)))
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        self.epoch_from(epoch, 0)
    }

    /// Batch number `k` of `epoch`.
    pub fn batch_at(&self, epoch: u64, k: usize) -> Result<Batch> {
        self.epoch_from(epoch, k)
            .next()
            .unwrap_or_else(|| Err(Error::invalid("batch_iter", format!("epoch has no batch {k}"))))
    }

    /// Runs [`Batcher::epoch`] on a worker thread, handing batches over a
    /// queue bounded at `depth`.
    pub fn prefetch(self, epoch: u64, start: usize, depth: usize) -> Receiver<Result<Batch>> {
        let (tx, rx) = sync_channel(depth.max(1));
        thread::spawn(move || {
            for b in self.epoch_from(epoch, start) {
                if tx.send(b).is_err() {
                    break;
                }
            }
        });
        rx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, MelParams, Window};

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let clip = AudioClip::new(x, 8000).unwrap();
        let p = dir.path().join("a.wav");
        write_wav(&p, &clip).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 8000);
        let worst = clip.samples.iter().zip(&back.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 32768.0, "{worst}");
    }

    #[test]
    fn wav_codes_and_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for s in [32767i16, 32767, 100, -100, -32768, 0] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        let c = read_wav(&p).unwrap();
        assert_eq!(c.samples, vec![32767.0 / 32768.0, 0.0, -0.5]);
    }

    #[test]
    fn wav_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        write_wav(&p, &AudioClip::new(vec![0.25; 400], 16000).unwrap()).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 101]).unwrap();
        assert!(read_wav(&p).is_err());
        fs::write(&p, b"RIFFxxxxWAVEjunk").unwrap();
        assert!(read_wav(&p).is_err());

        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        let e = read_wav(&p).unwrap_err().to_string();
        assert!(e.contains("unsupported"), "{e}");
    }

    #[test]
    fn metadata_layout() {
        let l = MetadataLayout::default();
        let v = l.encode(Some(3), Some(12), &[0.5, -1.0]);
        assert_eq!(v.len(), 152);
        assert_eq!(v[..10].iter().sum::<f64>(), 1.0);
        assert_eq!(v[10..70].iter().sum::<f64>(), 1.0);
        assert_eq!(v[70], 0.5);
        assert!(v[l.padding_offset()..].iter().all(|&x| x == 0.0));
        let unknown = l.encode(Some(40), None, &[1.0; 12]);
        assert!(unknown[..70].iter().all(|&x| x == 0.0));
        assert!(unknown[l.padding_offset()..].iter().all(|&x| x == 0.0));
        assert!(MetadataLayout { width: 20, ..l }.validate().is_err());
    }

    #[test]
    fn synthetic_corpus() {
        let l = MetadataLayout::default();
        let a = synth_dataset(20, 4096, 16000, 7, &l).unwrap();
        let b = synth_dataset(20, 4096, 16000, 7, &l).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip, y.clip);
            assert_eq!(x.meta, y.meta);
        }
        for it in &a {
            let k = it.class.unwrap();
            assert_eq!(it.meta[..10].iter().sum::<f64>(), 1.0);
            assert_eq!(it.meta[k], 1.0);
            assert!(it.clip.samples.iter().all(|v| v.abs() <= 1.0));
            let spec = stft(&it.clip.samples, 4096, 4096, Window::Hann).unwrap();
            let peak = (1..spec.bins).max_by(|&i, &j| spec.data[i].norm().total_cmp(&spec.data[j].norm())).unwrap();
            let want = class_fundamental(k) * 4096.0 / 16000.0;
            assert!((peak as f64 - want).abs() <= 1.0, "class {k}: peak {peak}, want {want}");
        }
    }

    #[test]
    fn noise() {
        let clip = AudioClip::new((0..20000).map(|i| 0.3 * (i as f64 * 0.01).sin()).collect(), 16000).unwrap();
        assert_eq!(add_noise(&clip, 0.0, 1).unwrap(), clip);
        let n = add_noise(&clip, 0.05, 1).unwrap();
        let rms = (n.samples.iter().zip(&clip.samples).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 20000.0).sqrt();
        assert!((rms - 0.05).abs() < 0.005, "{rms}");
        let loud = add_noise(&clip, 0.9, 2).unwrap();
        assert!(loud.samples.iter().all(|v| v.abs() <= 1.0));
        assert_eq!(add_noise(&clip, 0.05, 1).unwrap(), n);
        assert!(add_noise(&clip, -0.1, 1).is_err());
    }

    #[test]
    fn splits() {
        let s = make_split(1000, (0.9, 0.01, 0.09), 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (900, 10, 90));
        assert_eq!(s, make_split(1000, (0.9, 0.01, 0.09), 3).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert!(make_split(10, (0.9, 0.01, 0.09), 3).is_err());
        assert!(make_split(10, (0.9, 0.2, 0.0), 3).is_err());
        assert!(make_split(10, (0.0, 0.5, 0.5), 3).is_err());
    }

    #[test]
    fn sidecar_parsing() {
        let text = "# dpn-sidecar v1\n01/a.wav\t3\t7\t0.5\t1\n\n02/b.wav\t-\tx\n";
        let e = parse_sidecar(text).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].class, e[0].speaker, e[0].scalars.clone()), (Some(3), Some(7), vec![0.5, 1.0]));
        assert_eq!((e[1].class, e[1].speaker), (None, None));
        assert!(parse_sidecar("# dpn-sidecar v2\n").is_err());
        assert!(parse_sidecar("a.wav\t1\t2\tnan?\n").is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = MetadataLayout::default();
        let items = synth_dataset(4, 1000, 16000, 1, &l).unwrap();
        let side = write_corpus(dir.path(), &items).unwrap();
        let back = load_corpus(dir.path(), &side, 16000, &l).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[2].class, Some(2));
        assert_eq!(back[2].meta[..70], items[2].meta[..70]);
        let half = load_corpus(dir.path(), &side, 8000, &l).unwrap();
        assert_eq!(half[0].clip.len(), 500);
    }

    fn batcher(n: usize, bs: usize) -> Batcher {
        let l = MetadataLayout::default();
        let items = Arc::new(synth_dataset(n, 700, 16000, 5, &l).unwrap());
        let mel = Arc::new(
            MelExtractor::new(&MelParams {
                n_fft: 128,
                hop: 64,
                n_mels: 8,
                ..MelParams::default()
            })
            .unwrap(),
        );
        Batcher::new(items, (0..n).collect(), bs, 512, 9, mel).unwrap()
    }

    #[test]
    fn batching() {
        let b = batcher(10, 4);
        let sizes: Vec<usize> = b.epoch(0).map(|x| x.unwrap().size()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let first = b.epoch(0).next().unwrap().unwrap();
        assert_eq!(first.mels.shape(), &[4, 8, 7]);
        assert_eq!(first.meta.shape(), &[4, 152]);
        assert_eq!(first.waves.shape(), &[4, 512]);
        assert_eq!(Batch::item(&first.mels, 1).shape(), &[8, 7]);

        let (e0, e1) = (b.order(0), b.order(1));
        assert_ne!(e0, e1);
        let (mut s0, mut s1) = (e0.clone(), e1);
        s0.sort_unstable();
        s1.sort_unstable();
        assert_eq!(s0, s1);

        let again = batcher(10, 4);
        let x = b.batch_at(1, 2).unwrap();
        let y = again.batch_at(1, 2).unwrap();
        assert_eq!(x.waves, y.waves);
        assert_eq!(x.mels, y.mels);
        let third = b.epoch(1).nth(2).unwrap().unwrap();
        assert_eq!(third.waves, x.waves);

        let pre: Vec<Batch> = b.clone().prefetch(1, 0, 2).iter().map(|r| r.unwrap()).collect();
        let direct: Vec<Batch> = b.epoch(1).map(|r| r.unwrap()).collect();
        assert_eq!(pre.len(), 3);
        for (p, d) in pre.iter().zip(&direct) {
            assert_eq!(p.indices, d.indices);
            assert_eq!(p.waves, d.waves);
        }
    }
}
