//! Alternating adversarial training with Adam, CSV loss logging and
//! resumable checkpoints.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, Config};
use crate::data::{add_noise, load_corpus, make_split, synth_dataset, Batch, Batcher, Example};
use crate::discriminator::Discriminator;
use crate::dsp::MelExtractor;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::{
    adv_loss_discriminator, adv_loss_generator, feature_matching_loss, generator_total, mel_loss_batch, LossWeights,
};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Optional epoch budget; training stops at whichever limit comes first.
    pub max_epochs: Option<u64>,
    pub seed: u64,
    pub loss: LossWeights,
    /// Steps between checkpoints; `0` writes only the final one.
    pub checkpoint_every: u64,
    /// Global-norm gradient clip; `None` disables it.
    pub grad_clip: Option<f64>,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    /// Batches prepared ahead of the optimizer.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_g: 1e-5,
            lr_d: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            max_steps: 10_000,
            max_epochs: None,
            seed: 0,
            loss: LossWeights::default(),
            checkpoint_every: 1000,
            grad_clip: Some(10.0),
            d_steps: 1,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("train.{name}"), format!("must be > 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("train.{name}"), format!("must lie in [0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("train.max_steps", "must be >= 1"));
        }
        if self.max_epochs == Some(0) {
            return Err(Error::config("train.max_epochs", "must be >= 1"));
        }
        if self.d_steps == 0 {
            return Err(Error::config("train.d_steps", "must be >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("train.grad_clip", "must be > 0"));
            }
        }
        self.loss.validate()
    }
}

/// Adam with bias correction, one moment pair per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: store.grad_buffers(),
            v: store.grad_buffers(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. A non-finite gradient aborts before any parameter
    /// changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape("adam", format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        for ((_, p), g) in store.iter().zip(grads) {
            if g.len() != p.value.numel() {
                return Err(Error::shape("adam", format!("gradient of `{}` has {} elements", p.name, g.len())));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { name: p.name.clone() });
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        for (((p, g), m), v) in store.params_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let mut data = p.value.to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                data[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            p.value = Tensor::new(p.value.shape(), data)?;
        }
        Ok(())
    }

    fn records(&self, prefix: &str, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}t"), Tensor::scalar(self.t as f64))];
        for ((_, p), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("{prefix}m/{}", p.name), Tensor::new(p.value.shape(), m.clone()).expect("moment shape")));
            out.push((format!("{prefix}v/{}", p.name), Tensor::new(p.value.shape(), v.clone()).expect("moment shape")));
        }
        out
    }

    fn load_records(&mut self, prefix: &str, store: &ParamStore, lookup: &HashMap<String, Tensor>) -> Result<()> {
        let get = |k: String| {
            lookup
                .get(&k)
                .ok_or_else(|| Error::format("checkpoint", format!("missing `{k}`")))
        };
        self.t = get(format!("{prefix}t"))?.item() as u64;
        for (i, (_, p)) in store.iter().enumerate() {
            self.m[i] = get(format!("{prefix}m/{}", p.name))?.to_vec();
            self.v[i] = get(format!("{prefix}v/{}", p.name))?.to_vec();
            if self.m[i].len() != p.value.numel() || self.v[i].len() != p.value.numel() {
                return Err(Error::format("checkpoint", format!("moment size of `{}`", p.name)));
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max {
        let s = max / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Losses of one step, as logged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub fm: f64,
    pub mel: f64,
    pub total: f64,
    /// Fraction of the batch the discriminator classified correctly before
    /// its update (real > 0.5, generated < 0.5).
    pub d_accuracy: f64,
}

pub const LOG_HEADER: &str = "step,adv_g,adv_d,fm,mel,total";

impl LossRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.adv_g, self.adv_d, self.fm, self.mel, self.total)
    }

    pub fn is_finite(&self) -> bool {
        [self.adv_g, self.adv_d, self.fm, self.mel, self.total].iter().all(|v| v.is_finite())
    }
}

/// Parses a training log written by [`fit`].
pub fn read_log(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::format("training log", "missing header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::format("training log", format!("bad line `{l}`")))
            };
            Ok(LossRecord {
                step: num(0)? as u64,
                adv_g: num(1)?,
                adv_d: num(2)?,
                fm: num(3)?,
                mel: num(4)?,
                total: num(5)?,
                d_accuracy: f64::NAN,
            })
        })
        .collect()
}

/// Both networks, their optimizers and the step counter.
pub struct Trainer {
    /// Configuration as given, ablation list included.
    pub config: Config,
    /// With ablations applied.
    pub resolved: Config,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub g_store: ParamStore,
    pub d_store: ParamStore,
    pub g_opt: Adam,
    pub d_opt: Adam,
    pub mel: Arc<MelExtractor>,
    pub step: u64,
}

impl Trainer {
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let r = config.resolved();
        let t = &r.train;
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        let mut g_store = ParamStore::new();
        let generator = Generator::new(&r.generator, &mut g_store, &mut rng)?;
        let mut d_store = ParamStore::new();
        let discriminator = Discriminator::new(&r.discriminator, r.generator.output_len, &mut d_store, &mut rng)?;
        Ok(Self {
            g_opt: Adam::new(&g_store, t.lr_g, t.beta1, t.beta2, t.eps),
            d_opt: Adam::new(&d_store, t.lr_d, t.beta1, t.beta2, t.eps),
            mel: Arc::new(MelExtractor::new(&r.mel)?),
            config: config.clone(),
            resolved: r,
            generator,
            discriminator,
            g_store,
            d_store,
            step: 0,
        })
    }

    fn finite(op: &'static str, tape: &Tape, v: Var) -> Result<f64> {
        let x = tape.value(v).item();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn clip(&self, grads: &mut [Vec<f64>]) {
        if let Some(c) = self.resolved.train.grad_clip {
            clip_global_norm(grads, c);
        }
    }

    /// Discriminator update(s) on the real batch and detached generator
    /// output, then one generator update against the refreshed
    /// discriminator.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        let bsz = batch.size();
        let mut gt = Tape::new();
        let gp = self.g_store.bind(&mut gt, true);
        let mut fakes = Vec::with_capacity(bsz);
        let mut reals = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let mel = gt.constant(Batch::item(&batch.mels, b));
            let meta = gt.constant(Batch::item(&batch.meta, b));
            fakes.push(self.generator.forward(&mut gt, &gp, mel, meta)?);
            reals.push(gt.constant(Batch::item(&batch.waves, b)));
        }

        let mut adv_d = 0.0;
        let mut d_accuracy = 0.0;
        for k in 0..self.resolved.train.d_steps {
            let mut dt = Tape::new();
            let dp = self.d_store.bind(&mut dt, true);
            let (mut sr, mut sf) = (Vec::with_capacity(bsz), Vec::with_capacity(bsz));
            for b in 0..bsz {
                let r = dt.constant(gt.value(reals[b]).clone());
                let f = dt.constant(gt.value(fakes[b]).clone());
                sr.push(self.discriminator.forward(&mut dt, &dp, r)?.score);
                sf.push(self.discriminator.forward(&mut dt, &dp, f)?.score);
            }
            if k == 0 {
                let correct = sr.iter().filter(|&&s| dt.value(s).item() > 0.5).count()
                    + sf.iter().filter(|&&s| dt.value(s).item() < 0.5).count();
                d_accuracy = correct as f64 / (2 * bsz) as f64;
            }
            let loss = adv_loss_discriminator(&mut dt, &sr, &sf)?;
            adv_d = Self::finite("adv_loss_discriminator", &dt, loss)?;
            let g = dt.backward(loss)?;
            let mut grads = dp.grads(&dt, &g);
            self.clip(&mut grads);
            self.d_opt.step(&mut self.d_store, &grads)?;
        }

        let dp = self.d_store.bind(&mut gt, false);
        let (mut scores, mut taps_f, mut taps_r) = (Vec::new(), Vec::new(), Vec::new());
        for b in 0..bsz {
            let of = self.discriminator.forward(&mut gt, &dp, fakes[b])?;
            let or = self.discriminator.forward(&mut gt, &dp, reals[b])?;
            scores.push(of.score);
            taps_f.push(of.taps);
            taps_r.push(or.taps);
        }
        let adv = adv_loss_generator(&mut gt, &scores)?;
        let fm = feature_matching_loss(&mut gt, &taps_r, &taps_f)?;
        let mel = mel_loss_batch(&mut gt, &self.mel, &reals, &fakes)?;
        let total = generator_total(&mut gt, adv, fm, mel, self.resolved.train.loss)?;
        let rec = LossRecord {
            step: self.step + 1,
            adv_g: Self::finite("adv_loss_generator", &gt, adv)?,
            adv_d,
            fm: Self::finite("feature_matching_loss", &gt, fm)?,
            mel: Self::finite("mel_loss", &gt, mel)?,
            total: Self::finite("generator_total", &gt, total)?,
            d_accuracy,
        };
        let g = gt.backward(total)?;
        let mut grads = gp.grads(&gt, &g);
        self.clip(&mut grads);
        self.g_opt.step(&mut self.g_store, &grads)?;
        self.step += 1;
        Ok(rec)
    }

    /// Generator output for one `[n_mels, frames]` mel and metadata vector.
    pub fn generate(&self, mel: &Tensor, meta: &Tensor) -> Result<Vec<f64>> {
        self.generator.synthesize(&self.g_store, mel, meta)
    }

    /// Discriminator "real" probability of one waveform.
    pub fn score(&self, wave: &[f64]) -> Result<f64> {
        let mut t = Tape::new();
        let p = self.d_store.bind(&mut t, false);
        let x = t.constant(Tensor::vector(wave.to_vec()));
        let out = self.discriminator.forward(&mut t, &p, x)?;
        Ok(t.value(out.score).item())
    }

    pub fn checkpoint_records(&self) -> Vec<(String, Tensor)> {
        let seed = self.config.train.seed;
        let mut out = vec![
            ("header/step".to_string(), Tensor::scalar(self.step as f64)),
            (
                "header/seed".to_string(),
                Tensor::vector(vec![(seed >> 32) as f64, (seed & 0xffff_ffff) as f64]),
            ),
            ("header/loss/fm".to_string(), Tensor::scalar(self.resolved.train.loss.fm)),
            ("header/loss/mel".to_string(), Tensor::scalar(self.resolved.train.loss.mel)),
        ];
        for a in Ablation::ALL {
            out.push((format!("header/ablation/{a}"), Tensor::scalar(f64::from(u8::from(self.config.has(a))))));
        }
        out.extend(self.g_store.records("g/"));
        out.extend(self.d_store.records("d/"));
        out.extend(self.g_opt.records("adam/g/", &self.g_store));
        out.extend(self.d_opt.records("adam/d/", &self.d_store));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint_records())
    }

    /// Rebuilds a trainer from `config` and restores the checkpoint state.
    /// The checkpoint's seed and ablation switches must match `config`.
    pub fn resume(config: &Config, path: &Path) -> Result<Self> {
        let mut t = Self::new(config)?;
        let lookup: HashMap<String, Tensor> = load_checkpoint(path)?.into_iter().collect();
        let ablations = checkpoint_ablations(&lookup)?;
        if ablations != config.ablations {
            return Err(Error::config(
                "ablations",
                format!("checkpoint was trained with {ablations:?}, config has {:?}", config.ablations),
            ));
        }
        let seed = lookup
            .get("header/seed")
            .filter(|s| s.numel() == 2)
            .map(|s| ((s.data()[0] as u64) << 32) | s.data()[1] as u64)
            .ok_or_else(|| Error::format("checkpoint", "missing header/seed"))?;
        if seed != config.train.seed {
            return Err(Error::config("train.seed", format!("checkpoint seed {seed} differs from {}", config.train.seed)));
        }
        t.step = lookup
            .get("header/step")
            .ok_or_else(|| Error::format("checkpoint", "missing header/step"))?
            .item() as u64;
        t.g_store.load_records("g/", &lookup)?;
        t.d_store.load_records("d/", &lookup)?;
        t.g_opt.load_records("adam/g/", &t.g_store, &lookup)?;
        t.d_opt.load_records("adam/d/", &t.d_store, &lookup)?;
        Ok(t)
    }
}

/// Ablation switches recorded in a checkpoint header.
pub fn checkpoint_ablations(lookup: &HashMap<String, Tensor>) -> Result<Vec<Ablation>> {
    let mut out = Vec::new();
    for a in Ablation::ALL {
        let v = lookup
            .get(&format!("header/ablation/{a}"))
            .ok_or_else(|| Error::format("checkpoint", format!("missing header/ablation/{a}")))?;
        if v.item() != 0.0 {
            out.push(a);
        }
    }
    Ok(out)
}

/// Loads only the generator of a checkpoint.
pub fn load_generator(config: &Config, path: &Path) -> Result<(Generator, ParamStore)> {
    let r = config.resolved();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(r.train.seed);
    let generator = Generator::new(&r.generator, &mut store, &mut rng)?;
    let lookup: HashMap<String, Tensor> = load_checkpoint(path)?.into_iter().collect();
    store.load_records("g/", &lookup)?;
    Ok((generator, store))
}

/// The training items named by `config`: the corpus under `data.corpus`
/// (resampled to the mel rate) or the synthetic corpus, with
/// `data.noise_scale` Gaussian noise added to every clip.
pub fn load_items(config: &Config) -> Result<Vec<Example>> {
    let r = config.resolved();
    let d = &r.data;
    let sr = r.mel.sample_rate;
    let mut items = match &d.corpus {
        Some(root) => {
            let sidecar = d.sidecar_path().expect("corpus implies a sidecar path");
            let items = load_corpus(root, &sidecar, sr, &d.metadata)?;
            if items.is_empty() {
                return Err(Error::config("data.corpus", format!("{} lists no clips", sidecar.display())));
            }
            items
        }
        None => synth_dataset(d.synth_items, r.generator.output_len, sr, r.train.seed, &d.metadata)?,
    };
    if d.noise_scale > 0.0 {
        for (i, it) in items.iter_mut().enumerate() {
            let seed = r.train.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64 + 1);
            it.clip = add_noise(&it.clip, d.noise_scale, seed)?;
        }
    }
    Ok(items)
}

/// Where [`fit`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join("checkpoint.dpng"),
            log: dir.join("train_log.csv"),
        }
    }
}

/// Trains until the step (or epoch) budget is reached, logging every step
/// and checkpointing at the configured interval and at the end. A fresh
/// trainer starts a new log; a resumed one appends.
pub fn fit(
    trainer: &mut Trainer,
    items: Arc<Vec<Example>>,
    paths: &RunPaths,
    mut on_step: impl FnMut(&Trainer, &LossRecord),
) -> Result<Vec<LossRecord>> {
    let t = trainer.resolved.train.clone();
    let d = &trainer.resolved.data;
    let split = make_split(items.len(), (d.split[0], d.split[1], d.split[2]), t.seed)?;
    let batcher = Batcher::new(
        items,
        split.train,
        t.batch_size,
        trainer.resolved.generator.output_len,
        t.seed,
        trainer.mel.clone(),
    )?;
    let per_epoch = batcher.batches_per_epoch() as u64;
    let limit = match t.max_epochs {
        Some(e) => t.max_steps.min(e.saturating_mul(per_epoch)),
        None => t.max_steps,
    };
    if let Some(dir) = paths.log.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = if trainer.step == 0 || !paths.log.exists() {
        let mut f = File::create(&paths.log).map_err(|e| Error::io(&paths.log, e))?;
        writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&paths.log, e))?;
        f
    } else {
        OpenOptions::new()
            .append(true)
            .open(&paths.log)
            .map_err(|e| Error::io(&paths.log, e))?
    };
    let mut records = Vec::new();
    while trainer.step < limit {
        let epoch = trainer.step / per_epoch;
        let start = (trainer.step % per_epoch) as usize;
        let rx = batcher.clone().prefetch(epoch, start, t.prefetch);
        for batch in rx {
            if trainer.step >= limit {
                break;
            }
            let rec = trainer.train_step(&batch?)?;
            if !rec.is_finite() {
                return Err(Error::NonFinite { op: "train_step" });
            }
            writeln!(log, "{}", rec.csv_line()).map_err(|e| Error::io(&paths.log, e))?;
            on_step(trainer, &rec);
            records.push(rec);
            if t.checkpoint_every > 0 && trainer.step % t.checkpoint_every == 0 {
                log.flush().map_err(|e| Error::io(&paths.log, e))?;
                trainer.save(&paths.checkpoint)?;
            }
        }
    }
    log.flush().map_err(|e| Error::io(&paths.log, e))?;
    trainer.save(&paths.checkpoint)?;
    Ok(records)
}

/// Mean of the `window` values ending at index `end` (inclusive).
pub fn moving_average(xs: &[f64], end: usize, window: usize) -> f64 {
    let lo = (end + 1).saturating_sub(window);
    let s = &xs[lo..=end];
    s.iter().sum::<f64>() / s.len() as f64
}
