//! Least-squares adversarial losses, feature matching, the log-mel L1 loss
//! and the weighted generator objective. Every loss averages over the batch.

use serde::{Deserialize, Serialize};

use crate::dsp::MelExtractor;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub fm: f64,
    pub mel: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { fm: 2.0, mel: 45.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("loss.fm", self.fm), ("loss.mel", self.mel)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("weight must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

fn batch_mean(tape: &mut Tape, op: &'static str, terms: Vec<Var>) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::invalid(op, "empty batch"));
    }
    let n = terms.len();
    let flat = terms
        .into_iter()
        .map(|t| tape.reshape(t, &[1]))
        .collect::<Result<Vec<_>>>()?;
    let all = tape.concat(&flat, 0)?;
    let s = tape.sum(all)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Mean of `(d - 1)^2` over scores of generated clips.
pub fn adv_loss_generator(tape: &mut Tape, d_fake: &[Var]) -> Result<Var> {
    let terms = d_fake
        .iter()
        .map(|&d| {
            let e = tape.add_scalar(d, -1.0)?;
            let sq = tape.square(e)?;
            tape.sum(sq)
        })
        .collect::<Result<Vec<_>>>()?;
    batch_mean(tape, "adv_loss_generator", terms)
}

/// Mean of `(d_r - 1)^2 + d_f^2` over paired scores.
pub fn adv_loss_discriminator(tape: &mut Tape, d_real: &[Var], d_fake: &[Var]) -> Result<Var> {
    if d_real.len() != d_fake.len() {
        return Err(Error::shape(
            "adv_loss_discriminator",
            format!("{} real scores vs {} fake", d_real.len(), d_fake.len()),
        ));
    }
    let terms = d_real
        .iter()
        .zip(d_fake)
        .map(|(&r, &f)| {
            let e = tape.add_scalar(r, -1.0)?;
            let a = tape.square(e)?;
            let b = tape.square(f)?;
            let s = tape.add(a, b)?;
            tape.sum(s)
        })
        .collect::<Result<Vec<_>>>()?;
    batch_mean(tape, "adv_loss_discriminator", terms)
}

fn fm_single(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::shape(
            "feature_matching_loss",
            format!("{} real taps vs {} fake", real.len(), fake.len()),
        ));
    }
    let mut parts = Vec::with_capacity(real.len());
    for (i, (&r, &f)) in real.iter().zip(fake).enumerate() {
        if tape.shape(r) != tape.shape(f) {
            return Err(Error::shape(
                "feature_matching_loss",
                format!("tap {i}: {:?} vs {:?}", tape.shape(r), tape.shape(f)),
            ));
        }
        let d = tape.sub(r, f)?;
        let a = tape.abs(d)?;
        let m = tape.mean(a)?;
        parts.push(tape.reshape(m, &[1])?);
    }
    let all = tape.concat(&parts, 0)?;
    tape.sum(all)
}

/// Sum over taps of the per-element mean absolute difference, averaged over
/// the batch. `real[b]` and `fake[b]` are the tap lists of clip `b`.
pub fn feature_matching_loss(tape: &mut Tape, real: &[Vec<Var>], fake: &[Vec<Var>]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::shape(
            "feature_matching_loss",
            format!("batch {} vs {}", real.len(), fake.len()),
        ));
    }
    let terms = real
        .iter()
        .zip(fake)
        .map(|(r, f)| fm_single(tape, r, f))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(tape, "feature_matching_loss", terms)
}

/// Mean absolute log-mel difference between two equal-length clips.
pub fn mel_loss(tape: &mut Tape, mel: &MelExtractor, x: Var, g: Var) -> Result<Var> {
    let (a, b) = (tape.value(x).numel(), tape.value(g).numel());
    if a != b {
        return Err(Error::shape("mel_loss", format!("clip lengths {a} vs {b}")));
    }
    let mx = mel.op(tape, x)?;
    let mg = mel.op(tape, g)?;
    let d = tape.sub(mx, mg)?;
    let ad = tape.abs(d)?;
    tape.mean(ad)
}

/// [`mel_loss`] averaged over paired clips.
pub fn mel_loss_batch(tape: &mut Tape, mel: &MelExtractor, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(Error::shape("mel_loss", format!("batch {} vs {}", real.len(), fake.len())));
    }
    let terms = real
        .iter()
        .zip(fake)
        .map(|(&x, &g)| mel_loss(tape, mel, x, g))
        .collect::<Result<Vec<_>>>()?;
    batch_mean(tape, "mel_loss", terms)
}

/// `adv + w.fm * fm + w.mel * mel`.
pub fn generator_total_value(adv: f64, fm: f64, mel: f64, w: LossWeights) -> f64 {
    adv + w.fm * fm + w.mel * mel
}

/// Tape version of [`generator_total_value`].
pub fn generator_total(tape: &mut Tape, adv: Var, fm: Var, mel: Var, w: LossWeights) -> Result<Var> {
    let f = tape.scale(fm, w.fm)?;
    let m = tape.scale(mel, w.mel)?;
    let s = tape.add(adv, f)?;
    tape.add(s, m)
}
