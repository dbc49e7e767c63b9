//! Mel + metadata conditioned waveform generator built around a stack of
//! deformable periodic (DPN) residual layers.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{Activation, ActivationKind};
use crate::blocks::{activate_vector, BlockOpts, DefConvBlock1d, FeatureNorm};
use crate::dsp::MEL_FLOOR;
use crate::error::{Error, Result};
use crate::tensor::{Bound, Conv1dOpts, Conv2dOpts, Init, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_mels: usize,
    pub mel_frames: usize,
    pub init_channels: usize,
    pub init_kernel: usize,
    pub meta_width: usize,
    pub meta_hidden: usize,
    pub dpn_depth: usize,
    pub dpn_channels: usize,
    pub block_kernel: usize,
    /// Channels of the last block before the dense head.
    pub head_channels: usize,
    pub output_len: usize,
    pub psroi_bins: usize,
    pub lp_cutoff: f64,
    pub hp_cutoff: f64,
    /// Per-layer `[low, high]` cutoff overrides, indexed by DPN layer.
    pub cutoffs: Vec<[f64; 2]>,
    pub activation: ActivationKind,
    pub use_metadata: bool,
    pub use_dpn: bool,
    pub use_prak: bool,
    pub use_deform: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            mel_frames: 100,
            init_channels: 32,
            init_kernel: 3,
            meta_width: 152,
            meta_hidden: 64,
            dpn_depth: 4,
            dpn_channels: 64,
            block_kernel: 3,
            head_channels: 4,
            output_len: 47_749,
            psroi_bins: 4,
            lp_cutoff: FRAC_PI_2,
            hp_cutoff: FRAC_PI_2,
            cutoffs: Vec::new(),
            activation: ActivationKind::Prak,
            use_metadata: true,
            use_dpn: true,
            use_prak: true,
            use_deform: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_mels", self.n_mels),
            ("mel_frames", self.mel_frames),
            ("init_channels", self.init_channels),
            ("init_kernel", self.init_kernel),
            ("meta_width", self.meta_width),
            ("meta_hidden", self.meta_hidden),
            ("dpn_depth", self.dpn_depth),
            ("dpn_channels", self.dpn_channels),
            ("block_kernel", self.block_kernel),
            ("head_channels", self.head_channels),
            ("output_len", self.output_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("generator.{name}"), "must be positive"));
            }
        }
        if self.n_mels < 2 || self.mel_frames < 2 {
            return Err(Error::config("generator.mel_frames", "mel input must be at least 2x2"));
        }
        if self.init_kernel % 2 == 0 {
            return Err(Error::config("generator.init_kernel", "must be odd"));
        }
        if self.head_channels < 2 || self.dpn_channels < 2 {
            return Err(Error::config("generator.head_channels", "head and DPN blocks need >= 2 channels"));
        }
        let fused = self.fused_len();
        // The inner DPN block runs on the half-length sequence.
        let shortest = if self.use_dpn { fused.div_ceil(2) } else { fused };
        if shortest < self.psroi_bins.max(1) {
            return Err(Error::config(
                "generator.mel_frames",
                format!("fused length {fused} too short for {} pooling bins", self.psroi_bins),
            ));
        }
        for (i, c) in std::iter::once([self.lp_cutoff, self.hp_cutoff]).chain(self.cutoffs.iter().copied()).enumerate() {
            if c.iter().any(|&w| !(w > 0.0 && w <= std::f64::consts::PI)) {
                let field = if i == 0 { "generator.lp_cutoff".to_string() } else { format!("generator.cutoffs[{}]", i - 1) };
                return Err(Error::config(field, "cutoff must lie in (0, pi]"));
            }
        }
        if self.cutoffs.len() > self.dpn_depth {
            return Err(Error::config("generator.cutoffs", "more overrides than DPN layers"));
        }
        Ok(())
    }

    /// Time extent after pooling and the stride-2 transpose convolution.
    pub fn fused_len(&self) -> usize {
        2 * (self.mel_frames / 2)
    }

    fn cutoff(&self, layer: usize) -> [f64; 2] {
        self.cutoffs.get(layer).copied().unwrap_or([self.lp_cutoff, self.hp_cutoff])
    }

    pub fn block_activation(&self) -> ActivationKind {
        if self.use_prak {
            self.activation
        } else {
            ActivationKind::Relu
        }
    }
}

const TRANSPOSE_KERNEL: usize = 4;

#[derive(Clone, Debug)]
struct DpnLayer {
    a: DefConvBlock1d,
    b: DefConvBlock1d,
    cutoff: [f64; 2],
}

#[derive(Clone, Debug)]
enum Body {
    Dpn(Vec<DpnLayer>),
    Plain(Vec<(ParamId, ParamId, Activation)>),
}

#[derive(Clone, Debug)]
struct MetaInit {
    w1: ParamId,
    b1: ParamId,
    act: Activation,
    w2: ParamId,
    b2: ParamId,
}

/// Generator parameters live in the [`ParamStore`] passed to [`Generator::new`];
/// the struct holds only handles and the configuration.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    init_w: ParamId,
    init_b: ParamId,
    init_norm: FeatureNorm,
    meta: Option<MetaInit>,
    up_w: ParamId,
    up_b: ParamId,
    body: Body,
    head: DefConvBlock1d,
    out_w: ParamId,
    out_b: ParamId,
}

impl Generator {
    pub fn new<R: Rng>(config: &GeneratorConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let uniform = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
        let ki = c.init_kernel;
        let init_w = store.add_init("gen/mel_init/conv/w", &[c.init_channels, 1, ki, ki], uniform(ki * ki), rng)?;
        let init_b = store.add_init("gen/mel_init/conv/b", &[c.init_channels], Init::Const(0.0), rng)?;
        let init_norm = FeatureNorm::new(store, rng, "gen/mel_init/norm", c.init_channels)?;
        let act_kind = c.block_activation();
        let meta = if c.use_metadata {
            Some(MetaInit {
                w1: store.add_init("gen/meta/dense1/w", &[c.meta_hidden, c.meta_width], uniform(c.meta_width), rng)?,
                b1: store.add_init("gen/meta/dense1/b", &[c.meta_hidden], Init::Const(0.0), rng)?,
                act: Activation::new(store, rng, "gen/meta/act", act_kind, c.meta_hidden)?,
                w2: store.add_init("gen/meta/dense2/w", &[c.meta_hidden, c.meta_hidden], uniform(c.meta_hidden), rng)?,
                b2: store.add_init("gen/meta/dense2/b", &[c.meta_hidden], Init::Const(0.0), rng)?,
            })
        } else {
            None
        };
        let fused_in = c.init_channels * (c.n_mels / 2) + c.meta_hidden;
        let up_w = store.add_init(
            "gen/fuse/up/w",
            &[fused_in, c.dpn_channels, TRANSPOSE_KERNEL],
            uniform(fused_in),
            rng,
        )?;
        let up_b = store.add_init("gen/fuse/up/b", &[c.dpn_channels], Init::Const(0.0), rng)?;
        let block = |kernel| BlockOpts {
            kernel,
            stride: 1,
            psroi_bins: c.psroi_bins,
            activation: act_kind,
            deformable: c.use_deform,
        };
        let body = if c.use_dpn {
            let mut layers = Vec::with_capacity(c.dpn_depth);
            for d in 0..c.dpn_depth {
                let ch = c.dpn_channels;
                layers.push(DpnLayer {
                    a: DefConvBlock1d::new(store, rng, &format!("gen/dpn/{d}/a"), ch, ch, block(c.block_kernel))?,
                    b: DefConvBlock1d::new(store, rng, &format!("gen/dpn/{d}/b"), ch, ch, block(c.block_kernel))?,
                    cutoff: c.cutoff(d),
                });
            }
            Body::Dpn(layers)
        } else {
            let mut layers = Vec::with_capacity(c.dpn_depth);
            let ch = c.dpn_channels;
            for d in 0..c.dpn_depth {
                let w = store.add_init(format!("gen/plain/{d}/w"), &[ch, ch, c.block_kernel], uniform(ch * c.block_kernel), rng)?;
                let b = store.add_init(format!("gen/plain/{d}/b"), &[ch], Init::Const(0.0), rng)?;
                let act = Activation::new(store, rng, &format!("gen/plain/{d}/act"), act_kind, ch)?;
                layers.push((w, b, act));
            }
            Body::Plain(layers)
        };
        let head = DefConvBlock1d::new(store, rng, "gen/head/block", c.dpn_channels, c.head_channels, block(c.block_kernel))?;
        let flat = c.head_channels * c.fused_len();
        let out_w = store.add_init("gen/head/dense/w", &[c.output_len, flat], uniform(flat), rng)?;
        let out_b = store.add_init("gen/head/dense/b", &[c.output_len], Init::Const(0.0), rng)?;
        Ok(Self {
            config: c.clone(),
            init_w,
            init_b,
            init_norm,
            meta,
            up_w,
            up_b,
            body,
            head,
            out_w,
            out_b,
        })
    }

    /// `mel: [n_mels, frames]` log-mel, shifted internally so silence is zero.
    /// Output `[C * n_mels/2, frames/2]`.
    pub fn mel_initiator(&self, tape: &mut Tape, p: &Bound, mel: Var) -> Result<Var> {
        let c = &self.config;
        let shape = tape.shape(mel).to_vec();
        if shape != [c.n_mels, c.mel_frames] {
            return Err(Error::shape(
                "mel_initiator",
                format!("mel {shape:?}, configured [{}, {}]", c.n_mels, c.mel_frames),
            ));
        }
        let shifted = tape.add_scalar(mel, -MEL_FLOOR.ln())?;
        let x = tape.reshape(shifted, &[1, c.n_mels, c.mel_frames])?;
        let pad = c.init_kernel / 2;
        let h = tape.conv2d(x, p[self.init_w], Some(p[self.init_b]), Conv2dOpts::padded(pad, pad))?;
        let h = tape.max_pool2d(h, 2, 2)?;
        let h = self.init_norm.forward(tape, p, h)?;
        let s = tape.shape(h).to_vec();
        tape.reshape(h, &[s[0] * s[1], s[2]])
    }

    /// `meta: [meta_width]` to `[meta_hidden]`; zeros when metadata is
    /// ablated.
    pub fn metadata_initiator(&self, tape: &mut Tape, p: &Bound, meta: Var) -> Result<Var> {
        let c = &self.config;
        if tape.value(meta).numel() != c.meta_width {
            return Err(Error::shape(
                "metadata_initiator",
                format!("metadata width {}, configured {}", tape.value(meta).numel(), c.meta_width),
            ));
        }
        match &self.meta {
            Some(m) => {
                let h = tape.dense(meta, p[m.w1], Some(p[m.b1]))?;
                let h = activate_vector(tape, p, &m.act, h)?;
                tape.dense(h, p[m.w2], Some(p[m.b2]))
            }
            None => Ok(tape.constant(Tensor::zeros(&[c.meta_hidden]))),
        }
    }

    /// Broadcast metadata over time, concatenate, and double the time extent.
    pub fn fuse_and_upscale(&self, tape: &mut Tape, p: &Bound, mel_feat: Var, meta_feat: Var) -> Result<Var> {
        let t = tape.shape(mel_feat)[1];
        let m = tape.broadcast_time(meta_feat, t)?;
        let x = tape.concat(&[mel_feat, m], 0)?;
        let up = tape.transpose_conv1d(x, p[self.up_w], Some(p[self.up_b]), 2)?;
        let (have, want) = (tape.shape(up)[1], 2 * t);
        tape.slice(up, 1, (have - want) / 2, want)
    }

    fn dpn_layer(&self, tape: &mut Tape, p: &Bound, layer: &DpnLayer, x: Var) -> Result<Var> {
        let len = tape.shape(x)[1];
        let x = if len % 2 == 1 { tape.pad(x, 1, 0, 1)? } else { x };
        let h = layer.a.forward(tape, p, x)?;
        let h = tape.downsample(h, 2, layer.cutoff[0])?;
        let h = layer.b.forward(tape, p, h)?;
        let y = tape.upsample(h, 2, layer.cutoff[1])?;
        if len % 2 == 1 {
            tape.slice(y, 1, 0, len)
        } else {
            Ok(y)
        }
    }

    /// Residual ladder: layer `d` sees `x_d = x_{d-1} + y_{d-1}`; the output
    /// is the sum of all `y_d`.
    pub fn dpn_module(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match &self.body {
            Body::Dpn(layers) => {
                let mut input = x;
                let mut total: Option<Var> = None;
                for (i, layer) in layers.iter().enumerate() {
                    let y = self.dpn_layer(tape, p, layer, input)?;
                    total = Some(match total {
                        Some(s) => tape.add(s, y)?,
                        None => y,
                    });
                    if i + 1 < layers.len() {
                        input = tape.add(input, y)?;
                    }
                }
                Ok(total.expect("depth >= 1"))
            }
            Body::Plain(layers) => {
                let mut h = x;
                let opts = Conv1dOpts::padded(self.config.block_kernel / 2);
                for (w, b, act) in layers {
                    let len = tape.shape(h)[1];
                    let mut y = tape.conv1d(h, p[*w], Some(p[*b]), opts)?;
                    if tape.shape(y)[1] > len {
                        y = tape.slice(y, 1, 0, len)?;
                    }
                    h = act.forward(tape, p, y)?;
                }
                Ok(h)
            }
        }
    }

    /// Full forward pass to a `[output_len]` waveform in `[-1, 1]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, mel: Var, meta: Var) -> Result<Var> {
        let mf = self.mel_initiator(tape, p, mel)?;
        let md = self.metadata_initiator(tape, p, meta)?;
        let x = self.fuse_and_upscale(tape, p, mf, md)?;
        let h = self.dpn_module(tape, p, x)?;
        let h = self.head.forward(tape, p, h)?;
        let y = tape.dense(h, p[self.out_w], Some(p[self.out_b]))?;
        tape.tanh(y)
    }

    /// Inference-only [`Generator::forward`] with parameters from `store`.
    pub fn synthesize(&self, store: &ParamStore, mel: &Tensor, meta: &Tensor) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let m = t.constant(mel.clone());
        let d = t.constant(meta.clone());
        let y = self.forward(&mut t, &p, m, d)?;
        Ok(t.data(y).to_vec())
    }
}
