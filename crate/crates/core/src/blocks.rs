//! Deformable convolution blocks shared by the generator and discriminator:
//! deformable conv, position-sensitive pooling, layer norm and an
//! activation.

use rand::Rng;

use crate::activations::{Activation, ActivationKind};
use crate::deform::{DeformConv1d, DeformConv2d};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Conv1dOpts, Conv2dOpts, Init, ParamId, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Layer norm over the whole `[C, ...]` feature map (every unit of the
/// layer), followed by a per-channel gain and bias.
#[derive(Clone, Debug)]
pub struct FeatureNorm {
    gain: ParamId,
    bias: ParamId,
}

impl FeatureNorm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add_init(format!("{prefix}/gain"), &[channels], Init::Const(1.0), rng)?,
            bias: store.add_init(format!("{prefix}/bias"), &[channels], Init::Const(0.0), rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let n = tape.value(x).numel();
        let c = shape[0];
        let rest = n / c;
        let flat = tape.reshape(x, &[n])?;
        let ones = tape.constant(Tensor::full(&[n], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[n]));
        let xhat = tape.layer_norm(flat, 0, ones, zeros, LAYER_NORM_EPS)?;
        let xhat = tape.reshape(xhat, &[c, rest])?;
        let g = tape.broadcast_time(p[self.gain], rest)?;
        let b = tape.broadcast_time(p[self.bias], rest)?;
        let y = tape.mul(xhat, g)?;
        let y = tape.add(y, b)?;
        tape.reshape(y, &shape)
    }
}

/// Applies a channel activation to a flat feature vector by viewing it as
/// `[n, 1]`, so sequence smoothing never mixes channels.
pub fn activate_vector(tape: &mut Tape, p: &Bound, act: &Activation, v: Var) -> Result<Var> {
    let n = tape.value(v).numel();
    let col = tape.reshape(v, &[n, 1])?;
    let y = act.forward(tape, p, col)?;
    tape.reshape(y, &[n])
}

#[derive(Clone, Copy, Debug)]
pub struct BlockOpts {
    pub kernel: usize,
    pub stride: usize,
    /// Pooling bins per axis; `0` disables pooling.
    pub psroi_bins: usize,
    pub activation: ActivationKind,
    pub deformable: bool,
}

/// 1D block over `[C_in, L] -> [C_out, ceil(L / stride)]`.
#[derive(Clone, Debug)]
pub struct DefConvBlock1d {
    conv: DeformConv1d,
    bins: usize,
    norm: FeatureNorm,
    act: Activation,
    stride: usize,
}

impl DefConvBlock1d {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, c_in: usize, c_out: usize, o: BlockOpts) -> Result<Self> {
        if o.kernel == 0 || o.stride == 0 {
            return Err(Error::config(prefix.to_string(), "kernel and stride must be >= 1"));
        }
        let conv_out = c_out * o.psroi_bins.max(1);
        let opts = Conv1dOpts::padded(o.kernel / 2).with_stride(o.stride);
        Ok(Self {
            conv: DeformConv1d::new(store, rng, &format!("{prefix}/conv"), c_in, conv_out, o.kernel, opts, o.deformable)?,
            bins: o.psroi_bins,
            norm: FeatureNorm::new(store, rng, &format!("{prefix}/norm"), c_out)?,
            act: Activation::new(store, rng, &format!("{prefix}/act"), o.activation, c_out)?,
            stride: o.stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let len = tape.shape(x)[1];
        let target = len.div_ceil(self.stride);
        let mut h = self.conv.forward(tape, p, x)?;
        if tape.shape(h)[1] > target {
            h = tape.slice(h, 1, 0, target)?;
        }
        if self.bins > 0 {
            h = tape.psroi_layer1d(h, self.bins)?;
        }
        let h = self.norm.forward(tape, p, h)?;
        self.act.forward(tape, p, h)
    }
}

/// 2D block over `[C_in, H, W] -> [C_out, ceil(H / stride), W]` with a
/// `(kernel, 1)` kernel. The activation runs on the row-major flattening of
/// each channel, which for period-folded audio is the original time order.
#[derive(Clone, Debug)]
pub struct DefConvBlock2d {
    conv: DeformConv2d,
    bins: usize,
    norm: FeatureNorm,
    act: Activation,
    stride: usize,
}

impl DefConvBlock2d {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, c_in: usize, c_out: usize, o: BlockOpts) -> Result<Self> {
        if o.kernel == 0 || o.stride == 0 {
            return Err(Error::config(prefix.to_string(), "kernel and stride must be >= 1"));
        }
        let conv_out = c_out * (o.psroi_bins * o.psroi_bins).max(1);
        let opts = Conv2dOpts {
            stride: (o.stride, 1),
            padding: (o.kernel / 2, 0),
        };
        Ok(Self {
            conv: DeformConv2d::new(store, rng, &format!("{prefix}/conv"), c_in, conv_out, (o.kernel, 1), opts, o.deformable)?,
            bins: o.psroi_bins,
            norm: FeatureNorm::new(store, rng, &format!("{prefix}/norm"), c_out)?,
            act: Activation::new(store, rng, &format!("{prefix}/act"), o.activation, c_out)?,
            stride: o.stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let rows = tape.shape(x)[1];
        let target = rows.div_ceil(self.stride);
        let mut h = self.conv.forward(tape, p, x)?;
        if tape.shape(h)[1] > target {
            h = tape.slice(h, 1, 0, target)?;
        }
        if self.bins > 0 {
            h = tape.psroi_layer2d(h, self.bins)?;
        }
        let h = self.norm.forward(tape, p, h)?;
        let shape = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[shape[0], shape[1] * shape[2]])?;
        let y = self.act.forward(tape, p, flat)?;
        tape.reshape(y, &shape)
    }
}
