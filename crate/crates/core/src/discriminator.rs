//! Two-branch discriminator: a multi-scale branch over average-pooled audio
//! and a multi-channel branch over period-folded 2D views.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{Activation, ActivationKind};
use crate::blocks::{activate_vector, BlockOpts, DefConvBlock1d, DefConvBlock2d};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Conv1dOpts, Conv2dOpts, Init, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub periods: Vec<usize>,
    pub kernels: Vec<usize>,
    pub depth: usize,
    /// Channel width inside the residual blocks; split evenly across the
    /// parallel kernels.
    pub channels: usize,
    pub final_stride: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub final_hidden: usize,
    pub psroi_bins_1d: usize,
    pub psroi_bins_2d: usize,
    pub activation: ActivationKind,
    pub use_msd: bool,
    pub use_mcd: bool,
    pub use_deform_in_mcd: bool,
    /// Separate two-node heads per branch instead of one shared head.
    pub split_heads: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            kernels: vec![3, 5, 7, 11],
            depth: 3,
            channels: 32,
            final_stride: 4,
            pool_kernel: 11,
            pool_stride: 4,
            final_hidden: 512,
            psroi_bins_1d: 4,
            psroi_bins_2d: 2,
            activation: ActivationKind::Prak,
            use_msd: true,
            use_mcd: true,
            use_deform_in_mcd: true,
            split_heads: false,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("discriminator.{name}");
        if !self.use_msd && !self.use_mcd {
            return Err(Error::config(f("use_msd"), "at least one of use_msd / use_mcd must be enabled"));
        }
        if self.depth == 0 {
            return Err(Error::config(f("depth"), "must be >= 1"));
        }
        if self.kernels.is_empty() || self.kernels.contains(&0) {
            return Err(Error::config(f("kernels"), "need at least one positive kernel size"));
        }
        if self.channels < 2 || self.channels % self.kernels.len() != 0 {
            return Err(Error::config(
                f("channels"),
                format!("must be >= 2 and divisible by the {} kernel sizes", self.kernels.len()),
            ));
        }
        if self.channels / self.kernels.len() < 2 {
            return Err(Error::config(f("channels"), "each kernel branch needs >= 2 channels"));
        }
        if self.use_mcd {
            if self.periods.is_empty() || self.periods.iter().any(|&p| p < 2) {
                return Err(Error::config(f("periods"), "need at least one period, each >= 2"));
            }
            let mut seen = self.periods.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != self.periods.len() {
                return Err(Error::config(f("periods"), "periods must be distinct"));
            }
        }
        for (name, v) in [
            ("final_stride", self.final_stride),
            ("pool_kernel", self.pool_kernel),
            ("pool_stride", self.pool_stride),
            ("final_hidden", self.final_hidden),
        ] {
            if v == 0 {
                return Err(Error::config(f(name), "must be positive"));
            }
        }
        Ok(())
    }

    /// Shortest waveform the configuration can score.
    pub fn min_input_len(&self) -> usize {
        let bins1 = self.psroi_bins_1d.max(1);
        let mut need = 0;
        if self.use_msd {
            let pooled = (bins1 - 1) * self.final_stride + 1;
            need = need.max((pooled.max(bins1) - 1) * self.pool_stride + self.pool_kernel);
        }
        if self.use_mcd {
            let rows = (self.psroi_bins_2d.max(1) - 1) * self.final_stride + 1;
            let pmax = self.periods.iter().copied().max().unwrap_or(1);
            need = need.max(rows * pmax);
        }
        need
    }
}

/// Row-major fold of `x` into `[ceil(T/p), p]`, reflect-padding the tail.
/// Returns the number of rows and the padded samples.
pub fn reshape_period(x: &[f64], p: usize) -> (usize, Vec<f64>) {
    let idx = period_indices(x.len(), p);
    (idx.len() / p, idx.into_iter().map(|i| x[i]).collect())
}

fn period_indices(len: usize, p: usize) -> Vec<usize> {
    let rows = len.div_ceil(p);
    let pad = rows * p - len;
    (0..len)
        .chain((1..=pad).map(|k| reflect(len as isize - 1 + k as isize, len)))
        .collect()
}

fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

#[derive(Clone, Debug)]
struct ResBlock1d {
    branches: Vec<DefConvBlock1d>,
}

#[derive(Clone, Debug)]
struct ResBlock2d {
    branches: Vec<DefConvBlock2d>,
}

#[derive(Clone, Debug)]
struct Msd {
    lift_w: ParamId,
    lift_b: ParamId,
    blocks: Vec<ResBlock1d>,
    last: DefConvBlock1d,
    post_w: ParamId,
    post_b: ParamId,
    dense_w: ParamId,
    dense_b: ParamId,
    act: Activation,
}

#[derive(Clone, Debug)]
struct McdPeriod {
    period: usize,
    lift_w: ParamId,
    lift_b: ParamId,
    blocks: Vec<ResBlock2d>,
    last: DefConvBlock2d,
    post_w: ParamId,
    post_b: ParamId,
}

#[derive(Clone, Debug)]
struct Mcd {
    periods: Vec<McdPeriod>,
    dense_w: ParamId,
    dense_b: ParamId,
    act: Activation,
}

#[derive(Clone, Debug)]
struct Head {
    w: ParamId,
    b: ParamId,
}

/// Score and intermediate features of one discriminator pass.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    /// Probability of the "real" node, a one-element tensor.
    pub score: Var,
    /// Multi-scale block outputs first, then multi-channel ones period by
    /// period.
    pub taps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub input_len: usize,
    msd: Option<Msd>,
    mcd: Option<Mcd>,
    heads: Vec<Head>,
}

impl Discriminator {
    pub fn new<R: Rng>(config: &DiscriminatorConfig, input_len: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        if input_len < c.min_input_len() {
            return Err(Error::config(
                "discriminator",
                format!("input length {input_len} below the minimum {} for this configuration", c.min_input_len()),
            ));
        }
        let uniform = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
        let h = c.channels;
        let branch = h / c.kernels.len();
        let opts = |kernel, stride, bins, deformable| BlockOpts {
            kernel,
            stride,
            psroi_bins: bins,
            activation: c.activation,
            deformable,
        };
        let msd = if c.use_msd {
            let pooled = (input_len - c.pool_kernel) / c.pool_stride + 1;
            let mut blocks = Vec::with_capacity(c.depth);
            for d in 0..c.depth {
                let mut branches = Vec::with_capacity(c.kernels.len());
                for &k in &c.kernels {
                    branches.push(DefConvBlock1d::new(
                        store,
                        rng,
                        &format!("disc/msd/{d}/k{k}"),
                        h,
                        branch,
                        opts(k, 1, c.psroi_bins_1d, true),
                    )?);
                }
                blocks.push(ResBlock1d { branches });
            }
            let last = DefConvBlock1d::new(store, rng, "disc/msd/last", h, h, opts(c.kernels[0], c.final_stride, c.psroi_bins_1d, true))?;
            let flat = pooled.div_ceil(c.final_stride);
            Some(Msd {
                lift_w: store.add_init("disc/msd/lift/w", &[h, 1, 1], Init::Uniform(1.0), rng)?,
                lift_b: store.add_init("disc/msd/lift/b", &[h], Init::Const(0.0), rng)?,
                blocks,
                last,
                post_w: store.add_init("disc/msd/post/w", &[1, h, 1], uniform(h), rng)?,
                post_b: store.add_init("disc/msd/post/b", &[1], Init::Const(0.0), rng)?,
                dense_w: store.add_init("disc/msd/dense/w", &[c.final_hidden, flat], uniform(flat), rng)?,
                dense_b: store.add_init("disc/msd/dense/b", &[c.final_hidden], Init::Const(0.0), rng)?,
                act: Activation::new(store, rng, "disc/msd/dense/act", c.activation, c.final_hidden)?,
            })
        } else {
            None
        };
        let mcd = if c.use_mcd {
            let mut periods = Vec::with_capacity(c.periods.len());
            let mut flat = 0;
            for &p in &c.periods {
                let mut blocks = Vec::with_capacity(c.depth);
                for d in 0..c.depth {
                    let mut branches = Vec::with_capacity(c.kernels.len());
                    for &k in &c.kernels {
                        branches.push(DefConvBlock2d::new(
                            store,
                            rng,
                            &format!("disc/mcd/p{p}/{d}/k{k}"),
                            h,
                            branch,
                            opts(k, 1, c.psroi_bins_2d, c.use_deform_in_mcd),
                        )?);
                    }
                    blocks.push(ResBlock2d { branches });
                }
                let last = DefConvBlock2d::new(
                    store,
                    rng,
                    &format!("disc/mcd/p{p}/last"),
                    h,
                    h,
                    opts(c.kernels[0], c.final_stride, c.psroi_bins_2d, c.use_deform_in_mcd),
                )?;
                flat += input_len.div_ceil(p).div_ceil(c.final_stride) * p;
                periods.push(McdPeriod {
                    period: p,
                    lift_w: store.add_init(format!("disc/mcd/p{p}/lift/w"), &[h, 1, 1, 1], Init::Uniform(1.0), rng)?,
                    lift_b: store.add_init(format!("disc/mcd/p{p}/lift/b"), &[h], Init::Const(0.0), rng)?,
                    blocks,
                    last,
                    post_w: store.add_init(format!("disc/mcd/p{p}/post/w"), &[1, h, 1, 1], uniform(h), rng)?,
                    post_b: store.add_init(format!("disc/mcd/p{p}/post/b"), &[1], Init::Const(0.0), rng)?,
                });
            }
            Some(Mcd {
                periods,
                dense_w: store.add_init("disc/mcd/dense/w", &[c.final_hidden, flat], uniform(flat), rng)?,
                dense_b: store.add_init("disc/mcd/dense/b", &[c.final_hidden], Init::Const(0.0), rng)?,
                act: Activation::new(store, rng, "disc/mcd/dense/act", c.activation, c.final_hidden)?,
            })
        } else {
            None
        };
        let branches = usize::from(c.use_msd) + usize::from(c.use_mcd);
        let heads = if c.split_heads {
            let mut heads = Vec::new();
            for name in ["msd", "mcd"].into_iter().filter(|n| if *n == "msd" { c.use_msd } else { c.use_mcd }) {
                heads.push(Head {
                    w: store.add_init(format!("disc/head/{name}/w"), &[2, c.final_hidden], uniform(c.final_hidden), rng)?,
                    b: store.add_init(format!("disc/head/{name}/b"), &[2], Init::Const(0.0), rng)?,
                });
            }
            heads
        } else {
            let fin = branches * c.final_hidden;
            vec![Head {
                w: store.add_init("disc/head/w", &[2, fin], uniform(fin), rng)?,
                b: store.add_init("disc/head/b", &[2], Init::Const(0.0), rng)?,
            }]
        };
        Ok(Self {
            config: c.clone(),
            input_len,
            msd,
            mcd,
            heads,
        })
    }

    fn msd_features(&self, tape: &mut Tape, p: &Bound, m: &Msd, x: Var, taps: &mut Vec<Var>) -> Result<Var> {
        let c = &self.config;
        let x = tape.reshape(x, &[1, self.input_len])?;
        let pooled = tape.avg_pool1d(x, c.pool_kernel, c.pool_stride)?;
        let mut h = tape.conv1d(pooled, p[m.lift_w], Some(p[m.lift_b]), Conv1dOpts::default())?;
        for block in &m.blocks {
            let outs = block
                .branches
                .iter()
                .map(|b| b.forward(tape, p, h))
                .collect::<Result<Vec<_>>>()?;
            let cat = tape.concat(&outs, 0)?;
            h = tape.add(cat, h)?;
            taps.push(h);
        }
        let last = m.last.forward(tape, p, h)?;
        let post = tape.conv1d(last, p[m.post_w], Some(p[m.post_b]), Conv1dOpts::default())?;
        let n = tape.value(post).numel();
        let flat = tape.reshape(post, &[n])?;
        let f = tape.dense(flat, p[m.dense_w], Some(p[m.dense_b]))?;
        activate_vector(tape, p, &m.act, f)
    }

    fn mcd_features(&self, tape: &mut Tape, p: &Bound, m: &Mcd, x: Var, taps: &mut Vec<Var>) -> Result<Var> {
        let mut flats = Vec::with_capacity(m.periods.len());
        for per in &m.periods {
            let idx = period_indices(self.input_len, per.period);
            let rows = idx.len() / per.period;
            let folded = tape.gather(x, idx, &[1, rows, per.period])?;
            let mut h = tape.conv2d(folded, p[per.lift_w], Some(p[per.lift_b]), Conv2dOpts::default())?;
            for block in &per.blocks {
                let outs = block
                    .branches
                    .iter()
                    .map(|b| b.forward(tape, p, h))
                    .collect::<Result<Vec<_>>>()?;
                let cat = tape.concat(&outs, 0)?;
                h = tape.add(cat, h)?;
                taps.push(h);
            }
            let last = per.last.forward(tape, p, h)?;
            let post = tape.conv2d(last, p[per.post_w], Some(p[per.post_b]), Conv2dOpts::default())?;
            let n = tape.value(post).numel();
            flats.push(tape.reshape(post, &[n])?);
        }
        let all = tape.concat(&flats, 0)?;
        let f = tape.dense(all, p[m.dense_w], Some(p[m.dense_b]))?;
        activate_vector(tape, p, &m.act, f)
    }

    /// Scores a `[input_len]` waveform.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<DiscOutput> {
        if tape.value(x).numel() != self.input_len {
            return Err(Error::shape(
                "discriminator",
                format!("input has {} samples, configured {}", tape.value(x).numel(), self.input_len),
            ));
        }
        let x = tape.reshape(x, &[self.input_len])?;
        let mut taps = Vec::new();
        let mut feats = Vec::with_capacity(2);
        if let Some(m) = &self.msd {
            feats.push(self.msd_features(tape, p, m, x, &mut taps)?);
        }
        if let Some(m) = &self.mcd {
            feats.push(self.mcd_features(tape, p, m, x, &mut taps)?);
        }
        let score = if self.config.split_heads {
            let mut real = Vec::with_capacity(feats.len());
            for (f, head) in feats.iter().zip(&self.heads) {
                let z = tape.dense(*f, p[head.w], Some(p[head.b]))?;
                let s = tape.sigmoid(z)?;
                real.push(tape.slice(s, 0, 0, 1)?);
            }
            let cat = tape.concat(&real, 0)?;
            tape.mean(cat)?
        } else {
            let f = tape.concat(&feats, 0)?;
            let head = &self.heads[0];
            let z = tape.dense(f, p[head.w], Some(p[head.b]))?;
            let s = tape.sigmoid(z)?;
            tape.slice(s, 0, 0, 1)?
        };
        Ok(DiscOutput { score, taps })
    }
}
