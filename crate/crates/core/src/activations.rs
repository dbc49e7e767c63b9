//! Periodic activations: the triangle-wave periodic ReLU, its adaptive-shift
//! variant, the Gaussian-smoothed PRAK block, and the usual baselines.

use std::f64::consts::{FRAC_PI_4, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, Init, ParamId, ParamStore, Tape, Tensor, Var};

const SCALE: f64 = 8.0 / (PI * PI);

/// Sawtooth index `floor(u/pi + 1/2)` and its parity sign.
fn tri_parts(u: f64) -> (f64, f64) {
    let n = (u / PI + 0.5).floor();
    let sign = if n.rem_euclid(2.0) == 0.0 { 1.0 } else { -1.0 };
    (n, sign)
}

/// Triangle wave of period `2 pi` and amplitude `pi/2`, odd, slope `+1`
/// through the origin.
pub fn tri(u: f64) -> f64 {
    let (n, sign) = tri_parts(u);
    (u - PI * n) * sign
}

/// Slope of [`tri`]: `+1` or `-1`.
pub fn tri_slope(u: f64) -> f64 {
    tri_parts(u).1
}

pub fn periodic_relu(x: f64) -> f64 {
    SCALE * (tri(x + PI / 2.0) + tri(x))
}

pub fn ada_prelu(x: f64, delta: f64) -> f64 {
    SCALE * (tri(x + delta) + tri(x - delta))
}

/// Partial derivatives of [`ada_prelu`] with respect to `x` and `delta`.
pub fn ada_prelu_grad(x: f64, delta: f64) -> (f64, f64) {
    let (a, b) = (tri_slope(x + delta), tri_slope(x - delta));
    (SCALE * (a + b), SCALE * (a - b))
}

/// Initial adaptive shift.
pub const DELTA_INIT: f64 = FRAC_PI_4;

/// Smoothing bandwidth at initialization.
pub const SIGMA_INIT: f64 = 1.0;

/// Inverse of softplus, so `softplus(rho_for_sigma(s)) == s`.
pub fn rho_for_sigma(sigma: f64) -> f64 {
    sigma + (-(-sigma).exp_m1()).ln()
}

impl Tape {
    pub fn periodic_relu(&mut self, x: Var) -> Result<Var> {
        self.unary("periodic_relu", x, periodic_relu, |x, _| {
            SCALE * (tri_slope(x + PI / 2.0) + tri_slope(x))
        })
    }

    /// Adaptive periodic ReLU with one shift per channel. `x: [C, ...]`,
    /// `delta: [C]`.
    pub fn ada_prelu(&mut self, x: Var, delta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape.first().copied().unwrap_or(1);
        if self.value(delta).numel() != c {
            return Err(Error::shape(
                "ada_prelu",
                format!("delta has {} elements for {c} channels", self.value(delta).numel()),
            ));
        }
        let xv = self.value(x).clone();
        let dv = self.data(delta).to_vec();
        let per = xv.numel() / c;
        let y = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| ada_prelu(v, dv[i / per]))
            .collect();
        let out = Tensor::new(&shape, y)?;
        self.push("ada_prelu", out, &[x, delta], move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0; g.len()]);
            let mut gd = needs[1].then(|| vec![0.0; c]);
            for (i, (&gv, &v)) in g.iter().zip(xv.data()).enumerate() {
                let ch = i / per;
                let (dx, dd) = ada_prelu_grad(v, dv[ch]);
                if let Some(gx) = gx.as_mut() {
                    gx[i] = gv * dx;
                }
                if let Some(gd) = gd.as_mut() {
                    gd[ch] += gv * dd;
                }
            }
            vec![gx, gd]
        })
    }

    /// Gaussian smoothing along the last axis with bandwidth
    /// `softplus(rho)`, then [`Tape::ada_prelu`].
    pub fn prak(&mut self, x: Var, delta: Var, rho: Var) -> Result<Var> {
        let sigma = self.softplus(rho)?;
        let s = self.gaussian_smooth(x, sigma)?;
        self.ada_prelu(s, delta)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    #[default]
    Prak,
    AdaPrelu,
    PeriodicRelu,
    Relu,
    Silu,
    Sigmoid,
    Tanh,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 7] = [
        ActivationKind::Prak,
        ActivationKind::AdaPrelu,
        ActivationKind::PeriodicRelu,
        ActivationKind::Relu,
        ActivationKind::Silu,
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Prak => "prak",
            ActivationKind::AdaPrelu => "ada-prelu",
            ActivationKind::PeriodicRelu => "periodic-relu",
            ActivationKind::Relu => "relu",
            ActivationKind::Silu => "silu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid("activation", format!("unknown kind `{s}`")))
    }
}

/// Stateless elementwise baseline by kind.
pub fn baseline_activation(tape: &mut Tape, kind: ActivationKind, x: Var) -> Result<Var> {
    match kind {
        ActivationKind::Relu => tape.relu(x),
        ActivationKind::Silu => tape.silu(x),
        ActivationKind::Sigmoid => tape.sigmoid(x),
        ActivationKind::Tanh => tape.tanh(x),
        ActivationKind::PeriodicRelu => tape.periodic_relu(x),
        other => Err(Error::invalid("activation", format!("`{other}` has parameters"))),
    }
}

/// An activation layer over `[C, ...]` features, owning the per-channel
/// shift and (for PRAK) the smoothing bandwidth.
#[derive(Clone, Debug)]
pub struct Activation {
    pub kind: ActivationKind,
    delta: Option<ParamId>,
    rho: Option<ParamId>,
}

impl Activation {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, kind: ActivationKind, channels: usize) -> Result<Self> {
        let delta = matches!(kind, ActivationKind::Prak | ActivationKind::AdaPrelu)
            .then(|| store.add_init(format!("{prefix}/delta"), &[channels], Init::Const(DELTA_INIT), rng))
            .transpose()?;
        let rho = (kind == ActivationKind::Prak)
            .then(|| store.add_init(format!("{prefix}/rho"), &[1], Init::Const(rho_for_sigma(SIGMA_INIT)), rng))
            .transpose()?;
        Ok(Self { kind, delta, rho })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match (self.kind, self.delta, self.rho) {
            (ActivationKind::Prak, Some(d), Some(r)) => tape.prak(x, p[d], p[r]),
            (ActivationKind::AdaPrelu, Some(d), _) => tape.ada_prelu(x, p[d]),
            (kind, _, _) => baseline_activation(tape, kind, x),
        }
    }
}
