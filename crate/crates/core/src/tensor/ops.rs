//! Elementwise, reduction and indexing primitives.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub(crate) fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let xv = self.value(x).clone();
        let out: Vec<f64> = xv.data().iter().map(|&v| f(v)).collect();
        let y = Tensor::new(xv.shape(), out)?;
        let yv = y.clone();
        self.push(op, y, &[x], move |g, _| {
            let gx = g
                .iter()
                .zip(xv.data().iter().zip(yv.data()))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let y = Tensor::new(av.shape(), out)?;
        self.push("add", y, &[a, b], |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.to_vec()),
            ]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", av, bv)?;
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let y = Tensor::new(av.shape(), out)?;
        self.push("sub", y, &[a, b], |g, needs| {
            vec![
                needs[0].then(|| g.to_vec()),
                needs[1].then(|| g.iter().map(|v| -v).collect()),
            ]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        same_shape("mul", &av, &bv)?;
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::new(av.shape(), out)?;
        self.push("mul", y, &[a, b], move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(bv.data()).map(|(g, b)| g * b).collect()),
                needs[1].then(|| g.iter().zip(av.data()).map(|(g, a)| g * a).collect()),
            ]
        })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| c * v, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, |_, _| 1.0)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, |x, _| 2.0 * x)
    }

    /// Subgradient `sign(x)`, zero at the origin.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, |_, y| y)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "silu",
            x,
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, softplus, |x, _| sigmoid(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel();
        let s = xv.data().iter().sum();
        self.push("sum", Tensor::scalar(s), &[x], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel();
        let s = xv.data().iter().sum::<f64>() / n as f64;
        self.push("mean", Tensor::scalar(s), &[x], move |g, _| {
            vec![Some(vec![g[0] / n as f64; n])]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        self.push("reshape", y, &[x], |g, _| vec![Some(g.to_vec())])
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut extents = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &e) in xs.iter().zip(&extents) {
                let d = self.data(x);
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let y = Tensor::new(&shape, out)?;
        self.push("concat", y, xs, move |g, needs| {
            let mut grads: Vec<Vec<f64>> = extents
                .iter()
                .map(|&e| Vec::with_capacity(outer * e * inner))
                .collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (gi, &e) in grads.iter_mut().zip(&extents) {
                    gi.extend_from_slice(&g[pos..pos + e * inner]);
                    pos += e * inner;
                }
            }
            grads
                .into_iter()
                .zip(needs)
                .map(|(gi, &n)| n.then_some(gi))
                .collect()
        })
    }

    /// Output element `i` is `x[indices[i]]`. The backward rule scatters and
    /// accumulates, so repeated indices are allowed.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of {n}")));
        }
        let out = indices.iter().map(|&i| xv.data()[i]).collect();
        let y = Tensor::new(shape, out)?;
        self.push("gather", y, &[x], move |g, _| {
            let mut gx = vec![0.0; n];
            for (&i, &gv) in indices.iter().zip(g) {
                gx[i] += gv;
            }
            vec![Some(gx)]
        })
    }

    /// Contiguous window `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * shape[axis] + a) * inner;
                idx.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, idx, &out_shape)
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("pad", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let new_ext = ext + before + after;
        let xv = self.value(x).clone();
        let mut out = vec![0.0; outer * new_ext * inner];
        for o in 0..outer {
            let src = &xv.data()[o * ext * inner..(o + 1) * ext * inner];
            let dst = (o * new_ext + before) * inner;
            out[dst..dst + ext * inner].copy_from_slice(src);
        }
        let mut out_shape = shape;
        out_shape[axis] = new_ext;
        let y = Tensor::new(&out_shape, out)?;
        self.push("pad", y, &[x], move |g, _| {
            let mut gx = Vec::with_capacity(outer * ext * inner);
            for o in 0..outer {
                let src = (o * new_ext + before) * inner;
                gx.extend_from_slice(&g[src..src + ext * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Repeats a `[W]` vector along a new trailing axis: `[W] -> [W, len]`.
    pub fn broadcast_time(&mut self, x: Var, len: usize) -> Result<Var> {
        let w = self.value(x).numel();
        let idx = (0..w).flat_map(|i| std::iter::repeat_n(i, len)).collect();
        self.gather(x, idx, &[w, len])
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp().ln_1p()
    }
}
