use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    /// Normalizes to zero mean and unit (population) variance along `axis`,
    /// then applies per-position `gain` and `bias` (both with the extent of
    /// `axis`).
    pub fn layer_norm(&mut self, x: Var, axis: usize, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "epsilon must be positive"));
        }
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("layer_norm", format!("axis {axis} of {shape:?}")));
        }
        let n = shape[axis];
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias need {n} elements for axis {axis} of {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let (xd, gd, bd) = (self.data(x), self.data(gain).to_vec(), self.data(bias));
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut y = vec![0.0; xd.len()];
        let at = move |o: usize, a: usize, i: usize| (o * n + a) * inner + i;
        for o in 0..outer {
            for i in 0..inner {
                let mean = (0..n).map(|a| xd[at(o, a, i)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|a| (xd[at(o, a, i)] - mean).powi(2)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for a in 0..n {
                    let idx = at(o, a, i);
                    xhat[idx] = (xd[idx] - mean) * is;
                    y[idx] = xhat[idx] * gd[a] + bd[a];
                }
            }
        }
        let out = Tensor::new(&shape, y)?;
        self.push("layer_norm", out, &[x, gain, bias], move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0; g.len()]);
            let mut gg = needs[1].then(|| vec![0.0; n]);
            let mut gb = needs[2].then(|| vec![0.0; n]);
            let nf = n as f64;
            for o in 0..outer {
                for i in 0..inner {
                    let mut sum_gh = 0.0;
                    let mut sum_gh_xh = 0.0;
                    for a in 0..n {
                        let idx = at(o, a, i);
                        let gh = g[idx] * gd[a];
                        sum_gh += gh;
                        sum_gh_xh += gh * xhat[idx];
                        if let Some(gg) = gg.as_mut() {
                            gg[a] += g[idx] * xhat[idx];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[a] += g[idx];
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        let is = inv_std[o * inner + i];
                        for a in 0..n {
                            let idx = at(o, a, i);
                            let gh = g[idx] * gd[a];
                            gx[idx] = is / nf * (nf * gh - sum_gh - xhat[idx] * sum_gh_xh);
                        }
                    }
                }
            }
            vec![gx, gg, gb]
        })
    }

    /// Affine map `W x + b` with `W: [m, n]`; `x` may have any shape with `n`
    /// elements (it is read flat). Output shape is `[m]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let n = self.value(x).numel();
        if ws.len() != 2 || ws[1] != n {
            return Err(Error::shape("dense", format!("W {ws:?} with input of {n} elements")));
        }
        let m = ws[0];
        if let Some(b) = b {
            if self.value(b).numel() != m {
                return Err(Error::shape("dense", format!("bias needs {m} elements")));
            }
        }
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut y: Vec<f64> = match b {
            Some(b) => self.data(b).to_vec(),
            None => vec![0.0; m],
        };
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &wv.data()[r * n..(r + 1) * n];
            *yr += row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        let parents: Vec<Var> = [x, w].into_iter().chain(b).collect();
        let out = Tensor::new(&[m], y)?;
        self.push("dense", out, &parents, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; n];
                for (r, &gr) in g.iter().enumerate() {
                    let row = &wv.data()[r * n..(r + 1) * n];
                    gx.iter_mut().zip(row).for_each(|(a, w)| *a += gr * w);
                }
                gx
            });
            let gw = needs[1].then(|| {
                let mut gw = Vec::with_capacity(m * n);
                for &gr in g {
                    gw.extend(xv.data().iter().map(|xv| gr * xv));
                }
                gw
            });
            let mut out = vec![gx, gw];
            if needs.len() > 2 {
                out.push(needs[2].then(|| g.to_vec()));
            }
            out
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln(values: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let n = values.len();
        let x = tape.constant(Tensor::new(&[n], values.to_vec()).unwrap());
        let g = tape.constant(Tensor::full(&[n], 1.0));
        let b = tape.constant(Tensor::zeros(&[n]));
        let y = tape.layer_norm(x, 0, g, b, LAYER_NORM_EPS).unwrap();
        tape.data(y).to_vec()
    }

    #[test]
    fn constant_vector_normalizes_to_zero() {
        assert!(ln(&[3.0; 5]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_vector() {
        let y = ln(&[1.0, 3.0]);
        assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 1.0).abs() < 1e-4, "{y:?}");
    }

    #[test]
    fn normalizes_along_requested_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![1., 2., 3., 10., 20., 30.]).unwrap());
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, 0, g, b, LAYER_NORM_EPS).unwrap();
        let d = tape.data(y);
        for col in 0..3 {
            assert!((d[col] + d[3 + col]).abs() < 1e-12);
            assert!(d[col] < 0.0);
        }
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![2.0, 3.0]));
        let w = tape.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![1.0]));
        let y = tape.dense(x, w, Some(b)).unwrap();
        assert_eq!(tape.data(y), &[6.0]);

        let eye = tape.constant(Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap());
        let y = tape.dense(x, eye, None).unwrap();
        assert_eq!(tape.data(y), &[2.0, 3.0]);

        let zw = tape.constant(Tensor::zeros(&[3, 2]));
        let b3 = tape.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let y = tape.dense(x, zw, Some(b3)).unwrap();
        assert_eq!(tape.data(y), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn dense_dimension_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![2.0, 3.0, 4.0]));
        let w = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(tape.dense(x, w, None).is_err());
    }
}
