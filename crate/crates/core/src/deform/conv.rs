use crate::error::{Error, Result};
use crate::tensor::{Conv1dOpts, Conv2dOpts, Tape, Tensor, Var};

use super::sample::Stencil;

/// `y[m, n] += sum_k a[m, k] b[k, n]`.
fn matmul_acc(a: &[f64], b: &[f64], y: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let yr = &mut y[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[kk * n..(kk + 1) * n];
            yr.iter_mut().zip(br).for_each(|(y, &b)| *y += av * b);
        }
    }
}

struct Geometry {
    c_in: usize,
    c_out: usize,
    spatial: usize,
    taps: usize,
    out: usize,
    dims: usize,
}

fn check_bias(tape: &Tape, op: &'static str, b: Option<Var>, c_out: usize) -> Result<()> {
    match b {
        Some(b) if tape.value(b).numel() != c_out => Err(Error::shape(op, format!("bias needs {c_out} elements"))),
        _ => Ok(()),
    }
}

impl Tape {
    /// Convolution whose taps read `x` at displaced positions. `stencils`
    /// holds one interpolation stencil per `(tap, output position)`.
    #[allow(clippy::too_many_arguments)]
    fn deform_core(
        &mut self,
        op: &'static str,
        x: Var,
        offsets: Var,
        w: Var,
        b: Option<Var>,
        geo: Geometry,
        stencils: Vec<Stencil>,
        out_shape: &[usize],
    ) -> Result<Var> {
        let Geometry {
            c_in,
            c_out,
            spatial,
            taps,
            out,
            dims,
        } = geo;
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let ck = c_in * taps;
        let mut cols = vec![0.0; ck * out];
        {
            let xd = xv.data();
            for c in 0..c_in {
                let xc = &xd[c * spatial..(c + 1) * spatial];
                for t in 0..taps {
                    let row = &mut cols[(c * taps + t) * out..(c * taps + t + 1) * out];
                    for (o, v) in row.iter_mut().enumerate() {
                        *v = stencils[t * out + o].corners().iter().map(|k| k.w * xc[k.idx]).sum();
                    }
                }
            }
        }
        let mut y = vec![0.0; c_out * out];
        if let Some(b) = b {
            for (oc, &bv) in self.data(b).iter().enumerate() {
                y[oc * out..(oc + 1) * out].iter_mut().for_each(|v| *v = bv);
            }
        }
        matmul_acc(wv.data(), &cols, &mut y, c_out, ck, out);
        let parents: Vec<Var> = [x, offsets, w].into_iter().chain(b).collect();
        let value = Tensor::new(out_shape, y)?;
        self.push(op, value, &parents, move |g, needs| {
            let wd = wv.data();
            let xd = xv.data();
            let need_cols_grad = needs[0] || needs[1];
            let gcols = need_cols_grad.then(|| {
                // gcols = W^T g
                let mut gc = vec![0.0; ck * out];
                for oc in 0..c_out {
                    let gr = &g[oc * out..(oc + 1) * out];
                    for (j, &wv) in wd[oc * ck..(oc + 1) * ck].iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        gc[j * out..(j + 1) * out].iter_mut().zip(gr).for_each(|(a, &b)| *a += wv * b);
                    }
                }
                gc
            });
            let mut gx = needs[0].then(|| vec![0.0; c_in * spatial]);
            let mut goff = needs[1].then(|| vec![0.0; taps * dims * out]);
            if let Some(gc) = &gcols {
                for c in 0..c_in {
                    let xc = &xd[c * spatial..(c + 1) * spatial];
                    for t in 0..taps {
                        let grow = &gc[(c * taps + t) * out..(c * taps + t + 1) * out];
                        for (o, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let st = &stencils[t * out + o];
                            if let Some(gx) = gx.as_mut() {
                                for k in st.corners() {
                                    gx[c * spatial + k.idx] += gv * k.w;
                                }
                            }
                            if let Some(goff) = goff.as_mut() {
                                for d in 0..dims {
                                    let s: f64 = st.corners().iter().map(|k| k.dw[d] * xc[k.idx]).sum();
                                    goff[(t * dims + d) * out + o] += gv * s;
                                }
                            }
                        }
                    }
                }
            }
            let gw = needs[2].then(|| {
                let mut gw = vec![0.0; c_out * ck];
                for oc in 0..c_out {
                    let gr = &g[oc * out..(oc + 1) * out];
                    for j in 0..ck {
                        let cr = &cols[j * out..(j + 1) * out];
                        gw[oc * ck + j] = gr.iter().zip(cr).map(|(a, b)| a * b).sum();
                    }
                }
                gw
            });
            let mut res = vec![gx, goff, gw];
            if needs.len() > 3 {
                res.push(needs[3].then(|| (0..c_out).map(|oc| g[oc * out..(oc + 1) * out].iter().sum()).collect()));
            }
            res
        })
    }

    /// Deformable 1D convolution with an explicit offset field.
    /// `x: [C_in, L]`, `offsets: [k, L_out]`, `w: [C_out, C_in, k]`. Tap `n`
    /// of output `o` reads `x` at `o*stride + n*dilation - padding + offset`.
    pub fn deform_conv1d(&mut self, x: Var, offsets: Var, w: Var, b: Option<Var>, opts: Conv1dOpts) -> Result<Var> {
        if opts.stride == 0 || opts.dilation == 0 {
            return Err(Error::invalid("deform_conv1d", "stride and dilation must be >= 1"));
        }
        let (xs, ws, os) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(offsets).to_vec());
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[0] {
            return Err(Error::shape("deform_conv1d", format!("x {xs:?}, w {ws:?}")));
        }
        let (c_in, len, c_out, k) = (xs[0], xs[1], ws[0], ws[2]);
        check_bias(self, "deform_conv1d", b, c_out)?;
        let lo = opts
            .output_len(len, k)
            .ok_or_else(|| Error::shape("deform_conv1d", format!("kernel {k} longer than input {len}")))?;
        if os != [k, lo] {
            return Err(Error::shape("deform_conv1d", format!("offsets {os:?}, need [{k}, {lo}]")));
        }
        let od = self.data(offsets);
        let mut stencils = Vec::with_capacity(k * lo);
        for n in 0..k {
            for o in 0..lo {
                let base = (o * opts.stride + n * opts.dilation) as f64 - opts.padding as f64;
                stencils.push(Stencil::linear(len, base + od[n * lo + o]));
            }
        }
        let geo = Geometry {
            c_in,
            c_out,
            spatial: len,
            taps: k,
            out: lo,
            dims: 1,
        };
        self.deform_core("deform_conv1d", x, offsets, w, b, geo, stencils, &[c_out, lo])
    }

    /// Deformable 2D convolution. `x: [C_in, H, W]`,
    /// `offsets: [2 kH kW, H_out, W_out]` with rows `(dy, dx)` per tap in
    /// row-major tap order, `w: [C_out, C_in, kH, kW]`.
    pub fn deform_conv2d(&mut self, x: Var, offsets: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        if opts.stride.0 == 0 || opts.stride.1 == 0 {
            return Err(Error::invalid("deform_conv2d", "stride must be >= 1"));
        }
        let (xs, ws, os) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(offsets).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::shape("deform_conv2d", format!("x {xs:?}, w {ws:?}")));
        }
        let (c_in, h, wd, c_out, kh, kw) = (xs[0], xs[1], xs[2], ws[0], ws[2], ws[3]);
        check_bias(self, "deform_conv2d", b, c_out)?;
        let (ho, wo) = opts
            .output_dims(h, wd, kh, kw)
            .ok_or_else(|| Error::shape("deform_conv2d", format!("kernel {kh}x{kw} larger than {h}x{wd}")))?;
        let taps = kh * kw;
        if os != [2 * taps, ho, wo] {
            return Err(Error::shape(
                "deform_conv2d",
                format!("offsets {os:?}, need [{}, {ho}, {wo}]", 2 * taps),
            ));
        }
        let out = ho * wo;
        let od = self.data(offsets);
        let mut stencils = Vec::with_capacity(taps * out);
        for i in 0..kh {
            for j in 0..kw {
                let t = i * kw + j;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let o = oy * wo + ox;
                        let py = (oy * opts.stride.0 + i) as f64 - opts.padding.0 as f64 + od[2 * t * out + o];
                        let px = (ox * opts.stride.1 + j) as f64 - opts.padding.1 as f64 + od[(2 * t + 1) * out + o];
                        stencils.push(Stencil::bilinear(h, wd, py, px));
                    }
                }
            }
        }
        let geo = Geometry {
            c_in,
            c_out,
            spatial: h * wd,
            taps,
            out,
            dims: 2,
        };
        self.deform_core("deform_conv2d", x, offsets, w, b, geo, stencils, &[c_out, ho, wo])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::sample::{bilinear_sample, linear_sample};

    fn t(tape: &mut Tape, shape: &[usize], f: impl Fn(usize) -> f64) -> Var {
        let n = shape.iter().product();
        tape.constant(Tensor::new(shape, (0..n).map(f).collect()).unwrap())
    }

    #[test]
    fn constant_offset_shift_1d() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[2, 9], |i| (i as f64 * 0.77).sin());
        let w = t(&mut tape, &[3, 2, 3], |i| (i as f64 * 0.31).cos());
        let opts = Conv1dOpts::padded(1);
        let lo = 9;
        for shift in [1.0, 0.5, -0.25] {
            let off = tape.constant(Tensor::full(&[3, lo], shift));
            let y = tape.deform_conv1d(x, off, w, None, opts).unwrap();
            let xd = tape.data(x).to_vec();
            let wd = tape.data(w).to_vec();
            for oc in 0..3 {
                for o in 0..lo {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for n in 0..3 {
                            let p = o as f64 + n as f64 - 1.0 + shift;
                            acc += wd[(oc * 2 + c) * 3 + n] * linear_sample(&xd[c * 9..(c + 1) * 9], p);
                        }
                    }
                    assert!((tape.data(y)[oc * lo + o] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn half_offset_2d_matches_bilinear() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1, 3, 3], |i| (i + 1) as f64);
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let off = tape.constant(Tensor::full(&[2, 3, 3], 0.5));
        let y = tape.deform_conv2d(x, off, w, None, Conv2dOpts::default()).unwrap();
        let xd: Vec<f64> = (1..=9).map(f64::from).collect();
        for oy in 0..3 {
            for ox in 0..3 {
                let e = bilinear_sample(&xd, 3, 3, oy as f64 + 0.5, ox as f64 + 0.5);
                assert_eq!(tape.data(y)[oy * 3 + ox], e);
            }
        }
        assert_eq!(tape.data(y)[0], 3.0);
    }

    #[test]
    fn offset_shape_mismatch() {
        let mut tape = Tape::new();
        let x = t(&mut tape, &[1, 8], |i| i as f64);
        let w = tape.constant(Tensor::full(&[1, 1, 3], 1.0));
        let off = tape.constant(Tensor::zeros(&[2, 8]));
        assert!(tape.deform_conv1d(x, off, w, None, Conv1dOpts::padded(1)).is_err());
    }
}
