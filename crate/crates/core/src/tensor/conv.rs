//! Convolution and pooling primitives over `[C, L]` and `[C, H, W]` maps.
//!
//! All convolutions are cross-correlations with explicit zero padding:
//! `y[o] = sum_j w[j] * x[o * stride + j * dilation - padding]`.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dOpts {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for Conv1dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }
}

impl Conv1dOpts {
    pub fn padded(padding: usize) -> Self {
        Self {
            padding,
            ..Self::default()
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub(crate) fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::invalid(op, "stride and dilation must be >= 1"));
        }
        Ok(())
    }

    /// Output length for input length `len` and kernel size `k`, `None` when
    /// the dilated kernel does not fit.
    pub fn output_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
        }
    }
}

impl Conv2dOpts {
    pub fn padded(ph: usize, pw: usize) -> Self {
        Self {
            padding: (ph, pw),
            ..Self::default()
        }
    }

    pub(crate) fn validate(&self, op: &'static str) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::invalid(op, "stride must be >= 1"));
        }
        Ok(())
    }

    pub fn output_dims(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        (ph >= kh && pw >= kw).then(|| {
            (
                (ph - kh) / self.stride.0 + 1,
                (pw - kw) / self.stride.1 + 1,
            )
        })
    }
}

/// Output indices `o` in `[lo, hi)` for which `o * stride + off` lands in
/// `[0, len_in)`.
pub(crate) fn valid_range(len_in: usize, len_out: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let last = len_in as isize - 1 - off;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let lo = lo.max(0) as usize;
    let hi = (hi as usize).min(len_out);
    (lo, hi.max(lo))
}

fn check_bias(tape: &Tape, op: &'static str, b: Option<Var>, c_out: usize) -> Result<()> {
    if let Some(b) = b {
        if tape.value(b).numel() != c_out {
            return Err(Error::shape(
                op,
                format!("bias has {} elements, need {c_out}", tape.value(b).numel()),
            ));
        }
    }
    Ok(())
}

impl Tape {
    /// `x: [C_in, L]`, `w: [C_out, C_in, k]`, optional `b: [C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv1dOpts) -> Result<Var> {
        opts.validate("conv1d")?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[0] {
            return Err(Error::shape("conv1d", format!("x {xs:?}, w {ws:?}")));
        }
        let (c_in, len) = (xs[0], xs[1]);
        let (c_out, k) = (ws[0], ws[2]);
        check_bias(self, "conv1d", b, c_out)?;
        let lo = opts
            .output_len(len, k)
            .ok_or_else(|| Error::shape("conv1d", format!("kernel {k} longer than input {len}")))?;

        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut y = vec![0.0; c_out * lo];
        if let Some(b) = b {
            for (oc, &bv) in self.data(b).iter().enumerate() {
                y[oc * lo..(oc + 1) * lo].iter_mut().for_each(|v| *v = bv);
            }
        }
        let (s, d, p) = (opts.stride, opts.dilation, opts.padding as isize);
        let offs: Vec<(isize, usize, usize)> = (0..k)
            .map(|j| {
                let off = (j * d) as isize - p;
                let (a, bnd) = valid_range(len, lo, s, off);
                (off, a, bnd)
            })
            .collect();
        {
            let (xd, wd) = (xv.data(), wv.data());
            for oc in 0..c_out {
                let yrow = &mut y[oc * lo..(oc + 1) * lo];
                for ic in 0..c_in {
                    let xrow = &xd[ic * len..(ic + 1) * len];
                    for (j, &(off, a, bnd)) in offs.iter().enumerate() {
                        let wj = wd[(oc * c_in + ic) * k + j];
                        for o in a..bnd {
                            yrow[o] += wj * xrow[(o * s).wrapping_add(off as usize)];
                        }
                    }
                }
            }
        }
        let parents: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        let out = Tensor::new(&[c_out, lo], y)?;
        self.push("conv1d", out, &parents, move |g, needs| {
            let (xd, wd) = (xv.data(), wv.data());
            let mut gx = needs[0].then(|| vec![0.0; c_in * len]);
            let mut gw = needs[1].then(|| vec![0.0; c_out * c_in * k]);
            for oc in 0..c_out {
                let grow = &g[oc * lo..(oc + 1) * lo];
                for ic in 0..c_in {
                    for (j, &(off, a, bnd)) in offs.iter().enumerate() {
                        let widx = (oc * c_in + ic) * k + j;
                        if let Some(gx) = gx.as_mut() {
                            let wj = wd[widx];
                            let gxrow = &mut gx[ic * len..(ic + 1) * len];
                            for o in a..bnd {
                                gxrow[(o * s).wrapping_add(off as usize)] += wj * grow[o];
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            let xrow = &xd[ic * len..(ic + 1) * len];
                            let mut acc = 0.0;
                            for o in a..bnd {
                                acc += grow[o] * xrow[(o * s).wrapping_add(off as usize)];
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
            let mut out = vec![gx, gw];
            if needs.len() > 2 {
                out.push(needs[2].then(|| {
                    (0..c_out)
                        .map(|oc| g[oc * lo..(oc + 1) * lo].iter().sum())
                        .collect()
                }));
            }
            out
        })
    }

    /// `x: [C_in, H, W]`, `w: [C_out, C_in, kH, kW]`, optional `b: [C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        opts.validate("conv2d")?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(Error::shape("conv2d", format!("x {xs:?}, w {ws:?}")));
        }
        let (c_in, h, wd_) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        check_bias(self, "conv2d", b, c_out)?;
        let (ho, wo) = opts
            .output_dims(h, wd_, kh, kw)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {kh}x{kw} larger than {h}x{wd_}")))?;
        let (sh, sw) = opts.stride;
        let (ph, pw) = (opts.padding.0 as isize, opts.padding.1 as isize);
        let rows: Vec<(isize, usize, usize)> = (0..kh)
            .map(|i| {
                let off = i as isize - ph;
                let (a, bnd) = valid_range(h, ho, sh, off);
                (off, a, bnd)
            })
            .collect();
        let cols: Vec<(isize, usize, usize)> = (0..kw)
            .map(|j| {
                let off = j as isize - pw;
                let (a, bnd) = valid_range(wd_, wo, sw, off);
                (off, a, bnd)
            })
            .collect();

        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let plane_in = h * wd_;
        let plane_out = ho * wo;
        let mut y = vec![0.0; c_out * plane_out];
        if let Some(b) = b {
            for (oc, &bv) in self.data(b).iter().enumerate() {
                y[oc * plane_out..(oc + 1) * plane_out]
                    .iter_mut()
                    .for_each(|v| *v = bv);
            }
        }
        {
            let (xd, wdat) = (xv.data(), wv.data());
            for oc in 0..c_out {
                for ic in 0..c_in {
                    let xp = &xd[ic * plane_in..(ic + 1) * plane_in];
                    for (i, &(ro, ra, rb)) in rows.iter().enumerate() {
                        for (j, &(co, ca, cb)) in cols.iter().enumerate() {
                            let wij = wdat[((oc * c_in + ic) * kh + i) * kw + j];
                            if wij == 0.0 {
                                continue;
                            }
                            for oy in ra..rb {
                                let iy = (oy * sh).wrapping_add(ro as usize);
                                let yrow = &mut y[oc * plane_out + oy * wo..oc * plane_out + (oy + 1) * wo];
                                let xrow = &xp[iy * wd_..(iy + 1) * wd_];
                                for ox in ca..cb {
                                    yrow[ox] += wij * xrow[(ox * sw).wrapping_add(co as usize)];
                                }
                            }
                        }
                    }
                }
            }
        }
        let parents: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        let out = Tensor::new(&[c_out, ho, wo], y)?;
        self.push("conv2d", out, &parents, move |g, needs| {
            let (xd, wdat) = (xv.data(), wv.data());
            let mut gx = needs[0].then(|| vec![0.0; c_in * plane_in]);
            let mut gw = needs[1].then(|| vec![0.0; c_out * c_in * kh * kw]);
            for oc in 0..c_out {
                for ic in 0..c_in {
                    for (i, &(ro, ra, rb)) in rows.iter().enumerate() {
                        for (j, &(co, ca, cb)) in cols.iter().enumerate() {
                            let widx = ((oc * c_in + ic) * kh + i) * kw + j;
                            let wij = wdat[widx];
                            let mut acc = 0.0;
                            for oy in ra..rb {
                                let iy = (oy * sh).wrapping_add(ro as usize);
                                let grow = &g[oc * plane_out + oy * wo..oc * plane_out + (oy + 1) * wo];
                                let base = ic * plane_in + iy * wd_;
                                if let Some(gx) = gx.as_mut() {
                                    for ox in ca..cb {
                                        gx[base + (ox * sw).wrapping_add(co as usize)] += wij * grow[ox];
                                    }
                                }
                                if gw.is_some() {
                                    for ox in ca..cb {
                                        acc += grow[ox] * xd[base + (ox * sw).wrapping_add(co as usize)];
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
            let mut out = vec![gx, gw];
            if needs.len() > 2 {
                out.push(needs[2].then(|| {
                    (0..c_out)
                        .map(|oc| g[oc * plane_out..(oc + 1) * plane_out].iter().sum())
                        .collect()
                }));
            }
            out
        })
    }

    /// Adjoint of an unpadded, undilated [`Tape::conv1d`] with the same
    /// weights. `x: [C_in, L]`, `w: [C_in, C_out, k]`; output length is
    /// `(L - 1) * stride + k`.
    pub fn transpose_conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("transpose_conv1d", "stride must be >= 1"));
        }
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 3 || ws[0] != xs[0] {
            return Err(Error::shape("transpose_conv1d", format!("x {xs:?}, w {ws:?}")));
        }
        let (c_in, len) = (xs[0], xs[1]);
        let (c_out, k) = (ws[1], ws[2]);
        check_bias(self, "transpose_conv1d", b, c_out)?;
        let lo = (len - 1) * stride + k;
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let mut y = vec![0.0; c_out * lo];
        if let Some(b) = b {
            for (oc, &bv) in self.data(b).iter().enumerate() {
                y[oc * lo..(oc + 1) * lo].iter_mut().for_each(|v| *v = bv);
            }
        }
        {
            let (xd, wd) = (xv.data(), wv.data());
            for ic in 0..c_in {
                let xrow = &xd[ic * len..(ic + 1) * len];
                for oc in 0..c_out {
                    let yrow = &mut y[oc * lo..(oc + 1) * lo];
                    for j in 0..k {
                        let wj = wd[(ic * c_out + oc) * k + j];
                        for (i, &xv) in xrow.iter().enumerate() {
                            yrow[i * stride + j] += wj * xv;
                        }
                    }
                }
            }
        }
        let parents: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        let out = Tensor::new(&[c_out, lo], y)?;
        self.push("transpose_conv1d", out, &parents, move |g, needs| {
            let (xd, wd) = (xv.data(), wv.data());
            let mut gx = needs[0].then(|| vec![0.0; c_in * len]);
            let mut gw = needs[1].then(|| vec![0.0; c_in * c_out * k]);
            for ic in 0..c_in {
                for oc in 0..c_out {
                    let grow = &g[oc * lo..(oc + 1) * lo];
                    for j in 0..k {
                        let widx = (ic * c_out + oc) * k + j;
                        if let Some(gx) = gx.as_mut() {
                            let wj = wd[widx];
                            for i in 0..len {
                                gx[ic * len + i] += wj * grow[i * stride + j];
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            let mut acc = 0.0;
                            for i in 0..len {
                                acc += xd[ic * len + i] * grow[i * stride + j];
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
            let mut out = vec![gx, gw];
            if needs.len() > 2 {
                out.push(needs[2].then(|| {
                    (0..c_out)
                        .map(|oc| g[oc * lo..(oc + 1) * lo].iter().sum())
                        .collect()
                }));
            }
            out
        })
    }

    /// Window mean over the last axis of `[C, L]`, no padding.
    pub fn avg_pool1d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("avg_pool1d", format!("expected [C, L], got {xs:?}")));
        }
        if k == 0 || stride == 0 {
            return Err(Error::invalid("avg_pool1d", "kernel and stride must be >= 1"));
        }
        let (c, len) = (xs[0], xs[1]);
        if k > len {
            return Err(Error::shape("avg_pool1d", format!("window {k} longer than input {len}")));
        }
        let lo = (len - k) / stride + 1;
        let xd = self.data(x);
        let inv = 1.0 / k as f64;
        let mut y = Vec::with_capacity(c * lo);
        for ch in 0..c {
            let row = &xd[ch * len..(ch + 1) * len];
            y.extend((0..lo).map(|o| row[o * stride..o * stride + k].iter().sum::<f64>() * inv));
        }
        let out = Tensor::new(&[c, lo], y)?;
        self.push("avg_pool1d", out, &[x], move |g, _| {
            let mut gx = vec![0.0; c * len];
            for ch in 0..c {
                for o in 0..lo {
                    let gv = g[ch * lo + o] * inv;
                    gx[ch * len + o * stride..ch * len + o * stride + k]
                        .iter_mut()
                        .for_each(|v| *v += gv);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Square-window max over the last two axes of `[C, H, W]`, no padding.
    /// Ties route the gradient to the first maximal element.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("max_pool2d", format!("expected [C, H, W], got {xs:?}")));
        }
        if k == 0 || stride == 0 {
            return Err(Error::invalid("max_pool2d", "kernel and stride must be >= 1"));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if k > h || k > w {
            return Err(Error::shape("max_pool2d", format!("window {k} larger than {h}x{w}")));
        }
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let xd = self.data(x);
        let mut y = Vec::with_capacity(c * ho * wo);
        let mut arg = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
                            if xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    y.push(best);
                    arg.push(best_i);
                }
            }
        }
        let n = c * h * w;
        let out = Tensor::new(&[c, ho, wo], y)?;
        self.push("max_pool2d", out, &[x], move |g, _| {
            let mut gx = vec![0.0; n];
            for (&i, &gv) in arg.iter().zip(g) {
                gx[i] += gv;
            }
            vec![Some(gx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn conv1d_values(x: &[f64], w: &[f64], opts: Conv1dOpts) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(t(&[1, x.len()], x));
        let wv = tape.constant(t(&[1, 1, w.len()], w));
        let y = tape.conv1d(xv, wv, None, opts).unwrap();
        tape.data(y).to_vec()
    }

    #[test]
    fn conv1d_identity_kernel() {
        assert_eq!(conv1d_values(&[1., 2., 3.], &[0., 1., 0.], Conv1dOpts::default()), vec![2.0]);
    }

    #[test]
    fn conv1d_difference_kernel() {
        assert_eq!(conv1d_values(&[1., 2., 3.], &[1., 0., -1.], Conv1dOpts::default()), vec![-2.0]);
    }

    #[test]
    fn conv1d_zero_input_zero_output() {
        let y = conv1d_values(&[0.0; 9], &[0.3, -1.2, 2.0], Conv1dOpts::padded(1));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_output_length_formula() {
        for (len, k, s, d, p) in [(10, 3, 1, 1, 0), (10, 3, 2, 1, 1), (17, 5, 3, 2, 2), (5, 5, 1, 1, 0)] {
            let opts = Conv1dOpts { stride: s, dilation: d, padding: p };
            let expected = (len + 2 * p - d * (k - 1) - 1) / s + 1;
            let y = conv1d_values(&vec![1.0; len], &vec![1.0; k], opts);
            assert_eq!(y.len(), expected, "len={len} k={k} s={s} d={d} p={p}");
        }
    }

    #[test]
    fn conv1d_rejects_bad_args() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[1.0; 4]));
        let w = tape.constant(t(&[1, 2, 3], &[1.0; 6]));
        assert!(tape.conv1d(x, w, None, Conv1dOpts::default()).is_err());
        let w = tape.constant(t(&[1, 1, 3], &[1.0; 3]));
        let bad = Conv1dOpts { stride: 0, ..Conv1dOpts::default() };
        assert!(tape.conv1d(x, w, None, bad).is_err());
    }

    #[test]
    fn conv2d_identity_kernel_preserves_map() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let x = tape.constant(t(&[1, 3, 4], &data));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let y = tape.conv2d(x, w, None, Conv2dOpts::padded(1, 1)).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 4]);
        assert_eq!(tape.data(y), &data[..]);
    }

    #[test]
    fn conv2d_ones_kernel_sums() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1., 2., 3., 4.]));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1.0; 4]));
        let y = tape.conv2d(x, w, None, Conv2dOpts::default()).unwrap();
        assert_eq!(tape.data(y), &[10.0]);
    }

    #[test]
    fn conv2d_zero_weights() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3, 3], &[1.5; 18]));
        let w = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        let y = tape.conv2d(x, w, None, Conv2dOpts::padded(1, 1)).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transpose_conv1d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1], &[1.0]));
        let w = tape.constant(t(&[1, 1, 3], &[1., 2., 3.]));
        let y = tape.transpose_conv1d(x, w, None, 1).unwrap();
        assert_eq!(tape.data(y), &[1., 2., 3.]);

        let x = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let w = tape.constant(t(&[1, 1, 1], &[1.0]));
        let y = tape.transpose_conv1d(x, w, None, 2).unwrap();
        assert_eq!(tape.data(y), &[1., 0., 1.]);
    }

    #[test]
    fn avg_pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 4], &[2., 4., 6., 8.]));
        let y = tape.avg_pool1d(x, 2, 2).unwrap();
        assert_eq!(tape.data(y), &[3.0, 7.0]);
        let y = tape.avg_pool1d(x, 1, 1).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
        assert!(tape.avg_pool1d(x, 5, 1).is_err());
    }

    #[test]
    fn max_pool_constant_map() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 4, 6], 3.25));
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 3]);
        assert!(tape.data(y).iter().all(|&v| v == 3.25));
        assert!(tape.max_pool2d(x, 5, 1).is_err());
    }
}
