use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Boundaries of bin `i` of `k` over a span of `len` positions starting at
/// `start`.
pub fn bin_range(start: usize, len: usize, k: usize, i: usize) -> (usize, usize) {
    (start + i * len / k, start + (i + 1) * len / k)
}

fn bins(op: &'static str, start: usize, len: usize, k: usize, extent: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 {
        return Err(Error::invalid(op, "bin count must be >= 1"));
    }
    if start + len > extent {
        return Err(Error::invalid(op, format!("roi [{start}, {}) exceeds extent {extent}", start + len)));
    }
    let out: Vec<_> = (0..k).map(|i| bin_range(start, len, k, i)).collect();
    if out.iter().any(|(a, b)| a == b) {
        return Err(Error::invalid(op, format!("roi length {len} leaves an empty bin with {k} bins")));
    }
    Ok(out)
}

impl Tape {
    /// Output element `j` is the mean of `x` over `groups[j]`.
    fn group_mean(&mut self, op: &'static str, x: Var, groups: Vec<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let xd = self.data(x);
        let n = xd.len();
        let y = groups
            .iter()
            .map(|g| g.iter().map(|&i| xd[i]).sum::<f64>() / g.len() as f64)
            .collect();
        let out = Tensor::new(shape, y)?;
        self.push(op, out, &[x], move |g, _| {
            let mut gx = vec![0.0; n];
            for (grp, &gv) in groups.iter().zip(g) {
                let share = gv / grp.len() as f64;
                for &i in grp {
                    gx[i] += share;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Position-sensitive pooling of `x: [C, L]` over the region
    /// `[start, start + len)` into `k` bins. Bin `i` reads channel group `i`
    /// (channels `i*C/k .. (i+1)*C/k`); output is `[C/k, k]`.
    pub fn psroi_pool1d(&mut self, x: Var, roi: (usize, usize), k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("psroi_pool1d", format!("expected [C, L], got {xs:?}")));
        }
        let (c, l) = (xs[0], xs[1]);
        if k == 0 || c % k != 0 {
            return Err(Error::invalid("psroi_pool1d", format!("{c} channels not divisible by {k} bins")));
        }
        let bins = bins("psroi_pool1d", roi.0, roi.1, k, l)?;
        let g = c / k;
        let mut groups = Vec::with_capacity(g * k);
        for cc in 0..g {
            for (i, &(a, b)) in bins.iter().enumerate() {
                let ch = i * g + cc;
                groups.push((a..b).map(|p| ch * l + p).collect());
            }
        }
        self.group_mean("psroi_pool1d", x, groups, &[g, k])
    }

    /// 2D form over `x: [C, H, W]` with region `(y0, x0, h, w)` and `k x k`
    /// bins; bin `(i, j)` reads channel group `i*k + j`. Output `[C/k^2, k, k]`.
    pub fn psroi_pool2d(&mut self, x: Var, roi: (usize, usize, usize, usize), k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("psroi_pool2d", format!("expected [C, H, W], got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if k == 0 || c % (k * k) != 0 {
            return Err(Error::invalid(
                "psroi_pool2d",
                format!("{c} channels not divisible by {} bins", k * k),
            ));
        }
        let rows = bins("psroi_pool2d", roi.0, roi.2, k, h)?;
        let cols = bins("psroi_pool2d", roi.1, roi.3, k, w)?;
        let g = c / (k * k);
        let mut groups = Vec::with_capacity(g * k * k);
        for cc in 0..g {
            for (i, &(ra, rb)) in rows.iter().enumerate() {
                for (j, &(ca, cb)) in cols.iter().enumerate() {
                    let ch = (i * k + j) * g + cc;
                    let mut idx = Vec::with_capacity((rb - ra) * (cb - ca));
                    for r in ra..rb {
                        idx.extend((ca..cb).map(|q| (ch * h + r) * w + q));
                    }
                    groups.push(idx);
                }
            }
        }
        self.group_mean("psroi_pool2d", x, groups, &[g, k, k])
    }

    /// Full-sequence [`Tape::psroi_pool1d`] with each bin broadcast back over
    /// the positions it covers: `[C, L] -> [C/k, L]`.
    pub fn psroi_layer1d(&mut self, x: Var, k: usize) -> Result<Var> {
        let l = self.shape(x).get(1).copied().unwrap_or(0);
        let pooled = self.psroi_pool1d(x, (0, l), k)?;
        let g = self.shape(pooled)[0];
        let mut idx = Vec::with_capacity(g * l);
        for cc in 0..g {
            for i in 0..k {
                let (a, b) = bin_range(0, l, k, i);
                idx.extend(std::iter::repeat_n(cc * k + i, b - a));
            }
        }
        self.gather(pooled, idx, &[g, l])
    }

    /// 2D analogue of [`Tape::psroi_layer1d`]: `[C, H, W] -> [C/k^2, H, W]`.
    pub fn psroi_layer2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("psroi_layer2d", format!("expected [C, H, W], got {xs:?}")));
        }
        let (h, w) = (xs[1], xs[2]);
        let pooled = self.psroi_pool2d(x, (0, 0, h, w), k)?;
        let g = self.shape(pooled)[0];
        let row_bin: Vec<usize> = (0..h).map(|r| (0..k).find(|&i| bin_range(0, h, k, i).1 > r).unwrap()).collect();
        let col_bin: Vec<usize> = (0..w).map(|q| (0..k).find(|&j| bin_range(0, w, k, j).1 > q).unwrap()).collect();
        let mut idx = Vec::with_capacity(g * h * w);
        for cc in 0..g {
            for &i in &row_bin {
                idx.extend(col_bin.iter().map(|&j| (cc * k + i) * k + j));
            }
        }
        self.gather(pooled, idx, &[g, h, w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        tape.input(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn two_channel_example() {
        let mut tape = Tape::new();
        let x = input(&mut tape, &[2, 4], vec![1., 2., 3., 4., 10., 20., 30., 40.]);
        let y = tape.psroi_pool1d(x, (0, 4), 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2]);
        assert_eq!(tape.data(y), &[1.5, 35.0]);
    }

    #[test]
    fn empty_bin_and_divisibility_errors() {
        let mut tape = Tape::new();
        let x = input(&mut tape, &[4, 5], vec![0.0; 20]);
        assert!(tape.psroi_pool1d(x, (0, 3), 4).is_err());
        assert!(tape.psroi_pool1d(x, (0, 5), 3).is_err());
        assert!(tape.psroi_pool1d(x, (2, 4), 2).is_err());
        let m = input(&mut tape, &[3, 4, 4], vec![0.0; 48]);
        assert!(tape.psroi_pool2d(m, (0, 0, 4, 4), 2).is_err());
    }

    #[test]
    fn quadrant_means() {
        let mut tape = Tape::new();
        let d: Vec<f64> = (0..16).map(f64::from).collect();
        // Replicate the single map into the four position groups.
        let x = input(&mut tape, &[4, 4, 4], d.iter().cycle().take(64).copied().collect());
        let y = tape.psroi_pool2d(x, (0, 0, 4, 4), 2).unwrap();
        assert_eq!(tape.data(y), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn constant_maps_stay_constant() {
        let mut tape = Tape::new();
        let x = input(&mut tape, &[8, 2, 5], vec![0.7; 80]);
        let y = tape.psroi_pool2d(x, (0, 1, 2, 4), 2).unwrap();
        assert!(tape.data(y).iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let z = input(&mut tape, &[6, 9], vec![-3.0; 54]);
        let y = tape.psroi_layer1d(z, 3).unwrap();
        assert_eq!(tape.shape(y), &[2, 9]);
        assert!(tape.data(y).iter().all(|&v| v == -3.0));
    }

    #[test]
    fn layer_broadcasts_halves() {
        let mut tape = Tape::new();
        let x = input(&mut tape, &[2, 4], vec![1., 2., 3., 4., 10., 20., 30., 40.]);
        let y = tape.psroi_layer1d(x, 2).unwrap();
        assert_eq!(tape.data(y), &[1.5, 1.5, 35.0, 35.0]);

        let x = input(&mut tape, &[1, 5], vec![1., 2., 3., 4., 5.]);
        let y = tape.psroi_layer1d(x, 1).unwrap();
        assert_eq!(tape.data(y), &[3.0; 5]);
    }

    #[test]
    fn layer_gradient_shares_one_over_n() {
        let mut tape = Tape::new();
        let x = input(&mut tape, &[2, 6], (0..12).map(f64::from).collect());
        let y = tape.psroi_layer1d(x, 2).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        // Each pooled value is broadcast to 3 positions and averages 3 inputs.
        let expect = [1., 1., 1., 0., 0., 0., 0., 0., 0., 1., 1., 1.];
        assert_eq!(g.wrt(x).unwrap(), &expect);
    }

    #[test]
    fn outside_roi_is_ignored() {
        let mut tape = Tape::new();
        let a = input(&mut tape, &[2, 6], (0..12).map(f64::from).collect());
        let mut d: Vec<f64> = (0..12).map(f64::from).collect();
        d[0] = 99.0;
        d[11] = -99.0;
        let b = input(&mut tape, &[2, 6], d);
        let ya = tape.psroi_pool1d(a, (1, 4), 2).unwrap();
        let yb = tape.psroi_pool1d(b, (1, 4), 2).unwrap();
        assert_eq!(tape.data(ya), tape.data(yb));
    }
}
