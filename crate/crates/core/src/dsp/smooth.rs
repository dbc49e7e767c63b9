use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// `exp(-d^2 / (2 sigma^2))`.
pub fn gaussian_kernel(d: f64, sigma: f64) -> f64 {
    (-d * d / (2.0 * sigma * sigma)).exp()
}

/// Truncation radius in samples.
pub fn kernel_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

impl Tape {
    /// Normalized Gaussian-weighted average along the last axis. `sigma` is a
    /// one-element tensor and receives a gradient as well as `x`.
    pub fn gaussian_smooth(&mut self, x: Var, sigma: Var) -> Result<Var> {
        if self.value(sigma).numel() != 1 {
            return Err(Error::shape("gaussian_smooth", "sigma must have one element"));
        }
        let s = self.value(sigma).item();
        if !(s > 0.0) {
            return Err(Error::invalid("gaussian_smooth", format!("sigma {s} must be positive")));
        }
        let shape = self.shape(x).to_vec();
        let len = *shape.last().ok_or_else(|| Error::shape("gaussian_smooth", "scalar input"))?;
        let r = kernel_radius(s).min(len - 1);
        // Weight and normalizer per output position are shared across rows.
        let w: Vec<f64> = (0..=r).map(|d| gaussian_kernel(d as f64, s)).collect();
        let window = move |t: usize| (t.saturating_sub(r), (t + r).min(len - 1));
        let z: Vec<f64> = (0..len)
            .map(|t| {
                let (a, b) = window(t);
                (a..=b).map(|u| w[t.abs_diff(u)]).sum()
            })
            .collect();
        let xv = self.value(x).clone();
        let mut y = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(len) {
            for t in 0..len {
                let (a, b) = window(t);
                y.push((a..=b).map(|u| w[t.abs_diff(u)] * row[u]).sum::<f64>() / z[t]);
            }
        }
        let out = Tensor::new(&shape, y.clone())?;
        self.push("gaussian_smooth", out, &[x, sigma], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; g.len()];
                for (gr, gxr) in g.chunks(len).zip(gx.chunks_mut(len)) {
                    for t in 0..len {
                        let (a, b) = window(t);
                        let c = gr[t] / z[t];
                        for u in a..=b {
                            gxr[u] += c * w[t.abs_diff(u)];
                        }
                    }
                }
                gx
            });
            let gs = needs[1].then(|| {
                let s3 = s * s * s;
                let mut acc = 0.0;
                for ((gr, xr), yr) in g.chunks(len).zip(xv.data().chunks(len)).zip(y.chunks(len)) {
                    for t in 0..len {
                        let (a, b) = window(t);
                        let dy: f64 = (a..=b)
                            .map(|u| {
                                let d = t.abs_diff(u);
                                w[d] * (d * d) as f64 / s3 * (xr[u] - yr[t])
                            })
                            .sum();
                        acc += gr[t] * dy / z[t];
                    }
                }
                vec![acc]
            });
            vec![gx, gs]
        })
    }
}
