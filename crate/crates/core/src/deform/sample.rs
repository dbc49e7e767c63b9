/// `max(0, 1 - |q - p|)`.
pub fn interp_kernel(q: f64, p: f64) -> f64 {
    (1.0 - (q - p).abs()).max(0.0)
}

/// Linear interpolation of `x` at real position `p`; samples outside the
/// sequence count as zero.
pub fn linear_sample(x: &[f64], p: f64) -> f64 {
    let i0 = p.floor();
    let t = p - i0;
    let at = |i: f64| {
        if i >= 0.0 && (i as usize) < x.len() {
            x[i as usize]
        } else {
            0.0
        }
    };
    (1.0 - t) * at(i0) + t * at(i0 + 1.0)
}

/// Bilinear interpolation of the row-major `h x w` map at `(py, px)`.
pub fn bilinear_sample(x: &[f64], h: usize, w: usize, py: f64, px: f64) -> f64 {
    let (y0, x0) = (py.floor(), px.floor());
    let (ty, tx) = (py - y0, px - x0);
    let at = |r: f64, c: f64| {
        if r >= 0.0 && c >= 0.0 && (r as usize) < h && (c as usize) < w {
            x[r as usize * w + c as usize]
        } else {
            0.0
        }
    };
    (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x0 + 1.0)) + ty * ((1.0 - tx) * at(y0 + 1.0, x0) + tx * at(y0 + 1.0, x0 + 1.0))
}

/// One interpolation corner: flat spatial index, weight, and the weight's
/// derivative with respect to each offset dimension.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Corner {
    pub idx: usize,
    pub w: f64,
    pub dw: [f64; 2],
}

/// Up to four in-range corners of one sampling point.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct Stencil {
    pub n: u8,
    pub c: [Corner; 4],
}

impl Stencil {
    fn push(&mut self, c: Corner) {
        self.c[self.n as usize] = c;
        self.n += 1;
    }

    pub fn corners(&self) -> &[Corner] {
        &self.c[..self.n as usize]
    }

    pub fn linear(len: usize, p: f64) -> Self {
        let mut s = Self::default();
        let f = p.floor();
        let t = p - f;
        for (q, w, dw) in [(f, 1.0 - t, -1.0), (f + 1.0, t, 1.0)] {
            if q >= 0.0 && q < len as f64 {
                s.push(Corner {
                    idx: q as usize,
                    w,
                    dw: [dw, 0.0],
                });
            }
        }
        s
    }

    pub fn bilinear(h: usize, w: usize, py: f64, px: f64) -> Self {
        let mut s = Self::default();
        let (fy, fx) = (py.floor(), px.floor());
        let (ty, tx) = (py - fy, px - fx);
        for (dy, wy, dwy) in [(0.0, 1.0 - ty, -1.0), (1.0, ty, 1.0)] {
            for (dx, wx, dwx) in [(0.0, 1.0 - tx, -1.0), (1.0, tx, 1.0)] {
                let (r, c) = (fy + dy, fx + dx);
                if r >= 0.0 && c >= 0.0 && r < h as f64 && c < w as f64 {
                    s.push(Corner {
                        idx: r as usize * w + c as usize,
                        w: wy * wx,
                        dw: [dwy * wx, wy * dwx],
                    });
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_positions_are_exact() {
        let x = [1.5, -2.0, 4.0, 8.0];
        for (i, &v) in x.iter().enumerate() {
            assert_eq!(linear_sample(&x, i as f64), v);
        }
    }

    #[test]
    fn fractional_and_outside() {
        let x = [0.0, 0.0, 4.0, 8.0];
        assert_eq!(linear_sample(&x, 2.25), 5.0);
        assert_eq!(linear_sample(&x, -2.0), 0.0);
        assert_eq!(linear_sample(&x, 4.0), 0.0);
        assert_eq!(linear_sample(&x, 3.5), 4.0);
        assert_eq!(linear_sample(&x, -0.5), 0.0);
    }

    #[test]
    fn partition_of_unity() {
        let len = 7;
        for i in 0..=600 {
            let p = i as f64 * 6.0 / 600.0;
            let s: f64 = (0..len).map(|q| interp_kernel(q as f64, p)).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!((linear_sample(&[2.5; 7], p) - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_center_of_three_by_three() {
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        // Mean of 1, 2, 4, 5.
        assert_eq!(bilinear_sample(&x, 3, 3, 0.5, 0.5), 3.0);
        assert_eq!(bilinear_sample(&x, 3, 3, 1.0, 2.0), 6.0);
        assert_eq!(bilinear_sample(&x, 3, 3, 2.5, 0.0), 3.5);
    }

    #[test]
    fn stencils_agree_with_samplers() {
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.9).sin()).collect();
        for p in [-0.7, 0.0, 1.3, 5.5, 10.9, 11.2] {
            let s = Stencil::linear(12, p);
            let v: f64 = s.corners().iter().map(|c| c.w * x[c.idx]).sum();
            assert!((v - linear_sample(&x, p)).abs() < 1e-15);
        }
        for (py, px) in [(0.3, 2.7), (-0.5, 1.0), (2.9, 3.9)] {
            let s = Stencil::bilinear(3, 4, py, px);
            let v: f64 = s.corners().iter().map(|c| c.w * x[c.idx]).sum();
            assert!((v - bilinear_sample(&x, 3, 4, py, px)).abs() < 1e-15);
        }
    }
}
