use rand::Rng;

use crate::error::Result;
use crate::tensor::{Bound, Conv1dOpts, Conv2dOpts, Init, ParamId, ParamStore, Tape, Var};

/// Parameter names under `prefix`: `w`, `b`, and for deformable layers the
/// offset branch `offset/w`, `offset/b`.
fn offset_names(prefix: &str) -> (String, String) {
    (format!("{prefix}/offset/w"), format!("{prefix}/offset/b"))
}

/// 1D convolution whose offsets are predicted from its own input by a
/// convolution of the same kernel size and dilation. Offset weights start at
/// zero, so a fresh layer computes a plain convolution.
#[derive(Clone, Debug)]
pub struct DeformConv1d {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub opts: Conv1dOpts,
    w: ParamId,
    b: ParamId,
    offset: Option<(ParamId, ParamId)>,
}

impl DeformConv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        opts: Conv1dOpts,
        deformable: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        let w = store.add_init(format!("{prefix}/w"), &[c_out, c_in, k], Init::Uniform(bound), rng)?;
        let b = store.add_init(format!("{prefix}/b"), &[c_out], Init::Const(0.0), rng)?;
        let offset = if deformable {
            let (nw, nb) = offset_names(prefix);
            Some((
                store.add_init(nw, &[k, c_in, k], Init::Const(0.0), rng)?,
                store.add_init(nb, &[k], Init::Const(0.0), rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            c_in,
            c_out,
            k,
            opts,
            w,
            b,
            offset,
        })
    }

    pub fn is_deformable(&self) -> bool {
        self.offset.is_some()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match self.offset {
            Some((ow, ob)) => {
                let off = tape.conv1d(x, p[ow], Some(p[ob]), self.opts)?;
                tape.deform_conv1d(x, off, p[self.w], Some(p[self.b]), self.opts)
            }
            None => tape.conv1d(x, p[self.w], Some(p[self.b]), self.opts),
        }
    }
}

/// 2D counterpart of [`DeformConv1d`]; the offset branch emits a `(dy, dx)`
/// pair per tap.
#[derive(Clone, Debug)]
pub struct DeformConv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub opts: Conv2dOpts,
    w: ParamId,
    b: ParamId,
    offset: Option<(ParamId, ParamId)>,
}

impl DeformConv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        opts: Conv2dOpts,
        deformable: bool,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let bound = 1.0 / ((c_in * kh * kw) as f64).sqrt();
        let w = store.add_init(format!("{prefix}/w"), &[c_out, c_in, kh, kw], Init::Uniform(bound), rng)?;
        let b = store.add_init(format!("{prefix}/b"), &[c_out], Init::Const(0.0), rng)?;
        let offset = if deformable {
            let (nw, nb) = offset_names(prefix);
            let taps2 = 2 * kh * kw;
            Some((
                store.add_init(nw, &[taps2, c_in, kh, kw], Init::Const(0.0), rng)?,
                store.add_init(nb, &[taps2], Init::Const(0.0), rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            c_in,
            c_out,
            kernel,
            opts,
            w,
            b,
            offset,
        })
    }

    pub fn is_deformable(&self) -> bool {
        self.offset.is_some()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match self.offset {
            Some((ow, ob)) => {
                let off = tape.conv2d(x, p[ow], Some(p[ob]), self.opts)?;
                tape.deform_conv2d(x, off, p[self.w], Some(p[self.b]), self.opts)
            }
            None => tape.conv2d(x, p[self.w], Some(p[self.b]), self.opts),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_layer_equals_plain_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = DeformConv1d::new(&mut store, &mut rng, "l", 3, 4, 5, Conv1dOpts::padded(2), true).unwrap();
        assert_eq!(store.names(), vec!["l/w", "l/b", "l/offset/w", "l/offset/b"]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let x = tape.input(Tensor::new(&[3, 11], (0..33).map(|i| (i as f64 * 0.4).sin()).collect()).unwrap());
        let y = layer.forward(&mut tape, &p, x).unwrap();
        let z = tape.conv1d(x, p[layer.w], Some(p[layer.b]), layer.opts).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(z)) < 1e-12);
    }

    #[test]
    fn plain_variant_has_no_offset_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = DeformConv2d::new(&mut store, &mut rng, "m", 1, 2, (3, 1), Conv2dOpts::padded(1, 0), false).unwrap();
        assert!(!layer.is_deformable());
        assert_eq!(store.names(), vec!["m/w", "m/b"]);
    }
}
