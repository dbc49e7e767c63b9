//! Finite-difference verification of every differentiable operation, from
//! single primitives up to miniature generator and discriminator networks.
//!
//! Each case names the tape ops it exercises. [`run_suite`] can corrupt one
//! op's backward rule via [`Tape::inject_fault`]; the cases that use it must
//! then fail, which is how the suite checks that it can detect bad gradients.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, Config, Profile};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::dsp::{FilterSpec, MelExtractor, MelParams};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{adv_loss_discriminator, adv_loss_generator, feature_matching_loss, mel_loss};
use crate::tensor::{gradient_check_many, Conv1dOpts, Conv2dOpts, GradCheckOpts, GradCheckReport, ParamStore, Tape, Tensor, Var};

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

pub struct Case {
    pub name: &'static str,
    /// Tape op names this case differentiates through.
    pub ops: &'static [&'static str],
    pub inputs: Vec<Tensor>,
    pub max_elements: Option<usize>,
    f: CaseFn,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub ops: &'static [&'static str],
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub fault: Option<String>,
    pub results: Vec<CaseResult>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CaseResult::passed)
    }

    pub fn failed(&self) -> Vec<&CaseResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max)
    }

    /// Fixed-width table: case, checked elements, skipped kinks, max
    /// relative error, status.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>8} {:>6} {:>12}  status", "case", "checked", "kinks", "max_rel_err");
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<24} {:>8} {:>6} {:>12.3e}  {}",
                r.name,
                r.report.checked,
                r.report.kinks,
                r.report.max_rel_error,
                if r.passed() { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// `sum(y * c)` for a fixed pseudo-random `c`, so every output element gets
/// a distinct weight.
fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let c = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0);
    let c = t.constant(c);
    let m = t.mul(y, c)?;
    t.sum(m)
}

fn case(
    name: &'static str,
    ops: &'static [&'static str],
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> Case {
    Case {
        name,
        ops,
        inputs,
        max_elements: None,
        f: Box::new(f),
    }
}

fn mini_generator_config() -> GeneratorConfig {
    GeneratorConfig {
        n_mels: 8,
        mel_frames: 8,
        init_channels: 2,
        meta_width: 6,
        meta_hidden: 3,
        dpn_depth: 2,
        dpn_channels: 4,
        head_channels: 2,
        output_len: 48,
        psroi_bins: 2,
        ..GeneratorConfig::default()
    }
}

fn mini_discriminator_config() -> DiscriminatorConfig {
    DiscriminatorConfig {
        periods: vec![2, 3],
        kernels: vec![3, 5],
        depth: 1,
        channels: 4,
        final_hidden: 4,
        psroi_bins_1d: 2,
        psroi_bins_2d: 2,
        ..DiscriminatorConfig::default()
    }
}

fn mini_mel() -> MelParams {
    MelParams {
        n_fft: 32,
        hop: 8,
        n_mels: 6,
        ..MelParams::default()
    }
}

/// All suite cases, deterministic.
pub fn cases() -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let r = &mut rng;
    let mut out = Vec::new();

    out.push(case(
        "conv1d",
        &["conv1d"],
        vec![rand_tensor(r, &[2, 11], -1.0, 1.0), rand_tensor(r, &[3, 2, 3], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)],
        |t, v| {
            let opts = Conv1dOpts {
                stride: 2,
                dilation: 2,
                padding: 2,
            };
            let y = t.conv1d(v[0], v[1], Some(v[2]), opts)?;
            probe(t, y, 1)
        },
    ));
    out.push(case(
        "conv2d",
        &["conv2d"],
        vec![rand_tensor(r, &[2, 6, 5], -1.0, 1.0), rand_tensor(r, &[3, 2, 3, 2], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)],
        |t, v| {
            let opts = Conv2dOpts {
                stride: (2, 1),
                padding: (1, 0),
            };
            let y = t.conv2d(v[0], v[1], Some(v[2]), opts)?;
            probe(t, y, 2)
        },
    ));
    out.push(case(
        "transpose_conv1d",
        &["transpose_conv1d"],
        vec![rand_tensor(r, &[2, 5], -1.0, 1.0), rand_tensor(r, &[2, 3, 4], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)],
        |t, v| {
            let y = t.transpose_conv1d(v[0], v[1], Some(v[2]), 2)?;
            probe(t, y, 3)
        },
    ));
    out.push(case("avg_pool1d", &["avg_pool1d"], vec![rand_tensor(r, &[2, 17], -1.0, 1.0)], |t, v| {
        let y = t.avg_pool1d(v[0], 5, 2)?;
        probe(t, y, 4)
    }));
    out.push(case("max_pool2d", &["max_pool2d"], vec![rand_tensor(r, &[2, 6, 6], -1.0, 1.0)], |t, v| {
        let y = t.max_pool2d(v[0], 2, 2)?;
        probe(t, y, 5)
    }));
    out.push(case(
        "layer_norm",
        &["layer_norm"],
        vec![rand_tensor(r, &[4, 5], -2.0, 2.0), rand_tensor(r, &[4], 0.5, 1.5), rand_tensor(r, &[4], -0.5, 0.5)],
        |t, v| {
            let y = t.layer_norm(v[0], 0, v[1], v[2], crate::tensor::LAYER_NORM_EPS)?;
            probe(t, y, 6)
        },
    ));
    out.push(case(
        "dense",
        &["dense"],
        vec![rand_tensor(r, &[5], -1.0, 1.0), rand_tensor(r, &[3, 5], -1.0, 1.0), rand_tensor(r, &[3], -1.0, 1.0)],
        |t, v| {
            let y = t.dense(v[0], v[1], Some(v[2]))?;
            probe(t, y, 7)
        },
    ));
    out.push(case("spectral_filter", &["spectral_filter"], vec![rand_tensor(r, &[2, 16], -1.0, 1.0)], |t, v| {
        let lo = t.spectral_filter(v[0], FilterSpec::low_pass(0.4 * PI)?)?;
        let hi = t.spectral_filter(v[0], FilterSpec::high_pass(0.7 * PI)?)?;
        let s = t.concat(&[lo, hi], 0)?;
        probe(t, s, 8)
    }));
    out.push(case(
        "resample_pair",
        &["spectral_filter", "gather", "interpolate_linear"],
        vec![rand_tensor(r, &[2, 12], -1.0, 1.0)],
        |t, v| {
            let d = t.downsample(v[0], 2, 0.5 * PI)?;
            let u = t.upsample(d, 2, 0.5 * PI)?;
            probe(t, u, 9)
        },
    ));
    out.push(case(
        "gaussian_kernel_smooth",
        &["gaussian_smooth"],
        vec![rand_tensor(r, &[2, 10], -1.0, 1.0), Tensor::scalar(1.13)],
        |t, v| {
            let y = t.gaussian_smooth(v[0], v[1])?;
            probe(t, y, 10)
        },
    ));
    // A 1-tap, unit-weight deformable convolution is exactly the linear
    // sampler evaluated at `o + offset[o]`.
    let frac: Vec<f64> = (0..9).map(|i| -1.3 + 0.37 * i as f64).collect();
    out.push(case(
        "linear_sample",
        &["deform_conv1d"],
        vec![rand_tensor(r, &[1, 9], -1.0, 1.0), Tensor::new(&[1, 9], frac)?],
        |t, v| {
            let w = t.constant(Tensor::full(&[1, 1, 1], 1.0));
            let y = t.deform_conv1d(v[0], v[1], w, None, Conv1dOpts::default())?;
            probe(t, y, 11)
        },
    ));
    out.push(case(
        "deform_conv1d",
        &["deform_conv1d"],
        vec![
            rand_tensor(r, &[2, 9], -1.0, 1.0),
            rand_tensor(r, &[3, 9], -0.9, 0.9),
            rand_tensor(r, &[2, 2, 3], -1.0, 1.0),
            rand_tensor(r, &[2], -1.0, 1.0),
        ],
        |t, v| {
            let y = t.deform_conv1d(v[0], v[1], v[2], Some(v[3]), Conv1dOpts::padded(1))?;
            probe(t, y, 12)
        },
    ));
    out.push(case(
        "deform_conv2d",
        &["deform_conv2d"],
        vec![
            rand_tensor(r, &[2, 5, 4], -1.0, 1.0),
            rand_tensor(r, &[6, 5, 4], -0.9, 0.9),
            rand_tensor(r, &[2, 2, 3, 1], -1.0, 1.0),
            rand_tensor(r, &[2], -1.0, 1.0),
        ],
        |t, v| {
            let opts = Conv2dOpts {
                stride: (1, 1),
                padding: (1, 0),
            };
            let y = t.deform_conv2d(v[0], v[1], v[2], Some(v[3]), opts)?;
            probe(t, y, 13)
        },
    ));
    out.push(case(
        "psroi_layer",
        &["psroi_pool1d", "psroi_pool2d", "gather"],
        vec![rand_tensor(r, &[4, 9], -1.0, 1.0), rand_tensor(r, &[8, 5, 4], -1.0, 1.0)],
        |t, v| {
            let a = t.psroi_layer1d(v[0], 2)?;
            let b = t.psroi_layer2d(v[1], 2)?;
            let pa = probe(t, a, 14)?;
            let pb = probe(t, b, 15)?;
            t.add(pa, pb)
        },
    ));
    out.push(case("periodic_relu", &["periodic_relu"], vec![rand_tensor(r, &[3, 7], -6.0, 6.0)], |t, v| {
        let y = t.periodic_relu(v[0])?;
        probe(t, y, 16)
    }));
    out.push(case(
        "ada_prelu",
        &["ada_prelu"],
        vec![rand_tensor(r, &[3, 7], -6.0, 6.0), rand_tensor(r, &[3], -1.0, 1.0)],
        |t, v| {
            let y = t.ada_prelu(v[0], v[1])?;
            probe(t, y, 17)
        },
    ));
    out.push(case(
        "prak",
        &["softplus", "gaussian_smooth", "ada_prelu"],
        vec![rand_tensor(r, &[3, 9], -4.0, 4.0), rand_tensor(r, &[3], -1.0, 1.0), Tensor::vector(vec![0.4])],
        |t, v| {
            let y = t.prak(v[0], v[1], v[2])?;
            probe(t, y, 18)
        },
    ));
    out.push(case(
        "adversarial_losses",
        &["add_scalar", "square", "sum"],
        vec![rand_tensor(r, &[3], 0.05, 0.95), rand_tensor(r, &[3], 0.05, 0.95)],
        |t, v| {
            let real: Vec<Var> = (0..3).map(|i| t.slice(v[0], 0, i, 1)).collect::<Result<_>>()?;
            let fake: Vec<Var> = (0..3).map(|i| t.slice(v[1], 0, i, 1)).collect::<Result<_>>()?;
            let g = adv_loss_generator(t, &fake)?;
            let d = adv_loss_discriminator(t, &real, &fake)?;
            let d = t.scale(d, 0.7)?;
            t.add(g, d)
        },
    ));
    out.push(case(
        "feature_matching_loss",
        &["abs", "mean", "sub"],
        vec![rand_tensor(r, &[2, 5], -1.0, 1.0), rand_tensor(r, &[2, 5], -1.0, 1.0), rand_tensor(r, &[4], -1.0, 1.0)],
        |t, v| {
            let real_b = t.scale(v[2], -0.5)?;
            let fake_b = t.add_scalar(v[2], 0.3)?;
            feature_matching_loss(t, &[vec![v[0], real_b]], &[vec![v[1], fake_b]])
        },
    ));
    let mel = MelExtractor::new(&mini_mel())?;
    let target = rand_tensor(r, &[64], -0.5, 0.5);
    out.push(case(
        "mel_loss",
        &["dense", "abs", "log", "mean"],
        vec![rand_tensor(r, &[64], -0.5, 0.5)],
        move |t, v| {
            let x = t.constant(target.clone());
            mel_loss(t, &mel, x, v[0])
        },
    ));

    out.extend(model_cases(&[])?);
    Ok(out)
}

/// The miniature generator and discriminator cases with `ablations`
/// switched on.
pub fn model_cases(ablations: &[Ablation]) -> Result<Vec<Case>> {
    let mut cfg = Config::profile(Profile::Toy)?;
    cfg.generator = mini_generator_config();
    cfg.discriminator = mini_discriminator_config();
    for &a in ablations {
        cfg.add_ablation(a);
    }
    let cfg = cfg.resolved();
    let r = &mut ChaCha8Rng::seed_from_u64(0x30de1);
    let mut out = Vec::new();

    let gcfg = cfg.generator;
    let mut gstore = ParamStore::new();
    let generator = Generator::new(&gcfg, &mut gstore, &mut ChaCha8Rng::seed_from_u64(21))?;
    let mut gen_case = case(
        "generator_end_to_end",
        &["conv2d", "max_pool2d", "layer_norm", "dense", "transpose_conv1d", "deform_conv1d", "psroi_pool1d", "spectral_filter", "ada_prelu", "gaussian_smooth", "tanh"],
        vec![rand_tensor(r, &[8, 8], -12.0, -2.0), rand_tensor(r, &[6], 0.0, 1.0)],
        move |t, v| {
            let p = gstore.bind(t, false);
            let y = generator.forward(t, &p, v[0], v[1])?;
            probe(t, y, 19)
        },
    );
    gen_case.max_elements = Some(24);
    out.push(gen_case);

    let dcfg = cfg.discriminator;
    let mut dstore = ParamStore::new();
    let disc = Discriminator::new(&dcfg, 64, &mut dstore, &mut ChaCha8Rng::seed_from_u64(22))?;
    let mut disc_case = case(
        "discriminator_end_to_end",
        &["avg_pool1d", "deform_conv1d", "deform_conv2d", "psroi_pool1d", "psroi_pool2d", "layer_norm", "dense", "sigmoid"],
        vec![rand_tensor(r, &[64], -0.8, 0.8)],
        move |t, v| {
            let p = dstore.bind(t, false);
            let out = disc.forward(t, &p, v[0])?;
            let s = t.sum(out.score)?;
            let mut acc = t.scale(s, 3.0)?;
            for (i, &tap) in out.taps.iter().enumerate() {
                let pr = probe(t, tap, 100 + i as u64)?;
                acc = t.add(acc, pr)?;
            }
            Ok(acc)
        },
    );
    disc_case.max_elements = Some(24);
    out.push(disc_case);
    Ok(out)
}

/// Every op name some case claims to exercise.
pub fn known_ops(cases: &[Case]) -> Vec<&'static str> {
    let mut ops: Vec<&'static str> = cases.iter().flat_map(|c| c.ops.iter().copied()).collect();
    ops.sort_unstable();
    ops.dedup();
    ops
}

/// Runs every case; with `fault`, that op's backward rule is corrupted in
/// every tape the suite builds.
pub fn run_suite(fault: Option<&str>) -> Result<SuiteReport> {
    run_cases(&cases()?, fault)
}

/// [`run_suite`] over an arbitrary case list.
pub fn run_cases(cases: &[Case], fault: Option<&str>) -> Result<SuiteReport> {
    if let Some(op) = fault {
        if !known_ops(cases).contains(&op) {
            return Err(Error::invalid("gradient suite", format!("no case exercises op `{op}`")));
        }
    }
    let start = Instant::now();
    let mut results = Vec::with_capacity(cases.len());
    for c in cases {
        let t0 = Instant::now();
        let opts = GradCheckOpts {
            max_elements: c.max_elements,
            ..GradCheckOpts::default()
        };
        let report = gradient_check_many(
            |t, v| {
                if let Some(op) = fault {
                    t.inject_fault(op);
                }
                (c.f)(t, v)
            },
            &c.inputs,
            opts,
        )?;
        results.push(CaseResult {
            name: c.name,
            ops: c.ops,
            report,
            elapsed: t0.elapsed(),
        });
    }
    Ok(SuiteReport {
        fault: fault.map(str::to_string),
        results,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_names_are_unique() {
        let cs = cases().unwrap();
        let mut names: Vec<_> = cs.iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), cs.len());
        assert!(known_ops(&cs).contains(&"deform_conv2d"));
    }

    #[test]
    fn suite_passes_and_detects_a_fault() {
        let clean = run_suite(None).unwrap();
        assert!(clean.passed(), "{}", clean.table());
        let bad = run_suite(Some("deform_conv1d")).unwrap();
        let failed: Vec<_> = bad.failed().iter().map(|r| r.name).collect();
        for name in ["linear_sample", "deform_conv1d", "generator_end_to_end", "discriminator_end_to_end"] {
            assert!(failed.contains(&name), "{name} not flagged: {failed:?}");
        }
        assert!(!failed.contains(&"conv1d"));
    }

    #[test]
    fn unknown_fault_is_rejected() {
        assert!(run_suite(Some("no_such_op")).is_err());
    }

    #[test]
    fn ablated_models_pass() {
        for a in Ablation::ALL {
            let rep = run_cases(&model_cases(&[a]).unwrap(), None).unwrap();
            assert!(rep.passed(), "{a}\n{}", rep.table());
        }
    }
}
