use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use dpngan::config::{Ablation, Config, Profile};
use dpngan::data::{read_wav, write_wav, AudioClip};
use dpngan::dsp::{read_mel_dump, resample, write_mel_dump, write_pgm, MelExtractor};
use dpngan::gradsuite::run_suite;
use dpngan::metrics::{Evaluator, MetricParams, MetricReport};
use dpngan::tensor::{load_checkpoint, Tensor};
use dpngan::training::{checkpoint_ablations, fit, load_generator, load_items, RunPaths, Trainer};

/// Desk-scale DPN-GAN vocoder: verification, training, synthesis,
/// evaluation and spectrogram inspection.
///
/// Exit codes: 0 success, 1 validation failure (bad config value, failed
/// check, nothing to evaluate), 2 runtime error (missing files, I/O).
#[derive(Parser, Debug)]
#[command(name = "dpngan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the finite-difference gradient suite over every differentiable op.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corrupt the backward rule of this tape op (suite self-test).
        #[arg(long, value_name = "OP", hide = true)]
        corrupt_op: Option<String>,
    },
    /// Train a generator/discriminator pair and write a checkpoint and CSV log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for checkpoint.dpng and train_log.csv.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Corpus root with a sidecar.tsv; overrides `data.corpus`.
        #[arg(long, value_name = "DIR")]
        corpus: Option<PathBuf>,
        /// Step budget; overrides `train.max_steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Generate a waveform from a WAV (via its mel spectrogram) or a mel dump.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// A .wav file or a mel dump written by `inspect-mel`.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Class id for the metadata vector.
        #[arg(long)]
        class: Option<usize>,
        /// Speaker id for the metadata vector.
        #[arg(long)]
        speaker: Option<usize>,
        /// Comma-separated metadata scalars.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        scalars: Vec<f64>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Score degraded WAVs against same-named references.
    Eval {
        #[arg(long, value_name = "DIR")]
        reference: PathBuf,
        #[arg(long, value_name = "DIR")]
        degraded: PathBuf,
        /// CSV report path; the summary is always printed.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Write a WAV's log-mel spectrogram as a binary dump and a PGM image.
    InspectMel {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "FILE")]
        wav: PathBuf,
        /// Output prefix; writes PREFIX.dpnmel and PREFIX.pgm.
        #[arg(long, value_name = "PREFIX")]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML file layered over the profile.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base profile: toy, small or large.
    #[arg(long, default_value = "small")]
    profile: Profile,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `data.noise_scale` (Gaussian noise added to every clip).
    #[arg(long)]
    noise_scale: Option<f64>,
    /// Comma-separated ablation switches, e.g. without-dpn,remove-msd.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<Ablation>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config, Failure> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(self.profile, p)?,
            None => Config::profile(self.profile)?,
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(n) = self.noise_scale {
            cfg.data.noise_scale = n;
        }
        for &a in &self.ablate {
            cfg.add_ablation(a);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn validation(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

impl From<dpngan::Error> for Failure {
    fn from(e: dpngan::Error) -> Self {
        let code = match e {
            dpngan::Error::Config { .. } => 1,
            _ => 2,
        };
        Self { code, error: e.into() }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        match error.downcast::<dpngan::Error>() {
            Ok(e) => e.into(),
            Err(error) => Self { code: 2, error },
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", render(&f.error));
            ExitCode::from(f.code)
        }
    }
}

fn render(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let c = cause.to_string();
        if !msg.contains(&c) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&c);
        }
    }
    msg
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Gradcheck { config, corrupt_op } => gradcheck(&config, corrupt_op.as_deref()),
        Command::Train {
            config,
            out,
            corpus,
            steps,
            resume,
        } => train(&config, &out, corpus, steps, resume),
        Command::Synth {
            config,
            checkpoint,
            input,
            class,
            speaker,
            scalars,
            out,
        } => synth(&config, &checkpoint, &input, (class, speaker, &scalars), &out),
        Command::Eval { reference, degraded, out } => eval(&reference, &degraded, out.as_deref()),
        Command::InspectMel { config, wav, out } => inspect_mel(&config, &wav, &out),
    }
}

fn gradcheck(args: &ConfigArgs, corrupt: Option<&str>) -> Result<(), Failure> {
    args.load()?;
    let report = run_suite(corrupt)?;
    print!("{}", report.table());
    println!(
        "{} cases, max relative error {:.3e}, {:.2}s",
        report.results.len(),
        report.max_rel_error(),
        report.elapsed.as_secs_f64()
    );
    if report.passed() {
        return Ok(());
    }
    let failed = report.failed();
    let names: Vec<&str> = failed.iter().map(|r| r.name).collect();
    let ops: Vec<&str> = match corrupt {
        Some(op) => vec![op],
        None => {
            let mut ops: Vec<&str> = failed.iter().flat_map(|r| r.ops.iter().copied()).collect();
            ops.sort_unstable();
            ops.dedup();
            ops
        }
    };
    Err(Failure::validation(anyhow!(
        "gradient check failed for op {} (cases: {})",
        ops.iter().map(|o| format!("`{o}`")).collect::<Vec<_>>().join(", "),
        names.join(", ")
    )))
}

fn train(args: &ConfigArgs, out: &Path, corpus: Option<PathBuf>, steps: Option<u64>, resume: bool) -> Result<(), Failure> {
    let mut cfg = args.load()?;
    if let Some(c) = corpus {
        cfg.data.corpus = Some(c);
    }
    if let Some(s) = steps {
        cfg.train.max_steps = s;
    }
    cfg.validate()?;
    let paths = RunPaths::in_dir(out);
    let items = Arc::new(load_items(&cfg)?);
    info!("{} clips, profile {}, ablations {:?}", items.len(), args.profile.name(), cfg.ablations);
    let mut trainer = if resume {
        Trainer::resume(&cfg, &paths.checkpoint)?
    } else {
        Trainer::new(&cfg)?
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()).with_context(|| format!("writing config into {}", out.display()))?;
    let every = (cfg.train.max_steps / 20).max(1);
    let start = Instant::now();
    let recs = fit(&mut trainer, items, &paths, |_, r| {
        if r.step % every == 0 {
            info!(
                "step {:>6}  mel {:.4}  fm {:.4}  adv_g {:.4}  adv_d {:.4}  ({:.0}s)",
                r.step,
                r.mel,
                r.fm,
                r.adv_g,
                r.adv_d,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    println!(
        "trained {} steps (now at step {}) in {:.1}s; checkpoint {}, log {}",
        recs.len(),
        trainer.step,
        start.elapsed().as_secs_f64(),
        paths.checkpoint.display(),
        paths.log.display()
    );
    Ok(())
}

fn read_clip_at(path: &Path, rate: u32) -> Result<AudioClip, Failure> {
    let clip = read_wav(path)?;
    if clip.sample_rate == rate {
        return Ok(clip);
    }
    let s = resample(&clip.samples, clip.sample_rate, rate)?;
    Ok(AudioClip::new(s.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), rate)?)
}

fn synth(
    args: &ConfigArgs,
    checkpoint: &Path,
    input: &Path,
    meta: (Option<usize>, Option<usize>, &[f64]),
    out: &Path,
) -> Result<(), Failure> {
    let mut cfg = args.load()?;
    let lookup = load_checkpoint(checkpoint)?.into_iter().collect();
    let trained = checkpoint_ablations(&lookup)?;
    if !args.ablate.is_empty() && trained != cfg.ablations {
        warn!("checkpoint was trained with ablations {trained:?}; using those");
    }
    cfg.ablations = trained;
    let r = cfg.resolved();
    let (generator, store) = load_generator(&cfg, checkpoint)?;
    let mel = if input.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
        let clip = read_clip_at(input, r.mel.sample_rate)?;
        let mut x = clip.samples;
        x.resize(r.generator.output_len, 0.0);
        MelExtractor::new(&r.mel)?.compute(&x)?.values
    } else {
        read_mel_dump(input)?.values
    };
    let want = [r.generator.n_mels, r.generator.mel_frames];
    if mel.shape() != want {
        return Err(Failure::validation(anyhow!(
            "mel input is {:?}, the generator expects {:?}",
            mel.shape(),
            want
        )));
    }
    let (class, speaker, scalars) = meta;
    let meta = Tensor::vector(r.data.metadata.encode(class, speaker, scalars));
    let wave = generator.synthesize(&store, &mel, &meta)?;
    write_wav(out, &AudioClip::new(wave, r.mel.sample_rate)?)?;
    println!("wrote {} ({} samples at {} Hz)", out.display(), r.generator.output_len, r.mel.sample_rate);
    Ok(())
}

fn wav_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, Failure> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    for e in entries {
        let p = e.with_context(|| format!("reading {}", dir.display()))?.path();
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), p);
            }
        }
    }
    Ok(out)
}

fn eval(reference: &Path, degraded: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let refs = wav_files(reference)?;
    let degs = wav_files(degraded)?;
    for name in degs.keys().filter(|n| !refs.contains_key(*n)) {
        warn!("{name}: no reference clip, skipped");
    }
    for name in refs.keys().filter(|n| !degs.contains_key(*n)) {
        warn!("{name}: no degraded clip, skipped");
    }
    let pairs: Vec<(&String, &PathBuf, &PathBuf)> = refs
        .iter()
        .filter_map(|(n, r)| degs.get(n).map(|d| (n, r, d)))
        .collect();
    if pairs.is_empty() {
        return Err(Failure::validation(anyhow!(
            "no paired .wav files between {} and {}",
            reference.display(),
            degraded.display()
        )));
    }
    let rate = read_wav(pairs[0].1)?.sample_rate;
    let mut params = MetricParams::default();
    params.mel.sample_rate = rate;
    params.mel.f_max = None;
    let ev = Evaluator::new(&params)?;
    let mut scores = Vec::with_capacity(pairs.len());
    for (name, r, d) in pairs {
        let a = read_clip_at(r, rate)?;
        let b = read_clip_at(d, rate)?;
        scores.push(ev.score(name, &a.samples, &b.samples)?);
    }
    let report = MetricReport::new(params, scores)?;
    if let Some(path) = out {
        fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{}", report.summary_text());
    Ok(())
}

fn inspect_mel(args: &ConfigArgs, wav: &Path, prefix: &Path) -> Result<(), Failure> {
    let cfg = args.load()?;
    let clip = read_clip_at(wav, cfg.mel.sample_rate)?;
    let mel = MelExtractor::new(&cfg.mel)?.compute(&clip.samples)?;
    let with_ext = |ext: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    let (dump, pgm) = (with_ext(".dpnmel"), with_ext(".pgm"));
    if let Some(dir) = dump.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_mel_dump(&dump, &mel)?;
    write_pgm(&pgm, &mel)?;
    println!(
        "wrote {} and {} ({} mels x {} frames)",
        dump.display(),
        pgm.display(),
        mel.n_mels,
        mel.n_frames()
    );
    Ok(())
}
