//! Run configuration: built-in profiles, TOML overrides and the ablation
//! switches.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::MetadataLayout;
use crate::discriminator::DiscriminatorConfig;
use crate::dsp::MelParams;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Corpus root; `None` trains on the synthetic harmonic corpus.
    pub corpus: Option<PathBuf>,
    /// Sidecar path; defaults to `sidecar.tsv` under the corpus root.
    pub sidecar: Option<PathBuf>,
    pub synth_items: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub metadata: MetadataLayout,
    /// Gaussian noise scale added to every corpus clip on load.
    pub noise_scale: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            sidecar: None,
            synth_items: 200,
            split: [0.9, 0.01, 0.09],
            metadata: MetadataLayout::default(),
            noise_scale: 0.0,
        }
    }
}

impl DataConfig {
    pub fn sidecar_path(&self) -> Option<PathBuf> {
        self.sidecar
            .clone()
            .or_else(|| self.corpus.as_ref().map(|c| c.join("sidecar.tsv")))
    }
}

/// One switch from the component and loss ablation studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    WithoutMetadata,
    WithoutDpn,
    ReluInsteadOfPrak,
    WithoutDeformMcd,
    RemoveMsd,
    RemoveMcd,
    WithoutMelLoss,
    WithoutFmLoss,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::WithoutMetadata,
        Ablation::WithoutDpn,
        Ablation::ReluInsteadOfPrak,
        Ablation::WithoutDeformMcd,
        Ablation::RemoveMsd,
        Ablation::RemoveMcd,
        Ablation::WithoutMelLoss,
        Ablation::WithoutFmLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::WithoutMetadata => "without-metadata",
            Ablation::WithoutDpn => "without-dpn",
            Ablation::ReluInsteadOfPrak => "relu-instead-of-prak",
            Ablation::WithoutDeformMcd => "without-deform-mcd",
            Ablation::RemoveMsd => "remove-msd",
            Ablation::RemoveMcd => "remove-mcd",
            Ablation::WithoutMelLoss => "without-mel-loss",
            Ablation::WithoutFmLoss => "without-fm-loss",
        }
    }

    /// Whether the switch only changes loss weights.
    pub fn is_loss_only(self) -> bool {
        matches!(self, Ablation::WithoutMelLoss | Ablation::WithoutFmLoss)
    }

    pub fn apply(self, cfg: &mut Config) {
        match self {
            Ablation::WithoutMetadata => cfg.generator.use_metadata = false,
            Ablation::WithoutDpn => cfg.generator.use_dpn = false,
            Ablation::ReluInsteadOfPrak => cfg.generator.use_prak = false,
            Ablation::WithoutDeformMcd => cfg.discriminator.use_deform_in_mcd = false,
            Ablation::RemoveMsd => cfg.discriminator.use_msd = false,
            Ablation::RemoveMcd => cfg.discriminator.use_mcd = false,
            Ablation::WithoutMelLoss => cfg.train.loss.mel = 0.0,
            Ablation::WithoutFmLoss => cfg.train.loss.fm = 0.0,
        }
    }

    /// Parameter names the switch removes from the full model.
    pub fn removes(self, name: &str) -> bool {
        let gen_act = |n: &str| n.starts_with("gen/") && (n.ends_with("/delta") || n.ends_with("/rho"));
        match self {
            Ablation::WithoutMetadata => name.starts_with("gen/meta/"),
            Ablation::WithoutDpn => name.starts_with("gen/dpn/"),
            Ablation::ReluInsteadOfPrak => gen_act(name),
            Ablation::WithoutDeformMcd => name.starts_with("disc/mcd/") && name.contains("/offset/"),
            Ablation::RemoveMsd => name.starts_with("disc/msd/"),
            Ablation::RemoveMcd => name.starts_with("disc/mcd/"),
            Ablation::WithoutMelLoss | Ablation::WithoutFmLoss => false,
        }
    }

    /// Parameter names the switch adds to the full model.
    pub fn adds(self, name: &str) -> bool {
        match self {
            Ablation::WithoutDpn => name.starts_with("gen/plain/"),
            _ => false,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().replace('_', "-");
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let known: Vec<&str> = Self::ALL.iter().map(|a| a.name()).collect();
            Error::config("ablations", format!("unknown switch `{s}` (known: {})", known.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Toy,
    Small,
    Large,
}

impl Profile {
    pub const ALL: [Profile; 3] = [Profile::Toy, Profile::Small, Profile::Large];

    pub fn name(self) -> &'static str {
        match self {
            Profile::Toy => "toy",
            Profile::Small => "small",
            Profile::Large => "large",
        }
    }

    fn source(self) -> &'static str {
        match self {
            Profile::Toy => include_str!("../profiles/toy.toml"),
            Profile::Small => include_str!("../profiles/small.toml"),
            Profile::Large => include_str!("../profiles/large.toml"),
        }
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid("profile", format!("unknown profile `{s}` (toy, small, large)")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub mel: MelParams,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Applied on top of the sections above by [`Config::resolved`].
    pub ablations: Vec<Ablation>,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::config(origin.to_string(), e.message().to_string()))
}

impl Config {
    pub fn profile(p: Profile) -> Result<Self> {
        Self::from_toml_layers(p.source(), None, p.name())
    }

    /// Profile values overridden key-by-key by `overrides`.
    pub fn from_toml_layers(base: &str, overrides: Option<&str>, origin: &str) -> Result<Self> {
        let mut table = parse_table(base, origin)?;
        if let Some(o) = overrides {
            merge(&mut table, parse_table(o, origin)?);
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(origin.to_string(), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` over the named profile.
    pub fn load(profile: Profile, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_layers(profile.source(), Some(&text), &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Copy with every listed ablation switched on.
    pub fn resolved(&self) -> Config {
        let mut c = self.clone();
        for a in self.ablations.clone() {
            a.apply(&mut c);
        }
        c
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn add_ablation(&mut self, a: Ablation) {
        if !self.has(a) {
            self.ablations.push(a);
            self.ablations.sort();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        let r = self.resolved();
        r.generator.validate()?;
        r.discriminator.validate()?;
        r.train.validate()?;
        self.data.metadata.validate()?;
        let g = &self.generator;
        if g.n_mels != self.mel.n_mels {
            return Err(Error::config(
                "generator.n_mels",
                format!("{} does not match mel.n_mels = {}", g.n_mels, self.mel.n_mels),
            ));
        }
        match self.mel.frames_for(g.output_len) {
            Some(f) if f == g.mel_frames => {}
            Some(f) => {
                return Err(Error::config(
                    "generator.mel_frames",
                    format!("{} does not match the {f} frames of a {}-sample clip", g.mel_frames, g.output_len),
                ))
            }
            None => return Err(Error::config("generator.output_len", "shorter than mel.n_fft")),
        }
        if g.meta_width != self.data.metadata.width {
            return Err(Error::config(
                "generator.meta_width",
                format!("{} does not match data.metadata.width = {}", g.meta_width, self.data.metadata.width),
            ));
        }
        if self.discriminator.min_input_len() > g.output_len {
            return Err(Error::config(
                "generator.output_len",
                format!("discriminator needs at least {} samples", self.discriminator.min_input_len()),
            ));
        }
        let [a, b, c] = self.data.split;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || a + b + c > 1.0 + 1e-9 || a == 0.0 {
            return Err(Error::config("data.split", "fractions must be in [0, 1], sum to <= 1, with a nonempty train part"));
        }
        if !(self.data.noise_scale >= 0.0 && self.data.noise_scale.is_finite()) {
            return Err(Error::config("data.noise_scale", "must be finite and >= 0"));
        }
        if self.data.corpus.is_none() && self.data.synth_items == 0 {
            return Err(Error::config("data.synth_items", "must be positive without a corpus"));
        }
        Ok(())
    }
}
