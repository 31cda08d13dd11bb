use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sketchlab::fscil::FscilConfig;
use sketchlab::generation::SemiSupConfig;
use sketchlab::models::RasterEncoderConfig;
use sketchlab::otf::OtfConfig;
use sketchlab::pretext::{LinearEvalConfig, PretextConfig};
use sketchlab::retrieval::TripletConfig;
use sketchlab::select::AlternatingConfig;
use sketchlab::sketch::SynthConfig;

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "SKETCHLAB_SEED";
pub const RESOLVED_NAME: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModuleKind {
    GenData,
    TrainEmbed,
    TrainOtf,
    TrainSubset,
    TrainSemisup,
    PretrainSsl,
    LinearEval,
    Fscil,
    Oracle,
    Augment,
    Eval,
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory written by `gen-data`. When absent the dataset is
    /// generated in memory from `synth`.
    pub path: Option<PathBuf>,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synth: SynthConfig {
                n_classes: 8,
                n_instances_per_class: 4,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedConfig {
    pub encoder: RasterEncoderConfig,
    pub triplet: TripletConfig,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            encoder: RasterEncoderConfig::default(),
            triplet: TripletConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiSupSection {
    pub labelled_frac: f64,
    pub joint: SemiSupConfig,
}

impl Default for SemiSupSection {
    fn default() -> Self {
        Self {
            labelled_frac: 0.25,
            joint: SemiSupConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretextSection {
    pub train: PretextConfig,
    pub eval: LinearEvalConfig,
    /// Encoder checkpoint for `linear-eval`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FscilSection {
    pub train: FscilConfig,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub base_ways: usize,
    pub episodes: usize,
    pub gat: bool,
}

impl Default for FscilSection {
    fn default() -> Self {
        Self {
            train: FscilConfig::default(),
            ways: 5,
            shots: 1,
            queries: 15,
            base_ways: 5,
            episodes: 600,
            gat: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsetSection {
    pub alternating: AlternatingConfig,
    /// Stroke count cap for the exhaustive oracle.
    pub max_k: usize,
    /// Masks sampled per sketch by `augment`.
    pub augment_n: usize,
}

impl Default for SubsetSection {
    fn default() -> Self {
        Self {
            alternating: AlternatingConfig::default(),
            max_k: 16,
            augment_n: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub port: u16,
    pub k: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self { port: 8080, k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub module: Option<ModuleKind>,
    /// Master seed. Resolution copies it into every nested `seed`.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Run directory whose checkpoints seed this run. Without it, runs that
    /// need a retrieval model train one first.
    pub init_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub embed: EmbedConfig,
    pub otf: OtfConfig,
    pub subset: SubsetSection,
    pub semisup: SemiSupSection,
    pub pretext: PretextSection,
    pub fscil: FscilSection,
    pub serve: ServeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            module: None,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            init_dir: None,
            data: DataConfig::default(),
            embed: EmbedConfig::default(),
            otf: OtfConfig::default(),
            subset: SubsetSection::default(),
            semisup: SemiSupSection::default(),
            pretext: PretextSection::default(),
            fscil: FscilSection::default(),
            serve: ServeConfig::default(),
        }
    }
}

fn check_encoder(key: &str, e: &RasterEncoderConfig) -> Result<()> {
    if e.patch == 0 || e.canvas % e.patch != 0 {
        return Err(CliError::Config(format!("{key}: canvas {} does not tile into patches of {}", e.canvas, e.patch)));
    }
    if e.channels == 0 || e.dim == 0 {
        return Err(CliError::Config(format!("{key}: channels and dim must be positive")));
    }
    Ok(())
}

fn wrap<T>(key: &str, r: sketchlab::Result<T>) -> Result<()> {
    r.map(|_| ()).map_err(|e| CliError::Config(format!("{key}: {e}")))
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies the environment seed override and propagates the master seed.
    pub fn resolve(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}: {v:?} is not an unsigned integer")))?;
        }
        let s = self.seed;
        self.data.synth.seed = s;
        self.embed.triplet.seed = s;
        self.otf.seed = s;
        self.subset.alternating.seed = s;
        self.subset.alternating.triplet.seed = s;
        self.subset.alternating.selector.seed = s;
        self.semisup.joint.seed = s;
        self.semisup.joint.pretrain.seed = s;
        self.semisup.joint.generator_pretrain.seed = s;
        self.pretext.train.seed = s;
        self.pretext.eval.seed = s;
        self.fscil.train.seed = s;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        check_encoder("embed.encoder", &self.embed.encoder)?;
        check_encoder("subset.alternating.encoder", &self.subset.alternating.encoder)?;
        check_encoder("semisup.joint.encoder", &self.semisup.joint.encoder)?;
        check_encoder("pretext.train.encoder", &self.pretext.train.encoder)?;
        check_encoder("fscil.train.encoder", &self.fscil.train.encoder)?;
        if self.embed.encoder.canvas != self.data.synth.canvas {
            return Err(CliError::Config(format!(
                "embed.encoder.canvas {} differs from data.synth.canvas {}",
                self.embed.encoder.canvas, self.data.synth.canvas
            )));
        }
        if self.data.synth.n_classes == 0 || self.data.synth.n_instances_per_class == 0 {
            return Err(CliError::Config("data.synth: class and instance counts must be positive".into()));
        }
        wrap("otf", self.otf.validate())?;
        wrap("subset.alternating.selector", self.subset.alternating.selector.validate())?;
        wrap("fscil.train", self.fscil.train.validate())?;
        if !(0.0..=1.0).contains(&self.semisup.labelled_frac) || self.semisup.labelled_frac == 0.0 {
            return Err(CliError::Config("semisup.labelled_frac must lie in (0, 1]".into()));
        }
        if self.subset.max_k == 0 || self.subset.max_k > sketchlab::select::MAX_BRUTE_FORCE_STROKES {
            return Err(CliError::Config(format!(
                "subset.max_k must lie in 1..={}",
                sketchlab::select::MAX_BRUTE_FORCE_STROKES
            )));
        }
        if self.serve.k == 0 {
            return Err(CliError::Config("serve.k must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_NAME), self.to_toml())?;
        Ok(())
    }
}
