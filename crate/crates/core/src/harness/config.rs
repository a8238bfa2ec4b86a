//! TOML run configuration shared by every CLI subcommand.
//!
//! Relative paths resolve against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heads::{HeadLayout, HeadsConfig, MappingTable, OutputVariant, DEFAULT_HEADS_TOML};
use crate::network::ArchitectureSpec;
use crate::pipeline::PipelineConfig;
use crate::synth::{Counts, PhantomConfig};

use super::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding `<split>.csv` manifests and `images/`.
    #[serde(default = "default_data_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_preset")]
    pub phantom: String,
    /// Overrides the preset's split sizes.
    #[serde(default)]
    pub counts: Option<Counts>,
}

fn default_data_dir() -> PathBuf {
    "data".into()
}

fn default_preset() -> String {
    "desk".into()
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: default_data_dir(),
            phantom: default_preset(),
            counts: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    /// `desk` or `paper`.
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub use_heatmap: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_preset")]
    pub arch: String,
    #[serde(default)]
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: default_preset(),
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(flatten)]
    pub params: TrainConfig,
    /// Train on train + val (the final-model protocol).
    #[serde(default = "yes")]
    pub include_val: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            params: TrainConfig::default(),
            include_val: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_artifact")]
    pub artifact: PathBuf,
}

fn default_out_dir() -> PathBuf {
    "out".into()
}

fn default_artifact() -> PathBuf {
    "model.dnm".into()
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_out_dir(),
            artifact: default_artifact(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "all_variants")]
    pub variants: Vec<String>,
    /// Phantom preset for the head-overlap comparison (E3, E4, E5); empty to skip.
    #[serde(default = "default_overlap")]
    pub overlap_phantom: String,
}

fn all_variants() -> Vec<String> {
    ["E1", "E2", "E3", "E4", "E5"].map(String::from).to_vec()
}

fn default_overlap() -> String {
    "overlap".into()
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            variants: all_variants(),
            overlap_phantom: default_overlap(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    /// Quantile used by `predict`; 0 never ignores.
    #[serde(default)]
    pub quantile: f64,
    /// Manifest to classify; defaults to the test split.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Run seed; the command line `--seed` takes precedence.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_variant")]
    pub variant: OutputVariant,
    /// Head layout and mapping table file; the shipped default when absent.
    #[serde(default)]
    pub heads: Option<PathBuf>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub predict: PredictSection,
}

fn default_variant() -> OutputVariant {
    OutputVariant::Multihead
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config takes every default")
    }
}

/// A parsed config with its paths resolved and its seed fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub seed: u64,
    pub base: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))
    }

    pub fn load(path: &Path, seed: Option<u64>) -> Result<Resolved> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = Self::parse(&text)?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        config.resolve(base, seed)
    }

    pub fn resolve(self, base: PathBuf, seed: Option<u64>) -> Result<Resolved> {
        let seed = seed.or(self.seed).ok_or_else(|| {
            Error::config("a seed is required: pass --seed or set `seed` in the config")
        })?;
        if let Some(h) = &self.heads {
            let p = base.join(h);
            if !p.is_file() {
                return Err(Error::config(format!(
                    "heads file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(Resolved {
            config: self,
            seed,
            base,
        })
    }
}

impl Resolved {
    pub fn path(&self, p: &Path) -> PathBuf {
        self.base.join(p)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.path(&self.config.data.dir)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path(&self.config.output.dir)
    }

    pub fn artifact_path(&self) -> PathBuf {
        self.out_dir().join(&self.config.output.artifact)
    }

    pub fn manifest(&self, split: &str) -> PathBuf {
        self.data_dir().join(format!("{split}.csv"))
    }

    pub fn phantom(&self) -> Result<PhantomConfig> {
        let mut p = PhantomConfig::preset(&self.config.data.phantom)?;
        if let Some(c) = &self.config.data.counts {
            p.counts = c.clone();
        }
        Ok(p)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let s = &self.config.pipeline;
        let mut p = match s.preset.as_deref().unwrap_or("desk") {
            "desk" => PipelineConfig::desk(),
            "paper" => PipelineConfig::paper(),
            other => {
                return Err(Error::config(format!(
                    "unknown pipeline preset `{other}` (desk, paper)"
                )))
            }
        };
        if let Some(sigma) = s.sigma {
            p.sigma = sigma;
        }
        if let Some(h) = s.use_heatmap {
            p.use_heatmap = h;
        }
        p.validate()?;
        Ok(p)
    }

    pub fn arch(&self) -> Result<ArchitectureSpec> {
        let mut a = ArchitectureSpec::preset(&self.config.model.arch)?;
        a.dropout = self.config.model.dropout;
        let crop = self.pipeline()?.crop;
        if a.input_size != crop {
            return Err(Error::config(format!(
                "architecture `{}` takes {}x{} inputs but the pipeline crops to {crop}",
                a.preset, a.input_size, a.input_size
            )));
        }
        Ok(a)
    }

    pub fn heads(&self) -> Result<(HeadLayout, MappingTable)> {
        match &self.config.heads {
            Some(p) => {
                let path = self.path(p);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                HeadsConfig::load(&text)
            }
            None => HeadsConfig::load(DEFAULT_HEADS_TOML),
        }
    }

    /// Hex SHA-256 over the canonical JSON of the config and the seed.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.seed.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_needs_a_seed() {
        let c = RunConfig::parse("").unwrap();
        assert!(c.clone().resolve(".".into(), None).is_err());
        let r = c.resolve(".".into(), Some(3)).unwrap();
        assert_eq!(r.seed, 3);
        assert_eq!(r.config.train.params.epochs, 8);
    }

    #[test]
    fn command_line_seed_wins() {
        let c = RunConfig::parse("seed = 1").unwrap();
        assert_eq!(c.resolve(".".into(), Some(9)).unwrap().seed, 9);
    }

    #[test]
    fn nested_sections_parse() {
        let c = RunConfig::parse(
            r#"
            variant = "single_head"
            [train]
            epochs = 3
            batch_size = 8
            include_val = false
            [train.sgd]
            lr = 0.1
            momentum = 0.9
            weight_decay = 0.0
            decay_every = 2
            decay_factor = 0.5
            [data.counts]
            train = 10
            val = 2
            test = 5
            unknown = 3
            extra = 2
            "#,
        )
        .unwrap();
        assert_eq!(c.variant, OutputVariant::SingleHead);
        assert_eq!(c.train.params.sgd.lr, 0.1);
        assert_eq!(c.data.counts.unwrap().test, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("epochs = 3").is_err());
        assert!(RunConfig::parse("[train]\nepoch = 3").is_err());
        assert!(RunConfig::parse("[train.sgd]\nrate = 0.1").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::parse("[train]\nepochs = 3\n[train.sgd]\nlr = 0.2").unwrap();
        assert_eq!(c.train.params.batch_size, 32);
        assert_eq!(c.train.params.sgd.lr, 0.2);
        assert_eq!(c.train.params.sgd.momentum, 0.9);
        assert!(c.train.include_val && c.train.params.fit_channel_means);
    }

    #[test]
    fn missing_heads_file_rejected() {
        let c = RunConfig::parse("heads = \"no/such/file.toml\"").unwrap();
        assert!(c.resolve(".".into(), Some(1)).is_err());
    }
}
