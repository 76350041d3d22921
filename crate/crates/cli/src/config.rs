//! TOML run configuration. Every field has the published default, so a
//! minimal file only lists data paths.

use std::path::{Path, PathBuf};

use bilm_ner::bilm::LmConfig;
use bilm_ner::corpus::CorpusConfig;
use bilm_ner::encoder::Architecture;
use bilm_ner::ner_head::Head;
use bilm_ner::transfer::{PretrainMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Token-only text used for language-model pretraining.
    pub unlabeled: Option<PathBuf>,
    /// word2vec text vectors.
    pub embeddings: Option<PathBuf>,
    pub lm_checkpoint: Option<PathBuf>,
    /// Output directory.
    pub checkpoints: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: PretrainMode,
    pub head: Head,
    /// Learned start/stop transition scores in the CRF.
    pub crf_boundaries: bool,
    pub paths: Paths,
    pub architecture: Architecture,
    pub corpus: CorpusConfig,
    pub lm: LmConfig,
    pub training: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            mode: PretrainMode::None,
            head: Head::Crf,
            crf_boundaries: true,
            paths: Paths {
                checkpoints: PathBuf::from("checkpoints"),
                ..Paths::default()
            },
            architecture: Architecture::default(),
            corpus: CorpusConfig::default(),
            lm: LmConfig::default(),
            training: TrainConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<PretrainMode>,
    pub head: Option<Head>,
    pub lm_checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), resolves relative paths
    /// against the file's directory and applies `over`.
    pub fn load(path: Option<&Path>, over: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let mut cfg: RunConfig =
                    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                let base = p.parent().unwrap_or(Path::new(""));
                cfg.paths.resolve(base);
                cfg
            }
        };
        if let Some(s) = over.seed {
            cfg.seed = s;
        }
        if let Some(m) = over.mode {
            cfg.mode = m;
        }
        if let Some(h) = over.head {
            cfg.head = h;
        }
        if let Some(p) = &over.lm_checkpoint {
            cfg.paths.lm_checkpoint = Some(p.clone());
        }
        if let Some(p) = &over.out_dir {
            cfg.paths.checkpoints = p.clone();
        }
        cfg.lm.seed = cfg.seed;
        cfg.training.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        let p = &self.paths;
        let inputs = [
            ("paths.train", &p.train),
            ("paths.dev", &p.dev),
            ("paths.test", &p.test),
            ("paths.unlabeled", &p.unlabeled),
            ("paths.embeddings", &p.embeddings),
            ("paths.lm_checkpoint", &p.lm_checkpoint),
        ];
        for (field, path) in inputs {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(CliError::Config(format!("{field}: {} does not exist", path.display())));
                }
            }
        }
        let field = |name: &str, e: bilm_ner::Error| CliError::Config(format!("{name}: {e}"));
        self.architecture.validate().map_err(|e| field("architecture", e))?;
        self.lm.validate().map_err(|e| field("lm", e))?;
        self.training.validate().map_err(|e| field("training", e))?;
        Ok(())
    }

    pub fn require<'a>(&self, field: &str, path: &'a Option<PathBuf>) -> Result<&'a Path, CliError> {
        path.as_deref()
            .ok_or_else(|| CliError::Config(format!("{field} is required for this command")))
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.train,
            &mut self.dev,
            &mut self.test,
            &mut self.unlabeled,
            &mut self.embeddings,
            &mut self.lm_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.checkpoints);
    }
}
