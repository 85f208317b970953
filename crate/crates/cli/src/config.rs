use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cqrank_core::digest::sha256_hex;
use cqrank_core::eval::EmptyGold;
use cqrank_core::ranker::ModelVariant;
use cqrank_core::{Error, FeatureSpec, Regime, Result, TrainConfig};
use serde::{Deserialize, Serialize};

/// File locations. Relative paths in a config file resolve against the
/// directory holding that file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub validation: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    /// Triples files supplying post text.
    pub posts: Vec<PathBuf>,
    pub store: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            train: None,
            validation: None,
            test: None,
            annotations: None,
            posts: Vec::new(),
            store: None,
            out: PathBuf::from("out"),
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.train, &mut self.validation, &mut self.test, &mut self.annotations, &mut self.store]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        self.posts.iter_mut().for_each(fix);
        fix(&mut self.out);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub endpoint: String,
    pub batch_size: usize,
}

impl Default for EmbedSection {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000".into(),
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeChoice {
    Best,
    Valid,
    #[default]
    Both,
}

impl RegimeChoice {
    pub fn regimes(self) -> &'static [Regime] {
        match self {
            Self::Best => &[Regime::Best],
            Self::Valid => &[Regime::Valid],
            Self::Both => &Regime::ALL,
        }
    }
}

impl FromStr for RegimeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best" => Ok(Self::Best),
            "valid" => Ok(Self::Valid),
            "both" => Ok(Self::Both),
            other => Err(Error::InvalidArgument(format!("unknown regime {other:?} (expected best, valid or both)"))),
        }
    }
}

impl fmt::Display for RegimeChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Best => "best",
            Self::Valid => "valid",
            Self::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub regime: RegimeChoice,
    pub empty_gold: EmptyGold,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overrides the encoder width implied by the variant.
    pub encoder_dim: Option<usize>,
    pub paths: Paths,
    pub train: TrainConfig,
    pub embed: EmbedSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    pub fn variant(&self) -> ModelVariant {
        self.train.variant
    }

    pub fn feature_spec(&self) -> Result<FeatureSpec> {
        let spec = FeatureSpec::for_model(self.variant());
        match self.encoder_dim {
            Some(dim) => FeatureSpec::new(spec.variant, dim),
            None => Ok(spec),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.feature_spec()?;
        if self.embed.batch_size == 0 {
            return Err(Error::Config("embed.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of everything that shapes results. The output directory is
    /// left out so reruns into fresh directories compare equal.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.paths.out = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// `path` if configured, else a config error naming the key.
    pub fn need<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::Config(format!("paths.{key} is not set")))
    }
}

/// Fails with an I/O error naming `path` unless it exists.
pub fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        })
    }
}
