//! The shared pipeline configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use pathcodes_core::corpus::CorpusSchema;
use pathcodes_core::metrics::ZeroSupport;
use pathcodes_core::protocol::PromptTemplate;
use pathcodes_core::CurationConfig;
use pathcodes_net::{EndpointConfig, OracleConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Environment variable holding the endpoint API key.
pub const API_KEY_VAR: &str = "PATHCODES_API_KEY";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub zero_support: ZeroSupport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Raw corpus read by `ingest` when no path is given on the command line.
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    /// Prompt template file (TOML, or JSON by extension).
    pub template: Option<PathBuf>,
    pub schema: CorpusSchema,
    pub curation: CurationConfig,
    pub endpoint: EndpointConfig,
    pub mock: OracleConfig,
    pub metrics: MetricsSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            corpus: None,
            out: PathBuf::from("out"),
            template: None,
            schema: CorpusSchema::default(),
            curation: CurationConfig::default(),
            endpoint: EndpointConfig::default(),
            mock: OracleConfig::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: PipelineConfig =
            toml::from_str(&text).map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.corpus, &mut config.template].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// Checks the parts every subcommand relies on.
    pub fn validate(&self) -> Result<(), Failure> {
        self.curation.validate().map_err(|e| Failure::usage(e.to_string()))?;
        self.mock.validate().map_err(|e| Failure::usage(e.to_string()))?;
        if let Some(t) = &self.template {
            if !t.is_file() {
                return Err(Failure::usage(format!("template {} does not exist", t.display())));
            }
        }
        Ok(())
    }

    pub fn prompt_template(&self) -> Result<PromptTemplate, Failure> {
        match &self.template {
            Some(path) => PromptTemplate::from_file(path).map_err(|e| Failure::usage(e.to_string())),
            None => Ok(PromptTemplate::default()),
        }
    }

    pub fn corpus_cache(&self) -> PathBuf {
        self.out.join("corpus.jsonl")
    }

    pub fn datasets_dir(&self) -> PathBuf {
        self.out.join("datasets")
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.out.join("runs")
    }
}
