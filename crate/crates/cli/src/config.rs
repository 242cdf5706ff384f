//! Run configuration file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use smr_core::llm::ScriptStep;
use smr_core::EngineConfig;

pub const DEFAULT_KEY_ENV: &str = "SMR_API_KEY";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub retriever: RetrieverConfig,
    pub llm: LlmConfig,
    #[serde(default)]
    pub engine: EngineConfig,
    pub paths: PathsConfig,
    /// Replaces the built-in policy system prompt.
    #[serde(default)]
    pub prompt_path: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum RetrieverConfig {
    Bm25 {
        index: PathBuf,
    },
    Dense {
        /// JSONL of `{"doc_id", "vector"}`.
        store: PathBuf,
        /// Corpus JSONL supplying document text for the policy prompt.
        corpus: PathBuf,
        embed_endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum LlmConfig {
    Endpoint {
        url: String,
        model: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
    },
    Script {
        path: PathBuf,
    },
}

fn default_key_env() -> String {
    DEFAULT_KEY_ENV.to_string()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub queries: PathBuf,
    pub run: PathBuf,
    pub trace: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).with_context(|| {
            format!(
                "{}: invalid run config (retriever and llm must each name exactly one mode)",
                path.display()
            )
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.retriever {
            RetrieverConfig::Bm25 { index } => fix(index),
            RetrieverConfig::Dense { store, corpus, .. } => {
                fix(store);
                fix(corpus);
            }
        }
        if let LlmConfig::Script { path } = &mut self.llm {
            fix(path);
        }
        fix(&mut self.paths.queries);
        fix(&mut self.paths.run);
        fix(&mut self.paths.trace);
        if let Some(p) = &mut self.prompt_path {
            fix(p);
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum StepSpec {
    Text(String),
    Full { text: String, output_tokens: Option<u64> },
}

impl From<StepSpec> for ScriptStep {
    fn from(s: StepSpec) -> Self {
        match s {
            StepSpec::Text(text) => ScriptStep { text, output_tokens: None },
            StepSpec::Full { text, output_tokens } => ScriptStep { text, output_tokens },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFileRaw {
    #[serde(default)]
    scripts: BTreeMap<String, Vec<StepSpec>>,
    #[serde(default)]
    default: Option<Vec<StepSpec>>,
}

/// Canned policy responses keyed by query id, with an optional fallback
/// script for ids not listed.
#[derive(Debug, Clone)]
pub struct ScriptFile {
    pub scripts: BTreeMap<String, Vec<ScriptStep>>,
    pub default: Option<Vec<ScriptStep>>,
}

impl ScriptFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let raw: ScriptFileRaw =
            serde_json::from_str(&text).with_context(|| format!("{}: invalid script file", path.display()))?;
        let convert = |v: Vec<StepSpec>| v.into_iter().map(ScriptStep::from).collect::<Vec<_>>();
        let file = ScriptFile {
            scripts: raw.scripts.into_iter().map(|(k, v)| (k, convert(v))).collect(),
            default: raw.default.map(convert),
        };
        if file.scripts.is_empty() && file.default.is_none() {
            bail!("{}: script file defines no scripts", path.display());
        }
        Ok(file)
    }

    pub fn for_query(&self, query_id: &str) -> Option<&[ScriptStep]> {
        self.scripts.get(query_id).or(self.default.as_ref()).map(Vec::as_slice)
    }
}
