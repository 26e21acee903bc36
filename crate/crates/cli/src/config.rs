//! Run configuration: one TOML file with `data`, `generator`, `train`,
//! `adapters` and `eval` sections, overridable per key through
//! `MAKEUP__<SECTION>__<KEY>` environment variables.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use makeup_core::data::{DataConfig, FaceServices};
use makeup_core::evaluation::{CommandEmbedder, Embedder, ToyEmbedder};
use makeup_core::face::{
    CommandParser, CommandRemover, ConstantParser, EllipseParser, FaceClass, FaceParser, FlattenRemover,
    IdentityRemover, MakeupRegionPolicy, MakeupRemover, PrecomputedRemover,
};
use makeup_core::generator::GeneratorConfig;
use makeup_core::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "MAKEUP__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ParserKind {
    /// Centered ellipse face; offline stand-in.
    Ellipse,
    /// External program producing 19-class label maps.
    Bisenet,
    /// Labels everything as background, so masks are empty.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RemoverKind {
    Identity,
    Flatten,
    Precomputed,
    /// External program producing a bare-face PNG.
    Ladn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Toy,
    Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub parser: ParserKind,
    pub parser_command: Vec<String>,
    pub parser_asset: Option<PathBuf>,
    pub remover: RemoverKind,
    pub remover_command: Vec<String>,
    pub remover_asset: Option<PathBuf>,
    /// Directory of `<id>.png` bare faces for the precomputed remover.
    pub remover_dir: Option<PathBuf>,
    /// Parse classes that receive makeup; the default covers skin and all features.
    pub makeup_classes: Option<Vec<FaceClass>>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            parser: ParserKind::Ellipse,
            parser_command: Vec::new(),
            parser_asset: None,
            remover: RemoverKind::Identity,
            remover_command: Vec::new(),
            remover_asset: None,
            remover_dir: None,
            makeup_classes: None,
        }
    }
}

impl AdapterConfig {
    fn validate(&self, errors: &mut Vec<String>) {
        if self.parser == ParserKind::Bisenet && self.parser_command.is_empty() {
            errors.push("adapters.parser_command is required for the bisenet parser".into());
        }
        if self.remover == RemoverKind::Ladn && self.remover_command.is_empty() {
            errors.push("adapters.remover_command is required for the ladn remover".into());
        }
        if self.remover == RemoverKind::Precomputed && self.remover_dir.is_none() {
            errors.push("adapters.remover_dir is required for the precomputed remover".into());
        }
        if let Some(classes) = &self.makeup_classes {
            if let Err(e) = MakeupRegionPolicy::new(classes.iter().copied()) {
                errors.push(format!("adapters.makeup_classes: {e}"));
            }
        }
    }

    pub fn parser(&self) -> Arc<dyn FaceParser> {
        match self.parser {
            ParserKind::Ellipse => Arc::new(EllipseParser::default()),
            ParserKind::Bisenet => {
                Arc::new(CommandParser { command: self.parser_command.clone(), asset: self.parser_asset.clone() })
            }
            ParserKind::None => Arc::new(ConstantParser(FaceClass::Background)),
        }
    }

    pub fn services(&self) -> anyhow::Result<FaceServices> {
        let parser = self.parser();
        let remover: Arc<dyn MakeupRemover> = match self.remover {
            RemoverKind::Identity => Arc::new(IdentityRemover),
            RemoverKind::Flatten => Arc::new(FlattenRemover::new(parser.clone())),
            RemoverKind::Precomputed => Arc::new(PrecomputedRemover { dir: self.remover_dir.clone().unwrap_or_default() }),
            RemoverKind::Ladn => {
                Arc::new(CommandRemover { command: self.remover_command.clone(), asset: self.remover_asset.clone() })
            }
        };
        let policy = match &self.makeup_classes {
            Some(classes) => MakeupRegionPolicy::new(classes.iter().copied())?,
            None => MakeupRegionPolicy::default(),
        };
        Ok(FaceServices { parser, policy, remover })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub feature_embedder: EmbedderKind,
    pub feature_command: Vec<String>,
    pub feature_asset: Option<PathBuf>,
    pub identity_embedder: EmbedderKind,
    pub identity_command: Vec<String>,
    pub identity_asset: Option<PathBuf>,
    pub toy_grid: usize,
    pub toy_dim: usize,
    pub toy_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            feature_embedder: EmbedderKind::Toy,
            feature_command: Vec::new(),
            feature_asset: None,
            identity_embedder: EmbedderKind::Toy,
            identity_command: Vec::new(),
            identity_asset: None,
            toy_grid: 8,
            toy_dim: 64,
            toy_seed: 0,
        }
    }
}

impl EvalConfig {
    fn validate(&self, errors: &mut Vec<String>) {
        if self.feature_embedder == EmbedderKind::Command && self.feature_command.is_empty() {
            errors.push("eval.feature_command is required for a command feature embedder".into());
        }
        if self.identity_embedder == EmbedderKind::Command && self.identity_command.is_empty() {
            errors.push("eval.identity_command is required for a command identity embedder".into());
        }
        if self.toy_grid == 0 || self.toy_dim == 0 {
            errors.push("eval.toy_grid and eval.toy_dim must be positive".into());
        }
    }

    fn build(&self, kind: EmbedderKind, name: &str, command: &[String], asset: &Option<PathBuf>) -> Box<dyn Embedder> {
        match kind {
            EmbedderKind::Toy => Box::new(ToyEmbedder::new(self.toy_grid, self.toy_dim, self.toy_seed)),
            EmbedderKind::Command => {
                Box::new(CommandEmbedder { name: name.into(), command: command.to_vec(), asset: asset.clone() })
            }
        }
    }

    pub fn feature(&self) -> Box<dyn Embedder> {
        self.build(self.feature_embedder, "feature", &self.feature_command, &self.feature_asset)
    }

    pub fn identity(&self) -> Box<dyn Embedder> {
        self.build(self.identity_embedder, "identity", &self.identity_command, &self.identity_asset)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub adapters: AdapterConfig,
    pub eval: EvalConfig,
}

/// Every problem found in a configuration, reported together.
#[derive(Debug)]
pub struct ConfigErrors(pub Vec<String>);

impl std::fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration:\n  {}", self.0.join("\n  "))
    }
}

impl std::error::Error for ConfigErrors {}

const SECTIONS: [&str; 5] = ["data", "generator", "train", "adapters", "eval"];

fn section<T: DeserializeOwned + Default>(table: &toml::Table, name: &str, errors: &mut Vec<String>) -> T {
    match table.get(name) {
        None => T::default(),
        Some(v) => v.clone().try_into().unwrap_or_else(|e: toml::de::Error| {
            errors.push(format!("[{name}] {}", e.message()));
            T::default()
        }),
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides from `env`, and validates.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigErrors> {
        let mut errors = Vec::new();
        let mut table = match path {
            None => toml::Table::new(),
            Some(p) => match std::fs::read_to_string(p) {
                Err(e) => return Err(ConfigErrors(vec![format!("cannot read {}: {e}", p.display())])),
                Ok(text) => text.parse::<toml::Table>().map_err(|e| ConfigErrors(vec![format!("{}: {e}", p.display())]))?,
            },
        };

        for (var, raw) in env {
            let Some(rest) = var.strip_prefix(ENV_PREFIX) else { continue };
            let Some((sec, key)) = rest.split_once("__") else {
                errors.push(format!("{var}: expected {ENV_PREFIX}<SECTION>__<KEY>"));
                continue;
            };
            let (sec, key) = (sec.to_lowercase(), key.to_lowercase());
            let entry = table.entry(sec.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry.as_table_mut() {
                Some(t) => {
                    t.insert(key, override_value(&raw));
                }
                None => errors.push(format!("{var}: `{sec}` is not a section")),
            }
        }

        for key in table.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                errors.push(format!("unknown section `{key}` (expected one of {})", SECTIONS.join(", ")));
            }
        }
        let cfg = RunConfig {
            data: section(&table, "data", &mut errors),
            generator: section(&table, "generator", &mut errors),
            train: section(&table, "train", &mut errors),
            adapters: section(&table, "adapters", &mut errors),
            eval: section(&table, "eval", &mut errors),
        };
        if errors.is_empty() {
            cfg.validate(&mut errors);
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigErrors(errors))
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        self.data.validate(errors);
        self.generator.validate(errors);
        self.train.validate(errors);
        self.adapters.validate(errors);
        self.eval.validate(errors);
        if self.data.resolution != self.generator.resolution {
            errors.push(format!(
                "data.resolution ({}) must equal generator.resolution ({})",
                self.data.resolution, self.generator.resolution
            ));
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# config could not be rendered: {e}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::load(None, []).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(cfg.to_toml().contains("[train]"));
    }

    #[test]
    fn every_problem_is_reported_at_once() {
        let f = write("[data]\nresolution = 64\nbogus = 1\n\n[generator]\nresolution = 64\n\n[train]\nlearning_rate = -1.0\n\n[extra]\n");
        let errs = RunConfig::load(Some(f.path()), []).unwrap_err().0;
        assert!(errs.iter().any(|e| e.contains("bogus")), "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("extra")), "{errs:?}");

        let f = write("[train]\nlearning_rate = -1.0\n[adapters]\nparser = \"bisenet\"\n[generator]\nresolution = 128\n");
        let errs = RunConfig::load(Some(f.path()), []).unwrap_err().0;
        assert!(errs.len() >= 3, "{errs:?}");
    }

    #[test]
    fn environment_overrides_file_values() {
        let f = write("[train]\nbatch_size = 2\n");
        let env = [
            ("MAKEUP__TRAIN__BATCH_SIZE".to_string(), "4".to_string()),
            ("MAKEUP__ADAPTERS__PARSER".to_string(), "none".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let cfg = RunConfig::load(Some(f.path()), env).unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.adapters.parser, ParserKind::None);

        let bad = [("MAKEUP__TRAIN".to_string(), "1".to_string())];
        assert!(RunConfig::load(None, bad).is_err());
    }

    #[test]
    fn rendered_config_reloads_identically() {
        let mut cfg = RunConfig::default();
        cfg.train.total_steps = 17;
        cfg.adapters.makeup_classes = Some(vec![FaceClass::UpperLip, FaceClass::LowerLip]);
        let f = write(&cfg.to_toml());
        assert_eq!(RunConfig::load(Some(f.path()), []).unwrap(), cfg);
    }
}
