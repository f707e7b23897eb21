//! Shared helpers: error-to-exit-code mapping, space loading, architecture
//! tokens, train-config assembly, and the search-report file format.

use std::path::Path;

use anyhow::{Context, Result};
use enas_core::{
    ArchConfig, DistillView, Error as CoreError, ScoredCandidate, SearchSpace, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::methods::Method;

/// A mistake in flags or config, as opposed to a failure inside the run.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Stable exit codes, documented in `--help`.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Data(_) => 3,
                CoreError::SpaceValidation(_)
                | CoreError::InvalidArch(_)
                | CoreError::DecodeError { .. }
                | CoreError::MissingCalibration { .. } => 4,
                CoreError::Io(_) | CoreError::Format { .. } => 5,
                CoreError::InfeasibleConstraint { .. } => 6,
                CoreError::Diverged { .. } => 7,
                CoreError::ScoringError { .. } => 8,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 5;
        }
    }
    1
}

/// A space given as a known name, or as a path to a space description file.
pub fn load_space(spec: &str) -> Result<SearchSpace> {
    if let Ok(space) = SearchSpace::named(spec) {
        return Ok(space);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(config_error(format!(
            "`{spec}` is neither a known space name nor an existing space file"
        )));
    }
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read space file {spec}"))?;
    Ok(SearchSpace::from_text(&text)?)
}

/// `smallest` | `medium` | `largest` | an architecture encoding.
pub fn resolve_arch(space: &SearchSpace, token: &str) -> Result<ArchConfig> {
    match token {
        "smallest" => Ok(space.smallest()),
        "medium" => Ok(space.medium()),
        "largest" => Ok(space.largest()),
        enc => Ok(ArchConfig::decode(enc, space)?),
    }
}

/// Assemble a TrainConfig from `train.*` keys plus the method's pinned
/// mode/sampling and the run seed.
pub fn train_config(cfg: &mut Config, method: Method, seed: u64) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let distill_view = match cfg.take("train.distill_view") {
        Some(s) => DistillView::parse(&s)?,
        None => d.distill_view,
    };
    Ok(TrainConfig {
        loss_mode: method.loss_mode,
        sampling: method.sampling,
        n_subnets_per_step: cfg.take_parsed("train.n_subnets", d.n_subnets_per_step)?,
        tau: cfg.take_parsed("train.tau", d.tau)?,
        mu: cfg.take_parsed("train.mu", d.mu)?,
        labelled_batch: cfg.take_parsed("train.labelled_batch", d.labelled_batch)?,
        epochs: cfg.take_parsed("train.epochs", d.epochs)?,
        lr0: cfg.take_parsed("train.lr0", d.lr0)?,
        weight_decay: cfg.take_parsed("train.weight_decay", d.weight_decay)?,
        distill_view,
        seed,
    })
}

/// Output of `search`/`narrow`: the scored winner per budget, with enough
/// context to re-check the space and reproduce the scores.
#[derive(Serialize, Deserialize)]
pub struct SearchReport {
    pub space: String,
    pub constraints: Vec<String>,
    pub samples_per_constraint: usize,
    pub seed: u64,
    pub candidates: Vec<ScoredCandidate>,
}

impl SearchReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SearchReport> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?;
        Ok(serde_json::from_str(&text)
            .with_context(|| format!("{}: not a search report", path.display()))?)
    }

    /// Decode all candidates against a space, verifying it matches the one
    /// the report was built on (class count aside).
    pub fn decode_candidates(&self, space: &SearchSpace) -> Result<Vec<ArchConfig>> {
        let report_space =
            SearchSpace::from_text(&self.space)?.with_classes(space.num_classes);
        if report_space.to_text() != space.to_text() {
            return Err(CoreError::SpaceValidation(
                "search report was built on a different space".into(),
            )
            .into());
        }
        let mut archs = vec![];
        for c in &self.candidates {
            archs.push(c.arch(space)?);
        }
        Ok(archs)
    }
}
