//! `search` and `narrow`: training-free scoring of constraint-feasible
//! architectures. `search` reports one winner per budget; `narrow`
//! additionally formats them as a candidate pool for `train --narrowed`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use enas_core::zeroshot::{narrow_space, zen_score, zero_shot_search};
use enas_core::ConstraintSet;

use crate::common::{load_space, SearchReport};
use crate::config::Config;

pub fn run(
    space_spec: &str,
    constraints_path: &Path,
    out: &Path,
    seed: Option<u64>,
    config: Option<PathBuf>,
    narrow: bool,
) -> Result<()> {
    let mut cfg = match config {
        Some(p) => Config::load(&p)?,
        None => Config::empty(),
    };
    let samples: usize = cfg.take_parsed("search.samples_per_constraint", 64)?;
    let repeats: usize = cfg.take_parsed("search.repeats", 16)?;
    let perturb_eps: f64 = cfg.take_parsed("search.perturb_eps", 1e-2)?;
    let cfg_seed: u64 = cfg.take_parsed("search.seed", 0)?;
    let seed = seed.unwrap_or(cfg_seed);
    cfg.finish()?;

    let space = load_space(space_spec)?;
    let text = std::fs::read_to_string(constraints_path)
        .with_context(|| format!("cannot read {}", constraints_path.display()))?;
    let constraints = ConstraintSet::parse(&text)?;
    let scorer = |arch: &enas_core::ArchConfig| zen_score(&space, arch, repeats, perturb_eps, seed);
    let candidates = if narrow {
        narrow_space(&space, scorer, &constraints, samples, seed)?
    } else {
        zero_shot_search(&space, scorer, &constraints, samples, seed)?
    };
    for c in &candidates {
        eprintln!(
            "budget {}: {} score {:.4} ({} flops, {} params)",
            constraints.constraints[c.constraint_id],
            c.encoding,
            c.score,
            c.resources.flops,
            c.resources.params
        );
    }
    let report = SearchReport {
        space: space.to_text(),
        constraints: constraints.constraints.iter().map(|c| c.to_string()).collect(),
        samples_per_constraint: samples,
        seed,
        candidates,
    };
    report.save(out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}
