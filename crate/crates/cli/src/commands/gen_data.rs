//! `gen-data`: synthesize a dataset file with labelled/unlabelled/test/
//! calibration splits, deterministic in the seed.

use std::path::Path;

use anyhow::{Context, Result};
use enas_core::data::gen_synthetic;

use crate::config::Config;

pub fn run(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = Config::load(config)?;
    let classes: usize = cfg.take_parsed("data.classes", 10)?;
    let per_class: usize = cfg.take_parsed("data.per_class", 100)?;
    let resolution: usize = cfg.take_parsed("data.resolution", 16)?;
    let noise_sigma: f64 = cfg.take_parsed("data.noise_sigma", 0.1)?;
    let labelled_per_class: usize = cfg.take_parsed("data.labelled_per_class", 10)?;
    let test_fraction: f64 = cfg.take_parsed("data.test_fraction", 0.2)?;
    let calib_count: usize = cfg.take_parsed("data.calib_count", 128)?;
    let cfg_seed: u64 = cfg.take_parsed("data.seed", 0)?;
    let seed = seed.unwrap_or(cfg_seed);
    cfg.finish()?;

    let data = gen_synthetic(classes, per_class, resolution, noise_sigma, seed)?
        .split(labelled_per_class, test_fraction, calib_count, seed)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("cannot create {}", dir.display()))?;
        }
    }
    data.save(out)?;
    eprintln!(
        "wrote {} ({} images, {} labelled, {} unlabelled, {} test, {} calibration)",
        out.display(),
        data.len(),
        data.indices_with_tag(enas_core::SplitTag::Labelled).len(),
        data.indices_with_tag(enas_core::SplitTag::Unlabelled).len(),
        data.indices_with_tag(enas_core::SplitTag::Test).len(),
        data.indices_with_tag(enas_core::SplitTag::Calibration).len(),
    );
    Ok(())
}
