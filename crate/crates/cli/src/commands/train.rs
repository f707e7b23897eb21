//! `train`: run one method on one dataset; write the model and a per-step
//! metrics log.

use std::path::{Path, PathBuf};

use anyhow::Result;
use enas_core::trainer::{train, train_single};
use enas_core::{Dataset, Standalone, StepRecord, Supernet};

use crate::common::{config_error, load_space, resolve_arch, train_config, SearchReport};
use crate::config::Config;
use crate::methods;
use crate::rows::append_ndjson;

pub fn run(
    config: &Path,
    data_path: &Path,
    out: &Path,
    seed: Option<u64>,
    method_flag: Option<String>,
    space_flag: Option<String>,
    narrowed: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = Config::load(config)?;
    let method_label = method_flag
        .or_else(|| cfg.take("method"))
        .ok_or_else(|| config_error("no method: pass --method or set `method` in the config"))?;
    let method = methods::lookup(&method_label)?;
    let space_spec = space_flag
        .or_else(|| cfg.take("space"))
        .ok_or_else(|| config_error("no space: pass --space or set `space` in the config"))?;
    let seed = seed.unwrap_or(0);
    let arch_token = cfg.take("train.arch");
    let tc = train_config(&mut cfg, method, seed)?;
    cfg.finish()?;

    let data = Dataset::load(data_path)?;
    let space = load_space(&space_spec)?.with_classes(data.num_classes);

    let narrowed_archs = match (&narrowed, method.narrowed) {
        (Some(path), true) => Some(SearchReport::load(path)?.decode_candidates(&space)?),
        (None, true) => {
            return Err(config_error(format!(
                "method `{method_label}` needs --narrowed <candidate file from narrow>"
            )));
        }
        (Some(_), false) => {
            return Err(config_error(format!(
                "method `{method_label}` does not train on a narrowed candidate list"
            )));
        }
        (None, false) => None,
    };
    if !method.single && arch_token.is_some() {
        return Err(config_error(format!(
            "`train.arch` only applies to single-network methods, not `{method_label}`"
        )));
    }

    std::fs::create_dir_all(out)?;
    let model_path = out.join("model.enas");
    let metrics_path = out.join("metrics.ndjson");
    let t0 = std::time::Instant::now();
    let records: Vec<StepRecord>;
    if method.single {
        let arch = resolve_arch(&space, arch_token.as_deref().unwrap_or("smallest"))?;
        let mut net = Standalone::init(space, arch, seed)?;
        records = train_single(&mut net, &data, &tc)?;
        net.save(&model_path)?;
    } else {
        let mut net = Supernet::init(space, seed)?;
        records = train(&mut net, &data, &tc, narrowed_archs.as_deref())?;
        net.save(&model_path)?;
    }
    // Fresh log per training run; appends are per-line within the run.
    if metrics_path.exists() {
        std::fs::remove_file(&metrics_path)?;
    }
    append_ndjson(&metrics_path, &records)?;
    eprintln!(
        "trained {method_label} for {} steps in {:.1}s; wrote {} and {}",
        records.len(),
        t0.elapsed().as_secs_f64(),
        model_path.display(),
        metrics_path.display()
    );
    Ok(())
}
