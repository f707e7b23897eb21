//! `eval`: recalibrate a trained model for the requested architectures and
//! append one result row per evaluation.

use std::path::Path;

use anyhow::Result;
use enas_core::supernet::load_model;
use enas_core::trainer::{calibration_batch, evaluate_single, recalibrate_and_evaluate};
use enas_core::{Dataset, LoadedModel};

use crate::common::{config_error, resolve_arch};
use crate::rows::{append_ndjson, ResultRow};

pub fn run(
    model_path: &Path,
    data_path: &Path,
    method: &str,
    seed: u64,
    out: &Path,
    arch_flags: &[String],
) -> Result<()> {
    let data = Dataset::load(data_path)?;
    let model = load_model::<f32>(model_path)?;
    let mut rows = vec![];
    match model {
        LoadedModel::Shared(mut net) => {
            let defaults = ["smallest".to_string(), "medium".to_string(), "largest".to_string()];
            let tokens: &[String] =
                if arch_flags.is_empty() { &defaults } else { arch_flags };
            for token in tokens {
                let arch = resolve_arch(net.space(), token)?;
                let t0 = std::time::Instant::now();
                let top1 = recalibrate_and_evaluate(&mut net, &arch, &data)?;
                let res = net.space().count_resources(&arch, net.space().resolution)?;
                rows.push(ResultRow {
                    method: method.to_string(),
                    arch: arch.encode(),
                    flops: res.flops,
                    params: res.params,
                    top1,
                    seed,
                    wall_secs: t0.elapsed().as_secs_f64(),
                });
            }
        }
        LoadedModel::Single(mut net) => {
            let own = net.arch.encode();
            for flag in arch_flags {
                let requested = resolve_arch(&net.space, flag)?.encode();
                if requested != own {
                    return Err(config_error(format!(
                        "model holds a single network for {own}, not {requested}"
                    )));
                }
            }
            let t0 = std::time::Instant::now();
            let calib = calibration_batch(&data)?;
            net.recalibrate(&calib)?;
            let top1 = evaluate_single(&net, &data)?;
            let res = net.space.count_resources(&net.arch, net.space.resolution)?;
            rows.push(ResultRow {
                method: method.to_string(),
                arch: own,
                flops: res.flops,
                params: res.params,
                top1,
                seed,
                wall_secs: t0.elapsed().as_secs_f64(),
            });
        }
    }
    append_ndjson(out, &rows)?;
    for r in &rows {
        eprintln!("{} {} top1 {:.4}", r.method, r.arch, r.top1);
    }
    Ok(())
}
