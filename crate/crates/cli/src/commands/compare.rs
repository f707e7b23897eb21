//! `compare`: the full multi-method protocol. For every (method, seed) cell:
//! train, then evaluate the smallest, medium, and largest architectures.
//! Shared-network methods evaluate subnet slices of one trained supernet;
//! single-network methods train each architecture separately.

use std::path::{Path, PathBuf};

use anyhow::Result;
use enas_core::trainer::{evaluate_single, recalibrate_and_evaluate, train, train_single};
use enas_core::zeroshot::{narrow_space, zen_score};
use enas_core::{ArchConfig, ConstraintSet, Dataset, SearchSpace, Standalone, Supernet};

use crate::common::{config_error, load_space, train_config, SearchReport};
use crate::config::Config;
use crate::methods::{self, Method};
use crate::rows::{append_ndjson, summary_csv, ResultRow};

pub fn run(
    config: &Path,
    data_path: &Path,
    out: &Path,
    constraints: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = Config::load(config)?;
    let space_spec = cfg
        .take("space")
        .ok_or_else(|| config_error("compare needs a `space` key"))?;
    let methods_key = cfg
        .take("compare.methods")
        .ok_or_else(|| config_error("compare needs `compare.methods` (comma list)"))?;
    let seeds_key = cfg.take("compare.seeds").unwrap_or_else(|| "0,1,2".into());
    let methods: Vec<Method> = methods_key
        .split(',')
        .map(|label| methods::lookup(label.trim()))
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = seeds_key
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| config_error(format!("bad seed `{}` in compare.seeds", s.trim())))
        })
        .collect::<std::result::Result<_, _>>()?;
    if methods.is_empty() || seeds.is_empty() {
        return Err(config_error("compare needs at least one method and one seed"));
    }

    let data = Dataset::load(data_path)?;
    let space = load_space(&space_spec)?.with_classes(data.num_classes);
    std::fs::create_dir_all(out)?;

    // One narrowed pool, shared by every narrowed cell.
    let narrowed_archs: Option<Vec<ArchConfig>> = if methods.iter().any(|m| m.narrowed) {
        let samples: usize = cfg.take_parsed("search.samples_per_constraint", 64)?;
        let repeats: usize = cfg.take_parsed("search.repeats", 16)?;
        let perturb_eps: f64 = cfg.take_parsed("search.perturb_eps", 1e-2)?;
        let search_seed: u64 = cfg.take_parsed("search.seed", 0)?;
        let path = constraints.ok_or_else(|| {
            config_error("a narrowed method is listed: pass --constraints <budget file>")
        })?;
        let text = std::fs::read_to_string(&path)?;
        let set = ConstraintSet::parse(&text)?;
        let scorer = |a: &ArchConfig| zen_score(&space, a, repeats, perturb_eps, search_seed);
        let candidates = narrow_space(&space, scorer, &set, samples, search_seed)?;
        let report = SearchReport {
            space: space.to_text(),
            constraints: set.constraints.iter().map(|c| c.to_string()).collect(),
            samples_per_constraint: samples,
            seed: search_seed,
            candidates,
        };
        report.save(&out.join("narrowed.json"))?;
        Some(report.decode_candidates(&space)?)
    } else {
        None
    };

    // `train.*` keys are consumed once into a template; each cell then pins
    // its own mode, sampling, and seed.
    let template = train_config(&mut cfg, methods[0], 0)?;
    cfg.finish()?;

    let eval_archs =
        [("smallest", space.smallest()), ("medium", space.medium()), ("largest", space.largest())];
    let mut all_rows: Vec<ResultRow> = vec![];
    let eval_log = out.join("eval.ndjson");
    for method in &methods {
        for &seed in &seeds {
            let tc = enas_core::TrainConfig {
                loss_mode: method.loss_mode,
                sampling: method.sampling,
                seed,
                ..template.clone()
            };
            let rows =
                run_cell(*method, &space, &data, &tc, narrowed_archs.as_deref(), seed, out, &eval_archs)?;
            append_ndjson(&eval_log, &rows)?;
            all_rows.extend(rows);
        }
    }
    let csv = summary_csv(&all_rows)?;
    std::fs::write(out.join("summary.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    method: Method,
    space: &SearchSpace,
    data: &Dataset,
    tc: &enas_core::TrainConfig,
    narrowed: Option<&[ArchConfig]>,
    seed: u64,
    out: &Path,
    eval_archs: &[(&str, ArchConfig)],
) -> Result<Vec<ResultRow>> {
    let mut rows = vec![];
    if method.single {
        for (token, arch) in eval_archs {
            let t0 = std::time::Instant::now();
            let mut net = Standalone::init(space.clone(), arch.clone(), seed)?;
            let records = train_single(&mut net, data, tc)?;
            let metrics = out.join(format!("metrics-{}-s{seed}-{token}.ndjson", method.label));
            if metrics.exists() {
                std::fs::remove_file(&metrics)?;
            }
            append_ndjson(&metrics, &records)?;
            let calib = enas_core::trainer::calibration_batch(data)?;
            net.recalibrate(&calib)?;
            let top1 = evaluate_single(&net, data)?;
            let res = space.count_resources(arch, space.resolution)?;
            rows.push(ResultRow {
                method: method.label.to_string(),
                arch: arch.encode(),
                flops: res.flops,
                params: res.params,
                top1,
                seed,
                wall_secs: t0.elapsed().as_secs_f64(),
            });
            eprintln!(
                "{} seed {seed} {token}: top1 {top1:.4} ({:.0}s)",
                method.label,
                t0.elapsed().as_secs_f64()
            );
        }
    } else {
        let t0 = std::time::Instant::now();
        let mut net = Supernet::init(space.clone(), seed)?;
        let narrowed = if method.narrowed { narrowed } else { None };
        let records = train(&mut net, data, tc, narrowed)?;
        let metrics = out.join(format!("metrics-{}-s{seed}.ndjson", method.label));
        if metrics.exists() {
            std::fs::remove_file(&metrics)?;
        }
        append_ndjson(&metrics, &records)?;
        let train_secs = t0.elapsed().as_secs_f64();
        for (token, arch) in eval_archs {
            let t1 = std::time::Instant::now();
            let top1 = recalibrate_and_evaluate(&mut net, arch, data)?;
            let res = space.count_resources(arch, space.resolution)?;
            rows.push(ResultRow {
                method: method.label.to_string(),
                arch: arch.encode(),
                flops: res.flops,
                params: res.params,
                top1,
                seed,
                wall_secs: train_secs + t1.elapsed().as_secs_f64(),
            });
            eprintln!("{} seed {seed} {token}: top1 {top1:.4}", method.label);
        }
        eprintln!("{} seed {seed}: trained in {train_secs:.0}s", method.label);
    }
    Ok(rows)
}
