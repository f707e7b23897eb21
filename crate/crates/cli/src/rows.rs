//! Result rows: one evaluation outcome per (method, arch, seed), persisted
//! as newline-delimited JSON and summarized as CSV.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

/// One evaluated cell. Wall-clock cost is informational and therefore kept
/// out of the summary CSV, which must be bit-reproducible across runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub arch: String,
    pub flops: u64,
    pub params: u64,
    pub top1: f64,
    pub seed: u64,
    pub wall_secs: f64,
}

/// Append records to a newline-delimited JSON log, one write per line.
pub fn append_ndjson<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    for r in records {
        let mut line = serde_json::to_string(r)?;
        line.push('\n');
        f.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows = vec![];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ResultRow = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: bad result row", path.display(), i + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Deterministic summary: per-seed rows sorted by (method, flops, arch,
/// seed), then one `mean` row per (method, arch). Duplicate keys must agree;
/// conflicting duplicates are an error. Arch encodings contain commas, so
/// that field is always quoted.
pub fn summary_csv(rows: &[ResultRow]) -> Result<String> {
    let mut unique: BTreeMap<(String, u64, String, u64), ResultRow> = BTreeMap::new();
    for r in rows {
        let key = (r.method.clone(), r.flops, r.arch.clone(), r.seed);
        if let Some(prev) = unique.get(&key) {
            if prev.top1 != r.top1 || prev.params != r.params {
                bail!(
                    "conflicting rows for method={} arch={} seed={}",
                    r.method,
                    r.arch,
                    r.seed
                );
            }
        } else {
            unique.insert(key, r.clone());
        }
    }
    let mut out = String::from("method,arch,flops,params,top1,seed\n");
    let mut groups: BTreeMap<(String, u64, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in unique.values() {
        out.push_str(&format!(
            "{},\"{}\",{},{},{:.4},{}\n",
            r.method, r.arch, r.flops, r.params, r.top1, r.seed
        ));
        groups.entry((r.method.clone(), r.flops, r.arch.clone())).or_default().push(r);
    }
    for ((method, flops, arch), members) in &groups {
        let mean = members.iter().map(|r| r.top1).sum::<f64>() / members.len() as f64;
        out.push_str(&format!(
            "{},\"{}\",{},{},{:.4},mean\n",
            method, arch, flops, members[0].params, mean
        ));
    }
    Ok(out)
}
