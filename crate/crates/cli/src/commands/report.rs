//! `report`: rebuild a summary CSV from a persisted result log. A pure
//! function of the logs; never retrains or re-evaluates.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::Result;

use crate::common::SearchReport;
use crate::rows::{read_rows, summary_csv};

pub fn run(eval_log: &Path, out: &Path, search_report: Option<PathBuf>) -> Result<()> {
    let mut rows = read_rows(eval_log)?;
    if let Some(path) = search_report {
        let report = SearchReport::load(&path)?;
        let keep: BTreeSet<&str> =
            report.candidates.iter().map(|c| c.encoding.as_str()).collect();
        rows.retain(|r| keep.contains(r.arch.as_str()));
    }
    let csv = summary_csv(&rows)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, &csv)?;
    print!("{csv}");
    Ok(())
}
