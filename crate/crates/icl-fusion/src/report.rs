//! Report emission: versioned CSV files, per-query JSONL records, and the
//! plot-script artifact.
//!
//! Every CSV starts with a `# schema=...` comment line followed by a fixed
//! header, so re-running with identical seeds reproduces identical
//! non-timing fields byte for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::CostReport;
use crate::error::Result;

pub const REPORT_SCHEMA: &str = "icl-fusion.report.v1";

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "# schema={REPORT_SCHEMA}")?;
    let mut wtr = csv::Writer::from_writer(file);
    for row in rows {
        wtr.serialize(row).map_err(std::io::Error::other)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_cost_reports_csv(path: &Path, reports: &[CostReport]) -> Result<()> {
    write_csv(path, reports)
}

/// One evaluated query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: usize,
    pub n_shots: usize,
    pub mode: String,
    pub output: String,
    /// None is the +inf sentinel (overflowed perplexity).
    pub ppl: Option<f64>,
    pub ppl_overflowed: bool,
    pub prompt_len: usize,
    pub wall_time_ns: u64,
}

pub fn write_query_records_jsonl(path: &Path, records: &[QueryRecord]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for rec in records {
        writeln!(file, "{}", serde_json::to_string(rec)?)?;
    }
    Ok(())
}

pub fn read_query_records_jsonl(path: &Path) -> Result<Vec<QueryRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// One segment's attention fraction in one analyzed prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttnMassRow {
    pub n_shots: usize,
    pub query_id: usize,
    pub layer: usize,
    pub segment: String,
    /// Coarse grouping: demo_visual, demo_text, query_visual, query_text.
    pub group: String,
    pub fraction: f64,
}

pub fn write_attention_mass_csv(path: &Path, rows: &[AttnMassRow]) -> Result<()> {
    write_csv(path, rows)
}

const PLOT_SCRIPT: &str = r##"#!/usr/bin/env python3
"""Plot the CSV reports emitted next to this script.

Usage: python3 plot.py [out_dir]
Produces memory/throughput/perplexity/attention figures as PNG files.
"""
import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt


def read(path):
    with open(path) as f:
        lines = [l for l in f if not l.startswith("#")]
    return list(csv.DictReader(lines))


def by_mode(rows, field):
    out = defaultdict(list)
    for r in rows:
        out[r["mode"]].append((int(r["n_shots"]), float(r[field] or "nan")))
    for v in out.values():
        v.sort()
    return out


def main(out_dir):
    out = Path(out_dir)
    cells = read(out / "cells.csv")

    for field, fname, ylabel in [
        ("peak_bytes_estimate", "memory.png", "peak bytes (analytical)"),
        ("tokens_per_second", "throughput.png", "tokens / s"),
        ("ppl_mean", "perplexity.png", "mean PPL over finite queries"),
        ("prompt_len", "prompt_len.png", "prompt rows"),
    ]:
        plt.figure(figsize=(5, 3.5))
        for mode, pts in sorted(by_mode(cells, field).items()):
            xs = [p[0] for p in pts]
            ys = [p[1] for p in pts]
            plt.plot(xs, ys, marker="o", label=mode)
        plt.xlabel("shots")
        plt.ylabel(ylabel)
        plt.legend()
        plt.tight_layout()
        plt.savefig(out / fname, dpi=150)
        plt.close()

    attn = out / "attn_mass.csv"
    if attn.exists():
        rows = read(attn)
        groups = defaultdict(float)
        counts = defaultdict(int)
        for r in rows:
            groups[r["group"]] += float(r["fraction"])
            counts[r["group"]] += 1
        labels = sorted(groups)
        vals = [groups[g] / max(counts[g], 1) for g in labels]
        plt.figure(figsize=(5, 3.5))
        plt.bar(labels, vals)
        plt.ylabel("mean attention fraction")
        plt.xticks(rotation=20)
        plt.tight_layout()
        plt.savefig(out / "attention_mass.png", dpi=150)
        plt.close()

    print(f"wrote figures to {out}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else ".")
"##;

/// Drop the plot-script artifact next to the CSVs.
pub fn write_plot_script(dir: &Path) -> Result<()> {
    fs::write(dir.join("plot.py"), PLOT_SCRIPT)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_schema_line_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cells.csv");
        let report = CostReport {
            mode: "fused".into(),
            n_shots: 2,
            visual_tokens_per_demo: 16,
            mean_text_tokens: 12.0,
            remaining_ratio: 0.43,
            prompt_len: 58,
            attn_elements_aggregation: 100,
            attn_elements_generation: 200,
            peak_bytes_estimate: 4096,
            tokens_per_second: 10.0,
            queries_per_second: 1.0,
            ppl_mean: None,
            ppl_inf_count: 1,
        };
        write_cost_reports_csv(&path, &[report]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), format!("# schema={REPORT_SCHEMA}"));
        assert!(lines.next().unwrap().starts_with("mode,n_shots,"));
        let row = lines.next().unwrap();
        assert!(row.starts_with("fused,2,16,12.0,"));
        assert!(row.contains(",,1"), "empty cell for the absent ppl mean");
    }

    #[test]
    fn query_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("queries.jsonl");
        let records = vec![
            QueryRecord {
                query_id: 0,
                n_shots: 4,
                mode: "baseline".into(),
                output: "a ruby panel.".into(),
                ppl: Some(12.5),
                ppl_overflowed: false,
                prompt_len: 99,
                wall_time_ns: 1234,
            },
            QueryRecord {
                query_id: 1,
                n_shots: 4,
                mode: "fused".into(),
                output: String::new(),
                ppl: None,
                ppl_overflowed: true,
                prompt_len: 40,
                wall_time_ns: 777,
            },
        ];
        write_query_records_jsonl(&path, &records).unwrap();
        let back = read_query_records_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].output, "a ruby panel.");
        assert!(back[1].ppl.is_none() && back[1].ppl_overflowed);
    }

    #[test]
    fn plot_script_lands_next_to_reports() {
        let dir = tempfile::tempdir().unwrap();
        write_plot_script(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("plot.py")).unwrap();
        assert!(text.contains("cells.csv"));
    }
}
