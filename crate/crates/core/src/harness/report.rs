//! Regenerates summaries and plot data from a results directory.

use std::fmt::Write;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use super::aggregate::{aggregate, aggregate_csv, bound_vs_shots_csv, AggregateStats, VacuousRule};
use super::{EpisodeResult, AGGREGATE_FILE, BOUND_VS_SHOTS_FILE, EPISODES_FILE};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Report {
    pub records: usize,
    /// Malformed lines that were skipped.
    pub skipped: usize,
    pub stats: Vec<AggregateStats>,
    pub summary: String,
}

/// Parses `episodes.jsonl` in `dir`, skipping malformed lines.
pub fn read_results(dir: &Path) -> Result<(Vec<EpisodeResult>, usize)> {
    let path = dir.join(EPISODES_FILE);
    let file = fs::File::open(&path).map_err(|_| Error::NoResults(format!("no results in {}", dir.display())))?;
    let mut out = Vec::new();
    let mut skipped = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<EpisodeResult>(&line) {
            Ok(r) => out.push(r),
            Err(e) => {
                log::warn!("{}:{}: skipping malformed record: {e}", path.display(), i + 1);
                skipped += 1;
            }
        }
    }
    Ok((out, skipped))
}

fn summary_text(stats: &[AggregateStats], records: usize, skipped: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "episodes: {records} (skipped {skipped} malformed)");
    let _ = writeln!(
        s,
        "{:<13} {:>5} {:>5} {:>9} {:>8} {:>8} {:>8} {:>9} {:>9}",
        "method", "shots", "n", "nonvac%", "min", "median", "max", "med.gap", "query.acc"
    );
    let short = |v: f64| format!("{v:.4}");
    for a in stats {
        let _ = writeln!(
            s,
            "{:<13} {:>5} {:>5} {:>9.2} {:>8} {:>8} {:>8} {:>9} {:>9}",
            a.method.name(),
            a.shots.map(|v| v.to_string()).unwrap_or_else(|| "all".into()),
            a.episodes,
            a.non_vacuous_pct,
            short(a.min_bound),
            short(a.median_bound),
            short(a.max_bound),
            a.median_gap.map(short).unwrap_or_else(|| "-".into()),
            a.mean_query_accuracy.map(short).unwrap_or_else(|| "-".into()),
        );
    }
    s
}

/// Writes `report/aggregate.csv`, `report/bound_vs_shots.csv` and
/// `report/summary.txt` under `dir`. Same inputs give byte-identical files.
pub fn report(dir: &Path, rule: VacuousRule) -> Result<Report> {
    let (results, skipped) = read_results(dir)?;
    if results.is_empty() {
        return Err(Error::NoResults(format!("no results in {}", dir.display())));
    }
    let stats = aggregate(&results, rule)?;
    let out = dir.join("report");
    fs::create_dir_all(&out)?;
    fs::write(out.join(AGGREGATE_FILE), aggregate_csv(&stats))?;
    fs::write(out.join(BOUND_VS_SHOTS_FILE), bound_vs_shots_csv(&results, rule)?)?;
    let summary = summary_text(&stats, results.len(), skipped);
    fs::write(out.join("summary.txt"), &summary)?;
    Ok(Report {
        records: results.len(),
        skipped,
        stats,
        summary,
    })
}
