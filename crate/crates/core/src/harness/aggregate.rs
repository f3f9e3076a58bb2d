//! Per-method summary statistics over episodes.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::format::fmt_f64;
use super::{EpisodeResult, Method, MethodResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VacuousRule {
    /// `1 - 1/k` for the 0/1 loss, `C` for any other bounded loss.
    ChanceLevel,
    Fixed(f64),
}

impl VacuousRule {
    pub fn threshold(&self, k: usize, loss_name: &str, c: f64) -> f64 {
        match *self {
            VacuousRule::Fixed(t) => t,
            VacuousRule::ChanceLevel if loss_name == "zero_one" => 1.0 - 1.0 / k as f64,
            VacuousRule::ChanceLevel => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub method: Method,
    /// `None` pools every shot setting.
    pub shots: Option<usize>,
    pub episodes: usize,
    pub non_vacuous_pct: f64,
    pub min_bound: f64,
    pub median_bound: f64,
    pub max_bound: f64,
    pub mean_support_risk: f64,
    pub mean_complexity: f64,
    /// Gap is `bound - query risk`; absent without query data.
    pub median_gap: Option<f64>,
    pub mean_gap: Option<f64>,
    pub mean_query_risk: Option<f64>,
    pub mean_query_accuracy: Option<f64>,
    /// Episodes whose query risk exceeds the bound.
    pub violations: usize,
}

/// Middle order statistic; the mean of the two middle values for even length.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("median of an empty list"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn all_some(values: &[Option<f64>]) -> Option<Vec<f64>> {
    values.iter().copied().collect()
}

fn stats_for(method: Method, shots: Option<usize>, rows: &[(usize, &MethodResult)], rule: VacuousRule) -> Result<AggregateStats> {
    let bounds: Vec<f64> = rows.iter().map(|(_, r)| r.certificate.bound).collect();
    let nonvac = rows
        .iter()
        .filter(|(k, r)| {
            let c = &r.certificate;
            c.bound < rule.threshold(*k, &c.loss_name, c.c)
        })
        .count();
    let qr: Vec<Option<f64>> = rows.iter().map(|(_, r)| r.query_risk).collect();
    let qa: Vec<Option<f64>> = rows.iter().map(|(_, r)| r.query_accuracy).collect();
    let gaps = all_some(&qr).map(|q| q.iter().zip(&bounds).map(|(q, b)| b - q).collect::<Vec<f64>>());
    let violations = rows
        .iter()
        .filter(|(_, r)| r.query_risk.is_some_and(|q| q > r.certificate.bound))
        .count();
    Ok(AggregateStats {
        method,
        shots,
        episodes: rows.len(),
        non_vacuous_pct: 100.0 * nonvac as f64 / rows.len() as f64,
        min_bound: bounds.iter().copied().fold(f64::INFINITY, f64::min),
        median_bound: median(&bounds)?,
        max_bound: bounds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_support_risk: mean(&rows.iter().map(|(_, r)| r.certificate.r).collect::<Vec<_>>()),
        mean_complexity: mean(&rows.iter().map(|(_, r)| r.certificate.complexity).collect::<Vec<_>>()),
        median_gap: gaps.as_deref().map(median).transpose()?,
        mean_gap: gaps.as_deref().map(mean),
        mean_query_risk: all_some(&qr).map(|v| mean(&v)),
        mean_query_accuracy: all_some(&qa).map(|v| mean(&v)),
        violations,
    })
}

/// One row per `(method, shots)` plus a pooled row per method, methods in
/// canonical order and shots ascending.
pub fn aggregate(results: &[EpisodeResult], rule: VacuousRule) -> Result<Vec<AggregateStats>> {
    if results.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty result list"));
    }
    let mut groups: BTreeMap<(Method, usize), Vec<(usize, &MethodResult)>> = BTreeMap::new();
    for ep in results {
        for r in &ep.methods {
            groups.entry((r.method, ep.shots)).or_default().push((ep.k, r));
        }
    }
    let mut out = Vec::new();
    for method in Method::ALL {
        let per: Vec<_> = groups.iter().filter(|((m, _), _)| *m == method).collect();
        if per.is_empty() {
            continue;
        }
        let mut pooled = Vec::new();
        for ((_, shots), rows) in per {
            out.push(stats_for(method, Some(*shots), rows, rule)?);
            pooled.extend(rows.iter().copied());
        }
        out.push(stats_for(method, None, &pooled, rule)?);
    }
    Ok(out)
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn aggregate_csv(stats: &[AggregateStats]) -> String {
    let mut s = String::from(
        "method,shots,episodes,non_vacuous_pct,min_bound,median_bound,max_bound,mean_support_risk,mean_complexity,median_gap,mean_gap,mean_query_risk,mean_query_accuracy,violations\n",
    );
    for a in stats {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            a.method.name(),
            a.shots.map(|v| v.to_string()).unwrap_or_else(|| "all".into()),
            a.episodes,
            fmt_f64(a.non_vacuous_pct),
            fmt_f64(a.min_bound),
            fmt_f64(a.median_bound),
            fmt_f64(a.max_bound),
            fmt_f64(a.mean_support_risk),
            fmt_f64(a.mean_complexity),
            opt(a.median_gap),
            opt(a.mean_gap),
            opt(a.mean_query_risk),
            opt(a.mean_query_accuracy),
            a.violations,
        );
    }
    s
}

/// Plot data for bound against shots: order statistics of the bound and
/// medians of its two terms and of the query risk. The complexity is also
/// given as its natural log.
pub fn bound_vs_shots_csv(results: &[EpisodeResult], rule: VacuousRule) -> Result<String> {
    let stats = aggregate(results, rule)?;
    let mut groups: BTreeMap<(usize, Method), Vec<&MethodResult>> = BTreeMap::new();
    for ep in results {
        for r in &ep.methods {
            groups.entry((ep.shots, r.method)).or_default().push(r);
        }
    }
    let mut s = String::from(
        "shots,method,episodes,min_bound,median_bound,max_bound,non_vacuous_pct,median_support_risk,median_query_risk,median_complexity,ln_median_complexity\n",
    );
    for ((shots, method), rows) in &groups {
        let a = stats
            .iter()
            .find(|a| a.method == *method && a.shots == Some(*shots))
            .expect("aggregate covers every group");
        let sr: Vec<f64> = rows.iter().map(|r| r.certificate.r).collect();
        let cx: Vec<f64> = rows.iter().map(|r| r.certificate.complexity).collect();
        let qr: Option<Vec<f64>> = rows.iter().map(|r| r.query_risk).collect();
        let mc = median(&cx)?;
        let _ = writeln!(
            s,
            "{shots},{},{},{},{},{},{},{},{},{},{}",
            method.name(),
            rows.len(),
            fmt_f64(a.min_bound),
            fmt_f64(a.median_bound),
            fmt_f64(a.max_bound),
            fmt_f64(a.non_vacuous_pct),
            fmt_f64(median(&sr)?),
            opt(qr.as_deref().map(median).transpose()?),
            fmt_f64(mc),
            fmt_f64(mc.ln()),
        );
    }
    Ok(s)
}
