//! Result aggregation and reporting.
//!
//! Evaluation produces one accuracy per (variant, dataset, shot count,
//! seed). This module groups those into per-cell summaries, computes the
//! two headline comparisons (few-shot vs zero-shot within a variant, and
//! meta-trained vs plain LM at the same shot count), and renders the whole
//! report as JSON and CSV.
//!
//! Reports are a pure function of their inputs: rows are sorted, floats are
//! printed with Rust's shortest-roundtrip formatting, and provenance is the
//! config fingerprint plus a compile-time build id. No wall-clock values
//! appear here; timestamps belong in run logs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Compile-time identity of the binary that produced a report.
pub fn build_id() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// One evaluated cell: a single variant, dataset, shot count, and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub variant: String,
    pub dataset: String,
    pub k: usize,
    pub seed: u64,
    pub accuracy: f64,
}

/// Per-(variant, dataset, k) summary across seeds, in seed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub variant: String,
    pub dataset: String,
    pub k: usize,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// One dataset's few-shot vs zero-shot comparison within a variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotGain {
    pub dataset: String,
    pub mean_lo: f64,
    pub mean_hi: f64,
    pub delta: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

/// Does more context help? Compares k = `k_hi` against k = `k_lo` inside
/// `variant`, per dataset, with a per-seed paired sign test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotTrend {
    pub variant: String,
    pub k_lo: usize,
    pub k_hi: usize,
    pub per_dataset: Vec<ShotGain>,
    pub datasets_improved: usize,
    pub n_datasets: usize,
    pub min_p: f64,
    pub pass: bool,
}

/// One dataset's meta-trained vs plain-LM comparison at a fixed k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantGain {
    pub dataset: String,
    pub mean_meta: f64,
    pub mean_plain: f64,
    pub delta: f64,
}

/// Does meta-training the LM help the multimodal model? Compares two
/// variants at the same shot count, per dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantTrend {
    pub meta_variant: String,
    pub plain_variant: String,
    pub k: usize,
    pub per_dataset: Vec<VariantGain>,
    pub datasets_improved: usize,
    pub n_datasets: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_fingerprint: String,
    pub build: String,
    pub seeds: Vec<u64>,
    pub n_eval: usize,
    pub cells: Vec<CellRow>,
    pub shot_trend: ShotTrend,
    pub variant_trend: VariantTrend,
}

/// Which comparisons the report should headline.
#[derive(Debug, Clone)]
pub struct TrendSpec {
    pub meta_variant: String,
    pub plain_variant: String,
    pub k_lo: usize,
    pub k_hi: usize,
}

impl Default for TrendSpec {
    fn default() -> Self {
        TrendSpec {
            meta_variant: "meta-frozen-data1".into(),
            plain_variant: "plain-frozen-data1".into(),
            k_lo: 0,
            k_hi: 3,
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n-1 denominator); 0 for fewer than two points.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    let mut acc = 1.0f64;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// One-sided paired sign test. Under the null each non-tied pair wins with
/// probability 1/2; returns P(at least `wins` wins out of `wins + losses`).
/// Ties carry no information and are excluded; with no informative pairs
/// the test is vacuous and p = 1.
pub fn sign_test_one_sided(wins: usize, losses: usize) -> f64 {
    let n = (wins + losses) as u64;
    if n == 0 {
        return 1.0;
    }
    let denom = 2f64.powi(n as i32);
    let tail: f64 = (wins as u64..=n).map(|j| binomial(n, j)).sum();
    (tail / denom).min(1.0)
}

fn lookup<'a>(
    grouped: &'a BTreeMap<(String, String, usize), BTreeMap<u64, f64>>,
    variant: &str,
    dataset: &str,
    k: usize,
) -> Option<&'a BTreeMap<u64, f64>> {
    grouped.get(&(variant.to_string(), dataset.to_string(), k))
}

/// Fold raw cells into the final report. Input order never matters: cells
/// are grouped and sorted internally, so two runs that produce the same
/// measurements render byte-identical reports.
pub fn build_report(
    config_fingerprint: &str,
    n_eval: usize,
    cells: &[EvalCell],
    spec: &TrendSpec,
) -> Report {
    let mut grouped: BTreeMap<(String, String, usize), BTreeMap<u64, f64>> = BTreeMap::new();
    let mut seeds: BTreeSet<u64> = BTreeSet::new();
    let mut datasets: BTreeSet<String> = BTreeSet::new();
    for c in cells {
        grouped
            .entry((c.variant.clone(), c.dataset.clone(), c.k))
            .or_default()
            .insert(c.seed, c.accuracy);
        seeds.insert(c.seed);
        datasets.insert(c.dataset.clone());
    }

    let rows: Vec<CellRow> = grouped
        .iter()
        .map(|((variant, dataset, k), by_seed)| {
            let per_seed: Vec<f64> = by_seed.values().copied().collect();
            CellRow {
                variant: variant.clone(),
                dataset: dataset.clone(),
                k: *k,
                mean: mean(&per_seed),
                std: sample_std(&per_seed),
                per_seed,
            }
        })
        .collect();

    // Few-shot vs zero-shot inside the headline variant.
    let mut shot_rows = Vec::new();
    for dataset in &datasets {
        let lo = lookup(&grouped, &spec.meta_variant, dataset, spec.k_lo);
        let hi = lookup(&grouped, &spec.meta_variant, dataset, spec.k_hi);
        let (Some(lo), Some(hi)) = (lo, hi) else { continue };
        let (mut wins, mut losses, mut ties) = (0usize, 0usize, 0usize);
        for (seed, &a_hi) in hi {
            let Some(&a_lo) = lo.get(seed) else { continue };
            if a_hi > a_lo {
                wins += 1;
            } else if a_hi < a_lo {
                losses += 1;
            } else {
                ties += 1;
            }
        }
        let lo_vals: Vec<f64> = lo.values().copied().collect();
        let hi_vals: Vec<f64> = hi.values().copied().collect();
        let mean_lo = mean(&lo_vals);
        let mean_hi = mean(&hi_vals);
        shot_rows.push(ShotGain {
            dataset: dataset.clone(),
            mean_lo,
            mean_hi,
            delta: mean_hi - mean_lo,
            wins,
            losses,
            ties,
            p_value: sign_test_one_sided(wins, losses),
        });
    }
    let improved = shot_rows.iter().filter(|r| r.delta > 0.0).count();
    let min_p = shot_rows
        .iter()
        .map(|r| r.p_value)
        .fold(f64::INFINITY, f64::min);
    let n_trend_datasets = shot_rows.len();
    let shot_trend = ShotTrend {
        variant: spec.meta_variant.clone(),
        k_lo: spec.k_lo,
        k_hi: spec.k_hi,
        datasets_improved: improved,
        n_datasets: n_trend_datasets,
        min_p: if min_p.is_finite() { min_p } else { 1.0 },
        pass: n_trend_datasets > 0
            && improved * 3 >= n_trend_datasets * 2
            && min_p < 0.1,
        per_dataset: shot_rows,
    };

    // Meta-trained vs plain LM at the high shot count.
    let mut variant_rows = Vec::new();
    for dataset in &datasets {
        let meta = lookup(&grouped, &spec.meta_variant, dataset, spec.k_hi);
        let plain = lookup(&grouped, &spec.plain_variant, dataset, spec.k_hi);
        let (Some(meta), Some(plain)) = (meta, plain) else { continue };
        let meta_vals: Vec<f64> = meta.values().copied().collect();
        let plain_vals: Vec<f64> = plain.values().copied().collect();
        let mean_meta = mean(&meta_vals);
        let mean_plain = mean(&plain_vals);
        variant_rows.push(VariantGain {
            dataset: dataset.clone(),
            mean_meta,
            mean_plain,
            delta: mean_meta - mean_plain,
        });
    }
    let improved = variant_rows.iter().filter(|r| r.delta > 0.0).count();
    let n_trend_datasets = variant_rows.len();
    let variant_trend = VariantTrend {
        meta_variant: spec.meta_variant.clone(),
        plain_variant: spec.plain_variant.clone(),
        k: spec.k_hi,
        datasets_improved: improved,
        n_datasets: n_trend_datasets,
        pass: n_trend_datasets > 0 && improved * 3 >= n_trend_datasets * 2,
        per_dataset: variant_rows,
    };

    Report {
        config_fingerprint: config_fingerprint.to_string(),
        build: build_id(),
        seeds: seeds.into_iter().collect(),
        n_eval,
        cells: rows,
        shot_trend,
        variant_trend,
    }
}

pub fn to_json(report: &Report) -> Result<String, MetricsError> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

/// Long-format CSV: one line per (variant, dataset, k, seed).
pub fn to_csv(report: &Report) -> String {
    let mut out = String::from("variant,dataset,k,seed,accuracy\n");
    for row in &report.cells {
        for (seed, acc) in report.seeds.iter().zip(&row.per_seed) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.variant, row.dataset, row.k, seed, acc
            ));
        }
    }
    out
}
