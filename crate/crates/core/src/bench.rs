//! Benchmark harness: recall metrics, codebook-usage profilers, and a
//! config-driven sweep over (nprobs, scale, mode) that reports quality,
//! throughput, stage latencies, and operation-count ratios.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_vecs, Dataset, Metric, NeighborTable, VecElem};
use crate::error::{Error, Result};
use crate::index::{Index, TrainParams};
use crate::reference::brute_force_topk;
use crate::search::{search_batch, Mode, QueryResult, SearchParams};
use crate::threshold::TOP_NEIGHBORS;

/// Fraction of queries whose first `k` retrieved ids contain the true
/// nearest neighbor (the first ground-truth column). Order-insensitive;
/// short result rows count as-is.
pub fn recall_1_at_k(results: &[QueryResult], gt: &NeighborTable, k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .enumerate()
        .filter(|(q, r)| {
            let truth = gt.ids_row(*q)[0];
            r.ids.iter().take(k).any(|&id| id == truth)
        })
        .count();
    hits as f64 / results.len() as f64
}

/// Mean over queries of |first `b` retrieved ids ∩ true top-`a`| / a.
pub fn recall_a_at_b(results: &[QueryResult], gt: &NeighborTable, a: usize, b: usize) -> Result<f64> {
    if gt.k < a {
        return Err(Error::InvalidInput(format!(
            "ground truth has {} columns, need {}",
            gt.k, a
        )));
    }
    if results.len() != gt.q_count {
        return Err(Error::InvalidInput(format!(
            "{} result rows vs {} ground-truth rows",
            results.len(),
            gt.q_count
        )));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (q, r) in results.iter().enumerate() {
        let truth = &gt.ids_row(q)[..a];
        let found = r
            .ids
            .iter()
            .take(b)
            .filter(|id| truth.contains(id))
            .count();
        total += found as f64 / a as f64;
    }
    Ok(total / results.len() as f64)
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(vals: &[f64]) -> Vec<f64> {
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && vals[order[j + 1]] == vals[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Per-subspace codebook-usage statistics for the true top-100 neighbors.
#[derive(Debug, Clone, Serialize)]
pub struct EntryUsageProfile {
    pub n_sub: usize,
    pub entries: usize,
    /// Mean over queries of (used entries / total entries), per subspace.
    pub mean_usage_ratio: Vec<f64>,
    pub max_usage_ratio: Vec<f64>,
    /// Mean usage frequency by closeness rank: `freq_by_rank[s][r]` is the
    /// average count of true neighbors encoded by the r-th closest entry to
    /// the query projection.
    pub freq_by_rank: Vec<Vec<f64>>,
}

/// Per-subspace CDF of true-neighbor coverage as entries are taken from
/// closest to farthest.
#[derive(Debug, Clone, Serialize)]
pub struct LocalityCdf {
    pub n_sub: usize,
    pub entries: usize,
    /// `cdf[s][r]`: mean fraction of the top-100 covered by the r+1 closest
    /// entries. Non-decreasing, ending at 1.0.
    pub cdf: Vec<Vec<f64>>,
}

/// Entry ids of subspace `s` sorted by distance to the query's residual
/// projection (against its best cluster), closest first.
fn entries_by_closeness(index: &Index, query_padded: &[f64], s: usize) -> Vec<u32> {
    let probes =
        crate::search::filter_clusters(query_padded, &index.ivf, index.metric, 1).unwrap();
    let rxy = &probes[0].1[s * 2..s * 2 + 2];
    let mut order: Vec<u32> = (0..index.e as u32).collect();
    order.sort_by(|&a, &b| {
        let da = dist2(index.codebook.entry(s, a as usize), rxy);
        let db = dist2(index.codebook.entry(s, b as usize), rxy);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    order
}

#[inline]
fn dist2(e: &[f64], p: &[f64]) -> f64 {
    (e[0] - p[0]).powi(2) + (e[1] - p[1]).powi(2)
}

fn usage_counts(index: &Index, gt_row: &[u32], s: usize) -> Vec<u32> {
    let mut freq = vec![0u32; index.e];
    for &p in gt_row {
        let code = index.codes[p as usize * index.n_sub + s] as usize;
        freq[code] += 1;
    }
    freq
}

/// Counts, per (query, subspace), the codebook entries used by at least one
/// of the query's true top neighbors.
pub fn profile_entry_usage(
    index: &Index,
    queries: &Dataset,
    gt: &NeighborTable,
) -> Result<EntryUsageProfile> {
    validate_profile_inputs(index, queries, gt)?;
    let n_sub = index.n_sub;
    let mut mean = vec![0.0; n_sub];
    let mut max = vec![0.0f64; n_sub];
    let mut freq_by_rank = vec![vec![0.0; index.e]; n_sub];
    for q in 0..queries.n {
        let qp = index.pad_query(queries.row(q));
        let row = gt.ids_row(q);
        for s in 0..n_sub {
            let freq = usage_counts(index, row, s);
            let used = freq.iter().filter(|&&f| f > 0).count();
            let ratio = used as f64 / index.e as f64;
            mean[s] += ratio;
            max[s] = max[s].max(ratio);
            for (rank, &e) in entries_by_closeness(index, &qp, s).iter().enumerate() {
                freq_by_rank[s][rank] += freq[e as usize] as f64;
            }
        }
    }
    for s in 0..n_sub {
        mean[s] /= queries.n as f64;
        for v in freq_by_rank[s].iter_mut() {
            *v /= queries.n as f64;
        }
    }
    Ok(EntryUsageProfile {
        n_sub,
        entries: index.e,
        mean_usage_ratio: mean,
        max_usage_ratio: max,
        freq_by_rank,
    })
}

/// Cumulative coverage of the true top neighbors by entry-closeness rank.
pub fn profile_locality_cdf(
    index: &Index,
    queries: &Dataset,
    gt: &NeighborTable,
) -> Result<LocalityCdf> {
    validate_profile_inputs(index, queries, gt)?;
    let n_sub = index.n_sub;
    let mut cdf = vec![vec![0.0; index.e]; n_sub];
    for q in 0..queries.n {
        let qp = index.pad_query(queries.row(q));
        let row = gt.ids_row(q);
        for (s, cdf_row) in cdf.iter_mut().enumerate() {
            let freq = usage_counts(index, row, s);
            let mut cum = 0.0;
            for (rank, &e) in entries_by_closeness(index, &qp, s).iter().enumerate() {
                cum += freq[e as usize] as f64 / row.len() as f64;
                cdf_row[rank] += cum;
            }
        }
    }
    for row in cdf.iter_mut() {
        for v in row.iter_mut() {
            *v /= queries.n as f64;
        }
    }
    Ok(LocalityCdf {
        n_sub,
        entries: index.e,
        cdf,
    })
}

fn validate_profile_inputs(index: &Index, queries: &Dataset, gt: &NeighborTable) -> Result<()> {
    if queries.d != index.d_orig {
        return Err(Error::DimensionMismatch {
            expected: index.d_orig,
            got: queries.d,
        });
    }
    if gt.q_count != queries.n || gt.k == 0 {
        return Err(Error::InvalidInput(
            "ground truth shape does not match the query set".into(),
        ));
    }
    if gt.ids.iter().any(|&p| p as usize >= index.n) {
        return Err(Error::InvalidInput("ground-truth id out of range".into()));
    }
    Ok(())
}

/// Benchmark configuration, read from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub base: PathBuf,
    pub queries: PathBuf,
    /// Optional ids file (ivecs); computed and written when missing.
    #[serde(default)]
    pub groundtruth: Option<PathBuf>,
    pub metric: Metric,
    pub clusters: usize,
    pub entries: usize,
    pub nprobs_list: Vec<usize>,
    pub scale_list: Vec<f64>,
    /// Mode letters: "h", "m", "l".
    pub modes: Vec<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// 0 uses the rayon default.
    #[serde(default)]
    pub threads: usize,
    /// Optional bundle path: loaded when present, trained and saved there
    /// otherwise.
    #[serde(default)]
    pub index: Option<PathBuf>,
}

fn default_k() -> usize {
    100
}

fn default_seed() -> u64 {
    42
}

impl BenchConfig {
    /// Parses a config file; syntax errors carry line/column diagnostics.
    pub fn from_path(path: impl AsRef<Path>) -> Result<BenchConfig> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {}", path.as_ref().display(), e)))?;
        let cfg: BenchConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!(
                "{}:{}:{}: {}",
                path.as_ref().display(),
                e.line(),
                e.column(),
                e
            ))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nprobs_list.is_empty() || self.scale_list.is_empty() || self.modes.is_empty() {
            return Err(Error::Config(
                "nprobs_list, scale_list, and modes must be non-empty".into(),
            ));
        }
        for m in &self.modes {
            m.parse::<Mode>().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.k == 0 || self.clusters == 0 || self.entries == 0 {
            return Err(Error::Config("k, clusters, and entries must be positive".into()));
        }
        if self.scale_list.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Config("scales must be positive".into()));
        }
        Ok(())
    }
}

/// One sweep configuration's measurements.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub nprobs: usize,
    pub scale: f64,
    pub mode: String,
    pub recall_1_at_100: f64,
    pub recall_100_at_1000: f64,
    pub qps: f64,
    pub mean_filter_ns: f64,
    pub mean_lut_ns: f64,
    pub mean_distcalc_ns: f64,
    pub p95_total_ns: u64,
    /// Mean (sphere_tests + lut_values) / (nprobs * n_sub * E).
    pub op_ratio_selective_vs_dense: f64,
}

/// Full report: sweep rows plus the index-level profiler outputs.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub d: usize,
    pub q_count: usize,
    pub rows: Vec<BenchRow>,
    pub entry_usage: EntryUsageProfile,
    pub locality: LocalityCdf,
}

impl BenchReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("report serialization: {}", e)))?;
        std::fs::write(path.as_ref(), text)?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::from(
            "nprobs,scale,mode,recall_1_at_100,recall_100_at_1000,qps,\
             mean_filter_ns,mean_lut_ns,mean_distcalc_ns,p95_total_ns,op_ratio\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.nprobs,
                r.scale,
                r.mode,
                r.recall_1_at_100,
                r.recall_100_at_1000,
                r.qps,
                r.mean_filter_ns,
                r.mean_lut_ns,
                r.mean_distcalc_ns,
                r.p95_total_ns,
                r.op_ratio_selective_vs_dense
            ));
        }
        std::fs::write(path.as_ref(), out)?;
        Ok(())
    }
}

const WARMUP_RUNS: usize = 3;
const TIMED_RUNS: usize = 10;

/// Loads data, builds or loads the index, resolves ground truth, sweeps the
/// (nprobs, scale, mode) grid with warm-up and median-of-runs timing, and
/// attaches the sparsity/locality profiles.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut base = read_vecs(&cfg.base, VecElem::Float32)?;
    base.metric = cfg.metric;
    let mut queries = read_vecs(&cfg.queries, VecElem::Float32)?;
    queries.metric = cfg.metric;

    let index = match &cfg.index {
        Some(path) if path.exists() => Index::load(path)?,
        maybe_path => {
            let params = TrainParams::new(cfg.clusters, cfg.entries, cfg.seed);
            let index = Index::train(&base, &params)?;
            if let Some(path) = maybe_path {
                index.save(path)?;
            }
            index
        }
    };

    let gt_k = TOP_NEIGHBORS.min(base.n);
    let gt = match &cfg.groundtruth {
        Some(path) if path.exists() => NeighborTable::load_ids(path)?,
        maybe_path => {
            let gt = brute_force_topk(&base, &queries, cfg.metric, gt_k)?;
            if let Some(path) = maybe_path {
                gt.save(path, &path.with_extension("fvecs"))?;
            }
            gt
        }
    };
    if gt.q_count != queries.n {
        return Err(Error::Config(format!(
            "ground truth has {} rows for {} queries",
            gt.q_count, queries.n
        )));
    }
    // A shallower provided ground truth narrows the second recall metric.
    let recall_a = gt_k.min(gt.k);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {}", e)))?;

    let dense_ops_per_query = |nprobs: usize| (nprobs * index.n_sub * index.e) as f64;
    let k_run = cfg.k.max(1000.min(base.n));
    let mut rows = Vec::new();
    for &nprobs in &cfg.nprobs_list {
        for &scale in &cfg.scale_list {
            for mode_name in &cfg.modes {
                let mode: Mode = mode_name.parse().unwrap();
                let mut params = SearchParams::new(nprobs, k_run);
                params.thres_scale = scale;
                params.mode = mode;

                let mut results: Vec<QueryResult> = Vec::new();
                let mut timings = Vec::with_capacity(TIMED_RUNS);
                for run in 0..WARMUP_RUNS + TIMED_RUNS {
                    let t0 = Instant::now();
                    let r = pool.install(|| search_batch(&queries, &index, &params))?;
                    let elapsed = t0.elapsed();
                    if run >= WARMUP_RUNS {
                        timings.push(elapsed.as_secs_f64());
                    }
                    results = r;
                }
                timings.sort_by(f64::total_cmp);
                let median = timings[timings.len() / 2];
                let qps = queries.n as f64 / median;

                let r1 = recall_1_at_k(&results, &gt, cfg.k);
                let r100 = recall_a_at_b(&results, &gt, recall_a, 1000)?;
                let n_q = results.len() as f64;
                let mean_filter =
                    results.iter().map(|r| r.timings.filter_ns as f64).sum::<f64>() / n_q;
                let mean_lut = results.iter().map(|r| r.timings.lut_ns as f64).sum::<f64>() / n_q;
                let mean_dist =
                    results.iter().map(|r| r.timings.distcalc_ns as f64).sum::<f64>() / n_q;
                let mut totals: Vec<u64> = results
                    .iter()
                    .map(|r| r.timings.filter_ns + r.timings.lut_ns + r.timings.distcalc_ns)
                    .collect();
                totals.sort_unstable();
                let p95 = totals[(totals.len() * 95 / 100).min(totals.len() - 1)];
                let op_ratio = results
                    .iter()
                    .map(|r| (r.ops.sphere_tests + r.ops.lut_values) as f64)
                    .sum::<f64>()
                    / n_q
                    / dense_ops_per_query(nprobs);

                rows.push(BenchRow {
                    nprobs,
                    scale,
                    mode: mode_name.clone(),
                    recall_1_at_100: r1,
                    recall_100_at_1000: r100,
                    qps,
                    mean_filter_ns: mean_filter,
                    mean_lut_ns: mean_lut,
                    mean_distcalc_ns: mean_dist,
                    p95_total_ns: p95,
                    op_ratio_selective_vs_dense: op_ratio,
                });
            }
        }
    }

    let entry_usage = profile_entry_usage(&index, &queries, &gt)?;
    let locality = profile_locality_cdf(&index, &queries, &gt)?;
    Ok(BenchReport {
        n: base.n,
        d: base.d,
        q_count: queries.n,
        rows,
        entry_usage,
        locality,
    })
}
