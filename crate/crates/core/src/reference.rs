//! Reference pipelines: exact brute-force search and a dense-LUT quantized
//! search that evaluates every codebook entry. The selective pipeline is
//! checked for parity against these.

use rayon::prelude::*;

use crate::dataset::{Dataset, Metric, NeighborTable};
use crate::error::{Error, Result};
use crate::index::Index;
use crate::matrix::{dot, sq_dist, Matrix};
use crate::search::{select_topk, QueryResult, ScoreOrder, StageTimings};
use crate::trainer::Codebook;

/// Dense lookup table: one value for every (probe, subspace, entry). L2 mode
/// stores squared distances, IP mode stores dot products.
#[derive(Debug, Clone)]
pub struct DenseLut {
    pub nprobs: usize,
    pub n_sub: usize,
    pub entries: usize,
    pub values: Vec<f64>,
}

impl DenseLut {
    #[inline]
    pub fn value(&self, probe: usize, s: usize, e: usize) -> f64 {
        self.values[(probe * self.n_sub + s) * self.entries + e]
    }
}

/// Exact top-k over the whole base set. L2 scores are squared distances
/// computed with the expansion identity over precomputed base norms; ties
/// break to the lower id.
pub fn brute_force_topk(
    base: &Dataset,
    queries: &Dataset,
    metric: Metric,
    k: usize,
) -> Result<NeighborTable> {
    if base.d != queries.d {
        return Err(Error::DimensionMismatch {
            expected: base.d,
            got: queries.d,
        });
    }
    if k == 0 || k > base.n {
        return Err(Error::InvalidInput(format!(
            "k = {} outside [1, {}]",
            k, base.n
        )));
    }
    let base_norms: Vec<f64> = (0..base.n)
        .map(|i| base.row(i).iter().map(|&v| v as f64 * v as f64).sum())
        .collect();
    let order = ScoreOrder::for_metric(metric);

    let rows: Vec<(Vec<u32>, Vec<f64>)> = (0..queries.n)
        .into_par_iter()
        .map(|q| {
            let qrow = queries.row(q);
            let q_norm: f64 = qrow.iter().map(|&v| v as f64 * v as f64).sum();
            let scored = (0..base.n).map(|i| {
                let mut dp = 0.0f64;
                for (a, b) in base.row(i).iter().zip(qrow) {
                    dp += *a as f64 * *b as f64;
                }
                let score = match metric {
                    Metric::L2 => base_norms[i] - 2.0 * dp + q_norm,
                    Metric::InnerProduct => dp,
                };
                (i as u32, score)
            });
            let top = select_topk(scored, k, order);
            (top.ids, top.scores)
        })
        .collect();

    let mut ids = Vec::with_capacity(queries.n * k);
    let mut scores = Vec::with_capacity(queries.n * k);
    for (i, s) in rows {
        ids.extend_from_slice(&i);
        scores.extend_from_slice(&s);
    }
    Ok(NeighborTable {
        q_count: queries.n,
        k,
        ids,
        scores,
    })
}

/// Top-k row indices of `points` for an f64 query; used for threshold
/// calibration and verification.
pub(crate) fn knn_indices(points: &Matrix, metric: Metric, query: &[f64], k: usize) -> Vec<u32> {
    let order = ScoreOrder::for_metric(metric);
    let scored = (0..points.rows).map(|i| {
        let score = match metric {
            Metric::L2 => sq_dist(points.row(i), query),
            Metric::InnerProduct => dot(points.row(i), query),
        };
        (i as u32, score)
    });
    select_topk(scored, k.min(points.rows), order).ids
}

/// Evaluates every entry of every subspace for each probe residual.
pub fn dense_lut(probe_residuals: &[Vec<f64>], codebook: &Codebook, metric: Metric) -> DenseLut {
    let nprobs = probe_residuals.len();
    let n_sub = codebook.n_sub;
    let e = codebook.e;
    let mut values = Vec::with_capacity(nprobs * n_sub * e);
    for residual in probe_residuals {
        for s in 0..n_sub {
            let proj = &residual[s * 2..s * 2 + 2];
            for ei in 0..e {
                let entry = codebook.entry(s, ei);
                let v = match metric {
                    Metric::L2 => sq_dist(proj, entry),
                    Metric::InnerProduct => dot(proj, entry),
                };
                values.push(v);
            }
        }
    }
    DenseLut {
        nprobs,
        n_sub,
        entries: e,
        values,
    }
}

/// Sum of the point's per-subspace LUT values for one probe.
pub fn dense_point_score(lut: &DenseLut, probe: usize, codes_row: &[u32]) -> f64 {
    codes_row
        .iter()
        .enumerate()
        .map(|(s, &e)| lut.value(probe, s, e as usize))
        .sum()
}

/// Dense-LUT search over an explicit probe list. Each point in a probed
/// cluster is scored with the sum of its encoded entries' LUT values; the
/// query enters through the probes' residuals.
pub fn reference_search_one(index: &Index, probes: &[(u32, Vec<f64>)], k: usize) -> QueryResult {
    let lut = dense_lut(
        &probes.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>(),
        &index.codebook,
        index.metric,
    );
    let mut scored: Vec<(u32, f64)> = Vec::new();
    for (pi, &(c, _)) in probes.iter().enumerate() {
        for p in index.inverted.cluster_members(c as usize) {
            let row = &index.codes[p as usize * index.n_sub..(p as usize + 1) * index.n_sub];
            scored.push((p, dense_point_score(&lut, pi, row)));
        }
    }
    let accumulations = (scored.len() * index.n_sub) as u64;
    let top = select_topk(scored, k, ScoreOrder::for_metric(index.metric));
    QueryResult {
        ids: top.ids,
        scores: top.scores,
        underfull: top.underfull,
        timings: StageTimings::default(),
        ops: crate::search::OpCounts {
            sphere_tests: 0,
            lut_values: (probes.len() * index.n_sub * index.e) as u64,
            accumulations,
        },
    }
}

/// Full dense-reference pipeline: filter, dense LUT, accumulate, top-k.
pub fn ivfpq_reference_search(
    queries: &Dataset,
    index: &Index,
    nprobs: usize,
    k: usize,
) -> Result<Vec<QueryResult>> {
    if queries.d != index.d_orig {
        return Err(Error::DimensionMismatch {
            expected: index.d_orig,
            got: queries.d,
        });
    }
    if queries.metric != index.metric {
        return Err(Error::MetricMismatch);
    }
    if nprobs == 0 || nprobs > index.c {
        return Err(Error::InvalidInput(format!(
            "nprobs = {} outside [1, {}]",
            nprobs, index.c
        )));
    }
    (0..queries.n)
        .into_par_iter()
        .map(|qi| {
            let q = index.pad_query(queries.row(qi));
            let probes =
                crate::search::filter_clusters(&q, &index.ivf, index.metric, nprobs)?;
            Ok(reference_search_one(index, &probes, k))
        })
        .collect()
}
