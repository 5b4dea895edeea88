//! Online search: cluster filtering, selective LUT construction through the
//! sphere-scene hierarchy, score accumulation over the inverted map, the
//! hit-count approximations, and top-k selection.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::bvh::TraversalStats;
use crate::dataset::{Dataset, Metric};
use crate::error::{Error, Result};
use crate::index::Index;
use crate::scene::{ip_floor_to_tmax, t_hit_to_ip, threshold_to_tmax, Ray};
use crate::threshold::{density_at, predict_threshold};
use crate::trainer::IvfModel;

/// Scoring mode. `Exact` accumulates hit-time-derived values; the hit-count
/// modes trade accuracy for cheaper scoring, with `PenalizedHitCount` adding
/// the inner-sphere reward and full-miss penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Exact,
    PenalizedHitCount,
    HitCount,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "h" => Ok(Mode::Exact),
            "m" => Ok(Mode::PenalizedHitCount),
            "l" => Ok(Mode::HitCount),
            other => Err(Error::InvalidInput(format!(
                "unknown mode {:?}, expected h, m, or l",
                other
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Exact => write!(f, "h"),
            Mode::PenalizedHitCount => write!(f, "m"),
            Mode::HitCount => write!(f, "l"),
        }
    }
}

/// Search-time parameters.
#[derive(Debug, Clone)]
pub struct SearchParams {
    pub nprobs: usize,
    pub k: usize,
    pub thres_scale: f64,
    pub mode: Mode,
    /// IP-mode pruning floor; `None` accepts every geometric hit.
    pub ip_floor: Option<f64>,
    /// Re-score the top `4k` penalized-hit-count candidates exactly.
    pub m_rerank: bool,
}

impl SearchParams {
    pub fn new(nprobs: usize, k: usize) -> Self {
        SearchParams {
            nprobs,
            k,
            thres_scale: 1.0,
            mode: Mode::Exact,
            ip_floor: None,
            m_rerank: false,
        }
    }
}

/// Whether smaller or larger scores are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreOrder {
    Ascending,
    Descending,
}

impl ScoreOrder {
    pub fn for_metric(metric: Metric) -> ScoreOrder {
        match metric {
            Metric::L2 => ScoreOrder::Ascending,
            Metric::InnerProduct => ScoreOrder::Descending,
        }
    }
}

/// Selective lookup table for one query: per (probe, subspace), the hit
/// entries with their distance (L2) or similarity (IP) values, plus the
/// effective pruning radius that produced them.
#[derive(Debug, Clone)]
pub struct L2Lut {
    pub nprobs: usize,
    pub n_sub: usize,
    pub lists: Vec<Vec<(u32, f64)>>,
    pub r_eff: Vec<f64>,
}

impl L2Lut {
    #[inline]
    pub fn list(&self, probe: usize, s: usize) -> &[(u32, f64)] {
        &self.lists[probe * self.n_sub + s]
    }

    #[inline]
    pub fn r_eff(&self, probe: usize, s: usize) -> f64 {
        self.r_eff[probe * self.n_sub + s]
    }
}

/// Operation counters: the hardware-independent cost proxy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub sphere_tests: u64,
    pub lut_values: u64,
    pub accumulations: u64,
}

/// Wall-clock nanoseconds per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageTimings {
    pub filter_ns: u64,
    pub lut_ns: u64,
    pub distcalc_ns: u64,
}

/// Ranked ids with scores; `underfull` marks fewer than k candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    pub ids: Vec<u32>,
    pub scores: Vec<f64>,
    pub underfull: bool,
    pub timings: StageTimings,
    pub ops: OpCounts,
}

/// Output of bounded top-k selection.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub ids: Vec<u32>,
    pub scores: Vec<f64>,
    pub underfull: bool,
}

#[derive(Clone, Copy)]
struct HeapItem {
    key: f64,
    id: u32,
    score: f64,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key && self.id == other.id
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.total_cmp(&other.key).then(self.id.cmp(&other.id))
    }
}

/// Bounded-heap top-k selection; ties break to the lower id and the output
/// does not depend on input order.
pub fn select_topk(
    scores: impl IntoIterator<Item = (u32, f64)>,
    k: usize,
    order: ScoreOrder,
) -> TopK {
    let mut heap: std::collections::BinaryHeap<HeapItem> =
        std::collections::BinaryHeap::with_capacity(k + 1);
    for (id, score) in scores {
        let key = match order {
            ScoreOrder::Ascending => score,
            ScoreOrder::Descending => -score,
        };
        let item = HeapItem { key, id, score };
        if heap.len() < k {
            heap.push(item);
        } else if let Some(worst) = heap.peek() {
            if item.cmp(worst) == std::cmp::Ordering::Less {
                heap.pop();
                heap.push(item);
            }
        }
    }
    let mut items = heap.into_vec();
    items.sort_unstable();
    let underfull = items.len() < k;
    TopK {
        ids: items.iter().map(|i| i.id).collect(),
        scores: items.iter().map(|i| i.score).collect(),
        underfull,
    }
}

/// Stage A: ranks clusters for a padded query and returns the `nprobs` best
/// with the query residual against each. L2 scores use the expansion
/// identity over precomputed centroid norms.
pub fn filter_clusters(
    query: &[f64],
    ivf: &IvfModel,
    metric: Metric,
    nprobs: usize,
) -> Result<Vec<(u32, Vec<f64>)>> {
    if nprobs == 0 || nprobs > ivf.c {
        return Err(Error::InvalidInput(format!(
            "nprobs = {} outside [1, {}]",
            nprobs, ivf.c
        )));
    }
    if query.len() != ivf.centroids.cols {
        return Err(Error::DimensionMismatch {
            expected: ivf.centroids.cols,
            got: query.len(),
        });
    }
    let q_norm = crate::matrix::dot(query, query);
    let scored = (0..ivf.c).map(|c| {
        let dp = crate::matrix::dot(ivf.centroids.row(c), query);
        let score = match metric {
            Metric::L2 => ivf.sq_norms[c] - 2.0 * dp + q_norm,
            Metric::InnerProduct => dp,
        };
        (c as u32, score)
    });
    let top = select_topk(scored, nprobs, ScoreOrder::for_metric(metric));
    Ok(top
        .ids
        .into_iter()
        .map(|c| {
            let centroid = ivf.centroids.row(c as usize);
            let residual = query.iter().zip(centroid).map(|(q, c)| q - c).collect();
            (c, residual)
        })
        .collect())
}

fn lateral_from_t(t_hit: f64, r: f64, l: f64) -> f64 {
    let gap = (l - t_hit).clamp(0.0, r);
    (r * r - gap * gap).max(0.0).sqrt()
}

/// Stages B-C: casts one ray per (probe, subspace) with a density-driven
/// travel-time cap and records each hit entry's value. The query enters
/// through the probes' residuals, which are exactly the ray origins.
pub fn build_selective_lut(
    probes: &[(u32, Vec<f64>)],
    index: &Index,
    params: &SearchParams,
    stats: &mut TraversalStats,
) -> L2Lut {
    let n_sub = index.n_sub;
    let mut lists = Vec::with_capacity(probes.len() * n_sub);
    let mut r_effs = Vec::with_capacity(probes.len() * n_sub);
    for (c, residual) in probes {
        for s in 0..n_sub {
            let geom = index.scene.per_sub[s];
            let rxy = &residual[s * 2..s * 2 + 2];
            let q_norm2 = rxy[0] * rxy[0] + rxy[1] * rxy[1];
            let (t_max, r_eff) = match index.metric {
                Metric::L2 => {
                    let density = density_at(&index.density_maps[s], rxy);
                    let thres = predict_threshold(&index.models[s], density);
                    let r_eff = (thres * params.thres_scale).min(geom.base_radius).max(0.0);
                    (
                        threshold_to_tmax(thres, params.thres_scale, geom.base_radius, geom.standoff),
                        r_eff,
                    )
                }
                Metric::InnerProduct => {
                    let t_max = match params.ip_floor {
                        Some(floor) => {
                            ip_floor_to_tmax(floor, q_norm2, geom.base_radius, geom.standoff)
                        }
                        None => geom.standoff,
                    };
                    (t_max, geom.base_radius)
                }
            };
            let ray = Ray {
                ox: rxy[0],
                oy: rxy[1],
                oz: index.scene.ray_origin_z(s),
                t_max,
                query: 0,
                s: s as u32,
                c: *c,
            };
            let hits = index.bvh.traverse_all_hits(&index.scene, &ray, stats);
            let mut list = Vec::with_capacity(hits.len());
            for h in hits {
                debug_assert_eq!(h.s, s as u32, "cross-subspace hit");
                let value = match index.metric {
                    Metric::L2 => lateral_from_t(h.t_hit, geom.base_radius, geom.standoff),
                    Metric::InnerProduct => {
                        t_hit_to_ip(h.t_hit, q_norm2, geom.base_radius, geom.standoff)
                    }
                };
                list.push((h.e, value));
            }
            lists.push(list);
            r_effs.push(r_eff);
        }
    }
    L2Lut {
        nprobs: probes.len(),
        n_sub,
        lists,
        r_eff: r_effs,
    }
}

/// Stage D, exact mode: sums matched LUT values per candidate. L2 values are
/// squared on accumulation (the dense reference stores squared distances)
/// and each unmatched subspace contributes the minimum possible squared
/// distance `r_eff^2`. Points hit in no subspace are not candidates.
pub fn accumulate_exact(
    lut: &L2Lut,
    index: &Index,
    probes: &[(u32, Vec<f64>)],
    ops: &mut OpCounts,
) -> HashMap<u32, f64> {
    let mut scores: HashMap<u32, f64> = HashMap::new();
    for (pi, &(c, _)) in probes.iter().enumerate() {
        match index.metric {
            Metric::L2 => {
                let base: f64 = (0..lut.n_sub).map(|s| lut.r_eff(pi, s).powi(2)).sum();
                for s in 0..lut.n_sub {
                    let r2 = lut.r_eff(pi, s).powi(2);
                    for &(e, d) in lut.list(pi, s) {
                        for &p in index.inverted.list(c as usize, s, e as usize) {
                            *scores.entry(p).or_insert(base) += d * d - r2;
                            ops.accumulations += 1;
                        }
                    }
                }
            }
            Metric::InnerProduct => {
                for s in 0..lut.n_sub {
                    for &(e, v) in lut.list(pi, s) {
                        for &p in index.inverted.list(c as usize, s, e as usize) {
                            *scores.entry(p).or_insert(0.0) += v;
                            ops.accumulations += 1;
                        }
                    }
                }
            }
        }
    }
    scores
}

/// Stage D, hit-count modes: every point in a probed cluster is a candidate.
/// `HitCount` awards +1 per subspace whose entry was hit.
/// `PenalizedHitCount` awards +1 only inside half the pruning radius, 0 for
/// an outer-band hit, and -1 for a full miss.
pub fn score_hitcount(
    lut: &L2Lut,
    index: &Index,
    probes: &[(u32, Vec<f64>)],
    mode: Mode,
    ops: &mut OpCounts,
) -> HashMap<u32, i64> {
    debug_assert!(matches!(mode, Mode::HitCount | Mode::PenalizedHitCount));
    let n_sub = lut.n_sub;
    let mut scores: HashMap<u32, i64> = HashMap::new();
    // Entry classification per (probe, subspace): 0 miss, 1 outer, 2 inner.
    let mut class = vec![0u8; index.e];
    for (pi, (c, residual)) in probes.iter().enumerate() {
        let members = index.inverted.cluster_members(*c as usize);
        let init = match mode {
            Mode::HitCount => 0i64,
            _ => -(n_sub as i64),
        };
        for &p in &members {
            scores.insert(p, init);
        }
        for s in 0..n_sub {
            class.iter_mut().for_each(|v| *v = 0);
            let inner_radius = match index.metric {
                Metric::L2 => lut.r_eff(pi, s) / 2.0,
                Metric::InnerProduct => 0.0, // per-entry, resolved below
            };
            for &(e, value) in lut.list(pi, s) {
                let inner = match index.metric {
                    Metric::L2 => value <= inner_radius,
                    Metric::InnerProduct => {
                        // Recover the lateral distance from the similarity and
                        // compare to half the entry's own radius.
                        let entry = index.codebook.entry(s, e as usize);
                        let e_norm2 = entry[0] * entry[0] + entry[1] * entry[1];
                        let rxy = &residual[s * 2..s * 2 + 2];
                        let q_norm2 = rxy[0] * rxy[0] + rxy[1] * rxy[1];
                        let d2 = (q_norm2 + e_norm2 - 2.0 * value).max(0.0);
                        let geom = index.scene.per_sub[s];
                        let radius2 = geom.base_radius * geom.base_radius + e_norm2;
                        d2 <= radius2 / 4.0
                    }
                };
                class[e as usize] = if inner { 2 } else { 1 };
            }
            for &p in &members {
                let code = index.codes[p as usize * n_sub + s] as usize;
                let delta = match (mode, class[code]) {
                    (Mode::HitCount, 0) => 0,
                    (Mode::HitCount, _) => 1,
                    (_, 2) => 2,
                    (_, 1) => 1,
                    (_, _) => 0,
                };
                if delta != 0 {
                    *scores.get_mut(&p).unwrap() += delta;
                }
                ops.accumulations += 1;
            }
        }
    }
    scores
}

/// Runs the full pipeline for one already-padded query.
pub fn search_one(query: &[f64], index: &Index, params: &SearchParams) -> Result<QueryResult> {
    let t0 = Instant::now();
    let probes = filter_clusters(query, &index.ivf, index.metric, params.nprobs)?;
    let filter_ns = t0.elapsed().as_nanos() as u64;

    let t1 = Instant::now();
    let mut stats = TraversalStats::default();
    let lut = build_selective_lut(&probes, index, params, &mut stats);
    let lut_ns = t1.elapsed().as_nanos() as u64;

    let t2 = Instant::now();
    let mut ops = OpCounts {
        sphere_tests: stats.sphere_tests,
        lut_values: stats.hits,
        accumulations: 0,
    };
    let order = ScoreOrder::for_metric(index.metric);
    let top = match params.mode {
        Mode::Exact => {
            let scores = accumulate_exact(&lut, index, &probes, &mut ops);
            select_topk(scores, params.k, order)
        }
        Mode::HitCount => {
            let scores = score_hitcount(&lut, index, &probes, Mode::HitCount, &mut ops);
            select_topk(
                scores.into_iter().map(|(p, s)| (p, s as f64)),
                params.k,
                ScoreOrder::Descending,
            )
        }
        Mode::PenalizedHitCount => {
            let scores = score_hitcount(&lut, index, &probes, Mode::PenalizedHitCount, &mut ops);
            if params.m_rerank {
                let shortlist = select_topk(
                    scores.iter().map(|(&p, &s)| (p, s as f64)),
                    4 * params.k,
                    ScoreOrder::Descending,
                );
                let exact = accumulate_exact(&lut, index, &probes, &mut ops);
                let rescored = shortlist
                    .ids
                    .iter()
                    .filter_map(|id| exact.get(id).map(|&s| (*id, s)));
                select_topk(rescored, params.k, order)
            } else {
                select_topk(
                    scores.into_iter().map(|(p, s)| (p, s as f64)),
                    params.k,
                    ScoreOrder::Descending,
                )
            }
        }
    };
    let distcalc_ns = t2.elapsed().as_nanos() as u64;

    Ok(QueryResult {
        ids: top.ids,
        scores: top.scores,
        underfull: top.underfull,
        timings: StageTimings {
            filter_ns,
            lut_ns,
            distcalc_ns,
        },
        ops,
    })
}

/// Searches a batch; queries run in parallel but each result is a pure
/// function of (index, query, params), so output is identical for any thread
/// count.
pub fn search_batch(
    queries: &Dataset,
    index: &Index,
    params: &SearchParams,
) -> Result<Vec<QueryResult>> {
    if queries.n == 0 {
        return Ok(Vec::new());
    }
    if queries.d != index.d_orig {
        return Err(Error::DimensionMismatch {
            expected: index.d_orig,
            got: queries.d,
        });
    }
    if queries.metric != index.metric {
        return Err(Error::MetricMismatch);
    }
    if params.k == 0 || params.nprobs == 0 || params.thres_scale.is_nan() || params.thres_scale <= 0.0 {
        return Err(Error::InvalidInput(
            "k and nprobs must be at least 1 and thres_scale positive".into(),
        ));
    }
    (0..queries.n)
        .into_par_iter()
        .map(|qi| search_one(&index.pad_query(queries.row(qi)), index, params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bvh::build_bvh;
    use crate::dataset::gen_synthetic;
    use crate::index::{Index, TrainParams};
    use crate::matrix::Matrix;
    use crate::scene::build_scene;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (Dataset, Index) {
        let ds = gen_synthetic(800, 8, 8, 0.06, 33).unwrap();
        let index = Index::train(&ds, &TrainParams::new(8, 16, 33)).unwrap();
        (ds, index)
    }

    /// Clone of the index with spheres big enough that nothing ever misses.
    /// The radius must stay within a few orders of the data scale: t_hit is
    /// the difference of two lengths near the standoff, so a vastly larger
    /// radius would wash the lateral distance out of it.
    fn with_full_coverage(index: &Index) -> Index {
        let mut wide = index.clone();
        wide.scene =
            build_scene(&wide.codebook, wide.metric, &vec![10.0; wide.n_sub]).unwrap();
        wide.bvh = build_bvh(&wide.scene, wide.leaf_size).unwrap();
        wide
    }

    #[test]
    fn topk_underfull_and_ties() {
        let scores = vec![(3u32, 1.0), (1u32, 1.0), (7u32, 0.5)];
        let top = select_topk(scores.clone(), 5, ScoreOrder::Ascending);
        assert!(top.underfull);
        assert_eq!(top.ids, vec![7, 1, 3]);

        let top = select_topk(scores, 2, ScoreOrder::Descending);
        assert_eq!(top.ids, vec![1, 3]); // ties by ascending id
        assert!(!top.underfull);
    }

    #[test]
    fn topk_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let n = rng.random_range(1..200);
            let k = rng.random_range(1..20);
            let scores: Vec<(u32, f64)> = (0..n)
                .map(|i| (i as u32, (rng.random::<f64>() * 8.0).round() / 8.0))
                .collect();
            for order in [ScoreOrder::Ascending, ScoreOrder::Descending] {
                let got = select_topk(scores.clone(), k, order);
                let mut sorted = scores.clone();
                sorted.sort_by(|a, b| match order {
                    ScoreOrder::Ascending => a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)),
                    ScoreOrder::Descending => b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)),
                });
                let expect: Vec<u32> = sorted.iter().take(k).map(|&(i, _)| i).collect();
                assert_eq!(got.ids, expect);
            }
        }
    }

    #[test]
    fn filter_ranks_matching_centroid_first() {
        let centroids = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![2.0, 2.0],
        ]);
        let ivf = IvfModel::new(centroids, vec![0, 1, 2]);
        let probes = filter_clusters(&[1.0, 1.0], &ivf, Metric::L2, 2).unwrap();
        assert_eq!(probes[0].0, 1);
        assert!(probes[0].1.iter().all(|&v| v.abs() < 1e-9));
        assert!(filter_clusters(&[1.0, 1.0], &ivf, Metric::L2, 4).is_err());

        // nprobs = C returns every cluster.
        let all = filter_clusters(&[0.3, -0.2], &ivf, Metric::L2, 3).unwrap();
        let mut ids: Vec<u32> = all.iter().map(|p| p.0).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn filter_matches_naive_loop() {
        let (_, index) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let q: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
            let got = filter_clusters(&q, &index.ivf, Metric::L2, 3).unwrap();
            let mut naive: Vec<(u32, f64)> = (0..index.c)
                .map(|c| {
                    let d = crate::matrix::sq_dist(index.ivf.centroids.row(c), &q);
                    (c as u32, d)
                })
                .collect();
            naive.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            for (g, e) in got.iter().zip(&naive) {
                assert_eq!(g.0, e.0);
            }
        }
    }

    #[test]
    fn zero_scale_empties_lut() {
        let (ds, index) = fixture();
        let q = index.pad_query(ds.row(5));
        let probes = filter_clusters(&q, &index.ivf, index.metric, 2).unwrap();
        let mut params = SearchParams::new(2, 10);
        params.thres_scale = 1e-12;
        let mut stats = TraversalStats::default();
        let lut = build_selective_lut(&probes, &index, &params, &mut stats);
        assert!(lut.lists.iter().all(|l| l.is_empty()));
    }

    #[test]
    fn no_prune_lut_contains_entries_within_base_radius() {
        let (ds, index) = fixture();
        let q = index.pad_query(ds.row(11));
        let probes = filter_clusters(&q, &index.ivf, index.metric, 3).unwrap();
        let mut params = SearchParams::new(3, 10);
        params.thres_scale = 1e9;
        let mut stats = TraversalStats::default();
        let lut = build_selective_lut(&probes, &index, &params, &mut stats);
        for (pi, (_, residual)) in probes.iter().enumerate() {
            for s in 0..index.n_sub {
                let rxy = &residual[s * 2..s * 2 + 2];
                let r = index.scene.per_sub[s].base_radius;
                let mut expect: Vec<u32> = (0..index.e as u32)
                    .filter(|&e| {
                        let entry = index.codebook.entry(s, e as usize);
                        let d = ((rxy[0] - entry[0]).powi(2) + (rxy[1] - entry[1]).powi(2)).sqrt();
                        d < r
                    })
                    .collect();
                expect.sort_unstable();
                let mut got: Vec<u32> = lut.list(pi, s).iter().map(|&(e, _)| e).collect();
                got.sort_unstable();
                assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn lut_values_match_linear_entry_scan() {
        let (ds, index) = fixture();
        let mut params = SearchParams::new(2, 10);
        params.thres_scale = 0.7;
        for qi in [3usize, 100, 555] {
            let q = index.pad_query(ds.row(qi));
            let probes = filter_clusters(&q, &index.ivf, index.metric, 2).unwrap();
            let mut stats = TraversalStats::default();
            let lut = build_selective_lut(&probes, &index, &params, &mut stats);
            for (pi, (_, residual)) in probes.iter().enumerate() {
                for s in 0..index.n_sub {
                    let rxy = &residual[s * 2..s * 2 + 2];
                    let r_eff = lut.r_eff(pi, s);
                    let mut expect: Vec<(u32, f64)> = (0..index.e as u32)
                        .filter_map(|e| {
                            let entry = index.codebook.entry(s, e as usize);
                            let d = ((rxy[0] - entry[0]).powi(2) + (rxy[1] - entry[1]).powi(2))
                                .sqrt();
                            (d <= r_eff).then_some((e, d))
                        })
                        .collect();
                    expect.sort_by_key(|&(e, _)| e);
                    let mut got: Vec<(u32, f64)> = lut.list(pi, s).to_vec();
                    got.sort_by_key(|&(e, _)| e);
                    assert_eq!(got.len(), expect.len(), "probe {} subspace {}", pi, s);
                    for (g, e) in got.iter().zip(&expect) {
                        assert_eq!(g.0, e.0);
                        assert!((g.1 - e.1).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn accumulate_matches_dense_reference_under_full_coverage() {
        let (ds, index) = fixture();
        let wide = with_full_coverage(&index);
        let mut params = SearchParams::new(wide.c, 10);
        params.thres_scale = 1e9;
        for qi in [0usize, 42, 707] {
            let q = wide.pad_query(ds.row(qi));
            let probes = filter_clusters(&q, &wide.ivf, wide.metric, wide.c).unwrap();
            let mut stats = TraversalStats::default();
            let lut = build_selective_lut(&probes, &wide, &params, &mut stats);
            let mut ops = OpCounts::default();
            let scores = accumulate_exact(&lut, &wide, &probes, &mut ops);
            assert_eq!(scores.len(), wide.n);

            let residuals: Vec<Vec<f64>> = probes.iter().map(|p| p.1.clone()).collect();
            let dense = crate::reference::dense_lut(&residuals, &wide.codebook, wide.metric);
            for (pi, &(c, _)) in probes.iter().enumerate() {
                for p in wide.inverted.cluster_members(c as usize) {
                    let row = &wide.codes[p as usize * wide.n_sub..(p as usize + 1) * wide.n_sub];
                    let expect = crate::reference::dense_point_score(&dense, pi, row);
                    let got = scores[&p];
                    assert!(
                        (got - expect).abs() <= 1e-5 * expect.max(1.0),
                        "point {}: {} vs {}",
                        p,
                        got,
                        expect
                    );
                }
            }
        }
    }

    #[test]
    fn fully_matched_score_is_sum_of_squared_values() {
        let (ds, index) = fixture();
        let q = index.pad_query(ds.row(7));
        let probes = filter_clusters(&q, &index.ivf, index.metric, 1).unwrap();
        let params = SearchParams::new(1, 10);
        let mut stats = TraversalStats::default();
        let lut = build_selective_lut(&probes, &index, &params, &mut stats);
        let mut ops = OpCounts::default();
        let scores = accumulate_exact(&lut, &index, &probes, &mut ops);

        let c = probes[0].0 as usize;
        for (&p, &score) in &scores {
            let mut matched = 0;
            let mut expect = 0.0;
            for s in 0..index.n_sub {
                let code = index.codes[p as usize * index.n_sub + s];
                if let Some(&(_, d)) = lut.list(0, s).iter().find(|&&(e, _)| e == code) {
                    matched += 1;
                    expect += d * d;
                } else {
                    expect += lut.r_eff(0, s).powi(2);
                }
            }
            assert_eq!(index.ivf.labels[p as usize] as usize, c);
            assert!((score - expect).abs() < 1e-9);
            assert!(matched > 0, "candidate with zero matches");
        }
    }

    #[test]
    fn unhit_points_are_not_candidates() {
        let (ds, index) = fixture();
        let q = index.pad_query(ds.row(9));
        let probes = filter_clusters(&q, &index.ivf, index.metric, 2).unwrap();
        let mut params = SearchParams::new(2, 10);
        params.thres_scale = 1e-12;
        let mut stats = TraversalStats::default();
        let lut = build_selective_lut(&probes, &index, &params, &mut stats);
        let mut ops = OpCounts::default();
        let scores = accumulate_exact(&lut, &index, &probes, &mut ops);
        assert!(scores.is_empty());
    }

    #[test]
    fn hitcount_extremes() {
        let (ds, index) = fixture();
        let wide = with_full_coverage(&index);
        let q = wide.pad_query(ds.row(3));
        let probes = filter_clusters(&q, &wide.ivf, wide.metric, 1).unwrap();
        let mut params = SearchParams::new(1, 10);
        params.thres_scale = 1e9;
        let mut stats = TraversalStats::default();
        let lut = build_selective_lut(&probes, &wide, &params, &mut stats);
        let mut ops = OpCounts::default();

        // With every entry hit, mode L gives every member the max count.
        let l_scores = score_hitcount(&lut, &wide, &probes, Mode::HitCount, &mut ops);
        assert!(l_scores.values().all(|&s| s == wide.n_sub as i64));

        // With an empty LUT, penalized mode gives every member -n_sub.
        params.thres_scale = 1e-12;
        let mut stats = TraversalStats::default();
        let empty_lut = build_selective_lut(&probes, &index, &params, &mut stats);
        let m_scores =
            score_hitcount(&empty_lut, &index, &probes, Mode::PenalizedHitCount, &mut ops);
        assert!(m_scores.values().all(|&s| s == -(index.n_sub as i64)));
    }

    #[test]
    fn penalized_mode_orders_better_than_plain_hitcount() {
        let (ds, index) = fixture();
        let queries = gen_synthetic(810, 8, 8, 0.06, 33).unwrap();
        let q = index.pad_query(&queries.data[800 * 8..801 * 8]);
        let probes = filter_clusters(&q, &index.ivf, index.metric, index.c).unwrap();
        let params = SearchParams::new(index.c, 10);
        let mut stats = TraversalStats::default();
        let lut = build_selective_lut(&probes, &index, &params, &mut stats);
        let mut ops = OpCounts::default();
        let m = score_hitcount(&lut, &index, &probes, Mode::PenalizedHitCount, &mut ops);
        let l = score_hitcount(&lut, &index, &probes, Mode::HitCount, &mut ops);

        let pts = Matrix::from_dataset_padded(&ds, index.d_padded);
        let ids: Vec<u32> = (0..ds.n as u32).collect();
        let exact: Vec<f64> = ids
            .iter()
            .map(|&p| crate::matrix::sq_dist(pts.row(p as usize), &q))
            .collect();
        let m_vals: Vec<f64> = ids.iter().map(|p| m[p] as f64).collect();
        let l_vals: Vec<f64> = ids.iter().map(|p| l[p] as f64).collect();
        let rho_m = crate::bench::spearman(&m_vals, &exact);
        let rho_l = crate::bench::spearman(&l_vals, &exact);
        assert!(
            rho_m.abs() >= rho_l.abs(),
            "penalized {} vs plain {}",
            rho_m,
            rho_l
        );
        assert!(rho_m < 0.0);
    }

    #[test]
    fn candidates_grow_with_scale() {
        let (ds, index) = fixture();
        let queries: Vec<usize> = vec![1, 27, 300];
        for qi in queries {
            let q = index.pad_query(ds.row(qi));
            let probes = filter_clusters(&q, &index.ivf, index.metric, 4).unwrap();
            let mut prev: Option<Vec<u32>> = None;
            for scale in [0.25, 0.5, 0.75, 1.0, 1e9] {
                let mut params = SearchParams::new(4, 10);
                params.thres_scale = scale;
                let mut stats = TraversalStats::default();
                let lut = build_selective_lut(&probes, &index, &params, &mut stats);
                let mut ops = OpCounts::default();
                let mut ids: Vec<u32> =
                    accumulate_exact(&lut, &index, &probes, &mut ops).into_keys().collect();
                ids.sort_unstable();
                if let Some(p) = &prev {
                    for id in p {
                        assert!(ids.binary_search(id).is_ok(), "lost candidate at {}", scale);
                    }
                }
                prev = Some(ids);
            }
        }
    }

    #[test]
    fn batch_empty_and_dimension_checks() {
        let (ds, index) = fixture();
        let empty = Dataset::new(0, 8, vec![], Metric::L2).unwrap();
        assert!(search_batch(&empty, &index, &SearchParams::new(2, 5)).unwrap().is_empty());

        let wrong = gen_synthetic(3, 6, 1, 0.1, 0).unwrap();
        assert!(matches!(
            search_batch(&wrong, &index, &SearchParams::new(2, 5)),
            Err(Error::DimensionMismatch { .. })
        ));

        let mut ip_queries = Dataset::new(1, 8, ds.row(0).to_vec(), Metric::InnerProduct).unwrap();
        assert!(matches!(
            search_batch(&ip_queries, &index, &SearchParams::new(2, 5)),
            Err(Error::MetricMismatch)
        ));
        ip_queries.metric = Metric::L2;
        assert!(search_batch(&ip_queries, &index, &SearchParams::new(2, 5)).is_ok());
    }

    #[test]
    fn batch_deterministic_across_thread_counts() {
        let (_, index) = fixture();
        let queries = gen_synthetic(64, 8, 8, 0.06, 77).unwrap();
        let mut params = SearchParams::new(4, 10);
        params.thres_scale = 0.8;
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool8 = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let r1 = pool1.install(|| search_batch(&queries, &index, &params)).unwrap();
        let r8 = pool8.install(|| search_batch(&queries, &index, &params)).unwrap();
        for (a, b) in r1.iter().zip(&r8) {
            assert_eq!(a.ids, b.ids);
            let ba: Vec<u64> = a.scores.iter().map(|s| s.to_bits()).collect();
            let bb: Vec<u64> = b.scores.iter().map(|s| s.to_bits()).collect();
            assert_eq!(ba, bb);
            assert_eq!(a.ops, b.ops);
        }
    }

    #[test]
    fn no_prune_mode_h_matches_reference_pipeline() {
        let (_ds, index) = fixture();
        let wide = with_full_coverage(&index);
        let queries = {
            let big = gen_synthetic(820, 8, 8, 0.06, 33).unwrap();
            Dataset::new(20, 8, big.data[800 * 8..].to_vec(), Metric::L2).unwrap()
        };
        let mut params = SearchParams::new(wide.c, 10);
        params.thres_scale = 1e9;
        let got = search_batch(&queries, &wide, &params).unwrap();
        let expect =
            crate::reference::ivfpq_reference_search(&queries, &wide, wide.c, 10).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert_eq!(g.ids, e.ids);
        }
    }
}
