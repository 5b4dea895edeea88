//! Offline training: coarse k-means clustering, residual computation,
//! per-subspace codebook training, and the entry-to-points inverted map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};

/// Subspace dimension. The scene geometry is two-dimensional per subspace,
/// so this is fixed; dimensions are zero-padded up to a multiple of it.
pub const SUBSPACE_DIM: usize = 2;

/// Coarse quantizer: cluster centroids, per-point labels, and precomputed
/// squared centroid norms for the expansion-identity distance.
#[derive(Debug, Clone)]
pub struct IvfModel {
    pub c: usize,
    pub centroids: Matrix,
    pub labels: Vec<u32>,
    pub sq_norms: Vec<f64>,
}

impl IvfModel {
    pub fn new(centroids: Matrix, labels: Vec<u32>) -> Self {
        let sq_norms = (0..centroids.rows)
            .map(|i| crate::matrix::dot(centroids.row(i), centroids.row(i)))
            .collect();
        IvfModel {
            c: centroids.rows,
            centroids,
            labels,
            sq_norms,
        }
    }
}

/// Per-subspace codebooks: `n_sub` subspaces of dimension `m` with `e`
/// entries each, stored flat as `n_sub * e * m` reals.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub n_sub: usize,
    pub m: usize,
    pub e: usize,
    pub entries: Vec<f64>,
}

impl Codebook {
    #[inline]
    pub fn entry(&self, s: usize, e: usize) -> &[f64] {
        let base = (s * self.e + e) * self.m;
        &self.entries[base..base + self.m]
    }
}

/// Inverted index keyed by (cluster, subspace, entry): the point ids whose
/// residual projection in subspace `s` is encoded by entry `e` and whose
/// coarse label is `c`. Ids are strictly ascending within each list, and for
/// each (c, s) the lists over entries partition the points labelled `c`.
#[derive(Debug, Clone)]
pub struct InvertedMap {
    pub c: usize,
    pub n_sub: usize,
    pub e: usize,
    pub lists: Vec<Vec<u32>>,
}

impl InvertedMap {
    #[inline]
    pub fn list(&self, c: usize, s: usize, e: usize) -> &[u32] {
        &self.lists[(c * self.n_sub + s) * self.e + e]
    }

    /// All point ids labelled `c`, ascending (union over entries at s = 0).
    pub fn cluster_members(&self, c: usize) -> Vec<u32> {
        let mut out: Vec<u32> = (0..self.e)
            .flat_map(|e| self.list(c, 0, e).iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

/// Lloyd's algorithm with k-means++ initialization from a seeded RNG.
/// Iterates to an assignment fixpoint or `max_iters`. Empty clusters are
/// repaired by stealing the farthest point from the most populous cluster.
/// Ties in assignment go to the lowest centroid id, so the result is a pure
/// function of the arguments.
pub fn lloyd_kmeans(
    points: &Matrix,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<(Matrix, Vec<u32>)> {
    let n = points.rows;
    let d = points.cols;
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    if k > n {
        return Err(Error::InvalidInput(format!("k = {} exceeds n = {}", k, n)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Matrix::zeros(k, d);
    init_plus_plus(points, k, &mut rng, &mut centroids);

    let mut labels = vec![0u32; n];
    let mut prev_labels = vec![u32::MAX; n];
    let mut sse_prev = f64::INFINITY;

    for _ in 0..max_iters {
        // Assignment is parallel per point; the reduction below is
        // sequential so the result does not depend on thread count.
        labels = (0..n)
            .into_par_iter()
            .map(|i| nearest_centroid(points.row(i), &centroids).0 as u32)
            .collect();

        repair_empty_clusters(points, &mut centroids, &mut labels);

        let sse: f64 = (0..n)
            .into_par_iter()
            .map(|i| sq_dist(points.row(i), centroids.row(labels[i] as usize)))
            .sum();
        debug_assert!(
            sse <= sse_prev * (1.0 + 1e-12) + 1e-12,
            "SSE increased: {} -> {}",
            sse_prev,
            sse
        );
        sse_prev = sse;

        let mut counts = vec![0usize; k];
        let mut sums = Matrix::zeros(k, d);
        for (i, &label) in labels.iter().enumerate() {
            let c = label as usize;
            counts[c] += 1;
            let row = points.row(i);
            let acc = sums.row_mut(c);
            for j in 0..d {
                acc[j] += row[j];
            }
        }
        for (c, &count) in counts.iter().enumerate() {
            if count > 0 {
                let acc = sums.row(c).to_vec();
                let out = centroids.row_mut(c);
                for j in 0..d {
                    out[j] = acc[j] / count as f64;
                }
            }
        }

        if labels == prev_labels {
            break;
        }
        prev_labels.clone_from(&labels);
    }

    Ok((centroids, labels))
}

fn nearest_centroid(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.rows {
        let d = sq_dist(point, centroids.row(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn init_plus_plus(points: &Matrix, k: usize, rng: &mut ChaCha8Rng, centroids: &mut Matrix) {
    let n = points.rows;
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All remaining mass is zero (duplicate points); take the lowest
            // id not already chosen.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(idx);
        centroids.row_mut(c).copy_from_slice(points.row(idx));
        for (i, best) in d2.iter_mut().enumerate() {
            let d = sq_dist(points.row(i), centroids.row(c));
            if d < *best {
                *best = d;
            }
        }
    }
}

fn repair_empty_clusters(points: &Matrix, centroids: &mut Matrix, labels: &mut [u32]) {
    let k = centroids.rows;
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l as usize] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let donor = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        // Farthest member of the donor cluster, lowest id on ties.
        let mut far = usize::MAX;
        let mut far_d = -1.0;
        for (i, &l) in labels.iter().enumerate() {
            if l as usize == donor {
                let d = sq_dist(points.row(i), centroids.row(donor));
                if d > far_d {
                    far_d = d;
                    far = i;
                }
            }
        }
        labels[far] = empty as u32;
        let row = points.row(far).to_vec();
        centroids.row_mut(empty).copy_from_slice(&row);
    }
}

/// Row-wise residuals: `points[i] - centroids[labels[i]]`.
pub fn compute_residuals(points: &Matrix, ivf: &IvfModel) -> Result<Matrix> {
    if points.rows != ivf.labels.len() || points.cols != ivf.centroids.cols {
        return Err(Error::InvalidInput("residual shape mismatch".into()));
    }
    let mut out = Matrix::zeros(points.rows, points.cols);
    for i in 0..points.rows {
        let c = ivf.centroids.row(ivf.labels[i] as usize);
        let p = points.row(i);
        let r = out.row_mut(i);
        for j in 0..points.cols {
            r[j] = p[j] - c[j];
        }
    }
    Ok(out)
}

/// Trains one `e`-entry codebook per 2-wide column slice of the residuals.
/// Subspaces train in parallel with per-subspace derived seeds.
pub fn train_codebooks(residuals: &Matrix, m: usize, e: usize, seed: u64) -> Result<Codebook> {
    if m != SUBSPACE_DIM {
        return Err(Error::InvalidInput(format!(
            "subspace dimension must be {}",
            SUBSPACE_DIM
        )));
    }
    if !residuals.cols.is_multiple_of(m) {
        return Err(Error::InvalidInput(format!(
            "dimension {} not divisible by {}",
            residuals.cols, m
        )));
    }
    if e > residuals.rows {
        return Err(Error::InvalidInput(format!(
            "e = {} exceeds n = {}",
            e,
            residuals.rows
        )));
    }
    let n_sub = residuals.cols / m;
    let per_sub: Vec<Vec<f64>> = (0..n_sub)
        .into_par_iter()
        .map(|s| {
            let mut slice = Matrix::zeros(residuals.rows, m);
            for i in 0..residuals.rows {
                let src = &residuals.row(i)[s * m..(s + 1) * m];
                slice.row_mut(i).copy_from_slice(src);
            }
            let sub_seed = seed.wrapping_add((s as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (centroids, _) = lloyd_kmeans(&slice, e, 25, sub_seed)?;
            Ok(centroids.data)
        })
        .collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(n_sub * e * m);
    for sub in per_sub {
        entries.extend_from_slice(&sub);
    }
    Ok(Codebook { n_sub, m, e, entries })
}

/// Nearest codebook entry to a 2-d residual projection; ties break to the
/// lowest entry id.
pub fn assign_entry(residual_proj: &[f64], codebook: &Codebook, s: usize) -> u32 {
    debug_assert!(s < codebook.n_sub);
    let mut best = 0u32;
    let mut best_d = f64::INFINITY;
    for e in 0..codebook.e {
        let d = sq_dist(residual_proj, codebook.entry(s, e));
        if d < best_d {
            best_d = d;
            best = e as u32;
        }
    }
    best
}

/// Per-point entry codes, `n * n_sub`, row-major.
pub fn encode_points(residuals: &Matrix, codebook: &Codebook) -> Vec<u32> {
    let n_sub = codebook.n_sub;
    let m = codebook.m;
    (0..residuals.rows)
        .into_par_iter()
        .flat_map_iter(|i| {
            let row = residuals.row(i);
            (0..n_sub)
                .map(|s| assign_entry(&row[s * m..(s + 1) * m], codebook, s))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Builds the (cluster, subspace, entry) -> point-ids map from residuals.
pub fn build_inverted_map(
    residuals: &Matrix,
    ivf: &IvfModel,
    codebook: &Codebook,
) -> Result<InvertedMap> {
    let codes = encode_points(residuals, codebook);
    build_inverted_map_from_codes(&codes, ivf, codebook.n_sub, codebook.e)
}

/// Same as [`build_inverted_map`] but reusing precomputed codes.
pub fn build_inverted_map_from_codes(
    codes: &[u32],
    ivf: &IvfModel,
    n_sub: usize,
    e: usize,
) -> Result<InvertedMap> {
    let n = ivf.labels.len();
    if codes.len() != n * n_sub {
        return Err(Error::InvalidInput("codes shape mismatch".into()));
    }
    let mut lists = vec![Vec::new(); ivf.c * n_sub * e];
    for p in 0..n {
        let c = ivf.labels[p] as usize;
        for s in 0..n_sub {
            let code = codes[p * n_sub + s] as usize;
            lists[(c * n_sub + s) * e + code].push(p as u32);
        }
    }
    Ok(InvertedMap {
        c: ivf.c,
        n_sub,
        e,
        lists,
    })
}
