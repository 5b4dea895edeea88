//! Dynamic pruning-threshold machinery: per-subspace density maps over
//! residual projections and a polynomial regressor from local density to the
//! radius that covers a query's top-100 neighbors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{Dataset, Metric};
use crate::error::{Error, Result};
use crate::matrix::Matrix;


/// Grid resolution per side of a subspace density map.
pub const GRID: usize = 100;

/// Neighbor count the trained threshold is calibrated to cover.
pub const TOP_NEIGHBORS: usize = 100;

/// Density histogram of one subspace's residual projections on a GRID x GRID
/// lattice over their bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
    /// Row-major `GRID * GRID` cell densities (count / cell area).
    pub cells: Vec<f64>,
}

/// Polynomial regressor with predictions clamped to the training range.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyModel {
    pub degree: usize,
    pub coefficients: Vec<f64>,
    pub t_min: f64,
    pub t_max_thr: f64,
}

/// Per-subspace (density, threshold) training pairs plus the sampled ids.
#[derive(Debug, Clone)]
pub struct TrainingPairs {
    pub n_sub: usize,
    /// `densities[s][i]` for sample `i`.
    pub densities: Vec<Vec<f64>>,
    /// `thresholds[s][i]`: max projected distance to the sample's top-100.
    pub thresholds: Vec<Vec<f64>>,
    pub sample_ids: Vec<u32>,
}

/// Histograms the residual projections of subspace `s`. The box maximum is
/// expanded slightly so points on the max edge land in the last cell.
pub fn build_density_map(residuals: &Matrix, s: usize) -> Result<DensityMap> {
    if residuals.rows == 0 {
        return Err(Error::InvalidInput("no projections to histogram".into()));
    }
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut hi_x, mut hi_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for i in 0..residuals.rows {
        let row = residuals.row(i);
        let (x, y) = (row[s * 2], row[s * 2 + 1]);
        min_x = min_x.min(x);
        min_y = min_y.min(y);
        hi_x = hi_x.max(x);
        hi_y = hi_y.max(y);
    }
    let mut max_x = hi_x + 1e-9;
    let mut max_y = hi_y + 1e-9;
    if max_x <= min_x {
        max_x = min_x + min_x.abs().max(1.0) * 1e-12;
    }
    if max_y <= min_y {
        max_y = min_y + min_y.abs().max(1.0) * 1e-12;
    }

    let cell_area = ((max_x - min_x) / GRID as f64) * ((max_y - min_y) / GRID as f64);
    let mut counts = vec![0u64; GRID * GRID];
    for i in 0..residuals.rows {
        let row = residuals.row(i);
        let ix = cell_index(row[s * 2], min_x, max_x);
        let iy = cell_index(row[s * 2 + 1], min_y, max_y);
        counts[iy * GRID + ix] += 1;
    }
    let cells = counts.iter().map(|&c| c as f64 / cell_area).collect();
    Ok(DensityMap {
        min_x,
        min_y,
        max_x,
        max_y,
        cells,
    })
}

#[inline]
fn cell_index(v: f64, min: f64, max: f64) -> usize {
    let rel = (v - min) / (max - min) * GRID as f64;
    (rel.floor() as i64).clamp(0, GRID as i64 - 1) as usize
}

/// Density of the cell containing `point`; out-of-box points clamp to the
/// nearest border cell.
pub fn density_at(map: &DensityMap, point: &[f64]) -> f64 {
    let ix = cell_index(point[0], map.min_x, map.max_x);
    let iy = cell_index(point[1], map.min_y, map.max_y);
    map.cells[iy * GRID + ix]
}

/// Per-subspace max projected distance from point `query_idx` to each of
/// `neighbors`. Projections of the raw points are used: residuals against a
/// common probed centroid differ from them by a constant that cancels in the
/// difference.
pub fn coverage_radii(points: &Matrix, query_idx: usize, neighbors: &[u32]) -> Vec<f64> {
    let n_sub = points.cols / 2;
    let q = points.row(query_idx);
    let mut radii = vec![0.0f64; n_sub];
    for &nb in neighbors {
        let p = points.row(nb as usize);
        for (s, r) in radii.iter_mut().enumerate() {
            let dx = q[s * 2] - p[s * 2];
            let dy = q[s * 2 + 1] - p[s * 2 + 1];
            let d = (dx * dx + dy * dy).sqrt();
            if d > *r {
                *r = d;
            }
        }
    }
    radii
}

/// Fraction of `neighbors` whose subspace-`s` projected distance from the
/// query point is at most `radius`.
pub fn retention_fraction(
    points: &Matrix,
    query_idx: usize,
    neighbors: &[u32],
    s: usize,
    radius: f64,
) -> f64 {
    if neighbors.is_empty() {
        return 1.0;
    }
    let q = points.row(query_idx);
    let kept = neighbors
        .iter()
        .filter(|&&nb| {
            let p = points.row(nb as usize);
            let dx = q[s * 2] - p[s * 2];
            let dy = q[s * 2 + 1] - p[s * 2 + 1];
            (dx * dx + dy * dy).sqrt() <= radius
        })
        .count();
    kept as f64 / neighbors.len() as f64
}

/// Draws `sample_n` base points as pseudo-queries and emits, per subspace,
/// the local density at each pseudo-query's residual projection paired with
/// the radius covering its top-100 true neighbors.
pub fn sample_training_pairs(
    base: &Dataset,
    residuals: &Matrix,
    maps: &[DensityMap],
    sample_n: usize,
    seed: u64,
) -> Result<TrainingPairs> {
    let n = base.n;
    if n < TOP_NEIGHBORS + 1 {
        return Err(Error::InvalidInput(format!(
            "need at least {} points to calibrate thresholds, got {}",
            TOP_NEIGHBORS + 1,
            n
        )));
    }
    if sample_n == 0 || sample_n > n {
        return Err(Error::InvalidInput(format!(
            "sample_n {} outside [1, {}]",
            sample_n, n
        )));
    }
    let n_sub = residuals.cols / 2;
    if maps.len() != n_sub {
        return Err(Error::InvalidInput("one density map per subspace required".into()));
    }

    let points = Matrix::from_dataset_padded(base, residuals.cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<u32> = (0..n as u32).collect();
    for i in 0..sample_n {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    let sample_ids: Vec<u32> = pool[..sample_n].to_vec();

    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = sample_ids
        .par_iter()
        .map(|&id| {
            let neighbors =
                top_neighbors_excluding_self(&points, base.metric, id as usize, TOP_NEIGHBORS);
            let radii = coverage_radii(&points, id as usize, &neighbors);
            let res_row = residuals.row(id as usize);
            let dens: Vec<f64> = (0..n_sub)
                .map(|s| density_at(&maps[s], &res_row[s * 2..s * 2 + 2]))
                .collect();
            (dens, radii)
        })
        .collect();

    let mut densities = vec![Vec::with_capacity(sample_n); n_sub];
    let mut thresholds = vec![Vec::with_capacity(sample_n); n_sub];
    for (dens, radii) in per_sample {
        for s in 0..n_sub {
            densities[s].push(dens[s]);
            thresholds[s].push(radii[s]);
        }
    }
    Ok(TrainingPairs {
        n_sub,
        densities,
        thresholds,
        sample_ids,
    })
}

/// Full-dimension top-k neighbor ids of a base point, itself excluded.
pub fn top_neighbors_excluding_self(
    points: &Matrix,
    metric: Metric,
    query_idx: usize,
    k: usize,
) -> Vec<u32> {
    let ids = crate::reference::knn_indices(points, metric, points.row(query_idx), k + 1);
    ids.into_iter()
        .filter(|&i| i as usize != query_idx)
        .take(k)
        .collect()
}

/// Ordinary least squares on the Vandermonde system via normal equations
/// with ridge 1e-9 (applied in a max-|x|-scaled basis for conditioning, then
/// unscaled). Predictions clamp to the range of the training targets.
pub fn fit_poly(xs: &[f64], ys: &[f64], degree: usize) -> Result<PolyModel> {
    let p = degree + 1;
    if xs.len() != ys.len() || xs.len() < p {
        return Err(Error::InvalidInput(format!(
            "need at least {} samples for degree {}, got {}",
            p,
            degree,
            xs.len()
        )));
    }
    let x_scale = xs.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1e-300);

    // Gram matrix and right-hand side in the scaled basis.
    let mut gram = vec![0.0f64; p * p];
    let mut rhs = vec![0.0f64; p];
    let mut powers = vec![0.0f64; p];
    for (&x, &y) in xs.iter().zip(ys) {
        let xs_scaled = x / x_scale;
        let mut xn = 1.0;
        for pw in powers.iter_mut() {
            *pw = xn;
            xn *= xs_scaled;
        }
        for i in 0..p {
            rhs[i] += powers[i] * y;
            for j in 0..p {
                gram[i * p + j] += powers[i] * powers[j];
            }
        }
    }
    for i in 0..p {
        gram[i * p + i] += 1e-9;
    }

    let mut coeffs = solve_linear(&mut gram, &mut rhs, p)?;
    let mut unscale = 1.0;
    for c in coeffs.iter_mut() {
        *c /= unscale;
        unscale *= x_scale;
    }

    let t_min = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let t_max_thr = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(PolyModel {
        degree,
        coefficients: coeffs,
        t_min,
        t_max_thr,
    })
}

fn solve_linear(a: &mut [f64], b: &mut [f64], n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        if a[pivot * n + col].abs() < 1e-300 {
            return Err(Error::Domain("singular normal equations".into()));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / diag;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

/// Horner evaluation clamped into the model's training range.
pub fn predict_threshold(model: &PolyModel, density: f64) -> f64 {
    let mut acc = 0.0;
    for &c in model.coefficients.iter().rev() {
        acc = acc * density + c;
    }
    acc.clamp(model.t_min, model.t_max_thr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::spearman;
    use crate::dataset::gen_synthetic;
    use crate::trainer::{compute_residuals, lloyd_kmeans, IvfModel};
    use rand::Rng;

    #[test]
    fn uniform_lattice_has_equal_densities() {
        let mut rows = Vec::with_capacity(GRID * GRID);
        for i in 0..GRID {
            for j in 0..GRID {
                rows.push(vec![(i as f64 + 0.5) / GRID as f64, (j as f64 + 0.5) / GRID as f64]);
            }
        }
        let m = Matrix::from_rows(&rows);
        let map = build_density_map(&m, 0).unwrap();
        let first = map.cells[0];
        assert!(first > 0.0);
        for &c in &map.cells {
            assert!((c - first).abs() < 1e-6 * first);
        }
    }

    #[test]
    fn point_mass_lands_in_one_cell() {
        let m = Matrix::from_rows(&vec![vec![0.25, -0.75]; 1000]);
        let map = build_density_map(&m, 0).unwrap();
        let nonzero: Vec<f64> = map.cells.iter().copied().filter(|&c| c > 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        let cell_area =
            ((map.max_x - map.min_x) / GRID as f64) * ((map.max_y - map.min_y) / GRID as f64);
        assert!((nonzero[0] - 1000.0 / cell_area).abs() < 1e-3 * nonzero[0]);
    }

    #[test]
    fn counts_conserve_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..5000)
            .map(|_| vec![rng.random::<f64>() * 3.0, rng.random::<f64>() - 2.0])
            .collect();
        let m = Matrix::from_rows(&rows);
        let map = build_density_map(&m, 0).unwrap();
        let cell_area =
            ((map.max_x - map.min_x) / GRID as f64) * ((map.max_y - map.min_y) / GRID as f64);
        let total: f64 = map.cells.iter().map(|c| c * cell_area).sum();
        assert!((total - 5000.0).abs() < 1e-6);
    }

    #[test]
    fn density_lookup_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..2000)
            .map(|_| vec![rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        let m = Matrix::from_rows(&rows);
        let map = build_density_map(&m, 0).unwrap();

        // Center cell lookup.
        let cx = (map.min_x + map.max_x) / 2.0;
        let cy = (map.min_y + map.max_y) / 2.0;
        let got = density_at(&map, &[cx, cy]);
        let ix = cell_index(cx, map.min_x, map.max_x);
        let iy = cell_index(cy, map.min_y, map.max_y);
        assert_eq!(got, map.cells[iy * GRID + ix]);

        // Far outside clamps to the corner cell.
        assert_eq!(density_at(&map, &[-1e9, -1e9]), map.cells[0]);
        assert_eq!(
            density_at(&map, &[1e9, 1e9]),
            map.cells[GRID * GRID - 1]
        );

        // Random lookups match direct index arithmetic.
        for _ in 0..100 {
            let p = [rng.random::<f64>() * 2.0 - 0.5, rng.random::<f64>() * 2.0 - 0.5];
            let ix = cell_index(p[0], map.min_x, map.max_x);
            let iy = cell_index(p[1], map.min_y, map.max_y);
            assert_eq!(density_at(&map, &p), map.cells[iy * GRID + ix]);
        }
    }

    fn trained_fixture(n: usize, d: usize) -> (Dataset, IvfModel, Matrix, Vec<DensityMap>) {
        let ds = gen_synthetic(n, d, 8, 0.05, 42).unwrap();
        let pts = Matrix::from_dataset_padded(&ds, d);
        let (centroids, labels) = lloyd_kmeans(&pts, 8, 25, 42).unwrap();
        let ivf = IvfModel::new(centroids, labels);
        let residuals = compute_residuals(&pts, &ivf).unwrap();
        let maps: Vec<DensityMap> = (0..d / 2)
            .map(|s| build_density_map(&residuals, s).unwrap())
            .collect();
        (ds, ivf, residuals, maps)
    }

    #[test]
    fn coincident_neighbors_give_zero_threshold() {
        // 101 identical points: any pseudo-query's top-100 sit on top of it.
        let data = vec![0.5f32; 101 * 4];
        let ds = Dataset::new(101, 4, data, Metric::L2).unwrap();
        let pts = Matrix::from_dataset_padded(&ds, 4);
        let (centroids, labels) = lloyd_kmeans(&pts, 1, 5, 0).unwrap();
        let ivf = IvfModel::new(centroids, labels);
        let residuals = compute_residuals(&pts, &ivf).unwrap();
        let maps: Vec<DensityMap> = (0..2)
            .map(|s| build_density_map(&residuals, s).unwrap())
            .collect();
        let pairs = sample_training_pairs(&ds, &residuals, &maps, 1, 7).unwrap();
        for s in 0..2 {
            assert_eq!(pairs.thresholds[s], vec![0.0]);
        }
    }

    #[test]
    fn thresholds_are_non_negative() {
        let (ds, _ivf, residuals, maps) = trained_fixture(1200, 8);
        let pairs = sample_training_pairs(&ds, &residuals, &maps, 64, 5).unwrap();
        for s in 0..pairs.n_sub {
            assert!(pairs.thresholds[s].iter().all(|&t| t >= 0.0));
            assert_eq!(pairs.thresholds[s].len(), 64);
        }
    }

    #[test]
    fn density_threshold_correlation_is_negative() {
        let (ds, _ivf, residuals, maps) = trained_fixture(4000, 8);
        let pairs = sample_training_pairs(&ds, &residuals, &maps, 192, 5).unwrap();
        let mut negative = 0;
        for s in 0..pairs.n_sub {
            if spearman(&pairs.densities[s], &pairs.thresholds[s]) < 0.0 {
                negative += 1;
            }
        }
        assert!(
            negative * 2 > pairs.n_sub,
            "only {}/{} subspaces negative",
            negative,
            pairs.n_sub
        );
    }

    #[test]
    fn sample_rejects_small_sets() {
        let ds = gen_synthetic(50, 4, 2, 0.1, 0).unwrap();
        let pts = Matrix::from_dataset_padded(&ds, 4);
        let (centroids, labels) = lloyd_kmeans(&pts, 2, 5, 0).unwrap();
        let ivf = IvfModel::new(centroids, labels);
        let residuals = compute_residuals(&pts, &ivf).unwrap();
        let maps: Vec<DensityMap> = (0..2)
            .map(|s| build_density_map(&residuals, s).unwrap())
            .collect();
        assert!(sample_training_pairs(&ds, &residuals, &maps, 10, 0).is_err());
    }

    #[test]
    fn exact_cubic_is_recovered() {
        let coeffs = [0.5, -1.2, 0.3, 2.0];
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 20.0).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| coeffs[0] + coeffs[1] * x + coeffs[2] * x * x + coeffs[3] * x * x * x)
            .collect();
        let model = fit_poly(&xs, &ys, 3).unwrap();
        for (got, expect) in model.coefficients.iter().zip(&coeffs) {
            assert!(
                (got - expect).abs() <= 1e-6 * expect.abs().max(1e-6),
                "{} vs {}",
                got,
                expect
            );
        }
    }

    #[test]
    fn constant_targets_give_constant_model() {
        let xs: Vec<f64> = (0..21).map(|i| i as f64 / 10.0 - 1.0).collect();
        let ys = vec![2.0f64; 21];
        let model = fit_poly(&xs, &ys, 3).unwrap();
        assert!((model.coefficients[0] - 2.0).abs() < 1e-9);
        for &c in &model.coefficients[1..] {
            assert!(c.abs() < 1e-9, "coefficient {}", c);
        }
    }

    #[test]
    fn fit_beats_constant_predictor_on_noisy_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<f64> = (0..200).map(|i| i as f64 / 100.0).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| 1.0 + 0.8 * x - 0.5 * x * x + 0.1 * (rng.random::<f64>() - 0.5))
            .collect();
        let model = fit_poly(&xs, &ys, 3).unwrap();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let mse_fit: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| {
                // Unclamped evaluation for the in-sample comparison.
                let mut acc = 0.0;
                for &c in model.coefficients.iter().rev() {
                    acc = acc * x + c;
                }
                (acc - y) * (acc - y)
            })
            .sum();
        let mse_const: f64 = ys.iter().map(|&y| (y - mean) * (y - mean)).sum();
        assert!(mse_fit <= mse_const);
    }

    #[test]
    fn fit_requires_enough_samples() {
        assert!(fit_poly(&[1.0, 2.0], &[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn prediction_clamps_to_training_range() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|&x| 0.2 + 0.05 * x).collect();
        let model = fit_poly(&xs, &ys, 3).unwrap();

        // Exact-fit model reproduces a training target.
        let mid = predict_threshold(&model, 10.0);
        assert!((mid - 0.7).abs() < 1e-6);

        // Extremes clamp to an endpoint of the training range.
        for extreme in [1e12, -1e12] {
            let v = predict_threshold(&model, extreme);
            assert!(v == model.t_min || v == model.t_max_thr, "got {}", v);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let v = predict_threshold(&model, rng.random::<f64>() * 1e6 - 5e5);
            assert!(v >= model.t_min && v <= model.t_max_thr);
        }
    }
}
