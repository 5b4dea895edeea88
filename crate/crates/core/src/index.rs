//! The trained index artifact: coarse quantizer, codebooks, inverted map,
//! sphere scene with its hierarchy, and the per-subspace threshold models,
//! with a versioned single-file binary bundle.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;

use crate::bvh::{build_bvh, Bvh};
use crate::dataset::{Dataset, Metric};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scene::{build_scene, SphereScene, SubspaceGeom};
use crate::threshold::{
    build_density_map, fit_poly, sample_training_pairs, DensityMap, PolyModel,
};
use crate::trainer::{
    build_inverted_map_from_codes, compute_residuals, encode_points, lloyd_kmeans, train_codebooks,
    Codebook, InvertedMap, IvfModel, SUBSPACE_DIM,
};

const MAGIC: &[u8; 5] = b"JUNO1";
const KMEANS_ITERS: usize = 25;

/// Training knobs. Iteration caps are fixed; these cover sizes and seeding.
#[derive(Debug, Clone)]
pub struct TrainParams {
    pub clusters: usize,
    pub entries: usize,
    pub seed: u64,
    /// Pseudo-queries sampled for threshold calibration (capped at n).
    pub threshold_samples: usize,
    pub poly_degree: usize,
    pub leaf_size: usize,
}

impl TrainParams {
    pub fn new(clusters: usize, entries: usize, seed: u64) -> Self {
        TrainParams {
            clusters,
            entries,
            seed,
            threshold_samples: 256,
            poly_degree: 3,
            leaf_size: 4,
        }
    }
}

/// Trained artifact. Everything is immutable after construction and safe to
/// share across threads.
#[derive(Debug, Clone)]
pub struct Index {
    pub metric: Metric,
    pub n: usize,
    pub d_orig: usize,
    pub d_padded: usize,
    pub c: usize,
    pub e: usize,
    pub n_sub: usize,
    pub leaf_size: usize,
    pub ivf: IvfModel,
    pub codebook: Codebook,
    pub inverted: InvertedMap,
    /// Per-point entry codes, `n * n_sub`, derived from the inverted map.
    pub codes: Vec<u32>,
    pub density_maps: Vec<DensityMap>,
    pub models: Vec<PolyModel>,
    pub scene: SphereScene,
    pub bvh: Bvh,
}

impl Index {
    /// Widens a query row to f64, zero-padding up to the trained dimension.
    pub fn pad_query(&self, q: &[f32]) -> Vec<f64> {
        let mut out = vec![0.0f64; self.d_padded];
        for (dst, &src) in out.iter_mut().zip(q) {
            *dst = src as f64;
        }
        out
    }

    /// Offline phase: coarse k-means, residual codebooks, inverted map,
    /// density maps, threshold regressors, and the traversable scene.
    pub fn train(base: &Dataset, params: &TrainParams) -> Result<Index> {
        if base.n == 0 {
            return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
        }
        if params.clusters == 0 || params.clusters > base.n {
            return Err(Error::InvalidInput(format!(
                "clusters = {} outside [1, {}]",
                params.clusters, base.n
            )));
        }
        if params.entries == 0 || params.entries > base.n {
            return Err(Error::InvalidInput(format!(
                "entries = {} outside [1, {}]",
                params.entries, base.n
            )));
        }
        let d_padded = base.d + base.d % SUBSPACE_DIM;
        let n_sub = d_padded / SUBSPACE_DIM;
        let points = Matrix::from_dataset_padded(base, d_padded);

        let (centroids, labels) = lloyd_kmeans(&points, params.clusters, KMEANS_ITERS, params.seed)?;
        let ivf = IvfModel::new(centroids, labels);
        let residuals = compute_residuals(&points, &ivf)?;
        let codebook = train_codebooks(&residuals, SUBSPACE_DIM, params.entries, params.seed)?;
        let codes = encode_points(&residuals, &codebook);
        let inverted = build_inverted_map_from_codes(&codes, &ivf, n_sub, params.entries)?;

        let density_maps: Vec<DensityMap> = (0..n_sub)
            .into_par_iter()
            .map(|s| build_density_map(&residuals, s))
            .collect::<Result<_>>()?;

        let sample_n = params.threshold_samples.min(base.n);
        let pairs = sample_training_pairs(
            base,
            &residuals,
            &density_maps,
            sample_n,
            params.seed ^ 0x7475_6e65,
        )?;
        let models: Vec<PolyModel> = (0..n_sub)
            .map(|s| {
                let ys: Vec<f64> = pairs.thresholds[s].iter().map(|&t| t.max(1e-12)).collect();
                fit_poly(&pairs.densities[s], &ys, params.poly_degree)
            })
            .collect::<Result<_>>()?;

        let thresholds_max: Vec<f64> = match base.metric {
            Metric::L2 => (0..n_sub)
                .map(|s| {
                    pairs.thresholds[s]
                        .iter()
                        .copied()
                        .fold(0.0f64, f64::max)
                        .max(1e-9)
                })
                .collect(),
            Metric::InnerProduct => (0..n_sub)
                .map(|s| {
                    // Base radius wide enough that rays of in-distribution
                    // queries reach every entry from any probed centroid;
                    // pruning then comes from ip_floor alone. The ray origin
                    // is point minus centroid, bounded by the two norms.
                    let max_point = (0..points.rows)
                        .map(|i| {
                            let r = points.row(i);
                            (r[s * 2] * r[s * 2] + r[s * 2 + 1] * r[s * 2 + 1]).sqrt()
                        })
                        .fold(0.0f64, f64::max);
                    let max_centroid = (0..ivf.c)
                        .map(|c| {
                            let r = ivf.centroids.row(c);
                            (r[s * 2] * r[s * 2] + r[s * 2 + 1] * r[s * 2 + 1]).sqrt()
                        })
                        .fold(0.0f64, f64::max);
                    let max_entry = (0..codebook.e)
                        .map(|e| {
                            let c = codebook.entry(s, e);
                            (c[0] * c[0] + c[1] * c[1]).sqrt()
                        })
                        .fold(0.0f64, f64::max);
                    (2.0 * (max_point + max_centroid + max_entry)).max(1e-9)
                })
                .collect(),
        };
        let scene = build_scene(&codebook, base.metric, &thresholds_max)?;
        let bvh = build_bvh(&scene, params.leaf_size)?;

        Ok(Index {
            metric: base.metric,
            n: base.n,
            d_orig: base.d,
            d_padded,
            c: params.clusters,
            e: params.entries,
            n_sub,
            leaf_size: params.leaf_size,
            ivf,
            codebook,
            inverted,
            codes,
            density_maps,
            models,
            scene,
            bvh,
        })
    }

    /// Serializes the bundle: magic, counts, centroids, labels, codebooks,
    /// inverted-map offsets and ids, scene constants, threshold coefficients,
    /// and density maps.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path.as_ref())?);
        w.write_all(MAGIC)?;
        w.write_u8(match self.metric {
            Metric::L2 => 0,
            Metric::InnerProduct => 1,
        })?;
        for v in [
            self.n,
            self.d_orig,
            self.d_padded,
            self.c,
            self.e,
            self.n_sub,
            self.leaf_size,
        ] {
            w.write_u64::<LittleEndian>(v as u64)?;
        }
        for &v in &self.ivf.centroids.data {
            w.write_f64::<LittleEndian>(v)?;
        }
        for &l in &self.ivf.labels {
            w.write_u32::<LittleEndian>(l)?;
        }
        for &v in &self.codebook.entries {
            w.write_f64::<LittleEndian>(v)?;
        }
        // CSR layout over (cluster, subspace, entry) keys in order.
        let mut offset = 0u64;
        w.write_u64::<LittleEndian>(offset)?;
        for list in &self.inverted.lists {
            offset += list.len() as u64;
            w.write_u64::<LittleEndian>(offset)?;
        }
        for list in &self.inverted.lists {
            for &p in list {
                w.write_u32::<LittleEndian>(p)?;
            }
        }
        for geom in &self.scene.per_sub {
            w.write_f64::<LittleEndian>(geom.base_radius)?;
            w.write_f64::<LittleEndian>(geom.standoff)?;
            w.write_f64::<LittleEndian>(geom.depth)?;
        }
        for model in &self.models {
            w.write_u64::<LittleEndian>(model.degree as u64)?;
            for &c in &model.coefficients {
                w.write_f64::<LittleEndian>(c)?;
            }
            w.write_f64::<LittleEndian>(model.t_min)?;
            w.write_f64::<LittleEndian>(model.t_max_thr)?;
        }
        for map in &self.density_maps {
            for v in [map.min_x, map.min_y, map.max_x, map.max_y] {
                w.write_f64::<LittleEndian>(v)?;
            }
            for &c in &map.cells {
                w.write_f64::<LittleEndian>(c)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a bundle, rejecting unknown magic and inconsistent shapes. The
    /// sphere scene and hierarchy are rebuilt from the stored constants.
    pub fn load(path: impl AsRef<Path>) -> Result<Index> {
        let mut r = BufReader::new(File::open(path.as_ref())?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("bundle too short for magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "unknown bundle magic {:?}",
                String::from_utf8_lossy(&magic)
            )));
        }
        let metric = match r.read_u8()? {
            0 => Metric::L2,
            1 => Metric::InnerProduct,
            m => return Err(Error::Format(format!("unknown metric tag {}", m))),
        };
        let mut counts = [0usize; 7];
        for c in counts.iter_mut() {
            *c = r.read_u64::<LittleEndian>()? as usize;
        }
        let [n, d_orig, d_padded, c, e, n_sub, leaf_size] = counts;
        if d_padded != d_orig + d_orig % SUBSPACE_DIM || n_sub != d_padded / SUBSPACE_DIM {
            return Err(Error::Format("inconsistent dimension header".into()));
        }
        if n == 0 || c == 0 || e == 0 || leaf_size == 0 {
            return Err(Error::Format("zero count in header".into()));
        }

        let mut centroids = Matrix::zeros(c, d_padded);
        r.read_f64_into::<LittleEndian>(&mut centroids.data)?;
        let mut labels = vec![0u32; n];
        r.read_u32_into::<LittleEndian>(&mut labels)?;
        if labels.iter().any(|&l| l as usize >= c) {
            return Err(Error::Format("label out of range".into()));
        }
        let ivf = IvfModel::new(centroids, labels);

        let mut entries = vec![0f64; n_sub * e * SUBSPACE_DIM];
        r.read_f64_into::<LittleEndian>(&mut entries)?;
        let codebook = Codebook {
            n_sub,
            m: SUBSPACE_DIM,
            e,
            entries,
        };

        let n_lists = c * n_sub * e;
        let mut offsets = vec![0u64; n_lists + 1];
        r.read_u64_into::<LittleEndian>(&mut offsets)?;
        if offsets.windows(2).any(|w| w[0] > w[1]) || offsets[n_lists] != (n * n_sub) as u64 {
            return Err(Error::Format("inverted map offsets corrupt".into()));
        }
        let mut flat_ids = vec![0u32; n * n_sub];
        r.read_u32_into::<LittleEndian>(&mut flat_ids)?;
        if flat_ids.iter().any(|&p| p as usize >= n) {
            return Err(Error::Format("point id out of range".into()));
        }
        let lists: Vec<Vec<u32>> = (0..n_lists)
            .map(|i| flat_ids[offsets[i] as usize..offsets[i + 1] as usize].to_vec())
            .collect();
        let inverted = InvertedMap {
            c,
            n_sub,
            e,
            lists,
        };

        // Codes are the inverse view of the map; every point must appear
        // exactly once per (label, subspace).
        let mut codes = vec![u32::MAX; n * n_sub];
        for ci in 0..c {
            for s in 0..n_sub {
                for ei in 0..e {
                    for &p in inverted.list(ci, s, ei) {
                        if ivf.labels[p as usize] as usize != ci
                            || codes[p as usize * n_sub + s] != u32::MAX
                        {
                            return Err(Error::Format("inverted map is not a partition".into()));
                        }
                        codes[p as usize * n_sub + s] = ei as u32;
                    }
                }
            }
        }
        if codes.contains(&u32::MAX) {
            return Err(Error::Format("point missing from inverted map".into()));
        }

        let mut per_sub = Vec::with_capacity(n_sub);
        for _ in 0..n_sub {
            per_sub.push(SubspaceGeom {
                base_radius: r.read_f64::<LittleEndian>()?,
                standoff: r.read_f64::<LittleEndian>()?,
                depth: r.read_f64::<LittleEndian>()?,
            });
        }
        let mut models = Vec::with_capacity(n_sub);
        for _ in 0..n_sub {
            let degree = r.read_u64::<LittleEndian>()? as usize;
            let mut coefficients = vec![0f64; degree + 1];
            r.read_f64_into::<LittleEndian>(&mut coefficients)?;
            let t_min = r.read_f64::<LittleEndian>()?;
            let t_max_thr = r.read_f64::<LittleEndian>()?;
            models.push(PolyModel {
                degree,
                coefficients,
                t_min,
                t_max_thr,
            });
        }
        let mut density_maps = Vec::with_capacity(n_sub);
        for _ in 0..n_sub {
            let mut bbox = [0f64; 4];
            r.read_f64_into::<LittleEndian>(&mut bbox)?;
            let mut cells = vec![0f64; crate::threshold::GRID * crate::threshold::GRID];
            r.read_f64_into::<LittleEndian>(&mut cells)?;
            density_maps.push(DensityMap {
                min_x: bbox[0],
                min_y: bbox[1],
                max_x: bbox[2],
                max_y: bbox[3],
                cells,
            });
        }

        let scene = SphereScene::from_parts(&codebook, metric, per_sub);
        let bvh = build_bvh(&scene, leaf_size)?;
        Ok(Index {
            metric,
            n,
            d_orig,
            d_padded,
            c,
            e,
            n_sub,
            leaf_size,
            ivf,
            codebook,
            inverted,
            codes,
            density_maps,
            models,
            scene,
            bvh,
        })
    }
}
