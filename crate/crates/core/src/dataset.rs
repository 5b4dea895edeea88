//! Vector dataset container, fvecs/bvecs/ivecs file I/O, and a seeded
//! synthetic generator.
//!
//! File layout (no header, records concatenated): each record is a 4-byte
//! little-endian i32 dimension `d` followed by `d` elements. Elements are
//! 4-byte IEEE-754 LE floats (fvecs), single unsigned bytes (bvecs), or
//! 4-byte LE i32 (ivecs).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Similarity metric. L2 is lower-is-better (sum of squared differences),
/// inner product is higher-is-better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Metric {
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "ip")]
    InnerProduct,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Metric::L2),
            "ip" => Ok(Metric::InnerProduct),
            other => Err(Error::InvalidInput(format!(
                "unknown metric {:?}, expected \"l2\" or \"ip\"",
                other
            ))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::L2 => write!(f, "l2"),
            Metric::InnerProduct => write!(f, "ip"),
        }
    }
}

/// Element type of a vecs file record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VecElem {
    Float32,
    Uint8,
    Int32,
}

/// A set of `n` points of dimension `d`, stored row-major. bvecs/ivecs
/// elements are widened to f32 on load; there is no quantized path.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f32>,
    pub metric: Metric,
}

impl Dataset {
    /// Builds a dataset, checking shape and finiteness. `n == 0` is allowed
    /// so that empty files round-trip.
    pub fn new(n: usize, d: usize, data: Vec<f32>, metric: Metric) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput("dimension must be positive".into()));
        }
        if data.len() != n * d {
            return Err(Error::InvalidInput(format!(
                "data length {} does not equal n*d = {}",
                data.len(),
                n * d
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite value in dataset".into()));
        }
        Ok(Dataset { n, d, data, metric })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Ground-truth (or result) table: `k` neighbor ids and scores per query.
/// Scores are sorted ascending for L2 and descending for inner product;
/// ids are unique within a row.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    pub q_count: usize,
    pub k: usize,
    pub ids: Vec<u32>,
    pub scores: Vec<f64>,
}

impl NeighborTable {
    #[inline]
    pub fn ids_row(&self, q: usize) -> &[u32] {
        &self.ids[q * self.k..(q + 1) * self.k]
    }

    #[inline]
    pub fn scores_row(&self, q: usize) -> &[f64] {
        &self.scores[q * self.k..(q + 1) * self.k]
    }

    /// Persists ids as ivecs and scores as fvecs.
    pub fn save(&self, ids_path: &Path, scores_path: &Path) -> Result<()> {
        let id_data: Vec<f32> = self.ids.iter().map(|&v| v as f32).collect();
        let ids = Dataset::new(self.q_count, self.k.max(1), id_data, Metric::L2)?;
        write_vecs(ids_path, &ids, VecElem::Int32)?;
        let sc_data: Vec<f32> = self.scores.iter().map(|&v| v as f32).collect();
        let scores = Dataset::new(self.q_count, self.k.max(1), sc_data, Metric::L2)?;
        write_vecs(scores_path, &scores, VecElem::Float32)
    }

    /// Loads the ids table written by [`NeighborTable::save`]. Scores are not
    /// required for recall computation and are left zeroed.
    pub fn load_ids(ids_path: &Path) -> Result<Self> {
        let ids = read_vecs(ids_path, VecElem::Int32)?;
        let id_vals: Vec<u32> = ids.data.iter().map(|&v| v as u32).collect();
        Ok(NeighborTable {
            q_count: ids.n,
            k: ids.d,
            ids: id_vals,
            scores: vec![0.0; ids.n * ids.d],
        })
    }
}

/// Reads a vecs file. The dimension comes from the first record and every
/// record must agree.
pub fn read_vecs(path: impl AsRef<Path>, elem: VecElem) -> Result<Dataset> {
    let file = File::open(path.as_ref())?;
    let mut rd = BufReader::new(file);
    let mut data: Vec<f32> = Vec::new();
    let mut d: Option<usize> = None;
    let mut n = 0usize;
    loop {
        let rec_d = match rd.read_i32::<LittleEndian>() {
            Ok(v) => v,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        if rec_d <= 0 {
            return Err(Error::Format(format!(
                "record {} has non-positive dimension {}",
                n, rec_d
            )));
        }
        let rec_d = rec_d as usize;
        match d {
            None => d = Some(rec_d),
            Some(expect) if expect != rec_d => {
                return Err(Error::Format(format!(
                    "record {} has dimension {} but the first record had {}",
                    n, rec_d, expect
                )))
            }
            _ => {}
        }
        let truncated = |e: std::io::Error| -> Error {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::Format(format!("truncated record {}", n))
            } else {
                e.into()
            }
        };
        match elem {
            VecElem::Float32 => {
                let mut buf = vec![0f32; rec_d];
                rd.read_f32_into::<LittleEndian>(&mut buf).map_err(truncated)?;
                if buf.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Format(format!("non-finite value in record {}", n)));
                }
                data.extend_from_slice(&buf);
            }
            VecElem::Uint8 => {
                let mut buf = vec![0u8; rec_d];
                rd.read_exact(&mut buf).map_err(truncated)?;
                data.extend(buf.iter().map(|&b| b as f32));
            }
            VecElem::Int32 => {
                let mut buf = vec![0i32; rec_d];
                rd.read_i32_into::<LittleEndian>(&mut buf).map_err(truncated)?;
                data.extend(buf.iter().map(|&v| v as f32));
            }
        }
        n += 1;
    }
    let d = d.unwrap_or(1);
    Dataset::new(n, d, data, Metric::L2)
}

/// Writes a dataset in the bit-exact record format. Uint8 requires integer
/// values in [0, 255]; Int32 requires integers in the i32 range.
pub fn write_vecs(path: impl AsRef<Path>, ds: &Dataset, elem: VecElem) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut wr = BufWriter::new(file);
    for i in 0..ds.n {
        wr.write_i32::<LittleEndian>(ds.d as i32)?;
        for &v in ds.row(i) {
            match elem {
                VecElem::Float32 => wr.write_f32::<LittleEndian>(v)?,
                VecElem::Uint8 => {
                    if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                        return Err(Error::InvalidInput(format!(
                            "value {} not representable as uint8",
                            v
                        )));
                    }
                    wr.write_u8(v as u8)?;
                }
                VecElem::Int32 => {
                    if v.fract() != 0.0 || v < i32::MIN as f32 || v > i32::MAX as f32 {
                        return Err(Error::InvalidInput(format!(
                            "value {} not representable as int32",
                            v
                        )));
                    }
                    wr.write_i32::<LittleEndian>(v as i32)?;
                }
            }
        }
    }
    wr.flush()?;
    Ok(())
}

/// Generates `n_clusters` Gaussian blobs with centers uniform in [0,1]^d and
/// per-coordinate standard deviation `spread`. Points are assigned to blobs
/// round-robin, so every blob is non-empty when `n >= n_clusters`. The output
/// is a pure function of the arguments, and the first `m` points of a
/// generation are identical for any `n >= m` with the same other arguments.
pub fn gen_synthetic(
    n: usize,
    d: usize,
    n_clusters: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if d == 0 || n_clusters == 0 {
        return Err(Error::InvalidInput("counts must be positive".into()));
    }
    if n_clusters > n {
        return Err(Error::InvalidInput(format!(
            "n_clusters {} exceeds n {}",
            n_clusters, n
        )));
    }
    if spread.is_nan() || spread <= 0.0 {
        return Err(Error::InvalidInput("spread must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..n_clusters * d).map(|_| rng.random::<f64>()).collect();

    let mut data = Vec::with_capacity(n * d);
    let pairs = d.div_ceil(2);
    let mut normals = vec![0.0f64; pairs * 2];
    for i in 0..n {
        let center = &centers[(i % n_clusters) * d..(i % n_clusters + 1) * d];
        // Box-Muller; a fixed number of draws per point keeps the stream
        // prefix-stable across different n.
        for p in 0..pairs {
            let u1 = 1.0 - rng.random::<f64>();
            let u2 = rng.random::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            normals[2 * p] = r * theta.cos();
            normals[2 * p + 1] = r * theta.sin();
        }
        for j in 0..d {
            data.push((center[j] + spread * normals[j]) as f32);
        }
    }
    Dataset::new(n, d, data, Metric::L2)
}
