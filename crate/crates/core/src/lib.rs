//! CPU-native approximate nearest neighbor search built on an inverted file
//! index with product quantization. Instead of evaluating every codebook
//! entry per query, the online phase casts axis-aligned rays through a
//! bounding-volume hierarchy of entry spheres and builds the lookup table
//! only from the entries a ray actually hits, with the pruning radius driven
//! by a density-trained threshold model and realized as a per-ray travel
//! time cap. Supports L2 and inner-product similarity, exact hit-distance
//! scoring plus two hit-count approximations, and ships with brute-force and
//! dense-LUT reference pipelines and a benchmark harness.

pub mod bench;
pub mod bvh;
pub mod dataset;
pub mod error;
pub mod index;
pub mod matrix;
pub mod reference;
pub mod scene;
pub mod search;
pub mod threshold;
pub mod trainer;

pub use dataset::{gen_synthetic, read_vecs, write_vecs, Dataset, Metric, NeighborTable, VecElem};
pub use error::{Error, Result};
pub use index::{Index, TrainParams};
pub use search::{search_batch, Mode, QueryResult, SearchParams};
