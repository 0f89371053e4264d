//! Synthetic retrieval benchmark: dataset generation, ranking metrics,
//! a linear probe for label-driven training, and a latency bench.
//!
//! The dataset is a toy stand-in for an identity-retrieval protocol:
//! Gaussian centroids, one per identity, with isotropic per-sample noise.
//! Queries and gallery are split per identity so every query has at least
//! one gallery positive.

pub mod bench;
pub mod metrics;
pub mod probe;

pub use bench::bench_latency;
pub use metrics::{compute_cmc, compute_map, Metric};
pub use probe::{linear_probe, LinearProbe};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use serde::{Deserialize, Serialize};

/// Generation parameters, kept with the dataset so runs are replayable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub num_ids: usize,
    pub per_id: usize,
    pub dim: usize,
    pub noise_level: f64,
    pub seed: u64,
}

/// Query/gallery split with identity labels. Rows are samples.
#[derive(Debug, Clone)]
pub struct RetrievalDataset {
    query: Matrix,
    query_ids: Vec<u32>,
    gallery: Matrix,
    gallery_ids: Vec<u32>,
    meta: DatasetMeta,
}

impl RetrievalDataset {
    /// Validates the labeled split: matching lengths, one shared feature
    /// width, dense ids below `meta.num_ids`, and every query id present
    /// in the gallery.
    pub fn new(
        query: Matrix,
        query_ids: Vec<u32>,
        gallery: Matrix,
        gallery_ids: Vec<u32>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        if query.rows() == 0 {
            return Err(Error::EmptyData { what: "query set" });
        }
        if gallery.rows() == 0 {
            return Err(Error::EmptyData { what: "gallery set" });
        }
        if query.rows() != query_ids.len() {
            return Err(Error::DimMismatch {
                what: "query labels",
                expected: query.rows(),
                got: query_ids.len(),
            });
        }
        if gallery.rows() != gallery_ids.len() {
            return Err(Error::DimMismatch {
                what: "gallery labels",
                expected: gallery.rows(),
                got: gallery_ids.len(),
            });
        }
        if query.cols() != gallery.cols() {
            return Err(Error::DimMismatch {
                what: "gallery feature width",
                expected: query.cols(),
                got: gallery.cols(),
            });
        }
        for &id in query_ids.iter().chain(gallery_ids.iter()) {
            if id as usize >= meta.num_ids {
                return Err(Error::InvalidArgument(format!(
                    "label {id} outside dense range 0..{}",
                    meta.num_ids
                )));
            }
        }
        for &id in &query_ids {
            if !gallery_ids.contains(&id) {
                return Err(Error::IdNotInGallery { id });
            }
        }
        Ok(RetrievalDataset { query, query_ids, gallery, gallery_ids, meta })
    }

    pub fn query(&self) -> &Matrix {
        &self.query
    }

    pub fn query_ids(&self) -> &[u32] {
        &self.query_ids
    }

    pub fn gallery(&self) -> &Matrix {
        &self.gallery
    }

    pub fn gallery_ids(&self) -> &[u32] {
        &self.gallery_ids
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.query.cols()
    }
}

/// The dataset plus the full id-major sample list, which is what the
/// backbone consumes for feature extraction and denoiser training.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: RetrievalDataset,
    pub raw: Matrix,
    pub raw_ids: Vec<u32>,
}

/// One retrieval + latency summary for a single model variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub rank1: f64,
    pub cmc: Vec<f64>,
    pub latency_ns_per_sample: f64,
    pub param_count: usize,
}

/// Draws `num_ids` Gaussian centroids, then `per_id` samples per identity
/// as centroid plus `noise_level` times standard normal noise, id-major.
/// The first `max(1, per_id / 4)` samples of each identity become queries,
/// the rest gallery.
pub fn gen_synthetic(
    num_ids: usize,
    per_id: usize,
    dim: usize,
    noise_level: f64,
    seed: u64,
) -> Result<SyntheticData> {
    if num_ids < 2 {
        return Err(Error::InvalidArgument(format!(
            "num_ids must be >= 2, got {num_ids}"
        )));
    }
    if per_id < 2 {
        return Err(Error::InvalidArgument(format!(
            "per_id must be >= 2, got {per_id}"
        )));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("dim must be >= 1, got 0".into()));
    }
    if !noise_level.is_finite() || noise_level < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise_level must be finite and >= 0, got {noise_level}"
        )));
    }

    let mut rng = Rng::new(seed);
    let queries_per_id = (per_id / 4).max(1);

    let mut raw = Vec::with_capacity(num_ids * per_id);
    let mut raw_ids = Vec::with_capacity(num_ids * per_id);
    for id in 0..num_ids {
        let centroid = rng.gaussian(dim);
        for _ in 0..per_id {
            let sample = centroid.add_scaled(noise_level, &rng.gaussian(dim))?;
            raw.push(sample);
            raw_ids.push(id as u32);
        }
    }

    let mut query = Vec::new();
    let mut query_ids = Vec::new();
    let mut gallery = Vec::new();
    let mut gallery_ids = Vec::new();
    for (k, sample) in raw.iter().enumerate() {
        if k % per_id < queries_per_id {
            query.push(sample.clone());
            query_ids.push(raw_ids[k]);
        } else {
            gallery.push(sample.clone());
            gallery_ids.push(raw_ids[k]);
        }
    }

    let meta = DatasetMeta { num_ids, per_id, dim, noise_level, seed };
    let dataset = RetrievalDataset::new(
        Matrix::from_rows(&query)?,
        query_ids,
        Matrix::from_rows(&gallery)?,
        gallery_ids,
        meta,
    )?;
    Ok(SyntheticData {
        dataset,
        raw: Matrix::from_rows(&raw)?,
        raw_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = gen_synthetic(4, 4, 8, 1.0, 9).unwrap();
        let b = gen_synthetic(4, 4, 8, 1.0, 9).unwrap();
        assert_eq!(a.raw.as_slice(), b.raw.as_slice());
        assert_eq!(a.dataset.query().as_slice(), b.dataset.query().as_slice());
        assert_eq!(a.dataset.gallery_ids(), b.dataset.gallery_ids());
    }

    #[test]
    fn different_seeds_differ() {
        let a = gen_synthetic(4, 4, 8, 1.0, 9).unwrap();
        let b = gen_synthetic(4, 4, 8, 1.0, 10).unwrap();
        assert_ne!(a.raw.as_slice(), b.raw.as_slice());
    }

    #[test]
    fn zero_noise_collapses_ids_to_centroids() {
        let d = gen_synthetic(3, 4, 6, 0.0, 1).unwrap();
        for id in 0..3 {
            let first = d.raw.row(id * 4);
            for s in 1..4 {
                assert_eq!(d.raw.row(id * 4 + s), first);
            }
        }
    }

    #[test]
    fn id_major_order_and_split_sizes() {
        let d = gen_synthetic(4, 5, 3, 0.5, 7).unwrap();
        let expect: Vec<u32> = (0..4u32).flat_map(|id| std::iter::repeat(id).take(5)).collect();
        assert_eq!(d.raw_ids, expect);
        // per_id 5 gives one query per identity
        assert_eq!(d.dataset.query().rows(), 4);
        assert_eq!(d.dataset.gallery().rows(), 16);
        assert_eq!(d.dataset.query_ids(), &[0, 1, 2, 3]);
        // the query is the first sample of its identity
        assert_eq!(d.dataset.query().row(0), d.raw.row(0));
        assert_eq!(d.dataset.gallery().row(0), d.raw.row(1));
    }

    #[test]
    fn default_benchmark_shape() {
        let d = gen_synthetic(64, 16, 32, 1.0, 42).unwrap();
        assert_eq!(d.raw.rows(), 1024);
        assert_eq!(d.dataset.query().rows(), 256);
        assert_eq!(d.dataset.gallery().rows(), 768);
        assert_eq!(d.dataset.dim(), 32);
    }

    #[test]
    fn nearest_centroid_is_perfect_when_well_separated() {
        // separation about sqrt(2 * dim) against noise 0.1
        let d = gen_synthetic(16, 8, 16, 0.1, 42).unwrap();
        let ds = &d.dataset;
        let mut centroids = vec![vec![0.0; ds.dim()]; 16];
        let mut counts = vec![0usize; 16];
        for (k, &id) in ds.gallery_ids().iter().enumerate() {
            counts[id as usize] += 1;
            for (c, v) in centroids[id as usize].iter_mut().zip(ds.gallery().row(k)) {
                *c += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *n as f64;
            }
        }
        for (k, &id) in ds.query_ids().iter().enumerate() {
            let q = ds.query().row(k);
            let best = (0..16)
                .min_by(|&a, &b| {
                    let da: f64 = q.iter().zip(&centroids[a]).map(|(x, c)| (x - c).powi(2)).sum();
                    let db: f64 = q.iter().zip(&centroids[b]).map(|(x, c)| (x - c).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(best as u32, id);
        }
    }

    #[test]
    fn rejects_invalid_counts() {
        let e = gen_synthetic(1, 8, 4, 1.0, 0).unwrap_err();
        assert!(e.to_string().contains("num_ids"), "{e}");
        let e = gen_synthetic(8, 1, 4, 1.0, 0).unwrap_err();
        assert!(e.to_string().contains("per_id"), "{e}");
        assert!(gen_synthetic(8, 4, 0, 1.0, 0).is_err());
        assert!(gen_synthetic(8, 4, 4, -1.0, 0).is_err());
        assert!(gen_synthetic(8, 4, 4, f64::NAN, 0).is_err());
    }

    #[test]
    fn dataset_validation_catches_foreign_query_id() {
        let meta = DatasetMeta { num_ids: 3, per_id: 2, dim: 2, noise_level: 0.0, seed: 0 };
        let q = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let g = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let err = RetrievalDataset::new(q, vec![2], g, vec![1], meta).unwrap_err();
        match err {
            Error::IdNotInGallery { id } => assert_eq!(id, 2),
            other => panic!("unexpected error {other}"),
        }
    }
}
