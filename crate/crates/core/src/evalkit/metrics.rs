//! Retrieval metrics: mean average precision and the CMC curve.
//!
//! Rankings sort the whole gallery per query by ascending distance.
//! Distance ties are broken by ascending gallery index, which keeps every
//! metric value deterministic and golden-file friendly.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Euclidean,
}

/// Distance between two feature rows. Cosine distance is `1 - similarity`;
/// a zero-norm operand gets similarity 0 so it ranks behind everything
/// rather than poisoning the ranking with NaN.
fn distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let sim = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
            1.0 - sim
        }
        Metric::Euclidean => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Gallery indices sorted by (distance, index) ascending.
fn ranked_indices(metric: Metric, q: &[f64], gallery: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    let dists: Vec<f64> = order
        .iter()
        .map(|&j| distance(metric, q, gallery.row(j)))
        .collect();
    order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
    order
}

fn check_inputs(
    query: &Matrix,
    query_ids: &[u32],
    gallery: &Matrix,
    gallery_ids: &[u32],
) -> Result<()> {
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
    Ok(())
}

/// Mean over queries of average precision. Same-id gallery entries are the
/// positives; a query id absent from the gallery is an error.
pub fn compute_map(
    query: &Matrix,
    query_ids: &[u32],
    gallery: &Matrix,
    gallery_ids: &[u32],
    metric: Metric,
) -> Result<f64> {
    check_inputs(query, query_ids, gallery, gallery_ids)?;
    let mut ap_sum = 0.0;
    for (qi, &qid) in query_ids.iter().enumerate() {
        let positives = gallery_ids.iter().filter(|&&g| g == qid).count();
        if positives == 0 {
            return Err(Error::IdNotInGallery { id: qid });
        }
        let order = ranked_indices(metric, query.row(qi), gallery);
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank0, &j) in order.iter().enumerate() {
            if gallery_ids[j] == qid {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
            }
        }
        ap_sum += ap / positives as f64;
    }
    Ok(ap_sum / query_ids.len() as f64)
}

/// `cmc[k]` is the fraction of queries whose first positive sits within the
/// top `k + 1` ranked gallery entries. Non-decreasing by construction.
pub fn compute_cmc(
    query: &Matrix,
    query_ids: &[u32],
    gallery: &Matrix,
    gallery_ids: &[u32],
    metric: Metric,
    max_k: usize,
) -> Result<Vec<f64>> {
    check_inputs(query, query_ids, gallery, gallery_ids)?;
    if max_k == 0 {
        return Err(Error::InvalidArgument("max_k must be >= 1, got 0".into()));
    }
    let mut hits_at = vec![0usize; max_k];
    for (qi, &qid) in query_ids.iter().enumerate() {
        if !gallery_ids.contains(&qid) {
            return Err(Error::IdNotInGallery { id: qid });
        }
        let order = ranked_indices(metric, query.row(qi), gallery);
        let first = order
            .iter()
            .position(|&j| gallery_ids[j] == qid)
            .expect("positive exists by the check above");
        if first < max_k {
            hits_at[first] += 1;
        }
    }
    let n = query_ids.len() as f64;
    let mut cmc = Vec::with_capacity(max_k);
    let mut cum = 0usize;
    for h in hits_at {
        cum += h;
        cmc.push(cum as f64 / n);
    }
    Ok(cmc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_positive_ranked_first_is_map_one() {
        let q = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let g = Matrix::from_vec(2, 2, vec![1.0, 0.1, -1.0, 5.0]).unwrap();
        let map = compute_map(&q, &[7], &g, &[7, 3], Metric::Euclidean).unwrap();
        assert_eq!(map, 1.0);
    }

    #[test]
    fn single_positive_ranked_second_is_half() {
        let q = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        // the negative sits closer than the positive
        let g = Matrix::from_vec(2, 2, vec![1.0, 0.1, 9.0, 9.0]).unwrap();
        let map = compute_map(&q, &[3], &g, &[5, 3], Metric::Euclidean).unwrap();
        assert_eq!(map, 0.5);
    }

    #[test]
    fn ap_is_one_iff_positives_precede_negatives() {
        // two positives at ranks 1 and 2, negative last
        let q = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let g = Matrix::from_vec(3, 1, vec![0.1, 0.2, 5.0]).unwrap();
        let map = compute_map(&q, &[1], &g, &[1, 1, 0], Metric::Euclidean).unwrap();
        assert_eq!(map, 1.0);
        // positives at ranks 1 and 3
        let g = Matrix::from_vec(3, 1, vec![0.1, 0.2, 5.0]).unwrap();
        let map = compute_map(&q, &[1], &g, &[1, 0, 1], Metric::Euclidean).unwrap();
        assert!((map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn missing_query_id_is_an_error() {
        let q = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let err = compute_map(&q, &[4], &g, &[2], Metric::Euclidean).unwrap_err();
        match err {
            Error::IdNotInGallery { id } => assert_eq!(id, 4),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn perfect_and_adversarial_cmc() {
        let q = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let g = Matrix::from_vec(4, 1, vec![0.1, 1.0, 2.0, 3.0]).unwrap();
        let cmc = compute_cmc(&q, &[1], &g, &[1, 0, 0, 0], Metric::Euclidean, 4).unwrap();
        assert_eq!(cmc, vec![1.0, 1.0, 1.0, 1.0]);
        // positive pushed to the last rank
        let cmc = compute_cmc(&q, &[1], &g, &[0, 0, 0, 1], Metric::Euclidean, 4).unwrap();
        assert_eq!(cmc, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cmc_is_nondecreasing_and_rank1_matches_head() {
        let (q, qid, g, gid) = random_instance(11, 8, 20, 5, 3);
        let cmc = compute_cmc(&q, &qid, &g, &gid, Metric::Cosine, 20).unwrap();
        for w in cmc.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!(cmc.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let head = compute_cmc(&q, &qid, &g, &gid, Metric::Cosine, 1).unwrap();
        assert_eq!(head[0], cmc[0]);
    }

    #[test]
    fn matches_brute_force_oracles_small_random() {
        for seed in 0..10u64 {
            let (q, qid, g, gid) = random_instance(seed, 6, 15, 4, 3);
            for metric in [Metric::Cosine, Metric::Euclidean] {
                let map = compute_map(&q, &qid, &g, &gid, metric).unwrap();
                assert_eq!(map, oracle_map(metric, &q, &qid, &g, &gid));
                let cmc = compute_cmc(&q, &qid, &g, &gid, metric, g.rows()).unwrap();
                assert_eq!(cmc, oracle_cmc(metric, &q, &qid, &g, &gid));
            }
        }
    }

    #[test]
    fn gallery_permutation_does_not_move_map() {
        let (q, qid, g, gid) = random_instance(3, 5, 12, 4, 2);
        let map = compute_map(&q, &qid, &g, &gid, Metric::Euclidean).unwrap();
        // reverse the gallery; distances are generic so no ties exist
        let rev_rows: Vec<_> = (0..g.rows()).rev().map(|i| g.row_vector(i)).collect();
        let g2 = Matrix::from_rows(&rev_rows).unwrap();
        let gid2: Vec<u32> = gid.iter().rev().copied().collect();
        let map2 = compute_map(&q, &qid, &g2, &gid2, Metric::Euclidean).unwrap();
        assert!((map - map2).abs() < 1e-15);
    }

    #[test]
    fn cosine_ranking_is_scale_invariant() {
        let (q, qid, g, gid) = random_instance(5, 5, 12, 4, 2);
        let map = compute_map(&q, &qid, &g, &gid, Metric::Cosine).unwrap();
        let q2 = q.scale(37.5);
        let g2 = g.scale(0.004);
        let map2 = compute_map(&q2, &qid, &g2, &gid, Metric::Cosine).unwrap();
        assert!((map - map2).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_query_ranks_by_index_under_cosine() {
        let q = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let g = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        // every similarity is 0, so the tie-break leaves gallery order
        let cmc = compute_cmc(&q, &[9], &g, &[0, 9, 0], Metric::Cosine, 3).unwrap();
        assert_eq!(cmc, vec![0.0, 1.0, 1.0]);
    }

    // oracle: rank by scanning for the minimum remaining (distance, index)
    // pair, AP from the textbook precision-at-hit formula
    fn oracle_rank(metric: Metric, q: &[f64], g: &Matrix) -> Vec<usize> {
        let mut remaining: Vec<usize> = (0..g.rows()).collect();
        let mut order = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for k in 1..remaining.len() {
                let (i, j) = (remaining[k], remaining[best]);
                let (di, dj) = (distance(metric, q, g.row(i)), distance(metric, q, g.row(j)));
                if di < dj || (di == dj && i < j) {
                    best = k;
                }
            }
            order.push(remaining.remove(best));
        }
        order
    }

    fn oracle_map(metric: Metric, q: &Matrix, qid: &[u32], g: &Matrix, gid: &[u32]) -> f64 {
        let mut total = 0.0;
        for (qi, &id) in qid.iter().enumerate() {
            let order = oracle_rank(metric, q.row(qi), g);
            let ranks: Vec<usize> = order
                .iter()
                .enumerate()
                .filter(|(_, &j)| gid[j] == id)
                .map(|(r, _)| r + 1)
                .collect();
            let mut ap = 0.0;
            for (hit, &r) in ranks.iter().enumerate() {
                ap += (hit + 1) as f64 / r as f64;
            }
            total += ap / ranks.len() as f64;
        }
        total / qid.len() as f64
    }

    fn oracle_cmc(metric: Metric, q: &Matrix, qid: &[u32], g: &Matrix, gid: &[u32]) -> Vec<f64> {
        let mut cmc = vec![0.0; g.rows()];
        for (qi, &id) in qid.iter().enumerate() {
            let order = oracle_rank(metric, q.row(qi), g);
            let first = order.iter().position(|&j| gid[j] == id).unwrap();
            for k in first..g.rows() {
                cmc[k] += 1.0;
            }
        }
        for v in cmc.iter_mut() {
            *v /= qid.len() as f64;
        }
        cmc
    }

    fn random_instance(
        seed: u64,
        n_q: usize,
        n_g: usize,
        dim: usize,
        ids: u32,
    ) -> (Matrix, Vec<u32>, Matrix, Vec<u32>) {
        let mut rng = crate::numerics::Rng::new(seed);
        let q = rng.gaussian_matrix(n_q, dim);
        let g = rng.gaussian_matrix(n_g, dim);
        // id pattern cycles so every id lands in the gallery
        let qid: Vec<u32> = (0..n_q as u32).map(|i| i % ids).collect();
        let gid: Vec<u32> = (0..n_g as u32).map(|i| i % ids).collect();
        (q, qid, g, gid)
    }
}
