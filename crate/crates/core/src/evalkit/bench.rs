//! Latency microbench: median-of-repeats wall-clock nanoseconds per
//! forward pass. Medians because desk-scale timings are noisy; a single
//! thread because the claim under test is per-sample cost, not throughput.

use crate::error::{Error, Result};
use crate::numerics::Vector;
use std::hint::black_box;
use std::time::Instant;

/// Runs `forward` over the whole batch once as warmup, then `repeats`
/// timed passes, and reports the median nanoseconds per sample.
pub fn bench_latency<F>(mut forward: F, batch: &[Vector], repeats: usize) -> Result<f64>
where
    F: FnMut(&Vector) -> Vector,
{
    if batch.is_empty() {
        return Err(Error::EmptyData { what: "bench batch" });
    }
    if repeats < 10 {
        return Err(Error::InvalidArgument(format!(
            "repeats must be >= 10 for a stable median, got {repeats}"
        )));
    }

    for x in batch {
        black_box(forward(black_box(x)));
    }

    let mut per_sample = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for x in batch {
            black_box(forward(black_box(x)));
        }
        let ns = start.elapsed().as_nanos() as f64;
        per_sample.push(ns / batch.len() as f64);
    }
    per_sample.sort_by(f64::total_cmp);
    let mid = per_sample.len() / 2;
    let median = if per_sample.len() % 2 == 1 {
        per_sample[mid]
    } else {
        0.5 * (per_sample[mid - 1] + per_sample[mid])
    };
    Ok(median)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn rejects_thin_measurements() {
        let batch = vec![Vector::zeros(4)];
        let err = bench_latency(|x| x.clone(), &batch, 9).unwrap_err();
        assert!(err.to_string().contains("repeats"), "{err}");
        assert!(bench_latency(|x| x.clone(), &[], 10).is_err());
    }

    #[test]
    fn reports_positive_finite_nanoseconds() {
        let mut rng = Rng::new(0);
        let batch: Vec<Vector> = (0..16).map(|_| rng.gaussian(8)).collect();
        let ns = bench_latency(|x| x.scale(2.0), &batch, 11).unwrap();
        assert!(ns.is_finite() && ns > 0.0);
    }

    #[test]
    fn heavier_work_costs_more() {
        let mut rng = Rng::new(1);
        let batch: Vec<Vector> = (0..8).map(|_| rng.gaussian(64)).collect();
        let light = bench_latency(|x| x.scale(2.0), &batch, 15).unwrap();
        let heavy = bench_latency(
            |x| {
                let mut v = x.clone();
                for _ in 0..200 {
                    v = v.scale(1.0000001);
                }
                v
            },
            &batch,
            15,
        )
        .unwrap();
        assert!(heavy > light, "heavy {heavy} vs light {light}");
    }
}
