//! Softmax linear probe.
//!
//! Supplies the cross-entropy task loss for label-driven denoiser training
//! and a quick separability check for feature sets. Full-batch gradient
//! descent, small seeded Gaussian init, nothing adaptive.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Vector};

const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct LinearProbe {
    weights: Matrix,
    bias: Vector,
    losses: Vec<f64>,
}

impl LinearProbe {
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &Vector {
        &self.bias
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    /// Mean cross-entropy per epoch; entry 0 is the loss at initialization,
    /// so the vector has `epochs + 1` entries.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn logits(&self, x: &Vector) -> Result<Vector> {
        let mut out = self.weights.mul_vec(x)?;
        out = out.add(&self.bias)?;
        Ok(out)
    }

    pub fn predict(&self, x: &Vector) -> Result<usize> {
        let logits = self.logits(x)?;
        let mut best = 0;
        for k in 1..logits.dim() {
            if logits.get(k) > logits.get(best) {
                best = k;
            }
        }
        Ok(best)
    }

    pub fn accuracy(&self, features: &Matrix, labels: &[u32]) -> Result<f64> {
        if features.rows() != labels.len() {
            return Err(Error::DimMismatch {
                what: "probe labels",
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if features.rows() == 0 {
            return Err(Error::EmptyData { what: "probe features" });
        }
        let mut hits = 0usize;
        for (i, &y) in labels.iter().enumerate() {
            if self.predict(&features.row_vector(i))? == y as usize {
                hits += 1;
            }
        }
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &Vector) -> Vector {
    let max = logits.as_slice().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.as_slice().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Vector::from_vec(exps.into_iter().map(|e| e / sum).collect())
}

/// `-ln p[label]`, clamped away from `ln 0`.
pub fn cross_entropy(probs: &Vector, label: usize) -> f64 {
    -(probs.get(label).max(1e-300)).ln()
}

/// Trains a softmax classifier on `features` rows by full-batch gradient
/// descent. Class count is inferred from the labels, which must be dense.
pub fn linear_probe(
    features: &Matrix,
    labels: &[u32],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<LinearProbe> {
    if features.rows() == 0 {
        return Err(Error::EmptyData { what: "probe features" });
    }
    if features.rows() != labels.len() {
        return Err(Error::DimMismatch {
            what: "probe labels",
            expected: features.rows(),
            got: labels.len(),
        });
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!("lr must be positive, got {lr}")));
    }
    if !features.is_finite() {
        return Err(Error::NonFinite { what: "probe features" });
    }
    let classes = labels.iter().max().map(|&m| m as usize + 1).unwrap_or(0);
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "probe needs at least 2 classes, labels cover {classes}"
        )));
    }
    let mut seen = vec![false; classes];
    for &y in labels {
        seen[y as usize] = true;
    }
    if let Some(hole) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidArgument(format!(
            "labels not dense: class {hole} never appears"
        )));
    }

    let n = features.rows();
    let dim = features.cols();
    let mut rng = Rng::new(seed);
    let mut weights = rng.gaussian_matrix(classes, dim).scale(INIT_STD);
    let mut bias = Vector::zeros(classes);
    let mut losses = Vec::with_capacity(epochs + 1);

    for epoch in 0..=epochs {
        let mut loss_sum = 0.0;
        let mut grad_w = Matrix::zeros(classes, dim);
        let mut grad_b = Vector::zeros(classes);
        for (i, &y) in labels.iter().enumerate() {
            let x = features.row_vector(i);
            let mut logits = weights.mul_vec(&x)?;
            logits = logits.add(&bias)?;
            let p = softmax(&logits);
            loss_sum += cross_entropy(&p, y as usize);
            let mut delta = p;
            {
                let d = delta.as_mut_slice();
                d[y as usize] -= 1.0;
            }
            grad_w.add_scaled_outer(1.0 / n as f64, &delta, &x);
            grad_b = grad_b.add_scaled(1.0 / n as f64, &delta)?;
        }
        let loss = loss_sum / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "probe loss" });
        }
        losses.push(loss);
        // the last recorded loss reflects the final parameters
        if epoch < epochs {
            weights.add_scaled(-lr, &grad_w);
            bias = bias.add_scaled(-lr, &grad_b)?;
        }
    }

    Ok(LinearProbe { weights, bias, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blob_problem(seed: u64) -> (Matrix, Vec<u32>) {
        let mut rng = Rng::new(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let class = (i % 2) as u32;
            let shift = if class == 0 { -4.0 } else { 4.0 };
            let mut v = rng.gaussian(4);
            {
                let d = v.as_mut_slice();
                d[0] += shift;
            }
            rows.push(v);
            labels.push(class);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn separable_two_class_reaches_high_accuracy() {
        let (x, y) = two_blob_problem(7);
        let probe = linear_probe(&x, &y, 300, 0.5, 1).unwrap();
        assert!(probe.accuracy(&x, &y).unwrap() >= 0.99);
        let l = probe.losses();
        assert!(l.last().unwrap() < &l[0]);
    }

    #[test]
    fn zero_epochs_loss_is_log_num_classes() {
        let (x, y) = two_blob_problem(3);
        let probe = linear_probe(&x, &y, 0, 0.1, 1).unwrap();
        assert_eq!(probe.losses().len(), 1);
        assert!((probe.losses()[0] - 2.0f64.ln()).abs() < 0.05);
        // predictions are near-uniform at the tiny init
        let p = softmax(&probe.logits(&x.row_vector(0)).unwrap());
        assert!((p.get(0) - 0.5).abs() < 0.05);
    }

    #[test]
    fn same_seed_reproduces_weights_bitwise() {
        let (x, y) = two_blob_problem(5);
        let a = linear_probe(&x, &y, 40, 0.3, 11).unwrap();
        let b = linear_probe(&x, &y, 40, 0.3, 11).unwrap();
        assert_eq!(a.weights().as_slice(), b.weights().as_slice());
        assert_eq!(a.bias().as_slice(), b.bias().as_slice());
        let c = linear_probe(&x, &y, 40, 0.3, 12).unwrap();
        assert_ne!(a.weights().as_slice(), c.weights().as_slice());
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = Matrix::from_vec(3, 2, vec![0.0; 6]).unwrap();
        let err = linear_probe(&x, &[0, 0, 0], 5, 0.1, 0).unwrap_err();
        assert!(err.to_string().contains("2 classes"), "{err}");
    }

    #[test]
    fn sparse_labels_are_rejected() {
        let x = Matrix::from_vec(3, 2, vec![0.0; 6]).unwrap();
        let err = linear_probe(&x, &[0, 2, 2], 5, 0.1, 0).unwrap_err();
        assert!(err.to_string().contains("class 1"), "{err}");
    }

    #[test]
    fn softmax_sums_to_one_and_orders_by_logit() {
        let p = softmax(&Vector::from_vec(vec![1.0, 3.0, 2.0]));
        let sum: f64 = p.as_slice().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.get(1) > p.get(2) && p.get(2) > p.get(0));
        // extreme logits stay finite
        let p = softmax(&Vector::from_vec(vec![1000.0, -1000.0]));
        assert!((p.get(0) - 1.0).abs() < 1e-12);
    }
}
