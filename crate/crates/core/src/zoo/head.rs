//! Linear classification head over backbone features.
//!
//! An adapter `theta` of length `k * d_feat + k` holds a row-major `k x d_feat`
//! weight matrix followed by `k` biases.

use crate::numerics::{argmax, dot, softmax};
use crate::taskgen::Example;

pub fn head_dim(k: usize, d_feat: usize) -> usize {
    k * d_feat + k
}

/// `d_feat` implied by an adapter length and class count.
pub fn feat_dim(theta_len: usize, k: usize) -> Option<usize> {
    (theta_len >= k && (theta_len - k) % k == 0).then(|| (theta_len - k) / k)
}

pub fn logits(theta: &[f64], k: usize, features: &[f64]) -> Vec<f64> {
    let d = features.len();
    debug_assert_eq!(theta.len(), head_dim(k, d));
    let bias = &theta[k * d..];
    (0..k)
        .map(|c| dot(&theta[c * d..(c + 1) * d], features) + bias[c])
        .collect()
}

pub fn predict(theta: &[f64], k: usize, features: &[f64]) -> usize {
    argmax(&logits(theta, k, features))
}

pub fn probabilities(theta: &[f64], k: usize, features: &[f64]) -> Vec<f64> {
    softmax(&logits(theta, k, features))
}

/// Fraction of misclassified examples.
pub fn error_rate(theta: &[f64], k: usize, examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let wrong = examples
        .iter()
        .filter(|e| predict(theta, k, &e.features) != e.label)
        .count();
    wrong as f64 / examples.len() as f64
}

/// Mean softmax cross-entropy and its gradient with respect to `theta`.
pub fn cross_entropy(theta: &[f64], k: usize, examples: &[Example]) -> (f64, Vec<f64>) {
    per_example_grad(theta, k, examples, |p, y, g| {
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = p[c] - if c == y { 1.0 } else { 0.0 };
        }
        -(p[y].max(f64::MIN_POSITIVE)).ln()
    })
}

/// Mean of `1 - p_y`, a smooth surrogate of the 0/1 loss bounded in `[0, 1]`,
/// and its gradient.
pub fn soft_error(theta: &[f64], k: usize, examples: &[Example]) -> (f64, Vec<f64>) {
    per_example_grad(theta, k, examples, |p, y, g| {
        // d(-p_y)/dz_c = -p_y (1[c=y] - p_c)
        for (c, gc) in g.iter_mut().enumerate() {
            *gc = -p[y] * (if c == y { 1.0 } else { 0.0 } - p[c]);
        }
        1.0 - p[y]
    })
}

/// Shared driver: `f(probs, label, dlogits) -> loss` fills the logit gradient.
fn per_example_grad<F>(theta: &[f64], k: usize, examples: &[Example], f: F) -> (f64, Vec<f64>)
where
    F: Fn(&[f64], usize, &mut [f64]) -> f64,
{
    let mut grad = vec![0.0; theta.len()];
    if examples.is_empty() {
        return (0.0, grad);
    }
    let d = examples[0].features.len();
    let mut dz = vec![0.0; k];
    let mut total = 0.0;
    for e in examples {
        let p = softmax(&logits(theta, k, &e.features));
        total += f(&p, e.label, &mut dz);
        for c in 0..k {
            let row = &mut grad[c * d..(c + 1) * d];
            for (g, x) in row.iter_mut().zip(&e.features) {
                *g += dz[c] * x;
            }
            grad[k * d + c] += dz[c];
        }
    }
    let inv = 1.0 / examples.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (total * inv, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn examples() -> Vec<Example> {
        (0..7)
            .map(|i| Example {
                raw: vec![],
                features: vec![(i as f64 * 0.37).sin(), (i as f64 * 1.1).cos(), 0.5 - i as f64 * 0.1],
                label: i % 3,
            })
            .collect()
    }

    #[test]
    fn dims() {
        assert_eq!(head_dim(5, 8), 45);
        assert_eq!(feat_dim(45, 5), Some(8));
        assert_eq!(feat_dim(44, 5), None);
    }

    #[test]
    fn cross_entropy_gradient() {
        let ex = examples();
        let theta: Vec<f64> = (0..head_dim(3, 3)).map(|i| (i as f64 * 0.61).sin()).collect();
        let err = grad_check(|t| cross_entropy(t, 3, &ex), &theta, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn soft_error_gradient() {
        let ex = examples();
        let theta: Vec<f64> = (0..head_dim(3, 3)).map(|i| (i as f64 * 0.29).cos()).collect();
        let err = grad_check(|t| soft_error(t, 3, &ex), &theta, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let (v, _) = soft_error(&theta, 3, &ex);
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn zero_head_predicts_class_zero() {
        let ex = examples();
        let theta = vec![0.0; head_dim(3, 3)];
        let wrong = ex.iter().filter(|e| e.label != 0).count() as f64 / ex.len() as f64;
        assert_eq!(error_rate(&theta, 3, &ex), wrong);
    }
}
