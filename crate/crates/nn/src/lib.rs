//! A minimal dense tensor engine with a dynamically recorded tape for
//! reverse-mode differentiation.
//!
//! Everything is `f64` and two-dimensional at the op level. Batched
//! sequences use a "batch-major rows" layout: a batch of `B` sequences of
//! length `L` with `C` features is a `[B*L x C]` matrix whose row `b*L + t`
//! holds step `t` of sequence `b`.

mod checkpoint;
mod error;
mod gradcheck;
mod graph;
pub mod gradsuite;
pub mod init;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, grad_check_with_params, relative_error};
pub use graph::{attention_weights, AttentionMask, Gradients, Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState, EarlyStopping, TrainingPolicy};
pub use params::{l2_penalty_value, ParamId, ParamKind, ParamStore, Parameter};
pub use tensor::Tensor;

/// Binary cross-entropy of a single probability against a 0/1 label.
pub fn bce_loss(pred: f64, label: f64) -> Result<f64> {
    if !(pred > 0.0 && pred < 1.0) {
        return Err(NnError::Domain(format!("probability {pred} outside (0, 1)")));
    }
    Ok(-(label * pred.ln() + (1.0 - label) * (1.0 - pred).ln()))
}

/// Lower-triangular allow-mask: entry `[i][j]` is true iff `j <= i`.
pub fn causal_mask(n: usize) -> Vec<Vec<bool>> {
    (0..n).map(|i| (0..n).map(|j| j <= i).collect()).collect()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic function on a plain scalar.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_half_is_ln2() {
        let v = bce_loss(0.5, 1.0).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn bce_vanishes_for_confident_correct() {
        let near = bce_loss(1.0 - 1e-12, 1.0).unwrap();
        assert!(near < 1e-11);
        assert!(bce_loss(0.9, 1.0).unwrap() > bce_loss(0.99, 1.0).unwrap());
    }

    #[test]
    fn bce_domain() {
        assert!(matches!(bce_loss(1.0, 1.0), Err(NnError::Domain(_))));
        assert!(matches!(bce_loss(0.0, 0.0), Err(NnError::Domain(_))));
        assert!(matches!(bce_loss(f64::NAN, 0.0), Err(NnError::Domain(_))));
    }

    #[test]
    fn causal_mask_triangle() {
        assert_eq!(causal_mask(1), vec![vec![true]]);
        let m = causal_mask(3);
        assert_eq!(m[0].iter().filter(|&&a| a).count(), 1);
        assert_eq!(m[2].iter().filter(|&&a| a).count(), 3);
        assert!(!m[1][2]);
    }
}
