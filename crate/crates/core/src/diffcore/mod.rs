//! Small reverse-mode tensor engine: the forward ops and gradients needed by
//! the dual-branch model and its adaptation losses, all in `f64`.

mod adam;
mod gemm;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamMoments};
pub use gradcheck::{grad_check, relative_error, GradReport, ParamError};
pub use graph::{BatchNormMode, BatchStats, Grads, Graph, Var};
pub use params::{BoundParams, ParamSet, PARAM_MAGIC};
pub use tensor::Tensor;

pub(crate) use graph::softmax_in_place;

/// Softmax over the last axis of a plain tensor.
pub fn softmax(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let w = t.last_dim();
    if w > 0 {
        for row in out.data_mut().chunks_mut(w) {
            softmax_in_place(row);
        }
    }
    out
}

/// Rows of a plain tensor scaled to unit norm, or by `1/eps` when their norm
/// is below `eps`.
pub fn l2_normalize(t: &Tensor, eps: f64) -> Tensor {
    let mut out = t.clone();
    let w = t.last_dim();
    if w > 0 {
        for row in out.data_mut().chunks_mut(w) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}
