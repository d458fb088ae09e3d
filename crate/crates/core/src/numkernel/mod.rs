//! Dense numerical kernel: matrices, parameter stores, the layers used
//! by the language and seq2seq models (with analytic backward passes),
//! the Adam optimizer, and finite-difference gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod store;

pub use adam::{adam_step, clip_gradients, AdamState};
pub use gradcheck::{check_against_fd, rel_error, FD_EPSILON, GRAD_TOLERANCE};
pub use layers::{
    bigru_backward, bigru_encode, conv1d_depthwise, conv1d_depthwise_backward, cross_entropy,
    cross_entropy_backward, gru_cell, gru_cell_backward, init_gru_params, linear, linear_backward,
    maxpool_ngrams, maxpool_ngrams_backward, sigmoid, softmax, softmax_backward, BiGruTrace,
    GruCache, PROB_FLOOR,
};
pub use matrix::{add_inplace, cosine, dot, l2_norm, Matrix};
pub use store::ParamStore;
