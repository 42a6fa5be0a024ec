//! Higher-order Volterra convolution over unique terms.
//!
//! * [`index`] builds the position matrices and gather tables that enumerate
//!   each unique product `x[i1] * ... * x[ir]` (`i1 <= ... <= ir`) once.
//! * [`efficient`] runs the filter over those unique terms, forward and
//!   backward, and wraps it as an im2col convolution layer.
//! * [`naive`] is the dense Kronecker-product formulation used as a
//!   reference and benchmark baseline.
//! * [`hla`] is the high-order local attention block built on the layer.
//! * [`io`] reads and writes kernel and block parameters.

pub mod efficient;
pub mod error;
pub mod hla;
pub mod index;
pub mod io;
pub mod naive;
pub mod norm;
pub mod tensor;

pub use efficient::{
    build_terms_progressive, build_terms_with_variant, conv2d_backward, conv2d_forward, evc_forward, evc_forward_cached,
    evc_grad_input, evc_grad_weights, scatter_term_grads, ConvGrads, ConvSaved, TermCache, UniqueKernel, VolterraConvLayer,
};
pub use error::{Error, Result};
pub use hla::{HlaConfig, HlaGrads, HlaParams, HlaSaved};
pub use index::{
    build_fpm, build_npm, build_pcms, build_trm, check_pcm_reconstruction, count_params, count_terms, index_set,
    FullPositionMatrix, IndexSet, NoIdenticalPositionMatrix, PcmEntry, ProgressiveComputationMatrices,
    TotalRepeatingMatrices,
};
pub use naive::{embed_unique_weights, kron_terms, tvc_forward, tvc_grad_input, tvc_grad_weights, DenseKernel, KroneckerTerms};
pub use norm::{BatchNorm2d, Mode};
pub use tensor::{col2im_accumulate, im2col, ConvGeometry, PatchMatrix, Tensor};
