//! Domains, multichannel arrays and the convolution operators everything
//! else is built on.

mod array;
mod conv;
mod domain;
pub mod io;

pub use array::{ActivationMap, Dictionary, Signal};
pub use conv::{
    convolve, convolve_with, correlate, cross_pair, correlate_region, correlate_with, lambda_max, objective,
    soft_threshold, AtomCross, ConvMethod, ConvOptions, DEFAULT_FFT_THRESHOLD,
};
pub use domain::{Domain, Pos, Region, RegionIter, MAX_DIMS};
