//! Operator-learning toolkit for hourly pollutant grids.
//!
//! The pieces, bottom up: [`tensor`] is a small dense-tensor autodiff core
//! (real64/complex128, Wengert-list tape); [`frft`] builds discrete
//! fractional Fourier bases and the spectral tape primitives; [`model`]
//! assembles the two neural-operator flavors (standard Fourier kernels and
//! fractional ones with a learnable order per layer); [`data`] handles the
//! gridded-series file format, moving windows and normalization; [`synth`]
//! generates advection-diffusion ground truth with diurnal sources;
//! [`train`] runs autoregressive multi-step training with Adam; [`eval`]
//! computes the error metrics, tables, point series and extreme-event
//! reports.

pub mod data;
pub mod eval;
pub mod frft;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
