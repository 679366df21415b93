//! Risk-aware safety filters built from elliptic boundary-value problems on
//! occupancy grids.
//!
//! The pipeline discretizes an occupancy map ([`grid`], [`boundary`]),
//! assigns a boundary flux per surface node from environmental features
//! ([`riskmap`]), solves a Poisson problem for the safety function and a
//! vector Laplace problem for the guidance field ([`elliptic`]), and
//! combines both into a closed-form safety filter ([`safety`]). The
//! [`backstep`] module lifts the filter to double integrators and [`sim`]
//! runs closed-loop experiments. [`scenario`] ties everything to a TOML
//! scenario document.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backstep;
pub mod boundary;
pub mod contour;
pub mod elliptic;
pub mod error;
pub mod field;
pub mod grid;
pub mod riskmap;
pub mod safety;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};

pub type Vec2 = nalgebra::Vector2<f64>;
pub type Mat2 = nalgebra::Matrix2<f64>;
