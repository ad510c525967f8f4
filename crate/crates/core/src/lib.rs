//! Multi-species weakly asymmetric zero-range processes on the discrete torus.

pub mod coupling;
pub mod ensemble;
pub mod fields;
pub mod frame;
pub mod kmc;
pub mod rates;
pub mod spde;
pub mod stats;
