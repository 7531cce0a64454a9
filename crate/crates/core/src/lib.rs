//! Subsidiary prototype-space alignment for universal domain adaptation,
//! run end to end on procedurally generated domain-shifted images.

pub mod autodiff;
pub mod synthgen;
pub mod bownet;
pub mod train;
pub mod metrics;
pub mod exp;
