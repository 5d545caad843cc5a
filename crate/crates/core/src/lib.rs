// negated comparisons reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod experiment;
pub mod geometry;
pub mod imusim;
pub mod io;
pub mod markerbase;
pub mod metrics;
pub mod moco;
pub mod motion;
pub mod phantom;
pub mod projector;
pub mod recon;
pub mod se3;
