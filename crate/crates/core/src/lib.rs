//! Semi-supervised classification on predefined evenly-distributed class
//! centroids (PEDCC).
//!
//! The crate trains a small classifier whose final layer is frozen to a set
//! of unit vectors in equilibrium on the feature hypersphere. Labeled data
//! pulls features onto their class centroid (margin softmax + mean-squared
//! distance); unlabeled data is shaped by a consistency term between weak
//! and strong views and by a maximum-mean-discrepancy term toward the
//! centroid distribution. Everything runs on a self-contained reverse-mode
//! autodiff engine in double precision, so training is deterministic given
//! its seeds.

pub mod data;
pub mod losses;
pub mod model;
pub mod pedcc;
pub mod tensor;
pub mod trainer;
