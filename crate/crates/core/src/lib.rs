//! Offline text-independent writer identification from single word images.
//!
//! The pipeline cuts SIFT keypoint fragments out of a word image, runs each
//! fragment through a small letter-trained convolutional network, summarizes
//! the resulting feature maps with a gradient-histogram descriptor, weights
//! filters by an entropy-based saliency profile, and scores enrolled writers
//! with one-vs-all RBF SVMs whose per-fragment scores are averaged up to
//! word and page level. Scores from the first two convolution layers can be
//! fused with a validation-selected mixing weight.
//!
//! Modules follow the processing order:
//!   [`imaging`] -> [`keypoints`] -> [`convnet`] -> [`hogmap`] ->
//!   [`saliency`] -> [`pooling`] -> [`classify`], with [`data`] providing
//!   corpora, [`config`] the run parameters, and [`pipeline`] the glue.

pub mod classify;
pub mod config;
pub mod convnet;
pub mod data;
pub mod hogmap;
pub mod imaging;
pub mod keypoints;
pub mod pipeline;
pub mod pooling;
pub mod saliency;
pub mod util;
