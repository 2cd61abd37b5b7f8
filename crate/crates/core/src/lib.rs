//! Line-level quality classification and filtering for pretraining corpora.

pub mod agreement;
pub mod calibration;
pub mod classifier;
pub mod corpus;
pub mod filter;
pub mod io;
pub mod labeler;
pub mod review;
pub mod taxonomy;
