//! Detection of functionally significant coronary stenosis from combined
//! artery and myocardium encodings, on synthetic phantoms.
//!
//! - [`synth`]: synthetic patients with oracle FFR labels
//! - [`artery`]: two-stage artery encoder (3-D VCAE over patches, then a
//!   shared 1-D CAE per latent row) producing 1024 values per artery
//! - [`myo`]: patch CAE + 500-cluster statistics producing 512 values
//! - [`mil`]: attention-based multiple-instance classifier
//! - [`eval`]: stratified cross-validation, ROC/AUC and ablation reports

pub mod artery;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod mil;
pub mod model;
pub mod myo;
pub mod selftest;
pub mod stages;
pub mod synth;

pub use error::{Error, Result};
