//! Retinal fluid segmentation from structural and angiographic OCT.
//!
//! The crate covers the full desk-scale pipeline: the RFNV1 volume container,
//! synthetic phantoms, preprocessing and OCT/OCTA fusion, grader voting,
//! the ReF-Net segmentation network with its training loop, evaluation
//! metrics, fluid volumetry and longitudinal registration.

pub mod error;
pub mod evaluator;
pub mod groundtruth;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod refnet;
pub mod registration;
pub mod trainer;
pub mod volumetry;
pub mod volume;

pub use error::{Error, Result};
