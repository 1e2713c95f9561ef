//! Depth-edge estimation and depth layering toolkit.
//!
//! The pipeline stages are:
//!
//! 1. **image** – dense multi-channel float rasters and the discrete
//!    differential/filtering operators (gradients, Laplacian, Gaussian and
//!    median filters, resampling).
//! 2. **io** – PFM (portable float map) and PPM/PGM readers and writers.
//! 3. **ground_truth** – analytic depth-edge probabilities (contours from the
//!    positive Laplacian of the disparity gradient magnitude, creases from
//!    normal-component gradients) computed from clean disparity/normal maps.
//! 4. **scene** – procedural synthetic scenes with exact disparity, normals
//!    and edge masks, plus structured corruption models that stand in for
//!    unreliable stereo/mono estimators.
//! 5. **net** – a small convolutional encoder–decoder with hand-implemented
//!    forward/backward passes that fuses the unreliable color/disparity/normal
//!    channels into depth-edge probabilities.
//! 6. **segment** – watershed base regions, contour strengthening and an
//!    ultrametric contour map hierarchy built from an edge probability map.
//! 7. **refine** – edge-constrained sparse least-squares disparity refinement
//!    on a coarse-to-fine pyramid.
//! 8. **eval** – boundary precision/recall with slack radius, PR curves and
//!    ODS/OIS summaries.

pub mod error;
pub mod eval;
pub mod ground_truth;
pub mod image;
pub mod io;
pub mod net;
pub mod refine;
pub mod scene;
pub mod segment;

pub use error::{Error, Result};
pub use image::{FilterSpec, MultiChannelImage};
