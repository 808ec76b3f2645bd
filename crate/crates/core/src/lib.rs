//! Boundary shape model (BSM).
//!
//! Part-based object detection and segmentation trained from tiny datasets
//! (a few dozen annotated images). The pipeline:
//!
//! 1. [`features`]: Harris-Laplace + DoG interest points and upright SIFT
//!    descriptors, computed on both natural images and binary masks.
//! 2. [`shapedesc`]: mask SIFT descriptors quantized into binary boundary
//!    shape descriptors, and per-cell foreground/background strengths.
//! 3. [`codebook`]: agglomerative appearance codebook with occurrences and a
//!    per-codeword shape codebook.
//! 4. [`detector`]: codeword matching, weighted Hough voting, mean-shift mode
//!    search and ROI refinement by dense sampling.
//! 5. [`segmenter`]: shape strengths splatted into a per-pixel likelihood,
//!    combined with colour and ROI terms, and resolved by dense-CRF
//!    mean-field inference.
//! 6. [`eval`]: mask IoU, average precision and fold construction.
//!
//! [`synth`] generates rigid-object datasets with exact ground truth for
//! testing the whole chain.
//!
//! With the `parallel` feature (default) data-parallel inner loops run on

pub mod codebook;
pub mod detector;
pub mod error;
pub mod eval;
pub mod features;
pub mod imagecore;
pub mod par;
pub mod segmenter;
pub mod shapedesc;
pub mod synth;

pub use codebook::{build_model, Codeword, Model, ModelParams, Occurrence, TrainingSample};
pub use detector::{Detector, DetectorParams, Hypothesis, Match, Vote};
pub use error::{Error, Result};
pub use eval::{average_precision, coco_map, iou, make_folds, match_ious, FoldSpec, GroundTruth, SegDetection};
pub use features::{FeatureParams, Keypoint, SiftDescriptor};
pub use imagecore::{BinaryMask, GrayImage, Rect, RgbImage, ScalarField};
pub use segmenter::{segment, CrfParams, InferenceMode, MarginalField, ObjectSegment, SegmentParams, UnaryField};
pub use shapedesc::{ShapeDescriptor, StrengthGrid};
