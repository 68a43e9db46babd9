//! Camouflaged-object-detection network built from three cooperating stages:
//! an adaptive feature fusion module that derives global guidance from the
//! backbone pyramid, a guidance-driven feature refinement module, and a
//! context-aware decoder that couples channel branches through dilated
//! convolutions. The crate also ships the segmentation losses, the four
//! standard saliency/COD evaluation metrics, a deterministic synthetic-data
//! generator, and a training/evaluation harness.
//!
//! Tensors follow the `(batch, channel, height, width)` layout throughout.
//! Feature levels are numbered 1..4 with strides 4/8/16/32 relative to the
//! input image.
//!
//! The networks are generic over a [`burn`] backend; training runs on
//! `Autodiff<NdArray>` and inference on the plain `NdArray` backend (see
//! [`harness`]).

pub mod affm;
pub mod backbone;
pub mod blocks;
pub mod cfdm;
pub mod data;
pub mod error;
pub mod frm;
pub mod harness;
pub mod interp;
pub mod losses;
pub mod metrics;
pub mod network;

pub use affm::{Affm, Dla, GuidanceMap};
pub use backbone::{Backbone, BackboneSpec, FeaturePyramid};
pub use cfdm::DecoderConfig;

pub use error::{Error, Result};
pub use frm::Level;

pub use network::{AblationVariant, NetworkOutputs, Pfrnet};
