//! Region-based class activation maps.
//!
//! Per-layer gradients of a class score are turned into semantic
//! information maps ([`sim`]), fused, and averaged over superpixels found
//! by cosine K-means on the layer features ([`superpixel`], [`sip`]). The
//! resulting maps feed segmentation seeding ([`seeds`]), localization
//! ([`locate`]) and occlusion studies ([`occlude`]).

pub mod bundle;
pub mod error;
pub mod locate;
pub mod npy;
pub mod occlude;
pub mod resize;
pub mod seeds;
pub mod sim;
pub mod sip;
pub mod superpixel;
pub mod synth;
pub mod tensor;
pub mod visual;

pub use bundle::{read_bundle, write_bundle, ClassRecord, FeatureBundle, LayerRecord};
pub use error::{Error, Result};
pub use locate::{
    box_iou, largest_component_bbox, loc_scores, threshold_mask, BBox, LocRecord, Mask,
};
pub use npy::{load_array, save_array};
pub use resize::bilinear_resize;
pub use seeds::{make_seed, miou, ConfusionMatrix, SeedMask};
pub use sim::{baseline_cam, baseline_gradcam, compute_sim, fuse_sims, ActivationMap};
pub use sip::{propagate_cascade, propagate_once, region_cam, RegionCam, SipConfig};
pub use superpixel::{cluster_layer, kmeans_cosine, KMeansOptions, KMeansResult, LabelMap};
pub use tensor::{minmax_normalize, Tensor};
