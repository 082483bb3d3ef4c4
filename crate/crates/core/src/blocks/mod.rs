//! Network building blocks: channel excitation, channel and spatial context
//! modules, heads, backbone, full network variants, and a non-local baseline.

pub mod ccm;
pub mod checkpoint;
pub mod heads;
pub mod mce;
pub mod network;
pub mod nonlocal;
pub mod params;
pub mod scm;

pub use ccm::{class_feature_matrix, Ccm, CcmOut, ClassActivation};
pub use heads::{AuxHead, Backbone, FusionHead};
pub use mce::{effective_kernel, Mce, DEFAULT_KERNELS};
pub use network::{CtNet, NetOutput, NetworkConfig, Prediction, Variant, OUTPUT_STRIDE};
pub use nonlocal::{NonLocal, NonLocalOut, DEFAULT_PIXEL_CAP};
pub use params::{Bound, BufferUpdate, Conv, ConvBnRelu, Ctx, EntryKind, Init, Norm, ParamId, ParamStore};
pub use scm::{Scm, ScmOut, DEFAULT_REDUCTION};
