//! Residual blocks in all five layer orderings and the CIFAR network built
//! from them.

pub mod block;
pub mod checkpoint;
pub mod network;
pub mod profile;
pub mod registry;
pub mod variant;

pub use block::{build_block, shortcut_apply, shortcut_backward, BlockCache, BlockGrads, ResBlock, Shortcut};
pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use network::{build_network, ForwardCache, Network, NetworkConfig, CIFAR_WIDTHS, INPUT_CHANNELS};
pub use profile::{activation_moment_profile, gaussian_input, MomentProfile};
pub use registry::{Gradients, ParamInfo, ParamKind};
pub use variant::{Activation, BlockVariant, Step};
