//! The switchable quantized network: architecture description, parameter
//! storage, input resizing, the network itself, and plain-weight exchange.

pub mod arch;
pub mod import;
pub mod net;
pub mod params;
pub mod resize;

pub use arch::{channels_at, ArchSpec, ConfigSpace, ConvBlockSpec, SubnetConfig};
pub use import::{export_plain, import_plain, PlainWeights};
pub use net::{
    build_supernet, BnMode, Domain, ForwardCtx, ParamBinder, Supernet, BN_EPS, BN_MOMENTUM,
};
pub use params::{ParamId, ParamStore};
pub use resize::resize_input;
