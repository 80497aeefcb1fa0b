//! Declarative layer graphs with named representation levels.

mod arch;
mod layers;
mod model;
mod sequential;
mod spec;

pub use arch::{architecture, architecture_names, tap_set_levels, ArchOptions, Architecture, LEVELS};
pub use layers::{Bound, BufferDecl, Ctx, Init, Layer, LayerDesc, ParamDecl};
pub use model::{build_model, Model, ModelOut, EVAL_CHUNK};
pub(crate) use model::{load_store, read_spec_hash, save_checkpoint, store_digest};
pub use sequential::{ParamStore, Sequential, BN_MOMENTUM};
pub use spec::{ModelSpec, Tap, TapSet};
