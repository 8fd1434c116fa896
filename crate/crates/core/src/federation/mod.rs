//! Model files, the versioned registry, and its network transport.

mod format;
mod net;
mod registry;
pub mod wire;

pub use format::{
    deserialize_generator, deserialize_model, serialize_generator, serialize_model, FormatError, Model,
    KIND_DISCRIMINATOR, KIND_GENERATOR, MAGIC,
};
pub use net::{serve, RemoteRegistry, ServerHandle};
pub use registry::{
    validate_id, ModelEnvelope, ModelRegistry, RegistryClient, RegistryError, Selector, MAX_ID_LEN,
};
