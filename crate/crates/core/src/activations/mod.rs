//! Activation capture from the frozen language model.

mod record;
mod store;

pub use record::ActivationRecord;
pub use store::{
    build_activation_store, language_windows, ActivationStore, PairBatch, PairStream, ShardInfo, StoreConfig,
    StoreManifest, MANIFEST_FILE, SHARD_KIND,
};
