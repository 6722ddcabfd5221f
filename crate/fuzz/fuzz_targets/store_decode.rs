#![no_main]

use libfuzzer_sys::fuzz_target;
use prompt_cache::cache::{ModuleStore, TierCapacities};
use prompt_cache::model::ModelConfig;

fuzz_target!(|data: &[u8]| {
    let config = ModelConfig::tiny();
    let Ok(store) = ModuleStore::from_bytes(data, &config, TierCapacities::unbounded()) else {
        return;
    };
    let bytes = store.to_bytes();
    let again = ModuleStore::from_bytes(&bytes, &config, TierCapacities::unbounded())
        .expect("re-encoded store loads");
    assert_eq!(again.to_bytes(), bytes);
});
