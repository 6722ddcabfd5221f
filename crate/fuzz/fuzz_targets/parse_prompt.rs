#![no_main]

use libfuzzer_sys::fuzz_target;
use prompt_cache::pml::{parse_prompt, serialize_prompt};

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(doc) = parse_prompt(src) else { return };
    let again = parse_prompt(&serialize_prompt(&doc)).expect("serialized prompt parses");
    assert_eq!(again, doc);
});
