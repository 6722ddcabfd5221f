#![no_main]

use libfuzzer_sys::fuzz_target;
use prompt_cache::layout::plan_layout;
use prompt_cache::model::ByteTokenizer;
use prompt_cache::pml::{load_schema, parse_schema, serialize_schema};

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(doc) = parse_schema(src) else { return };
    let again = parse_schema(&serialize_schema(&doc)).expect("serialized schema parses");
    assert_eq!(again, doc);
    if let Ok(flat) = load_schema(src) {
        let _ = plan_layout(&flat, &ByteTokenizer);
    }
});
