#![no_main]

use libfuzzer_sys::fuzz_target;
use prompt_cache::layout::{plan_layout, resolve_prompt};
use prompt_cache::model::ByteTokenizer;
use prompt_cache::pml::{load_schema, parse_prompt, validate_prompt};

// Input is a schema and a prompt separated by a NUL byte.
fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else {
        return;
    };
    let Some((schema_src, prompt_src)) = src.split_once('\0') else {
        return;
    };
    let (Ok(schema), Ok(prompt)) = (load_schema(schema_src), parse_prompt(prompt_src)) else {
        return;
    };
    let Ok(plan) = plan_layout(&schema, &ByteTokenizer) else {
        return;
    };
    if validate_prompt(&prompt, &schema).ok {
        let _ = resolve_prompt(&prompt, &plan, &ByteTokenizer);
    }
});
