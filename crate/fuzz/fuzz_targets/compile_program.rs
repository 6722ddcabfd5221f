#![no_main]

use libfuzzer_sys::fuzz_target;
use prompt_cache::compiler::{compile_program, PromptProgram};
use prompt_cache::pml::{parse_schema, serialize_schema};

fuzz_target!(|data: &[u8]| {
    let Ok(src) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(program) = PromptProgram::from_json(src) else {
        return;
    };
    let Ok(schema) = compile_program(&program, "fuzz") else {
        return;
    };
    let back = parse_schema(&serialize_schema(&schema)).expect("compiled schema parses");
    assert_eq!(back, schema);
});
