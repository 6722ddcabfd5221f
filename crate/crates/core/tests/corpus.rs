use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use prompt_cache::cache::{encode_schema, ModuleStore, Tier, TierCapacities};
use prompt_cache::engine::{oracle_serve, serve, ServeRequest};
use prompt_cache::layout::{plan_layout, LayoutPlan};
use prompt_cache::model::{ByteTokenizer, Model, ModelConfig};
use prompt_cache::pml::{
    load_schema, parse_prompt, parse_schema, serialize_prompt, serialize_schema, validate_prompt,
    SchemaDoc,
};

fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

fn read_dir(sub: &str) -> Vec<(String, String)> {
    let mut out: Vec<_> = fs::read_dir(corpus_dir().join(sub))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "pml"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read_to_string(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn every_schema_parses_round_trips_and_lays_out() {
    let schemas = read_dir("schemas");
    assert!(schemas.len() >= 10, "corpus has {} schemas", schemas.len());
    for (file, src) in &schemas {
        let raw = parse_schema(src).unwrap_or_else(|e| panic!("{file}: {e}"));
        assert_eq!(
            parse_schema(&serialize_schema(&raw)).unwrap(),
            raw,
            "{file}"
        );
        let doc = load_schema(src).unwrap();
        assert!(!doc.has_chat_tags());
        assert_eq!(
            parse_schema(&serialize_schema(&doc)).unwrap(),
            doc,
            "{file}"
        );
        let plan = plan_layout(&doc, &ByteTokenizer).unwrap_or_else(|e| panic!("{file}: {e}"));
        assert_eq!(plan.entries.len(), doc.modules().len(), "{file}");
    }
}

#[test]
fn every_prompt_validates_and_serves_like_the_oracle() {
    let model = Model::new(ModelConfig::tiny()).unwrap();
    let store = ModuleStore::new(model.config(), TierCapacities::unbounded());
    let mut schemas: BTreeMap<String, (SchemaDoc, LayoutPlan)> = BTreeMap::new();
    for (_, src) in read_dir("schemas") {
        let doc = load_schema(&src).unwrap();
        let plan = plan_layout(&doc, &ByteTokenizer).unwrap();
        encode_schema(&model, &doc, &plan, &store, Tier::Fast).unwrap();
        schemas.insert(doc.name.clone(), (doc, plan));
    }

    let prompts = read_dir("prompts");
    assert!(prompts.len() >= schemas.len());
    let mut used = std::collections::BTreeSet::new();
    for (file, src) in &prompts {
        let prompt = parse_prompt(src).unwrap_or_else(|e| panic!("{file}: {e}"));
        assert_eq!(
            parse_prompt(&serialize_prompt(&prompt)).unwrap(),
            prompt,
            "{file}"
        );
        let (schema, plan) = &schemas[&prompt.schema_name];
        used.insert(schema.name.clone());
        let report = validate_prompt(&prompt, schema);
        assert!(report.ok, "{file}: {report}");

        let req = ServeRequest::new(prompt, 8);
        let cached =
            serve(&req, schema, plan, &store, &model).unwrap_or_else(|e| panic!("{file}: {e}"));
        let oracle = oracle_serve(&req, schema, plan, &model).unwrap();
        let base = serve(&req.clone().baseline(), schema, plan, &store, &model).unwrap();
        assert_eq!(cached.output_tokens, oracle.output_tokens, "{file}");
        assert_eq!(cached.output_tokens.len(), 8);
        assert_eq!(base.output_tokens.len(), 8);
        assert_eq!(cached.cache_report.modules_missed, 0, "{file}");
        assert_eq!(
            cached.cache_report.cached_token_count + cached.cache_report.uncached_token_count,
            base.prompt_token_count,
            "{file}"
        );
    }
    assert_eq!(used.len(), schemas.len(), "every schema has a prompt");
}
