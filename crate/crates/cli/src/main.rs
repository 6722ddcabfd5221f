mod error;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use prompt_cache::bench::{
    export_report, run_scaling_with, BenchOptions, ReportFormat, ScalingReport,
};
use prompt_cache::cache::{encode_scaffold, encode_schema, ModuleStore, Tier, TierCapacities};
use prompt_cache::compiler::{compile_program, PromptProgram};
use prompt_cache::engine::{oracle_serve, serve, ServeRequest, ServeResponse};
use prompt_cache::layout::plan_layout;
use prompt_cache::model::{ByteTokenizer, Model, ModelConfig};
use prompt_cache::pml::{
    load_schema, parse_prompt, serialize_schema, validate_prompt, SchemaDoc, ValidationReport,
};
use serde_json::{json, Value};

use error::CliError;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "promptcache",
    version,
    about = "Reusable attention states for modular prompts"
)]
struct Cli {
    /// Model config JSON. Defaults to the bundled tiny model.
    #[arg(long, global = true, env = "PROMPTCACHE_MODEL")]
    model: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum TierArg {
    Fast,
    Slow,
}

impl From<TierArg> for Tier {
    fn from(t: TierArg) -> Self {
        match t {
            TierArg::Fast => Tier::Fast,
            TierArg::Slow => Tier::Slow,
        }
    }
}

#[derive(clap::Args)]
struct Capacities {
    /// Fast-tier capacity in bytes (unbounded when omitted).
    #[arg(long)]
    fast_capacity: Option<u64>,
    /// Slow-tier capacity in bytes (unbounded when omitted).
    #[arg(long)]
    slow_capacity: Option<u64>,
}

impl Capacities {
    fn get(&self) -> TierCapacities {
        TierCapacities {
            fast: self.fast_capacity,
            slow: self.slow_capacity,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a schema, and a prompt against it when given.
    Validate {
        schema: PathBuf,
        prompt: Option<PathBuf>,
    },

    /// Encode every module of a schema into a store file.
    Encode {
        schema: PathBuf,
        #[arg(long, env = "PROMPTCACHE_STORE")]
        store: PathBuf,
        #[arg(long, value_enum, default_value_t = TierArg::Fast)]
        tier: TierArg,
        /// Comma-separated modules to encode together as a scaffold. Repeatable.
        #[arg(long)]
        scaffold: Vec<String>,
        #[command(flatten)]
        capacities: Capacities,
    },

    /// Serve a prompt and print the response.
    Run {
        prompt: PathBuf,
        #[arg(long, env = "PROMPTCACHE_STORE")]
        store: Option<PathBuf>,
        /// Schema file to use instead of the copy kept in the store.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        /// Full prefill without cached modules.
        #[arg(long, conflicts_with = "oracle")]
        no_cache: bool,
        /// Exact block-masked reference computation.
        #[arg(long)]
        oracle: bool,
        /// Prefer scaffold entries covering the imported modules.
        #[arg(long)]
        scaffolds: bool,
        #[command(flatten)]
        capacities: Capacities,
    },

    /// Time-to-first-token sweep, cached against full prefill.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, value_enum, default_value_t = TierArg::Fast)]
        tier: TierArg,
        /// Report file; `.json` selects JSON, anything else CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the trials of each length on separate threads.
        #[arg(long)]
        parallel: bool,
    },

    /// Show store contents, or the layout of a schema.
    Inspect {
        #[arg(long, env = "PROMPTCACHE_STORE")]
        store: Option<PathBuf>,
        /// Schema whose layout plan to print.
        #[arg(long)]
        layout: Option<PathBuf>,
    },

    /// Compile a JSON prompt program into a schema.
    Compile {
        program: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Schema name; defaults to the program file stem.
        #[arg(long)]
        name: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let format = cli.format;
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match format {
                Format::Json => eprintln!("{}", e.to_json()),
                Format::Text => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out = Output(cli.format);
    let model_path = cli.model.as_deref();
    match cli.command {
        Command::Validate { schema, prompt } => {
            require(&schema)?;
            if let Some(p) = &prompt {
                require(p)?;
            }
            cmd_validate(&out, &schema, prompt.as_deref())
        }
        Command::Encode {
            schema,
            store,
            tier,
            scaffold,
            capacities,
        } => {
            require(&schema)?;
            let model = load_model(model_path)?;
            cmd_encode(
                &out,
                &model,
                &schema,
                &store,
                tier.into(),
                &scaffold,
                capacities.get(),
            )
        }
        Command::Run {
            prompt,
            store,
            schema,
            max_new,
            no_cache,
            oracle,
            scaffolds,
            capacities,
        } => {
            require(&prompt)?;
            if let Some(s) = &schema {
                require(s)?;
            }
            if let Some(s) = &store {
                require(s)?;
            }
            let model = load_model(model_path)?;
            let store = match &store {
                Some(path) => ModuleStore::load(path, model.config(), capacities.get())?,
                None => ModuleStore::new(model.config(), capacities.get()),
            };
            let mode = if oracle {
                Mode::Oracle
            } else if no_cache {
                Mode::Baseline
            } else {
                Mode::Cached { scaffolds }
            };
            cmd_run(
                &out,
                &model,
                &store,
                &prompt,
                schema.as_deref(),
                max_new,
                mode,
            )
        }
        Command::Bench {
            lengths,
            trials,
            tier,
            out: report_path,
            parallel,
        } => {
            let model = load_model(model_path)?;
            let opts = BenchOptions {
                trials,
                tier: tier.into(),
                parallel,
            };
            cmd_bench(&out, &model, &lengths, opts, report_path.as_deref())
        }
        Command::Inspect { store, layout } => {
            if store.is_none() && layout.is_none() {
                return Err(CliError::Invalid(
                    "give --store (or PROMPTCACHE_STORE) or --layout".into(),
                ));
            }
            for p in store.iter().chain(&layout) {
                require(p)?;
            }
            let model = match &store {
                Some(_) => Some(load_model(model_path)?),
                None => None,
            };
            cmd_inspect(&out, model.as_ref(), store.as_deref(), layout.as_deref())
        }
        Command::Compile {
            program,
            output,
            name,
        } => {
            require(&program)?;
            cmd_compile(&out, &program, output.as_deref(), name)
        }
    }
}

struct Output(Format);

impl Output {
    fn emit(&self, value: &Value, text: impl FnOnce() -> String) {
        let line = match self.0 {
            Format::Json => value.to_string(),
            Format::Text => text(),
        };
        let mut stdout = std::io::stdout().lock();
        let _ = writeln!(stdout, "{line}");
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    match fs::metadata(path) {
        Ok(m) if m.is_file() => Ok(()),
        Ok(_) => Err(CliError::io(path, "not a file")),
        Err(e) => Err(CliError::io(path, e)),
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_model(path: Option<&Path>) -> Result<Model, CliError> {
    let config = match path {
        Some(p) => {
            require(p)?;
            ModelConfig::from_json(&read(p)?)?
        }
        None => ModelConfig::tiny(),
    };
    Ok(Model::new(config)?)
}

fn cmd_validate(
    out: &Output,
    schema_path: &Path,
    prompt_path: Option<&Path>,
) -> Result<(), CliError> {
    let schema = load_schema(&read(schema_path)?)?;
    let plan = plan_layout(&schema, &ByteTokenizer)?;
    let mut report = None;
    if let Some(p) = prompt_path {
        let prompt = parse_prompt(&read(p)?)?;
        let r = validate_prompt(&prompt, &schema);
        if !r.ok {
            return Err(CliError::Validation(r));
        }
        report = Some(r);
    }
    let issues = report
        .as_ref()
        .map_or(Value::Array(Vec::new()), |r| json!(r.issues));
    out.emit(
        &json!({
            "ok": true,
            "schema": schema.name,
            "modules": plan.entries.len(),
            "positions": plan.total_len,
            "issues": issues,
        }),
        || match &report {
            Some(r) if !r.issues.is_empty() => format!("ok ({r})"),
            _ => format!(
                "ok: schema `{}` with {} modules",
                schema.name,
                plan.entries.len()
            ),
        },
    );
    Ok(())
}

fn cmd_encode(
    out: &Output,
    model: &Model,
    schema_path: &Path,
    store_path: &Path,
    tier: Tier,
    scaffolds: &[String],
    capacities: TierCapacities,
) -> Result<(), CliError> {
    let schema = load_schema(&read(schema_path)?)?;
    let plan = plan_layout(&schema, &ByteTokenizer)?;
    let store = if store_path.exists() {
        ModuleStore::load(store_path, model.config(), capacities)?
    } else {
        ModuleStore::new(model.config(), capacities)
    };
    let encoded = encode_schema(model, &schema, &plan, &store, tier)?;
    for group in scaffolds {
        let members: Vec<&str> = group
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        store.insert(encode_scaffold(model, &plan, &members, tier)?)?;
    }
    store.save(store_path)?;
    let stats = store.stats();
    let bytes_used = stats.bytes_used.fast + stats.bytes_used.slow;
    out.emit(
        &json!({
            "schema": schema.name,
            "encoded": encoded,
            "scaffolds": scaffolds.len(),
            "entries": stats.entries,
            "bytes_used": bytes_used,
        }),
        || {
            format!(
                "encoded {encoded} modules of `{}`; store holds {} entries, {bytes_used} bytes",
                schema.name, stats.entries
            )
        },
    );
    Ok(())
}

#[derive(Clone, Copy)]
enum Mode {
    Cached { scaffolds: bool },
    Baseline,
    Oracle,
}

fn cmd_run(
    out: &Output,
    model: &Model,
    store: &ModuleStore,
    prompt_path: &Path,
    schema_path: Option<&Path>,
    max_new: usize,
    mode: Mode,
) -> Result<(), CliError> {
    let prompt = parse_prompt(&read(prompt_path)?)?;
    let schema: SchemaDoc = match schema_path {
        Some(p) => load_schema(&read(p)?)?,
        None => store.schema(&prompt.schema_name).ok_or_else(|| {
            CliError::Validation(ValidationReport::unknown_schema(&prompt.schema_name))
        })?,
    };
    let plan = plan_layout(&schema, &ByteTokenizer)?;
    let req = ServeRequest::new(prompt, max_new);
    let resp: ServeResponse = match mode {
        Mode::Cached { scaffolds } => {
            let req = if scaffolds { req.with_scaffolds() } else { req };
            serve(&req, &schema, &plan, store, model)?
        }
        Mode::Baseline => serve(&req.baseline(), &schema, &plan, store, model)?,
        Mode::Oracle => oracle_serve(&req, &schema, &plan, model)?,
    };
    let value: Value =
        serde_json::from_str(&resp.to_json()).map_err(|e| CliError::Internal(e.to_string()))?;
    out.emit(&value, || {
        let r = &resp.cache_report;
        format!(
            "{}\n[{} prompt tokens, {} cached, {} uncached, {} modules hit, {} missed; ttft {:.0}us]",
            resp.output_text,
            resp.prompt_token_count,
            r.cached_token_count,
            r.uncached_token_count,
            r.modules_hit,
            r.modules_missed,
            resp.timings.ttft_us
        )
    });
    Ok(())
}

fn cmd_bench(
    out: &Output,
    model: &Model,
    lengths: &[usize],
    opts: BenchOptions,
    report_path: Option<&Path>,
) -> Result<(), CliError> {
    let report = run_scaling_with(model, lengths, opts)?;
    if let Some(path) = report_path {
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        };
        export_report(&report, path, format).map_err(|e| match e {
            prompt_cache::bench::BenchError::Io(io) => CliError::io(path, io),
            other => other.into(),
        })?;
    }
    let value: Value =
        serde_json::from_str(&report.to_json()).map_err(|e| CliError::Internal(e.to_string()))?;
    out.emit(&value, || bench_table(&report));
    Ok(())
}

fn bench_table(report: &ScalingReport) -> String {
    let mut s = format!(
        "{:>8} {:>14} {:>12} {:>10} {:>9}\n",
        "seq_len", "baseline_us", "cached_us", "copy_us", "speedup"
    );
    for r in &report.rows {
        s.push_str(&format!(
            "{:>8} {:>14.0} {:>12.0} {:>10.0} {:>9.1}\n",
            r.seq_len, r.ttft_baseline_us, r.ttft_cached_us, r.copy_us, r.speedup
        ));
    }
    s.push_str(&format!(
        "log-log slope: baseline {:.2}, cached {:.2}",
        report.exponents.baseline_exp, report.exponents.cached_exp
    ));
    s
}

fn cmd_inspect(
    out: &Output,
    model: Option<&Model>,
    store_path: Option<&Path>,
    layout_path: Option<&Path>,
) -> Result<(), CliError> {
    let mut value = json!({});
    let mut text = Vec::new();
    if let (Some(model), Some(path)) = (model, store_path) {
        let store = ModuleStore::load(path, model.config(), TierCapacities::unbounded())?;
        let stats = store.stats();
        let entries: Vec<Value> = store
            .entries()
            .iter()
            .map(|e| {
                json!({
                    "key": e.key.to_string(),
                    "tier": e.tier,
                    "tokens": e.token_len(),
                    "bytes": store.entry_bytes(e),
                    "first_position": e.positions().first(),
                    "checksum": format!("{:016x}", e.checksum()),
                })
            })
            .collect();
        text.push(format!(
            "{} entries, {} fast bytes, {} slow bytes, schemas: {}",
            stats.entries,
            stats.bytes_used.fast,
            stats.bytes_used.slow,
            store.schema_names().join(", ")
        ));
        for e in store.entries() {
            text.push(format!(
                "  {:<40} {:<4} {:>6} tokens",
                e.key.to_string(),
                e.tier.to_string(),
                e.token_len()
            ));
        }
        value["store"] = json!({
            "stats": stats,
            "schemas": store.schema_names(),
            "entries": entries,
        });
    }
    if let Some(path) = layout_path {
        let schema = load_schema(&read(path)?)?;
        let plan = plan_layout(&schema, &ByteTokenizer)?;
        let layout: Value =
            serde_json::from_str(&plan.to_json()).map_err(|e| CliError::Internal(e.to_string()))?;
        text.push(format!(
            "layout of `{}` ({} positions):",
            schema.name, plan.total_len
        ));
        for e in plan.entries.values() {
            text.push(format!(
                "  {:<32} start {:>6} span {:>6} tokens {:>6}",
                e.name,
                e.start_pos,
                e.span_len,
                e.token_len()
            ));
        }
        value["layout"] = layout;
    }
    out.emit(&value, || text.join("\n"));
    Ok(())
}

fn cmd_compile(
    out: &Output,
    program_path: &Path,
    output: Option<&Path>,
    name: Option<String>,
) -> Result<(), CliError> {
    let program = PromptProgram::from_json(&read(program_path)?)?;
    let name = name.unwrap_or_else(|| {
        program_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "program".into())
    });
    let schema = compile_program(&program, &name)?;
    let pml = serialize_schema(&schema);
    match output {
        Some(path) => {
            fs::write(path, &pml).map_err(|e| CliError::io(path, e))?;
            out.emit(
                &json!({
                    "schema": schema.name,
                    "modules": schema.modules().iter().filter(|m| !m.anonymous).count(),
                    "output": path.display().to_string(),
                }),
                || format!("wrote schema `{}` to {}", schema.name, path.display()),
            );
        }
        None => print!("{pml}"),
    }
    Ok(())
}
