//! Subcommands of the `swapflow` binary.
//!
//! Every subcommand writes a JSON config echo (`<output>.config.json`) next to
//! its main output so that a result can be traced back to the exact flags and
//! device profile that produced it.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use swapflow_core::cache::CacheState;
use swapflow_core::model::container::{load_model, read_activation_trace, save_model, write_activation_trace};
use swapflow_core::model::{decode_step, gen_model, DType, DenseExec, KvCache, Model, ModelSpec, Site};
use swapflow_core::pipeline::{decode, read_trace_csv, timing_report, PipelineConfig, RunMode};
use swapflow_core::planner::{estimate_hr_si, plan, ModelStats, Plan, PlanOptions, DEFAULT_STOP_THRESHOLD};
use swapflow_core::sparsity::{calibrate_thresholds, cross_layer_similarity, upper_bound_sparsity, ThresholdTable};
use swapflow_core::store::{pack, BandwidthModel, IoMode, PackedStore, MAGIC, PROFILE_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("no data: {0}")]
    NoData(String),
    #[error(transparent)]
    Core(#[from] swapflow_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 2 usage, 3 input or format, 4 planning infeasible, 5 runtime fault.
    pub fn exit_code(&self) -> u8 {
        use swapflow_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::NoData(_) => 3,
            CliError::Core(e) => match e {
                E::Planning(_) => 4,
                E::Budget { .. } | E::Runtime(_) => 5,
                E::Spec(_) | E::Input(_) | E::Format(_) | E::Store(_) | E::Io(_) | E::Json(_) | E::Csv(_) => 3,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "swapflow", version, about = "Active-weight swapping for sparse LLM decoding on flash-backed memory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "lowercase", tag = "subcommand")]
pub enum Command {
    /// Generate a deterministic synthetic model.
    Genmodel(GenmodelArgs),
    /// Cross-layer similarity and upper-bound sparsity of a model.
    Analyze(AnalyzeArgs),
    /// Calibrate magnitude thresholds and record an activation trace.
    Calibrate(CalibrateArgs),
    /// Pack a model into a cross-layer-grouped weight store.
    Pack(PackArgs),
    /// Choose sparsity, group size and cache budget for a memory budget.
    Plan(PlanArgs),
    /// Decode tokens through the swapping pipeline.
    Run(RunArgs),
    /// Aggregate a run trace into summary tables.
    Report(ReportArgs),
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct GenmodelArgs {
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Defaults to twice the hidden size.
    #[arg(long)]
    pub ffn: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
    #[arg(long, default_value = "f32")]
    pub dtype: DType,
    #[arg(long, default_value_t = 0.1)]
    pub weight_scale: f32,
    #[arg(long)]
    pub seed: u64,
    /// Manifest path; the payload is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated token ids, or a file containing them.
    #[arg(long)]
    pub prompt_tokens: String,
    #[arg(long, default_value_t = 8)]
    pub n_tokens: usize,
    /// Sparsity used for the Top-K precision column.
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,
    /// Retention step of the upper-bound search.
    #[arg(long, default_value_t = 0.01)]
    pub step: f64,
    #[arg(long)]
    pub similarity_out: PathBuf,
    #[arg(long)]
    pub upper_bound_out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// File with one comma-separated prompt per line.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7")]
    pub levels: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the dense activation trace of every prompt position.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct PackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub group_size: usize,
    /// Convert the weights before packing.
    #[arg(long)]
    pub dtype: Option<DType>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct PlanArgs {
    /// Model manifest, or a packed store (pins the group size).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub memory_budget: f64,
    #[arg(long, default_value_t = 0.0)]
    pub kv: f64,
    /// Activation trace used to measure hr and si.
    #[arg(long)]
    pub calib_trace: Option<PathBuf>,
    /// Use this sparsity instead of the budget-derived one.
    #[arg(long)]
    pub sparsity: Option<f64>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_STOP_THRESHOLD)]
    pub stop_threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct RunArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Without a plan, `--sparsity` and `--cache-bytes` apply and no budget is enforced.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,
    #[arg(long, default_value_t = 0)]
    pub cache_bytes: u64,
    /// Threshold table from `calibrate`; selects channels by magnitude.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Comma-separated token ids, or a file containing them.
    #[arg(long)]
    pub prompt_tokens: String,
    #[arg(long)]
    pub n_tokens: usize,
    #[arg(long, default_value = "sim")]
    pub mode: RunMode,
    /// Recorded for reproducibility; decoding is greedy and draws no randomness.
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub trace: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub summary: PathBuf,
    /// Long-format per-token metrics (`token,metric,value`).
    #[arg(long)]
    pub long: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code; messages go to `out` and `err`.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 { write!(out, "{e}") } else { write!(err, "{e}") };
            return code;
        }
    };
    match execute(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Genmodel(a) => genmodel(a, out),
        Command::Analyze(a) => analyze(a, out),
        Command::Calibrate(a) => calibrate(a, out),
        Command::Pack(a) => pack_cmd(a, out),
        Command::Plan(a) => plan_cmd(a, out),
        Command::Run(a) => run(a, out),
        Command::Report(a) => report(a, out),
    }
}

#[derive(Serialize)]
struct Echo<'a> {
    tool: &'static str,
    version: &'static str,
    #[serde(flatten)]
    command: &'a Command,
    /// The profile actually used, after `--profile` / environment lookup.
    #[serde(skip_serializing_if = "Option::is_none")]
    resolved_profile: Option<&'a BandwidthModel>,
}

fn echo_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn write_echo(output: &Path, command: &Command, profile: Option<&BandwidthModel>) -> Result<()> {
    let echo = Echo { tool: "swapflow", version: env!("CARGO_PKG_VERSION"), command, resolved_profile: profile };
    fs::write(echo_path(output), serde_json::to_string_pretty(&echo)? + "\n")?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Token ids from a literal list or a file, separated by commas or whitespace.
pub fn parse_tokens(arg: &str) -> Result<Vec<u32>> {
    let path = Path::new(arg);
    let text = if !arg.contains(',') && path.is_file() { fs::read_to_string(path)? } else { arg.to_string() };
    let tokens = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().map_err(|_| CliError::Usage(format!("bad token id {s:?}"))))
        .collect::<Result<Vec<u32>>>()?;
    if tokens.is_empty() {
        return Err(CliError::Usage("prompt is empty".into()));
    }
    Ok(tokens)
}

fn is_store(path: &Path) -> Result<bool> {
    let mut magic = [0u8; 4];
    let mut f = File::open(path)?;
    Ok(f.read(&mut magic)? == 4 && &magic == MAGIC)
}

fn profile_for(path: Option<&Path>) -> Result<BandwidthModel> {
    BandwidthModel::resolve(path).map_err(|e| match e {
        swapflow_core::Error::Io(io) => CliError::Usage(format!(
            "cannot read device profile ({}): {io}",
            path.map_or_else(|| format!("${PROFILE_ENV}"), |p| p.display().to_string())
        )),
        e => e.into(),
    })
}

fn genmodel(a: &GenmodelArgs, out: &mut dyn Write) -> Result<()> {
    let spec = ModelSpec::new(a.layers, a.hidden, a.ffn.unwrap_or(2 * a.hidden), a.heads, a.vocab, a.dtype, a.seed);
    let model = gen_model(&spec, a.weight_scale)?;
    let manifest = save_model(&model, &a.out)?;
    write_echo(&a.out, &Command::Genmodel(a.clone()), None)?;
    writeln!(out, "wrote {} ({} tensors, {} bytes)", a.out.display(), manifest.tensors.len(), spec.model_bytes())?;
    Ok(())
}

/// Dense greedy decode; returns the activation trace of every decoded position
/// (the last prompt position first).
fn dense_traces(model: &Model, prompt: &[u32], n_tokens: usize) -> Result<Vec<Vec<swapflow_core::model::Activation>>> {
    let mut kv = KvCache::new(model.spec().n_layers);
    let mut traces = Vec::new();
    for &t in &prompt[..prompt.len() - 1] {
        decode_step(&model.backbone, &mut kv, t, &mut DenseExec(model))?;
    }
    let mut input = prompt[prompt.len() - 1];
    for _ in 0..n_tokens.max(1) {
        let (logits, record) = decode_step(&model.backbone, &mut kv, input, &mut DenseExec(model))?;
        traces.push(record.activations());
        input = swapflow_core::model::argmax(&logits);
    }
    Ok(traces)
}

#[derive(Serialize)]
struct SimilarityMean {
    layer: usize,
    site: Site,
    cosine: f64,
    precision: f64,
}

fn analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let prompt = parse_tokens(&a.prompt_tokens)?;
    let traces = dense_traces(&model, &prompt, a.n_tokens)?;

    // Mean over decoded positions, per (layer, site).
    let mut acc: BTreeMap<(usize, Site), (f64, f64, usize)> = BTreeMap::new();
    for trace in &traces {
        for r in cross_layer_similarity(trace, a.sparsity)?.rows {
            let e = acc.entry((r.layer, r.site)).or_default();
            e.0 += r.cosine;
            e.1 += r.precision;
            e.2 += 1;
        }
    }
    let mut w = csv::Writer::from_writer(create(&a.similarity_out)?);
    for ((layer, site), (cos, prec, n)) in acc {
        w.serialize(SimilarityMean { layer, site, cosine: cos / n as f64, precision: prec / n as f64 })
            .map_err(swapflow_core::Error::from)?;
    }
    w.flush()?;

    let points = upper_bound_sparsity(&model, &prompt, a.n_tokens, a.step)?;
    let mut w = csv::Writer::from_writer(create(&a.upper_bound_out)?);
    for p in &points {
        w.serialize(p).map_err(swapflow_core::Error::from)?;
    }
    w.flush()?;
    write_echo(&a.similarity_out, &Command::Analyze(a.clone()), None)?;
    let mean = points.iter().map(|p| p.fraction).sum::<f64>() / points.len().max(1) as f64;
    writeln!(out, "mean retained fraction {mean:.4} over {} tokens", points.len())?;
    Ok(())
}

fn read_prompts(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(parse_tokens).collect()
}

fn calibrate(a: &CalibrateArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model)?;
    let prompts = read_prompts(&a.prompts)?;
    if prompts.is_empty() {
        return Err(CliError::NoData(format!("{} holds no prompts", a.prompts.display())));
    }
    let table = calibrate_thresholds(&model, &prompts, &a.levels)?;
    fs::write(&a.out, serde_json::to_string_pretty(&table)? + "\n")?;
    if let Some(path) = &a.trace_out {
        let mut steps = Vec::new();
        for p in &prompts {
            let mut kv = KvCache::new(model.spec().n_layers);
            for &t in p {
                let (_, record) = decode_step(&model.backbone, &mut kv, t, &mut DenseExec(&model))?;
                steps.push(record.activations());
            }
        }
        let mut w = create(path)?;
        write_activation_trace(&mut w, &steps)?;
        w.flush()?;
    }
    write_echo(&a.out, &Command::Calibrate(a.clone()), None)?;
    writeln!(out, "calibrated {} levels over {} positions", a.levels.len(), table.samples)?;
    Ok(())
}

fn pack_cmd(a: &PackArgs, out: &mut dyn Write) -> Result<()> {
    let mut model = load_model(&a.model)?;
    if let Some(dtype) = a.dtype {
        model = model.with_dtype(dtype)?;
    }
    let header = pack(&model, a.group_size, &a.out)?;
    write_echo(&a.out, &Command::Pack(a.clone()), None)?;
    writeln!(out, "packed {} groups, {} payload bytes", header.groups.len(), header.payload_bytes)?;
    Ok(())
}

fn plan_cmd(a: &PlanArgs, out: &mut dyn Write) -> Result<()> {
    let profile = profile_for(a.profile.as_deref())?;
    let (spec, store_n) = if is_store(&a.model)? {
        let store = PackedStore::open(&a.model, IoMode::Sim)?;
        (store.spec().clone(), Some(store.group_size()))
    } else {
        (load_model(&a.model)?.spec().clone(), None)
    };
    let fixed_n = match (a.group_size, store_n) {
        (Some(n), Some(s)) if n != s => {
            return Err(CliError::Usage(format!("--group-size {n} conflicts with the store's group size {s}")))
        }
        (n, s) => n.or(s),
    };
    let stats = ModelStats::from_spec(&spec);
    let mut opts = PlanOptions {
        sp: a.sparsity,
        fixed_n,
        stop_threshold: a.stop_threshold,
        ..PlanOptions::new(a.memory_budget, a.kv)
    };
    let mut result = plan(&stats, &profile, &opts)?;
    if let Some(path) = &a.calib_trace {
        let steps = read_activation_trace(BufReader::new(File::open(path)?))?;
        if steps.is_empty() {
            return Err(CliError::NoData(format!("{} holds no activations", path.display())));
        }
        // hr depends on the cache size the first pass leaves; re-plan once with
        // the measured values.
        let caps = CacheState::capacities_for_budget(&spec, result.m_cache() as u64);
        let est = estimate_hr_si(&spec, Some(&steps), result.sp(), &caps)?;
        opts.hr = est.hr;
        opts.si = est.si;
        result = plan(&stats, &profile, &opts)?;
    }
    fs::write(&a.out, result.to_json()?)?;
    write_echo(&a.out, &Command::Plan(a.clone()), Some(&profile))?;
    writeln!(
        out,
        "sp {:.4}, N {}, cache {:.0} B, predicted {:.3} ms/token ({})",
        result.sp(),
        result.group_size(),
        result.m_cache(),
        result.predicted.t_decode * 1e3,
        result.stop_reason
    )?;
    Ok(())
}

fn run(a: &RunArgs, out: &mut dyn Write) -> Result<()> {
    let profile = profile_for(a.profile.as_deref())?;
    let io = match a.mode {
        RunMode::Real => IoMode::Real,
        RunMode::Sim => IoMode::Sim,
    };
    let store = PackedStore::open(&a.store, io)?;
    let prompt = parse_tokens(&a.prompt_tokens)?;
    let (mut cfg, cache) = match &a.plan {
        Some(path) => {
            let p = Plan::from_json(&fs::read_to_string(path)?)?;
            PipelineConfig::from_plan(&p, &store, a.mode, profile.clone())?
        }
        None => {
            let cfg = PipelineConfig { bandwidth: profile.clone(), ..PipelineConfig::new(a.sparsity, a.mode) };
            (cfg, CacheState::for_budget(store.spec(), a.cache_bytes))
        }
    };
    if let Some(path) = &a.thresholds {
        let table: ThresholdTable = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| swapflow_core::Error::Format(format!("threshold table: {e}")))?;
        table.validate()?;
        cfg.thresholds = Some(table);
    }
    let result = decode(&store, cache, &cfg, &prompt, a.n_tokens)?;
    let mut w = create(&a.trace)?;
    result.trace.write_csv(&mut w)?;
    w.flush()?;
    write_echo(&a.trace, &Command::Run(a.clone()), Some(&profile))?;
    let tokens: Vec<String> = result.tokens.iter().map(u32::to_string).collect();
    writeln!(out, "{}", tokens.join(","))?;
    Ok(())
}

fn report(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let rows = read_trace_csv(BufReader::new(File::open(&a.trace)?))?;
    let Some(rep) = timing_report(&rows) else {
        return Err(CliError::NoData(format!("{} has no rows", a.trace.display())));
    };
    let mut w = create(&a.summary)?;
    rep.write_summary_csv(&mut w)?;
    w.flush()?;
    if let Some(path) = &a.long {
        let mut w = create(path)?;
        rep.write_long_csv(&mut w)?;
        w.flush()?;
    }
    write_echo(&a.summary, &Command::Report(a.clone()), None)?;
    let s = &rep.summary;
    writeln!(
        out,
        "{} tokens, {:.2} tokens/s, hit rate {:.3}, overlap efficiency {:.3}",
        s.tokens, s.tokens_per_s, s.hit_rate, s.overlap_efficiency
    )?;
    Ok(())
}
