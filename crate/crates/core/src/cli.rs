//! Command-line front end. Every run is a pure function of its config and
//! seed; reports carry no timestamps and the only sidecar is `run_meta.json`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::instances::{build_conditional_expectation, build_l1_example, random_narrow_operator, InstanceSpec};
use crate::measure::{AtomSet, MeasureSpace, SignVector};
use crate::narrowness::{
    adversarial_disjoint_signs_within, find_sign_within, find_small_sign_refining, AdversaryOutcome, Partition,
    Strategy, DEFAULT_ATOM_BUDGET,
};
use crate::operators::{read_matrix_csv, DiscreteOperator, OperatorBundle};
use crate::rounding::{round_half_integer, sign_round, RoundingInstance, RoundingResult, SignRounding};
use crate::spaces::TargetNorm;
use crate::theorems::{
    pairing_construction, revalidate, sum_compact_locally_convex, sum_compact_via_truncation, sum_finite_rank,
    PipelineParams, PipelineReport, Revalidation, StageDiagnostic, TailBound,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CERTIFIED_FAILURE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "narrowkit", version, about = "Sign constructions for narrow operators")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; required here or in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    Both,
}

impl Format {
    fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }

    fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Round fractional coefficients to 0/1, or pick signs.
    Round {
        #[arg(long, value_enum, default_value = "half")]
        mode: RoundMode,
        /// Dimension of the random instance used without a config instance.
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, value_enum, default_value = "sup")]
        norm: NormChoice,
    },
    /// Small-cell partition, or disjoint large signs when none exists.
    Partition {
        #[arg(long)]
        epsilon: Option<f64>,
        /// Number of disjoint signs requested from the adversary.
        #[arg(long, default_value_t = 2)]
        count: usize,
        #[arg(long, default_value_t = DEFAULT_ATOM_BUDGET)]
        atom_budget: usize,
    },
    /// Mean-zero sign on a set with image norm below epsilon.
    FindSign {
        #[arg(long)]
        epsilon: Option<f64>,
        /// Comma separated atom indices; the whole space by default.
        #[arg(long, value_delimiter = ',')]
        set: Option<Vec<usize>>,
        #[arg(long, default_value = "auto")]
        strategy: Strategy,
        #[arg(long, default_value_t = DEFAULT_ATOM_BUDGET)]
        atom_budget: usize,
    },
    Pairing {
        #[command(flatten)]
        budgets: BudgetArgs,
    },
    SumFiniteRank {
        #[command(flatten)]
        budgets: BudgetArgs,
    },
    SumCompact {
        #[command(flatten)]
        budgets: BudgetArgs,
        #[arg(long, value_enum, default_value = "separation")]
        method: CompactMethod,
    },
    /// Checks on the step-function operator into l1.
    ExampleL1 {
        #[arg(long, default_value_t = 12)]
        levels: usize,
        #[arg(long, default_value_t = 2)]
        atoms_per_level: usize,
        #[arg(long, value_enum, default_value = "all")]
        check: L1Check,
        /// Random signs for the tail check.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        /// Budget for the truncation check.
        #[arg(long, default_value_t = 0.125)]
        epsilon: f64,
    },
    /// Exact-zero signs for the conditional expectation on a grid.
    ExampleCondexp {
        #[arg(long, default_value_t = 4)]
        grid: usize,
    },
    /// Seeded batch of rounding and dichotomy instances with summary statistics.
    Bench {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Round { .. } => "round",
            Command::Partition { .. } => "partition",
            Command::FindSign { .. } => "find-sign",
            Command::Pairing { .. } => "pairing",
            Command::SumFiniteRank { .. } => "sum-finite-rank",
            Command::SumCompact { .. } => "sum-compact",
            Command::ExampleL1 { .. } => "example-l1",
            Command::ExampleCondexp { .. } => "example-condexp",
            Command::Bench { .. } => "bench",
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct BudgetArgs {
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundMode {
    Half,
    Sign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormChoice {
    Sup,
    L1,
    L2,
}

impl NormChoice {
    fn norm(self) -> TargetNorm {
        match self {
            NormChoice::Sup => TargetNorm::sup(),
            NormChoice::L1 => TargetNorm::l1(),
            NormChoice::L2 => TargetNorm::lp(2.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CompactMethod {
    Separation,
    Truncation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum L1Check {
    StrictNarrow,
    Tail,
    Noncompact,
    Truncation,
    All,
}

/// Contents of `--config`. Flags override matching fields.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<Format>,
    /// Operator for `partition` and `find-sign`.
    #[serde(default)]
    pub operator: Option<OperatorSource>,
    #[serde(default)]
    pub t1: Option<OperatorSource>,
    #[serde(default)]
    pub t2: Option<OperatorSource>,
    #[serde(default)]
    pub params: Option<PipelineParams>,
    #[serde(default)]
    pub rounding: Option<RoundingInstance>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub set: Option<Vec<usize>>,
    /// Tail bound for `sum-compact --method truncation`.
    #[serde(default)]
    pub tail: Option<TailBound>,
}

/// An operator given inline as an instance or read from a file: a JSON
/// operator bundle, or a matrix CSV over equal atoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OperatorSource {
    File {
        file: PathBuf,
        #[serde(default)]
        norm: Option<TargetNorm>,
    },
    Instance(InstanceSpec),
}

impl OperatorSource {
    fn defines_space(&self) -> bool {
        match self {
            OperatorSource::File { .. } => true,
            OperatorSource::Instance(spec) => spec.defines_space(),
        }
    }

    fn build(&self, seed: u64, space: Option<Arc<MeasureSpace>>) -> Result<DiscreteOperator> {
        match self {
            OperatorSource::Instance(spec) => spec.build(seed, space),
            OperatorSource::File { file, norm } => {
                let op = if file.extension().is_some_and(|e| e == "csv") {
                    let matrix = read_matrix_csv(fs::File::open(file)?)?;
                    let atoms = matrix.cols();
                    DiscreteOperator::new(
                        matrix,
                        Arc::new(MeasureSpace::uniform(atoms)?),
                        norm.clone().unwrap_or_else(TargetNorm::sup),
                    )?
                } else {
                    let mut bundle: OperatorBundle = serde_json::from_reader(fs::File::open(file)?)?;
                    if let Some(n) = norm {
                        bundle.norm = n.clone();
                    }
                    bundle.into_operator()?
                };
                match space {
                    Some(s) if *s != **op.space() => Err(Error::InvalidInput(format!(
                        "{} does not share the measure space of the other operator",
                        file.display()
                    ))),
                    _ => Ok(op),
                }
            }
        }
    }

    fn resolve(&mut self, base: &Path) -> Result<()> {
        if let OperatorSource::File { file, .. } = self {
            if file.is_relative() {
                *file = base.join(&*file);
            }
            if !file.exists() {
                return Err(Error::InvalidInput(format!(
                    "referenced file {} does not exist",
                    file.display()
                )));
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for src in [&mut cfg.operator, &mut cfg.t1, &mut cfg.t2].into_iter().flatten() {
            src.resolve(base)?;
        }
        if let Some(out) = &cfg.out {
            if out.is_relative() {
                cfg.out = Some(base.join(out));
            }
        }
        Ok(cfg)
    }
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Certified(msg)) => {
            eprintln!("certified failure: {msg}");
            EXIT_CERTIFIED_FAILURE
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Certified(String),
}

struct Context {
    name: &'static str,
    seed: u64,
    out: PathBuf,
    format: Format,
    config: ExperimentConfig,
    config_path: Option<PathBuf>,
}

pub fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    let usage = |e: Error| Failure::Usage(e.to_string());
    let config = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p).map_err(usage)?,
        None => ExperimentConfig::default(),
    };
    let seed = cli
        .common
        .seed
        .or(config.seed)
        .ok_or_else(|| Failure::Usage("a seed is required (--seed or \"seed\" in the config)".into()))?;
    let ctx = Context {
        name: cli.command.name(),
        seed,
        out: cli
            .common
            .out
            .clone()
            .or(config.out.clone())
            .unwrap_or_else(|| PathBuf::from(".")),
        format: cli.common.format.or(config.format).unwrap_or(Format::Json),
        config_path: cli.common.config.clone(),
        config,
    };
    fs::create_dir_all(&ctx.out).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", ctx.out.display())))?;
    match execute(&cli.command, &ctx) {
        Ok(artifacts) => {
            let mut files = artifacts.write(&ctx).map_err(usage)?;
            files.push("run_meta.json".into());
            write_meta(&ctx, "success", &files).map_err(usage)?;
            Ok(())
        }
        Err(e) if e.is_certified_failure() => {
            let file = format!("{}.failure.json", ctx.name);
            write_json(&ctx.out.join(&file), &failure_json(ctx.name, &e)).map_err(usage)?;
            write_meta(&ctx, "certified_failure", &[file, "run_meta.json".into()]).map_err(usage)?;
            Err(Failure::Certified(e.to_string()))
        }
        Err(e) => Err(usage(e)),
    }
}

fn write_meta(ctx: &Context, status: &str, files: &[String]) -> Result<()> {
    let meta = json!({
        "tool": "narrowkit",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": ctx.name,
        "seed": ctx.seed,
        "config": ctx.config_path.as_ref().map(|p| p.display().to_string()),
        "format": ctx.format,
        "status": status,
        "files": files,
    });
    write_json(&ctx.out.join("run_meta.json"), &meta)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Machine-readable description of a certified failure.
pub fn failure_json(subcommand: &str, e: &Error) -> serde_json::Value {
    let detail = match e {
        Error::AdaptiveBudgetExhausted { rounds, trace } => json!({ "rounds": rounds, "trace": trace }),
        Error::PreconditionFailed {
            delta,
            gamma,
            bound,
            limit,
            witness,
        } => json!({ "delta": delta, "gamma": gamma, "bound": bound, "limit": limit, "witness": witness }),
        Error::NoSignFound { threshold, best } => json!({ "threshold": threshold, "best": best }),
        Error::AtomTooLarge { atom, bound, epsilon } => json!({ "atom": atom, "bound": bound, "epsilon": epsilon }),
        Error::RankTooLarge { rank, limit } => json!({ "rank": rank, "limit": limit }),
        Error::StageFailed { stage, reason } => json!({ "stage": stage, "reason": reason }),
        Error::NoTruncationSmallEnough { target } => json!({ "target": target }),
        Error::RefinementBudgetExceeded { atoms, budget } => json!({ "atoms": atoms, "budget": budget }),
        _ => serde_json::Value::Null,
    };
    json!({
        "subcommand": subcommand,
        "status": "certified_failure",
        "message": e.to_string(),
        "detail": detail,
    })
}

/// A JSON report plus CSV rows with a fixed header.
struct Artifacts {
    report: serde_json::Value,
    header: &'static [&'static str],
    rows: Vec<Vec<String>>,
}

impl Artifacts {
    fn new<T: Serialize>(report: &T, header: &'static [&'static str], rows: Vec<Vec<String>>) -> Result<Self> {
        Ok(Artifacts {
            report: serde_json::to_value(report)?,
            header,
            rows,
        })
    }

    fn write(&self, ctx: &Context) -> Result<Vec<String>> {
        let mut files = Vec::new();
        if ctx.format.json() {
            let file = format!("{}.json", ctx.name);
            write_json(&ctx.out.join(&file), &self.report)?;
            files.push(file);
        }
        if ctx.format.csv() {
            let file = format!("{}.csv", ctx.name);
            let mut wtr = csv::Writer::from_path(ctx.out.join(&file))?;
            wtr.write_record(self.header)?;
            for r in &self.rows {
                wtr.write_record(r)?;
            }
            wtr.flush()?;
            files.push(file);
        }
        Ok(files)
    }
}

/// CSV header of each subcommand.
pub fn csv_header(subcommand: &str) -> Option<&'static [&'static str]> {
    Some(match subcommand {
        "round" => ROUND_COLUMNS,
        "partition" => PARTITION_COLUMNS,
        "find-sign" => SIGN_COLUMNS,
        "pairing" | "sum-finite-rank" | "sum-compact" => STAGE_COLUMNS,
        "example-l1" => L1_COLUMNS,
        "example-condexp" => CONDEXP_COLUMNS,
        "bench" => BENCH_COLUMNS,
        _ => return None,
    })
}

const ROUND_COLUMNS: &[&str] = &["index", "lambda", "result", "vector_norm"];
const PARTITION_COLUMNS: &[&str] = &["kind", "index", "atoms", "measure", "value", "exact"];
const SIGN_COLUMNS: &[&str] = &["atom", "weight", "sign"];
const STAGE_COLUMNS: &[&str] = &[
    "stage",
    "label",
    "atoms",
    "measure",
    "t1_norm",
    "t1_budget",
    "t2_norm",
    "t2_budget",
    "detail",
];
const L1_COLUMNS: &[&str] = &["level", "atoms", "measure", "zero_sign_norm", "row_sum", "sampled_max"];
const CONDEXP_COLUMNS: &[&str] = &["fiber", "atoms", "sign_norm"];
const BENCH_COLUMNS: &[&str] = &["family", "index", "dimension", "size", "achieved", "certificate"];

fn execute(cmd: &Command, ctx: &Context) -> Result<Artifacts> {
    match cmd {
        Command::Round { mode, dim, count, norm } => round(ctx, *mode, *dim, *count, *norm),
        Command::Partition {
            epsilon,
            count,
            atom_budget,
        } => partition(ctx, *epsilon, *count, *atom_budget),
        Command::FindSign {
            epsilon,
            set,
            strategy,
            atom_budget,
        } => find_sign(ctx, *epsilon, set.clone(), *strategy, *atom_budget),
        Command::Pairing { budgets } => pipeline(ctx, budgets, Pipeline::Pairing),
        Command::SumFiniteRank { budgets } => pipeline(ctx, budgets, Pipeline::FiniteRank),
        Command::SumCompact { budgets, method } => pipeline(ctx, budgets, Pipeline::Compact(*method)),
        Command::ExampleL1 {
            levels,
            atoms_per_level,
            check,
            samples,
            epsilon,
        } => example_l1(ctx, *levels, *atoms_per_level, *check, *samples, *epsilon),
        Command::ExampleCondexp { grid } => example_condexp(*grid),
        Command::Bench { instances } => bench(ctx, *instances),
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

#[derive(Serialize)]
struct RoundReport {
    mode: RoundMode,
    instance: RoundingInstance,
    half: Option<RoundingResult>,
    signs: Option<SignRounding>,
}

fn random_rounding(rng: &mut ChaCha8Rng, dim: usize, count: usize, norm: TargetNorm) -> Result<RoundingInstance> {
    let vectors = (0..count)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let lambdas = (0..count).map(|_| rng.gen_range(0.0..=1.0)).collect();
    RoundingInstance::new(vectors, lambdas, norm)
}

fn round(ctx: &Context, mode: RoundMode, dim: usize, count: usize, norm: NormChoice) -> Result<Artifacts> {
    let instance = match &ctx.config.rounding {
        Some(inst) => {
            inst.validate()?;
            inst.clone()
        }
        None => random_rounding(&mut ChaCha8Rng::seed_from_u64(ctx.seed), dim, count, norm.norm())?,
    };
    let (half, signs, results): (_, _, Vec<f64>) = match mode {
        RoundMode::Half => {
            let r = round_half_integer(&instance)?;
            let res = r.theta.iter().map(|&t| f64::from(t)).collect();
            (Some(r), None, res)
        }
        RoundMode::Sign => {
            let s = sign_round(&instance.vectors, &instance.norm)?;
            let res = s.signs.iter().map(|&t| f64::from(t)).collect();
            (None, Some(s), res)
        }
    };
    let rows = instance
        .vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            vec![
                i.to_string(),
                fmt(instance.lambdas[i]),
                fmt(results[i]),
                fmt(instance.norm.eval(v)),
            ]
        })
        .collect();
    let report = RoundReport {
        mode,
        instance,
        half,
        signs,
    };
    Artifacts::new(&report, ROUND_COLUMNS, rows)
}

fn single_operator(ctx: &Context) -> Result<DiscreteOperator> {
    match &ctx.config.operator {
        Some(src) => src.build(ctx.seed, None),
        None => random_narrow_operator(
            ctx.seed,
            Arc::new(MeasureSpace::uniform(16)?),
            3,
            0.6,
            TargetNorm::sup(),
        ),
    }
}

#[derive(Serialize)]
struct PartitionReport {
    epsilon: f64,
    input_atoms: usize,
    outcome: &'static str,
    atoms: usize,
    atom_map: Vec<usize>,
    partition: Option<Partition>,
    signs: Vec<SignVector>,
    norms: Vec<f64>,
}

fn partition(ctx: &Context, epsilon: Option<f64>, count: usize, budget: usize) -> Result<Artifacts> {
    let op = single_operator(ctx)?;
    let epsilon = epsilon.or(ctx.config.epsilon).unwrap_or(0.5);
    let outcome = adversarial_disjoint_signs_within(&op, epsilon, count, budget)?;
    let mut rows = Vec::new();
    let report = match outcome {
        AdversaryOutcome::Exhausted {
            partition,
            operator,
            refinement,
        } => {
            for (k, c) in partition.cells.iter().enumerate() {
                rows.push(vec![
                    "cell".into(),
                    k.to_string(),
                    c.atoms.len().to_string(),
                    fmt(operator.space().measure(&c.atoms).to_f64()),
                    fmt(c.bound),
                    c.exact.to_string(),
                ]);
            }
            PartitionReport {
                epsilon,
                input_atoms: op.atoms(),
                outcome: "partition",
                atoms: operator.atoms(),
                atom_map: refinement.offsets().to_vec(),
                partition: Some(partition),
                signs: Vec::new(),
                norms: Vec::new(),
            }
        }
        AdversaryOutcome::Disjoint {
            signs,
            norms,
            operator,
            refinement,
        } => {
            for (k, (s, n)) in signs.iter().zip(&norms).enumerate() {
                let support = s.support();
                rows.push(vec![
                    "sign".into(),
                    k.to_string(),
                    support.len().to_string(),
                    fmt(operator.space().measure(&support).to_f64()),
                    fmt(*n),
                    "true".into(),
                ]);
            }
            PartitionReport {
                epsilon,
                input_atoms: op.atoms(),
                outcome: "disjoint_signs",
                atoms: operator.atoms(),
                atom_map: refinement.offsets().to_vec(),
                partition: None,
                signs,
                norms,
            }
        }
    };
    Artifacts::new(&report, PARTITION_COLUMNS, rows)
}

#[derive(Serialize)]
struct FindSignReport {
    epsilon: f64,
    set: Vec<usize>,
    strategy: Strategy,
    norm: f64,
    mean_zero: bool,
    space: MeasureSpace,
    atom_map: Vec<usize>,
    sign: SignVector,
}

fn find_sign(
    ctx: &Context,
    epsilon: Option<f64>,
    set: Option<Vec<usize>>,
    strategy: Strategy,
    budget: usize,
) -> Result<Artifacts> {
    let op = single_operator(ctx)?;
    let epsilon = epsilon.or(ctx.config.epsilon).unwrap_or(0.5);
    let set = match set.or(ctx.config.set.clone()) {
        Some(ix) => {
            let s = AtomSet::new(ix);
            op.space().check_set(&s)?;
            s
        }
        None => op.space().full_set(),
    };
    let found = find_small_sign_refining(&op, &set, epsilon, strategy, budget)?;
    let space = (**found.operator.space()).clone();
    let rows = found
        .sign
        .values()
        .iter()
        .enumerate()
        .map(|(i, &s)| vec![i.to_string(), fmt(space.weight_f64(i)), s.to_string()])
        .collect();
    let report = FindSignReport {
        epsilon,
        set: set.indices().to_vec(),
        strategy: found.strategy,
        norm: found.norm,
        mean_zero: space.is_mean_zero(&found.sign),
        atom_map: found.refinement.offsets().to_vec(),
        space,
        sign: found.sign,
    };
    Artifacts::new(&report, SIGN_COLUMNS, rows)
}

#[derive(Clone, Copy)]
enum Pipeline {
    Pairing,
    FiniteRank,
    Compact(CompactMethod),
}

#[derive(Serialize)]
struct PipelineRun {
    report: PipelineReport,
    revalidation: Revalidation,
}

fn default_pair(which: Pipeline) -> (OperatorSource, OperatorSource) {
    let narrow = |atoms: Option<usize>| {
        OperatorSource::Instance(InstanceSpec::RandomNarrow {
            atoms,
            target_dim: 3,
            decay: 0.7,
            norm: TargetNorm::sup(),
            seed: None,
        })
    };
    match which {
        Pipeline::Pairing => (
            narrow(None),
            OperatorSource::Instance(InstanceSpec::L1Example {
                levels: 6,
                atoms_per_level: 2,
            }),
        ),
        Pipeline::FiniteRank => (
            narrow(Some(256)),
            OperatorSource::Instance(InstanceSpec::RandomFiniteRank {
                rank: 3,
                atoms: None,
                target_dim: 4,
                norm: TargetNorm::sup(),
                seed: None,
            }),
        ),
        Pipeline::Compact(CompactMethod::Separation) => (
            narrow(Some(64)),
            OperatorSource::Instance(InstanceSpec::RandomFiniteRank {
                rank: 2,
                atoms: None,
                target_dim: 4,
                norm: TargetNorm::l1(),
                seed: None,
            }),
        ),
        Pipeline::Compact(CompactMethod::Truncation) => (
            narrow(None),
            OperatorSource::Instance(InstanceSpec::L1Example {
                levels: 12,
                atoms_per_level: 2,
            }),
        ),
    }
}

/// Build `T₁` and `T₂` on one space: whichever defines it goes first.
fn operator_pair(ctx: &Context, which: Pipeline) -> Result<(DiscreteOperator, DiscreteOperator)> {
    let (d1, d2) = default_pair(which);
    let s1 = ctx.config.t1.clone().unwrap_or(d1);
    let s2 = ctx.config.t2.clone().unwrap_or(d2);
    // distinct streams for the two random operators
    let (seed1, seed2) = (ctx.seed, ctx.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    if s1.defines_space() || !s2.defines_space() {
        let t1 = s1.build(seed1, None)?;
        let t2 = s2.build(seed2, Some(t1.space().clone()))?;
        Ok((t1, t2))
    } else {
        let t2 = s2.build(seed2, None)?;
        let t1 = s1.build(seed1, Some(t2.space().clone()))?;
        Ok((t1, t2))
    }
}

fn pipeline(ctx: &Context, budgets: &BudgetArgs, which: Pipeline) -> Result<Artifacts> {
    let (t1, t2) = operator_pair(ctx, which)?;
    let mut params = ctx.config.params.clone().unwrap_or_else(|| {
        let p = PipelineParams::new(0.1, 0.1);
        match which {
            Pipeline::Pairing => p.with_gamma_delta(0.05, 1.0 / 64.0),
            Pipeline::Compact(CompactMethod::Truncation) => PipelineParams::new(0.125, 0.125),
            _ => p,
        }
    });
    params.seed = ctx.seed;
    if let Some(v) = budgets.sigma {
        params.sigma = v;
    }
    if let Some(v) = budgets.epsilon {
        params.epsilon = v;
    }
    if budgets.gamma.is_some() {
        params.gamma = budgets.gamma;
    }
    if budgets.delta.is_some() {
        params.delta = budgets.delta;
    }
    let report = match which {
        Pipeline::Pairing => pairing_construction(&t1, &t2, &params)?,
        Pipeline::FiniteRank => sum_finite_rank(&t1, &t2, &params)?,
        Pipeline::Compact(CompactMethod::Separation) => sum_compact_locally_convex(&t1, &t2, &params)?,
        Pipeline::Compact(CompactMethod::Truncation) => {
            sum_compact_via_truncation(&t1, &t2, &params, &ctx.config.tail.clone().unwrap_or_default())?
        }
    };
    let revalidation = revalidate(&report, &t1, &t2)?;
    let rows = report.stages.iter().map(stage_row).collect();
    Artifacts::new(&PipelineRun { report, revalidation }, STAGE_COLUMNS, rows)
}

fn stage_row(s: &StageDiagnostic) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    vec![
        s.stage.to_string(),
        s.label.clone(),
        s.atoms.to_string(),
        fmt(s.measure),
        fmt(s.t1_norm),
        fmt(s.t1_budget),
        opt(s.t2_norm),
        opt(s.t2_budget),
        s.detail.clone(),
    ]
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct LevelCheck {
    pub level: usize,
    pub atoms: usize,
    pub measure: f64,
    pub zero_sign_norm: Option<f64>,
    pub row_sum: f64,
    pub sampled_max: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StrictNarrowCheck {
    pub all_zero: bool,
    pub all_mean_zero: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TailCheck {
    pub samples: usize,
    pub violations: usize,
    pub row_sum_violations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct NoncompactCheck {
    pub images: usize,
    pub min_distance: f64,
    pub pairs_below_one: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct TruncationCheck {
    pub epsilon: f64,
    pub level: usize,
    pub tail_bound: f64,
    pub achieved_t1: f64,
    pub achieved_t2: f64,
    pub revalidated_t2: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExampleL1Report {
    pub levels: usize,
    pub atoms_per_level: usize,
    pub atoms: usize,
    pub per_level: Vec<LevelCheck>,
    pub strict_narrow: Option<StrictNarrowCheck>,
    pub tail: Option<TailCheck>,
    pub noncompact: Option<NoncompactCheck>,
    pub truncation: Option<TruncationCheck>,
}

/// Runs the selected checks on the l1 example; shared with the acceptance tests.
pub fn example_l1_report(
    seed: u64,
    levels: usize,
    atoms_per_level: usize,
    check: L1Check,
    samples: usize,
    epsilon: f64,
) -> Result<ExampleL1Report> {
    let ex = build_l1_example(levels, atoms_per_level)?;
    let op = &ex.operator;
    let space = op.space().clone();
    let all = check == L1Check::All;
    let mut per_level: Vec<LevelCheck> = (1..=levels)
        .map(|n| LevelCheck {
            level: n,
            atoms: ex.cell(n).len(),
            measure: space.measure(ex.cell(n)).to_f64(),
            row_sum: op.matrix().row(n - 1).iter().map(|v| v.abs()).sum(),
            ..LevelCheck::default()
        })
        .collect();
    let mut report = ExampleL1Report {
        levels,
        atoms_per_level,
        atoms: op.atoms(),
        per_level: Vec::new(),
        strict_narrow: None,
        tail: None,
        noncompact: None,
        truncation: None,
    };

    if all || check == L1Check::StrictNarrow {
        let mut all_zero = true;
        let mut all_mean_zero = true;
        for lc in per_level.iter_mut() {
            let cell = ex.cell(lc.level);
            let found = find_sign_within(op, cell, 0.0, Strategy::KernelPairing)?;
            all_zero &= found.norm == 0.0 && found.sign.support() == *cell;
            all_mean_zero &= space.is_mean_zero(&found.sign);
            lc.zero_sign_norm = Some(found.norm);
        }
        report.strict_narrow = Some(StrictNarrowCheck {
            all_zero,
            all_mean_zero,
        });
    }

    if all || check == L1Check::Tail {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut violations = 0;
        let mut maxima = vec![0.0f64; levels];
        for _ in 0..samples {
            let z: Vec<f64> = (0..op.atoms()).map(|_| f64::from(rng.gen_range(-1i8..=1))).collect();
            let image = op.apply(&z)?;
            for (n, v) in image.iter().enumerate() {
                maxima[n] = maxima[n].max(v.abs());
                if v.abs() > (-((n + 1) as f64)).exp2() {
                    violations += 1;
                }
            }
        }
        let mut row_sum_violations = 0;
        for (lc, m) in per_level.iter_mut().zip(maxima) {
            lc.sampled_max = Some(m);
            if lc.row_sum != (-(lc.level as f64)).exp2() {
                row_sum_violations += 1;
            }
        }
        report.tail = Some(TailCheck {
            samples,
            violations,
            row_sum_violations,
        });
    }

    if all || check == L1Check::Noncompact {
        let images: Vec<Vec<f64>> = (1..=levels)
            .map(|n| op.apply(&ex.normalized_indicator(n)))
            .collect::<Result<_>>()?;
        let mut min_distance = f64::INFINITY;
        let mut pairs_below_one = 0;
        for a in 0..images.len() {
            for b in a + 1..images.len() {
                let diff: Vec<f64> = images[a].iter().zip(&images[b]).map(|(x, y)| x - y).collect();
                let d = op.norm(&diff);
                min_distance = min_distance.min(d);
                if d < 1.0 {
                    pairs_below_one += 1;
                }
            }
        }
        report.noncompact = Some(NoncompactCheck {
            images: images.len(),
            min_distance,
            pairs_below_one,
        });
    }

    if all || check == L1Check::Truncation {
        let t1 = random_narrow_operator(seed, space.clone(), 3, 0.7, TargetNorm::sup())?;
        let params = PipelineParams::new(epsilon, epsilon).with_seed(seed);
        let r = sum_compact_via_truncation(&t1, op, &params, &TailBound::Certified)?;
        let v = revalidate(&r, &t1, op)?;
        let t = r.truncation.clone().expect("truncation summary");
        report.truncation = Some(TruncationCheck {
            epsilon,
            level: t.level,
            tail_bound: t.tail_bound,
            achieved_t1: r.achieved_t1,
            achieved_t2: r.achieved_t2,
            revalidated_t2: v.t2_norm,
            passed: v.mean_zero && r.achieved_t2 <= epsilon && v.t2_norm <= epsilon && r.achieved_t1 <= epsilon,
        });
    }
    report.per_level = per_level;
    Ok(report)
}

fn example_l1(
    ctx: &Context,
    levels: usize,
    atoms_per_level: usize,
    check: L1Check,
    samples: usize,
    epsilon: f64,
) -> Result<Artifacts> {
    let report = example_l1_report(ctx.seed, levels, atoms_per_level, check, samples, epsilon)?;
    let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
    let rows = report
        .per_level
        .iter()
        .map(|l| {
            vec![
                l.level.to_string(),
                l.atoms.to_string(),
                fmt(l.measure),
                opt(l.zero_sign_norm),
                fmt(l.row_sum),
                opt(l.sampled_max),
            ]
        })
        .collect();
    Artifacts::new(&report, L1_COLUMNS, rows)
}

#[derive(Serialize)]
struct FiberCheck {
    fiber: usize,
    atoms: usize,
    sign_norm: f64,
}

#[derive(Serialize)]
struct CondexpReport {
    grid: usize,
    atoms: usize,
    operator_norm_of_one: f64,
    full_sign_norm: f64,
    all_zero: bool,
    fibers: Vec<FiberCheck>,
}

fn example_condexp(grid: usize) -> Result<Artifacts> {
    let op = build_conditional_expectation(grid)?;
    let space = op.space().clone();
    let one = op.indicator_image_norm(&space.full_set())?;
    let mut fibers = Vec::with_capacity(grid);
    for t in 0..grid {
        let set = AtomSet::new((t * grid..(t + 1) * grid).collect());
        let found = find_sign_within(&op, &set, 0.0, Strategy::KernelPairing)?;
        fibers.push(FiberCheck {
            fiber: t,
            atoms: set.len(),
            sign_norm: found.norm,
        });
    }
    let full = find_sign_within(&op, &space.full_set(), 0.0, Strategy::KernelPairing)?;
    let all_zero = full.norm == 0.0 && fibers.iter().all(|f| f.sign_norm == 0.0);
    let rows = fibers
        .iter()
        .map(|f| vec![f.fiber.to_string(), f.atoms.to_string(), fmt(f.sign_norm)])
        .collect();
    let report = CondexpReport {
        grid,
        atoms: op.atoms(),
        operator_norm_of_one: one,
        full_sign_norm: full.norm,
        all_zero,
        fibers,
    };
    Artifacts::new(&report, CONDEXP_COLUMNS, rows)
}

#[derive(Serialize, Default)]
struct FamilySummary {
    instances: usize,
    violations: usize,
    max_ratio: f64,
}

#[derive(Serialize)]
struct BenchReport {
    rounding: FamilySummary,
    sign_rounding: FamilySummary,
    dichotomy: FamilySummary,
    partitions: usize,
    disjoint: usize,
}

fn bench(ctx: &Context, instances: usize) -> Result<Artifacts> {
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let norms = [TargetNorm::sup(), TargetNorm::l1(), TargetNorm::lp(2.0)];
    let mut rows = Vec::new();
    let mut rounding = FamilySummary::default();
    let mut signs = FamilySummary::default();
    let mut dichotomy = FamilySummary::default();
    let (mut partitions, mut disjoint) = (0, 0);
    let ratio = |a: f64, c: f64| if c > 0.0 { a / c } else { 0.0 };
    for k in 0..instances {
        let dim = rng.gen_range(1..=8);
        let count = rng.gen_range(1..=64);
        let norm = norms[k % norms.len()].clone();
        let inst = random_rounding(&mut rng, dim, count, norm.clone())?;
        let r = round_half_integer(&inst)?;
        rounding.instances += 1;
        rounding.violations += usize::from(r.discrepancy > r.certificate);
        rounding.max_ratio = rounding.max_ratio.max(ratio(r.discrepancy, r.certificate));
        rows.push(vec![
            "round".into(),
            k.to_string(),
            dim.to_string(),
            count.to_string(),
            fmt(r.discrepancy),
            fmt(r.certificate),
        ]);
        let s = sign_round(&inst.vectors, &norm)?;
        signs.instances += 1;
        signs.violations += usize::from(s.achieved > s.certificate);
        signs.max_ratio = signs.max_ratio.max(ratio(s.achieved, s.certificate));
        rows.push(vec![
            "sign_round".into(),
            k.to_string(),
            dim.to_string(),
            count.to_string(),
            fmt(s.achieved),
            fmt(s.certificate),
        ]);

        let atoms = 1usize << rng.gen_range(2..=5);
        let op = random_narrow_operator(
            rng.gen(),
            Arc::new(MeasureSpace::uniform(atoms)?),
            2,
            0.8,
            TargetNorm::sup(),
        )?;
        let epsilon = rng.gen_range(0.05..0.6);
        dichotomy.instances += 1;
        match adversarial_disjoint_signs_within(&op, epsilon, 2, 1 << 12)? {
            AdversaryOutcome::Exhausted { partition, .. } => {
                partitions += 1;
                dichotomy.violations += usize::from(!partition.within_epsilon());
                rows.push(vec![
                    "partition".into(),
                    k.to_string(),
                    atoms.to_string(),
                    partition.cells.len().to_string(),
                    fmt(partition.max_bound()),
                    fmt(epsilon),
                ]);
            }
            AdversaryOutcome::Disjoint { norms, .. } => {
                disjoint += 1;
                let least = norms.iter().copied().fold(f64::INFINITY, f64::min);
                dichotomy.violations += usize::from(least < epsilon / 2.0);
                rows.push(vec![
                    "disjoint".into(),
                    k.to_string(),
                    atoms.to_string(),
                    norms.len().to_string(),
                    fmt(least),
                    fmt(epsilon / 2.0),
                ]);
            }
        }
    }
    let report = BenchReport {
        rounding,
        sign_rounding: signs,
        dichotomy,
        partitions,
        disjoint,
    };
    Artifacts::new(&report, BENCH_COLUMNS, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn every_subcommand_has_columns() {
        for name in [
            "round",
            "partition",
            "find-sign",
            "pairing",
            "sum-finite-rank",
            "sum-compact",
            "example-l1",
            "example-condexp",
            "bench",
        ] {
            assert!(csv_header(name).is_some(), "{name}");
        }
    }

    #[test]
    fn config_rejects_unknown_fields_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 1, "bogus": 2}"#).unwrap();
        assert!(ExperimentConfig::load(&p).is_err());
        fs::write(&p, r#"{"seed": 1, "operator": {"file": "missing.csv"}}"#).unwrap();
        assert!(ExperimentConfig::load(&p).is_err());
    }

    #[test]
    fn operator_source_parses_both_forms() {
        let a: OperatorSource =
            serde_json::from_str(r#"{"kind": "l1_example", "levels": 3, "atoms_per_level": 2}"#).unwrap();
        assert!(matches!(
            a,
            OperatorSource::Instance(InstanceSpec::L1Example { levels: 3, .. })
        ));
        let b: OperatorSource = serde_json::from_str(r#"{"file": "m.csv", "norm": {"kind": "lp", "p": 1.0}}"#).unwrap();
        assert!(matches!(b, OperatorSource::File { .. }));
    }

    #[test]
    fn missing_seed_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(main_with_args(["narrowkit", "round", "--out", out]), EXIT_USAGE);
        assert!(Cli::try_parse_from(["narrowkit", "round", "--bogus"]).unwrap_err().use_stderr());
    }

    #[test]
    fn example_l1_small_checks() {
        let r = example_l1_report(3, 4, 2, L1Check::All, 50, 0.25).unwrap();
        assert!(r.strict_narrow.unwrap().all_zero);
        assert_eq!(r.tail.unwrap().violations, 0);
        assert!(r.noncompact.unwrap().min_distance >= 1.0);
        assert!(r.truncation.unwrap().passed);
    }
}
