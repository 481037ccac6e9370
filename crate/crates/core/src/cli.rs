//! The `hashbound` command line.
//!
//! Every subcommand writes a JSON report carrying the tool name, version,
//! seed, resolved configuration and the argument list that produced it.
//! Replaying `args` reproduces the report byte for byte. Usage errors exit
//! with status 2; domain errors exit with status 1 and print
//! `{"error": kind, "message": …}` on standard error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::Serialize;

use crate::bounds::{
    check_bound_inequalities, class_stats, tightness_sweep, verify_remark_trials, InequalityReport,
    Percentile, RemarkReport, TightnessRow,
};
use crate::centers::{generate_centers, sidecar_path, CenterChoice, CenterSet};
use crate::codes::BitCode;
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::mvb::{run_toy, SurrogateConfig, SurrogateModel, SurrogateTrainConfig, ToyConfig};
use crate::nn::write_checkpoint;
use crate::ranking::{evaluate_retrieval, EvalOptions};
use crate::train::{make_synthetic_dataset, train_supervised, Objective, ToyHashModel, TrainConfig};
use crate::{codefile, labels, rng};

pub const TOOL: &str = "hashbound";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "hashbound", version, about = "Hamming retrieval metrics, AP lower bounds and surrogate hashing")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    /// Worker threads (default: HASHBOUND_THREADS, else all cores).
    #[arg(long, global = true, env = "HASHBOUND_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Retrieval metrics of query codes against base codes.
    Eval(EvalArgs),
    /// Class centers, D_inter, D_intra and the bound ratio of a labeled code set.
    Bound(BoundArgs),
    /// Randomized and exhaustive checks of the mis-rank bound.
    VerifyBound(VerifyArgs),
    /// Generate pairwise-far class centers.
    Centers(CentersArgs),
    /// Surrogate vs naive estimation of a random multivariate Bernoulli.
    MvbDemo(MvbArgs),
    /// Train a toy hash model through the surrogate and trace the bound.
    TrainToy(TrainArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Metric {
    #[value(alias = "map")]
    Ap,
    Pk,
    Pr,
    Ph2,
    Knn,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long, alias = "queries")]
    query: PathBuf,
    #[arg(long)]
    query_labels: PathBuf,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    base_labels: PathBuf,
    /// mAP cutoff; 0 means the whole base.
    #[arg(long, default_value_t = 0)]
    r: usize,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "ap,pk,pr,ph2,knn")]
    metrics: Vec<Metric>,
    /// P@K cutoffs; those above the base size are dropped.
    #[arg(long, value_delimiter = ',', default_values_t = [100, 200, 300, 400, 500, 600, 700, 800, 900, 1000])]
    pk: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    radius: u32,
    #[arg(long, default_value_t = 100)]
    knn_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct BoundArgs {
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 99.9)]
    percentile: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances for the mis-rank monotonicity check.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 10)]
    bits: usize,
    #[arg(long, default_value_t = 30)]
    samples: usize,
    /// Random labeled sets for the triangle-inequality checks.
    #[arg(long, default_value_t = 1_000)]
    sets: usize,
    /// Largest max d(q,tp) in the worst-case AP sweep.
    #[arg(long, default_value_t = 10)]
    sweep_len: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    Auto,
    Hadamard,
    RandomMaxmin,
}

impl From<MethodArg> for CenterChoice {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Auto => CenterChoice::Auto,
            MethodArg::Hadamard => CenterChoice::Hadamard,
            MethodArg::RandomMaxmin => CenterChoice::RandomMaxmin,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct CentersArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    bits: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Auto)]
    method: MethodArg,
    /// Restarts of the random max-min search.
    #[arg(long, default_value_t = 64)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// HBC1 output; the JSON report goes next to it with a .json extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct MvbArgs {
    #[arg(long, default_value_t = 8)]
    bits: usize,
    /// Block count (default: 8-bit blocks).
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    train_samples: usize,
    #[arg(long, default_value_t = 100)]
    eval_samples: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum ObjectiveArg {
    Surrogate,
    Bce,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    bits: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Distance between class means.
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr_pi: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr_theta: f64,
    /// Multiply both learning rates by 0.1 every this many epochs.
    #[arg(long)]
    decay_every: Option<usize>,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Surrogate)]
    objective: ObjectiveArg,
    #[arg(long, value_enum, default_value_t = MethodArg::Auto)]
    centers: MethodArg,
    #[arg(long, default_value_t = 99.9)]
    percentile: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-epoch trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Checkpoint of the hash model and surrogate blocks.
    #[arg(long)]
    out: PathBuf,
    /// JSON report (default: the checkpoint path with a .json extension).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Serialize)]
struct Envelope<'a, C: Serialize, R: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    args: &'a [String],
    seed: u64,
    config: &'a C,
    #[serde(flatten)]
    result: R,
}

fn write_report<C: Serialize, R: Serialize>(
    path: &Path,
    command: &'static str,
    args: &[String],
    seed: u64,
    config: &C,
    result: R,
) -> Result<()> {
    let env = Envelope {
        tool: TOOL,
        version: VERSION,
        command,
        args,
        seed,
        config,
        result,
    };
    fs::write(path, serde_json::to_string_pretty(&env)? + "\n")?;
    Ok(())
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(Error::InvalidConfig(format!("input file {} does not exist", p.display())));
    }
    Ok(())
}

fn require_out(p: &Path) -> Result<()> {
    let parent = p.parent().filter(|d| !d.as_os_str().is_empty());
    if let Some(d) = parent {
        if !d.is_dir() {
            return Err(Error::InvalidConfig(format!(
                "output directory {} does not exist",
                d.display()
            )));
        }
    }
    if p.is_dir() {
        return Err(Error::InvalidConfig(format!("output {} is a directory", p.display())));
    }
    Ok(())
}

fn load_labeled(codes: &Path, labs: &Path) -> Result<(Vec<BitCode>, Vec<LabelSet>)> {
    let (_, c) = codefile::load(codes)?;
    let l = labels::load(labs)?;
    if c.len() != l.len() {
        return Err(Error::InvalidInput(format!(
            "{} holds {} codes but {} has {} label rows",
            codes.display(),
            c.len(),
            labs.display(),
            l.len()
        )));
    }
    Ok((c, l))
}

fn run_eval(a: &EvalArgs, args: &[String]) -> Result<()> {
    for p in [&a.query, &a.query_labels, &a.base, &a.base_labels] {
        require_file(p)?;
    }
    require_out(&a.out)?;
    let (q, ql) = load_labeled(&a.query, &a.query_labels)?;
    let (b, bl) = load_labeled(&a.base, &a.base_labels)?;
    let has = |m: Metric| a.metrics.contains(&m);
    let opts = EvalOptions {
        r: if a.r == 0 { b.len() } else { a.r },
        ap: has(Metric::Ap),
        precision_at_k: if has(Metric::Pk) {
            a.pk.iter().copied().filter(|&k| k >= 1 && k <= b.len()).collect()
        } else {
            Vec::new()
        },
        pr: has(Metric::Pr),
        ball_radius: has(Metric::Ph2).then_some(a.radius),
        knn_k: has(Metric::Knn).then_some(a.knn_k.min(b.len())),
    };
    let report = evaluate_retrieval(&q, &ql, &b, &bl, &opts)?;
    write_report(&a.out, "eval", args, a.seed, a, report)
}

fn run_bound(a: &BoundArgs, args: &[String]) -> Result<()> {
    require_file(&a.codes)?;
    require_file(&a.labels)?;
    require_out(&a.out)?;
    let p = Percentile::new(a.percentile)?;
    let (codes, labs) = load_labeled(&a.codes, &a.labels)?;
    let stats = class_stats(&codes, &labs, p)?;
    write_report(&a.out, "bound", args, a.seed, a, stats.report(codes.len()))
}

#[derive(Serialize)]
struct VerifyResult {
    remark: RemarkReport,
    inequalities: InequalitySummary,
    tightness: TightnessSummary,
}

#[derive(Serialize, Default)]
struct InequalitySummary {
    sets: usize,
    same_class_pairs: usize,
    cross_class_pairs: usize,
    cross_class_checked: usize,
    violations: usize,
}

#[derive(Serialize)]
struct TightnessSummary {
    rows: usize,
    /// Rows where the constructed worst case equals the minimum over every
    /// admissible arrangement.
    worst_is_minimum: usize,
    printed_formula_matches: usize,
    table: Vec<TightnessRow>,
}

/// Random labeled sets: `2..=5` centers in `4..=10` bits with members at
/// random bit-flip noise.
fn random_labeled_set(seed: u64, index: u64) -> Result<(Vec<BitCode>, Vec<LabelSet>)> {
    let mut r = rng::stream(seed, "labeled-set", index);
    let h = r.random_range(4..=10);
    let classes = r.random_range(2..=5u32);
    let noise = r.random_range(0.0..0.3);
    let mut codes = Vec::new();
    let mut labs = Vec::new();
    for c in 0..classes {
        let center: Vec<bool> = (0..h).map(|_| r.random()).collect();
        for _ in 0..r.random_range(1..=8) {
            let bits: Vec<bool> = center.iter().map(|&b| b ^ r.random_bool(noise)).collect();
            codes.push(BitCode::from_bools(&bits)?);
            labs.push(LabelSet::single(c));
        }
    }
    Ok((codes, labs))
}

pub fn inequality_trials(seed: u64, sets: usize) -> Result<Vec<InequalityReport>> {
    use rayon::prelude::*;
    (0..sets as u64)
        .into_par_iter()
        .map(|i| {
            let (c, l) = random_labeled_set(seed, i)?;
            check_bound_inequalities(&c, &l)
        })
        .collect()
}

fn run_verify(a: &VerifyArgs, args: &[String]) -> Result<()> {
    require_out(&a.out)?;
    if a.bits == 0 || a.bits > 10 || a.samples == 0 || a.samples > 64 {
        return Err(Error::InvalidConfig("need 1 <= bits <= 10 and 1 <= samples <= 64".into()));
    }
    if a.sweep_len > 16 {
        return Err(Error::InvalidConfig("sweep length is capped at 16".into()));
    }
    let remark = verify_remark_trials(a.seed, a.trials, a.bits, a.samples)?;
    let mut ineq = InequalitySummary {
        sets: a.sets,
        ..Default::default()
    };
    for r in inequality_trials(a.seed, a.sets)? {
        ineq.same_class_pairs += r.same_class_pairs;
        ineq.cross_class_pairs += r.cross_class_pairs;
        ineq.cross_class_checked += r.cross_class_checked;
        ineq.violations += r.violations;
    }
    let table = tightness_sweep(a.sweep_len)?;
    let tight = TightnessSummary {
        rows: table.len(),
        worst_is_minimum: table
            .iter()
            .filter(|r| r.worst_ap == r.min_enumerated_ap)
            .count(),
        printed_formula_matches: table.iter().filter(|r| r.printed_matches).count(),
        table,
    };
    let result = VerifyResult {
        remark,
        inequalities: ineq,
        tightness: tight,
    };
    write_report(&a.out, "verify-bound", args, a.seed, a, result)
}

fn run_centers(a: &CentersArgs, args: &[String]) -> Result<()> {
    require_out(&a.out)?;
    let set = generate_centers(a.method.into(), a.classes, a.bits, a.restarts, a.seed)?;
    codefile::save(&a.out, set.bits(), set.centers())?;
    #[derive(Serialize)]
    struct Out {
        #[serde(flatten)]
        sidecar: crate::centers::CenterSidecar,
        centers: Vec<String>,
    }
    let out = Out {
        sidecar: set.sidecar(),
        centers: set.centers().iter().map(ToString::to_string).collect(),
    };
    write_report(&sidecar_path(&a.out), "centers", args, a.seed, a, out)
}

fn run_mvb(a: &MvbArgs, args: &[String]) -> Result<()> {
    require_out(&a.out)?;
    let cfg = ToyConfig {
        bits: a.bits,
        blocks: a.blocks,
        train_samples: a.train_samples,
        eval_samples: a.eval_samples,
        train: SurrogateTrainConfig {
            epochs: a.epochs,
            batch: a.batch,
            lr: a.lr,
            decay_every: None,
        },
        surrogate: SurrogateConfig::default(),
        seed: a.seed,
    };
    let report = run_toy(&cfg)?;
    write_report(&a.out, "mvb-demo", args, a.seed, a, report)
}

fn run_train(a: &TrainArgs, args: &[String]) -> Result<()> {
    require_out(&a.out)?;
    let report_path = a.report.clone().unwrap_or_else(|| a.out.with_extension("json"));
    require_out(&report_path)?;
    if let Some(t) = &a.trace {
        require_out(t)?;
    }
    let data = make_synthetic_dataset(a.classes, a.per_class, a.dim, a.separation, a.seed)?;
    let centers = generate_centers(a.centers.into(), a.classes, a.bits, 64, a.seed)?;
    let mut model = ToyHashModel::new(a.dim, a.bits, a.hidden, a.seed)?;
    let mut sur = SurrogateModel::new(a.bits, None, &SurrogateConfig::default(), a.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        lr_pi: a.lr_pi,
        lr_theta: a.lr_theta,
        decay_every: a.decay_every,
        objective: match a.objective {
            ObjectiveArg::Surrogate => Objective::Surrogate,
            ObjectiveArg::Bce => Objective::Bce,
        },
        percentile: a.percentile,
    };
    let trace = train_supervised(&mut model, &mut sur, &centers, &data, &cfg, a.seed)?;
    let mut nets: Vec<(String, &crate::nn::DenseNet)> = vec![("hash".into(), model.net())];
    for (j, n) in sur.nets().iter().enumerate() {
        nets.push((format!("surrogate-{j}"), n));
    }
    let named: Vec<(&str, &crate::nn::DenseNet)> = nets.iter().map(|(s, n)| (s.as_str(), *n)).collect();
    let mut f = std::io::BufWriter::new(fs::File::create(&a.out)?);
    write_checkpoint(&mut f, a.seed, &named)?;
    f.flush()?;
    if let Some(t) = &a.trace {
        fs::write(t, trace.to_csv())?;
    }
    #[derive(Serialize)]
    struct Out {
        centers_method: crate::centers::CenterMethod,
        min_pairwise: u32,
        #[serde(serialize_with = "crate::bounds::serialize_extended_opt")]
        spearman: Option<f64>,
        final_map: Option<f64>,
        trace: Vec<crate::train::TraceRecord>,
    }
    let out = Out {
        centers_method: centers.method(),
        min_pairwise: centers.min_pairwise(),
        spearman: trace.correlation().ok(),
        final_map: trace.records.last().map(|r| r.map),
        trace: trace.records,
    };
    write_report(&report_path, "train-toy", args, a.seed, a, out)
}

/// Argument list recorded in reports: everything after the program name,
/// minus the thread count, which never affects results.
fn canonical_args(argv: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv.iter().skip(1) {
        let s = a.to_string_lossy().into_owned();
        if skip {
            skip = false;
            continue;
        }
        if s == "--threads" {
            skip = true;
            continue;
        }
        if s.starts_with("--threads=") {
            continue;
        }
        out.push(s);
    }
    out
}

fn dispatch(cli: &Cli, args: &[String]) -> Result<()> {
    match &cli.command {
        Command::Eval(a) => run_eval(a, args),
        Command::Bound(a) => run_bound(a, args),
        Command::VerifyBound(a) => run_verify(a, args),
        Command::Centers(a) => run_centers(a, args),
        Command::MvbDemo(a) => run_mvb(a, args),
        Command::TrainToy(a) => run_train(a, args),
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'static str,
    message: &'a str,
}

/// Parses `argv` (program name first), runs one subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let args = canonical_args(&argv);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let outcome = match pool.build() {
        Ok(p) => p.install(|| dispatch(&cli, &args)),
        Err(e) => Err(Error::InvalidConfig(format!("thread pool: {e}"))),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string();
            let rep = ErrorReport {
                error: e.kind(),
                message: &msg,
            };
            eprintln!("{}", serde_json::to_string(&rep).unwrap_or(msg.clone()));
            1
        }
    }
}

/// Reads a centers file written by the `centers` subcommand.
pub fn load_centers(path: &Path) -> Result<CenterSet> {
    CenterSet::load(path)
}
