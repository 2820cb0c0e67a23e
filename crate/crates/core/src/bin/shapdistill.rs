use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use shapdistill::cacs::{self, read_acpb, write_acpb};
use shapdistill::calibration::{distill_cohort, AlignmentRule};
use shapdistill::config::{PipelineConfig, PolicyKind};
use shapdistill::evaluation::{evaluate, load_column, load_labels, synth_generate};
use shapdistill::prediction::{generate_report, predict_voted};
use shapdistill::schema::{load_case, load_matrix, load_schema, write_matrix, write_schema};
use shapdistill::Error;

#[derive(Parser)]
#[command(
    name = "shapdistill",
    version,
    about = "Attribution distillation, calibration and case-based prediction"
)]
struct Cli {
    /// TOML pipeline configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the contribution probability base from a feature/attribution matrix.
    Extract(ExtractArgs),
    /// Calibrate weights for every matrix row and write the case store.
    Distill(DistillArgs),
    /// Predict one case by majority vote and write the report.
    Predict(PredictArgs),
    /// Confusion matrices, metrics, deviation statistics and concordance.
    Evaluate(EvaluateArgs),
    /// Write a matrix drawn from the synthetic additive teacher.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    /// Grid spacing of the interval midpoints.
    #[arg(long)]
    step: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Stub,
    Remote,
}

#[derive(Args)]
struct PolicyFlags {
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long)]
    damping: Option<f64>,
    /// Chat-completions base URL for the remote policy.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long)]
    acpb: Option<PathBuf>,
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Output store file.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Summary JSON; defaults to `<out>.summary.json`.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Store unconverged cases too (they are marked as such).
    #[arg(long)]
    include_unconverged: bool,
    /// Use `(t - 0.5) * p` as the alignment term.
    #[arg(long)]
    literal_alignment: bool,
    #[command(flatten)]
    policy: PolicyFlags,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    acpb: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    /// One-record CSV: `sample_id,v_<feature>,...`.
    #[arg(long)]
    case: PathBuf,
    /// Report path prefix; writes `<out>.txt` and `<out>.json`.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    no_global_fallback: bool,
    #[command(flatten)]
    policy: PolicyFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    /// `sample_id,label` with labels 0 (healthy) / 1 (unhealthy).
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    pred_a: PathBuf,
    #[arg(long)]
    pred_b: Option<PathBuf>,
    /// `sample_id,probability` for the teacher.
    #[arg(long, requires = "infer_probs")]
    teacher_probs: Option<PathBuf>,
    #[arg(long, requires = "teacher_probs")]
    infer_probs: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
    /// Per-sample concordance category list (needs --pred-b).
    #[arg(long, requires = "pred_b")]
    out_categories: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    out: PathBuf,
    /// Also write the matching schema file here.
    #[arg(long)]
    schema_out: Option<PathBuf>,
    #[arg(long, short)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn required(
    flag: Option<PathBuf>,
    fallback: &Option<PathBuf>,
    name: &str,
) -> Result<PathBuf, Error> {
    flag.or_else(|| fallback.clone()).ok_or_else(|| {
        Error::Config(format!(
            "--{name} is required (or set paths.{name} in the config)"
        ))
    })
}

fn apply_policy_flags(cfg: &mut PipelineConfig, flags: &PolicyFlags) {
    if let Some(p) = flags.policy {
        cfg.policy.kind = match p {
            PolicyArg::Stub => PolicyKind::Stub,
            PolicyArg::Remote => PolicyKind::Remote,
        };
    }
    if let Some(d) = flags.damping {
        cfg.policy.damping = d;
    }
    if let Some(e) = &flags.endpoint {
        cfg.policy.remote.base_url = e.clone();
    }
    if let Some(m) = &flags.model {
        cfg.policy.remote.model = m.clone();
    }
}

fn extract(mut cfg: PipelineConfig, a: ExtractArgs) -> Result<(), Error> {
    if let Some(s) = a.step {
        cfg.extract.step = s;
    }
    cfg.validate()?;
    let schema = load_schema(required(a.schema, &cfg.paths.schema, "schema")?)?;
    let matrix = load_matrix(required(a.matrix, &cfg.paths.matrix, "matrix")?, &schema)?;
    let acpb = cacs::extract(&matrix, cfg.grid())?;
    write_acpb(&a.out, &acpb)?;
    println!(
        "ACPB written to {} (step {}, base value {})",
        a.out.display(),
        acpb.grid.step,
        acpb.base_value
    );
    for (name, count) in acpb.interval_counts() {
        println!("  {name}: {count} interval(s)");
    }
    Ok(())
}

fn distill(mut cfg: PipelineConfig, a: DistillArgs) -> Result<bool, Error> {
    apply_policy_flags(&mut cfg, &a.policy);
    if let Some(e) = a.epsilon {
        cfg.distill.epsilon = e;
    }
    if let Some(m) = a.max_iters {
        cfg.distill.max_iters = m;
    }
    if a.include_unconverged {
        cfg.distill.include_unconverged = true;
    }
    if a.literal_alignment {
        cfg.distill.alignment = AlignmentRule::Literal;
    }
    cfg.validate()?;
    let acpb = read_acpb(required(a.acpb, &cfg.paths.acpb, "acpb")?)?;
    let matrix = load_matrix(
        required(a.matrix, &cfg.paths.matrix, "matrix")?,
        &acpb.schema,
    )?;
    if matrix.base_value != acpb.base_value {
        warn!(
            "matrix base value {} differs from the ACPB's {}",
            matrix.base_value, acpb.base_value
        );
    }
    let out = required(a.out, &cfg.paths.store, "store")?;
    let summary_path = a
        .summary
        .unwrap_or_else(|| with_suffix(&out, ".summary.json"));
    let policy = cfg.make_policy()?;
    let store = cfg.new_store(&matrix);
    let summary = distill_cohort(&matrix, &acpb, policy.as_ref(), &cfg.distill, &store)?;
    store.persist(&out)?;
    summary.write(&summary_path)?;
    println!(
        "{} record(s): {} converged, {} unconverged, {} stored, {} failed",
        summary.total,
        summary.converged,
        summary.unconverged,
        summary.stored,
        summary.failed.len()
    );
    if let Some(rate) = summary.convergence_rate {
        println!("convergence rate {:.2}%", 100.0 * rate);
    }
    println!(
        "store: {}\nsummary: {}",
        out.display(),
        summary_path.display()
    );
    for f in &summary.failed {
        eprintln!("error: {}: {}", f.sample_id, f.error);
    }
    Ok(summary.failed.is_empty())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn predict(mut cfg: PipelineConfig, a: PredictArgs) -> Result<(), Error> {
    apply_policy_flags(&mut cfg, &a.policy);
    if let Some(r) = a.runs {
        cfg.predict.runs = r;
    }
    if let Some(k) = a.k {
        cfg.retrieval.k = k;
    }
    if let Some(t) = a.threshold {
        cfg.retrieval.threshold = t;
    }
    if a.no_global_fallback {
        cfg.retrieval.global_fallback = false;
    }
    cfg.validate()?;
    let acpb = read_acpb(required(a.acpb, &cfg.paths.acpb, "acpb")?)?;
    let names = acpb
        .schema
        .features()
        .iter()
        .map(|f| f.name.clone())
        .collect();
    let store = cfg.open_store(required(a.store, &cfg.paths.store, "store")?, names)?;
    store.check_schema(&acpb.schema)?;
    let case = load_case(&a.case, &acpb.schema)?;
    let policy = cfg.make_policy()?;
    let pc = cfg.predict_config();
    let voted = predict_voted(&case, &acpb, &store, policy.as_ref(), &pc)?;
    let table = acpb.match_record(&case)?;
    let report = generate_report(&voted, &table, &acpb, &store, &cfg.fingerprint())?;
    let (txt, json) = (with_suffix(&a.out, ".txt"), with_suffix(&a.out, ".json"));
    report.write(&txt, &json)?;
    println!(
        "{}: {} (code {}), probability {:.4}, votes {}/{}",
        report.sample_id,
        report.classification,
        report.classification.code(),
        report.probability,
        report.tally.unhealthy,
        report.tally.healthy + report.tally.unhealthy
    );
    println!("report: {} / {}", txt.display(), json.display());
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<(), Error> {
    let truth = load_labels(&a.truth)?;
    let pa = load_labels(&a.pred_a)?;
    let pb = a.pred_b.as_ref().map(load_labels).transpose()?;
    let probs = match (&a.teacher_probs, &a.infer_probs) {
        (Some(t), Some(i)) => Some((load_column(t)?, load_column(i)?)),
        _ => None,
    };
    let report = evaluate(
        &truth,
        &pa,
        pb.as_deref(),
        probs.as_ref().map(|(t, i)| (t.as_slice(), i.as_slice())),
    )?;
    print!("{}", report.render_text());
    if let Some(p) = &a.out_json {
        std::fs::write(p, report.to_json()).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    if let (Some(p), Some(text)) = (&a.out_categories, report.render_categories()) {
        std::fs::write(p, text).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn synth(cfg: PipelineConfig, a: SynthArgs) -> Result<(), Error> {
    let mut teacher = cfg.synth.teacher.clone();
    if let Some(s) = a.seed {
        teacher.seed = s;
    }
    let n = a.n.unwrap_or(cfg.synth.rows);
    let matrix = synth_generate(&teacher, n)?;
    write_matrix(&a.out, &matrix)?;
    if let Some(p) = &a.schema_out {
        write_schema(p, &matrix.schema)?;
    }
    println!(
        "{} synthetic row(s), {} feature(s), base value {} -> {}",
        matrix.len(),
        matrix.schema.len(),
        matrix.base_value,
        a.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    };
    let result = cfg.and_then(|cfg| match cli.command {
        Command::Extract(a) => extract(cfg, a).map(|_| true),
        Command::Distill(a) => distill(cfg, a),
        Command::Predict(a) => predict(cfg, a).map(|_| true),
        Command::Evaluate(a) => evaluate_cmd(a).map(|_| true),
        Command::Synth(a) => synth(cfg, a).map(|_| true),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Vote { completed, .. } = &e {
                for r in completed {
                    eprintln!(
                        "  completed run {}: {} ({:.4})",
                        r.run, r.classification, r.probability
                    );
                }
            }
            ExitCode::FAILURE
        }
    }
}
