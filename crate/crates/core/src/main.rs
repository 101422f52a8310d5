use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pidflow::analysis::{compare_trajectories, knockout_deltas, ShareRow};
use pidflow::pipeline::{self, PipelineConfig, Profile, ReportFormat};
use pidflow::store;
use pidflow::synth::{self, ProfileRow, RegimeScript};
use pidflow::trajectory::{self, SweepGrid, ThresholdConfig};
use pidflow::{Error, Result};

/// Layer-wise partial information decomposition of multimodal activations.
///
/// Exit codes: 0 success, 2 validation failure, 3 numeric failure.
#[derive(Parser)]
#[command(name = "pidflow", version)]
struct Cli {
    /// Worker threads for per-layer jobs (default: all cores).
    #[arg(long, global = true, env = "PIDFLOW_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic store from a regime script.
    Synth(SynthArgs),
    /// Check a store against the on-disk format and list every violation.
    Validate {
        store: PathBuf,
    },
    /// Run the estimator on a store (and optionally its knockout pair).
    Run(RunArgs),
    /// Classify the mechanism of a trajectory.
    Classify(ClassifyArgs),
    /// Compare two trajectories component by component.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Write the full report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Knockout deltas between a baseline and a knockout trajectory.
    Knockout {
        baseline: PathBuf,
        knockout: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write csv, json or long-format plot data for a completed run.
    Report {
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Regime script (JSON).
    #[arg(long)]
    script: PathBuf,
    /// Output store directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Override the script's sample count.
    #[arg(long)]
    samples: Option<usize>,
    /// Also write a paired knockout store here.
    #[arg(long, requires = "ko_scale")]
    knockout_out: Option<PathBuf>,
    /// Knockout multipliers for R,U_V,U_L,S, e.g. 1,1.5,1,1.2.
    #[arg(long, value_delimiter = ',')]
    ko_scale: Option<Vec<f64>>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON pipeline config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    knockout: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Variance fraction kept by PCA.
    #[arg(long)]
    retain: Option<f64>,
    #[arg(long)]
    pca_cap: Option<usize>,
    /// Fixed d' for a layer, as LAYER=D (repeatable).
    #[arg(long = "d-prime", value_parser = parse_override)]
    d_prime: Vec<(usize, usize)>,
    /// Flow training steps (test profile only).
    #[arg(long)]
    steps: Option<usize>,
    /// Skip writing flow and PCA files.
    #[arg(long)]
    no_models: bool,
    /// Apply the baseline flows to the knockout store instead of retraining.
    #[arg(long)]
    reuse_flows: bool,
}

#[derive(Args)]
struct ThresholdArgs {
    #[arg(long)]
    tau_s: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
}

impl ThresholdArgs {
    fn apply(&self, mut cfg: ThresholdConfig) -> Result<ThresholdConfig> {
        if let Some(v) = self.tau_s {
            cfg.tau_s = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.rho {
            cfg.rho = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ClassifyArgs {
    /// Trajectory directory or CSV.
    trajectory: PathBuf,
    #[command(flatten)]
    thresholds: ThresholdArgs,
    /// Also report label stability over the threshold grid.
    #[arg(long)]
    sweep: bool,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Test,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Test => Profile::Test,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Plotdata,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Plotdata => ReportFormat::Plotdata,
        }
    }
}

fn parse_override(s: &str) -> std::result::Result<(usize, usize), String> {
    let (l, d) = s.split_once('=').ok_or("expected LAYER=D")?;
    Ok((
        l.trim().parse().map_err(|e| format!("layer: {e}"))?,
        d.trim().parse().map_err(|e| format!("d': {e}"))?,
    ))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::json("output", e))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = to_json(v)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn synth_cmd(a: &SynthArgs) -> Result<()> {
    let mut script = RegimeScript::load(&a.script)?;
    if let Some(n) = a.samples {
        script.samples = n;
    }
    match (&a.knockout_out, &a.ko_scale) {
        (Some(ko_dir), Some(s)) => {
            if s.len() != 4 {
                return Err(Error::Invalid(format!("--ko-scale needs 4 values, got {}", s.len())));
            }
            let ko = script.scaled(&ProfileRow {
                r: s[0],
                u_v: s[1],
                u_l: s[2],
                s: s[3],
            })?;
            let (base, knock) = synth::gen_knockout_pair(&script, &ko, a.seed)?;
            store::write_store(&base, &a.out)?;
            store::write_store(&knock, ko_dir)?;
            println!("wrote {} and {}", a.out.display(), ko_dir.display());
        }
        _ => {
            let s = synth::gen_regime_dataset(&script, a.seed)?;
            store::write_store(&s, &a.out)?;
            println!(
                "wrote {} ({} layers, {} samples, regime {})",
                a.out.display(),
                script.layers(),
                script.samples,
                script.regime.name()
            );
        }
    }
    Ok(())
}

fn validate_cmd(path: &Path) -> Result<()> {
    let report = store::validate_store(path);
    if report.is_valid() {
        println!("{}: valid", path.display());
        return Ok(());
    }
    for v in &report.violations {
        println!("{v}");
    }
    Err(Error::Format(format!("{} violation(s) in {}", report.violations.len(), path.display())))
}

fn run_cmd(a: &RunArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => {
            let baseline = a.baseline.clone().ok_or_else(|| Error::Invalid("--baseline is required".into()))?;
            let out = a.out.clone().ok_or_else(|| Error::Invalid("--out is required".into()))?;
            PipelineConfig::new(baseline, out, Profile::Test)
        }
    };
    if let Some(p) = &a.baseline {
        cfg.baseline = p.clone();
    }
    if let Some(p) = &a.out {
        cfg.output = p.clone();
    }
    if a.knockout.is_some() {
        cfg.knockout = a.knockout.clone();
    }
    if let Some(p) = a.profile {
        cfg.profile = p.into();
    }
    if let Some(s) = a.seed {
        cfg.base_seed = s;
    }
    if let Some(r) = a.retain {
        cfg.retain = r;
    }
    if a.pca_cap.is_some() {
        cfg.pca_cap = a.pca_cap;
    }
    cfg.d_prime_override.extend(a.d_prime.iter().copied());
    if let Some(steps) = a.steps {
        let mut flow = cfg.train_config();
        flow.steps = steps;
        cfg.flow = Some(flow);
    }
    if a.no_models {
        cfg.save_models = false;
    }
    if a.reuse_flows {
        cfg.reuse_flows = true;
    }
    let summary = pipeline::run_pipeline(&cfg)?;
    println!("run written to {} (profile {})", summary.output.display(), cfg.profile);
    println!("condition,{}", ShareRow::HEADER);
    println!("normal,{}", ShareRow::from_state(summary.baseline.final_state()).csv_row());
    if let Some(k) = &summary.knockout {
        println!("knockout,{}", ShareRow::from_state(k.final_state()).csv_row());
    }
    if let Some(m) = &summary.mechanism {
        println!("mechanism: {}", trajectory::describe(m));
    }
    if let Some(r) = &summary.knockout_report {
        println!(
            "predictions: P1 {:?}, P2 {:?}, P3 {:?}; Dep {}",
            r.predictions.p1,
            r.predictions.p2,
            r.predictions.p3,
            r.dep_score.map_or("undefined".into(), |d| format!("{:.2}%", d.percent))
        );
    }
    Ok(())
}

fn classify_cmd(a: &ClassifyArgs) -> Result<()> {
    let traj = trajectory::load_trajectory(&a.trajectory)?;
    let cfg = a.thresholds.apply(ThresholdConfig::default())?;
    let report = trajectory::classify_mechanism(&traj, &cfg)?;
    let sweep = if a.sweep {
        Some(trajectory::threshold_sweep(&traj, &SweepGrid::around_defaults(), &cfg)?)
    } else {
        None
    };
    if a.json {
        println!("{}", to_json(&(&report, &sweep))?);
    } else {
        println!("{}", trajectory::describe(&report));
        if let Some(s) = &sweep {
            println!("sweep stability: {:.1}% of {} grid points", 100.0 * s.stability, s.points.len());
        }
    }
    Ok(())
}

fn compare_cmd(a: &Path, b: &Path, out: Option<&Path>, t: &ThresholdArgs) -> Result<()> {
    let (ta, tb) = (trajectory::load_trajectory(a)?, trajectory::load_trajectory(b)?);
    let report = compare_trajectories(&ta, &tb, &t.apply(ThresholdConfig::default())?)?;
    print!("{}", report.to_csv());
    match report.mean_r {
        Some(r) => println!("mean r: {r:.4}"),
        None => println!("mean r: undefined"),
    }
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn knockout_cmd(base: &Path, ko: &Path, out: Option<&Path>) -> Result<()> {
    let report = knockout_deltas(&trajectory::load_trajectory(base)?, &trajectory::load_trajectory(ko)?)?;
    print!("{}", report.to_csv());
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Validate { store } => validate_cmd(store),
        Command::Run(a) => run_cmd(a),
        Command::Classify(a) => classify_cmd(a),
        Command::Compare { a, b, out, thresholds } => compare_cmd(a, b, out.as_deref(), thresholds),
        Command::Knockout { baseline, knockout, out } => knockout_cmd(baseline, knockout, out.as_deref()),
        Command::Report { run, format } => {
            for p in pipeline::report(run, (*format).into(), None)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
