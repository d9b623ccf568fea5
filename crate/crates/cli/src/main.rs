use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use patchtunnel::bottleneck::StageAffine;
use patchtunnel::modelio;
use patchtunnel::{
    execute_network, extract_patches, plan_network, plan_regions, verify_equivalence, BottleneckSpec, ExecMode,
    MemoryBudget, PatchLayout, TensorShape,
};

mod report;

/// Memory-budgeted patch-based CNN inference.
#[derive(Debug, Parser)]
#[command(name = "patchtunnel", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Static peak-memory plan for a network document.
    Plan(PlanArgs),
    /// Budgeted inference on one image.
    Run(RunArgs),
    /// Randomized check that reordered and standard bottlenecks agree.
    Verify(VerifyArgs),
    /// Split an image into patch files.
    Segment(SegmentArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Standard,
    Reordered,
}

impl From<Mode> for ExecMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Standard => ExecMode::Standard,
            Mode::Reordered => ExecMode::Reordered,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
struct BudgetArgs {
    /// Activation budget in bytes.
    #[arg(long)]
    budget: u64,
    /// Bytes per activation element: 1, 2 or 4.
    #[arg(long, default_value_t = 1, value_parser = parse_elem_bytes)]
    elem_bytes: u32,
}

fn parse_elem_bytes(s: &str) -> Result<u32, String> {
    match s {
        "1" | "2" | "4" => Ok(s.parse().expect("digit")),
        _ => Err("expected 1, 2 or 4".into()),
    }
}

impl BudgetArgs {
    fn budget(&self) -> anyhow::Result<MemoryBudget> {
        Ok(MemoryBudget::new(self.budget, self.elem_bytes)?)
    }
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long, value_enum, default_value_t = Mode::Reordered)]
    mode: Mode,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Also report the peak if this many tunnels ran at once.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    parallel: Option<u64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Binary PGM or PPM.
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// JSON fragment with `input` and `bottleneck` objects.
    #[arg(long, conflicts_with_all = ["h", "w", "c_in", "t", "stride", "c_out", "residual", "affine"])]
    fragment: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    h: usize,
    #[arg(long, default_value_t = 10)]
    w: usize,
    #[arg(long, default_value_t = 8)]
    c_in: usize,
    #[arg(long, default_value_t = 6)]
    t: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 8)]
    c_out: usize,
    #[arg(long)]
    residual: bool,
    /// Apply a scale/bias plus ReLU6 after expansion and depth-wise stages.
    #[arg(long)]
    affine: bool,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    k: usize,
    /// Margin in pixels, applied on both axes.
    #[arg(long, default_value_t = 0)]
    margin: usize,
    #[arg(long)]
    central: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

/// Exit status 2: the request was well formed but the budget or the
/// tolerance was not met.
#[derive(Debug)]
struct Refused;

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("cannot read {}", path.display()))
}

fn plan(args: &PlanArgs) -> anyhow::Result<Option<Refused>> {
    let net = modelio::load_spec(&read(&args.model)?).with_context(|| args.model.display().to_string())?;
    let plan = plan_network(&net, &args.budget.budget()?, args.mode.into())?;
    let out = match args.format {
        Format::Text => report::text(&plan, args.parallel),
        Format::Json => report::json(&plan, args.parallel),
    };
    print!("{out}");
    Ok((!plan.within_budget).then_some(Refused))
}

fn run(args: &RunArgs) -> anyhow::Result<Option<Refused>> {
    let net = modelio::load_spec(&read(&args.model)?).with_context(|| args.model.display().to_string())?;
    let weights =
        modelio::load_weights(&read(&args.weights)?, &net).with_context(|| args.weights.display().to_string())?;
    let image = modelio::load_image_pnm(&read(&args.image)?).with_context(|| args.image.display().to_string())?;
    if image.shape() != net.input {
        bail!("image is {}, network expects {}", image.shape(), net.input);
    }
    let budget = args.budget.budget()?;
    let plan = plan_network(&net, &budget, ExecMode::Reordered)?;
    if !plan.within_budget {
        eprintln!(
            "error: plan peak {} bytes ({}) at {} exceeds the budget of {} bytes ({})",
            plan.peak_bytes,
            report::kb(plan.peak_bytes),
            plan.peak().label,
            budget.budget_bytes,
            report::kb(budget.budget_bytes)
        );
        return Ok(Some(Refused));
    }
    let (scores, trace) = match execute_network(&net, &weights, &image, &budget) {
        Ok(r) => r,
        Err(e @ patchtunnel::Error::BudgetExceeded { .. }) => {
            eprintln!("error: {e}");
            return Ok(Some(Refused));
        }
        Err(e) => return Err(e.into()),
    };
    for (i, s) in scores.iter().enumerate() {
        println!("{i}: {s}");
    }
    eprintln!(
        "trace: {} ops, high water {} bytes ({}), plan peak {} bytes, budget {} bytes",
        trace.records.len(),
        trace.high_water_bytes,
        report::kb(trace.high_water_bytes),
        plan.peak_bytes,
        budget.budget_bytes
    );
    if trace.high_water_bytes != plan.peak_bytes {
        bail!("internal: high water {} differs from plan peak {}", trace.high_water_bytes, plan.peak_bytes);
    }
    Ok(None)
}

fn verify(args: &VerifyArgs) -> anyhow::Result<Option<Refused>> {
    let (spec, shape) = match &args.fragment {
        Some(path) => modelio::load_bottleneck_fragment(&read(path)?).with_context(|| path.display().to_string())?,
        None => {
            let affine = args.affine.then_some(StageAffine { relu6: true });
            let spec = BottleneckSpec {
                c_in: args.c_in,
                t: args.t,
                s: args.stride,
                c_out: args.c_out,
                residual: args.residual,
                expand_affine: affine,
                dw_affine: affine,
            };
            (spec, TensorShape::new(args.h, args.w, args.c_in)?)
        }
    };
    if args.tol.is_nan() || args.tol < 0.0 {
        bail!("--tol must be a non-negative number");
    }
    let report = verify_equivalence(&spec, shape, args.trials as usize, args.seed, args.tol)?;
    println!("input: {shape}, t {}, stride {}, c_out {}", spec.t, spec.s, spec.c_out);
    println!("trials: {}", report.trials);
    println!("max_rel_dev: {:e}", report.max_rel_dev);
    println!("tol: {:e}", report.tol);
    println!("result: {}", if report.pass { "pass" } else { "fail" });
    Ok((!report.pass).then_some(Refused))
}

fn segment(args: &SegmentArgs) -> anyhow::Result<Option<Refused>> {
    let image = modelio::load_image_pnm(&read(&args.image)?).with_context(|| args.image.display().to_string())?;
    let layout = PatchLayout { k: args.k, m_h: args.margin, m_w: args.margin, central: args.central };
    let regions = plan_regions(image.shape(), &layout)?;
    let patches = extract_patches(&image, &regions)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    for (region, patch) in regions.iter().zip(&patches) {
        let path = args.out_dir.join(format!("{}.pnm", region.name()));
        fs::write(&path, modelio::save_image_pnm(patch)?).with_context(|| format!("cannot write {}", path.display()))?;
        println!(
            "{}: rows {}..{}, cols {}..{}",
            path.display(),
            region.row0,
            region.row0 + region.height,
            region.col0,
            region.col0 + region.width
        );
    }
    Ok(None)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match &cli.command {
        Command::Plan(a) => plan(a),
        Command::Run(a) => run(a),
        Command::Verify(a) => verify(a),
        Command::Segment(a) => segment(a),
    };
    match outcome {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(Refused)) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
