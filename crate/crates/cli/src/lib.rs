//! Subcommands of the `nubflow` binary.
//!
//! Exit codes: 0 success, 1 user error (bad flags, files, configs or
//! unsupported requests), 2 internal failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nubflow::autodiff::Activation;
use nubflow::flow::{FlowModel, FlowSpec};
use nubflow::io;
use nubflow::targets::{mh_generate, MhConfig, TargetKind, ToyTarget};
use nubflow::trainer::{self, TrainConfig, TrainState};
use nubflow::Error;

pub const THREADS_ENV: &str = "BSFLOW_THREADS";

/// Cells whose force norm exceeds this (or is not finite) count as singular.
pub const SINGULAR_NORM: f64 = 1e8;

#[derive(Parser, Debug)]
#[command(name = "nubflow", version, about = "Non-uniform B-spline normalizing flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw a toy dataset with Metropolis-Hastings
    GenData(GenDataArgs),
    /// Train a flow on a dataset
    Train(TrainArgs),
    /// Held-out NLL, force-matching error and reverse KLD of a model
    Eval(EvalArgs),
    /// Draw samples from a model
    Sample(SampleArgs),
    /// Density or force on a regular grid, as CSV and PPM
    Grid(GridArgs),
    /// Time density evaluation against sampling
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TargetArg {
    Rings,
    Periodic,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub target: TargetArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub chains: usize,
    #[arg(long, default_value_t = 1_000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 10)]
    pub keeps: usize,
    #[arg(long, default_value_t = 1)]
    pub keep_every: usize,
    #[arg(long, default_value_t = 0.1)]
    pub step: f64,
    /// Also write the rows as CSV
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Add the force-matching term with the configured lambda_fm
    #[arg(long)]
    pub fm: bool,
    /// Continue from a checkpoint written by an earlier run
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 32)]
    pub bins: usize,
    #[arg(long, value_delimiter = ',', default_value = "100,100")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value = "sin")]
    pub activation: String,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Checkpoint file
    #[arg(long)]
    pub model: PathBuf,
    /// Manifest; defaults to manifest.txt next to the checkpoint
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Training config, for the split and seed
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
pub enum GridWhat {
    Density,
    Force,
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum)]
    pub what: GridWhat,
    #[arg(long, default_value_t = 100)]
    pub res: usize,
    /// CSV output; the image goes to the same path with a .ppm extension
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::NonFiniteLoss { .. } | Error::Inversion { .. } | Error::StaleTape | Error::Range { .. } => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn user(message: impl Into<String>) -> CliError {
    CliError {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| user(format!("{}: {e}", path.display())))
}

/// Validates the thread-count variable. Evaluation is sequential, so any
/// positive value is accepted and the work runs on one thread.
pub fn threads_from_env() -> CliResult<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(user(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match threads_from_env().and_then(|_| run(cli.command)) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.message.lines().next().unwrap_or_default());
            e.code
        }
    }
}

pub fn run(cmd: Command) -> CliResult<String> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::Grid(a) => grid(a),
        Command::Bench(a) => bench(a),
    }
}

fn gen_data(a: GenDataArgs) -> CliResult<String> {
    let target = ToyTarget::by_kind(match a.target {
        TargetArg::Rings => TargetKind::Rings,
        TargetArg::Periodic => TargetKind::PeriodicRings,
    });
    let cfg = MhConfig {
        chains: a.chains,
        burn_in: a.burn_in,
        keep_every: a.keep_every,
        keeps: a.keeps,
        step: a.step,
    };
    let data = mh_generate(&target, &cfg, a.seed)?;
    let mut bytes = Vec::new();
    io::write_dataset(&data, &mut bytes)?;
    write_file(&a.out, bytes)?;
    if let Some(csv) = &a.csv {
        write_file(csv, io::dataset_csv(&data))?;
    }
    Ok(format!(
        "wrote {} rows of {} to {}\nacceptance rate {:.4} over {} chains x {} steps\n",
        data.len(),
        target.kind.name(),
        a.out.display(),
        data.acceptance,
        cfg.chains,
        cfg.burn_in + cfg.keeps * cfg.keep_every
    ))
}

fn manifest_path(m: &ModelArgs) -> PathBuf {
    m.manifest.clone().unwrap_or_else(|| {
        m.model
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("manifest.txt")
    })
}

fn load(m: &ModelArgs) -> CliResult<(FlowModel, Option<TrainState>)> {
    let manifest = manifest_path(m);
    let text = read_text(&manifest)?;
    let mut model = io::model_from_manifest(&text)?;
    let ck = io::Checkpoint::load(&m.model)?;
    let state = io::restore_checkpoint(&mut model, &ck)
        .map_err(|e| user(format!("model/manifest mismatch: {e}")))?;
    Ok((model, state))
}

fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_{epoch:05}.ckpt")
}

fn train(a: TrainArgs) -> CliResult<String> {
    let mut cfg = io::parse_train_config(&read_text(&a.config)?)?;
    if !a.fm {
        cfg.lambda_fm = 0.0;
    }
    let data = io::load_dataset(&a.data)?;
    let target = data.target.clone();
    fs::create_dir_all(&a.out).map_err(|e| user(format!("{}: {e}", a.out.display())))?;

    let (mut model, mut state, mut rows) = match &a.resume {
        Some(ck) => {
            let margs = ModelArgs {
                model: ck.clone(),
                manifest: None,
            };
            let (model, state) = load(&margs)?;
            let state = state.ok_or_else(|| user(format!("{} has no optimizer state", ck.display())))?;
            let old = a.out.join("metrics.csv");
            let rows = if old.exists() {
                io::parse_metrics_csv(&read_text(&old)?)?
                    .into_iter()
                    .filter(|r| r.epoch <= state.epoch)
                    .collect()
            } else {
                Vec::new()
            };
            (model, state, rows)
        }
        None => {
            let activation =
                Activation::parse(&a.activation).ok_or_else(|| user(format!("unknown activation {:?}", a.activation)))?;
            let spec = FlowSpec {
                domains: target.domains(),
                layers: a.layers,
                k: a.k,
                bins: a.bins,
                eps: a.eps,
                hidden: a.hidden.clone(),
                activation,
            };
            let model = FlowModel::new(spec, data.bbox.clone(), cfg.seed)?;
            let state = TrainState::new(&model);
            (model, state, Vec::new())
        }
    };
    if model.domains() != target.domains().as_slice() || model.bbox() != &data.bbox {
        return Err(user("model and dataset disagree on domains or bounding box"));
    }
    write_file(&a.out.join("manifest.txt"), io::manifest_string(&model))?;
    write_file(&a.out.join("config.txt"), io::train_config_string(&cfg))?;

    let out = a.out.clone();
    let metrics = trainer::train(&mut model, &data, &target, &cfg, &mut state, |m, st, _| {
        io::model_checkpoint(m, Some(st))?.save(&out.join(checkpoint_name(st.epoch)))
    })?;
    io::model_checkpoint(&model, Some(&state))?.save(&a.out.join("final.ckpt"))?;
    rows.extend(metrics.trace.iter().copied());
    let mut csv = format!("{}\n", io::METRICS_HEADER);
    for r in &rows {
        csv.push_str(&io::metrics_row(r));
        csv.push('\n');
    }
    write_file(&a.out.join("metrics.csv"), csv)?;

    let mut s = format!("trained to epoch {} ({} parameters)\n", state.epoch, model.n_params());
    if let Some(ev) = metrics.last {
        s.push_str(&report(&ev));
    }
    Ok(s)
}

fn report(ev: &trainer::Evaluation) -> String {
    let mut s = format!("test_nll {:.6}\n", ev.nll);
    match ev.fme {
        Some(f) => writeln!(s, "fme {f:.6}").unwrap(),
        None => writeln!(s, "fme n/a (model is not C2)").unwrap(),
    }
    writeln!(s, "rkld {:.6} (up to the target's log normalizer)", ev.rkld).unwrap();
    s
}

fn eval(a: EvalArgs) -> CliResult<String> {
    let (model, _) = load(&a.model)?;
    let data = io::load_dataset(&a.data)?;
    if model.bbox() != &data.bbox {
        return Err(user("model and dataset bounding boxes differ"));
    }
    let cfg = match &a.config {
        Some(p) => io::parse_train_config(&read_text(p)?)?,
        None => TrainConfig::desk(),
    };
    let split = trainer::split(&data, &cfg);
    let ev = trainer::evaluate(
        &model,
        &split.test,
        &data.target,
        a.samples.unwrap_or(cfg.rkld_samples),
        cfg.seed,
    )?;
    Ok(format!("test_rows {}\n{}", split.test.len() / data.dim, report(&ev)))
}

fn sample(a: SampleArgs) -> CliResult<String> {
    let (model, _) = load(&a.model)?;
    let (xs, lp) = model.sample_with_log_density(a.n, a.seed)?;
    let dim = model.dim();
    let lj = model.bbox().log_jacobian();
    let mut s = (0..dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(",");
    s.push_str(",log_density\n");
    for (row, lp) in xs.chunks_exact(dim).zip(lp) {
        for v in model.bbox().from_flow(row) {
            write!(s, "{v:?},").unwrap();
        }
        writeln!(s, "{:?}", lp + lj).unwrap();
    }
    write_file(&a.out, s)?;
    Ok(format!("wrote {} samples to {}\n", a.n, a.out.display()))
}

/// Values of a grid evaluation, row-major with `y` increasing.
pub struct Grid {
    pub res: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// One value per cell for densities, two for forces.
    pub values: Vec<Vec<f64>>,
}

pub fn evaluate_grid(model: &FlowModel, what: GridWhat, res: usize) -> nubflow::Result<Grid> {
    if model.dim() != 2 {
        return Err(Error::Argument(format!("grids need a 2-D model, got D = {}", model.dim())));
    }
    if res == 0 {
        return Err(Error::Argument("grid resolution must be positive".into()));
    }
    if what == GridWhat::Force {
        model.require_c2()?;
    }
    let (lo, hi) = (model.bbox().lo(), model.bbox().hi());
    let axis = |i: usize| -> Vec<f64> {
        (0..res)
            .map(|c| lo[i] + (hi[i] - lo[i]) * (c as f64 + 0.5) / res as f64)
            .collect()
    };
    let (xs, ys) = (axis(0), axis(1));
    let mut values = Vec::with_capacity(res * res);
    for &y in &ys {
        for &x in &xs {
            let v = match what {
                GridWhat::Density => vec![model.log_density_data(&[x, y])?.exp()],
                GridWhat::Force => model.model_force_data(&[x, y])?,
            };
            values.push(v);
        }
    }
    Ok(Grid { res, xs, ys, values })
}

/// Maximum force norm and the number of singular cells.
pub fn force_summary(grid: &Grid) -> (f64, usize) {
    let mut max = 0.0f64;
    let mut singular = 0;
    for v in &grid.values {
        let n = v.iter().map(|f| f * f).sum::<f64>().sqrt();
        if !n.is_finite() || n > SINGULAR_NORM {
            singular += 1;
        } else {
            max = max.max(n);
        }
    }
    (max, singular)
}

/// Black to red to yellow to white.
fn heat(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 1.0 };
    let c = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [c(3.0 * t), c(3.0 * t - 1.0), c(3.0 * t - 2.0)]
}

pub fn ppm(grid: &Grid, what: GridWhat) -> Vec<u8> {
    let scalar: Vec<f64> = grid
        .values
        .iter()
        .map(|v| match what {
            GridWhat::Density => v[0],
            GridWhat::Force => (1.0 + v.iter().map(|f| f * f).sum::<f64>().sqrt()).ln(),
        })
        .collect();
    let max = scalar.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let n = grid.res;
    let mut out = format!("P6\n{n} {n}\n255\n").into_bytes();
    for row in (0..n).rev() {
        for col in 0..n {
            let v = scalar[row * n + col];
            out.extend(heat(if max > 0.0 { v / max } else { 0.0 }));
        }
    }
    out
}

fn grid(a: GridArgs) -> CliResult<String> {
    let (model, _) = load(&a.model)?;
    let g = evaluate_grid(&model, a.what, a.res)?;
    let mut csv = match a.what {
        GridWhat::Density => String::from("x,y,density\n"),
        GridWhat::Force => String::from("x,y,fx,fy,norm\n"),
    };
    for (i, v) in g.values.iter().enumerate() {
        let (x, y) = (g.xs[i % g.res], g.ys[i / g.res]);
        match a.what {
            GridWhat::Density => writeln!(csv, "{x:?},{y:?},{:?}", v[0]).unwrap(),
            GridWhat::Force => writeln!(
                csv,
                "{x:?},{y:?},{:?},{:?},{:?}",
                v[0],
                v[1],
                v[0].hypot(v[1])
            )
            .unwrap(),
        }
    }
    write_file(&a.out, csv)?;
    let image = a.out.with_extension("ppm");
    write_file(&image, ppm(&g, a.what))?;
    let mut s = format!("wrote {0}x{0} grid to {1} and {2}\n", a.res, a.out.display(), image.display());
    if a.what == GridWhat::Force {
        let (max, singular) = force_summary(&g);
        writeln!(s, "max_norm {max:.6}\nsingular_cells {singular}").unwrap();
    }
    Ok(s)
}

/// Mean and twice the standard error.
pub fn mean_2se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 2.0 * (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Timing {
    /// Milliseconds per sample, one entry per repetition.
    pub forward: Vec<f64>,
    pub reverse: Vec<f64>,
}

/// Times `reps` batched passes of `n` samples each way: the forward pass on
/// model samples, the reverse pass on uniform base points.
pub fn time_passes(model: &FlowModel, n: usize, reps: usize, seed: u64) -> nubflow::Result<Timing> {
    let (xs, _) = model.sample_with_log_density(n, seed)?;
    let us = {
        let (u, _) = model.forward_batch(&xs)?;
        u
    };
    let mut t = Timing {
        forward: Vec::with_capacity(reps),
        reverse: Vec::with_capacity(reps),
    };
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(model.forward_batch(std::hint::black_box(&xs))?);
        t.forward.push(start.elapsed().as_secs_f64() * 1e3 / n as f64);
        let start = Instant::now();
        std::hint::black_box(model.inverse_batch(std::hint::black_box(&us))?);
        t.reverse.push(start.elapsed().as_secs_f64() * 1e3 / n as f64);
    }
    Ok(t)
}

fn bench(a: BenchArgs) -> CliResult<String> {
    if a.n == 0 || a.reps == 0 {
        return Ok("empty report: nothing to time (pass --n N --reps R with N, R > 0)\n".into());
    }
    let (model, _) = load(&a.model)?;
    let t = time_passes(&model, a.n, a.reps, a.seed)?;
    let (fm, fe) = mean_2se(&t.forward);
    let (rm, re) = mean_2se(&t.reverse);
    Ok(format!(
        "samples {} reps {}\nforward_ms_per_sample {fm:.6} +- {fe:.6}\nreverse_ms_per_sample {rm:.6} +- {re:.6}\nreverse_forward_ratio {:.3}\n",
        a.n,
        a.reps,
        rm / fm
    ))
}
