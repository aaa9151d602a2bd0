//! Subcommands of the `gen` binary. Each returns `Ok` or a [`CliError`]
//! carrying the process exit code.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetSpec, ExperimentConfig, TruthSpec};
use crate::data::{diameter_estimate, fmt_f64, rescale_to_bijective, rows_to_csv, sample_mixture, Dataset, MixtureSpec};
use crate::error::Error;
use crate::metrics::{default_edges, mixture_modes, mode_coverage, symmetric_kl, wasserstein_1d, Histogram, DEFAULT_LAPLACE_ALPHA};
use crate::rff::FeatureMap;
use crate::trainer::{derived_seed, generate, initial_feature_map, Phase, Trainer};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;
pub const EXIT_CHECKPOINT: i32 = 5;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";

/// Samples drawn per epoch for the training-time metric curve.
const CURVE_SAMPLES: usize = 2_000;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn with_code(code: i32) -> impl Fn(Error) -> CliError {
    move |e| CliError::new(code, e.to_string())
}

/// Exit code for an error raised while loading or preparing data.
fn data_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Diverged { .. } | Error::NonFinite(_) => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn output_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(EXIT_FAILURE, format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| output_error(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| output_error(path, e))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::new(EXIT_CHECKPOINT, e.to_string()))
}

#[derive(Debug, Parser)]
#[command(name = "gen", version, about = "Enclosing-ball generative models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a JSON experiment config.
    Train { config: PathBuf },
    /// Write generated samples as CSV.
    Generate {
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare 10,000 generated samples against a mixture truth spec.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the decision value of a 2-D model on a grid.
    Contour {
        checkpoint: PathBuf,
        /// x_min,x_max,y_min,y_max,resolution
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the bijectivity report for a checkpoint or config.
    Check { path: PathBuf },
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train { config } => cmd_train(&config).map(|_| ()),
        Command::Generate { checkpoint, n, out } => cmd_generate(&checkpoint, n, &out),
        Command::Eval { checkpoint, truth, out } => cmd_eval(&checkpoint, &truth, &out),
        Command::Contour { checkpoint, grid, out } => cmd_contour(&checkpoint, &grid, &out),
        Command::Check { path } => cmd_check(&path).map(|report| print!("{report}")),
    }
}

fn mixture_of(spec: &DatasetSpec) -> Option<&MixtureSpec> {
    match spec {
        DatasetSpec::Mixture { mixture, .. } if mixture.dims() == 1 => Some(mixture),
        _ => None,
    }
}

/// Trains from a config file, writing the checkpoint at every epoch boundary
/// and one JSON line per epoch. Returns the output directory.
pub fn cmd_train(config_path: &Path) -> CliResult<PathBuf> {
    let cfg = ExperimentConfig::load(config_path).map_err(with_code(EXIT_CONFIG))?;
    let data = cfg.dataset.load().map_err(|e| CliError::new(data_code(&e), e.to_string()))?;
    let mut trainer = Trainer::new(&data, &cfg.train).map_err(|e| CliError::new(data_code(&e), e.to_string()))?;
    trainer.checkpoint_mut().dataset = Some(cfg.dataset.clone());

    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| output_error(out, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOG_FILE);
    let mut log = std::fs::File::create(&log_path).map_err(|e| output_error(&log_path, e))?;

    let curve = mixture_of(&cfg.dataset).cloned().map(|m| {
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.train.seed, 10));
        let truth = sample_mixture(&m, CURVE_SAMPLES, &mut rng).expect("validated mixture");
        (m, truth.column(0))
    });
    let mut metrics = String::from("epoch,symmetric_kl,wasserstein\n");

    while !trainer.is_done() {
        let rec = trainer
            .run_epoch()
            .map_err(|e| CliError::new(EXIT_NUMERICAL, e.to_string()))?;
        let line = serde_json::to_string(&rec).expect("plain record");
        writeln!(log, "{line}").map_err(|e| output_error(&log_path, e))?;
        trainer
            .checkpoint()
            .save(&ckpt_path)
            .map_err(|e| CliError::new(EXIT_FAILURE, e.to_string()))?;
        if let (Some((mix, truth)), Phase::Generator) = (&curve, rec.phase) {
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.train.seed, 11));
            let xs = generate(trainer.checkpoint(), CURVE_SAMPLES, &mut rng).map_err(with_code(EXIT_NUMERICAL))?;
            let gen: Vec<f64> = xs.iter().map(|x| x[0]).collect();
            let (kl, w1) = marginal_distances(mix, 0, truth, &gen).map_err(with_code(EXIT_NUMERICAL))?;
            let _ = writeln!(metrics, "{},{},{}", rec.epoch, fmt_f64(kl), fmt_f64(w1));
        }
    }
    if curve.is_some() {
        write_file(&out.join(METRICS_FILE), &metrics)?;
    }
    Ok(out.clone())
}

pub fn cmd_generate(ckpt_path: &Path, n: usize, out: &Path) -> CliResult {
    let ckpt = load_checkpoint(ckpt_path)?;
    if n == 0 {
        return Err(CliError::new(EXIT_CONFIG, "--n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(ckpt.config.seed, 12));
    let xs = generate(&ckpt, n, &mut rng).map_err(with_code(EXIT_NUMERICAL))?;
    write_file(out, &rows_to_csv(ckpt.feature_map.dims_in(), &xs))
}

fn marginal_distances(mix: &MixtureSpec, j: usize, truth: &[f64], gen: &[f64]) -> crate::Result<(f64, f64)> {
    let edges = default_edges(mix, j);
    let p = Histogram::build(truth, &edges, DEFAULT_LAPLACE_ALPHA)?;
    let q = Histogram::build(gen, &edges, DEFAULT_LAPLACE_ALPHA)?;
    Ok((symmetric_kl(&p, &q)?, wasserstein_1d(truth, gen)?))
}

/// One CSV row: marginal-averaged symmetric KL and W1, then the fraction of
/// samples within `mode_radius` of each mixture mean.
pub fn eval_row(ckpt: &Checkpoint, truth: &TruthSpec) -> crate::Result<String> {
    let d = ckpt.feature_map.dims_in();
    if truth.mixture.dims() != d {
        return Err(Error::Config(format!(
            "truth spec has dimension {}, checkpoint has {d}",
            truth.mixture.dims()
        )));
    }
    let mut gen_rng = ChaCha8Rng::seed_from_u64(truth.seed);
    gen_rng.set_stream(1);
    let mut truth_rng = ChaCha8Rng::seed_from_u64(truth.seed);
    truth_rng.set_stream(2);
    let gen = generate(ckpt, truth.samples, &mut gen_rng)?;
    let reference = sample_mixture(&truth.mixture, truth.samples, &mut truth_rng)?;
    let gen_ds = Dataset::from_rows("generated", gen)?;
    let (mut kl, mut w1) = (0.0, 0.0);
    for j in 0..d {
        let (k, w) = marginal_distances(&truth.mixture, j, &reference.column(j), &gen_ds.column(j))?;
        kl += k / d as f64;
        w1 += w / d as f64;
    }
    let coverage = mode_coverage(&gen_ds.rows(), &mixture_modes(&truth.mixture, truth.mode_radius))?;
    let mut header = String::from("symmetric_kl,wasserstein");
    let mut row = format!("{},{}", fmt_f64(kl), fmt_f64(w1));
    for (k, c) in coverage.iter().enumerate() {
        let _ = write!(header, ",coverage_{k}");
        let _ = write!(row, ",{}", fmt_f64(*c));
    }
    Ok(format!("{header}\n{row}\n"))
}

pub fn cmd_eval(ckpt_path: &Path, truth_path: &Path, out: &Path) -> CliResult {
    let truth = TruthSpec::load(truth_path).map_err(with_code(EXIT_CONFIG))?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let row = eval_row(&ckpt, &truth).map_err(|e| match e {
        Error::Config(m) => CliError::new(EXIT_CONFIG, m),
        other => CliError::new(EXIT_NUMERICAL, other.to_string()),
    })?;
    write_file(out, &row)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: usize,
}

impl GridSpec {
    pub fn parse(s: &str) -> crate::Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("grid must be x_min,x_max,y_min,y_max,resolution; got {s:?}"));
        if parts.len() != 5 {
            return Err(bad());
        }
        let f = |i: usize| parts[i].parse::<f64>().map_err(|_| bad());
        let g = GridSpec {
            x_min: f(0)?,
            x_max: f(1)?,
            y_min: f(2)?,
            y_max: f(3)?,
            resolution: parts[4].parse().map_err(|_| bad())?,
        };
        let finite = [g.x_min, g.x_max, g.y_min, g.y_max].iter().all(|v| v.is_finite());
        if !finite || g.x_min >= g.x_max || g.y_min >= g.y_max || g.resolution < 2 {
            return Err(bad());
        }
        Ok(g)
    }

    /// Row-major grid points, `resolution` per axis, endpoints included.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let r = self.resolution;
        let step = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (r - 1) as f64;
        (0..r)
            .flat_map(|iy| (0..r).map(move |ix| (ix, iy)))
            .map(|(ix, iy)| [step(self.x_min, self.x_max, ix), step(self.y_min, self.y_max, iy)])
            .collect()
    }
}

/// Decision values (raw data coordinates) over the grid as `(x, y, value)`.
pub fn contour_rows(ckpt: &Checkpoint, grid: &GridSpec) -> crate::Result<Vec<[f64; 3]>> {
    if ckpt.feature_map.dims_in() != 2 {
        return Err(Error::Config(format!(
            "contour needs a 2-D model, checkpoint has dimension {}",
            ckpt.feature_map.dims_in()
        )));
    }
    grid.points()
        .into_iter()
        .map(|p| Ok([p[0], p[1], ckpt.decision_value_raw(&p)?]))
        .collect()
}

pub fn cmd_contour(ckpt_path: &Path, grid: &str, out: &Path) -> CliResult {
    let ckpt = load_checkpoint(ckpt_path)?;
    let grid = GridSpec::parse(grid).map_err(with_code(EXIT_CONFIG))?;
    let rows = contour_rows(&ckpt, &grid).map_err(|e| match e {
        Error::Config(m) => CliError::new(EXIT_CONFIG, m),
        other => CliError::new(EXIT_NUMERICAL, other.to_string()),
    })?;
    let mut csv = String::from("x,y,value\n");
    for r in rows {
        let _ = writeln!(csv, "{},{},{}", fmt_f64(r[0]), fmt_f64(r[1]), fmt_f64(r[2]));
    }
    write_file(out, &csv)
}

/// Number of points used for the unit-norm spot check.
const SPOT_CHECK_POINTS: usize = 100;

fn check_report(fm: &FeatureMap, data: &Dataset, diameter: f64, source: &str) -> String {
    let rep = fm.check_bijection(diameter);
    let n = data.len().min(SPOT_CHECK_POINTS);
    let worst = (0..n)
        .map(|i| {
            let phi = fm.map_unchecked(data.row(i));
            (phi.iter().map(|v| v * v).sum::<f64>() - 1.0).abs()
        })
        .fold(0.0f64, f64::max);
    let mut s = String::new();
    let _ = writeln!(s, "source: {source}");
    let _ = writeln!(s, "input_dims: {}", fm.dims_in());
    let _ = writeln!(s, "num_features: {}", fm.num_features());
    let _ = writeln!(s, "rank: {}", rep.rank);
    let _ = writeln!(s, "rank_ok: {}", rep.rank_ok);
    let _ = writeln!(s, "contraction_ok: {}", rep.contraction_ok);
    let _ = writeln!(s, "product_value: {}", rep.product_value);
    let _ = writeln!(s, "diameter: {diameter}");
    let _ = writeln!(s, "unit_norm_points: {n}");
    let _ = writeln!(s, "unit_norm_max_error: {worst:e}");
    s
}

/// Builds the bijectivity and unit-norm report for a checkpoint or an
/// experiment config. A config is used as-is, including its rescaling flag.
pub fn cmd_check(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: {e}", path.display())))?;
    // truncated checkpoints still count as checkpoints
    let is_checkpoint = match serde_json::from_slice::<serde_json::Value>(&bytes) {
        Ok(v) => v.get("format_version").is_some(),
        Err(_) => String::from_utf8_lossy(&bytes).contains("\"format_version\""),
    };
    if is_checkpoint {
        let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| CliError::new(EXIT_CHECKPOINT, e.to_string()))?;
        let data = match ckpt.dataset.as_ref().map(DatasetSpec::load) {
            Some(Ok(raw)) => match &ckpt.scale_applied {
                Some(s) => Dataset::from_rows("scaled", raw.rows().into_iter().map(|r| s.apply(r)).collect()),
                None => Ok(raw),
            }
            .ok(),
            _ => None,
        };
        let fm = &ckpt.feature_map;
        // without the data, spot-check the origin and unit vectors
        let data = data.unwrap_or_else(|| {
            let d = fm.dims_in();
            let rows = (0..=d)
                .map(|k| (0..d).map(|j| f64::from(u8::from(j + 1 == k))).collect())
                .collect();
            Dataset::from_rows("probe", rows).expect("nonempty probe set")
        });
        return Ok(check_report(fm, &data, ckpt.data_diameter.value, &path.display().to_string()));
    }
    let cfg = ExperimentConfig::load(path).map_err(with_code(EXIT_CONFIG))?;
    let data = cfg.dataset.load().map_err(|e| CliError::new(data_code(&e), e.to_string()))?;
    let d = data.dims();
    let fm = initial_feature_map(&cfg.train, d).map_err(with_code(EXIT_CONFIG))?;
    let data = if cfg.train.rescale_to_bijective {
        rescale_to_bijective(&data, &fm).map_err(with_code(EXIT_DATA))?
    } else {
        data
    };
    let diameter = diameter_estimate(&data).value;
    Ok(check_report(&fm, &data, diameter, &path.display().to_string()))
}
