//! Command-line surface: dataset generation, stylization preview, training,
//! evaluation, ablations, sweeps, and plot-ready CSV export.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::stylize::{self, StyleConfig, StyleMethod};
use crate::synthscenes::{build_splits, Dataset, Split};
use crate::uda::{self, metrics_from_csv, metrics_to_csv, MetricsRow, TrainState};

#[derive(Parser)]
#[command(name = "ciss", about = "Condition-invariant semantic segmentation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. `--set iterations=500` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set '{kv}': expected KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain dataset.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Overwrite an existing non-empty dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Stylize one PPM image with the style of another.
    Stylize {
        input: PathBuf,
        style: PathBuf,
        output: PathBuf,
        #[arg(long, default_value = "fda")]
        method: String,
        #[arg(long, default_value_t = 0.06)]
        beta: f64,
        /// Seed for the jitter method.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write checkpoint plus metrics CSV.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "target_val")]
        split: String,
        /// Evaluate the EMA teacher instead of the student.
        #[arg(long)]
        teacher: bool,
        /// Also write the report CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the loss-variant or invariance-point ablation study.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// `loss` (variant table) or `invariance` (encoder vs output).
        #[arg(long, default_value = "loss")]
        study: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// λ_s values for the invariance study (comma-separated).
        #[arg(long, default_value = "0.03,0.1,0.3,1.0")]
        lambdas: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one hyperparameter over a value list.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of lambda_s, lambda_t, beta.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Downsample a metrics CSV into windowed means for plotting.
    ExportCurves {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        window: u64,
    },
}

pub fn run() -> i32 {
    init_threads();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("CISS_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { config, force } => cmd_gen(&config.load()?, force),
        Command::Stylize {
            input,
            style,
            output,
            method,
            beta,
            seed,
        } => cmd_stylize(&input, &style, &output, &method, beta, seed),
        Command::Train { config } => {
            cmd_train(&config.load()?).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            teacher,
            out,
        } => cmd_eval(&checkpoint, &data, &split, teacher, out.as_deref()),
        Command::Ablate {
            config,
            study,
            seeds,
            lambdas,
            out,
        } => cmd_ablate(&config.load()?, &study, seeds, &lambdas, out.as_deref()),
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            out,
        } => cmd_sweep(&config.load()?, &param, &values, seeds, out.as_deref()),
        Command::ExportCurves {
            metrics,
            out,
            window,
        } => cmd_export_curves(&metrics, &out, window),
    }
}

pub fn cmd_gen(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let dir = &cfg.data_dir;
    if dir.exists() && dir.read_dir().map_err(|e| Error::io(dir, e))?.next().is_some() {
        if !force {
            return Err(Error::Data(format!(
                "dataset directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    let manifest = build_splits(
        cfg.master_seed,
        cfg.n_src_train,
        cfg.n_tgt_train,
        cfg.n_val,
        dir,
    )?;
    println!(
        "wrote {} scenes to {}",
        manifest.entries.len(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_stylize(
    input: &Path,
    style: &Path,
    output: &Path,
    method: &str,
    beta: f64,
    seed: u64,
) -> Result<()> {
    let method = StyleMethod::parse(method)?;
    let cfg = StyleConfig {
        method,
        beta,
        ..StyleConfig::default()
    };
    cfg.validate()?;
    let content = Image::read_ppm(input)?;
    let style_img = Image::read_ppm(style)?;
    let out = stylize::apply(&cfg, &content, &style_img, seed)?;
    out.write_ppm(output)
}

/// Train per the config; writes `metrics.csv`, `checkpoint.ckpt`, and the
/// resolved `config.txt` into the output directory. Returns final-state rows
/// for programmatic callers.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(TrainState, Vec<MetricsRow>)> {
    let dataset = Dataset::load(&cfg.data_dir)?;
    let (state, rows) = uda::train(cfg, &dataset)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    fs::write(&metrics_path, metrics_to_csv(&rows)).map_err(|e| Error::io(&metrics_path, e))?;
    state.save(&cfg.out_dir.join("checkpoint.ckpt"))?;
    let cfg_path = cfg.out_dir.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    println!(
        "trained {} iterations; wrote {}",
        cfg.iterations,
        cfg.out_dir.display()
    );
    Ok((state, rows))
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    teacher: bool,
    out: Option<&Path>,
) -> Result<()> {
    let split = Split::parse(split)?;
    let dataset = Dataset::load(data)?;
    let state = TrainState::load(checkpoint, 0.0)?;
    let params = if teacher { &state.teacher } else { &state.student };
    let cm = uda::evaluate(params, &dataset, split)?;
    let report = cm.report_csv(&crate::synthscenes::CLASS_NAMES)?;
    print!("{report}");
    if let Some(path) = out {
        fs::write(path, &report).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// One training cell: config mutation + seed, evaluated on target-val mIoU.
fn run_cell(base: &ExperimentConfig, dataset: &Dataset, mutate: &dyn Fn(&mut ExperimentConfig), seed: u64) -> Result<f64> {
    let mut cfg = base.clone();
    mutate(&mut cfg);
    cfg.master_seed = seed;
    cfg.validate()?;
    let (state, _) = uda::train(&cfg, dataset)?;
    let cm = uda::evaluate(&state.student, dataset, Split::TargetVal)?;
    cm.miou()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Loss-variant ablation rows, mirroring the loss study table.
pub const ABLATION_ROWS: [&str; 6] = [
    "basic",
    "fda",
    "ce_full",
    "ciss-source-only",
    "ciss-target-only",
    "ciss",
];

fn apply_row(cfg: &mut ExperimentConfig, row: &str) {
    use crate::uda::LossVariant::*;
    match row {
        "basic" => cfg.variant = Basic,
        "fda" => cfg.variant = Fda,
        "ce_full" => cfg.variant = CeFull,
        "ciss-source-only" => {
            cfg.variant = Ciss;
            cfg.lambda_t = 0.0;
        }
        "ciss-target-only" => {
            cfg.variant = Ciss;
            cfg.lambda_s = 0.0;
        }
        "ciss" => cfg.variant = Ciss,
        _ => unreachable!("rows come from ABLATION_ROWS"),
    }
}

/// Loss-variant study: rows × seeds cells plus mean/std aggregate rows.
/// CSV schema: `row,seed,miou` with aggregate rows using seed = mean | std.
pub fn ablate_loss_study(cfg: &ExperimentConfig, dataset: &Dataset, seeds: u64) -> Result<String> {
    let cells: Vec<(usize, u64)> = (0..ABLATION_ROWS.len())
        .flat_map(|r| (0..seeds).map(move |s| (r, s)))
        .collect();
    let results: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(r, s)| {
            run_cell(
                cfg,
                dataset,
                &|c| apply_row(c, ABLATION_ROWS[r]),
                cfg.master_seed + s,
            )
        })
        .collect();
    let mut csv = String::from("row,seed,miou\n");
    for (r, row) in ABLATION_ROWS.iter().enumerate() {
        let mut vals = Vec::new();
        for s in 0..seeds {
            let idx = r * seeds as usize + s as usize;
            let v = match &results[idx] {
                Ok(v) => *v,
                Err(e) => return Err(Error::Data(format!("cell {row} seed {s}: {e}"))),
            };
            csv.push_str(&format!("{row},{},{v}\n", cfg.master_seed + s));
            vals.push(v);
        }
        let (mean, std) = mean_std(&vals);
        csv.push_str(&format!("{row},mean,{mean}\n{row},std,{std}\n"));
    }
    Ok(csv)
}

/// Invariance-point study: λ_s grid × {encoder, output} × seeds.
/// CSV schema: `lambda_s,point,seed,miou` plus seed = mean aggregate rows.
pub fn ablate_invariance_study(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    lambdas: &[f64],
    seeds: u64,
) -> Result<String> {
    use crate::uda::InvariancePoint;
    let points = [InvariancePoint::Encoder, InvariancePoint::Output];
    let cells: Vec<(f64, InvariancePoint, u64)> = lambdas
        .iter()
        .flat_map(|&l| {
            points
                .iter()
                .flat_map(move |&p| (0..seeds).map(move |s| (l, p, s)))
        })
        .collect();
    let results: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(l, p, s)| {
            run_cell(
                cfg,
                dataset,
                &move |c: &mut ExperimentConfig| {
                    c.variant = crate::uda::LossVariant::Ciss;
                    c.lambda_s = l;
                    c.lambda_t = l;
                    c.invariance_point = p;
                },
                cfg.master_seed + s,
            )
        })
        .collect();
    let mut csv = String::from("lambda_s,point,seed,miou\n");
    let mut idx = 0;
    for &l in lambdas {
        for &p in &points {
            let mut vals = Vec::new();
            for s in 0..seeds {
                let v = match &results[idx] {
                    Ok(v) => *v,
                    Err(e) => {
                        return Err(Error::Data(format!(
                            "cell lambda={l} point={} seed {s}: {e}",
                            p.name()
                        )))
                    }
                };
                idx += 1;
                csv.push_str(&format!("{l},{},{},{v}\n", p.name(), cfg.master_seed + s));
                vals.push(v);
            }
            let (mean, _) = mean_std(&vals);
            csv.push_str(&format!("{l},{},mean,{mean}\n", p.name()));
        }
    }
    Ok(csv)
}

fn cmd_ablate(
    cfg: &ExperimentConfig,
    study: &str,
    seeds: u64,
    lambdas: &str,
    out: Option<&Path>,
) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let dataset = Dataset::load(&cfg.data_dir)?;
    let csv = match study {
        "loss" => ablate_loss_study(cfg, &dataset, seeds)?,
        "invariance" => {
            let ls = parse_values(lambdas)?;
            if ls.len() < 4 {
                return Err(Error::Config(
                    "invariance study requires at least 4 lambda values".into(),
                ));
            }
            ablate_invariance_study(cfg, &dataset, &ls, seeds)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown study '{other}' (expected loss|invariance)"
            )))
        }
    };
    print!("{csv}");
    if let Some(path) = out {
        fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn parse_values(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value '{v}' in list")))
        })
        .collect()
}

/// Sweep one of lambda_s, lambda_t, beta over a value list.
/// CSV schema: `param,value,seed,miou` plus seed = mean | std aggregates.
pub fn sweep_study(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    param: &str,
    values: &[f64],
    seeds: u64,
) -> Result<String> {
    if !matches!(param, "lambda_s" | "lambda_t" | "beta") {
        return Err(Error::Config(format!(
            "sweep parameter '{param}' not one of lambda_s|lambda_t|beta"
        )));
    }
    let cells: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| (0..seeds).map(move |s| (v, s)))
        .collect();
    let param_owned = param.to_string();
    let results: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(v, s)| {
            let p = param_owned.clone();
            run_cell(
                cfg,
                dataset,
                &move |c: &mut ExperimentConfig| {
                    c.set(&p, &v.to_string()).expect("validated param name");
                },
                cfg.master_seed + s,
            )
        })
        .collect();
    let mut csv = String::from("param,value,seed,miou\n");
    let mut idx = 0;
    for &v in values {
        let mut vals = Vec::new();
        for s in 0..seeds {
            let m = match &results[idx] {
                Ok(m) => *m,
                Err(e) => return Err(Error::Data(format!("cell {param}={v} seed {s}: {e}"))),
            };
            idx += 1;
            csv.push_str(&format!("{param},{v},{},{m}\n", cfg.master_seed + s));
            vals.push(m);
        }
        let (mean, std) = mean_std(&vals);
        csv.push_str(&format!("{param},{v},mean,{mean}\n{param},{v},std,{std}\n"));
    }
    Ok(csv)
}

fn cmd_sweep(
    cfg: &ExperimentConfig,
    param: &str,
    values: &str,
    seeds: u64,
    out: Option<&Path>,
) -> Result<()> {
    if seeds == 0 {
        return Err(Error::Config("--seeds must be >= 1".into()));
    }
    let values = parse_values(values)?;
    if values.is_empty() {
        return Err(Error::Config("--values must be non-empty".into()));
    }
    let dataset = Dataset::load(&cfg.data_dir)?;
    let csv = sweep_study(cfg, &dataset, param, &values, seeds)?;
    print!("{csv}");
    if let Some(path) = out {
        fs::write(path, &csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub const CURVES_HEADER: &str =
    "iter_start,iter_end,loss_total,loss_ce_src,loss_ce_tgt,loss_inv_src,loss_inv_tgt,q_weight";

/// Windowed means of a metrics CSV for plotting.
pub fn export_curves(rows: &[MetricsRow], window: u64) -> Result<String> {
    if window == 0 {
        return Err(Error::Config("window must be >= 1".into()));
    }
    if rows.is_empty() {
        return Err(Error::Data("metrics CSV has no rows".into()));
    }
    let mut csv = String::from(CURVES_HEADER);
    csv.push('\n');
    for chunk in rows.chunks(window as usize) {
        let n = chunk.len() as f64;
        let mean = |f: fn(&MetricsRow) -> f64| chunk.iter().map(f).sum::<f64>() / n;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            chunk.first().unwrap().iter,
            chunk.last().unwrap().iter,
            mean(|r| r.loss_total),
            mean(|r| r.loss_ce_src),
            mean(|r| r.loss_ce_tgt),
            mean(|r| r.loss_inv_src),
            mean(|r| r.loss_inv_tgt),
            mean(|r| r.q_weight),
        ));
    }
    Ok(csv)
}

fn cmd_export_curves(metrics: &Path, out: &Path, window: u64) -> Result<()> {
    let text = fs::read_to_string(metrics).map_err(|e| Error::io(metrics, e))?;
    let rows = metrics_from_csv(&text)?;
    let csv = export_curves(&rows, window)?;
    fs::write(out, &csv).map_err(|e| Error::io(out, e))?;
    println!("wrote {} windows to {}", rows.len().div_ceil(window as usize), out.display());
    Ok(())
}
