use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ctnet::bench::{cost_csv, verify_counts, Block, CostConfig};
use ctnet::data::netpbm::{self, Gray};
use ctnet::data::{self, SceneSpec, Split};
use ctnet::suite::{self, SuiteConfig};
use ctnet::tensor::gradcheck::{GradcheckConfig, GradcheckError};
use ctnet::train::{self, evaluate, load_model, predict_labels, EvalConfig, TrainConfig};
use ctnet::{Error, TensorError};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "ctnet", version, about = "Synthetic segmentation with channel and spatial context modules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes corpus.
    GenData(GenData),
    /// Train a network from a config file and overrides.
    Train(TrainArgs),
    /// Report mIoU and pixel accuracy of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write P5 label masks for PPM images.
    Predict(PredictArgs),
    /// Check every differentiable op and the tiny networks against finite differences.
    Gradcheck(GradcheckArgs),
    /// Emit the closed-form cost CSV for the spatial and non-local blocks.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_val: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Canvas as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (usize, usize),
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key = value file; see the README for the key list.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct ScaleArgs {
    /// Evaluate at the standard scale set and average.
    #[arg(long, conflicts_with = "scales")]
    ms: bool,
    /// Comma-separated scale factors.
    #[arg(long, value_delimiter = ',')]
    scales: Vec<f64>,
    /// Also average over horizontal flips.
    #[arg(long)]
    flip: bool,
}

impl ScaleArgs {
    fn resolve(&self) -> anyhow::Result<EvalConfig> {
        let mut e = if self.ms {
            EvalConfig::multi_scale()
        } else if !self.scales.is_empty() {
            EvalConfig {
                scales: self.scales.clone(),
                flip: false,
            }
        } else {
            EvalConfig::default()
        };
        e.flip = self.flip;
        e.validate()?;
        Ok(e)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    split: Split,
    #[command(flatten)]
    scales: ScaleArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PPM images.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    scales: ScaleArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random seeds per op and block.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Only cases whose name contains this text.
    #[arg(long)]
    only: Option<String>,
    /// Skip the full-network checks.
    #[arg(long)]
    no_nets: bool,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Block size as C,H,W,N,r. Repeatable; defaults to a scaling sweep.
    #[arg(long = "config", value_name = "C,H,W,N,R", value_parser = parse_cost)]
    configs: Vec<CostConfig>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// First check the closed forms against an instrumented run at C=8, H=W=4, N=3, r=2.
    #[arg(long)]
    verify: bool,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((dim(h)?, dim(w)?))
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => Err(format!("expected train or val, got {s:?}")),
    }
}

fn parse_cost(s: &str) -> Result<CostConfig, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [c, h, w, n, r] => Ok(CostConfig::new(c, h, w, n, r)),
        _ => Err(format!("expected C,H,W,N,r, got {s:?}")),
    }
}

/// Resolved settings go to stderr so stdout carries only results.
fn print_config(command: &str, pairs: &[(&str, String)]) {
    let mut text = format!("# {command}\n");
    for (k, v) in pairs {
        let _ = writeln!(text, "{k} = {v}");
    }
    eprint!("{text}");
}

fn gen_data(a: &GenData) -> anyhow::Result<()> {
    let (height, width) = a.size;
    let spec = SceneSpec::new(a.classes, width, height, a.seed);
    print_config(
        "gen-data",
        &[
            ("out", a.out.display().to_string()),
            ("n_train", a.n_train.to_string()),
            ("n_val", a.n_val.to_string()),
            ("force", a.force.to_string()),
            ("spec", serde_json::to_string(&spec)?),
        ],
    );
    let m = data::write_dataset(&a.out, &spec, a.n_train, a.n_val, a.force)?;
    println!(
        "wrote {} train and {} val samples ({}x{}, {} classes) to {}",
        m.n_train,
        m.n_val,
        height,
        width,
        spec.classes,
        a.out.display()
    );
    let fmt = |f: &[f64]| f.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ");
    println!("train class frequency: {}", fmt(&m.train_class_frequency));
    println!("val class frequency:   {}", fmt(&m.val_class_frequency));
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for pair in &a.set {
        cfg.set_pair(pair)?;
    }
    cfg.validate()?;
    eprint!("# train\n{}", cfg.to_text());
    let report = train::train(&cfg)?;
    println!(
        "best val mIoU {:.4} at step {} ({} steps); checkpoints in {}",
        report.best_miou,
        report.best_step,
        cfg.iters,
        cfg.out.display()
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> anyhow::Result<()> {
    let e = a.scales.resolve()?;
    print_config(
        "eval",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("data", a.data.display().to_string()),
            ("split", a.split.dir().to_string()),
            ("scales", format!("{:?}", e.scales)),
            ("flip", e.flip.to_string()),
        ],
    );
    let net = load_model(&a.checkpoint)?;
    let ds = data::load_split(&a.data, a.split)?;
    let m = evaluate(&net, &ds, &e)?;
    println!("mIoU {:.6} PixAcc {:.6}", m.miou, m.pix_acc);
    Ok(())
}

fn predict_cmd(a: &PredictArgs) -> anyhow::Result<()> {
    let e = a.scales.resolve()?;
    print_config(
        "predict",
        &[
            ("checkpoint", a.checkpoint.display().to_string()),
            ("inputs", a.input.len().to_string()),
            ("out", a.out.display().to_string()),
            ("scales", format!("{:?}", e.scales)),
            ("flip", e.flip.to_string()),
        ],
    );
    let net = load_model(&a.checkpoint)?;
    // read everything first so a bad input leaves no partial output
    let images = a
        .input
        .iter()
        .map(|p| Ok((p, netpbm::read_ppm(p)?)))
        .collect::<ctnet::Result<Vec<_>>>()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (path, img) in images {
        let [_, height, width]: [usize; 3] = img.shape().try_into().expect("ppm decodes to [3, H, W]");
        let batch = img.reshaped(&[1, 3, height, width])?;
        let labels = predict_labels(&net, &batch, &e)?.remove(0);
        let dest = a.out.join(mask_name(path));
        netpbm::write_pgm(
            &dest,
            &Gray {
                width,
                height,
                data: labels,
            },
        )?;
        println!("{} -> {}", path.display(), dest.display());
    }
    Ok(())
}

fn mask_name(input: &Path) -> PathBuf {
    let stem = input.file_stem().map_or_else(|| "mask".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from(format!("{stem}.pgm"))
}

/// Some checks exceeded tolerance; already reported line by line.
#[derive(Debug, thiserror::Error)]
#[error("{failed} of {total} gradient checks failed")]
struct GradcheckFailed {
    failed: usize,
    total: usize,
}

fn gradcheck_cmd(a: &GradcheckArgs) -> anyhow::Result<()> {
    let cfg = SuiteConfig {
        seeds: a.seeds,
        include_nets: !a.no_nets,
        filter: a.only.clone(),
        check: GradcheckConfig {
            h: a.h,
            tol: a.tol,
            ..GradcheckConfig::default()
        },
    };
    print_config(
        "gradcheck",
        &[
            ("seeds", cfg.seeds.to_string()),
            ("nets", cfg.include_nets.to_string()),
            ("only", cfg.filter.clone().unwrap_or_default()),
            ("h", cfg.check.h.to_string()),
            ("tol", cfg.check.tol.to_string()),
            ("floor", cfg.check.floor.to_string()),
            ("refine", cfg.check.refine.to_string()),
        ],
    );
    let start = std::time::Instant::now();
    let reports = suite::run(&cfg, |r| println!("{}", r.json_line()))?;
    if reports.is_empty() {
        bail!("no gradient check matches {:?}", cfg.filter.unwrap_or_default());
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    eprintln!(
        "{} of {} checks passed in {:.1}s",
        reports.len() - failed,
        reports.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(GradcheckFailed {
            failed,
            total: reports.len(),
        }
        .into());
    }
    Ok(())
}

fn default_sweep() -> Vec<CostConfig> {
    let mut v = vec![CostConfig::new(64, 64, 64, 21, 4), CostConfig::new(64, 64, 64, 42, 4)];
    v.extend([16, 32, 128].map(|s| CostConfig::new(64, s, s, 21, 4)));
    v
}

fn bench_cmd(a: &BenchArgs) -> anyhow::Result<()> {
    let configs = if a.configs.is_empty() { default_sweep() } else { a.configs.clone() };
    let list = configs
        .iter()
        .map(|c| format!("{},{},{},{},{}", c.c, c.h, c.w, c.n, c.r))
        .collect::<Vec<_>>()
        .join(" ");
    print_config(
        "bench",
        &[
            ("configs", list),
            ("out", a.out.as_ref().map_or("-".into(), |p| p.display().to_string())),
            ("verify", a.verify.to_string()),
        ],
    );
    if a.verify {
        for block in [Block::Scm, Block::NonLocal] {
            let check = verify_counts(block, CostConfig::new(8, 4, 4, 3, 2))?;
            eprintln!("{check}");
        }
    }
    let csv = cost_csv(&configs)?;
    match &a.out {
        Some(p) => std::fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// 3 for numerical failures, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        let numerical = match cause.downcast_ref::<Error>() {
            Some(Error::Numerical(_) | Error::Tensor(TensorError::NonFinite { .. })) => true,
            Some(_) => false,
            None => {
                cause.is::<GradcheckFailed>()
                    || matches!(
                        cause.downcast_ref::<GradcheckError>(),
                        Some(GradcheckError::NonFinite { .. } | GradcheckError::Tensor { source: TensorError::NonFinite { .. }, .. })
                    )
            }
        };
        if numerical {
            return EXIT_NUMERICAL;
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
