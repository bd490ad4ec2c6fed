//! The `shuffle-former` command line: stats, reach, train-toy, ablate, infer.
//!
//! Exit codes: 0 success, 1 invalid input, 2 failed internal check.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{count_flops, reachability_probe, symbolic_for_stack, ProbeConfig, StackSpec};
use crate::error::{Error, Result};
use crate::model::{build_variant, Checkpoint, ModelConfig, NwcPosition};
use crate::train::{toy_setup, train, SyntheticSpec, TrainConfig, TrainReport};
use crate::windowing::ShuffleMode;

pub const SEED_ENV: &str = "SHUFFLE_FORMER_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "shuffle-former",
    version,
    about = "Shuffle Transformer analysis and toy training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and FLOP ledger for one variant and resolution.
    Stats(StatsArgs),
    /// Receptive-field reachability of a block stack, by probe and by set algebra.
    Reach(ReachArgs),
    /// Overfit a reduced model on a synthetic set and save a checkpoint.
    TrainToy(TrainArgs),
    /// Params/FLOPs over a grid of shuffle modes and NWC positions.
    Ablate(AblateArgs),
    /// Run a checkpoint on a tensor file and write the logits.
    Infer(InferArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Built-in variant: T, S or B.
    #[arg(long, default_value = "T", conflicts_with = "config")]
    pub variant: String,
    /// Model config file (`key = value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the shuffle mode (none, long, short, random).
    #[arg(long)]
    pub shuffle: Option<ShuffleMode>,
    /// Override the NWC position (A, B, C, none).
    #[arg(long)]
    pub nwc: Option<NwcPosition>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input resolution, `224` or `224x320`.
    #[arg(long = "res", default_value = "224", value_parser = parse_resolution)]
    pub resolution: (usize, usize),
    /// Directory for the CSV and text reports.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReachArgs {
    /// Comma-separated blocks as `mode` or `mode/position`, e.g. `none,long/B`.
    #[arg(long, default_value = "none,long")]
    pub blocks: String,
    /// Grid size, `16` or `8x12`.
    #[arg(long, default_value = "16", value_parser = parse_resolution)]
    pub grid: (usize, usize),
    #[arg(long, default_value_t = 2)]
    pub window: usize,
    /// Output position `row,col`; defaults to the grid center.
    #[arg(long, value_parser = parse_position)]
    pub probe: Option<(usize, usize)>,
    /// Seed for random shuffles.
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Weight seeds whose reachable sets are unioned.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub weight_seeds: Vec<u64>,
    #[arg(long, default_value_t = crate::analysis::reach::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = crate::analysis::reach::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model config file; the reduced toy config when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub shuffle: Option<ShuffleMode>,
    #[arg(long)]
    pub nwc: Option<NwcPosition>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    /// Stop once eval accuracy reaches this value.
    #[arg(long, default_value_t = 0.95)]
    pub target: f64,
    /// Run all steps regardless of accuracy.
    #[arg(long)]
    pub no_early_stop: bool,
    #[arg(long, default_value_t = 10)]
    pub eval_every: usize,
    /// Directory for `metrics.json` and `model.ckpt`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, default_value = "T", conflicts_with = "config")]
    pub variant: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "res", default_value = "224", value_parser = parse_resolution)]
    pub resolution: (usize, usize),
    #[arg(long, value_delimiter = ',', default_value = "none,long,short,random")]
    pub shuffle: Vec<ShuffleMode>,
    #[arg(long, value_delimiter = ',', default_value = "none,A,B,C")]
    pub nwc: Vec<NwcPosition>,
    /// Also train the toy model of each cell for this many steps (0: skip).
    #[arg(long, default_value_t = 0)]
    pub train_steps: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `ablation.csv` and `ablation.txt`.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Tensor file holding `(n, c, h, w)` or `(c, h, w)` images.
    #[arg(long)]
    pub input: PathBuf,
    /// Tensor file receiving the `(n, classes)` logits.
    #[arg(long)]
    pub output: PathBuf,
}

/// Everything that determined a run; embedded in each artifact.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub subcommand: String,
    pub variant: Option<String>,
    pub config_file: Option<PathBuf>,
    pub shuffle: Option<ShuffleMode>,
    pub nwc: Option<NwcPosition>,
    pub seed: Option<u64>,
    pub resolution: Option<(usize, usize)>,
    pub paths: BTreeMap<String, PathBuf>,
    pub version: &'static str,
}

impl RunConfig {
    fn new(subcommand: &str) -> Self {
        RunConfig {
            subcommand: subcommand.into(),
            variant: None,
            config_file: None,
            shuffle: None,
            nwc: None,
            seed: None,
            resolution: None,
            paths: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION"),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("run config serializes")
    }
}

pub fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| format!("expected a positive size, got {t:?}"))
    };
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|v| (v, v)),
    }
}

pub fn parse_position(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(',')
        .ok_or_else(|| format!("expected row,col, got {s:?}"))?;
    let p = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    Ok((p(r)?, p(c)?))
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelConfig::parse(&text)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

impl ModelArgs {
    fn resolve(&self, run: &mut RunConfig) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                run.config_file = Some(path.clone());
                read_config(path)?
            }
            None => build_variant(&self.variant)?,
        };
        if let Some(s) = self.shuffle {
            cfg.shuffle = s;
        }
        if let Some(n) = self.nwc {
            cfg.nwc = n;
        }
        cfg.validate()?;
        run.variant = Some(cfg.variant.clone());
        run.shuffle = Some(cfg.shuffle);
        run.nwc = Some(cfg.nwc);
        Ok(cfg)
    }
}

pub fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let mut run = RunConfig::new("stats");
    let cfg = args.model.resolve(&mut run)?;
    let (h, w) = args.resolution;
    run.resolution = Some((h, w));
    let stem = format!("stats_{}_{}x{}", cfg.variant, h, w);
    let csv_path = args.out.join(format!("{stem}.csv"));
    let txt_path = args.out.join(format!("{stem}.txt"));
    run.paths.insert("csv".into(), csv_path.clone());
    run.paths.insert("text".into(), txt_path.clone());

    let report = count_flops(&cfg, h, w)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv, &[format!("run: {}", run.to_json())])?;
    write(&csv_path, csv)?;
    let text = format!("run: {}\n{}", run.to_json(), report.to_text());
    write(&txt_path, &text)?;
    println!(
        "{} @ {h}x{w}: params {:.2}M, flops {:.2}G",
        cfg.variant,
        report.total_params() as f64 / 1e6,
        report.total_flops() as f64 / 1e9
    );
    println!("wrote {} and {}", csv_path.display(), txt_path.display());
    Ok(())
}

#[derive(Serialize)]
struct ReachReport<'a> {
    run: &'a RunConfig,
    stack: &'a StackSpec,
    probe_config: &'a ProbeConfig,
    agree: bool,
    fd: &'a crate::analysis::ReachabilitySet,
    symbolic: &'a crate::analysis::ReachabilitySet,
}

pub fn cmd_reach(args: &ReachArgs) -> Result<()> {
    let mut run = RunConfig::new("reach");
    run.seed = Some(args.seed);
    run.resolution = Some(args.grid);
    if let Some(out) = &args.out {
        run.paths.insert("json".into(), out.clone());
    }
    let (h, w) = args.grid;
    let mut stack = StackSpec::new(h, args.window, StackSpec::parse_blocks(&args.blocks)?);
    stack.width = w;
    stack.shuffle_seed = args.seed;
    let probe = args.probe.unwrap_or((h / 2, w / 2));
    if probe.0 >= h || probe.1 >= w {
        return Err(Error::InvalidConfig(format!(
            "probe {probe:?} outside the {h}x{w} grid"
        )));
    }
    let probe_cfg = ProbeConfig {
        epsilon: args.epsilon,
        threshold: args.threshold,
        seeds: args.weight_seeds.clone(),
        ..ProbeConfig::default()
    };
    let fd = reachability_probe(&stack, probe, &probe_cfg)?;
    let symbolic = symbolic_for_stack(&stack, probe)?;
    let agree = fd.same_members(&symbolic);
    let report = ReachReport {
        run: &run,
        stack: &stack,
        probe_config: &probe_cfg,
        agree,
        fd: &fd,
        symbolic: &symbolic,
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => {
            write(path, &json)?;
            println!("{}", fd.render());
            println!(
                "{} of {} positions reach {probe:?}; probe and set algebra {}",
                fd.len(),
                h * w,
                if agree { "agree" } else { "DISAGREE" }
            );
        }
        None => println!("{json}"),
    }
    if !agree {
        return Err(Error::CheckFailed(format!(
            "finite-difference probe found {} positions, set algebra {}",
            fd.len(),
            symbolic.len()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics<'a> {
    run: &'a RunConfig,
    model_config: &'a ModelConfig,
    dataset: &'a SyntheticSpec,
    train: &'a TrainConfig,
    report: &'a TrainReport,
}

fn toy_config(path: Option<&Path>, shuffle: Option<ShuffleMode>, nwc: Option<NwcPosition>) -> Result<ModelConfig> {
    let mut cfg = match path {
        Some(p) => read_config(p)?,
        None => ModelConfig::toy(),
    };
    if let Some(s) = shuffle {
        cfg.shuffle = s;
    }
    if let Some(n) = nwc {
        cfg.nwc = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_train_toy(args: &TrainArgs) -> Result<()> {
    let mut run = RunConfig::new("train-toy");
    run.config_file = args.config.clone();
    run.seed = Some(args.seed);
    let cfg = toy_config(args.config.as_deref(), args.shuffle, args.nwc)?;
    run.variant = Some(cfg.variant.clone());
    run.shuffle = Some(cfg.shuffle);
    run.nwc = Some(cfg.nwc);
    run.resolution = Some((cfg.resolution, cfg.resolution));
    let metrics_path = args.out.join("metrics.json");
    let ckpt_path = args.out.join("model.ckpt");
    run.paths.insert("metrics".into(), metrics_path.clone());
    run.paths.insert("checkpoint".into(), ckpt_path.clone());

    let spec = SyntheticSpec {
        samples: args.samples,
        classes: cfg.num_classes,
        channels: cfg.in_channels,
        size: cfg.resolution,
        noise: args.noise,
    };
    let train_cfg = TrainConfig {
        steps: args.steps,
        lr: args.lr,
        weight_decay: args.weight_decay,
        target_accuracy: (!args.no_early_stop).then_some(args.target),
        eval_every: args.eval_every,
    };
    let (mut model, data) = toy_setup::<f32>(&cfg, &spec, args.seed)?;
    let report = train(&mut model, &data, &train_cfg, |s| {
        if let Some(acc) = s.eval_accuracy {
            println!("step {:>4}  loss {:.5}  accuracy {:.3}", s.step, s.loss, acc);
        }
    })?;
    let metrics = TrainMetrics {
        run: &run,
        model_config: &cfg,
        dataset: &spec,
        train: &train_cfg,
        report: &report,
    };
    write(&metrics_path, serde_json::to_string_pretty(&metrics)?)?;
    let mut ck = Checkpoint::from_model(&model);
    writeln!(ck.header, "# run: {}", run.to_json()).expect("string write");
    if let Some(dir) = ckpt_path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ck.save(&ckpt_path)?;
    println!(
        "final train accuracy {:.3} after {} steps; wrote {} and {}",
        report.final_accuracy,
        report.steps_run,
        metrics_path.display(),
        ckpt_path.display()
    );
    Ok(())
}

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub shuffle: ShuffleMode,
    pub nwc: NwcPosition,
    pub params: u64,
    pub flops: u64,
    pub toy_accuracy: Option<f64>,
    pub toy_steps: Option<usize>,
}

/// Params and FLOPs for every `shuffle x nwc` cell, in grid order.
pub fn ablation_grid(
    base: &ModelConfig,
    resolution: (usize, usize),
    shuffles: &[ShuffleMode],
    nwcs: &[NwcPosition],
) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for &shuffle in shuffles {
        for &nwc in nwcs {
            let cfg = ModelConfig {
                shuffle,
                nwc,
                ..base.clone()
            };
            let report = count_flops(&cfg, resolution.0, resolution.1)?;
            cells.push(AblationCell {
                shuffle,
                nwc,
                params: report.total_params(),
                flops: report.total_flops(),
                toy_accuracy: None,
                toy_steps: None,
            });
        }
    }
    Ok(cells)
}

pub fn ablation_table(cells: &[AblationCell]) -> String {
    let mut s = format!(
        "{:<8} {:<5} {:>14} {:>9} {:>16} {:>8} {:>9}\n",
        "shuffle", "nwc", "params", "params_M", "flops", "GFLOPs", "toy_acc"
    );
    for c in cells {
        let acc = c.toy_accuracy.map_or("-".to_string(), |a| format!("{a:.3}"));
        writeln!(
            s,
            "{:<8} {:<5} {:>14} {:>9.2} {:>16} {:>8.2} {:>9}",
            c.shuffle.as_str(),
            c.nwc.as_str(),
            c.params,
            c.params as f64 / 1e6,
            c.flops,
            c.flops as f64 / 1e9,
            acc
        )
        .expect("string write");
    }
    s
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut run = RunConfig::new("ablate");
    let base = match &args.config {
        Some(p) => {
            run.config_file = Some(p.clone());
            read_config(p)?
        }
        None => build_variant(&args.variant)?,
    };
    run.variant = Some(base.variant.clone());
    run.resolution = Some(args.resolution);
    run.seed = Some(args.seed);
    let csv_path = args.out.join("ablation.csv");
    let txt_path = args.out.join("ablation.txt");
    run.paths.insert("csv".into(), csv_path.clone());
    run.paths.insert("text".into(), txt_path.clone());

    let mut cells = ablation_grid(&base, args.resolution, &args.shuffle, &args.nwc)?;
    if args.train_steps > 0 {
        for cell in &mut cells {
            let cfg = toy_config(None, Some(cell.shuffle), Some(cell.nwc))?;
            let spec = SyntheticSpec {
                classes: cfg.num_classes,
                size: cfg.resolution,
                ..SyntheticSpec::default()
            };
            let (mut model, data) = toy_setup::<f32>(&cfg, &spec, args.seed)?;
            let train_cfg = TrainConfig {
                steps: args.train_steps,
                target_accuracy: None,
                eval_every: args.train_steps,
                ..TrainConfig::default()
            };
            let report = train(&mut model, &data, &train_cfg, |_| {})?;
            cell.toy_accuracy = Some(report.final_accuracy);
            cell.toy_steps = Some(report.steps_run);
        }
    }

    let mut header = format!(
        "# run: {}\n# convention: {}\n",
        run.to_json(),
        crate::analysis::CONVENTION
    );
    header.push_str("# accuracy columns of the original ablation tables are not reproduced; toy_accuracy is a synthetic overfit run\n");
    let mut w = csv::Writer::from_writer(header.into_bytes());
    w.write_record(["shuffle", "nwc", "params", "flops", "toy_accuracy", "toy_steps"])?;
    for c in &cells {
        w.write_record([
            c.shuffle.as_str().to_string(),
            c.nwc.as_str().to_string(),
            c.params.to_string(),
            c.flops.to_string(),
            c.toy_accuracy.map_or(String::new(), |a| a.to_string()),
            c.toy_steps.map_or(String::new(), |s| s.to_string()),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(&csv_path, e.into_error()))?;
    write(&csv_path, bytes)?;
    let res = args.resolution;
    let table = ablation_table(&cells);
    write(
        &txt_path,
        format!(
            "run: {}\n{} @ {}x{}\n{table}",
            run.to_json(),
            base.variant,
            res.0,
            res.1
        ),
    )?;
    print!("{table}");
    println!("wrote {} and {}", csv_path.display(), txt_path.display());
    Ok(())
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let mut run = RunConfig::new("infer");
    run.paths.insert("checkpoint".into(), args.checkpoint.clone());
    run.paths.insert("input".into(), args.input.clone());
    run.paths.insert("output".into(), args.output.clone());
    let ck = Checkpoint::load(&args.checkpoint)?;
    let model = ck.to_model::<f32>()?;
    let cfg = &model.cfg;
    run.variant = Some(cfg.variant.clone());
    run.shuffle = Some(cfg.shuffle);
    run.nwc = Some(cfg.nwc);

    let (_, input) = crate::model::read_tensor_file(&args.input)?;
    let input = match input.shape().len() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(input.shape());
            input.reshape(shape)?
        }
        4 => input,
        _ => {
            return Err(Error::InvalidShape(format!(
                "input must be (n, c, h, w) or (c, h, w), got {:?}",
                input.shape()
            )))
        }
    };
    if input.shape()[1] != cfg.in_channels {
        return Err(Error::InvalidShape(format!(
            "input has {} channels, the checkpoint expects {}",
            input.shape()[1],
            cfg.in_channels
        )));
    }
    run.resolution = Some((input.shape()[2], input.shape()[3]));
    let logits = model.predict(&input)?;
    write_tensor_with_run(&args.output, "logits", &logits, &run)?;
    println!("wrote logits {:?} to {}", logits.shape(), args.output.display());
    Ok(())
}

fn write_tensor_with_run(path: &Path, name: &str, t: &crate::Tensor<f32>, run: &RunConfig) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Checkpoint::new(
        format!("# run: {}\n", run.to_json()),
        vec![(name.to_string(), t.clone())],
    )
    .save(path)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Stats(a) => cmd_stats(a),
        Command::Reach(a) => cmd_reach(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Infer(a) => cmd_infer(a),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::CheckFailed(_)
        | Error::Diverged { .. }
        | Error::NonFinite { .. }
        | Error::DegenerateWeights(_)
        | Error::InvalidCall(_) => 2,
        _ => 1,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
