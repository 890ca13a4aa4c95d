use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use medvt_core::ablation::{run_ablation, AblationOptions};
use medvt_core::attention::ScoreScale;
use medvt_core::autodiff::ParamStore;
use medvt_core::checks::{self, SuiteReport};
use medvt_core::metrics::{evaluate, VideoEval, BOUNDARY_RADIUS};
use medvt_core::model::{train, Config, MedVt, ModelConfig, Sample, Stage};
use medvt_core::pipeline::{attention_maps, evaluate_scenes, multiscale_infer, DEFAULT_SCALES};
use medvt_core::synthclip::{
    load_dataset, make_dataset, read_pgm, write_pgm, GenOptions, LoadedClip, Split, TextureMode,
};
use medvt_core::tensor::{write_mvt1, DType};

const CONFIG_FILE: &str = "config.txt";
const PARAMS_DIR: &str = "params";
const LOG_FILE: &str = "train_log.csv";

#[derive(Parser, Debug)]
#[command(
    name = "medvt",
    version,
    about = "Multiscale encoder-decoder video transformer"
)]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true, env = "MEDVT_CONFIG")]
    config: Option<PathBuf>,

    /// Config override, applied after the file (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,

    /// Full-size model dimensions at a reduced input, for shape checks.
    #[arg(long, global = true)]
    paper_dims: bool,

    /// Scale attention scores by 1/sqrt(d_head) instead of 1/sqrt(d).
    #[arg(long, global = true)]
    scale_by_head_dim: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic clip dataset.
    Gen(GenArgs),
    /// Train from scratch on the training split of a dataset.
    Train(TrainArgs),
    /// Predict masks for a dataset split.
    Infer(InferArgs),
    /// Score predictions or a checkpoint against ground truth.
    Eval(EvalArgs),
    /// Finite-difference checks of every differentiable op and the micro model.
    Gradcheck,
    /// Label-propagation masking, attention invariants and shape contracts.
    Propcheck,
    /// Scale and propagation ablations on synthetic clips.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Total number of clips.
    #[arg(long, default_value_t = 12)]
    n: usize,
    /// Validation clips out of `n` (default: a third).
    #[arg(long)]
    val: Option<usize>,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Frame size as HxW (default: the model input).
    #[arg(long)]
    size: Option<String>,
    #[arg(long, default_value = "camouflage")]
    texture: TextureMode,
    #[arg(long, default_value_t = 0)]
    distractors: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SplitArg {
    /// Dataset split: train, val or all.
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    split: SplitArg,
    /// Comma-separated scale factors, or `paper` for 0.7..1.2.
    #[arg(long, default_value = "1.0")]
    scales: String,
    /// Also write the object attention maps per clip.
    #[arg(long)]
    dump_attention: bool,
}

#[derive(Args, Debug)]
#[group(id = "source", required = true, multiple = false, args = ["checkpoint", "pred"])]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run inference with this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Read masks written by `infer`.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[command(flatten)]
    split: SplitArg,
    #[arg(long, default_value = "1.0")]
    scales: String,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Training seeds, comma separated.
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long, default_value_t = 1)]
    data_seed: u64,
    #[arg(long, default_value_t = 8)]
    n_train: usize,
    #[arg(long, default_value_t = 4)]
    n_val: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Check(String),
    Runtime(String),
}

impl From<medvt_core::Error> for Failure {
    fn from(e: medvt_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn resolve_config(cli: &Cli) -> CliResult<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => Config::preset("desk").map_err(usage)?,
    };
    if cli.paper_dims {
        cfg.model = checks::paper_trace_config();
    }
    if cli.scale_by_head_dim {
        cfg.model.score_scale = ScoreScale::HeadDim;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        if k.trim() == "preset" {
            cfg.model = ModelConfig::preset(v.trim()).map_err(usage)?;
        } else {
            cfg.set(k, v).map_err(usage)?;
        }
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn parse_pair(s: &str) -> CliResult<[usize; 2]> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| usage(format!("expected HxW, got `{s}`")))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| usage(format!("expected HxW, got `{s}`")))
    };
    Ok([p(a)?, p(b)?])
}

fn parse_scales(s: &str) -> CliResult<Vec<f64>> {
    if s == "paper" {
        return Ok(DEFAULT_SCALES.to_vec());
    }
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| usage(format!("bad scale `{x}` in `{s}`")))
        })
        .collect()
}

fn parse_seeds(s: &str) -> CliResult<Vec<u64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<u64>()
                .map_err(|_| usage(format!("bad seed `{x}` in `{s}`")))
        })
        .collect()
}

fn select(clips: Vec<LoadedClip>, split: &str) -> CliResult<Vec<LoadedClip>> {
    let want = match split {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "all" => None,
        other => {
            return Err(usage(format!(
                "--split must be train, val or all, got `{other}`"
            )))
        }
    };
    let out: Vec<_> = clips
        .into_iter()
        .filter(|c| want.is_none_or(|w| c.entry.split == w))
        .collect();
    if out.is_empty() {
        return Err(Failure::Runtime(format!("no clips in split `{split}`")));
    }
    Ok(out)
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> CliResult<()> {
    let out = if json {
        serde_json::to_string_pretty(value)? + "\n"
    } else {
        text()
    };
    match std::io::stdout().lock().write_all(out.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_checkpoint(dir: &Path) -> CliResult<(Config, MedVt, ParamStore)> {
    let cfg = Config::load(&dir.join(CONFIG_FILE))?;
    let model = MedVt::new(cfg.model.clone())?;
    let store = ParamStore::load(dir.join(PARAMS_DIR))?;
    Ok((cfg, model, store))
}

fn cmd_gen(cli: &Cli, cfg: &Config, a: &GenArgs) -> CliResult<()> {
    let val = a.val.unwrap_or(a.n / 3);
    if val > a.n {
        return Err(usage(format!("--val {val} exceeds --n {}", a.n)));
    }
    let [height, width] = match &a.size {
        Some(s) => parse_pair(s)?,
        None => cfg.model.input,
    };
    let opts = GenOptions {
        frames: a.frames,
        height,
        width,
        texture: a.texture,
        distractors: a.distractors,
        ..GenOptions::default()
    };
    let seed = cli.seed.unwrap_or(0);
    let manifest = make_dataset(&a.out, a.n - val, val, seed, &opts)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        out: &'a Path,
        seed: u64,
        train: usize,
        val: usize,
        frames: usize,
        height: usize,
        width: usize,
    }
    let s = Summary {
        out: &a.out,
        seed,
        train: a.n - val,
        val,
        frames: a.frames,
        height,
        width,
    };
    emit(cli.json, &s, || {
        format!(
            "wrote {} clips ({} train, {} val) of {}x{}x{} to {}\n",
            manifest.clips.len(),
            s.train,
            s.val,
            a.frames,
            height,
            width,
            a.out.display()
        )
    })
}

fn cmd_train(cli: &Cli, cfg: &Config, a: &TrainArgs) -> CliResult<()> {
    let (_, clips) = load_dataset(&a.data)?;
    let data: Vec<Sample> = select(clips, "train")?
        .iter()
        .map(|c| c.scene.to_sample())
        .collect();
    let model = MedVt::new(cfg.model.clone())?;
    let mut store = model.init(cfg.train.seed)?;
    let outcome = train(&model, &mut store, &data, cfg)?;
    fs::create_dir_all(&a.out)?;
    store.save(a.out.join(PARAMS_DIR))?;
    fs::write(a.out.join(CONFIG_FILE), cfg.to_text())?;
    fs::write(a.out.join(LOG_FILE), outcome.log.to_csv())?;

    #[derive(Serialize)]
    struct Summary {
        clips: usize,
        params: usize,
        stage1_iters: usize,
        stage2_iters: usize,
        stage1_first: Option<f64>,
        stage1_last: Option<f64>,
        stage2_last: Option<f64>,
    }
    let s1 = outcome.log.stage_losses(Stage::One);
    let s2 = outcome.log.stage_losses(Stage::Two);
    let s = Summary {
        clips: data.len(),
        params: store.num_values(),
        stage1_iters: s1.len(),
        stage2_iters: s2.len(),
        stage1_first: s1.first().copied(),
        stage1_last: s1.last().copied(),
        stage2_last: s2.last().copied(),
    };
    let fmt = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.4}"));
    emit(cli.json, &s, || {
        format!(
            "trained on {} clips, {} parameters\nstage 1: {} iters, loss {} -> {}\nstage 2: {} iters, final loss {}\ncheckpoint: {}\n",
            s.clips,
            s.params,
            s.stage1_iters,
            fmt(s.stage1_first),
            fmt(s.stage1_last),
            s.stage2_iters,
            fmt(s.stage2_last),
            a.out.display()
        )
    })
}

fn cmd_infer(cli: &Cli, a: &InferArgs) -> CliResult<()> {
    let scales = parse_scales(&a.scales)?;
    let (_, model, store) = load_checkpoint(&a.checkpoint)?;
    let (_, clips) = load_dataset(&a.data)?;
    let clips = select(clips, &a.split.split)?;
    fs::create_dir_all(a.out.join("masks"))?;
    if a.dump_attention {
        fs::create_dir_all(a.out.join("attention"))?;
    }
    #[derive(Serialize)]
    struct ClipSummary {
        id: String,
        frames: usize,
        foreground: f64,
    }
    let mut rows = Vec::with_capacity(clips.len());
    for c in &clips {
        let pred = multiscale_infer(&model, &store, &c.scene.clip, &scales)?;
        let (len, h, w) = (
            c.scene.clip.dim(0),
            c.scene.clip.dim(1),
            c.scene.clip.dim(2),
        );
        for f in 0..len {
            write_pgm(
                &a.out.join("masks").join(format!("{}_{f}.pgm", c.entry.id)),
                w,
                h,
                pred.frame(f),
            )?;
        }
        if a.dump_attention {
            let maps = attention_maps(&model, &store, &c.scene.clip)?;
            write_mvt1(
                a.out.join("attention").join(format!("{}.mvt1", c.entry.id)),
                &maps,
                DType::F32,
            )?;
        }
        let fg = pred.labels.iter().filter(|&&l| l != 0).count() as f64 / pred.labels.len() as f64;
        rows.push(ClipSummary {
            id: c.entry.id.clone(),
            frames: len,
            foreground: fg,
        });
    }
    fs::write(
        a.out.join("predictions.json"),
        serde_json::to_string_pretty(&rows)? + "\n",
    )?;
    emit(cli.json, &rows, || {
        let mut s = format!("{:<6} {:>6} {:>11}\n", "clip", "frames", "foreground");
        for r in &rows {
            s.push_str(&format!(
                "{:<6} {:>6} {:>11.4}\n",
                r.id, r.frames, r.foreground
            ));
        }
        s.push_str(&format!(
            "masks written to {}\n",
            a.out.join("masks").display()
        ));
        s
    })
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> CliResult<()> {
    let (_, clips) = load_dataset(&a.data)?;
    let clips = select(clips, &a.split.split)?;
    let cats: Vec<String> = clips.iter().map(|c| c.entry.category.to_string()).collect();
    let report = if let Some(ckpt) = &a.checkpoint {
        let scales = parse_scales(&a.scales)?;
        let (_, model, store) = load_checkpoint(ckpt)?;
        let scenes: Vec<_> = cats
            .iter()
            .map(String::as_str)
            .zip(clips.iter().map(|c| &c.scene))
            .collect();
        evaluate_scenes(&model, &store, &scenes, &scales)?
    } else {
        let dir = a.pred.as_ref().expect("clap enforces one source");
        let mut preds = Vec::with_capacity(clips.len());
        for c in &clips {
            let (len, h, w) = (
                c.scene.clip.dim(0),
                c.scene.clip.dim(1),
                c.scene.clip.dim(2),
            );
            let mut labels = Vec::with_capacity(len * h * w);
            for f in 0..len {
                let (pw, ph, px) =
                    read_pgm(&dir.join("masks").join(format!("{}_{f}.pgm", c.entry.id)))?;
                if (ph, pw) != (h, w) {
                    return Err(Failure::Runtime(format!(
                        "prediction {}_{f} is {pw}x{ph}, expected {w}x{h}",
                        c.entry.id
                    )));
                }
                labels.extend(px);
            }
            preds.push(labels);
        }
        let videos: Vec<VideoEval> = clips
            .iter()
            .zip(&preds)
            .zip(&cats)
            .map(|((c, p), cat)| VideoEval {
                category: cat,
                height: c.scene.clip.dim(1),
                width: c.scene.clip.dim(2),
                pred: p,
                gt: &c.scene.masks,
                boxes: &c.scene.boxes,
            })
            .collect();
        evaluate(&videos, BOUNDARY_RADIUS)?
    };
    emit(cli.json, &report, || report.to_table())
}

fn print_suites(json: bool, suites: &[SuiteReport]) -> CliResult<()> {
    emit(json, &suites, || {
        let mut s = String::new();
        for r in suites {
            s.push_str(&format!("[{}]\n", r.suite));
            for c in &r.checks {
                s.push_str(&c.line());
                s.push('\n');
            }
        }
        s
    })?;
    let failed: Vec<String> = suites
        .iter()
        .flat_map(|r| r.failures().map(|c| c.name.clone()))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("failed: {}", failed.join(", "))))
    }
}

fn cmd_propcheck(cli: &Cli, cfg: &Config) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    if cli.paper_dims {
        let trace = checks::shape_trace(&cfg.model, seed)?;
        if !cli.json {
            println!("{}", serde_json::to_string_pretty(&trace)?);
        }
    }
    print_suites(
        cli.json,
        &[
            checks::propagation_suite(seed)?,
            checks::invariant_suite(seed)?,
            checks::structure_suite(seed)?,
        ],
    )
}

fn cmd_ablate(cli: &Cli, cfg: &Config, a: &AblateArgs) -> CliResult<()> {
    let opts = AblationOptions {
        config: cfg.clone(),
        seeds: parse_seeds(&a.seeds)?,
        data_seed: a.data_seed,
        n_train: a.n_train,
        n_val: a.n_val,
        gen: GenOptions {
            frames: a.frames,
            ..GenOptions::default()
        },
    };
    let report = run_ablation(&opts)?;
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    emit(cli.json, &report, || report.to_table())
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli, &cfg, a),
        Command::Train(a) => cmd_train(cli, &cfg, a),
        Command::Infer(a) => cmd_infer(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Gradcheck => {
            print_suites(cli.json, &[checks::gradient_suite(cli.seed.unwrap_or(0))?])
        }
        Command::Propcheck => cmd_propcheck(cli, &cfg),
        Command::Ablate(a) => cmd_ablate(cli, &cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
