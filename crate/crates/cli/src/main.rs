use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use flowdet::checkpoint::{load_checkpoint, save_checkpoint};
use flowdet::config::{defaults_table, RunConfig, SolverKind};
use flowdet::evaluation::{evaluate, sweep_csv, sweep_report, SWEEP_CSV_HEADER};
use flowdet::experiments::{run_ablation, AblationTables};
use flowdet::model::Detector;
use flowdet::sampling::{run_record, SamplerConfig, Solver};
use flowdet::scenes::{generate_scenes, read_dataset, write_dataset, Dataset, Scene};
use flowdet::trainer::{build_prior, train};
use flowdet::{Error, Result};

#[derive(Parser)]
#[command(name = "flowdet", version, about = "Flow-matching object detector on synthetic scenes")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set steps=3`. Repeatable; wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run seed; wins over FLOWDET_SEED and the file, loses to `--set seed=`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and validation splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a detector and write `checkpoint.json` plus metrics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding `train.jsonl` and `val.jsonl` (generated in memory when absent).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Grid over proposals, steps and solvers.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
        n_eval: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        steps: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "euler")]
        solvers: Vec<String>,
    },
    /// Prior, matcher and solver ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print every config key with its default.
    Keys,
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(cfg, common)
}

/// FLOWDET_SEED, then `--seed`, then every `--set`.
fn apply_overrides(mut cfg: RunConfig, common: &Common) -> Result<RunConfig> {
    if let Ok(seed) = std::env::var("FLOWDET_SEED") {
        cfg = cfg.with_overrides([format!("seed={seed}").as_str()])?;
    }
    if let Some(seed) = common.seed {
        cfg = cfg.with_overrides([format!("seed={seed}").as_str()])?;
    }
    cfg.with_overrides(common.overrides.iter().map(String::as_str))
}

fn splits(cfg: &RunConfig, data: Option<&Path>) -> Result<(Vec<Scene>, Vec<Scene>)> {
    match data {
        Some(dir) => {
            let train = read_dataset(&dir.join("train.jsonl"))?;
            let val = read_dataset(&dir.join("val.jsonl"))?;
            let want = cfg.scene_config().hash();
            for d in [&train, &val] {
                if d.config_hash != want {
                    eprintln!("warning: dataset config hash {} differs from the run's {}", d.config_hash, want);
                }
            }
            Ok((train.scenes, val.scenes))
        }
        None => {
            let sc = cfg.scene_config();
            Ok((
                generate_scenes(cfg.train_first_id(), cfg.data_train_scenes, &sc)?,
                generate_scenes(cfg.val_first_id(), cfg.data_val_scenes, &sc)?,
            ))
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn parse_solver(name: &str, cfg: &RunConfig) -> Result<Solver> {
    let kind: SolverKind = name.parse().map_err(|e: String| Error::Config(vec![format!("solver {name:?}: {e}")]))?;
    let c = cfg.clone().with_overrides([format!("solver.kind={kind}").as_str(), format!("objective={}", if kind == SolverKind::Ddim { "ddpm" } else { "cfm" }).as_str()])?;
    Ok(SamplerConfig::from_run(&c).solver)
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let sc = cfg.scene_config();
    let hash = sc.hash();
    fs::create_dir_all(&common.out)?;
    for (name, first, count) in
        [("train", cfg.train_first_id(), cfg.data_train_scenes), ("val", cfg.val_first_id(), cfg.data_val_scenes)]
    {
        let ds = Dataset { n_classes: cfg.data_classes, config_hash: hash.clone(), scenes: generate_scenes(first, count, &sc)? };
        write_dataset(&ds, &common.out.join(format!("{name}.jsonl")))?;
        println!("{name}: {count} records");
    }
    println!("config hash: {hash}");
    Ok(())
}

fn cmd_train(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let (train_set, val) = splits(&cfg, data)?;
    fs::create_dir_all(&common.out)?;
    let mut det = Detector::init(&cfg, build_prior(&cfg, &train_set)?)?;
    let mut metrics = fs::File::create(common.out.join("metrics.jsonl"))?;
    let mut evals = fs::File::create(common.out.join("eval.jsonl"))?;
    let sampler = SamplerConfig::from_run(&cfg);
    let start = Instant::now();
    println!("config hash: {}", cfg.hash());
    train(&mut det, &train_set, &cfg, |d, m| {
        writeln!(metrics, "{}", serde_json::to_string(m).expect("finite metrics"))?;
        let done = m.step + 1;
        if done % 100 == 0 || done == cfg.train_steps {
            println!(
                "step {done:>6}  loss {:.4}  cls {:.3}  l1 {:.3}  giou {:.3}  |g| {:.3}  lr {:.2e}  {:.0}s",
                m.loss,
                m.cls,
                m.l1,
                m.giou,
                m.grad_norm,
                m.lr,
                start.elapsed().as_secs_f64()
            );
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            let (r, _, _) = evaluate(d, &val, &sampler, cfg.seed)?;
            println!("eval @ {done}: AP {:.4}  AP50 {:.4}  AP75 {:.4}  recall {:.4}", r.ap, r.ap50, r.ap75, r.recall);
            writeln!(
                evals,
                "{}",
                serde_json::json!({"step": done, "ap": r.ap, "ap50": r.ap50, "ap75": r.ap75, "recall": r.recall, "config_hash": cfg.hash()})
            )?;
        }
        Ok(())
    })?;
    save_checkpoint(&det, &cfg, &common.out.join("checkpoint.json"))?;
    let (r, nfe, ms) = evaluate(&det, &val, &sampler, cfg.seed)?;
    println!("final: AP {:.4}  AP50 {:.4}  AP75 {:.4}  recall {:.4}  nfe {nfe:.1}  {ms:.2} ms/scene", r.ap, r.ap50, r.ap75, r.recall);
    println!("train time: {:.1}s", start.elapsed().as_secs_f64());
    write(
        &common.out.join("final.json"),
        &serde_json::to_string_pretty(&serde_json::json!({"config_hash": cfg.hash(), "train_seconds": start.elapsed().as_secs_f64(), "result": r})).expect("json"),
    )
}

/// Checkpoint config with the command's own overrides applied on top.
fn checkpoint_config(common: &Common, ckpt: &Path) -> Result<(RunConfig, Detector)> {
    let (saved, det) = load_checkpoint(ckpt)?;
    let cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => saved,
    };
    Ok((apply_overrides(cfg, common)?, det))
}

fn cmd_eval(common: &Common, ckpt: &Path, data: Option<&Path>) -> Result<()> {
    let (cfg, det) = checkpoint_config(common, ckpt)?;
    let (_, val) = splits(&cfg, data)?;
    let sampler = SamplerConfig::from_run(&cfg);
    let record = run_record(&det, &val, &cfg, &sampler)?;
    let (r, nfe, ms) = evaluate(&det, &val, &sampler, cfg.seed)?;
    write(&common.out.join("detections.json"), &serde_json::to_string(&record).expect("json"))?;
    write(
        &common.out.join("eval.json"),
        &serde_json::to_string_pretty(&serde_json::json!({"config_hash": cfg.hash(), "nfe": nfe, "ms_per_scene": ms, "result": r})).expect("json"),
    )?;
    println!("{SWEEP_CSV_HEADER}");
    println!(
        "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.2},{:.3}",
        sampler.n_eval,
        sampler.steps,
        sampler.solver.name(),
        r.ap,
        r.ap50,
        r.ap75,
        r.recall,
        nfe,
        ms
    );
    Ok(())
}

fn cmd_sweep(common: &Common, ckpt: &Path, data: Option<&Path>, n_eval: &[usize], steps: &[usize], solvers: &[String]) -> Result<()> {
    let (cfg, det) = checkpoint_config(common, ckpt)?;
    let (_, val) = splits(&cfg, data)?;
    let solvers = solvers.iter().map(|s| parse_solver(s, &cfg)).collect::<Result<Vec<_>>>()?;
    let rows = sweep_report(&det, &val, &cfg, n_eval, steps, &solvers)?;
    let csv = sweep_csv(&rows);
    write(&common.out.join("sweep.csv"), &csv)?;
    write(
        &common.out.join("sweep.json"),
        &serde_json::to_string_pretty(&serde_json::json!({"config_hash": cfg.hash(), "rows": rows})).expect("json"),
    )?;
    print!("{csv}");
    Ok(())
}

fn cmd_ablate(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    let (train_set, val) = splits(&cfg, data)?;
    let tables: AblationTables = run_ablation(&cfg, &train_set, &val, |msg| println!("{msg}"))?;
    fs::create_dir_all(&common.out)?;
    for (name, csv) in tables.csv() {
        write(&common.out.join(format!("{name}.csv")), &csv)?;
    }
    let md = tables.markdown();
    write(&common.out.join("ablation.md"), &md)?;
    write(&common.out.join("ablation.json"), &serde_json::to_string_pretty(&tables).expect("json"))?;
    print!("{md}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NumericalDivergence(_) => 3,
        Error::Io(_) | Error::Format { .. } | Error::Version { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::GenData { common } => gen_data(common),
        Command::Train { common, data } => cmd_train(common, data.as_deref()),
        Command::Eval { common, ckpt, data } => cmd_eval(common, ckpt, data.as_deref()),
        Command::Sweep { common, ckpt, data, n_eval, steps, solvers } => {
            cmd_sweep(common, ckpt, data.as_deref(), n_eval, steps, solvers)
        }
        Command::Ablate { common, data } => cmd_ablate(common, data.as_deref()),
        Command::Keys => {
            print!("{}", defaults_table());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
