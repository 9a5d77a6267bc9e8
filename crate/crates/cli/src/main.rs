use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ifsenet::dataset::synthetic::{generate, write_to_disk, SyntheticSpec};
use ifsenet::dataset::{build_merged_index, fold_split, read_manifest, write_manifest, DiskStore};
use ifsenet::eval::{run_validation, write_click_logs, write_curves_csv, write_report, Canvas, EvalConfig};
use ifsenet::model::{checkpoint, Ifsenet, ModelConfig};
use ifsenet::par::Execution;
use ifsenet::trainer::{train, TrainConfig, TrainOutput};
use ifsenet_service::{serve, AppState, ServiceConfig};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "ifsenet", version, about = "Interactive few-shot segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the merged record manifest from the two dataset roots.
    Index {
        #[arg(long)]
        pascal_root: PathBuf,
        #[arg(long)]
        sbd_root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a procedurally generated corpus with a manifest.
    Synth {
        #[arg(long, default_value_t = 40)]
        images: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Train(TrainArgs),
    Evaluate(EvalArgs),
    Serve(ServeArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Manifest produced by `index` or `synth`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory holding `manifest.jsonl`.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

impl DataArgs {
    fn store(&self) -> Result<DiskStore> {
        let manifest = match (&self.manifest, &self.data_root) {
            (Some(m), _) => m.clone(),
            (None, Some(root)) => root.join("manifest.jsonl"),
            (None, None) => bail!("give --manifest or --data-root"),
        };
        let records = read_manifest(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
        Ok(DiskStore::new(records))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// TOML file with `[train]` and `[model]` tables; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// torchvision-named ResNet-50 weights in safetensors form.
    #[arg(long)]
    backbone_weights: Option<PathBuf>,
    /// Run per-sample work on one thread.
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct TrainFile {
    fold: Option<usize>,
    train: Option<TrainConfig>,
    model: Option<ModelConfig>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    fold: usize,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 5)]
    queries: usize,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, env = "IFSENET_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "IFSENET_HOST", default_value = "127.0.0.1")]
    host: String,
    #[arg(long = "state", env = "IFSENET_STATE_DIR")]
    state: Option<PathBuf>,
    #[arg(long, default_value_t = 16 << 20)]
    max_image_bytes: usize,
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let file: TrainFile = match &args.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => TrainFile::default(),
    };
    let mut cfg = file.train.unwrap_or_default();
    if let Some(v) = args.shots {
        cfg.k_shots = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if args.sequential {
        cfg.execution = Execution::Sequential;
    }
    let fold = fold_split(args.fold.or(file.fold).unwrap_or(0))?;
    let model_cfg = file.model.unwrap_or_default();
    let store = args.data.store()?;
    let mut model = Ifsenet::new(model_cfg, cfg.seed)?;
    if let Some(w) = &args.backbone_weights {
        let n = checkpoint::import_backbone(&model, w)?;
        tracing::info!(tensors = n, "imported backbone weights");
    }
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("train_config.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "fold": fold.fold,
            "train": cfg,
            "model": model.config(),
        }))?,
    )?;
    let out = TrainOutput { dir: args.out.clone() };
    let logs = train(&mut model, &store, &fold, &cfg, Some(&out))?;
    if let Some(last) = logs.last() {
        tracing::info!(steps = logs.len(), loss = last.loss, "training finished");
    }
    println!("{}", out.final_checkpoint().display());
    Ok(())
}

fn cmd_evaluate(args: EvalArgs) -> Result<()> {
    if !args.checkpoint.is_file() {
        bail!("checkpoint {} not found", args.checkpoint.display());
    }
    let model = checkpoint::load_cpu(&args.checkpoint)?;
    let store = args.data.store()?;
    let fold = fold_split(args.fold)?;
    let cfg = EvalConfig {
        shots: args.shots,
        queries: args.queries,
        episodes_per_class: args.episodes,
        seed: args.seed,
        execution: execution(args.sequential),
    };
    let (report, results) = run_validation(&model, Canvas::of(&model), &store, &fold, &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    write_report(args.out.join("report.json"), &report)?;
    write_curves_csv(args.out.join("curves.csv"), &report)?;
    write_click_logs(args.out.join("clicks"), &results)?;
    println!(
        "class mIoU {:.4}  NoC@85 {:.2}  NoC@90 {:.2}  episodes {}",
        report.class_miou, report.noc85, report.noc90, report.episodes
    );
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    let model = checkpoint::load_cpu(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    if let Some(dir) = &args.state {
        std::fs::create_dir_all(dir)?;
    }
    let state = Arc::new(AppState::new(
        model,
        ServiceConfig {
            corpus: args.corpus.clone(),
            state_dir: args.state.clone(),
            max_image_bytes: args.max_image_bytes,
        },
    ));
    let restored = state.restore()?;
    tracing::info!(restored, "sessions restored from journal");
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse()?;
    tokio::runtime::Runtime::new()?.block_on(serve(state, addr))?;
    Ok(())
}

fn cmd_index(pascal: &Path, sbd: &Path, out: &Path) -> Result<()> {
    let idx = build_merged_index(pascal, sbd)?;
    write_manifest(out, &idx.records)?;
    println!("{} records ({} skipped)", idx.records.len(), idx.skipped);
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Index {
            pascal_root,
            sbd_root,
            out,
        } => cmd_index(&pascal_root, &sbd_root, &out),
        Command::Synth {
            images,
            size,
            seed,
            out,
        } => {
            let store = generate(&SyntheticSpec {
                images,
                size,
                seed,
                ..Default::default()
            });
            write_to_disk(&store, &out)?;
            println!("{}", out.join("manifest.jsonl").display());
            Ok(())
        }
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Serve(a) => cmd_serve(a),
    }
}
