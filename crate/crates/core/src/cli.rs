//! `tsdw` command line: generate, train, eval, inspect.
//!
//! Every command reads an optional JSON run config; flags override it.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::distance::{DistanceMatrix, StreamTag, MATRIX_MAGIC};
use crate::dwt::{fused_matrix, DecisionLayer, FusionMode};
use crate::embedding::{load_embeddings, save_embeddings, EmbeddingSet, SetRole, MAGIC};
use crate::error::{Error, Result};
use crate::eval::{ablation_sweep, evaluate, single_shot_gallery, ClothesMode, EvalProtocol, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, FusionModel};
use crate::synth::{generate, SynthConfig};
use crate::train::{train_fusion_logged, TrainConfig};

pub const TRAIN_FILE: &str = "train.tsdw";
pub const QUERY_FILE: &str = "query.tsdw";
pub const GALLERY_FILE: &str = "gallery.tsdw";
pub const CHECKPOINT_FILE: &str = "model.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(
    name = "tsdw",
    version,
    about = "Tri-stream dynamic-weight fusion for cloth-changing re-identification"
)]
pub struct Cli {
    #[command(flatten)]
    pub shared: SharedArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct SharedArgs {
    /// JSON run config; flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run every parallel section on a single thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory (generate, train) or report file (eval).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "standard")]
    Standard,
    #[value(name = "same_clothes")]
    SameClothes,
    #[value(name = "cloth_changing")]
    ClothChanging,
}

impl From<ModeArg> for ClothesMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Standard => ClothesMode::Standard,
            ModeArg::SameClothes => ClothesMode::SameClothes,
            ModeArg::ClothChanging => ClothesMode::ClothChanging,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/query/gallery embedding files.
    Generate,
    /// Train the decision module and write a checkpoint plus a JSONL log.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on query/gallery files.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        query: Option<PathBuf>,
        #[arg(long)]
        gallery: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Emit the full single/pairwise/all/DWT table.
        #[arg(long)]
        ablate: bool,
        #[arg(long, conflicts_with = "soft")]
        hard: bool,
        #[arg(long)]
        soft: bool,
        /// Branch temperature for soft mode.
        #[arg(long)]
        temperature: Option<f64>,
        /// Include every query's average precision in the report.
        #[arg(long)]
        per_query: bool,
        /// Keep same-camera matches of the query identity.
        #[arg(long)]
        all_cameras: bool,
        /// Rebuild the gallery with one seeded image per identity from this camera.
        #[arg(long)]
        single_shot: Option<u16>,
    },
    /// Summarize any file this tool writes.
    Inspect { path: PathBuf },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub query: Option<PathBuf>,
    pub gallery: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Applied to every seeded section unless a flag overrides it.
    pub seed: Option<u64>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [
            &mut p.out_dir,
            &mut p.train,
            &mut p.query,
            &mut p.gallery,
            &mut p.checkpoint,
        ] {
            if let Some(rel) = slot.as_ref().filter(|x| x.is_relative()) {
                *slot = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }

    fn apply_seed(&mut self, flag: Option<u64>) {
        if let Some(s) = flag.or(self.seed) {
            self.seed = Some(s);
            self.synth.seed = s;
            self.train.seed = s;
            self.train.sampler.seed = s;
        }
    }
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| Error::Config(format!("no {what} given (flag or config paths.{what})")))?;
    if !p.exists() {
        return Err(Error::Config(format!("{what} {} does not exist", p.display())));
    }
    Ok(p)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json_file(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: &mut impl Write, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

pub fn run(cli: Cli, out: &mut impl Write) -> Result<()> {
    if cli.shared.deterministic {
        // Fails only if the pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let mut cfg = match &cli.shared.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_seed(cli.shared.seed);
    match cli.command {
        Command::Generate => cmd_generate(&cfg, cli.shared.out, out),
        Command::Train { train, epochs } => cmd_train(cfg, train, epochs, cli.shared.out, out),
        Command::Eval {
            checkpoint,
            query,
            gallery,
            mode,
            ablate,
            hard: _,
            soft,
            temperature,
            per_query,
            all_cameras,
            single_shot,
        } => {
            let mut protocol = cfg.eval;
            if let Some(m) = mode {
                protocol.mode = m.into();
            }
            if all_cameras {
                protocol.cross_camera_only = false;
            }
            let args = EvalArgs {
                checkpoint: require(checkpoint.or(cfg.paths.checkpoint.clone()), "checkpoint")?,
                query: require(query.or(cfg.paths.query.clone()), "query")?,
                gallery: require(gallery.or(cfg.paths.gallery.clone()), "gallery")?,
                protocol,
                ablate,
                mode: if soft { FusionMode::Soft } else { FusionMode::Hard },
                temperature,
                per_query,
                single_shot,
                seed: cfg.seed.unwrap_or(0),
                report: cli.shared.out,
            };
            cmd_eval(&args, out)
        }
        Command::Inspect { path } => cmd_inspect(&path, out),
    }
}

pub fn cmd_generate(cfg: &RunConfig, out_dir: Option<PathBuf>, out: &mut impl Write) -> Result<()> {
    let dir = out_dir
        .or(cfg.paths.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let splits = generate(&cfg.synth)?;
    create_dir(&dir)?;
    let mut files = serde_json::Map::new();
    for (name, file, set) in [
        ("train", TRAIN_FILE, &splits.train),
        ("query", QUERY_FILE, &splits.query),
        ("gallery", GALLERY_FILE, &splits.gallery),
    ] {
        let path = dir.join(file);
        save_embeddings(set, &path)?;
        files.insert(
            name.into(),
            json!({
                "path": path,
                "records": set.len(),
                "face_absent_fraction": set.face_absent_fraction(),
            }),
        );
    }
    emit(
        out,
        &json!({ "seed": cfg.synth.seed, "synth": cfg.synth, "files": files }),
    )
}

pub fn cmd_train(
    mut cfg: RunConfig,
    train: Option<PathBuf>,
    epochs: Option<usize>,
    out_dir: Option<PathBuf>,
    out: &mut impl Write,
) -> Result<()> {
    if let Some(e) = epochs {
        cfg.train.epochs = e;
        cfg.train.freeze_epochs = cfg.train.freeze_epochs.min(e);
    }
    let train_path = require(train.or(cfg.paths.train.clone()), "train")?;
    let dir = out_dir
        .or(cfg.paths.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let set = load_embeddings(&train_path, SetRole::Train)?;
    create_dir(&dir)?;
    let log_path = dir.join(TRAIN_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let outcome = train_fusion_logged(&set, &cfg.train, |entry| {
        let line = serde_json::to_string(entry)?;
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))
    })?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    let model = FusionModel {
        params: outcome.params,
        adapters: outcome.adapters,
    };
    save_checkpoint(&checkpoint, &model, cfg.train.seed, cfg.train.epochs, Some(&cfg.train))?;
    emit(
        out,
        &json!({
            "seed": cfg.train.seed,
            "epochs": cfg.train.epochs,
            "checkpoint": checkpoint,
            "log": log_path,
            "final_loss": outcome.history.last().map(|e| e.mean_loss),
        }),
    )
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub query: PathBuf,
    pub gallery: PathBuf,
    pub protocol: EvalProtocol,
    pub ablate: bool,
    pub mode: FusionMode,
    pub temperature: Option<f64>,
    pub per_query: bool,
    pub single_shot: Option<u16>,
    pub seed: u64,
    pub report: Option<PathBuf>,
}

fn finish_report(mut r: EvalReport, args: &EvalArgs) -> EvalReport {
    r.seed = Some(args.seed);
    if args.per_query {
        r
    } else {
        r.without_per_query()
    }
}

pub fn cmd_eval(args: &EvalArgs, out: &mut impl Write) -> Result<()> {
    let (_, mut model) = load_checkpoint(&args.checkpoint)?;
    if let Some(t) = args.temperature {
        model.params.branch_temperature = t;
    }
    let query = load_embeddings(&args.query, SetRole::Query)?;
    let mut gallery = load_embeddings(&args.gallery, SetRole::Gallery)?;
    if let Some(camera) = args.single_shot {
        gallery = single_shot_gallery(&gallery, Some(camera), args.seed)?;
    }
    if query.dims != gallery.dims || query.dims != model.params.dims {
        return Err(Error::Dimension(format!(
            "query dims {:?}, gallery dims {:?}, checkpoint dims {:?}",
            query.dims, gallery.dims, model.params.dims
        )));
    }
    let query = model.prepare(&query)?;
    let gallery = model.prepare(&gallery)?;
    let value = if args.ablate {
        let rows: Vec<_> = ablation_sweep(&query, &gallery, &model.params, args.protocol)?
            .into_iter()
            .map(|row| json!({ "name": row.name, "report": finish_report(row.report, args) }))
            .collect();
        json!({ "seed": args.seed, "rows": rows })
    } else {
        let m = fused_matrix(&model.params, &query, &gallery, args.mode)?;
        serde_json::to_value(finish_report(evaluate(&m, &query, &gallery, args.protocol)?, args))?
    };
    if let Some(path) = &args.report {
        write_json_file(path, &value)?;
    }
    emit(out, &value)
}

pub fn cmd_inspect(path: &Path, out: &mut impl Write) -> Result<()> {
    let mut head = [0u8; 6];
    let n = File::open(path)
        .and_then(|mut f| f.read(&mut head))
        .map_err(|e| Error::io(path, e))?;
    let head = &head[..n];
    if head.starts_with(MATRIX_MAGIC) {
        let m = DistanceMatrix::load(path, StreamTag::Fused)?;
        let (rows, cols) = m.shape();
        return emit(out, &json!({ "kind": "distance_matrix", "rows": rows, "cols": cols }));
    }
    if head.starts_with(MAGIC) {
        let set = load_embeddings(path, SetRole::Gallery)?;
        return emit(out, &embedding_summary(&set));
    }
    let (m, model) = load_checkpoint(path)?;
    let thresholds: serde_json::Map<String, serde_json::Value> = DecisionLayer::ALL
        .iter()
        .map(|&l| {
            let t = &model.params.thresholds;
            (
                format!("{l:?}").to_lowercase(),
                json!({ "alpha": t.alpha(l), "beta": t.beta(l) }),
            )
        })
        .collect();
    emit(
        out,
        &json!({
            "kind": "checkpoint",
            "seed": m.seed,
            "epoch": m.epoch,
            "dims": m.dims,
            "param_count": m.param_count,
            "adapters": m.adapters,
            "branch_temperature": m.branch_temperature,
            "thresholds": thresholds,
        }),
    )
}

fn embedding_summary(set: &EmbeddingSet) -> serde_json::Value {
    let distinct = |f: &dyn Fn(&crate::embedding::EmbeddingRecord) -> u64| {
        let mut v: Vec<u64> = set.records.iter().map(f).collect();
        v.sort_unstable();
        v.dedup();
        v.len()
    };
    json!({
        "kind": "embeddings",
        "records": set.len(),
        "dims": set.dims,
        "identities": distinct(&|r| r.person_id as u64),
        "clothes": distinct(&|r| r.clothes_id as u64),
        "cameras": distinct(&|r| r.camera_id as u64),
        "face_absent_fraction": set.face_absent_fraction(),
    })
}
