//! `c3ca` command-line driver.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use coca3d::boxhead::{envelope, BoxHeadConfig};
use coca3d::data::{generate_dataset, sub_seed, Dataset, Split, SynthConfig};
use coca3d::decoder::DecodeMode;
use coca3d::gradcheck::check_tiny_model;
use coca3d::infer::{caption_scene, eval_records, retrieval_accuracy, scene_embeddings, text_embeddings, CaptionRecord};
use coca3d::metrics::{evaluate, read_records, Metric};
use coca3d::model::{CocaConfig, CocaModel};
use coca3d::tensor::checkpoint::write_atomic;
use coca3d::text::Vocabulary;
use coca3d::train::{RunConfig, TrainConfig, TrainSample, Trainer, MODEL_FILE, VOCAB_FILE};
use coca3d::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "c3ca", version, about = "3D scene contrastive captioning: data, training, captioning, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene/caption dataset.
    Datagen(DatagenArgs),
    /// Train the joint contrastive + captioning model.
    Train(TrainArgs),
    /// Caption every scene of a split with a trained model.
    Caption(CaptionArgs),
    /// In-batch scene-to-text retrieval accuracy.
    Retrieve(RetrieveArgs),
    /// Caption metrics and m@kIoU over evaluation records.
    Eval(EvalArgs),
    /// Finite-difference check of every trainable gradient on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 4)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSize {
    Desk,
    Small,
    Tiny,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Dataset directory (from `datagen`).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints, config, vocabulary and metrics log.
    #[arg(long)]
    pub out: PathBuf,
    /// Training config JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelSize::Desk)]
    pub model: ModelSize,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub vocab_size: usize,
    /// Train the optional box head alongside the losses.
    #[arg(long)]
    pub box_head: bool,
    /// Continue the run stored in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn indices(self, ds: &Dataset) -> Vec<usize> {
        match self {
            SplitArg::Train => ds.manifest.splits.get(Split::Train).to_vec(),
            SplitArg::Val => ds.manifest.splits.get(Split::Val).to_vec(),
            SplitArg::Test => ds.manifest.splits.get(Split::Test).to_vec(),
            SplitArg::All => (0..ds.scenes.len()).collect(),
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct CaptionArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Beam width; 0 selects greedy decoding.
    #[arg(long, default_value_t = 3)]
    pub beam: usize,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    /// Caption JSON-lines output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// Evaluation records (JSON lines with predicted and ground-truth fields).
    #[arg(long, conflicts_with_all = ["predictions", "data"])]
    pub records: Option<PathBuf>,
    /// Caption JSON lines from `caption`, paired with `--data`.
    #[arg(long, requires = "data")]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use ground-truth boxes as predicted boxes.
    #[arg(long)]
    pub gt_boxes: bool,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5")]
    pub iou: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub nms_threshold: f64,
    #[arg(long, value_delimiter = ',', default_value = "cider,bleu4,rougel,meteor")]
    pub metrics: Vec<String>,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print JSON instead of the text table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Include the box head in the checked loss.
    #[arg(long)]
    pub box_head: bool,
}

/// Parses `argv` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Datagen(a) => datagen(&a),
        Command::Train(a) => train(&a),
        Command::Caption(a) => caption(&a),
        Command::Retrieve(a) => retrieve(&a),
        Command::Eval(a) => eval(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn print_resolved<T: Serialize>(command: &str, resolved: &T) {
    let json = serde_json::to_string(resolved).unwrap_or_else(|_| "{}".into());
    eprintln!("resolved config ({command}): {json}");
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
    }
    write_atomic(path, text.as_bytes())
}

pub fn datagen(a: &DatagenArgs) -> Result<()> {
    let config = SynthConfig {
        count: a.count,
        points_per_scene: a.points,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        seed: sub_seed(a.seed, "data"),
    };
    print_resolved("datagen", &serde_json::json!({ "args": a, "synth": config }));
    let m = generate_dataset(&a.out, &config)?;
    println!(
        "{}",
        serde_json::json!({
            "out": a.out, "scenes": m.scenes.len(),
            "train": m.splits.train.len(), "val": m.splits.val.len(), "test": m.splits.test.len(),
        })
    );
    Ok(())
}

fn samples(ds: &Dataset, indices: &[usize]) -> Result<Vec<TrainSample>> {
    indices
        .iter()
        .map(|&i| {
            let scene = &ds.scenes[i];
            Ok(TrainSample {
                cloud: scene.cloud()?,
                caption: scene.target().captions[0].clone(),
                boxes: scene.objects.iter().map(|o| o.bbox).collect(),
            })
        })
        .collect()
}

fn resolve_train_config(a: &TrainArgs, base: TrainConfig) -> TrainConfig {
    let mut c = base;
    if let Some(v) = a.lambda {
        c.lambda = v;
    }
    if let Some(v) = a.lr {
        c.learning_rate = v;
    }
    if let Some(v) = a.batch {
        c.batch_size = v;
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if a.max_steps.is_some() {
        c.max_steps = a.max_steps;
    }
    if a.checkpoint_every.is_some() {
        c.checkpoint_every = a.checkpoint_every;
    }
    c
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let train_idx = ds.manifest.splits.get(Split::Train).to_vec();
    let samples = samples(&ds, &train_idx)?;
    let mut trainer = if a.resume {
        let stored = RunConfig::load(&a.out)?;
        let config = resolve_train_config(a, stored.train);
        print_resolved("train", &serde_json::json!({ "args": a, "model": stored.model, "train": config }));
        Trainer::resume(&a.out, &samples, Some(config))?
    } else {
        let base = match &a.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                serde_json::from_str(&text).map_err(|e| Error::Json { path: path.clone(), source: e })?
            }
            None => TrainConfig::default(),
        };
        let mut config = resolve_train_config(a, base);
        config.seed = sub_seed(a.seed, "train");
        let vocab = Vocabulary::build(&ds.captions(Split::Train), a.vocab_size)?;
        let n_features = ds.manifest.n_features;
        let mut model_config = match a.model {
            ModelSize::Desk => CocaConfig::desk(vocab.len(), n_features),
            ModelSize::Small => CocaConfig::small(vocab.len(), n_features),
            ModelSize::Tiny => CocaConfig::tiny(vocab.len(), n_features),
        };
        let all_boxes: Vec<_> = samples.iter().flat_map(|s| s.boxes.iter().copied()).collect();
        if a.box_head {
            model_config.box_head = Some(BoxHeadConfig::default());
        }
        let init_seed = sub_seed(a.seed, "init");
        print_resolved(
            "train",
            &serde_json::json!({ "args": a, "init_seed": init_seed, "model": model_config, "train": config }),
        );
        let (model, store) = CocaModel::with_envelope(model_config, init_seed, envelope(&all_boxes))?;
        Trainer::new(model, store, vocab, config, &samples)?
    };
    let logs = trainer.run(Some(&a.out))?;
    let last = logs.last();
    println!(
        "{}",
        serde_json::json!({
            "out": a.out,
            "steps": trainer.step,
            "l_total": last.map(|l| l.l_total),
            "l_con": last.map(|l| l.l_con),
            "l_cap": last.map(|l| l.l_cap),
            "retrieval_top1": last.map(|l| l.retrieval_top1),
        })
    );
    Ok(())
}

fn load_run(dir: &Path) -> Result<(CocaModel, coca3d::tensor::ParamStore, Vocabulary)> {
    let run = RunConfig::load(dir)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let (model, store) = CocaModel::load(run.model, &dir.join(MODEL_FILE))?;
    Ok((model, store, vocab))
}

pub fn caption(a: &CaptionArgs) -> Result<()> {
    print_resolved("caption", a);
    let (model, store, vocab) = load_run(&a.checkpoint)?;
    let ds = Dataset::load(&a.data)?;
    let mode = if a.beam == 0 { DecodeMode::Greedy } else { DecodeMode::Beam(a.beam) };
    let mut out = String::new();
    let indices = a.split.indices(&ds);
    for &i in &indices {
        let scene = model.prepare(ds.scenes[i].cloud()?)?;
        let c = caption_scene(&model, &store, &vocab, &scene, mode, a.max_len)?;
        let record = CaptionRecord {
            scene_id: ds.scene_id(i),
            object_id: 0,
            caption: c.text,
            log_prob: c.log_prob,
            bbox: c.bbox.map(|b| b.0),
            score: c.bbox.map(|b| b.1),
        };
        out.push_str(&serde_json::to_string(&record).map_err(|e| Error::Json { path: PathBuf::from("-"), source: e })?);
        out.push('\n');
    }
    info!("captioned {} scenes", indices.len());
    match &a.out {
        Some(path) => write_text(path, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

pub fn retrieve(a: &RetrieveArgs) -> Result<()> {
    print_resolved("retrieve", a);
    let (model, store, vocab) = load_run(&a.checkpoint)?;
    let ds = Dataset::load(&a.data)?;
    let indices = a.split.indices(&ds);
    if indices.is_empty() {
        return Err(Error::Invalid("selected split is empty".into()));
    }
    let scenes = indices.iter().map(|&i| model.prepare(ds.scenes[i].cloud()?)).collect::<Result<Vec<_>>>()?;
    let captions: Vec<Vec<usize>> = indices.iter().map(|&i| vocab.tokenize(&ds.scenes[i].target().captions[0])).collect();
    let features = model.text_features(&store, &captions)?;
    let se = scene_embeddings(&model, &store, &scenes.iter().collect::<Vec<_>>())?;
    let te = text_embeddings(&model, &store, &features)?;
    let acc = retrieval_accuracy(&se, &te, a.batch)?;
    println!("{}", serde_json::json!({ "split": a.split, "items": indices.len(), "batch": a.batch, "retrieval_top1": acc }));
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    print_resolved("eval", a);
    let metrics = a.metrics.iter().map(|m| m.parse::<Metric>()).collect::<Result<Vec<_>>>()?;
    let records = match (&a.records, &a.predictions, &a.data) {
        (Some(path), _, _) => read_records(path)?,
        (None, Some(pred), Some(data)) => {
            let ds = Dataset::load(data)?;
            let text = std::fs::read_to_string(pred).map_err(|e| Error::Io { path: pred.clone(), source: e })?;
            let captions = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str::<CaptionRecord>(l).map_err(|e| Error::Json { path: pred.clone(), source: e }))
                .collect::<Result<Vec<_>>>()?;
            eval_records(&ds, &captions, a.gt_boxes)?
        }
        _ => return Err(Error::Invalid("eval needs --records, or --predictions with --data".into())),
    };
    let records = if a.gt_boxes {
        records.into_iter().map(|r| coca3d::metrics::EvalRecord { predicted_box: r.gt_box, ..r }).collect()
    } else {
        records
    };
    let report = evaluate(&records, &metrics, &a.iou, Some(a.nms_threshold))?;
    if let Some(path) = &a.out {
        write_text(path, &report.to_json())?;
    }
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    print_resolved("gradcheck", a);
    let start = std::time::Instant::now();
    let report = check_tiny_model(a.seed, a.eps, a.box_head)?;
    let pass = report.max_rel_err <= a.tolerance;
    println!(
        "{}",
        serde_json::json!({
            "max_rel_err": report.max_rel_err,
            "tolerance": a.tolerance,
            "pass": pass,
            "worst": report.worst,
            "parameters": report.parameters,
            "elements": report.elements,
            "seconds": start.elapsed().as_secs_f64(),
        })
    );
    if pass {
        Ok(())
    } else {
        Err(Error::Invalid(format!("max relative error {:e} exceeds {:e}", report.max_rel_err, a.tolerance)))
    }
}
