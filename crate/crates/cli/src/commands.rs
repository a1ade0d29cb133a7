use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use protoret::descriptor::{fit_whitening, l2_normalize, pool, DEFAULT_WHITEN_EPS};
use protoret::eval::{evaluate, DEFAULT_IOU};
use protoret::format::{
    read_descriptor, read_feature_map, read_head, read_jsonl, read_whitening, write_feature_map,
    write_head, write_jsonl, write_whitening,
};
use protoret::pipeline::{
    dataset_samples, ground_truth_proposals, logo_samples, prototypes_from_logos, run_pipeline,
    Embedder, FeaturizerBackend, PipelineConfig, Proposal, ToyFeaturizer, DEFAULT_THRESHOLD,
};
use protoret::synth::{assets, decode_png, generate_dataset, resolve, StampRecord, SynthConfig, MANIFEST_FILE};
use protoret::train::{train_head, Mining, TrainConfig, TrainingSample};
use protoret::{
    AffineHead, BBox, Descriptor, Detection, Error, Exec, GroundTruth, Pooling, Prototype,
    PrototypeIndex, Result,
};

#[derive(Debug, Parser)]
#[command(name = "protoret", version, about = "Prototype-retrieval detection of stylized objects")]
#[command(arg_required_else_help = true, propagate_version = true)]
pub struct Cli {
    /// Run every data-parallel step on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Debug-level logs.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write procedural logos and backgrounds for a self-contained demo.
    DemoAssets(DemoAssetsArgs),
    /// Stamp logos into backgrounds and write a labelled dataset.
    Synth(SynthArgs),
    /// Write toy feature maps for a dataset plus training and lookup manifests.
    Featurize(FeaturizeArgs),
    /// Train the embedding head with triplet loss.
    Train(TrainArgs),
    /// Build and edit prototype index files.
    #[command(subcommand, arg_required_else_help = true)]
    Index(IndexCommand),
    /// Rank prototypes for one descriptor or image.
    Query(QueryArgs),
    /// Write a dataset's ground-truth boxes as proposals.
    GtProposals(GtProposalsArgs),
    /// Classify region proposals against the index.
    Run(RunArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Serve the index over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DemoAssetsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 1)]
    pub variants: usize,
    #[arg(long, default_value_t = 20)]
    pub backgrounds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub backgrounds: PathBuf,
    /// Logos manifest (JSONL with class, variant, path).
    #[arg(long)]
    pub logos: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// JSON file with transform ranges.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct EmbedArgs {
    #[arg(long, default_value = "max")]
    pub pooling: Pooling,
    /// PCA whitening applied after the head.
    #[arg(long)]
    pub whitening: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "max")]
    pub pooling: Pooling,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training manifest (JSONL with class, input, pooling).
    #[arg(long, required_unless_present = "dataset", conflicts_with = "dataset")]
    pub manifest: Option<PathBuf>,
    /// Dataset directory; ground-truth crops are featurized on the fly.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Logos manifest whose images join the training set.
    #[arg(long)]
    pub logos: Option<PathBuf>,
    /// Output head file.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub mining: Option<Mining>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dim: Option<usize>,
    #[arg(long, default_value = "max")]
    pub pooling: Pooling,
    /// Per-epoch JSONL log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Fit PCA whitening on the trained embeddings and write it here.
    #[arg(long)]
    pub whitening_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Describe every logo with the head and write a new index.
    Build(IndexBuildArgs),
    /// Insert or replace one prototype.
    Add(IndexAddArgs),
    /// Remove a class, or one variant of it.
    Remove(IndexRemoveArgs),
    /// Print count, dimension and class count.
    Stats(IndexStatsArgs),
}

#[derive(Debug, Args)]
pub struct IndexBuildArgs {
    #[arg(long)]
    pub logos: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub embed: EmbedArgs,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["descriptor", "image"]))]
pub struct IndexAddArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub class: String,
    #[arg(long)]
    pub variant: String,
    /// Unit-norm `.desc` file.
    #[arg(long)]
    pub descriptor: Option<PathBuf>,
    /// PNG described with `--head`.
    #[arg(long, requires = "head")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[command(flatten)]
    pub embed: EmbedArgs,
}

#[derive(Debug, Args)]
pub struct IndexRemoveArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub class: String,
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Debug, Args)]
pub struct IndexStatsArgs {
    #[arg(long)]
    pub index: PathBuf,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["descriptor", "image"]))]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub descriptor: Option<PathBuf>,
    #[arg(long, requires = "head")]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = -1.0, allow_negative_numbers = true)]
    pub threshold: f64,
    #[command(flatten)]
    pub embed: EmbedArgs,
}

#[derive(Debug, Args)]
pub struct GtProposalsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum BackendKind {
    Toy,
    Precomputed,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Directory that proposal image ids are relative to.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub proposals: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    #[arg(long, value_enum, default_value = "toy")]
    pub backend: BackendKind,
    /// Feature-map lookup (JSONL with image, bbox, fmap) for the precomputed backend.
    #[arg(long, required_if_eq("backend", "precomputed"))]
    pub fmaps: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    pub threshold: f64,
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Detections JSONL.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub embed: EmbedArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    /// Ground truth JSONL (a dataset manifest works).
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU)]
    pub iou: f64,
    /// Include per-class precision/recall curves.
    #[arg(long)]
    pub per_class: bool,
    /// Treat every box as one class, scoring localization only.
    #[arg(long)]
    pub class_agnostic: bool,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Enables `POST /classify`.
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 8080, value_parser = clap::value_parser!(u16).range(1..))]
    pub port: u16,
    #[arg(long)]
    pub read_only: bool,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD, allow_negative_numbers = true)]
    pub threshold: f64,
    #[command(flatten)]
    pub embed: EmbedArgs,
}

/// One line of a training manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub class: String,
    /// `.desc` (already pooled) or `.fmap` path, relative to the manifest.
    pub input: String,
    #[serde(default)]
    pub pooling: Pooling,
}

/// One line of a precomputed feature-map lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmapRecord {
    pub image: String,
    pub bbox: BBox,
    pub fmap: String,
}

pub const TOKEN_ENV: &str = "PROTORET_TOKEN";

pub fn execute(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::DemoAssets(a) => demo_assets(a),
        Command::Synth(a) => synth(a, exec),
        Command::Featurize(a) => featurize(a, exec),
        Command::Train(a) => train(a, exec),
        Command::Index(c) => match c {
            IndexCommand::Build(a) => index_build(a, exec),
            IndexCommand::Add(a) => index_add(a),
            IndexCommand::Remove(a) => index_remove(a),
            IndexCommand::Stats(a) => index_stats(a),
        },
        Command::Query(a) => query(a),
        Command::GtProposals(a) => gt_proposals(a),
        Command::Run(a) => run(a, exec),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{value}");
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn toy_embedder(head: AffineHead, embed: &EmbedArgs) -> Result<Embedder> {
    let mut e = Embedder::new(FeaturizerBackend::Toy(ToyFeaturizer::default()), head);
    e.pooling = embed.pooling;
    if let Some(w) = &embed.whitening {
        e.whitening = Some(read_whitening(w)?);
    }
    Ok(e)
}

fn demo_assets(a: DemoAssetsArgs) -> Result<()> {
    let (logos, backgrounds) =
        assets::write_demo_assets(&a.out, a.classes, a.variants, a.backgrounds, a.seed)?;
    print_json(&json!({ "logos": logos, "backgrounds": backgrounds }));
    Ok(())
}

fn synth(a: SynthArgs, exec: Exec) -> Result<()> {
    let mut config: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(k) = a.per_class {
        config.per_class = k;
    }
    config.exec = exec;
    let (records, summary) = generate_dataset(&a.backgrounds, &a.logos, &config, &a.out)?;
    print_json(&json!({
        "records": records.len(),
        "generated": summary.generated,
        "reused": summary.reused,
        "skipped": summary.skipped,
        "manifest": a.out.join(MANIFEST_FILE),
    }));
    Ok(())
}

fn dataset_records(dataset: &Path) -> Result<Vec<StampRecord>> {
    read_jsonl(&dataset.join(MANIFEST_FILE))
}

fn featurize(a: FeaturizeArgs, exec: Exec) -> Result<()> {
    let records = dataset_records(&a.dataset)?;
    let toy = ToyFeaturizer::default();
    let fmap_dir = a.out.join("fmaps");
    std::fs::create_dir_all(&fmap_dir).map_err(|e| io_error(&fmap_dir, e))?;
    let written: Vec<Result<(TrainRecord, FmapRecord)>> = protoret::par::map(exec, &records, |r| {
        let image = protoret::synth::load_png(&a.dataset.join(&r.image))?;
        let crop = protoret::pipeline::crop_resize(&image, &r.bbox, protoret::pipeline::DEFAULT_CROP)?;
        let rel = format!("fmaps/s{:07}.fmap", r.sample);
        write_feature_map(&a.out.join(&rel), &toy.featurize(&crop))?;
        Ok((
            TrainRecord {
                class: r.class.clone(),
                input: rel.clone(),
                pooling: a.pooling,
            },
            FmapRecord {
                image: r.image.clone(),
                bbox: r.bbox,
                fmap: rel,
            },
        ))
    });
    let (train, maps): (Vec<TrainRecord>, Vec<FmapRecord>) =
        written.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    write_jsonl(&a.out.join("train.jsonl"), &train)?;
    write_jsonl(&a.out.join("fmaps.jsonl"), &maps)?;
    print_json(&json!({ "feature_maps": train.len(), "out": a.out }));
    Ok(())
}

fn manifest_samples(manifest: &Path, exec: Exec) -> Result<Vec<TrainingSample>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let records: Vec<TrainRecord> = read_jsonl(manifest)?;
    protoret::par::map(exec, &records, |r| {
        let path = resolve(base, &r.input);
        let pooled = match path.extension().and_then(|e| e.to_str()) {
            Some("desc") => read_descriptor(&path)?,
            Some("fmap") => pool(&read_feature_map(&path)?, r.pooling)?,
            _ => return Err(Error::Format(format!("unknown input type {}", path.display()))),
        };
        Ok(TrainingSample {
            class_id: r.class.clone(),
            input: l2_normalize(&pooled)?,
        })
    })
    .into_iter()
    .collect()
}

fn train(a: TrainArgs, exec: Exec) -> Result<()> {
    let mut config: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.margin {
        config.margin = v;
    }
    if let Some(v) = a.lr {
        config.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.mining {
        config.mining = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if a.out_dim.is_some() {
        config.out_dim = a.out_dim;
    }
    config.exec = exec;
    config.validate()?;

    let probe = toy_embedder(
        AffineHead::identity(protoret::pipeline::TOY_CHANNELS),
        &EmbedArgs {
            pooling: a.pooling,
            whitening: None,
        },
    )?;
    let mut samples = match (&a.manifest, &a.dataset) {
        (Some(m), _) => manifest_samples(m, exec)?,
        (None, Some(d)) => dataset_samples(d, &dataset_records(d)?, &probe, exec)?,
        (None, None) => unreachable!("clap requires one source"),
    };
    if let Some(logos) = &a.logos {
        samples.extend(logo_samples(logos, &probe, exec)?);
    }
    tracing::info!(samples = samples.len(), "training");
    let (head, log) = train_head(&samples, &config)?;
    write_head(&a.out, &head)?;
    if let Some(p) = &a.log {
        write_jsonl(p, &log)?;
    }
    if let Some(p) = &a.whitening_out {
        let embedder = Embedder {
            head: head.clone(),
            ..probe
        };
        let embedded: Vec<Descriptor> = samples
            .iter()
            .map(|s| embedder.embed_input(&s.input))
            .collect::<Result<_>>()?;
        write_whitening(p, &fit_whitening(&embedded, DEFAULT_WHITEN_EPS)?)?;
    }
    let last = log.last();
    print_json(&json!({
        "samples": samples.len(),
        "epochs": log.len(),
        "final_loss": last.map(|l| l.mean_loss),
        "final_active_fraction": last.map(|l| l.active_fraction),
        "head": a.out,
    }));
    Ok(())
}

fn index_build(a: IndexBuildArgs, exec: Exec) -> Result<()> {
    let embedder = toy_embedder(read_head(&a.head)?, &a.embed)?;
    let mut index = PrototypeIndex::new();
    for p in prototypes_from_logos(&a.logos, &embedder, exec)? {
        index.add(p)?;
    }
    index.save(&a.out)?;
    print_json(&json!({ "count": index.len(), "dim": index.dim(), "index": a.out }));
    Ok(())
}

fn load_or_empty(path: &Path) -> Result<PrototypeIndex> {
    if path.exists() {
        PrototypeIndex::load(path)
    } else {
        Ok(PrototypeIndex::new())
    }
}

fn describe_source(
    descriptor: &Option<PathBuf>,
    image: &Option<PathBuf>,
    head: &Option<PathBuf>,
    embed: &EmbedArgs,
) -> Result<Descriptor> {
    if let Some(d) = descriptor {
        return read_descriptor(d);
    }
    let (image, head) = match (image, head) {
        (Some(i), Some(h)) => (i, h),
        _ => return Err(Error::Invalid("need --descriptor, or --image with --head".into())),
    };
    let embedder = toy_embedder(read_head(head)?, embed)?;
    let bytes = std::fs::read(image).map_err(|e| io_error(image, e))?;
    let img = decode_png(&bytes)?;
    let full = BBox::new(0.0, 0.0, img.width() as f64, img.height() as f64)?;
    embedder.describe(&image.to_string_lossy(), Some(&img), &full)
}

fn index_add(a: IndexAddArgs) -> Result<()> {
    let mut index = load_or_empty(&a.index)?;
    let desc = describe_source(&a.descriptor, &a.image, &a.head, &a.embed)?;
    index.add(Prototype::new(a.class, a.variant, desc))?;
    index.save(&a.index)?;
    print_json(&json!({ "count": index.len(), "dim": index.dim() }));
    Ok(())
}

fn index_remove(a: IndexRemoveArgs) -> Result<()> {
    let mut index = PrototypeIndex::load(&a.index)?;
    let removed = index.remove(&a.class, a.variant.as_deref());
    index.save(&a.index)?;
    print_json(&json!({ "removed": removed, "count": index.len() }));
    Ok(())
}

fn index_stats(a: IndexStatsArgs) -> Result<()> {
    let index = PrototypeIndex::load(&a.index)?;
    print_json(&json!({
        "count": index.len(),
        "dim": index.dim(),
        "classes": index.classes().len(),
    }));
    Ok(())
}

fn query(a: QueryArgs) -> Result<()> {
    let index = PrototypeIndex::load(&a.index)?;
    let desc = describe_source(&a.descriptor, &a.image, &a.head, &a.embed)?;
    let results = index.query(&desc, a.k, a.threshold)?;
    print_json(&serde_json::to_value(results)?);
    Ok(())
}

fn gt_proposals(a: GtProposalsArgs) -> Result<()> {
    let proposals = ground_truth_proposals(&dataset_records(&a.dataset)?);
    write_jsonl(&a.out, &proposals)?;
    print_json(&json!({ "proposals": proposals.len(), "out": a.out }));
    Ok(())
}

fn run(a: RunArgs, exec: Exec) -> Result<()> {
    let mut embedder = toy_embedder(read_head(&a.head)?, &a.embed)?;
    if a.backend == BackendKind::Precomputed {
        let map = a.fmaps.as_ref().ok_or_else(|| Error::Invalid("--fmaps is required".into()))?;
        embedder.backend = FeaturizerBackend::precomputed(map)?;
    }
    let index = PrototypeIndex::load(&a.index)?;
    let proposals: Vec<Proposal> = read_jsonl(&a.proposals)?;
    let config = PipelineConfig {
        top_n: a.top_n,
        threshold: a.threshold,
        exec,
    };
    let (detections, summary) = run_pipeline(&a.images, &proposals, &embedder, &index, &config)?;
    write_jsonl(&a.out, &detections)?;
    print_json(&serde_json::to_value(summary)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut detections: Vec<Detection> = read_jsonl(&a.detections)?;
    let mut truths: Vec<GroundTruth> = read_jsonl(&a.truth)?;
    if a.class_agnostic {
        detections.iter_mut().for_each(|d| d.class_id = "object".into());
        truths.iter_mut().for_each(|t| t.class_id = "object".into());
    }
    let report = evaluate(&detections, &truths, a.iou, a.per_class)?;
    let text = serde_json::to_string(&report)?;
    match &a.out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|e| io_error(p, e))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let index = PrototypeIndex::load(&a.index)?;
    let embedder = match &a.head {
        Some(h) => Some(toy_embedder(read_head(h)?, &a.embed)?),
        None => None,
    };
    let config = crate::service::ServiceConfig {
        bind: a.bind,
        port: a.port,
        index_path: a.index,
        token: std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        read_only: a.read_only,
        threshold: a.threshold,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::Invalid(format!("runtime: {e}")))?;
    runtime.block_on(crate::service::serve(config, index, embedder))
}
