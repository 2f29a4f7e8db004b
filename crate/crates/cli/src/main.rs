//! `rgbn`: synthesise, transform, train, expand and evaluate RGBN models.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rgbn_core::data::{load_rgb, load_rgbn, save_rgbn, split_manifest, Annotation, DatasetManifest, RgbnImage, Split};
use rgbn_core::models::gradcheck_suite;
use rgbn_core::pipeline::{
    evaluate_pipeline, occluded_split, train_classifier_on_crops, train_segmenter, Detector, ModelCard, Pipeline,
    PipelineConfig, SegTarget, TrainConfig, EVAL_CLASSES,
};
use rgbn_core::surgery::{expand_input_conv, verify_expansion, ExpansionStrategy, WeightArchive};
use rgbn_core::synth::{crop_bench, generate_dataset, Preset, SceneSpec, CROP_BENCH_SIZE};
use rgbn_core::transforms::{
    consolidate_to_leaf, extract_crops, fuse_channels, grid_split, occlude_unlabeled, write_crop_dataset, ChannelPlan,
    DEFAULT_CROP_SIZE,
};
use rgbn_core::{Error, Result};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "rgbn", version, about = "RGBN plant-condition detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    #[command(subcommand)]
    Transform(TransformCmd),
    /// Tag manifest records train / val / test, stratified by dominant class.
    Split(SplitArgs),
    #[command(subcommand)]
    Train(TrainCmd),
    #[command(subcommand)]
    Surgery(SurgeryCmd),
    /// Detect instances in one image pair.
    Infer(InferArgs),
    /// Score a pipeline on one split of a manifest.
    Eval(EvalArgs),
    /// Finite-difference check of every architecture.
    Gradcheck(GradcheckArgs),
}

fn parse<T: FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "tiny-occluded", value_parser = parse::<Preset>)]
    preset: Preset,
    /// TOML file overriding generator settings of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenes to draw (crops for crop-bench).
    #[arg(long)]
    count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TransformCmd {
    /// Stack planes per a channel plan into raw little-endian f32 tensors.
    Fuse {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "RGBN", value_parser = parse::<ChannelPlan>)]
        plan: ChannelPlan,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relabel every instance as `leaf`.
    Consolidate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Black out unlabeled instances and drop their annotations.
    Occlude {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split every image into four quadrants.
    Grid {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Square crops of every labelled instance.
    Crops {
        #[arg(long)]
        manifest: PathBuf,
        /// Only records of this split.
        #[arg(long, value_parser = parse::<Split>)]
        split: Option<Split>,
        #[arg(long, default_value_t = DEFAULT_CROP_SIZE)]
        size: usize,
        #[arg(long, default_value = "RGBN", value_parser = parse::<ChannelPlan>)]
        plan: ChannelPlan,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Train, val and test shares.
    #[arg(long, default_value = "0.8,0.1,0.1", value_delimiter = ',')]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCommon {
    /// TOML training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for weights.rgbn, weights.json and metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 30)]
    min_area: usize,
    #[command(flatten)]
    common: TrainCommon,
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Condition classifier on a crop dataset.
    Cls {
        /// crops.json
        #[arg(long)]
        crops: PathBuf,
        #[command(flatten)]
        common: TrainCommon,
    },
    /// Leaf segmenter for the two-stage pipeline.
    Seg(SegArgs),
    /// Condition segmenter trained under occlusion.
    Single(SegArgs),
}

#[derive(Subcommand)]
enum SurgeryCmd {
    /// Widen a 3-channel input conv to 4 channels.
    Expand {
        #[arg(long)]
        archive: PathBuf,
        /// Defaults to the input layer named in the model card.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, value_parser = parse::<ExpansionStrategy>)]
        strategy: ExpansionStrategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    pipeline: PathBuf,
    #[arg(long)]
    rgb: PathBuf,
    /// Omit for RGB-only models.
    #[arg(long)]
    nir: Option<PathBuf>,
    /// Write detections here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pipeline: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "val", value_parser = parse::<Split>)]
    split: Split,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Transform(t) => transform(t),
        Command::Split(a) => {
            let m = DatasetManifest::load(&a.manifest)?;
            let ratios: [f64; 3] = a.ratios.as_slice().try_into().map_err(|_| {
                Error::InvalidArgument(format!("--ratios takes 3 values, got {}", a.ratios.len()))
            })?;
            save_manifest(split_manifest(&m, ratios, a.seed)?, &a.out)
        }
        Command::Train(t) => train(t),
        Command::Surgery(SurgeryCmd::Expand {
            archive,
            layer,
            strategy,
            seed,
            out,
        }) => expand(&archive, layer, strategy, seed, &out),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => {
            let pipeline = Pipeline::from_config(&PipelineConfig::load(&a.pipeline)?)?;
            let samples = occluded_split(&DatasetManifest::load(&a.manifest)?, a.split)?;
            let report = evaluate_pipeline(&pipeline, &samples)?;
            emit(&report.to_json()?, a.out.as_deref())
        }
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, format!("{text}\n")).map_err(|e| Error::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

/// Writes `out_dir/manifest.json`. Image paths are made absolute unless the
/// manifest already lives in `out_dir`.
fn save_manifest(mut m: DatasetManifest, out_dir: &Path) -> Result<()> {
    create_dir(out_dir)?;
    if absolute(&m.root)? != absolute(out_dir)? {
        for r in &mut m.records {
            r.rgb = absolute(&m.root.join(&r.rgb))?.to_string_lossy().into_owned();
            r.nir = absolute(&m.root.join(&r.nir))?.to_string_lossy().into_owned();
        }
    }
    m.root = out_dir.to_path_buf();
    m.save(out_dir.join("manifest.json"))
}

/// Preset settings with any keys of a TOML file laid over them.
fn scene_spec(preset: Preset, config: Option<&Path>) -> Result<SceneSpec> {
    let base = preset.spec();
    let Some(path) = config else { return Ok(base) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let overlay: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let mut merged = serde_json::to_value(&base)?;
    let obj = merged.as_object_mut().expect("spec serialises to an object");
    for (k, v) in overlay {
        if !obj.contains_key(&k) {
            return Err(Error::Config(format!("unknown generator setting `{k}`")));
        }
        obj.insert(k, serde_json::to_value(v)?);
    }
    let spec: SceneSpec = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = scene_spec(a.preset, a.config.as_deref())?;
    let count = a.count.unwrap_or(a.preset.count());
    if a.preset == Preset::CropBench {
        let crops = crop_bench(&spec, count, CROP_BENCH_SIZE, a.seed)?;
        let ds = write_crop_dataset(&crops, &ChannelPlan::rgbn(), &a.out)?;
        log::info!("wrote {} crops to {}", ds.crops.len(), a.out.display());
        return Ok(());
    }
    let mut m = generate_dataset(&spec, count, &a.out, a.seed)?;
    if let Some(n) = a.preset.train_scenes() {
        for (i, r) in m.records.iter_mut().enumerate() {
            r.split = if i < n { Split::Train } else { Split::Val };
        }
        m.save(a.out.join("manifest.json"))?;
    }
    log::info!("wrote {} scenes ({} instances) to {}", m.records.len(), m.annotation_count(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct FusedEntry {
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize)]
struct FusedIndex {
    plan: ChannelPlan,
    tensors: Vec<FusedEntry>,
}

/// Rewrites every record through `f`, saving new image pairs in `out`.
fn map_images(
    m: &DatasetManifest,
    out: &Path,
    mut f: impl FnMut(RgbnImage, &[Annotation]) -> Result<Vec<(RgbnImage, Vec<Annotation>)>>,
) -> Result<()> {
    create_dir(out)?;
    let mut next = DatasetManifest::new(m.seed);
    next.classes = m.classes.clone();
    for (i, r) in m.records.iter().enumerate() {
        let parts = f(m.load_image(i)?, &r.annotations)?;
        let single = parts.len() == 1;
        for (q, (img, anns)) in parts.into_iter().enumerate() {
            let stem = if single { format!("scene_{i:04}") } else { format!("scene_{i:04}_q{q}") };
            let (rgb, nir) = (format!("{stem}.png"), format!("{stem}_nir.png"));
            save_rgbn(&img, out.join(&rgb), out.join(&nir))?;
            next.records.push(rgbn_core::data::Record {
                rgb,
                nir,
                split: r.split,
                annotations: anns,
            });
        }
    }
    next.root = out.to_path_buf();
    next.save(out.join("manifest.json"))
}

fn transform(t: TransformCmd) -> Result<()> {
    match t {
        TransformCmd::Fuse { manifest, plan, out } => {
            let m = DatasetManifest::load(&manifest)?;
            create_dir(&out)?;
            let mut tensors = Vec::new();
            for i in 0..m.records.len() {
                let x = fuse_channels(&m.load_image(i)?, &plan);
                let bytes: Vec<u8> = x.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
                let file = format!("fused_{i:04}.f32");
                std::fs::write(out.join(&file), bytes).map_err(|e| Error::io(out.join(&file), e))?;
                tensors.push(FusedEntry {
                    file,
                    shape: x.shape().to_vec(),
                });
            }
            let index = serde_json::to_string_pretty(&FusedIndex { plan, tensors })?;
            emit(&index, Some(&out.join("fused.json")))
        }
        TransformCmd::Consolidate { manifest, out } => {
            save_manifest(consolidate_to_leaf(&DatasetManifest::load(&manifest)?), &out)
        }
        TransformCmd::Occlude { manifest, out } => map_images(&DatasetManifest::load(&manifest)?, &out, |img, anns| {
            Ok(vec![occlude_unlabeled(&img, anns)?])
        }),
        TransformCmd::Grid { manifest, out } => {
            map_images(&DatasetManifest::load(&manifest)?, &out, |img, anns| Ok(grid_split(&img, anns)))
        }
        TransformCmd::Crops {
            manifest,
            split,
            size,
            plan,
            out,
        } => {
            let m = DatasetManifest::load(&manifest)?;
            let mut crops = Vec::new();
            for i in 0..m.records.len() {
                if split.is_some_and(|s| m.records[i].split != s) {
                    continue;
                }
                crops.extend(extract_crops(&m.load_image(i)?, &m.records[i].annotations, size, i)?);
            }
            if crops.is_empty() {
                return Err(Error::Data("no labelled instances to crop".into()));
            }
            let ds = write_crop_dataset(&crops, &plan, &out)?;
            log::info!("wrote {} crops to {}", ds.crops.len(), out.display());
            Ok(())
        }
    }
}

fn train_config(common: &TrainCommon) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

type Samples = Vec<(RgbnImage, Vec<Annotation>)>;

fn scene_split(m: &DatasetManifest, split: Split) -> Result<Samples> {
    m.indices_in(split)
        .into_iter()
        .map(|i| Ok((m.load_image(i)?, m.records[i].annotations.clone())))
        .collect()
}

#[derive(Serialize)]
struct TrainSummary {
    weights: PathBuf,
    best_epoch: usize,
    epochs_run: usize,
}

fn train(t: TrainCmd) -> Result<()> {
    let (outcome, out) = match t {
        TrainCmd::Cls { crops, common } => {
            let cfg = train_config(&common)?;
            let ds = rgbn_core::transforms::load_crop_dataset(&crops)?;
            (train_classifier_on_crops(&cfg, &ds)?, common.out)
        }
        TrainCmd::Seg(a) => {
            let cfg = train_config(&a.common)?;
            let m = consolidate_to_leaf(&DatasetManifest::load(&a.manifest)?);
            let (tr, va) = (scene_split(&m, Split::Train)?, scene_split(&m, Split::Val)?);
            (train_segmenter(&cfg, &tr, &va, SegTarget::Leaf, a.min_area)?, a.common.out)
        }
        TrainCmd::Single(a) => {
            let cfg = train_config(&a.common)?;
            let m = DatasetManifest::load(&a.manifest)?;
            let (tr, va) = (occluded_split(&m, Split::Train)?, occluded_split(&m, Split::Val)?);
            (train_segmenter(&cfg, &tr, &va, SegTarget::Conditions, a.min_area)?, a.common.out)
        }
    };
    let weights = outcome.save(&out)?;
    let summary = TrainSummary {
        weights,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.metrics.len(),
    };
    emit(&serde_json::to_string(&summary)?, None)
}

fn expand(archive: &Path, layer: Option<String>, strategy: ExpansionStrategy, seed: u64, out: &Path) -> Result<()> {
    let original = WeightArchive::load(archive)?;
    let card_path = ModelCard::path_for(archive);
    let card = if card_path.is_file() { Some(ModelCard::load(&card_path)?) } else { None };
    let layer = layer
        .or_else(|| card.as_ref().map(|c| c.model.input_layer().to_string()))
        .ok_or_else(|| Error::InvalidArgument("no model card next to the archive; pass --layer".into()))?;
    let expanded = expand_input_conv(&original, &layer, strategy, seed)?;
    let report = verify_expansion(&original, &expanded, &layer, strategy)?;
    if !report.passed {
        return Err(Error::Numeric(format!("expansion check failed: {}", serde_json::to_string(&report)?)));
    }
    expanded.save(out)?;
    if let Some(mut card) = card {
        card.model.set_in_channels(4);
        card.plan = ChannelPlan::rgbn();
        card.save(ModelCard::path_for(out))?;
    }
    emit(&serde_json::to_string_pretty(&report)?, None)
}

fn infer(a: InferArgs) -> Result<()> {
    let pipeline = Pipeline::from_config(&PipelineConfig::load(&a.pipeline)?)?;
    let image = match &a.nir {
        Some(nir) => load_rgbn(&a.rgb, nir)?,
        None => load_rgb(&a.rgb)?,
    };
    let names: Vec<&str> = EVAL_CLASSES.iter().map(|c| c.as_str()).collect();
    let detections: Vec<_> = pipeline
        .detect(&image)?
        .iter()
        .map(|p| output::detection(p, &names))
        .collect();
    emit(&serde_json::to_string_pretty(&detections)?, a.out.as_deref())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut worst: f64 = 0.0;
    for (spec, rep) in gradcheck_suite(a.size, a.seed)? {
        let name = serde_json::to_value(&spec)?["arch"].as_str().unwrap_or("?").to_string();
        let verdict = if rep.max_relative_error < a.tolerance { "ok" } else { "FAIL" };
        println!("{name:<12} max relative error {:.3e}  {verdict}", rep.max_relative_error);
        worst = worst.max(rep.max_relative_error);
    }
    if worst >= a.tolerance {
        return Err(Error::Numeric(format!("gradient error {worst:.3e} exceeds {:.0e}", a.tolerance)));
    }
    Ok(())
}
