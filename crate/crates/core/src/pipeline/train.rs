use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::infer::{decode_instances, ground_truth};
use crate::data::{stratified_split, Annotation, Condition, RgbnImage, Split};
use crate::error::{Error, Result};
use crate::eval::{classification_report, map50_95};
use crate::models::{apply_init, ModelSpec};
use crate::surgery::WeightArchive;
use crate::tensor::{cross_entropy, pixel_cross_entropy, sgd_step, ModelGraph, OutputKind, Tensor};
use crate::transforms::{fuse_channels, CropDataset, ChannelPlan};

/// Everything needed to rebuild a trained model around its archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub model: ModelSpec,
    pub plan: ChannelPlan,
    /// Output index `i` (after background, for segmenters) is `classes[i]`.
    pub classes: Vec<Condition>,
}

impl ModelCard {
    /// `weights.rgbn` is described by `weights.json`.
    pub fn path_for(archive: impl AsRef<Path>) -> PathBuf {
        archive.as_ref().with_extension("json")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let card: ModelCard = serde_json::from_str(&text)?;
        if card.model.in_channels() != card.plan.channels() {
            return Err(Error::Config(format!(
                "{}: model takes {} channels, plan {} has {}",
                path.display(),
                card.model.in_channels(),
                card.plan,
                card.plan.channels()
            )));
        }
        Ok(card)
    }

    pub fn instantiate(&self, archive: &WeightArchive) -> Result<ModelGraph> {
        let mut model = self.model.build(0)?;
        archive.load_into(&mut model)?;
        Ok(model)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_map: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the best validation epoch (the last epoch without validation).
    pub archive: WeightArchive,
    pub card: ModelCard,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

impl TrainOutcome {
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.metrics {
            out += &serde_json::to_string(m)?;
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `weights.rgbn`, `weights.json` and `metrics.jsonl` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights = dir.join("weights.rgbn");
        self.archive.save(&weights)?;
        self.card.save(ModelCard::path_for(&weights))?;
        let log = dir.join("metrics.jsonl");
        std::fs::write(&log, self.metrics_jsonl()?).map_err(|e| Error::io(&log, e))?;
        Ok(weights)
    }

    pub fn model(&self) -> Result<ModelGraph> {
        self.card.instantiate(&self.archive)
    }
}

/// Tracks the best epoch and decides when patience runs out.
struct Checkpoint {
    best: Option<(f64, usize, WeightArchive)>,
    patience: Option<usize>,
}

impl Checkpoint {
    /// Returns true when training should stop.
    fn offer(&mut self, metric: Option<f64>, epoch: usize, model: &ModelGraph) -> bool {
        let Some(m) = metric else {
            self.best = Some((f64::NEG_INFINITY, epoch, WeightArchive::from_model(model)));
            return false;
        };
        if self.best.as_ref().is_none_or(|b| m > b.0) {
            self.best = Some((m, epoch, WeightArchive::from_model(model)));
        }
        let since = epoch - self.best.as_ref().expect("set above").1;
        self.patience.is_some_and(|p| since >= p)
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn gather(xs: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let items: Vec<Tensor> = idx.iter().map(|&i| xs[i].clone()).collect();
    Tensor::stack(&items)
}

/// Class probabilities for each sample, batched.
pub fn predict_probabilities(model: &ModelGraph, xs: &[Tensor], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(xs.len());
    let idx: Vec<usize> = (0..xs.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let p = model.predict(&gather(xs, chunk)?, OutputKind::Probabilities)?;
        rows.extend((0..chunk.len()).map(|i| p.sample(i).to_vec()));
    }
    Ok(rows)
}

/// Mini-batch training of `model` on fused samples. Validation accuracy picks
/// the returned archive; ties keep the earlier epoch.
pub fn fit_classifier(
    model: &mut ModelGraph,
    cfg: &TrainConfig,
    train: (&[Tensor], &[usize]),
    val: (&[Tensor], &[usize]),
) -> Result<(Vec<EpochMetrics>, WeightArchive, usize)> {
    let (xs, ys) = train;
    if xs.is_empty() || xs.len() != ys.len() || val.0.len() != val.1.len() {
        return Err(Error::Data(format!("{} training samples, {} labels", xs.len(), ys.len())));
    }
    // init draws from `seed`, shuffling from its own stream
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4521);
    let mut ckpt = Checkpoint {
        best: None,
        patience: cfg.patience,
    };
    let mut metrics = Vec::new();
    for epoch in 1..=cfg.epochs {
        let order = shuffled(xs.len(), &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = gather(xs, batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| ys[i]).collect();
            let logits = model.forward(&x, OutputKind::Logits)?;
            let (loss, grad) = cross_entropy(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}: loss is {loss}")));
            }
            model.backward(grad)?;
            sgd_step(model, cfg.learning_rate)?;
            total += loss * batch.len() as f64;
        }
        let report = if val.0.is_empty() {
            None
        } else {
            Some(classification_report(&predict_probabilities(model, val.0, cfg.batch_size)?, val.1)?)
        };
        metrics.push(EpochMetrics {
            epoch,
            train_loss: total / xs.len() as f64,
            val_acc: report.map(|r| r.accuracy),
            val_loss: report.map(|r| r.loss),
            val_map: None,
        });
        log::info!("epoch {epoch}: {:?}", metrics.last().expect("pushed"));
        if ckpt.offer(report.map(|r| r.accuracy), epoch, model) {
            break;
        }
    }
    let (_, best_epoch, archive) = ckpt.best.expect("at least one epoch");
    Ok((metrics, archive, best_epoch))
}

fn fuse_crops(samples: &[(RgbnImage, Condition)], cfg: &TrainConfig) -> Result<(Vec<Tensor>, Vec<usize>)> {
    let mut xs = Vec::with_capacity(samples.len());
    let mut ys = Vec::with_capacity(samples.len());
    for (img, c) in samples {
        if (img.width(), img.height()) != (cfg.input_size, cfg.input_size) {
            return Err(Error::Data(format!(
                "crop is {}x{}, model input is {}",
                img.width(),
                img.height(),
                cfg.input_size
            )));
        }
        let y = c
            .class_index()
            .ok_or_else(|| Error::Data(format!("crop labelled `{c}` is not a condition class")))?;
        xs.push(fuse_channels(img, &cfg.plan));
        ys.push(y);
    }
    Ok((xs, ys))
}

/// Trains a condition classifier on labelled crops.
pub fn train_classifier(
    cfg: &TrainConfig,
    train: &[(RgbnImage, Condition)],
    val: &[(RgbnImage, Condition)],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (xs, ys) = fuse_crops(train, cfg)?;
    let mut present = ys.clone();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::Data(format!("classifier needs crops of >= 2 classes, found {}", present.len())));
    }
    let (vx, vy) = fuse_crops(val, cfg)?;
    let spec = cfg.classifier_spec(Condition::CLASSES.len());
    let mut model = spec.build(cfg.seed)?;
    apply_init(&mut model, cfg.init);
    let (metrics, archive, best_epoch) = fit_classifier(&mut model, cfg, (&xs, &ys), (&vx, &vy))?;
    Ok(TrainOutcome {
        archive,
        card: ModelCard {
            model: spec,
            plan: cfg.plan.clone(),
            classes: Condition::CLASSES.to_vec(),
        },
        metrics,
        best_epoch,
    })
}

/// Stratified hold-out of `val_fraction` of the crops, by class.
pub fn split_crops(
    samples: Vec<(RgbnImage, Condition)>,
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<(RgbnImage, Condition)>, Vec<(RgbnImage, Condition)>)> {
    let keys: Vec<Condition> = samples.iter().map(|s| s.1).collect();
    let tags = stratified_split(&keys, [1.0 - val_fraction, val_fraction, 0.0], seed)?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, t) in samples.into_iter().zip(tags) {
        if t == Split::Val {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, val))
}

pub fn train_classifier_on_crops(cfg: &TrainConfig, crops: &CropDataset) -> Result<TrainOutcome> {
    if cfg.plan.uses_nir() && !crops.plan.uses_nir() {
        return Err(Error::Data(format!("plan {} needs NIR but the crop set has none", cfg.plan)));
    }
    let (train, val) = split_crops(crops.images()?, cfg.val_fraction, cfg.seed)?;
    train_classifier(cfg, &train, &val)
}

/// What a segmenter learns to label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegTarget {
    /// Background versus leaf, every instance counted as leaf.
    Leaf,
    /// Background plus the three condition classes.
    Conditions,
}

impl SegTarget {
    pub fn classes(self) -> Vec<Condition> {
        match self {
            SegTarget::Leaf => vec![Condition::Leaf],
            SegTarget::Conditions => Condition::CLASSES.to_vec(),
        }
    }
}

/// Per-pixel labels: 0 background, `i + 1` for `classes[i]`. Later
/// annotations win where instances overlap.
pub fn label_map(width: usize, height: usize, anns: &[Annotation], target: SegTarget) -> Result<Vec<usize>> {
    let mut labels = vec![0; width * height];
    for a in anns {
        let label = match target {
            SegTarget::Leaf => 1,
            SegTarget::Conditions => match a.condition.class_index() {
                Some(i) => i + 1,
                None => {
                    return Err(Error::Data(format!(
                        "instance {} is `{}`; condition training needs occlusion-processed, condition-labelled data",
                        a.id, a.condition
                    )))
                }
            },
        };
        for (l, &m) in labels.iter_mut().zip(a.mask(width, height)?.data()) {
            if m {
                *l = label;
            }
        }
    }
    Ok(labels)
}

/// Dimensions of the scenes, which must agree, and their padded size.
fn scene_dims(scenes: &[(RgbnImage, Vec<Annotation>)], divisor: usize) -> Result<((usize, usize), (usize, usize))> {
    let (w, h) = (scenes[0].0.width(), scenes[0].0.height());
    if let Some(s) = scenes.iter().find(|s| (s.0.width(), s.0.height()) != (w, h)) {
        return Err(Error::Data(format!(
            "segmenter scenes must share one size: {}x{} vs {w}x{h}",
            s.0.width(),
            s.0.height()
        )));
    }
    Ok(((w, h), (w.div_ceil(divisor) * divisor, h.div_ceil(divisor) * divisor)))
}

fn padded_inputs(
    scenes: &[(RgbnImage, Vec<Annotation>)],
    plan: &ChannelPlan,
    target: SegTarget,
    (pw, ph): (usize, usize),
) -> Result<(Vec<Tensor>, Vec<Vec<usize>>)> {
    let mut xs = Vec::with_capacity(scenes.len());
    let mut ys = Vec::with_capacity(scenes.len());
    for (img, anns) in scenes {
        xs.push(fuse_channels(&img.pad_to(pw, ph), plan));
        ys.push(label_map(pw, ph, anns, target)?);
    }
    Ok((xs, ys))
}

/// Trains the FCN with class-weighted per-pixel cross-entropy. Scenes are
/// padded to the encoder's divisor. The best epoch is chosen by validation
/// mAP50-95, falling back to pixel accuracy when val has no instances.
pub fn train_segmenter(
    cfg: &TrainConfig,
    train: &[(RgbnImage, Vec<Annotation>)],
    val: &[(RgbnImage, Vec<Annotation>)],
    target: SegTarget,
    min_component_area: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.iter().all(|s| s.1.is_empty()) {
        return Err(Error::Data("segmenter training set has no annotations".into()));
    }
    let classes = target.classes();
    let probe = cfg.segmenter_spec(classes.len(), 16, 16);
    let divisor = match &probe {
        ModelSpec::Fcn(s) => s.divisor(),
        _ => unreachable!("segmenter spec is an FCN"),
    };
    let ((w, h), (pw, ph)) = scene_dims(train, divisor)?;
    if !val.is_empty() && scene_dims(val, divisor)?.0 != (w, h) {
        return Err(Error::Data("validation scenes differ in size from training scenes".into()));
    }
    let spec = cfg.segmenter_spec(classes.len(), ph, pw);
    let mut model = spec.build(cfg.seed)?;
    apply_init(&mut model, cfg.init);
    let (xs, ys) = padded_inputs(train, &cfg.plan, target, (pw, ph))?;
    let (vx, vy) = padded_inputs(val, &cfg.plan, target, (pw, ph))?;
    let mut weights = vec![1.0; classes.len() + 1];
    weights[0] = cfg.background_weight;
    let val_gt: Vec<_> = val
        .iter()
        .map(|(img, anns)| ground_truth(img.width(), img.height(), anns, target))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4521);
    let mut ckpt = Checkpoint {
        best: None,
        patience: cfg.patience,
    };
    let mut metrics = Vec::new();
    for epoch in 1..=cfg.epochs {
        let order = shuffled(xs.len(), &mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = gather(&xs, batch)?;
            let y: Vec<usize> = batch.iter().flat_map(|&i| ys[i].iter().copied()).collect();
            let logits = model.forward(&x, OutputKind::Logits)?;
            let (loss, grad) = pixel_cross_entropy(&logits, &y, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch}: loss is {loss}")));
            }
            model.backward(grad)?;
            sgd_step(&mut model, cfg.learning_rate)?;
            total += loss * batch.len() as f64;
        }
        let mut m = EpochMetrics {
            epoch,
            train_loss: total / xs.len() as f64,
            val_acc: None,
            val_loss: None,
            val_map: None,
        };
        if !vx.is_empty() {
            let (mut correct, mut loss) = (0usize, 0.0);
            let mut images = Vec::with_capacity(vx.len());
            for (i, x) in vx.iter().enumerate() {
                let batch = Tensor::stack(std::slice::from_ref(x))?;
                let logits = model.predict(&batch, OutputKind::Logits)?;
                loss += pixel_cross_entropy(&logits, &vy[i], &weights)?.0;
                let probs = crate::tensor::softmax_rows(&logits)?;
                let k = classes.len() + 1;
                let npx = pw * ph;
                for (p, &label) in vy[i].iter().enumerate() {
                    let arg = (0..k).fold(0, |b, c| if probs.data()[c * npx + p] > probs.data()[b * npx + p] { c } else { b });
                    correct += usize::from(arg == label);
                }
                let preds = decode_instances(probs.data(), k, (pw, ph), (w, h), min_component_area);
                images.push((preds, val_gt[i].clone()));
            }
            m.val_acc = Some(correct as f64 / (vx.len() * pw * ph) as f64);
            m.val_loss = Some(loss / vx.len() as f64);
            m.val_map = map50_95(&images, classes.len())?.overall;
        }
        log::info!("epoch {epoch}: {m:?}");
        let score = m.val_map.or(m.val_acc);
        metrics.push(m);
        if ckpt.offer(score, epoch, &model) {
            break;
        }
    }
    let (_, best_epoch, archive) = ckpt.best.expect("at least one epoch");
    Ok(TrainOutcome {
        archive,
        card: ModelCard {
            model: spec,
            plan: cfg.plan.clone(),
            classes,
        },
        metrics,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SequentialCnnSpec;
    use crate::transforms::tests::noise_image;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            input_size: 32,
            widths: Some(vec![4, 4, 4, 4, 4, 4]),
            batch_size: 4,
            epochs: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_sample_is_memorised() {
        let cfg = TrainConfig {
            learning_rate: 0.2,
            epochs: 50,
            ..tiny_cfg()
        };
        let spec = SequentialCnnSpec {
            widths: vec![8; 6],
            ..SequentialCnnSpec::new(4, 3, 32)
        };
        let mut model = ModelSpec::Sequential(spec).build(3).unwrap();
        let x = vec![fuse_channels(&noise_image(32, 32, 1), &cfg.plan)];
        let (metrics, _, _) = fit_classifier(&mut model, &cfg, (&x, &[2]), (&[], &[])).unwrap();
        let last = metrics.last().unwrap();
        assert_eq!(last.epoch, 50);
        assert!(last.train_loss < 0.01, "{last:?}");
    }

    #[test]
    fn classifier_inputs_are_checked() {
        let crops: Vec<_> = (0..4).map(|i| (noise_image(32, 32, i), Condition::Healthy)).collect();
        assert!(matches!(train_classifier(&tiny_cfg(), &crops, &[]), Err(Error::Data(_))));
        let wrong = vec![(noise_image(40, 40, 0), Condition::Healthy), (noise_image(40, 40, 1), Condition::Stressed)];
        assert!(matches!(train_classifier(&tiny_cfg(), &wrong, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn training_is_reproducible_and_logs_every_epoch() {
        let crops: Vec<_> = (0..8)
            .map(|i| (noise_image(32, 32, i), Condition::CLASSES[i as usize % 3]))
            .collect();
        let a = train_classifier(&tiny_cfg(), &crops[..6], &crops[6..]).unwrap();
        let b = train_classifier(&tiny_cfg(), &crops[..6], &crops[6..]).unwrap();
        assert_eq!(a.archive.to_bytes(), b.archive.to_bytes());
        assert_eq!(a.metrics_jsonl().unwrap(), b.metrics_jsonl().unwrap());
        let lines: Vec<serde_json::Value> = a
            .metrics_jsonl()
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        for key in ["epoch", "train_loss", "val_acc", "val_loss", "val_map"] {
            assert!(lines[0].get(key).is_some(), "{key}");
        }
        assert!(lines[0]["val_map"].is_null());
    }

    #[test]
    fn best_epoch_is_never_worse_than_any_other() {
        let crops: Vec<_> = (0..12)
            .map(|i| (noise_image(32, 32, i), Condition::CLASSES[i as usize % 3]))
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.2,
            epochs: 6,
            ..tiny_cfg()
        };
        let out = train_classifier(&cfg, &crops[..9], &crops[9..]).unwrap();
        let best = out.metrics[out.best_epoch - 1].val_acc.unwrap();
        assert!(out.metrics.iter().all(|m| m.val_acc.unwrap() <= best));
        // the archive really holds the best epoch's weights
        let model = out.model().unwrap();
        let (vx, vy) = fuse_crops(&crops[9..], &cfg).unwrap();
        let acc = classification_report(&predict_probabilities(&model, &vx, 4).unwrap(), &vy).unwrap().accuracy;
        assert_eq!(acc, best);
    }

    #[test]
    fn patience_stops_early() {
        let crops: Vec<_> = (0..6).map(|i| (noise_image(32, 32, i), Condition::CLASSES[i as usize % 2])).collect();
        let cfg = TrainConfig {
            epochs: 20,
            patience: Some(2),
            ..tiny_cfg()
        };
        let out = train_classifier(&cfg, &crops[..4], &crops[4..]).unwrap();
        assert!(out.metrics.len() < 20);
        assert_eq!(out.metrics.len(), out.best_epoch + 2);
    }

    fn square(id: u32, c: Condition, x: f64, y: f64, s: f64) -> Annotation {
        Annotation::new(id, c, vec![[x, y], [x + s, y], [x + s, y + s], [x, y + s]]).unwrap()
    }

    #[test]
    fn label_maps_follow_the_target() {
        let anns = vec![square(1, Condition::Spidermite, 0.0, 0.0, 2.0), square(2, Condition::Unlabeled, 2.0, 2.0, 2.0)];
        let leaf = label_map(4, 4, &anns, SegTarget::Leaf).unwrap();
        assert_eq!(leaf.iter().filter(|&&l| l == 1).count(), 8);
        assert!(label_map(4, 4, &anns, SegTarget::Conditions).is_err());
        let cond = label_map(4, 4, &anns[..1], SegTarget::Conditions).unwrap();
        assert_eq!(cond[0], 3);
        assert_eq!(cond[15], 0);
    }

    #[test]
    fn segmenter_pads_and_trains_deterministically() {
        let scenes: Vec<_> = (0..3)
            .map(|i| (noise_image(20, 18, i), vec![square(1, Condition::Healthy, 2.0, 2.0, 8.0)]))
            .collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            encoder: Some(vec![4, 4]),
            decoder: Some(vec![4, 4]),
            ..TrainConfig::default()
        };
        let a = train_segmenter(&cfg, &scenes[..2], &scenes[2..], SegTarget::Leaf, 4).unwrap();
        let b = train_segmenter(&cfg, &scenes[..2], &scenes[2..], SegTarget::Leaf, 4).unwrap();
        assert_eq!(a.archive.to_bytes(), b.archive.to_bytes());
        assert_eq!(a.model().unwrap().input_shape(), &[4, 20, 20]);
        assert!(a.metrics.iter().all(|m| m.val_acc.is_some()));
        let empty = vec![(noise_image(16, 16, 0), vec![])];
        assert!(train_segmenter(&cfg, &empty, &[], SegTarget::Leaf, 4).is_err());
    }

    #[test]
    fn card_round_trip_and_plan_check() {
        let dir = tempfile::tempdir().unwrap();
        let crops: Vec<_> = (0..4).map(|i| (noise_image(32, 32, i), Condition::CLASSES[i as usize % 2])).collect();
        let out = train_classifier(&TrainConfig { epochs: 1, ..tiny_cfg() }, &crops, &[]).unwrap();
        let w = out.save(dir.path()).unwrap();
        let card = ModelCard::load(ModelCard::path_for(&w)).unwrap();
        assert_eq!(card, out.card);
        let model = card.instantiate(&WeightArchive::load(&w).unwrap()).unwrap();
        assert_eq!(WeightArchive::from_model(&model), out.archive);
        let mut bad = card.clone();
        bad.plan = ChannelPlan::rgb();
        bad.save(dir.path().join("bad.json")).unwrap();
        assert!(matches!(ModelCard::load(dir.path().join("bad.json")), Err(Error::Config(_))));
    }
}
