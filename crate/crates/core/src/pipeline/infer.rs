use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use super::config::{PipelineConfig, PipelineMode};
use super::train::{ModelCard, SegTarget};
use crate::data::{connected_components, Annotation, Condition, DatasetManifest, Mask, RgbnImage, Split};
use crate::error::{Error, Result};
use crate::eval::{map50_95, EvalReport, GroundTruth, InstancePrediction};
use crate::models::ModelSpec;
use crate::surgery::WeightArchive;
use crate::tensor::{ModelGraph, OutputKind, Tensor};
use crate::transforms::{crop_square, fuse_channels, occlude_unlabeled, ChannelPlan};

/// Evaluation classes, in output order.
pub const EVAL_CLASSES: [Condition; 3] = Condition::CLASSES;

/// Anything that turns an image into condition-labelled instances.
pub trait Detector {
    fn detect(&self, image: &RgbnImage) -> Result<Vec<InstancePrediction>>;
}

/// Ground truth for the segmenter's target. Leaf mode counts every instance;
/// condition mode keeps only condition-labelled ones.
pub fn ground_truth(width: usize, height: usize, anns: &[Annotation], target: SegTarget) -> Result<Vec<GroundTruth>> {
    anns.iter()
        .filter_map(|a| {
            let class = match target {
                SegTarget::Leaf => Some(0),
                SegTarget::Conditions => a.condition.class_index(),
            }?;
            Some(a.mask(width, height).map(|mask| GroundTruth { mask, class }))
        })
        .collect()
}

/// Instances from a `[k, ph, pw]` probability map, read over the top-left
/// `w x h` region: per-pixel argmax (ties to the lower channel), then
/// 4-connected components of each non-background channel. Confidence is
/// the component's mean probability for its channel.
pub fn decode_instances(
    probs: &[f64],
    k: usize,
    (pw, ph): (usize, usize),
    (w, h): (usize, usize),
    min_area: usize,
) -> Vec<InstancePrediction> {
    let npx = pw * ph;
    debug_assert_eq!(probs.len(), k * npx);
    let at = |c: usize, x: usize, y: usize| probs[c * npx + y * pw + x];
    let mut arg = vec![0usize; w * h];
    for y in 0..h {
        for x in 0..w {
            arg[y * w + x] = (0..k).fold(0, |b, c| if at(c, x, y) > at(b, x, y) { c } else { b });
        }
    }
    let mut out = Vec::new();
    for c in 1..k {
        let mask = Mask::from_data(w, h, arg.iter().map(|&a| a == c).collect()).expect("sized above");
        for comp in connected_components(&mask) {
            if comp.len() < min_area.max(1) {
                continue;
            }
            let conf = comp.iter().map(|&i| at(c, i % w, i / w)).sum::<f64>() / comp.len() as f64;
            out.push(InstancePrediction {
                mask: Mask::from_indices(w, h, &comp),
                class: c - 1,
                confidence: conf,
            });
        }
    }
    out
}

fn load_card_and_model(archive_path: &Path) -> Result<(ModelCard, ModelGraph)> {
    let card = ModelCard::load(ModelCard::path_for(archive_path))?;
    let model = card.instantiate(&WeightArchive::load(archive_path)?)?;
    Ok((card, model))
}

/// FCN plus the description of its output channels.
#[derive(Debug, Clone)]
pub struct Segmenter {
    model: ModelGraph,
    card: ModelCard,
    divisor: usize,
}

impl Segmenter {
    pub fn new(model: ModelGraph, card: ModelCard) -> Result<Self> {
        let ModelSpec::Fcn(spec) = &card.model else {
            return Err(Error::Config("segmenter archive does not describe an FCN".into()));
        };
        let divisor = spec.divisor();
        Ok(Segmenter { model, card, divisor })
    }

    pub fn load(archive_path: impl AsRef<Path>) -> Result<Self> {
        let (card, model) = load_card_and_model(archive_path.as_ref())?;
        Self::new(model, card)
    }

    pub fn card(&self) -> &ModelCard {
        &self.card
    }

    /// Class probabilities `[k, ph, pw]` of the padded image and the padded size.
    pub fn probabilities(&self, image: &RgbnImage) -> Result<(Tensor, (usize, usize))> {
        let d = self.divisor;
        let (pw, ph) = (image.width().div_ceil(d) * d, image.height().div_ceil(d) * d);
        let x = fuse_channels(&image.pad_to(pw, ph), &self.card.plan);
        let c = self.card.plan.channels();
        let batch = x.reshape(vec![1, c, ph, pw])?;
        let probs = if self.model.input_shape() == [c, ph, pw] {
            self.model.predict(&batch, OutputKind::Probabilities)?
        } else {
            let mut m = self.model.clone();
            m.set_input_shape(vec![c, ph, pw])?;
            m.predict(&batch, OutputKind::Probabilities)?
        };
        let k = probs.shape()[1];
        Ok((probs.reshape(vec![k, ph, pw])?, (pw, ph)))
    }
}

#[derive(Debug, Clone)]
pub struct Classifier {
    model: ModelGraph,
    card: ModelCard,
    input_size: usize,
}

impl Classifier {
    pub fn new(model: ModelGraph, card: ModelCard) -> Result<Self> {
        let input_size = match &card.model {
            ModelSpec::Sequential(s) => s.input_size,
            ModelSpec::Resnet15(s) => s.input_size,
            ModelSpec::Fcn(_) => return Err(Error::Config("classifier archive describes an FCN".into())),
        };
        if card.classes != EVAL_CLASSES {
            return Err(Error::Config("classifier must output the three condition classes".into()));
        }
        Ok(Classifier {
            model,
            card,
            input_size,
        })
    }

    pub fn load(archive_path: impl AsRef<Path>) -> Result<Self> {
        let (card, model) = load_card_and_model(archive_path.as_ref())?;
        Self::new(model, card)
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn plan(&self) -> &ChannelPlan {
        &self.card.plan
    }

    /// Class probabilities of one `input_size` square crop.
    pub fn classify(&self, crop: &RgbnImage) -> Result<Vec<f64>> {
        let x = fuse_channels(crop, &self.card.plan);
        let shape = [vec![1], x.shape().to_vec()].concat();
        let p = self.model.predict(&x.reshape(shape)?, OutputKind::Probabilities)?;
        Ok(p.into_data())
    }
}

/// One FCN predicting background plus condition classes.
#[derive(Debug, Clone)]
pub struct SingleStage {
    pub segmenter: Segmenter,
    pub min_component_area: usize,
}

impl SingleStage {
    pub fn new(segmenter: Segmenter, min_component_area: usize) -> Result<Self> {
        if segmenter.card.classes != EVAL_CLASSES {
            return Err(Error::Config("single-stage segmenter must predict the three condition classes".into()));
        }
        Ok(SingleStage {
            segmenter,
            min_component_area,
        })
    }
}

impl Detector for SingleStage {
    fn detect(&self, image: &RgbnImage) -> Result<Vec<InstancePrediction>> {
        let (probs, padded) = self.segmenter.probabilities(image)?;
        let k = probs.shape()[0];
        Ok(decode_instances(
            probs.data(),
            k,
            padded,
            (image.width(), image.height()),
            self.min_component_area,
        ))
    }
}

/// Leaf segmentation, then one classifier call per leaf component.
#[derive(Debug)]
pub struct TwoStage {
    pub segmenter: Segmenter,
    pub classifier: Classifier,
    pub min_component_area: usize,
    pub threshold: f64,
    pub mask_fill: bool,
    calls: AtomicUsize,
}

impl TwoStage {
    pub fn new(segmenter: Segmenter, classifier: Classifier, min_component_area: usize, threshold: f64, mask_fill: bool) -> Result<Self> {
        if segmenter.card.plan != classifier.card.plan {
            return Err(Error::Config(format!(
                "segmenter plan {} and classifier plan {} differ",
                segmenter.card.plan, classifier.card.plan
            )));
        }
        Ok(TwoStage {
            segmenter,
            classifier,
            min_component_area,
            threshold,
            mask_fill,
            calls: AtomicUsize::new(0),
        })
    }

    /// Classifier invocations since construction.
    pub fn classifier_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Per-pixel leaf probability (one minus background) over the image.
    pub fn leaf_probability(&self, image: &RgbnImage) -> Result<Vec<f64>> {
        let (probs, (pw, _)) = self.segmenter.probabilities(image)?;
        let (w, h) = (image.width(), image.height());
        let bg = probs.data();
        Ok((0..w * h).map(|i| 1.0 - bg[(i / w) * pw + i % w]).collect())
    }
}

impl Detector for TwoStage {
    fn detect(&self, image: &RgbnImage) -> Result<Vec<InstancePrediction>> {
        let (w, h) = (image.width(), image.height());
        let leaf = self.leaf_probability(image)?;
        let mask = Mask::from_data(w, h, leaf.iter().map(|&p| p >= self.threshold).collect())?;
        let mut out = Vec::new();
        for comp in connected_components(&mask) {
            if comp.len() < self.min_component_area.max(1) {
                continue;
            }
            let m = Mask::from_indices(w, h, &comp);
            let (x0, y0, x1, y1) = m.bbox().expect("non-empty component");
            let source = if self.mask_fill {
                let mut filled = image.clone();
                for (i, _) in m.data().iter().enumerate().filter(|(_, &v)| !v) {
                    filled.blacken(i % w, i / w);
                }
                filled
            } else {
                image.clone()
            };
            let bbox = (x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64);
            let crop = crop_square(&source, bbox, self.classifier.input_size).expect("component box is non-empty");
            let probs = self.classifier.classify(&crop)?;
            self.calls.fetch_add(1, Ordering::Relaxed);
            let class = (0..probs.len()).fold(0, |b, c| if probs[c] > probs[b] { c } else { b });
            let mean_leaf = comp.iter().map(|&i| leaf[i]).sum::<f64>() / comp.len() as f64;
            out.push(InstancePrediction {
                mask: m,
                class,
                confidence: (mean_leaf * probs[class]).clamp(0.0, 1.0),
            });
        }
        Ok(out)
    }
}

/// A detector assembled from a pipeline config.
#[derive(Debug)]
pub enum Pipeline {
    Single(SingleStage),
    Two(TwoStage),
}

impl Pipeline {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let segmenter = Segmenter::load(&cfg.segmenter)?;
        Ok(match cfg.mode {
            PipelineMode::SingleStage => Pipeline::Single(SingleStage::new(segmenter, cfg.min_component_area)?),
            PipelineMode::TwoStage => {
                let path = cfg.classifier.as_ref().expect("validated");
                Pipeline::Two(TwoStage::new(
                    segmenter,
                    Classifier::load(path)?,
                    cfg.min_component_area,
                    cfg.threshold,
                    cfg.mask_fill,
                )?)
            }
        })
    }
}

impl Detector for Pipeline {
    fn detect(&self, image: &RgbnImage) -> Result<Vec<InstancePrediction>> {
        match self {
            Pipeline::Single(p) => p.detect(image),
            Pipeline::Two(p) => p.detect(image),
        }
    }
}

/// Images of one split with unlabeled instances blacked out and dropped,
/// the protocol under which both topologies are compared.
pub fn occluded_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<(RgbnImage, Vec<Annotation>)>> {
    manifest
        .indices_in(split)
        .into_iter()
        .map(|i| occlude_unlabeled(&manifest.load_image(i)?, &manifest.records[i].annotations))
        .collect()
}

/// Runs `detector` over every sample and scores the condition classes.
/// Inference time is wall clock around `detect` only, after one untimed
/// warm-up call.
pub fn evaluate_pipeline(detector: &dyn Detector, samples: &[(RgbnImage, Vec<Annotation>)]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    // untimed warm-up so the first image does not pay for cold caches
    detector.detect(&samples[0].0)?;
    let mut images = Vec::with_capacity(samples.len());
    let mut elapsed = 0.0;
    for (img, anns) in samples {
        let gts = ground_truth(img.width(), img.height(), anns, SegTarget::Conditions)?;
        let t = Instant::now();
        let preds = detector.detect(img)?;
        elapsed += t.elapsed().as_secs_f64();
        images.push((preds, gts));
    }
    let summary = map50_95(&images, EVAL_CLASSES.len())?;
    let names: Vec<&str> = EVAL_CLASSES.iter().map(|c| c.as_str()).collect();
    Ok(EvalReport::from_summary(
        &summary,
        &names,
        Some(1000.0 * elapsed / samples.len() as f64),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Plane;
    use crate::models::FcnSegmenterSpec;
    use crate::models::SequentialCnnSpec;
    use crate::transforms::tests::noise_image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(id: u32, c: Condition, x: f64, y: f64, s: f64) -> Annotation {
        Annotation::new(id, c, vec![[x, y], [x + s, y], [x + s, y + s], [x, y + s]]).unwrap()
    }

    /// Feeds ground truth back as predictions.
    struct Oracle;

    impl Detector for Oracle {
        fn detect(&self, image: &RgbnImage) -> Result<Vec<InstancePrediction>> {
            // the test scenes encode their annotation in the image meta
            let anns: Vec<Annotation> = serde_json::from_str(&image.meta.source_id)?;
            Ok(ground_truth(image.width(), image.height(), &anns, SegTarget::Conditions)?
                .into_iter()
                .map(|g| InstancePrediction {
                    mask: g.mask,
                    class: g.class,
                    confidence: 0.9,
                })
                .collect())
        }
    }

    #[test]
    fn oracle_pipeline_scores_one() {
        let samples: Vec<_> = (0..3)
            .map(|i| {
                let anns = vec![
                    square(1, Condition::CLASSES[i], 1.0, 1.0, 5.0),
                    square(2, Condition::Spidermite, 9.0, 9.0, 4.0),
                ];
                let mut img = noise_image(16, 16, i as u64);
                img.meta.source_id = serde_json::to_string(&anns).unwrap();
                (img, anns)
            })
            .collect();
        let r = evaluate_pipeline(&Oracle, &samples).unwrap();
        assert_eq!(r.map_all, Some(1.0));
        for c in ["healthy", "stressed", "spidermite"] {
            assert_eq!(r.map_per_class[c], Some(1.0));
        }
        assert!(r.inference_ms.unwrap() >= 0.0);
        assert!(evaluate_pipeline(&Oracle, &[]).is_err());
    }

    #[test]
    fn decode_splits_components_and_drops_small_ones() {
        // 2 channels over a 6x4 map padded to 8x4
        let (pw, ph) = (8, 4);
        let mut probs = vec![0.0; 2 * pw * ph];
        let mut set = |x: usize, y: usize, p: f64| {
            probs[y * pw + x] = 1.0 - p;
            probs[pw * ph + y * pw + x] = p;
        };
        for y in 0..4 {
            for x in 0..8 {
                set(x, y, 0.1);
            }
        }
        for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            set(x, y, 0.8);
        }
        set(4, 3, 0.6);
        // padding column, outside the image
        set(7, 0, 0.9);
        let preds = decode_instances(&probs, 2, (pw, ph), (6, 4), 1);
        assert_eq!(preds.len(), 2);
        assert_eq!(preds[0].mask.count(), 4);
        assert!((preds[0].confidence - 0.8).abs() < 1e-12);
        assert_eq!(decode_instances(&probs, 2, (pw, ph), (6, 4), 2).len(), 1);
    }

    fn zero_weights(m: &mut ModelGraph) {
        for (_, t) in m.parameters_mut() {
            t.data_mut().fill(0.0);
        }
    }

    fn card(model: ModelSpec, classes: Vec<Condition>) -> ModelCard {
        ModelCard {
            model,
            plan: ChannelPlan::rgbn(),
            classes,
        }
    }

    /// Segmenter whose head says "leaf" wherever the R plane is bright.
    fn bright_leaf_segmenter(classes: Vec<Condition>) -> Segmenter {
        let spec = FcnSegmenterSpec {
            encoder: vec![2],
            decoder: vec![2],
            ..FcnSegmenterSpec::new(4, classes.len(), 16, 16)
        };
        let mut model = spec.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        zero_weights(&mut model);
        // enc1 channel 0 copies R (kernel centre), dec1 channel 0 copies it
        // back after up-sampling, the head turns it into a large leaf logit
        for (name, t) in model.parameters_mut() {
            let d = t.data_mut();
            match name.as_str() {
                "enc1.weight" => d[4] = 1.0,
                "dec1.weight" => d[4] = 1.0,
                "head.weight" => d[2] = 40.0,
                "head.bias" => d[0] = 10.0,
                _ => {}
            }
        }
        Segmenter::new(model, card(ModelSpec::Fcn(spec), classes)).unwrap()
    }

    fn zero_classifier() -> Classifier {
        let spec = SequentialCnnSpec {
            widths: vec![2; 6],
            hidden: 4,
            ..SequentialCnnSpec::new(4, 3, 32)
        };
        let mut model = spec.build(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        zero_weights(&mut model);
        Classifier::new(model, card(ModelSpec::Sequential(spec), EVAL_CLASSES.to_vec())).unwrap()
    }

    fn two_blobs() -> RgbnImage {
        let mut img = RgbnImage::new(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                if (x < 6 && y < 6) || (x >= 10 && y >= 9) {
                    img.plane_mut(Plane::R)[y * 16 + x] = 1.0;
                }
            }
        }
        img
    }

    #[test]
    fn two_stage_calls_the_classifier_once_per_component() {
        let p = TwoStage::new(bright_leaf_segmenter(vec![Condition::Leaf]), zero_classifier(), 10, 0.5, false).unwrap();
        assert!(p.detect(&RgbnImage::new(16, 16)).unwrap().is_empty());
        assert_eq!(p.classifier_calls(), 0);
        let img = two_blobs();
        let preds = p.detect(&img).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(p.classifier_calls(), 2);
        let leaf = p.leaf_probability(&img).unwrap();
        for pr in &preds {
            // masks only cover confident leaf pixels; zero classifier is uniform
            assert!(pr.mask.data().iter().zip(&leaf).all(|(&m, &l)| !m || l >= 0.5));
            assert!((0.0..=1.0).contains(&pr.confidence));
            assert_eq!(pr.class, 0);
            assert!(pr.confidence <= 1.0 / 3.0 + 1e-12);
        }
        let mut fill = p;
        fill.mask_fill = true;
        assert_eq!(fill.detect(&img).unwrap().len(), 2);
    }

    #[test]
    fn single_stage_reads_classes_from_the_map() {
        let p = SingleStage::new(bright_leaf_segmenter(EVAL_CLASSES.to_vec()), 10).unwrap();
        assert!(p.detect(&RgbnImage::new(16, 16)).unwrap().is_empty());
        let preds = p.detect(&two_blobs()).unwrap();
        assert_eq!(preds.len(), 2);
        assert!(preds.iter().all(|pr| pr.class == 0));
        assert!(SingleStage::new(bright_leaf_segmenter(vec![Condition::Leaf]), 10).is_err());
    }

    #[test]
    fn stage_plans_must_agree() {
        let mut cls = zero_classifier();
        cls.card.plan = ChannelPlan::rgb();
        assert!(TwoStage::new(bright_leaf_segmenter(vec![Condition::Leaf]), cls, 10, 0.5, false).is_err());
    }
}
