//! Seeded synthetic RGBN leaf scenes.
//!
//! Healthy and spider-mite leaves share one RGB colour distribution and
//! differ only in NIR reflectance; stressed leaves are shifted toward yellow.
//! Leaves are ellipses drawn back to front with hard edges, and each
//! annotation is the exact visible region of its leaf.

use std::path::Path;
use std::str::FromStr;

use geo::{Area, BooleanOps, Coord, Intersects, LineString, MultiPolygon, Polygon};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    bounding_box, rasterize, save_rgbn, Annotation, Condition, DatasetManifest, Plane, Point, Record, RgbnImage,
};
use crate::error::{Error, Result};
use crate::transforms::{extract_crops, CropRecord};

const ELLIPSE_VERTICES: usize = 24;
const PLACEMENT_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of leaves per scene.
    pub leaf_count: (usize, usize),
    /// Major semi-axis as a fraction of the shorter image side.
    pub leaf_size: (f64, f64),
    /// Minor / major axis ratio.
    pub aspect: (f64, f64),
    /// Probabilities of healthy, stressed, spidermite.
    pub class_mix: [f64; 3],
    pub unlabeled_fraction: f64,
    /// Mean NIR reflectance of healthy, stressed, spidermite leaves.
    pub nir_means: [f64; 3],
    pub nir_sigma: f64,
    /// Base leaf colour (RGB), jittered per leaf.
    pub leaf_rgb: [f64; 3],
    pub leaf_rgb_jitter: f64,
    /// Hue rotation toward yellow for stressed leaves, in turns.
    pub stressed_hue_shift: f64,
    pub pixel_noise: f64,
    pub background_rgb: [f64; 3],
    pub background_nir: f64,
    pub background_noise: f64,
    /// A leaf must keep this share of its area visible...
    pub min_visible_share: f64,
    /// ...and at least this many square pixels.
    pub min_visible_px: f64,
    /// When set, leaves keep about this many pixels apart instead of
    /// occluding each other.
    pub leaf_gap: Option<f64>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 480,
            height: 360,
            leaf_count: (8, 14),
            leaf_size: (0.06, 0.12),
            aspect: (0.5, 0.8),
            class_mix: [0.27, 0.25, 0.48],
            unlabeled_fraction: 0.0,
            nir_means: [0.80, 0.75, 0.50],
            nir_sigma: 0.05,
            leaf_rgb: [0.22, 0.52, 0.16],
            leaf_rgb_jitter: 0.05,
            stressed_hue_shift: 0.15,
            pixel_noise: 0.02,
            background_rgb: [0.36, 0.27, 0.18],
            background_nir: 0.25,
            background_noise: 0.04,
            min_visible_share: 0.4,
            min_visible_px: 40.0,
            leaf_gap: None,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("scene size {}x{}", self.width, self.height));
        }
        let (lo, hi) = self.leaf_count;
        if lo == 0 || lo > hi {
            return bad(format!("leaf count range {lo}..={hi}"));
        }
        let mix: f64 = self.class_mix.iter().sum();
        if (mix - 1.0).abs() > 1e-9 || self.class_mix.iter().any(|&p| p < 0.0) {
            return bad(format!("class mix {:?} does not sum to 1", self.class_mix));
        }
        if !(0.0..1.0).contains(&self.unlabeled_fraction) {
            return bad(format!("unlabeled fraction {} not in [0, 1)", self.unlabeled_fraction));
        }
        if self.nir_means.iter().any(|&m| !(m > 0.0 && m < 1.0)) {
            return bad(format!("NIR means {:?} must lie in (0, 1)", self.nir_means));
        }
        let ranges = [self.leaf_size, self.aspect];
        if ranges.iter().any(|&(a, b)| !(a > 0.0 && a <= b)) || self.aspect.1 > 1.0 {
            return bad("leaf size and aspect ranges must be positive and ordered".into());
        }
        // area guard: the smallest leaves must fit side by side
        let side = self.width.min(self.height) as f64;
        let a = self.leaf_size.0 * side;
        let leaf_area = std::f64::consts::PI * a * a * self.aspect.0;
        if 2.0 * self.leaf_size.1 * side > side || lo as f64 * leaf_area > (self.width * self.height) as f64 {
            return Err(Error::InvalidArgument(format!(
                "{lo} leaves cannot fit in a {}x{} scene",
                self.width, self.height
            )));
        }
        if self.leaf_gap.is_some_and(|g| !(g >= 0.0)) {
            return bad("leaf_gap must be non-negative".into());
        }
        if self.min_visible_px > leaf_area {
            return bad("min_visible_px exceeds the smallest leaf".into());
        }
        Ok(())
    }
}

/// A generated scene. `true_classes[i]` is the hidden condition of
/// `annotations[i]`, including leaves tagged unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: RgbnImage,
    pub annotations: Vec<Annotation>,
    pub true_classes: Vec<Condition>,
}

struct Leaf {
    visible: MultiPolygon<f64>,
    bbox: (f64, f64, f64, f64),
    area: f64,
}

fn ellipse(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Vec<Point> {
    let (s, c) = theta.sin_cos();
    (0..ELLIPSE_VERTICES)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / ELLIPSE_VERTICES as f64;
            let (x, y) = (a * t.cos(), b * t.sin());
            [cx + x * c - y * s, cy + x * s + y * c]
        })
        .collect()
}

fn to_geo(points: &[Point]) -> Polygon<f64> {
    let ring: Vec<Coord<f64>> = points.iter().map(|p| Coord { x: p[0], y: p[1] }).collect();
    Polygon::new(LineString::from(ring), vec![])
}

fn overlaps(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    a.0 < b.2 && b.0 < a.2 && a.1 < b.3 && b.1 < a.3
}

fn sample_class<R: Rng + ?Sized>(mix: &[f64; 3], rng: &mut R) -> Condition {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in mix.iter().enumerate() {
        acc += p;
        if u < acc {
            return Condition::CLASSES[i];
        }
    }
    Condition::CLASSES[2]
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Renders one scene; identical `(spec, seed)` give identical output.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let side = w.min(h);
    let target = rng.random_range(spec.leaf_count.0..=spec.leaf_count.1);

    // place leaves back to front; a new leaf is kept only if every leaf
    // behind it still shows one solid region
    let mut leaves: Vec<Leaf> = Vec::with_capacity(target);
    while leaves.len() < target {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let a = rng.random_range(spec.leaf_size.0..=spec.leaf_size.1) * side;
            let b = a * rng.random_range(spec.aspect.0..=spec.aspect.1);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let cx = rng.random_range(a..=w - a);
            let cy = rng.random_range(a..=h - a);
            let pts = ellipse(cx, cy, a, b, theta);
            let outline = to_geo(&pts);
            let bbox = bounding_box(&pts);
            let area = outline.unsigned_area();
            if let Some(g) = spec.leaf_gap {
                let halo = to_geo(&ellipse(cx, cy, a + g, b + g, theta));
                let (x0, y0, x1, y1) = bbox;
                let grown = (x0 - g, y0 - g, x1 + g, y1 + g);
                if leaves.iter().any(|l| overlaps(l.bbox, grown) && l.visible.intersects(&halo)) {
                    continue;
                }
            }
            let mut updates = Vec::new();
            let ok = leaves.iter().enumerate().all(|(i, leaf)| {
                if !overlaps(leaf.bbox, bbox) {
                    return true;
                }
                let vis = leaf.visible.difference(&outline);
                let good = solid_enough(&vis, leaf.area, spec);
                updates.push((i, vis));
                good
            });
            if ok {
                for (i, vis) in updates {
                    leaves[i].visible = vis;
                }
                leaves.push(Leaf {
                    visible: MultiPolygon::new(vec![outline]),
                    bbox,
                    area,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            if leaves.len() >= spec.leaf_count.0 {
                break;
            }
            return Err(Error::InvalidArgument(format!(
                "could not place {} leaves in a {}x{} scene",
                spec.leaf_count.0, spec.width, spec.height
            )));
        }
    }

    let n = leaves.len();
    let classes: Vec<Condition> = (0..n).map(|_| sample_class(&spec.class_mix, &mut rng)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_unlabeled = (spec.unlabeled_fraction * n as f64).round() as usize;
    let mut unlabeled = vec![false; n];
    for &i in &order[..n_unlabeled] {
        unlabeled[i] = true;
    }

    let jitter = Normal::new(0.0, spec.leaf_rgb_jitter.max(1e-12)).expect("finite sigma");
    let nir_noise = Normal::new(0.0, spec.nir_sigma.max(1e-12)).expect("finite sigma");
    let looks: Vec<([f64; 3], f64)> = classes
        .iter()
        .map(|&c| {
            let mut rgb = spec.leaf_rgb.map(|v| (v + jitter.sample(&mut rng)).clamp(0.02, 0.98));
            if c == Condition::Stressed {
                let mut hsv = rgb_to_hsv(rgb);
                hsv[0] -= spec.stressed_hue_shift;
                rgb = hsv_to_rgb(hsv);
            }
            let idx = c.class_index().expect("condition class");
            let nir = (spec.nir_means[idx] + nir_noise.sample(&mut rng)).clamp(0.02, 0.98);
            (rgb, nir)
        })
        .collect();

    // background
    let pixel = Normal::new(0.0, spec.pixel_noise.max(1e-12)).expect("finite sigma");
    let bg = Normal::new(0.0, spec.background_noise.max(1e-12)).expect("finite sigma");
    let npx = spec.width * spec.height;
    let mut base = [spec.background_rgb[0], spec.background_rgb[1], spec.background_rgb[2], spec.background_nir];
    let mut planes: [Vec<f32>; 4] = Default::default();
    for p in planes.iter_mut() {
        p.reserve_exact(npx);
    }
    for _ in 0..npx {
        let shade = bg.sample(&mut rng);
        for (c, p) in planes.iter_mut().enumerate() {
            p.push((base[c] + shade + 0.25 * bg.sample(&mut rng)).clamp(0.0, 1.0) as f32);
        }
    }

    // leaves, visible regions only
    let mut annotations = Vec::with_capacity(n);
    for (i, leaf) in leaves.iter().enumerate() {
        let poly = &leaf.visible.0[0];
        let mut pts: Vec<Point> = poly.exterior().coords().map(|c| [c.x, c.y]).collect();
        if pts.len() > 1 && pts.first() == pts.last() {
            pts.pop();
        }
        let mask = rasterize(&pts, spec.width, spec.height)?;
        let (rgb, nir) = looks[i];
        base = [rgb[0], rgb[1], rgb[2], nir];
        for (idx, _) in mask.data().iter().enumerate().filter(|(_, &m)| m) {
            for (c, p) in planes.iter_mut().enumerate() {
                p[idx] = (base[c] + pixel.sample(&mut rng)).clamp(0.0, 1.0) as f32;
            }
        }
        let condition = if unlabeled[i] { Condition::Unlabeled } else { classes[i] };
        annotations.push(Annotation {
            id: i as u32 + 1,
            condition,
            polygon: pts,
        });
    }
    let mut image = RgbnImage::from_planes(spec.width, spec.height, planes)?;
    image.quantize();
    image.meta.source_id = format!("synth-{seed}");
    Ok(Scene {
        image,
        annotations,
        true_classes: classes,
    })
}

fn solid_enough(vis: &MultiPolygon<f64>, full_area: f64, spec: &SceneSpec) -> bool {
    match vis.0.as_slice() {
        [p] => {
            let a = p.unsigned_area();
            p.interiors().is_empty() && a >= spec.min_visible_share * full_area && a >= spec.min_visible_px
        }
        _ => false,
    }
}

/// Writes `n_scenes` PNG pairs and `manifest.json` into `out_dir`. Scene
/// `i` uses seed `seed + i`; records are left without a split.
pub fn generate_dataset(spec: &SceneSpec, n_scenes: usize, out_dir: impl AsRef<Path>, seed: u64) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = DatasetManifest::new(seed);
    for i in 0..n_scenes {
        let scene = generate_scene(spec, seed.wrapping_add(i as u64))?;
        let rgb = format!("scene_{i:04}.png");
        let nir = format!("scene_{i:04}_nir.png");
        save_rgbn(&scene.image, out_dir.join(&rgb), out_dir.join(&nir))?;
        manifest.records.push(Record {
            rgb,
            nir,
            split: Default::default(),
            annotations: scene.annotations,
        });
    }
    manifest.root = out_dir.to_path_buf();
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Named generator settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 5 training and 2 validation scenes with unlabeled leaves.
    TinyOccluded,
    /// 32 scenes at 480x360.
    PaperScale,
    /// 600 single-leaf crops at 64x64.
    CropBench,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny-occluded" => Ok(Preset::TinyOccluded),
            "paper-scale" => Ok(Preset::PaperScale),
            "crop-bench" => Ok(Preset::CropBench),
            other => Err(Error::InvalidArgument(format!("unknown preset `{other}`"))),
        }
    }
}

impl Preset {
    pub fn spec(self) -> SceneSpec {
        match self {
            Preset::TinyOccluded => SceneSpec {
                unlabeled_fraction: 0.3,
                ..SceneSpec::default()
            },
            Preset::PaperScale => SceneSpec::default(),
            Preset::CropBench => crop_bench_spec(),
        }
    }

    /// Scene count, or crop count for `CropBench`.
    pub fn count(self) -> usize {
        match self {
            Preset::TinyOccluded => 7,
            Preset::PaperScale => 32,
            Preset::CropBench => 600,
        }
    }

    /// Training scene count for presets that ship a fixed split.
    pub fn train_scenes(self) -> Option<usize> {
        (self == Preset::TinyOccluded).then_some(5)
    }
}

pub const CROP_BENCH_SIZE: usize = 64;

/// Scenes for crop datasets: few, large, fully labelled leaves.
pub fn crop_bench_spec() -> SceneSpec {
    SceneSpec {
        width: 160,
        height: 160,
        leaf_count: (3, 6),
        leaf_size: (0.12, 0.2),
        ..SceneSpec::default()
    }
}

/// The first `n_crops` leaf crops from scenes `seed, seed + 1, ...`.
pub fn crop_bench(spec: &SceneSpec, n_crops: usize, size: usize, seed: u64) -> Result<Vec<CropRecord>> {
    let mut crops = Vec::with_capacity(n_crops);
    let mut i = 0u64;
    while crops.len() < n_crops {
        let scene = generate_scene(spec, seed.wrapping_add(i))?;
        let mut batch = extract_crops(&scene.image, &scene.annotations, size, i as usize)?;
        for c in &mut batch {
            c.image.quantize();
        }
        crops.extend(batch);
        i += 1;
    }
    crops.truncate(n_crops);
    Ok(crops)
}

/// Best balanced accuracy of a single threshold on a per-leaf mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub healthy: usize,
    pub spidermite: usize,
    pub nir_accuracy: f64,
    /// R, G, B in that order.
    pub rgb_accuracy: [f64; 3],
}

impl ProbeReport {
    pub fn best_rgb(&self) -> f64 {
        self.rgb_accuracy.iter().copied().fold(0.0, f64::max)
    }
}

pub const PROBE_MIN_PER_CLASS: usize = 20;

/// Per-instance plane means of healthy and spidermite leaves.
pub fn instance_means(image: &RgbnImage, annotations: &[Annotation]) -> Result<Vec<(Condition, [f64; 4])>> {
    let mut out = Vec::new();
    for a in annotations {
        if !matches!(a.condition, Condition::Healthy | Condition::Spidermite) {
            continue;
        }
        let mask = a.mask(image.width(), image.height())?;
        let n = mask.count();
        if n == 0 {
            continue;
        }
        let mut m = [0.0; 4];
        for (c, p) in Plane::ALL.iter().enumerate() {
            let plane = image.plane(*p);
            m[c] = mask.data().iter().zip(plane).filter(|(&k, _)| k).map(|(_, &v)| f64::from(v)).sum::<f64>()
                / n as f64;
        }
        out.push((a.condition, m));
    }
    Ok(out)
}

/// How well one threshold on each plane's per-leaf mean separates healthy
/// from spidermite leaves, as balanced accuracy.
pub fn separability_probe_means(means: &[(Condition, [f64; 4])]) -> Result<ProbeReport> {
    let healthy = means.iter().filter(|m| m.0 == Condition::Healthy).count();
    let spidermite = means.len() - healthy;
    if healthy < PROBE_MIN_PER_CLASS || spidermite < PROBE_MIN_PER_CLASS {
        return Err(Error::Data(format!(
            "probe needs {PROBE_MIN_PER_CLASS} leaves per class, got {healthy} healthy / {spidermite} spidermite"
        )));
    }
    let best = |c: usize| {
        let mut v: Vec<(f64, bool)> = means.iter().map(|m| (m.1[c], m.0 == Condition::Healthy)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (nh, ns) = (healthy as f64, spidermite as f64);
        let (mut h_below, mut s_below) = (0.0, 0.0);
        let mut best: f64 = 0.5;
        let mut k = 0;
        // thresholds only fall between distinct values
        while k < v.len() {
            let x = v[k].0;
            while k < v.len() && v[k].0 == x {
                if v[k].1 {
                    h_below += 1.0;
                } else {
                    s_below += 1.0;
                }
                k += 1;
            }
            let low_is_spidermite = 0.5 * (s_below / ns + (nh - h_below) / nh);
            best = best.max(low_is_spidermite).max(1.0 - low_is_spidermite);
        }
        best
    };
    Ok(ProbeReport {
        healthy,
        spidermite,
        nir_accuracy: best(3),
        rgb_accuracy: [best(0), best(1), best(2)],
    })
}

pub fn separability_probe(manifest: &DatasetManifest) -> Result<ProbeReport> {
    let mut means = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        means.extend(instance_means(&manifest.load_image(i)?, &r.annotations)?);
    }
    separability_probe_means(&means)
}
