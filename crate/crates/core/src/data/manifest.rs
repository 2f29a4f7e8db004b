use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::raster::{rasterize, Mask, Point};
use super::rgbn::{load_rgbn, RgbnImage};
use crate::error::{Error, Result};

/// Leaf condition, or one of the two non-condition tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Healthy,
    Stressed,
    Spidermite,
    /// Class-agnostic leaf; only in consolidated manifests.
    Leaf,
    /// Leaf without condition ground truth.
    Unlabeled,
}

impl Condition {
    /// The three condition classes, in class-index order.
    pub const CLASSES: [Condition; 3] = [Condition::Healthy, Condition::Stressed, Condition::Spidermite];

    pub fn class_index(self) -> Option<usize> {
        Self::CLASSES.iter().position(|&c| c == self)
    }

    pub fn from_class_index(i: usize) -> Option<Condition> {
        Self::CLASSES.get(i).copied()
    }

    pub fn is_condition(self) -> bool {
        self.class_index().is_some()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Healthy => "healthy",
            Condition::Stressed => "stressed",
            Condition::Spidermite => "spidermite",
            Condition::Leaf => "leaf",
            Condition::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "healthy" => Condition::Healthy,
            "stressed" => Condition::Stressed,
            "spidermite" => Condition::Spidermite,
            "leaf" => Condition::Leaf,
            "unlabeled" => Condition::Unlabeled,
            other => return Err(Error::Data(format!("unknown class `{other}`"))),
        })
    }
}

/// One polygon instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u32,
    #[serde(rename = "class")]
    pub condition: Condition,
    pub polygon: Vec<Point>,
}

impl Annotation {
    pub fn new(id: u32, condition: Condition, polygon: Vec<Point>) -> Result<Self> {
        if polygon.len() < 3 {
            return Err(Error::Data(format!(
                "annotation {id}: polygon has {} vertices",
                polygon.len()
            )));
        }
        Ok(Annotation {
            id,
            condition,
            polygon,
        })
    }

    pub fn mask(&self, width: usize, height: usize) -> Result<Mask> {
        rasterize(&self.polygon, width, height)
    }

    /// Vertices clamped into `[0, width] x [0, height]`.
    pub fn clamped(&self, width: usize, height: usize) -> Annotation {
        let mut a = self.clone();
        for p in &mut a.polygon {
            p[0] = p[0].clamp(0.0, width as f64);
            p[1] = p[1].clamp(0.0, height as f64);
        }
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    None,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            "none" => Split::None,
            other => return Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub rgb: String,
    pub nir: String,
    #[serde(default)]
    pub split: Split,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

impl Record {
    /// Most frequent condition class among the annotations (ties to the
    /// lower class index).
    pub fn dominant_condition(&self) -> Option<Condition> {
        let mut counts = [0usize; 3];
        for a in &self.annotations {
            if let Some(i) = a.condition.class_index() {
                counts[i] += 1;
            }
        }
        let (best, &n) = counts
            .iter()
            .enumerate()
            .rev()
            .max_by_key(|(_, &n)| n)
            .expect("three classes");
        (n > 0).then(|| Condition::CLASSES[best])
    }
}

/// Partially labelled dataset: image pairs, annotations and split tags.
///
/// Paths are stored relative to the directory holding the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub seed: u64,
    pub records: Vec<Record>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(seed: u64) -> Self {
        DatasetManifest {
            classes: Condition::CLASSES.iter().map(|c| c.to_string()).collect(),
            seed,
            records: Vec::new(),
            root: PathBuf::new(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Reads a manifest and checks that every referenced image exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::from_json(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for r in &m.records {
            for p in [&r.rgb, &r.nir] {
                let full = m.root.join(p);
                if !full.is_file() {
                    return Err(Error::Data(format!(
                        "manifest references missing file {}",
                        full.display()
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn load_image(&self, index: usize) -> Result<RgbnImage> {
        let r = &self.records[index];
        load_rgbn(self.resolve(&r.rgb), self.resolve(&r.nir))
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    pub fn annotation_count(&self) -> usize {
        self.records.iter().map(|r| r.annotations.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> DatasetManifest {
        let mut m = DatasetManifest::new(9);
        m.records.push(Record {
            rgb: "a.png".into(),
            nir: "a_nir.png".into(),
            split: Split::Val,
            annotations: vec![
                Annotation::new(1, Condition::Spidermite, vec![[0.0, 0.0], [3.5, 0.0], [1.0, 2.25]])
                    .unwrap(),
                Annotation::new(2, Condition::Unlabeled, vec![[1.0, 1.0], [2.0, 1.0], [2.0, 2.0]])
                    .unwrap(),
            ],
        });
        m
    }

    #[test]
    fn json_round_trip_preserves_fields() {
        let m = sample();
        let back = DatasetManifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn wire_format_uses_class_key() {
        let json = sample().to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["records"][0]["annotations"][0]["class"], "spidermite");
        assert_eq!(v["records"][0]["split"], "val");
        assert_eq!(v["seed"], 9);
        assert_eq!(v["records"][0]["annotations"][1]["polygon"][2][1], 2.0);
    }

    #[test]
    fn missing_image_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        sample().save(&path).unwrap();
        assert!(matches!(DatasetManifest::load(&path), Err(Error::Data(_))));
    }

    #[test]
    fn short_polygon_rejected() {
        assert!(Annotation::new(0, Condition::Leaf, vec![[0.0, 0.0], [1.0, 1.0]]).is_err());
    }

    #[test]
    fn dominant_condition_breaks_ties_low() {
        let mut r = sample().records.remove(0);
        assert_eq!(r.dominant_condition(), Some(Condition::Spidermite));
        r.annotations[1].condition = Condition::Healthy;
        assert_eq!(r.dominant_condition(), Some(Condition::Healthy));
        r.annotations.clear();
        assert_eq!(r.dominant_condition(), None);
    }
}
