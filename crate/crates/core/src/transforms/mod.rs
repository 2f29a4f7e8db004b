//! Dataset conversions: channel fusing, leaf consolidation, occlusion of
//! unlabeled leaves, grid splitting and classifier crops.

mod crops;
mod grid;

pub use crops::{
    crop_square, extract_crops, load_crop_dataset, write_crop_dataset, CropDataset, CropEntry,
    CropRecord, DEFAULT_CROP_SIZE,
};
pub use grid::{grid_split, mosaic, GRID_MIN_AREA_PX, GRID_MIN_AREA_SHARE};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Annotation, Condition, DatasetManifest, Mask, Plane, RgbnImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which source plane feeds each model input slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ChannelPlan {
    slots: Vec<Plane>,
}

impl ChannelPlan {
    pub fn new(slots: Vec<Plane>) -> Result<Self> {
        if !(3..=4).contains(&slots.len()) {
            return Err(Error::InvalidArgument(format!(
                "a channel plan has 3 or 4 slots, got {}",
                slots.len()
            )));
        }
        Ok(ChannelPlan { slots })
    }

    pub fn rgb() -> Self {
        ChannelPlan { slots: vec![Plane::R, Plane::G, Plane::B] }
    }

    pub fn rgbn() -> Self {
        ChannelPlan { slots: Plane::ALL.to_vec() }
    }

    /// NIR in place of red.
    pub fn ngb() -> Self {
        ChannelPlan { slots: vec![Plane::Nir, Plane::G, Plane::B] }
    }

    /// NIR in place of blue.
    pub fn rgn() -> Self {
        ChannelPlan { slots: vec![Plane::R, Plane::G, Plane::Nir] }
    }

    pub fn slots(&self) -> &[Plane] {
        &self.slots
    }

    pub fn channels(&self) -> usize {
        self.slots.len()
    }

    pub fn uses_nir(&self) -> bool {
        self.slots.contains(&Plane::Nir)
    }
}

impl FromStr for ChannelPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let slots = s
            .chars()
            .map(|c| match c.to_ascii_uppercase() {
                'R' => Ok(Plane::R),
                'G' => Ok(Plane::G),
                'B' => Ok(Plane::B),
                'N' => Ok(Plane::Nir),
                other => Err(Error::InvalidArgument(format!("unknown plane `{other}` in plan `{s}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        ChannelPlan::new(slots)
    }
}

impl TryFrom<String> for ChannelPlan {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ChannelPlan> for String {
    fn from(p: ChannelPlan) -> String {
        p.to_string()
    }
}

impl fmt::Display for ChannelPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.slots {
            write!(f, "{}", p.letter())?;
        }
        Ok(())
    }
}

/// Stacks the planes named by `plan` into a `[C, H, W]` tensor.
pub fn fuse_channels(image: &RgbnImage, plan: &ChannelPlan) -> Tensor {
    let mut data = Vec::with_capacity(plan.channels() * image.width() * image.height());
    for &p in plan.slots() {
        data.extend(image.plane(p).iter().map(|&v| f64::from(v)));
    }
    Tensor::new(vec![plan.channels(), image.height(), image.width()], data)
        .expect("plan and image sizes agree")
}

/// Every annotation, unlabeled ones included, becomes `leaf`.
pub fn consolidate_to_leaf(manifest: &DatasetManifest) -> DatasetManifest {
    let mut out = manifest.clone();
    for a in out.records.iter_mut().flat_map(|r| r.annotations.iter_mut()) {
        a.condition = Condition::Leaf;
    }
    out
}

/// Union of the rasterized unlabeled instances.
pub fn unlabeled_mask(width: usize, height: usize, annotations: &[Annotation]) -> Result<Mask> {
    let mut union = Mask::new(width, height);
    for a in annotations.iter().filter(|a| a.condition == Condition::Unlabeled) {
        union.union_with(&a.mask(width, height)?);
    }
    Ok(union)
}

/// Blacks out unlabeled instances on all four planes and drops their labels.
pub fn occlude_unlabeled(
    image: &RgbnImage,
    annotations: &[Annotation],
) -> Result<(RgbnImage, Vec<Annotation>)> {
    let (w, h) = (image.width(), image.height());
    let union = unlabeled_mask(w, h, annotations)?;
    let mut out = image.clone();
    for (i, _) in union.data().iter().enumerate().filter(|(_, &m)| m) {
        out.blacken(i % w, i / w);
    }
    let kept = annotations
        .iter()
        .filter(|a| a.condition != Condition::Unlabeled)
        .cloned()
        .collect();
    Ok((out, kept))
}
