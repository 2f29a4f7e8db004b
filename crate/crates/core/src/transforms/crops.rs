use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ChannelPlan;
use crate::data::{
    bounding_box, load_rgb, load_rgbn, save_rgb, save_rgbn, Annotation, Condition, Plane, RgbnImage,
};
use crate::error::{Error, Result};

pub const DEFAULT_CROP_SIZE: usize = 256;

/// One condition-labelled leaf crop, all four planes kept.
#[derive(Debug, Clone, PartialEq)]
pub struct CropRecord {
    pub image: RgbnImage,
    pub condition: Condition,
    pub record: usize,
    pub instance: u32,
}

/// Square window about the centre of `(x0, y0, x1, y1)`, resampled to
/// `size x size`. Area outside the image reads as black. `None` for a
/// degenerate box.
pub fn crop_square(image: &RgbnImage, bbox: (f64, f64, f64, f64), size: usize) -> Option<RgbnImage> {
    let (x0, y0, x1, y1) = bbox;
    let (bw, bh) = (x1 - x0, y1 - y0);
    if !(bw > 0.0 && bh > 0.0) || size == 0 {
        return None;
    }
    let side = bw.max(bh);
    let (left, top) = ((x0 + x1 - side) / 2.0, (y0 + y1 - side) / 2.0);
    let scale = side / size as f64;
    let (w, h) = (image.width() as isize, image.height() as isize);
    let mut out = RgbnImage::new(size, size);
    out.meta = image.meta.clone();
    // bilinear taps per output column / row, shared across planes
    let taps = |origin: f64| -> Vec<(isize, f64)> {
        (0..size)
            .map(|i| {
                let f = origin + (i as f64 + 0.5) * scale - 0.5;
                let i0 = f.floor();
                (i0 as isize, f - i0)
            })
            .collect()
    };
    let xs = taps(left);
    let ys = taps(top);
    for (src_idx, plane) in image.planes().iter().enumerate() {
        let px = |x: isize, y: isize| -> f64 {
            if x < 0 || y < 0 || x >= w || y >= h {
                0.0
            } else {
                f64::from(plane[(y * w + x) as usize])
            }
        };
        let dst = out.plane_mut(Plane::ALL[src_idx]);
        for (v, &(iy, ty)) in ys.iter().enumerate() {
            for (u, &(ix, tx)) in xs.iter().enumerate() {
                let top = px(ix, iy) * (1.0 - tx) + px(ix + 1, iy) * tx;
                let bottom = px(ix, iy + 1) * (1.0 - tx) + px(ix + 1, iy + 1) * tx;
                dst[v * size + u] = (top * (1.0 - ty) + bottom * ty) as f32;
            }
        }
    }
    Some(out)
}

/// One crop per condition-labelled annotation (leaf and unlabeled skipped).
pub fn extract_crops(
    image: &RgbnImage,
    annotations: &[Annotation],
    size: usize,
    record: usize,
) -> Result<Vec<CropRecord>> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!("crop size {size} is below 8")));
    }
    let mut out = Vec::new();
    for a in annotations.iter().filter(|a| a.condition.is_condition()) {
        match crop_square(image, bounding_box(&a.polygon), size) {
            Some(img) => out.push(CropRecord {
                image: img,
                condition: a.condition,
                record,
                instance: a.id,
            }),
            None => log::warn!("record {record}: instance {} has a degenerate box, skipped", a.id),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropEntry {
    pub rgb: String,
    pub nir: Option<String>,
    #[serde(rename = "class")]
    pub condition: Condition,
}

/// `crops.json`: a directory of crop PNGs plus labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropDataset {
    pub size: usize,
    pub plan: ChannelPlan,
    pub crops: Vec<CropEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl CropDataset {
    /// Loads every crop; without a NIR file the NIR plane is black.
    pub fn images(&self) -> Result<Vec<(RgbnImage, Condition)>> {
        self.crops
            .iter()
            .map(|c| {
                let rgb = self.root.join(&c.rgb);
                let img = match &c.nir {
                    Some(n) => load_rgbn(&rgb, self.root.join(n))?,
                    None => load_rgb(&rgb)?,
                };
                if (img.width(), img.height()) != (self.size, self.size) {
                    return Err(Error::Data(format!(
                        "{}: crop is {}x{}, dataset size is {}",
                        rgb.display(),
                        img.width(),
                        img.height(),
                        self.size
                    )));
                }
                Ok((img, c.condition))
            })
            .collect()
    }
}

/// Writes crops as PNG pairs and a `crops.json` into `dir`. The NIR file is
/// omitted when `plan` does not read NIR.
pub fn write_crop_dataset(crops: &[CropRecord], plan: &ChannelPlan, dir: impl AsRef<Path>) -> Result<CropDataset> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let size = crops.first().map_or(0, |c| c.image.width());
    let mut entries = Vec::with_capacity(crops.len());
    for (i, c) in crops.iter().enumerate() {
        if c.image.width() != size || c.image.height() != size {
            return Err(Error::Data("crops differ in size".into()));
        }
        let rgb = format!("crop_{i:05}.png");
        let nir = plan.uses_nir().then(|| format!("crop_{i:05}_nir.png"));
        match &nir {
            Some(n) => save_rgbn(&c.image, dir.join(&rgb), dir.join(n))?,
            None => save_rgb(&c.image, dir.join(&rgb))?,
        }
        entries.push(CropEntry {
            rgb,
            nir,
            condition: c.condition,
        });
    }
    let ds = CropDataset {
        size,
        plan: plan.clone(),
        crops: entries,
        root: dir.to_path_buf(),
    };
    let path = dir.join("crops.json");
    std::fs::write(&path, serde_json::to_string_pretty(&ds)?).map_err(|e| Error::io(&path, e))?;
    Ok(ds)
}

pub fn load_crop_dataset(path: impl AsRef<Path>) -> Result<CropDataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ds: CropDataset = serde_json::from_str(&text)?;
    ds.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(ds)
}
