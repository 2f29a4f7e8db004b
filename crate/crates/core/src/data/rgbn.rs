use std::path::Path;

use image::{ColorType, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// NIR band captured alongside RGB, in nanometres.
pub const DEFAULT_NIR_BAND_NM: (f32, f32) = (740.0, 1000.0);

/// One of the four image planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Plane {
    R,
    G,
    B,
    Nir,
}

impl Plane {
    pub const ALL: [Plane; 4] = [Plane::R, Plane::G, Plane::B, Plane::Nir];

    pub fn index(self) -> usize {
        match self {
            Plane::R => 0,
            Plane::G => 1,
            Plane::B => 2,
            Plane::Nir => 3,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Plane::R => 'R',
            Plane::G => 'G',
            Plane::B => 'B',
            Plane::Nir => 'N',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub nir_band_nm: (f32, f32),
    pub source_id: String,
}

impl Default for ImageMeta {
    fn default() -> Self {
        ImageMeta {
            nir_band_nm: DEFAULT_NIR_BAND_NM,
            source_id: String::new(),
        }
    }
}

/// Four aligned planes (R, G, B, NIR) of normalised samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbnImage {
    width: usize,
    height: usize,
    planes: [Vec<f32>; 4],
    pub meta: ImageMeta,
}

impl RgbnImage {
    /// All-black image.
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        RgbnImage {
            width,
            height,
            planes: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            meta: ImageMeta::default(),
        }
    }

    pub fn from_planes(width: usize, height: usize, planes: [Vec<f32>; 4]) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Data(format!("empty image {width}x{height}")));
        }
        for p in &planes {
            if p.len() != width * height {
                return Err(Error::Data(format!(
                    "plane of {} samples for {width}x{height} image",
                    p.len()
                )));
            }
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Data("sample outside [0, 1]".into()));
            }
        }
        Ok(RgbnImage {
            width,
            height,
            planes,
            meta: ImageMeta::default(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn plane(&self, plane: Plane) -> &[f32] {
        &self.planes[plane.index()]
    }

    pub fn plane_mut(&mut self, plane: Plane) -> &mut [f32] {
        &mut self.planes[plane.index()]
    }

    pub fn planes(&self) -> &[Vec<f32>; 4] {
        &self.planes
    }

    /// Sets `(x, y)` to zero on every plane.
    pub fn blacken(&mut self, x: usize, y: usize) {
        let i = y * self.width + x;
        for p in &mut self.planes {
            p[i] = 0.0;
        }
    }

    /// Copy of the `w x h` block at `(x0, y0)`; pixels outside the image are black.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RgbnImage {
        let mut out = RgbnImage::new(w, h);
        out.meta = self.meta.clone();
        for (src, dst) in self.planes.iter().zip(out.planes.iter_mut()) {
            for y in 0..h {
                let sy = y0 + y;
                if sy >= self.height {
                    break;
                }
                for x in 0..w {
                    let sx = x0 + x;
                    if sx >= self.width {
                        break;
                    }
                    dst[y * w + x] = src[sy * self.width + sx];
                }
            }
        }
        out
    }

    /// Extends right and bottom with black to at least `w x h`.
    pub fn pad_to(&self, w: usize, h: usize) -> RgbnImage {
        if w <= self.width && h <= self.height {
            return self.clone();
        }
        self.crop(0, 0, w.max(self.width), h.max(self.height))
    }

    /// Writes `src` into this image with its top-left corner at `(x0, y0)`.
    pub fn paste(&mut self, src: &RgbnImage, x0: usize, y0: usize) {
        for (dst, sp) in self.planes.iter_mut().zip(&src.planes) {
            for y in 0..src.height.min(self.height.saturating_sub(y0)) {
                for x in 0..src.width.min(self.width.saturating_sub(x0)) {
                    dst[(y0 + y) * self.width + x0 + x] = sp[y * src.width + x];
                }
            }
        }
    }

    /// Rounds every sample to the nearest 8-bit level.
    pub fn quantize(&mut self) {
        for p in &mut self.planes {
            for v in p.iter_mut() {
                *v = to_u8(*v) as f32 / 255.0;
            }
        }
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    }
}

/// Loads an RGB file and its single-channel NIR companion.
pub fn load_rgbn(rgb_path: impl AsRef<Path>, nir_path: impl AsRef<Path>) -> Result<RgbnImage> {
    let nir_path = nir_path.as_ref();
    let nir = image::open(nir_path).map_err(|e| image_err(nir_path, e))?;
    if !matches!(nir.color(), ColorType::L8 | ColorType::L16) {
        return Err(Error::Data(format!(
            "{}: NIR must be single-channel, found {:?}",
            nir_path.display(),
            nir.color()
        )));
    }
    let mut img = load_rgb(rgb_path)?;
    if (img.width, img.height) != (nir.width() as usize, nir.height() as usize) {
        return Err(Error::Data(format!(
            "dimension mismatch: RGB {}x{} vs NIR {}x{}",
            img.width,
            img.height,
            nir.width(),
            nir.height()
        )));
    }
    img.planes[3] = nir.to_luma8().pixels().map(|px| px[0] as f32 / 255.0).collect();
    Ok(img)
}

/// Loads an RGB file; the NIR plane is left black.
pub fn load_rgb(rgb_path: impl AsRef<Path>) -> Result<RgbnImage> {
    let rgb_path = rgb_path.as_ref();
    let rgb = image::open(rgb_path).map_err(|e| image_err(rgb_path, e))?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut planes: [Vec<f32>; 4] = Default::default();
    for p in planes.iter_mut() {
        p.reserve_exact(w * h);
    }
    for px in rgb.pixels() {
        for c in 0..3 {
            planes[c].push(px[c] as f32 / 255.0);
        }
    }
    planes[3] = vec![0.0; w * h];
    let mut img = RgbnImage::from_planes(w, h, planes)?;
    img.meta.source_id = rgb_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(img)
}

/// Writes 8-bit PNGs: RGB as three channels, NIR as grayscale.
pub fn save_rgbn(
    image: &RgbnImage,
    rgb_path: impl AsRef<Path>,
    nir_path: impl AsRef<Path>,
) -> Result<()> {
    let (rgb_path, nir_path) = (rgb_path.as_ref(), nir_path.as_ref());
    save_rgb(image, rgb_path)?;
    let (w, h) = (image.width as u32, image.height as u32);
    let nir = GrayImage::from_fn(w, h, |x, y| {
        image::Luma([to_u8(image.planes[3][y as usize * image.width + x as usize])])
    });
    nir.save(nir_path).map_err(|e| image_err(nir_path, e))
}

/// Writes only the RGB planes.
pub fn save_rgb(image: &RgbnImage, rgb_path: impl AsRef<Path>) -> Result<()> {
    let rgb_path = rgb_path.as_ref();
    let (w, h) = (image.width as u32, image.height as u32);
    let rgb = RgbImage::from_fn(w, h, |x, y| {
        let i = y as usize * image.width + x as usize;
        image::Rgb([
            to_u8(image.planes[0][i]),
            to_u8(image.planes[1][i]),
            to_u8(image.planes[2][i]),
        ])
    });
    rgb.save(rgb_path).map_err(|e| image_err(rgb_path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMode {
    Bilinear,
    Nearest,
}

/// Resamples one plane with pixel-centre alignment.
pub fn resize_plane(
    src: &[f32],
    width: usize,
    height: usize,
    new_w: usize,
    new_h: usize,
    mode: ResizeMode,
) -> Vec<f32> {
    let sx = width as f64 / new_w as f64;
    let sy = height as f64 / new_h as f64;
    let mut out = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..new_w {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            let v = match mode {
                ResizeMode::Nearest => {
                    let ix = ((fx + 0.5).floor().max(0.0) as usize).min(width - 1);
                    let iy = ((fy + 0.5).floor().max(0.0) as usize).min(height - 1);
                    src[iy * width + ix]
                }
                ResizeMode::Bilinear => {
                    let fx = fx.clamp(0.0, (width - 1) as f64);
                    let fy = fy.clamp(0.0, (height - 1) as f64);
                    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
                    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                    let p = |xx: usize, yy: usize| src[yy * width + xx] as f64;
                    let top = p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx;
                    let bottom = p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx;
                    (top * (1.0 - ty) + bottom * ty) as f32
                }
            };
            out.push(v);
        }
    }
    out
}

/// Resizes all four planes; aspect ratio is not preserved.
pub fn resize(image: &RgbnImage, new_w: usize, new_h: usize, mode: ResizeMode) -> Result<RgbnImage> {
    if new_w == 0 || new_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {new_w}x{new_h} has a zero dimension"
        )));
    }
    if (new_w, new_h) == (image.width, image.height) {
        return Ok(image.clone());
    }
    let planes = image
        .planes
        .clone()
        .map(|p| resize_plane(&p, image.width, image.height, new_w, new_h, mode));
    let mut out = RgbnImage::from_planes(new_w, new_h, planes)?;
    out.meta = image.meta.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> RgbnImage {
        let n = w * h;
        let planes = [0, 1, 2, 3].map(|c| {
            (0..n)
                .map(|i| ((i * 37 + c * 11) % 256) as f32 / 255.0)
                .collect::<Vec<_>>()
        });
        RgbnImage::from_planes(w, h, planes).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = ramp(2, 2);
        let (r, n) = (dir.path().join("a.png"), dir.path().join("a_nir.png"));
        save_rgbn(&img, &r, &n).unwrap();
        let back = load_rgbn(&r, &n).unwrap();
        assert_eq!(back.planes(), img.planes());
    }

    #[test]
    fn capture_resolution_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbnImage::new(1440, 1080);
        let (r, n) = (dir.path().join("big.png"), dir.path().join("big_nir.png"));
        save_rgbn(&img, &r, &n).unwrap();
        let back = load_rgbn(&r, &n).unwrap();
        assert_eq!((back.width(), back.height()), (1440, 1080));
    }

    #[test]
    fn mismatched_dimensions_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (r, n) = (dir.path().join("r.png"), dir.path().join("n.png"));
        save_rgb(&RgbnImage::new(4, 4), &r).unwrap();
        GrayImage::new(2, 2).save(&n).unwrap();
        assert!(matches!(load_rgbn(&r, &n), Err(Error::Data(_))));
    }

    #[test]
    fn rgb_nir_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path().join("r.png");
        save_rgb(&RgbnImage::new(2, 2), &r).unwrap();
        assert!(matches!(load_rgbn(&r, &r), Err(Error::Data(_))));
    }

    #[test]
    fn undecodable_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path().join("r.png");
        std::fs::write(&r, b"not a png").unwrap();
        assert!(load_rgbn(&r, &r).is_err());
    }

    #[test]
    fn resize_identity_and_full_size() {
        let img = ramp(12, 9);
        assert_eq!(resize(&img, 12, 9, ResizeMode::Bilinear).unwrap(), img);
        let big = RgbnImage::new(1440, 1080);
        let small = resize(&big, 480, 360, ResizeMode::Bilinear).unwrap();
        assert_eq!((small.width(), small.height()), (480, 360));
        assert!(resize(&img, 0, 3, ResizeMode::Nearest).is_err());
    }

    #[test]
    fn nearest_keeps_binary_masks_binary() {
        let mask: Vec<f32> = (0..35).map(|i| (i % 3 == 0) as u8 as f32).collect();
        let out = resize_plane(&mask, 7, 5, 13, 4, ResizeMode::Nearest);
        assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn bilinear_of_constant_is_constant() {
        let plane = vec![0.25f32; 20];
        for v in resize_plane(&plane, 5, 4, 9, 7, ResizeMode::Bilinear) {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }
}
