//! Binary masks, polygon geometry and scanline rasterisation.

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Data(format!(
                "mask of {} pixels for {width}x{height}",
                data.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn from_indices(width: usize, height: usize, indices: &[usize]) -> Self {
        let mut m = Mask::new(width, height);
        for &i in indices {
            m.data[i] = true;
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// In-place union; masks must share dimensions.
    pub fn union_with(&mut self, other: &Mask) {
        debug_assert_eq!((self.width, self.height), (other.width, other.height));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// `(|a and b|, |a or b|)`.
    pub fn overlap_counts(&self, other: &Mask) -> Result<(usize, usize)> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::InvalidArgument(format!(
                "mask dimensions differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let mut inter = 0;
        let mut union = 0;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok((inter, union))
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)`; `None` if empty.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for (i, _) in self.data.iter().enumerate().filter(|(_, &v)| v) {
            let (x, y) = (i % self.width, i / self.width);
            b = Some(match b {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        b
    }

    /// Copy restricted to the top-left `w x h` window.
    pub fn cropped(&self, w: usize, h: usize) -> Mask {
        let mut out = Mask::new(w, h);
        for y in 0..h.min(self.height) {
            for x in 0..w.min(self.width) {
                out.data[y * w + x] = self.get(x, y);
            }
        }
        out
    }
}

/// Even-odd scanline fill, sampling each pixel at its centre.
pub fn rasterize(polygon: &[Point], width: usize, height: usize) -> Result<Mask> {
    if polygon.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "polygon needs at least 3 vertices, got {}",
            polygon.len()
        )));
    }
    let mut mask = Mask::new(width, height);
    let (_, min_y, _, max_y) = bounding_box(polygon);
    let y_lo = (min_y - 0.5).ceil().max(0.0) as usize;
    let y_hi = ((max_y - 0.5).floor() + 1.0).clamp(0.0, height as f64) as usize;
    let mut xs = Vec::new();
    for y in y_lo..y_hi {
        let yc = y as f64 + 0.5;
        xs.clear();
        for (i, a) in polygon.iter().enumerate() {
            let b = polygon[(i + 1) % polygon.len()];
            // half-open rule: each crossing counted once
            if (a[1] <= yc) != (b[1] <= yc) {
                let t = (yc - a[1]) / (b[1] - a[1]);
                xs.push(a[0] + t * (b[0] - a[0]));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let x0 = (pair[0] - 0.5).ceil().max(0.0);
            let x1 = (pair[1] - 0.5).ceil().min(width as f64);
            let (x0, x1) = (x0 as usize, x1.max(0.0) as usize);
            for x in x0..x1.max(x0) {
                mask.data[y * width + x] = true;
            }
        }
    }
    Ok(mask)
}

pub fn signed_area(polygon: &[Point]) -> f64 {
    let n = polygon.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[(i + 1) % n]);
        s += a[0] * b[1] - b[0] * a[1];
    }
    s / 2.0
}

/// Shoelace area.
pub fn polygon_area(polygon: &[Point]) -> f64 {
    signed_area(polygon).abs()
}

pub fn perimeter(polygon: &[Point]) -> f64 {
    let n = polygon.len();
    (0..n)
        .map(|i| {
            let (a, b) = (polygon[i], polygon[(i + 1) % n]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
        })
        .sum()
}

/// `(min_x, min_y, max_x, max_y)`.
pub fn bounding_box(polygon: &[Point]) -> (f64, f64, f64, f64) {
    polygon.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(x0, y0, x1, y1), p| (x0.min(p[0]), y0.min(p[1]), x1.max(p[0]), y1.max(p[1])),
    )
}

/// Sutherland-Hodgman clip against the axis-aligned rectangle
/// `[x0, x1] x [y0, y1]`. Returns an empty vector when nothing remains.
pub fn clip_to_rect(polygon: &[Point], x0: f64, y0: f64, x1: f64, y1: f64) -> Vec<Point> {
    // (axis, bound, keep >=)
    let edges = [(0, x0, true), (0, x1, false), (1, y0, true), (1, y1, false)];
    let mut out = polygon.to_vec();
    for (axis, bound, keep_ge) in edges {
        if out.is_empty() {
            break;
        }
        let inside = |p: &Point| if keep_ge { p[axis] >= bound } else { p[axis] <= bound };
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            let (ci, pi) = (inside(&cur), inside(&prev));
            if ci != pi {
                let t = (bound - prev[axis]) / (cur[axis] - prev[axis]);
                let mut p = [
                    prev[0] + t * (cur[0] - prev[0]),
                    prev[1] + t * (cur[1] - prev[1]),
                ];
                p[axis] = bound;
                out.push(p);
            }
            if ci {
                out.push(cur);
            }
        }
    }
    if out.len() < 3 {
        out.clear();
    }
    out
}

/// 4-connected foreground components in row-major discovery order, each as
/// a list of pixel indices.
pub fn connected_components(mask: &Mask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.data[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}
