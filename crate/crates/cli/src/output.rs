use rgbn_core::data::Mask;
use rgbn_core::eval::InstancePrediction;
use serde::Serialize;

/// Row-major run-length encoding. Runs alternate background / foreground,
/// starting with background, so `counts[0]` may be zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

pub fn encode_rle(mask: &Mask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0;
    for &v in mask.data() {
        if v != current {
            counts.push(run);
            run = 0;
            current = v;
        }
        run += 1;
    }
    counts.push(run);
    Rle {
        size: [mask.height(), mask.width()],
        counts,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Detection {
    pub class: String,
    pub confidence: f64,
    /// Inclusive pixel bounds `[x0, y0, x1, y1]`.
    pub bbox: [usize; 4],
    pub area: usize,
    pub rle: Rle,
}

pub fn detection(p: &InstancePrediction, class_names: &[&str]) -> Detection {
    let (x0, y0, x1, y1) = p.mask.bbox().unwrap_or((0, 0, 0, 0));
    Detection {
        class: class_names.get(p.class).map_or_else(|| p.class.to_string(), |s| s.to_string()),
        confidence: p.confidence,
        bbox: [x0, y0, x1, y1],
        area: p.mask.count(),
        rle: encode_rle(&p.mask),
    }
}
