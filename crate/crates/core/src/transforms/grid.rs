use crate::data::{clip_to_rect, polygon_area, Annotation, RgbnImage};
use crate::error::{Error, Result};

/// A clipped instance survives only if it keeps this share of its area...
pub const GRID_MIN_AREA_SHARE: f64 = 0.25;
/// ...and at least this many square pixels.
pub const GRID_MIN_AREA_PX: f64 = 16.0;

/// Splits an image into quadrants TL, TR, BL, BR and re-clips annotations.
///
/// Odd dimensions are first padded by one black pixel on the right or
/// bottom. Clipped polygons are translated into quadrant coordinates and
/// dropped when they keep less than `max(25% of the original, 16 px)`.
pub fn grid_split(image: &RgbnImage, annotations: &[Annotation]) -> Vec<(RgbnImage, Vec<Annotation>)> {
    let w = image.width() + image.width() % 2;
    let h = image.height() + image.height() % 2;
    let padded = image.pad_to(w, h);
    let (qw, qh) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(4);
    for (ox, oy) in [(0, 0), (qw, 0), (0, qh), (qw, qh)] {
        let mut tile = padded.crop(ox, oy, qw, qh);
        tile.meta.source_id = format!("{}#{}{}", image.meta.source_id, ox / qw.max(1), oy / qh.max(1));
        let (fx, fy) = (ox as f64, oy as f64);
        let anns = annotations
            .iter()
            .filter_map(|a| {
                let clipped = clip_to_rect(&a.polygon, fx, fy, fx + qw as f64, fy + qh as f64);
                let area = polygon_area(&clipped);
                let keep = !clipped.is_empty()
                    && area >= (GRID_MIN_AREA_SHARE * polygon_area(&a.polygon)).max(GRID_MIN_AREA_PX);
                keep.then(|| Annotation {
                    id: a.id,
                    condition: a.condition,
                    polygon: clipped.iter().map(|p| [p[0] - fx, p[1] - fy]).collect(),
                })
            })
            .collect();
        out.push((tile, anns));
    }
    out
}

/// Reassembles four equally sized quadrants (TL, TR, BL, BR).
pub fn mosaic(tiles: &[RgbnImage]) -> Result<RgbnImage> {
    let [tl, tr, bl, br] = tiles else {
        return Err(Error::InvalidArgument(format!("mosaic needs 4 tiles, got {}", tiles.len())));
    };
    let (qw, qh) = (tl.width(), tl.height());
    if [tr, bl, br].iter().any(|t| t.width() != qw || t.height() != qh) {
        return Err(Error::Data("mosaic tiles differ in size".into()));
    }
    let mut out = RgbnImage::new(2 * qw, 2 * qh);
    out.paste(tl, 0, 0);
    out.paste(tr, qw, 0);
    out.paste(bl, 0, qh);
    out.paste(br, qw, qh);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Condition;
    use crate::transforms::tests::noise_image;
    use proptest::prelude::*;

    fn poly(id: u32, pts: &[[f64; 2]]) -> Annotation {
        Annotation::new(id, Condition::Healthy, pts.to_vec()).unwrap()
    }

    #[test]
    fn full_size_reassembles_exactly() {
        let img = noise_image(480, 360, 9);
        let parts = grid_split(&img, &[]);
        assert!(parts.iter().all(|(t, _)| (t.width(), t.height()) == (240, 180)));
        let tiles: Vec<RgbnImage> = parts.into_iter().map(|(t, _)| t).collect();
        let back = mosaic(&tiles).unwrap();
        assert_eq!(back.planes(), img.planes());
    }

    #[test]
    fn polygon_inside_first_quadrant_is_translated_only_there() {
        let img = noise_image(40, 20, 1);
        let a = poly(3, &[[2.0, 2.0], [12.0, 2.0], [12.0, 8.0], [2.0, 8.0]]);
        let parts = grid_split(&img, &[a.clone()]);
        assert_eq!(parts[0].1.len(), 1);
        assert_eq!(polygon_area(&parts[0].1[0].polygon), 60.0);
        assert!(parts[1..].iter().all(|(_, anns)| anns.is_empty()));

        // same polygon shifted into the bottom-right quadrant
        let b = poly(4, &a.polygon.iter().map(|p| [p[0] + 20.0, p[1] + 10.0]).collect::<Vec<_>>());
        let parts = grid_split(&img, &[b]);
        assert_eq!(parts[3].1[0].polygon, a.polygon);
    }

    #[test]
    fn straddling_polygon_area_is_conserved() {
        let tri = [[5.0, 3.0], [33.7, 6.2], [14.1, 17.9]];
        let orig = polygon_area(&tri);
        let left = polygon_area(&clip_to_rect(&tri, 0.0, 0.0, 20.0, 20.0));
        let right = polygon_area(&clip_to_rect(&tri, 20.0, 0.0, 40.0, 20.0));
        assert!(left > 0.0 && right > 0.0);
        assert!((left + right - orig).abs() < 1e-6);
        let parts = grid_split(&noise_image(40, 40, 2), &[poly(1, &tri)]);
        let kept: f64 = parts.iter().flat_map(|(_, a)| a).map(|a| polygon_area(&a.polygon)).sum();
        assert!((kept - orig).abs() < 1e-6, "both halves pass the drop rule");
    }

    #[test]
    fn slivers_are_dropped() {
        // 3 of 40 px cross the midline: below both thresholds
        let a = poly(1, &[[1.0, 1.0], [21.0, 1.0], [21.0, 3.0], [1.0, 3.0]]);
        let parts = grid_split(&noise_image(40, 20, 3), &[a]);
        assert_eq!(parts[0].1.len(), 1);
        assert!(parts[1].1.is_empty());
    }

    #[test]
    fn odd_dimensions_padded_black() {
        let img = noise_image(5, 3, 4);
        let parts = grid_split(&img, &[]);
        assert!(parts.iter().all(|(t, _)| (t.width(), t.height()) == (3, 2)));
        let tiles: Vec<RgbnImage> = parts.into_iter().map(|(t, _)| t).collect();
        let back = mosaic(&tiles).unwrap();
        assert_eq!(back.crop(0, 0, 5, 3).planes(), img.planes());
        assert!(back.planes().iter().all(|p| p[5] == 0.0 && p[6 * 3 + 2] == 0.0));
    }

    proptest! {
        #[test]
        fn split_then_mosaic_is_identity(w in 1usize..30, h in 1usize..30, seed in any::<u64>()) {
            let img = noise_image(w, h, seed);
            let tiles: Vec<RgbnImage> = grid_split(&img, &[]).into_iter().map(|(t, _)| t).collect();
            let back = mosaic(&tiles).unwrap();
            let restored = back.crop(0, 0, w, h);
            prop_assert_eq!(restored.planes(), img.planes());
        }

        #[test]
        fn instance_count_never_grows(
            boxes in prop::collection::vec((0.0f64..36.0, 0.0f64..36.0, 1.0f64..30.0), 1..6),
        ) {
            let anns: Vec<Annotation> = boxes
                .iter()
                .enumerate()
                .map(|(i, &(x, y, s))| poly(i as u32, &[[x, y], [x + s, y], [x + s, y + s], [x, y + s]]))
                .collect();
            let parts = grid_split(&noise_image(40, 40, 0), &anns);
            let mut ids: Vec<u32> = parts.iter().flat_map(|(_, a)| a.iter().map(|a| a.id)).collect();
            for (_, tile) in &parts {
                prop_assert!(tile.len() <= anns.len());
            }
            ids.sort_unstable();
            ids.dedup();
            prop_assert!(ids.len() <= anns.len());
        }
    }
}
