//! Qualitative match drawings: ground truth as ring markers, predictions as
//! filled squares, one colour per role.

use std::path::Path;

use crate::error::Result;
use crate::evaluation::MatchResult;
use crate::image::RgbImage;
use crate::objective::{cell_to_pixel, CellCoord, Keypoint};

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
];

/// Half side of a prediction square.
pub const SQUARE_HALF: i64 = 2;
/// Radius of a ground-truth ring.
pub const RING_RADIUS: f64 = 3.5;

pub fn role_color(k: usize) -> [u8; 3] {
    PALETTE[k % PALETTE.len()]
}

/// Colour for item `i` of `n`, spread around the hue circle.
pub fn spread_color(i: usize, n: usize) -> [u8; 3] {
    let h = 360.0 * i as f64 / n.max(1) as f64;
    let x = 1.0 - ((h / 60.0) % 2.0 - 1.0).abs();
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

pub fn draw_square(img: &mut RgbImage, at: Keypoint, rgb: [u8; 3]) {
    let (cx, cy) = (at.x.floor() as i64, at.y.floor() as i64);
    for y in cy - SQUARE_HALF..=cy + SQUARE_HALF {
        for x in cx - SQUARE_HALF..=cx + SQUARE_HALF {
            img.put_clipped(x, y, rgb);
        }
    }
}

pub fn draw_ring(img: &mut RgbImage, at: Keypoint, rgb: [u8; 3]) {
    let r = RING_RADIUS.ceil() as i64 + 1;
    let (cx, cy) = (at.x.floor() as i64, at.y.floor() as i64);
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            let d = ((x - cx) as f64).hypot((y - cy) as f64);
            if (d - RING_RADIUS).abs() <= 0.6 {
                img.put_clipped(x, y, rgb);
            }
        }
    }
}

/// Rings at `gts` and squares at the predicted pixels, colour by role.
pub fn overlay(image: &RgbImage, matches: &MatchResult, gts: &[Keypoint]) -> RgbImage {
    let mut out = image.clone();
    for (k, g) in gts.iter().enumerate() {
        draw_ring(&mut out, *g, role_color(k));
    }
    for (k, m) in matches.roles.iter().enumerate() {
        draw_square(&mut out, m.predicted, role_color(k));
    }
    out
}

pub fn emit_overlay(image: &RgbImage, matches: &MatchResult, gts: &[Keypoint], out_path: &Path) -> Result<()> {
    overlay(image, matches, gts).save_png(out_path)
}

/// `a` and `b` next to each other, top-aligned.
pub fn side_by_side(a: &RgbImage, b: &RgbImage) -> RgbImage {
    let mut out = RgbImage::new(a.width + b.width, a.height.max(b.height));
    for y in 0..a.height {
        for x in 0..a.width {
            out.put(x, y, a.get(x, y));
        }
    }
    for y in 0..b.height {
        for x in 0..b.width {
            out.put(a.width + x, y, b.get(x, y));
        }
    }
    out
}

/// Source on the left with its keypoints, target on the right with truth
/// and predictions.
pub fn pair_overlay(
    source: &RgbImage,
    target: &RgbImage,
    matches: &MatchResult,
    source_kps: &[Keypoint],
    target_gts: &[Keypoint],
) -> RgbImage {
    let mut left = source.clone();
    for (k, p) in source_kps.iter().enumerate() {
        draw_ring(&mut left, *p, role_color(k));
    }
    side_by_side(&left, &overlay(target, matches, target_gts))
}

/// Matched cells drawn as squares of the same colour on both images.
pub fn dense_overlay(
    source: &RgbImage,
    target: &RgbImage,
    pairs: &[(CellCoord, CellCoord)],
    src_stride: usize,
    tgt_stride: usize,
) -> RgbImage {
    let (mut left, mut right) = (source.clone(), target.clone());
    for (i, (a, b)) in pairs.iter().enumerate() {
        let c = spread_color(i, pairs.len());
        draw_square(&mut left, cell_to_pixel(*a, src_stride), c);
        draw_square(&mut right, cell_to_pixel(*b, tgt_stride), c);
    }
    side_by_side(&left, &right)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::RoleMatch;

    fn one_match(at: Keypoint) -> MatchResult {
        MatchResult {
            roles: vec![RoleMatch {
                source: at,
                source_cell: CellCoord { row: 0, col: 0 },
                cell: CellCoord { row: 0, col: 0 },
                predicted: at,
                score: 1.0,
            }],
        }
    }

    #[test]
    fn empty_overlay_is_a_copy() {
        let img = RgbImage::filled(16, 16, [9, 8, 7]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.png");
        emit_overlay(&img, &MatchResult::default(), &[], &p).unwrap();
        assert_eq!(RgbImage::load_png(&p).unwrap(), img);
    }

    #[test]
    fn square_is_centred_on_the_prediction() {
        let img = RgbImage::filled(16, 16, [0, 0, 0]);
        let out = overlay(&img, &one_match(Keypoint::new(8.0, 8.0)), &[]);
        let c = role_color(0);
        for (x, y) in [(8, 8), (6, 6), (10, 10), (6, 10), (10, 6)] {
            assert_eq!(out.get(x, y), c, "({x}, {y})");
        }
        for (x, y) in [(5, 8), (11, 8), (8, 5), (8, 11)] {
            assert_eq!(out.get(x, y), [0, 0, 0], "({x}, {y})");
        }
    }

    #[test]
    fn five_roles_five_colours() {
        let mut cs: Vec<[u8; 3]> = (0..5).map(role_color).collect();
        cs.sort();
        cs.dedup();
        assert_eq!(cs.len(), 5);
    }

    #[test]
    fn ring_surrounds_the_truth() {
        let img = RgbImage::filled(16, 16, [0, 0, 0]);
        let out = overlay(&img, &MatchResult::default(), &[Keypoint::new(8.0, 8.0)]);
        assert_eq!(out.get(8, 8), [0, 0, 0]);
        assert_eq!(out.get(12, 8), role_color(0));
    }
}
