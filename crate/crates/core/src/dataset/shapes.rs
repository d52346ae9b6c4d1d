//! Canonical shape geometry and anti-aliased rendering.
//!
//! Shapes live in a unit frame (object radius about 1, `y` down) and are
//! placed on the canvas by an [`Placement`]: scale, rotation, translation.

use crate::image::RgbImage;
use crate::objective::Keypoint;

type P = [f64; 2];

#[derive(Clone, Debug)]
pub(crate) enum Prim {
    Circle { c: P, r: f64 },
    Capsule { a: P, b: P, r: f64 },
    Rect { min: P, max: P },
    /// Even-odd fill.
    Polygon(Vec<P>),
}

impl Prim {
    fn contains(&self, p: P) -> bool {
        match self {
            Prim::Circle { c, r } => (p[0] - c[0]).hypot(p[1] - c[1]) <= *r,
            Prim::Capsule { a, b, r } => {
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                let len2 = dx * dx + dy * dy;
                let t = if len2 == 0.0 {
                    0.0
                } else {
                    (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
                };
                (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy) <= *r
            }
            Prim::Rect { min, max } => p[0] >= min[0] && p[0] <= max[0] && p[1] >= min[1] && p[1] <= max[1],
            Prim::Polygon(vs) => {
                let mut inside = false;
                let mut j = vs.len() - 1;
                for i in 0..vs.len() {
                    let (a, b) = (vs[i], vs[j]);
                    if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

/// Union of `solid` minus union of `holes`.
#[derive(Clone, Debug)]
pub(crate) struct Shape {
    pub solid: Vec<Prim>,
    pub holes: Vec<Prim>,
}

impl Shape {
    fn solid(prims: Vec<Prim>) -> Self {
        Shape {
            solid: prims,
            holes: Vec::new(),
        }
    }

    pub fn contains(&self, p: P) -> bool {
        self.solid.iter().any(|s| s.contains(p)) && !self.holes.iter().any(|h| h.contains(p))
    }
}

fn regular_polygon(n: usize, r: f64, phase: f64) -> Vec<P> {
    (0..n)
        .map(|i| {
            let a = phase + std::f64::consts::TAU * i as f64 / n as f64;
            [r * a.cos(), r * a.sin()]
        })
        .collect()
}

fn star(points: usize, outer: f64, inner: f64) -> Vec<P> {
    let phase = -std::f64::consts::FRAC_PI_2;
    (0..2 * points)
        .map(|i| {
            let r = if i % 2 == 0 { outer } else { inner };
            let a = phase + std::f64::consts::PI * i as f64 / points as f64;
            [r * a.cos(), r * a.sin()]
        })
        .collect()
}

/// Geometry of a named family and its named parts, or `None` if unknown.
pub(crate) fn family_geometry(name: &str) -> Option<(Shape, Vec<(&'static str, P)>)> {
    let g = match name {
        "disk" => (
            Shape::solid(vec![Prim::Circle { c: [0.0, 0.0], r: 1.0 }]),
            vec![
                ("center", [0.0, 0.0]),
                ("north", [0.0, -0.65]),
                ("east", [0.65, 0.0]),
                ("south", [0.0, 0.65]),
                ("west", [-0.65, 0.0]),
            ],
        ),
        "wedge" => (
            Shape::solid(vec![Prim::Polygon(vec![[0.0, -1.05], [0.95, 0.8], [-0.95, 0.8]])]),
            vec![
                ("apex", [0.0, -0.5]),
                ("right", [0.55, 0.55]),
                ("base", [0.0, 0.55]),
                ("left", [-0.55, 0.55]),
                ("middle", [0.0, 0.05]),
            ],
        ),
        "lshape" => (
            Shape::solid(vec![
                Prim::Rect {
                    min: [-0.85, -0.85],
                    max: [-0.3, 0.85],
                },
                Prim::Rect {
                    min: [-0.85, 0.3],
                    max: [0.85, 0.85],
                },
            ]),
            vec![
                ("top", [-0.575, -0.6]),
                ("toe", [0.6, 0.575]),
                ("corner", [-0.575, 0.575]),
                ("shin", [-0.575, 0.0]),
                ("heel", [0.0, 0.575]),
            ],
        ),
        "bar" => (
            Shape::solid(vec![
                Prim::Capsule {
                    a: [-0.9, 0.0],
                    b: [0.9, 0.0],
                    r: 0.17,
                },
                Prim::Circle { c: [0.9, 0.0], r: 0.3 },
            ]),
            vec![
                ("tip", [0.9, 0.0]),
                ("neck", [0.45, 0.0]),
                ("mid", [0.0, 0.0]),
                ("grip", [-0.45, 0.0]),
                ("tail", [-0.9, 0.0]),
            ],
        ),
        "tee" => (
            Shape::solid(vec![
                Prim::Rect {
                    min: [-0.95, -0.85],
                    max: [0.95, -0.35],
                },
                Prim::Rect {
                    min: [-0.25, -0.35],
                    max: [0.25, 0.95],
                },
            ]),
            vec![
                ("joint", [0.0, -0.6]),
                ("right", [0.7, -0.6]),
                ("waist", [0.0, 0.2]),
                ("left", [-0.7, -0.6]),
                ("foot", [0.0, 0.75]),
            ],
        ),
        "ring" => (
            Shape {
                solid: vec![Prim::Circle { c: [0.0, 0.0], r: 1.0 }],
                holes: vec![Prim::Circle { c: [0.0, 0.0], r: 0.55 }],
            },
            vec![
                ("north", [0.0, -0.78]),
                ("east", [0.78, 0.0]),
                ("south", [0.0, 0.78]),
                ("west", [-0.78, 0.0]),
                ("northeast", [0.55, -0.55]),
            ],
        ),
        "cross" => (
            Shape::solid(vec![
                Prim::Rect {
                    min: [-0.3, -0.95],
                    max: [0.3, 0.95],
                },
                Prim::Rect {
                    min: [-0.95, -0.3],
                    max: [0.95, 0.3],
                },
            ]),
            vec![("center", [0.0, 0.0])],
        ),
        "star" => (Shape::solid(vec![Prim::Polygon(star(5, 1.1, 0.45))]), vec![("center", [0.0, 0.0])]),
        "crescent" => (
            Shape {
                solid: vec![Prim::Circle { c: [0.0, 0.0], r: 1.0 }],
                holes: vec![Prim::Circle { c: [0.45, -0.1], r: 0.8 }],
            },
            vec![("back", [-0.75, 0.0])],
        ),
        "square" => (
            Shape::solid(vec![Prim::Rect {
                min: [-0.8, -0.8],
                max: [0.8, 0.8],
            }]),
            vec![("center", [0.0, 0.0])],
        ),
        "hexagon" => (
            Shape::solid(vec![Prim::Polygon(regular_polygon(6, 1.0, 0.0))]),
            vec![("center", [0.0, 0.0])],
        ),
        _ => return None,
    };
    Some(g)
}

/// Where and how large an object sits on the canvas.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    /// Pixels per canonical unit.
    pub size: f64,
    /// Radians, positive turns `+x` toward `+y`.
    pub angle: f64,
}

impl Placement {
    pub fn to_image(&self, p: P) -> Keypoint {
        let (s, c) = self.angle.sin_cos();
        Keypoint::new(
            self.cx + self.size * (p[0] * c - p[1] * s),
            self.cy + self.size * (p[0] * s + p[1] * c),
        )
    }

    fn to_canonical(&self, x: f64, y: f64) -> P {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        [(dx * c + dy * s) / self.size, (-dx * s + dy * c) / self.size]
    }
}

pub(crate) const SUPERSAMPLE: usize = 4;

/// Per-pixel coverage of a placed shape from `SUPERSAMPLE^2` samples.
pub(crate) fn coverage(shape: &Shape, at: &Placement, width: usize, height: usize) -> Vec<f32> {
    let n = SUPERSAMPLE;
    let mut out = vec![0.0f32; width * height];
    for y in 0..height {
        for x in 0..width {
            let mut hits = 0;
            for j in 0..n {
                for i in 0..n {
                    let sx = x as f64 + (i as f64 + 0.5) / n as f64;
                    let sy = y as f64 + (j as f64 + 0.5) / n as f64;
                    if shape.contains(at.to_canonical(sx, sy)) {
                        hits += 1;
                    }
                }
            }
            out[y * width + x] = hits as f32 / (n * n) as f32;
        }
    }
    out
}

/// Alpha-blends `rgb` over the image with per-pixel coverage.
pub(crate) fn composite(img: &mut RgbImage, cover: &[f32], rgb: [u8; 3]) {
    for (px, &a) in img.data.chunks_exact_mut(3).zip(cover) {
        if a == 0.0 {
            continue;
        }
        for c in 0..3 {
            let v = px[c] as f32 * (1.0 - a) + rgb[c] as f32 * a;
            px[c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// HSV with hue in degrees, saturation and value in `[0, 1]`.
pub(crate) fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_part_is_well_inside_its_shape() {
        for name in ["disk", "wedge", "lshape", "bar", "tee", "ring", "cross", "star", "crescent", "square", "hexagon"] {
            let (shape, parts) = family_geometry(name).unwrap();
            for (part, p) in parts {
                // A disc of radius 0.1 around every part stays inside.
                for k in 0..16 {
                    let a = std::f64::consts::TAU * k as f64 / 16.0;
                    let q = [p[0] + 0.1 * a.cos(), p[1] + 0.1 * a.sin()];
                    assert!(shape.contains(q), "{name}.{part}");
                }
            }
        }
    }

    #[test]
    fn ring_hole_is_empty() {
        let (shape, _) = family_geometry("ring").unwrap();
        assert!(!shape.contains([0.0, 0.0]));
        assert!(shape.contains([0.0, 0.8]));
    }

    #[test]
    fn quarter_turn_maps_x_onto_y() {
        let at = Placement {
            cx: 32.0,
            cy: 32.0,
            size: 12.0,
            angle: std::f64::consts::FRAC_PI_2,
        };
        let k = at.to_image([1.0, 0.0]);
        assert!((k.x - 32.0).abs() < 1e-9 && (k.y - 44.0).abs() < 1e-9);
        let back = at.to_canonical(k.x, k.y);
        assert!((back[0] - 1.0).abs() < 1e-12 && back[1].abs() < 1e-12);
    }

    #[test]
    fn coverage_of_a_disk_matches_its_area() {
        let (shape, _) = family_geometry("disk").unwrap();
        let at = Placement {
            cx: 32.0,
            cy: 32.0,
            size: 10.0,
            angle: 0.3,
        };
        let total: f32 = coverage(&shape, &at, 64, 64).iter().sum();
        let area = std::f32::consts::PI * 100.0;
        assert!((total - area).abs() / area < 0.01, "{total}");
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv(0.0, 1.0, 1.0), [255, 0, 0]);
        assert_eq!(hsv(120.0, 1.0, 1.0), [0, 255, 0]);
        assert_eq!(hsv(240.0, 1.0, 1.0), [0, 0, 255]);
        assert_eq!(hsv(77.0, 0.0, 0.5), [128, 128, 128]);
    }
}
