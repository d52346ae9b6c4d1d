//! Contrastive correspondence loss over spatial feature grids, and the
//! pixel/cell coordinate maps it relies on.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::gradcheck::{relative_error, FD_STEP};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::trunk::FeatureMap;

/// Pixel position, origin top-left, `x` rightward and `y` downward. The role
/// of a keypoint is its index in the list that holds it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
}

impl Keypoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Keypoint { x, y }
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellCoord {
    pub row: usize,
    pub col: usize,
}

/// `(floor(y / stride), floor(x / stride))`, clamped into a `rows x cols` grid.
pub fn keypoint_to_cell(p: Keypoint, stride: usize, grid: (usize, usize)) -> Result<CellCoord> {
    if !(p.x >= 0.0 && p.y >= 0.0) {
        return Err(Error::Domain(format!("keypoint ({}, {}) has a negative coordinate", p.x, p.y)));
    }
    if stride == 0 || grid.0 == 0 || grid.1 == 0 {
        return Err(Error::contract("empty grid or zero stride"));
    }
    let s = stride as f64;
    let row = ((p.y / s).floor() as usize).min(grid.0 - 1);
    let col = ((p.x / s).floor() as usize).min(grid.1 - 1);
    Ok(CellCoord { row, col })
}

/// Centre of a cell in pixels.
pub fn cell_to_pixel(c: CellCoord, stride: usize) -> Keypoint {
    let s = stride as f64;
    Keypoint::new(c.col as f64 * s + s / 2.0, c.row as f64 * s + s / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    /// L2-normalise every cell vector before taking dot products.
    pub normalize: bool,
    /// Add the mirrored target-to-source term.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 1.0,
            normalize: false,
            symmetric: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

pub const NORM_EPS: f64 = 1e-12;

/// Sample `index` of a batched `[N, C, H', W']` graph value, with the pixel
/// geometry needed to place keypoints on it.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSlot {
    pub var: Var,
    pub index: usize,
    pub stride: usize,
    /// Unpadded source image `(height, width)`.
    pub source: (usize, usize),
}

/// One source/target pair for [`batch_loss`].
#[derive(Clone, Copy, Debug)]
pub struct PairTerm<'a> {
    pub src: FeatureSlot,
    pub tgt: FeatureSlot,
    pub src_kps: &'a [Keypoint],
    pub tgt_kps: &'a [Keypoint],
}

fn sites<T: Real>(g: &Graph<T>, slot: &FeatureSlot, kps: &[Keypoint]) -> Result<Vec<[usize; 3]>> {
    let s = g.shape(slot.var);
    if s.len() != 4 || slot.index >= s[0] {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: s.to_vec(),
            rhs: vec![slot.index + 1, 0, 0, 0],
        });
    }
    let (h, w) = slot.source;
    kps.iter()
        .map(|p| {
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x < w as f64 && p.y < h as f64) {
                return Err(Error::Domain(format!(
                    "keypoint ({}, {}) outside a {w}x{h} image",
                    p.x, p.y
                )));
            }
            let c = keypoint_to_cell(*p, slot.stride, (s[2], s[3]))?;
            Ok([slot.index, c.row, c.col])
        })
        .collect()
}

fn directed<T: Real>(g: &mut Graph<T>, term: &PairTerm<'_>, cfg: &LossConfig) -> Result<Var> {
    let q_sites = sites(g, &term.src, term.src_kps)?;
    let p_sites = sites(g, &term.tgt, term.tgt_kps)?;
    let (cs, ct) = (g.shape(term.src.var)[1], g.shape(term.tgt.var)[1]);
    if cs != ct {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: g.shape(term.src.var).to_vec(),
            rhs: g.shape(term.tgt.var).to_vec(),
        });
    }
    let ts = g.shape(term.tgt.var).to_vec();
    let mut q = g.index_spatial(term.src.var, q_sites)?;
    let mut p = g.index_spatial(term.tgt.var, p_sites)?;
    let t = g.narrow(term.tgt.var, 0, term.tgt.index, 1)?;
    let mut t = g.reshape(t, &[ct, ts[2] * ts[3]])?;
    if cfg.normalize {
        q = g.l2_normalize(q, 1, NORM_EPS)?;
        p = g.l2_normalize(p, 1, NORM_EPS)?;
        t = g.l2_normalize(t, 0, NORM_EPS)?;
    }
    let inv_tau = 1.0 / cfg.temperature;
    let mut scores = g.matmul(q, t)?;
    let qp = g.mul(q, p)?;
    let mut pos = g.sum(qp, Some(1))?;
    if inv_tau != 1.0 {
        scores = g.scale(scores, inv_tau)?;
        pos = g.scale(pos, inv_tau)?;
    }
    let lse = g.logsumexp(scores, 1)?;
    let neg_pos = g.scale(pos, -1.0)?;
    let per_role = g.add(lse, neg_pos)?;
    g.sum(per_role, None)
}

/// `sum_k -log softmax_{p'}(s(k, p') / tau)[k+]` for one pair, where `s` is
/// the dot product between the source feature at keypoint `k` and each
/// target cell, and `k+` is the target cell of the matching keypoint.
pub fn contrastive_loss<T: Real>(g: &mut Graph<T>, term: &PairTerm<'_>, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if term.src_kps.len() != term.tgt_kps.len() {
        return Err(Error::contract(format!(
            "keypoint counts differ: {} vs {}",
            term.src_kps.len(),
            term.tgt_kps.len()
        )));
    }
    if term.src_kps.is_empty() {
        return Err(Error::contract("contrastive loss needs at least one keypoint"));
    }
    let fwd = directed(g, term, cfg)?;
    if !cfg.symmetric {
        return Ok(fwd);
    }
    let mirrored = PairTerm {
        src: term.tgt,
        tgt: term.src,
        src_kps: term.tgt_kps,
        tgt_kps: term.src_kps,
    };
    let back = directed(g, &mirrored, cfg)?;
    g.add(fwd, back)
}

/// Mean of the per-pair losses.
pub fn batch_loss<T: Real>(g: &mut Graph<T>, pairs: &[PairTerm<'_>], cfg: &LossConfig) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut total: Option<Var> = None;
    for pair in pairs {
        let l = contrastive_loss(g, pair, cfg)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    g.scale(total.expect("nonempty"), 1.0 / pairs.len() as f64)
}

fn slot_of(g: &mut Graph<f64>, fm: &FeatureMap) -> FeatureSlot {
    let t: Tensor<f64> = fm.to_tensor().cast();
    FeatureSlot {
        var: g.constant(t),
        index: 0,
        stride: fm.stride,
        source: (fm.source_height, fm.source_width),
    }
}

/// Loss value for a pair of feature maps, evaluated in `f64` off any tape.
pub fn contrastive_loss_value(
    f: &FeatureMap,
    fp: &FeatureMap,
    kps: &[Keypoint],
    kps_p: &[Keypoint],
    cfg: &LossConfig,
) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let src = slot_of(&mut g, f);
    let tgt = slot_of(&mut g, fp);
    let term = PairTerm {
        src,
        tgt,
        src_kps: kps,
        tgt_kps: kps_p,
    };
    let l = contrastive_loss(&mut g, &term, cfg)?;
    Ok(g.value(l).item())
}

/// Random two-pair batch for the end-to-end loss gradient check.
struct LossCase {
    features: Tensor<f64>,
    kps: Vec<Vec<Keypoint>>,
    cfg: LossConfig,
}

const CASE_STRIDE: usize = 4;

impl LossCase {
    fn draw(seed: u64, cfg: LossConfig) -> Self {
        let mut r = rng::stream(seed, "loss-gradcheck");
        // Four maps of 3 channels on a 2x2 grid: pairs (0, 1) and (2, 3).
        let (n, c, h, w) = (4, 3, 2, 2);
        let data = (0..n * c * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
        let extent = (h * CASE_STRIDE) as f64;
        let kps = (0..n)
            .map(|_| {
                (0..2)
                    .map(|_| Keypoint::new(r.random_range(0.0..extent), r.random_range(0.0..extent)))
                    .collect()
            })
            .collect();
        LossCase {
            features: Tensor::new(vec![n, c, h, w], data).expect("shape"),
            kps,
            cfg,
        }
    }

    fn loss(&self, g: &mut Graph<f64>, x: Var) -> Result<Var> {
        let extent = 2 * CASE_STRIDE;
        let slot = |index| FeatureSlot {
            var: x,
            index,
            stride: CASE_STRIDE,
            source: (extent, extent),
        };
        let pairs = [
            PairTerm {
                src: slot(0),
                tgt: slot(1),
                src_kps: &self.kps[0],
                tgt_kps: &self.kps[1],
            },
            PairTerm {
                src: slot(2),
                tgt: slot(3),
                src_kps: &self.kps[2],
                tgt_kps: &self.kps[3],
            },
        ];
        batch_loss(g, &pairs, &self.cfg)
    }

    fn value(&self, features: &Tensor<f64>) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(features.clone());
        let l = self.loss(&mut g, x)?;
        Ok(g.value(l).item())
    }
}

/// Maximum relative error between the analytic gradient of a random
/// two-pair batch loss and central finite differences, in `f64`.
pub fn loss_grad_check(seed: u64, cfg: LossConfig) -> Result<f64> {
    let case = LossCase::draw(seed, cfg);
    let mut g = Graph::<f64>::new();
    let x = g.parameter(case.features.clone());
    let l = case.loss(&mut g, x)?;
    let grads = g.backward(l)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(case.features.shape()));
    let mut probe = case.features.clone();
    let mut worst: f64 = 0.0;
    for i in 0..probe.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let up = case.value(&probe)?;
        probe.data_mut()[i] = orig - FD_STEP;
        let down = case.value(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic.data()[i], (up - down) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::TOLERANCE;
    use proptest::prelude::*;

    fn map(c: usize, h: usize, w: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap::new(c, h, w, 16, data).unwrap()
    }

    #[test]
    fn keypoint_to_cell_examples() {
        let g = (4, 4);
        assert_eq!(keypoint_to_cell(Keypoint::new(0.0, 0.0), 16, g).unwrap(), CellCoord { row: 0, col: 0 });
        assert_eq!(keypoint_to_cell(Keypoint::new(31.0, 47.0), 16, g).unwrap(), CellCoord { row: 2, col: 1 });
        assert_eq!(keypoint_to_cell(Keypoint::new(63.0, 63.0), 16, g).unwrap(), CellCoord { row: 3, col: 3 });
        assert_eq!(keypoint_to_cell(Keypoint::new(90.0, 70.0), 16, g).unwrap(), CellCoord { row: 3, col: 3 });
        assert!(matches!(keypoint_to_cell(Keypoint::new(-1.0, 3.0), 16, g), Err(Error::Domain(_))));
    }

    #[test]
    fn cell_to_pixel_examples() {
        assert_eq!(cell_to_pixel(CellCoord { row: 0, col: 0 }, 16), Keypoint::new(8.0, 8.0));
        assert_eq!(cell_to_pixel(CellCoord { row: 3, col: 3 }, 16), Keypoint::new(56.0, 56.0));
    }

    #[test]
    fn uniform_features_give_k_log_cells() {
        let f = map(3, 4, 4, vec![0.25; 48]);
        let kps: Vec<Keypoint> = (0..5).map(|i| Keypoint::new(i as f64 * 12.0, 63.0 - i as f64 * 10.0)).collect();
        let l = contrastive_loss_value(&f, &f, &kps, &kps, &LossConfig::default()).unwrap();
        assert!((l - 5.0 * 16f64.ln()).abs() < 1e-5, "{l}");
    }

    #[test]
    fn one_by_two_grid_closed_form() {
        // Source vector (1, 1); target cells (1, 1) and (-1, 1): scores 2 and 0.
        let f = map(2, 1, 2, vec![1.0, 0.0, 1.0, 0.0]);
        let fp = map(2, 1, 2, vec![1.0, -1.0, 1.0, 1.0]);
        let l = contrastive_loss_value(
            &f,
            &fp,
            &[Keypoint::new(3.0, 3.0)],
            &[Keypoint::new(5.0, 9.0)],
            &LossConfig::default(),
        )
        .unwrap();
        let e2 = 2f64.exp();
        let expect = -(e2 / (e2 + 1.0)).ln();
        assert!((l - expect).abs() < 1e-6, "{l} vs {expect}");
        assert!((expect - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn loss_falls_as_the_positive_logit_grows() {
        let mut last = f64::INFINITY;
        for s in [0.0f32, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let f = map(1, 1, 2, vec![1.0, 0.0]);
            let fp = map(1, 1, 2, vec![s, 0.0]);
            let l = contrastive_loss_value(
                &f,
                &fp,
                &[Keypoint::new(0.0, 0.0)],
                &[Keypoint::new(0.0, 0.0)],
                &LossConfig::default(),
            )
            .unwrap();
            assert!(l < last && l > 0.0);
            last = l;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn errors_for_bad_inputs() {
        let f = map(1, 2, 2, vec![0.0; 4]);
        let k1 = [Keypoint::new(1.0, 1.0)];
        let k2 = [Keypoint::new(1.0, 1.0), Keypoint::new(2.0, 2.0)];
        let cfg = LossConfig::default();
        assert!(matches!(contrastive_loss_value(&f, &f, &k1, &k2, &cfg), Err(Error::Contract(_))));
        let out = [Keypoint::new(40.0, 1.0)];
        assert!(matches!(contrastive_loss_value(&f, &f, &out, &k1, &cfg), Err(Error::Domain(_))));
        let g = map(2, 2, 2, vec![0.0; 8]);
        assert!(matches!(contrastive_loss_value(&f, &g, &k1, &k1, &cfg), Err(Error::Shape { .. })));
        let bad = LossConfig {
            temperature: 0.0,
            ..cfg
        };
        assert!(matches!(contrastive_loss_value(&f, &f, &k1, &k1, &bad), Err(Error::Config(_))));
    }

    fn random_map(seed: u64) -> FeatureMap {
        let mut r = rng::stream(seed, "obj");
        map(4, 3, 3, rng::normal_tensor(&mut r, &[36], 1.0).into_data())
    }

    fn random_kps(seed: u64, k: usize) -> Vec<Keypoint> {
        let mut r = rng::stream(seed, "kps");
        (0..k).map(|_| Keypoint::new(r.random_range(0.0..48.0), r.random_range(0.0..48.0))).collect()
    }

    #[test]
    fn batch_mean_behaviour() {
        let (a, b, c, d) = (random_map(1), random_map(2), random_map(3), random_map(4));
        let (ka, kb, kc, kd) = (random_kps(1, 5), random_kps(2, 5), random_kps(3, 5), random_kps(4, 5));
        let cfg = LossConfig::default();
        let l1 = contrastive_loss_value(&a, &b, &ka, &kb, &cfg).unwrap();
        let l2 = contrastive_loss_value(&c, &d, &kc, &kd, &cfg).unwrap();

        let mut g = Graph::<f64>::new();
        let sa = slot_of(&mut g, &a);
        let sb = slot_of(&mut g, &b);
        let sc = slot_of(&mut g, &c);
        let sd = slot_of(&mut g, &d);
        let ab = PairTerm {
            src: sa,
            tgt: sb,
            src_kps: &ka,
            tgt_kps: &kb,
        };
        let cd = PairTerm {
            src: sc,
            tgt: sd,
            src_kps: &kc,
            tgt_kps: &kd,
        };
        let one = batch_loss(&mut g, &[ab], &cfg).unwrap();
        let four = batch_loss(&mut g, &[ab, ab, ab, ab], &cfg).unwrap();
        let two = batch_loss(&mut g, &[ab, cd], &cfg).unwrap();
        assert!((g.value(one).item() - l1).abs() < 1e-12);
        assert!((g.value(four).item() - l1).abs() < 1e-12);
        assert!((g.value(two).item() - (l1 + l2) / 2.0).abs() < 1e-12);
        assert!(batch_loss(&mut g, &[], &cfg).is_err());
    }

    #[test]
    fn symmetric_term_adds_the_mirror() {
        let (a, b) = (random_map(7), random_map(8));
        let (ka, kb) = (random_kps(7, 3), random_kps(8, 3));
        let cfg = LossConfig::default();
        let sym = LossConfig {
            symmetric: true,
            ..cfg
        };
        let fwd = contrastive_loss_value(&a, &b, &ka, &kb, &cfg).unwrap();
        let back = contrastive_loss_value(&b, &a, &kb, &ka, &cfg).unwrap();
        let both = contrastive_loss_value(&a, &b, &ka, &kb, &sym).unwrap();
        assert!((both - fwd - back).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for seed in 0..4 {
            for cfg in [
                LossConfig::default(),
                LossConfig {
                    temperature: 0.5,
                    normalize: true,
                    symmetric: true,
                },
            ] {
                let err = loss_grad_check(seed, cfg).unwrap();
                assert!(err < TOLERANCE, "seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn positive_and_negative_cells_pull_in_opposite_directions() {
        // Along the source feature direction, the gradient at the positive
        // cell is negative and at every other cell positive.
        for seed in 0..10 {
            let f = random_map(seed);
            let fp = random_map(seed + 100);
            let kps = [Keypoint::new(20.0, 20.0)];
            let kps_p = [Keypoint::new(40.0, 8.0)];
            let mut g = Graph::<f64>::new();
            let src = slot_of(&mut g, &f);
            let t = g.parameter(fp.to_tensor().cast());
            let tgt = FeatureSlot {
                var: t,
                index: 0,
                stride: 16,
                source: (48, 48),
            };
            let term = PairTerm {
                src,
                tgt,
                src_kps: &kps,
                tgt_kps: &kps_p,
            };
            let l = contrastive_loss(&mut g, &term, &LossConfig::default()).unwrap();
            let grad = g.backward(l).unwrap().get(t).unwrap().clone();
            let q = f.vector(1, 1);
            let along = |row: usize, col: usize| -> f64 {
                (0..4).map(|c| grad.data()[(c * 3 + row) * 3 + col] * q[c] as f64).sum()
            };
            for row in 0..3 {
                for col in 0..3 {
                    let v = along(row, col);
                    if (row, col) == (0, 2) {
                        assert!(v < 0.0);
                    } else {
                        assert!(v > 0.0);
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn role_permutation_leaves_loss_unchanged(seed in any::<u64>(), shift in 0usize..5) {
            let (a, b) = (random_map(seed), random_map(seed ^ 1));
            let (ka, kb) = (random_kps(seed, 5), random_kps(seed ^ 1, 5));
            let cfg = LossConfig::default();
            let l = contrastive_loss_value(&a, &b, &ka, &kb, &cfg).unwrap();
            let mut pa = ka.clone();
            let mut pb = kb.clone();
            pa.rotate_left(shift);
            pb.rotate_left(shift);
            let lp = contrastive_loss_value(&a, &b, &pa, &pb, &cfg).unwrap();
            prop_assert!((l - lp).abs() < 1e-9);
        }

        #[test]
        fn per_role_terms_are_positive_and_finite(seed in any::<u64>(), scale in 0.1f32..50.0) {
            let mut a = random_map(seed);
            a.data.iter_mut().for_each(|v| *v *= scale);
            let b = random_map(seed ^ 2);
            let ka = random_kps(seed, 1);
            let kb = random_kps(seed ^ 2, 1);
            let l = contrastive_loss_value(&a, &b, &ka, &kb, &LossConfig::default()).unwrap();
            prop_assert!(l.is_finite() && l >= 0.0);
        }

        #[test]
        fn round_trip_within_quantization_bound(x in 0.0f64..64.0, y in 0.0f64..64.0) {
            let p = Keypoint::new(x, y);
            let back = cell_to_pixel(keypoint_to_cell(p, 16, (4, 4)).unwrap(), 16);
            prop_assert!((back.x - x).abs() <= 8.0 && (back.y - y).abs() <= 8.0);
            prop_assert!(back.distance(&p) <= 16.0 / 2f64.sqrt() + 1e-9);
        }
    }
}
