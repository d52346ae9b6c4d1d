//! Keypoint matching, PCK scoring and the correspondence benchmark.

mod fewshot;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use fewshot::{
    fewshot_features, fewshot_split, run_fewshot, train_probe, trunk_descriptor, FewshotRow, FewshotSplit,
    FewshotTable, ProbeConfig,
};

use crate::dataset::{DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::{cell_to_pixel, keypoint_to_cell, CellCoord, Keypoint};
use crate::par::{self, Execution};
use crate::rng;
use crate::training::trunk_cache;
use crate::trunk::FeatureMap;

/// Default PCK threshold for 64 px synthetic images.
pub const DESK_THRESHOLD: f64 = 8.0;
pub const PAPER_THRESHOLD: f64 = 23.0;
pub const PAIRS_PER_TASK: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleMatch {
    pub source: Keypoint,
    pub source_cell: CellCoord,
    pub cell: CellCoord,
    /// Centre of the predicted cell.
    pub predicted: Keypoint,
    pub score: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub roles: Vec<RoleMatch>,
}

/// Row-major argmax of `scores`, keeping the first maximum.
fn argmax(scores: &[f32]) -> (usize, f32) {
    let mut best = (0, scores[0]);
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

fn check_channels(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.channels != b.channels {
        return Err(Error::Shape {
            op: "match_keypoints",
            lhs: vec![a.channels, a.height, a.width],
            rhs: vec![b.channels, b.height, b.width],
        });
    }
    if b.cells() == 0 {
        return Err(Error::contract("empty target grid"));
    }
    Ok(())
}

fn best_cell(f_src: &FeatureMap, f_tgt: &FeatureMap, at: CellCoord) -> (CellCoord, f32) {
    let (i, score) = argmax(&f_tgt.scores(&f_src.vector(at.row, at.col)));
    (
        CellCoord {
            row: i / f_tgt.width,
            col: i % f_tgt.width,
        },
        score,
    )
}

/// For every source keypoint, the target cell with the largest dot product
/// against the source cell's feature. Ties go to the lowest `(row, col)`.
pub fn match_keypoints(f_src: &FeatureMap, f_tgt: &FeatureMap, kps_src: &[Keypoint]) -> Result<MatchResult> {
    if kps_src.is_empty() {
        return Err(Error::contract("no keypoints to match"));
    }
    check_channels(f_src, f_tgt)?;
    let roles = kps_src
        .iter()
        .map(|&p| {
            let at = keypoint_to_cell(p, f_src.stride, (f_src.height, f_src.width))?;
            let (cell, score) = best_cell(f_src, f_tgt, at);
            Ok(RoleMatch {
                source: p,
                source_cell: at,
                cell,
                predicted: cell_to_pixel(cell, f_tgt.stride),
                score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MatchResult { roles })
}

/// Matches the centre of every `grid_step`-th source cell along both axes.
pub fn dense_match(f_src: &FeatureMap, f_tgt: &FeatureMap, grid_step: usize) -> Result<Vec<(CellCoord, CellCoord)>> {
    if grid_step == 0 {
        return Err(Error::contract("grid step must be at least 1"));
    }
    check_channels(f_src, f_tgt)?;
    let mut out = Vec::new();
    for row in (0..f_src.height).step_by(grid_step) {
        for col in (0..f_src.width).step_by(grid_step) {
            let at = CellCoord { row, col };
            out.push((at, best_cell(f_src, f_tgt, at).0));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PckCount {
    pub correct: usize,
    pub total: usize,
    pub pck: f64,
}

impl PckCount {
    fn add(&mut self, correct: usize, total: usize) {
        self.correct += correct;
        self.total += total;
        self.pck = if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        };
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub task: String,
    pub source: String,
    pub target: String,
    pub correct: usize,
    pub total: usize,
    pub distances: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    pub threshold: f64,
    pub normalize: bool,
    pub variant: Option<String>,
    pub overall: PckCount,
    pub per_task: BTreeMap<String, PckCount>,
    pub skipped: Vec<String>,
    pub pairs: Vec<PairRecord>,
}

impl PckReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    /// One row per task plus an `overall` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,correct,total,pck\n");
        for (t, c) in self.per_task.iter().chain([(&"overall".to_string(), &self.overall)]) {
            let _ = writeln!(s, "{t},{},{},{:.4}", c.correct, c.total, c.pck);
        }
        s
    }

    /// Writes `path` as JSON and a sibling `.csv`.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))?;
        let csv = path.with_extension("csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// A prediction is correct when it lies within `threshold_px` of the truth.
/// `tasks[i]` labels pair `i`.
pub fn compute_pck(
    tasks: &[&str],
    matches: &[MatchResult],
    gts: &[Vec<Keypoint>],
    threshold_px: f64,
) -> Result<PckReport> {
    if matches.len() != gts.len() || tasks.len() != gts.len() {
        return Err(Error::contract(format!(
            "{} task labels, {} match results and {} ground-truth lists",
            tasks.len(),
            matches.len(),
            gts.len()
        )));
    }
    if !(threshold_px >= 0.0) {
        return Err(Error::contract("threshold must be nonnegative"));
    }
    let mut overall = PckCount::default();
    let mut per_task: BTreeMap<String, PckCount> = BTreeMap::new();
    let mut pairs = Vec::with_capacity(matches.len());
    for ((task, m), gt) in tasks.iter().zip(matches).zip(gts) {
        if m.roles.len() != gt.len() {
            return Err(Error::contract(format!(
                "{} predictions against {} ground-truth keypoints",
                m.roles.len(),
                gt.len()
            )));
        }
        let distances: Vec<f64> = m.roles.iter().zip(gt).map(|(r, g)| r.predicted.distance(g)).collect();
        let correct = distances.iter().filter(|&&d| d <= threshold_px).count();
        overall.add(correct, gt.len());
        per_task.entry(task.to_string()).or_default().add(correct, gt.len());
        pairs.push(PairRecord {
            task: task.to_string(),
            source: String::new(),
            target: String::new(),
            correct,
            total: gt.len(),
            distances,
        });
    }
    Ok(PckReport {
        threshold: threshold_px,
        normalize: false,
        variant: None,
        overall,
        per_task,
        skipped: Vec::new(),
        pairs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub pairs_per_task: usize,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: DESK_THRESHOLD,
            pairs_per_task: PAIRS_PER_TASK,
            normalize: false,
            seed: 0,
        }
    }
}

/// `(task, source annotation, target annotation)`.
pub type Triplet = (String, usize, usize);

/// Up to `per_task` distinct (train source, test target) pairs per task,
/// drawn without replacement. Tasks missing either side are returned
/// separately.
pub fn benchmark_triplets(index: &DatasetIndex, per_task: usize, seed: u64) -> (Vec<Triplet>, Vec<String>) {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for (t, task) in index.tasks().iter().enumerate() {
        let sources = index.annotations_for(Split::Train, task);
        let targets = index.annotations_for(Split::Test, task);
        if sources.is_empty() || targets.is_empty() {
            skipped.push(format!(
                "task `{task}` has {} train and {} test annotation(s), need one of each",
                sources.len(),
                targets.len()
            ));
            continue;
        }
        let mut all: Vec<(usize, usize)> = Vec::with_capacity(sources.len() * targets.len());
        for &a in &sources {
            for &b in &targets {
                all.push((a, b));
            }
        }
        all.shuffle(&mut rng::indexed(seed, "benchmark", t as u64));
        out.extend(all.into_iter().take(per_task).map(|(a, b)| (task.clone(), a, b)));
    }
    (out, skipped)
}

/// Task features for every `(image position, task)` in `wanted`.
pub fn task_features(
    model: &Model,
    trunk: &[FeatureMap],
    wanted: &BTreeSet<(usize, usize)>,
    normalize: bool,
    exec: Execution,
) -> Result<BTreeMap<(usize, usize), FeatureMap>> {
    let keys: Vec<(usize, usize)> = wanted.iter().copied().collect();
    let maps = par::try_map_range(exec, keys.len(), |i| {
        let (img, task) = keys[i];
        let f = model.features_from_trunk(&trunk[img], task)?;
        Ok::<_, Error>(if normalize { f.l2_normalized() } else { f })
    })?;
    Ok(keys.into_iter().zip(maps).collect())
}

/// Features of each annotation's image under its task.
pub struct FeatureBank {
    maps: BTreeMap<(usize, usize), FeatureMap>,
    task_of: Vec<usize>,
    image_of: Vec<usize>,
}

impl FeatureBank {
    /// Computes features for the annotations listed in `needed`.
    pub fn build(
        index: &DatasetIndex,
        model: &Model,
        needed: &BTreeSet<usize>,
        normalize: bool,
        exec: Execution,
    ) -> Result<Self> {
        let trunk = trunk_cache(model.trunk(), index, exec)?;
        Self::from_trunk(index, model, &trunk, needed, normalize, exec)
    }

    pub fn from_trunk(
        index: &DatasetIndex,
        model: &Model,
        trunk: &[FeatureMap],
        needed: &BTreeSet<usize>,
        normalize: bool,
        exec: Execution,
    ) -> Result<Self> {
        let anns = index.annotations();
        let task_of = anns.iter().map(|a| model.task_index(&a.task)).collect::<Result<Vec<_>>>()?;
        let image_of: Vec<usize> = anns
            .iter()
            .map(|a| index.image_position(&a.image_id).expect("validated index"))
            .collect();
        let wanted: BTreeSet<(usize, usize)> = needed.iter().map(|&a| (image_of[a], task_of[a])).collect();
        let maps = task_features(model, trunk, &wanted, normalize, exec)?;
        Ok(FeatureBank { maps, task_of, image_of })
    }

    /// Features of annotation `ann`'s image under `task` (defaults to its own).
    pub fn get(&self, ann: usize, task: Option<usize>) -> Option<&FeatureMap> {
        self.maps.get(&(self.image_of[ann], task.unwrap_or(self.task_of[ann])))
    }
}

/// PCK over the seeded train-to-test benchmark.
pub fn eval_benchmark(index: &DatasetIndex, model: &Model, cfg: &EvalConfig, exec: Execution) -> Result<PckReport> {
    let (triplets, skipped) = benchmark_triplets(index, cfg.pairs_per_task, cfg.seed);
    if triplets.is_empty() {
        return Err(Error::contract("the test split holds no usable pairs"));
    }
    let needed: BTreeSet<usize> = triplets.iter().flat_map(|(_, a, b)| [*a, *b]).collect();
    let bank = FeatureBank::build(index, model, &needed, cfg.normalize, exec)?;
    let anns = index.annotations();
    let matches = par::try_map_range(exec, triplets.len(), |i| {
        let (_, a, b) = &triplets[i];
        match_keypoints(
            bank.get(*a, None).expect("computed"),
            bank.get(*b, None).expect("computed"),
            &anns[*a].keypoints,
        )
    })?;
    let tasks: Vec<&str> = triplets.iter().map(|(t, _, _)| t.as_str()).collect();
    let gts: Vec<Vec<Keypoint>> = triplets.iter().map(|(_, _, b)| anns[*b].keypoints.clone()).collect();
    let mut report = compute_pck(&tasks, &matches, &gts, cfg.threshold)?;
    for (rec, (_, a, b)) in report.pairs.iter_mut().zip(&triplets) {
        rec.source = anns[*a].image_id.clone();
        rec.target = anns[*b].image_id.clone();
    }
    report.normalize = cfg.normalize;
    report.variant = Some(model.variant().as_str().to_string());
    report.skipped = skipped;
    Ok(report)
}

/// Expected PCK of a uniformly random cell prediction: the share of cell
/// centres within `threshold_px` of each ground-truth point, averaged.
pub fn chance_pck(gts: &[Keypoint], grid: (usize, usize), stride: usize, threshold_px: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let cells = (grid.0 * grid.1) as f64;
    let mut acc = 0.0;
    for g in gts {
        let mut hits = 0usize;
        for row in 0..grid.0 {
            for col in 0..grid.1 {
                if cell_to_pixel(CellCoord { row, col }, stride).distance(g) <= threshold_px {
                    hits += 1;
                }
            }
        }
        acc += hits as f64 / cells;
    }
    100.0 * acc / gts.len() as f64
}

/// How often predictions for the same source points change with the task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskDependence {
    /// Pairs whose ground-truth correspondence differs between the tasks.
    pub pairs: usize,
    /// Of those, pairs where at least one predicted cell differs.
    pub differing: usize,
    pub fraction: f64,
}

/// Task pairs `(t1, t2)` and test annotation pairs `(src, tgt)` under both
/// tasks whose ground truth maps some `t1` source keypoint elsewhere under
/// `t2`. Each source keypoint of `t1` is matched with the features of both
/// tasks.
pub fn task_dependence(
    index: &DatasetIndex,
    model: &Model,
    normalize: bool,
    max_pairs: usize,
    seed: u64,
    exec: Execution,
) -> Result<TaskDependence> {
    let anns = index.annotations();
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for a in (0..anns.len()).filter(|&a| anns[a].split == Split::Test) {
        by_image.entry(anns[a].image_id.as_str()).or_default().push(a);
    }
    // (src_t1, src_t2, tgt_t1, tgt_t2)
    let mut candidates = Vec::new();
    let images: Vec<(&str, &Vec<usize>)> = by_image.iter().map(|(k, v)| (*k, v)).collect();
    for (si, (_, src)) in images.iter().enumerate() {
        for (ti, (_, tgt)) in images.iter().enumerate() {
            if si == ti {
                continue;
            }
            for &s1 in src.iter() {
                for &s2 in src.iter() {
                    if anns[s1].task >= anns[s2].task {
                        continue;
                    }
                    let find = |task: &str| tgt.iter().copied().find(|&t| anns[t].task == task);
                    let (Some(t1), Some(t2)) = (find(&anns[s1].task), find(&anns[s2].task)) else {
                        continue;
                    };
                    if correspondence_differs(&anns[s1].keypoints, &anns[s2].keypoints, &anns[t1].keypoints, &anns[t2].keypoints) {
                        candidates.push((s1, s2, t1, t2));
                    }
                }
            }
        }
    }
    candidates.shuffle(&mut rng::stream(seed, "task-dependence"));
    candidates.truncate(max_pairs);
    if candidates.is_empty() {
        return Ok(TaskDependence::default());
    }
    let needed: BTreeSet<usize> = candidates.iter().flat_map(|&(a, b, c, d)| [a, b, c, d]).collect();
    let bank = FeatureBank::build(index, model, &needed, normalize, exec)?;
    let differ = par::try_map_range(exec, candidates.len(), |i| {
        let (s1, s2, t1, t2) = candidates[i];
        let q = &anns[s1].keypoints;
        let a = match_keypoints(bank.get(s1, None).expect("built"), bank.get(t1, None).expect("built"), q)?;
        let b = match_keypoints(bank.get(s2, None).expect("built"), bank.get(t2, None).expect("built"), q)?;
        Ok::<_, Error>(a.roles.iter().zip(&b.roles).any(|(x, y)| x.cell != y.cell))
    })?;
    let differing = differ.iter().filter(|&&d| d).count();
    Ok(TaskDependence {
        pairs: candidates.len(),
        differing,
        fraction: differing as f64 / candidates.len() as f64,
    })
}

/// True if some keypoint of `src1` also appears in `src2` under another role
/// whose target differs from the one `tgt1` gives it.
fn correspondence_differs(src1: &[Keypoint], src2: &[Keypoint], tgt1: &[Keypoint], tgt2: &[Keypoint]) -> bool {
    const SAME: f64 = 1e-6;
    src1.iter().enumerate().any(|(k, p)| {
        src2.iter()
            .position(|q| q.distance(p) < SAME)
            .is_some_and(|j| tgt1[k].distance(&tgt2[j]) > SAME)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fm(c: usize, h: usize, w: usize, stride: usize, data: Vec<f32>) -> FeatureMap {
        FeatureMap::new(c, h, w, stride, data).unwrap()
    }

    fn brute(f_src: &FeatureMap, f_tgt: &FeatureMap, at: CellCoord) -> CellCoord {
        let mut best: Option<(f32, CellCoord)> = None;
        for row in 0..f_tgt.height {
            for col in 0..f_tgt.width {
                let mut s = 0.0f32;
                for c in 0..f_src.channels {
                    s += f_src.at(c, at.row, at.col) * f_tgt.at(c, row, col);
                }
                let cell = CellCoord { row, col };
                best = match best {
                    Some((b, bc)) if b > s || (b == s && bc < cell) => Some((b, bc)),
                    _ => Some((s, cell)),
                };
            }
        }
        best.unwrap().1
    }

    fn random_map(seed: u64, c: usize, h: usize, w: usize, ties: bool) -> FeatureMap {
        use rand::Rng as _;
        let mut r = rng::stream(seed, "map");
        let data = (0..c * h * w)
            .map(|_| {
                if ties {
                    r.random_range(0..3) as f32
                } else {
                    r.random::<f32>() * 2.0 - 1.0
                }
            })
            .collect();
        fm(c, h, w, 8, data)
    }

    #[test]
    fn two_by_two_hand_set() {
        // Target cells (1,0) (0,1) (-1,0) (0.6,0.6); source (1,1).
        let tgt = fm(2, 2, 2, 4, vec![1.0, 0.0, -1.0, 0.6, 0.0, 1.0, 0.0, 0.6]);
        let src = fm(2, 1, 1, 4, vec![1.0, 1.0]);
        let m = match_keypoints(&src, &tgt, &[Keypoint::new(1.0, 1.0)]).unwrap();
        assert_eq!(m.roles[0].cell, CellCoord { row: 1, col: 1 });
        assert_eq!(m.roles[0].predicted, Keypoint::new(6.0, 6.0));
        // (1,0) and (0,1) tie at 1 when the last cell is lowered.
        let tgt = fm(2, 2, 2, 4, vec![1.0, 0.0, -1.0, 0.4, 0.0, 1.0, 0.0, 0.4]);
        let m = match_keypoints(&src, &tgt, &[Keypoint::new(1.0, 1.0)]).unwrap();
        assert_eq!(m.roles[0].cell, CellCoord { row: 0, col: 0 });
    }

    #[test]
    fn self_match_of_normalized_distinct_features() {
        let f = random_map(1, 8, 4, 4, false).l2_normalized();
        let kps: Vec<Keypoint> = (0..16).map(|i| cell_to_pixel(CellCoord { row: i / 4, col: i % 4 }, 8)).collect();
        let m = match_keypoints(&f, &f, &kps).unwrap();
        for r in &m.roles {
            assert_eq!(r.cell, r.source_cell);
        }
        let d = dense_match(&f, &f, 1).unwrap();
        assert_eq!(d.len(), 16);
        assert!(d.iter().all(|(a, b)| a == b));
        assert_eq!(dense_match(&f, &f, 4).unwrap().len(), 1);
    }

    #[test]
    fn empty_keypoints_and_channel_mismatch() {
        let a = random_map(1, 4, 2, 2, false);
        let b = random_map(2, 5, 2, 2, false);
        assert!(matches!(match_keypoints(&a, &a, &[]), Err(Error::Contract(_))));
        assert!(matches!(match_keypoints(&a, &b, &[Keypoint::new(0.0, 0.0)]), Err(Error::Shape { .. })));
        assert!(dense_match(&a, &a, 0).is_err());
    }

    #[test]
    fn pck_counting() {
        let m = |x: f64| MatchResult {
            roles: vec![RoleMatch {
                source: Keypoint::new(0.0, 0.0),
                source_cell: CellCoord { row: 0, col: 0 },
                cell: CellCoord { row: 0, col: 0 },
                predicted: Keypoint::new(x, 0.0),
                score: 0.0,
            }],
        };
        let gt = vec![vec![Keypoint::new(0.0, 0.0)], vec![Keypoint::new(0.0, 0.0)]];
        let r = compute_pck(&["a", "b"], &[m(0.0), m(0.0)], &gt, 8.0).unwrap();
        assert_eq!(r.overall.pck, 100.0);
        let r = compute_pck(&["a", "b"], &[m(8.0), m(8.5)], &gt, 8.0).unwrap();
        assert_eq!(r.overall.pck, 50.0);
        assert_eq!(r.per_task["a"].correct, 1);
        assert_eq!(r.per_task["b"].correct, 0);
        assert!(compute_pck(&["a"], &[m(0.0), m(0.0)], &gt, 8.0).is_err());
        assert!(r.to_csv().ends_with("overall,1,2,50.0000\n"));
    }

    #[test]
    fn chance_level_on_a_four_by_four_grid() {
        // Cell centres sit at 8, 24, 40, 56. From (32, 32) the four middle
        // centres are 11.31 px away, the next ring 17.9 px.
        let c = chance_pck(&[Keypoint::new(32.0, 32.0)], (4, 4), 16, 12.0);
        assert_eq!(c, 100.0 * 4.0 / 16.0);
        assert_eq!(chance_pck(&[Keypoint::new(32.0, 32.0)], (4, 4), 16, 8.0), 0.0);
        assert_eq!(chance_pck(&[Keypoint::new(24.0, 24.0)], (4, 4), 16, 8.0), 100.0 / 16.0);
        assert_eq!(chance_pck(&[Keypoint::new(0.0, 0.0)], (4, 4), 16, 8.0), 0.0);
    }

    #[test]
    fn differing_correspondence_detection() {
        let p = |x: f64| Keypoint::new(x, 0.0);
        // Same parts, same targets: no difference.
        assert!(!correspondence_differs(&[p(1.0), p(2.0)], &[p(2.0), p(1.0)], &[p(5.0), p(6.0)], &[p(6.0), p(5.0)]));
        // Part 1 goes to 5 under one task and to 6 under the other.
        assert!(correspondence_differs(&[p(1.0), p(2.0)], &[p(2.0), p(1.0)], &[p(5.0), p(6.0)], &[p(5.0), p(6.0)]));
    }

    #[test]
    fn triplets_pair_train_sources_with_test_targets() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::dataset::synth::SynthConfig {
            instances: 5,
            ..Default::default()
        };
        let index = crate::dataset::synth::gen_synthetic_with(&cfg, dir.path(), Execution::Sequential).unwrap();
        let (ts, skipped) = benchmark_triplets(&index, 7, 3);
        assert!(skipped.is_empty());
        assert_eq!(ts.len(), 7 * index.tasks().len());
        let anns = index.annotations();
        for (task, a, b) in &ts {
            assert_eq!((anns[*a].split, anns[*b].split), (Split::Train, Split::Test));
            assert!(anns[*a].task == *task && anns[*b].task == *task);
        }
        let distinct: BTreeSet<(usize, usize)> = ts.iter().map(|(_, a, b)| (*a, *b)).collect();
        assert_eq!(distinct.len(), ts.len());
        assert_eq!(benchmark_triplets(&index, 7, 3).0, ts);
        assert_ne!(benchmark_triplets(&index, 7, 4).0, ts);
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed in any::<u64>(), c in 1usize..6, h in 1usize..9, w in 1usize..9, ties in any::<bool>()) {
            let src = random_map(seed, c, h, w, ties);
            let tgt = random_map(seed ^ 1, c, w, h, ties);
            let kps: Vec<Keypoint> = (0..h * w).map(|i| cell_to_pixel(CellCoord { row: i / w, col: i % w }, 8)).collect();
            let m = match_keypoints(&src, &tgt, &kps).unwrap();
            for r in &m.roles {
                prop_assert_eq!(r.cell, brute(&src, &tgt, r.source_cell));
            }
            let scaled = FeatureMap { data: tgt.data.iter().map(|v| v * 4.0).collect(), ..tgt.clone() };
            let m2 = match_keypoints(&src, &scaled, &kps).unwrap();
            prop_assert!(m.roles.iter().zip(&m2.roles).all(|(a, b)| a.cell == b.cell));
        }

        #[test]
        fn pck_recount_permutation_and_threshold(seed in any::<u64>(), n in 1usize..100) {
            use rand::Rng as _;
            let mut r = rng::stream(seed, "pck");
            let mut matches = Vec::new();
            let mut gts = Vec::new();
            let mut tasks = Vec::new();
            for _ in 0..n {
                let roles: Vec<RoleMatch> = (0..3).map(|_| RoleMatch {
                    source: Keypoint::new(0.0, 0.0),
                    source_cell: CellCoord { row: 0, col: 0 },
                    cell: CellCoord { row: 0, col: 0 },
                    predicted: Keypoint::new(r.random_range(0.0..64.0), r.random_range(0.0..64.0)),
                    score: 0.0,
                }).collect();
                gts.push((0..3).map(|_| Keypoint::new(r.random_range(0.0..64.0), r.random_range(0.0..64.0))).collect::<Vec<_>>());
                matches.push(MatchResult { roles });
                tasks.push(if r.random::<bool>() { "a" } else { "b" });
            }
            let rep = compute_pck(&tasks, &matches, &gts, 16.0).unwrap();
            let mut hits = 0;
            for i in 0..n {
                for k in 0..3 {
                    let (p, g) = (matches[i].roles[k].predicted, gts[i][k]);
                    if ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt() <= 16.0 {
                        hits += 1;
                    }
                }
            }
            prop_assert_eq!(rep.overall.correct, hits);
            prop_assert_eq!(rep.overall.total, 3 * n);
            let sum: usize = rep.per_task.values().map(|c| c.correct).sum();
            prop_assert_eq!(sum, hits);
            let (mut t2, mut m2, mut g2) = (tasks.clone(), matches.clone(), gts.clone());
            t2.reverse(); m2.reverse(); g2.reverse();
            let rev = compute_pck(&t2, &m2, &g2, 16.0).unwrap();
            prop_assert_eq!(rev.overall, rep.overall);
            prop_assert_eq!(rev.per_task, rep.per_task);
            let wider = compute_pck(&tasks, &matches, &gts, 20.0).unwrap();
            prop_assert!(wider.overall.pck >= rep.overall.pck);
        }
    }
}
