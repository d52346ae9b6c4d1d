//! Few-shot linear probe on frozen image descriptors.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;
use crate::trunk::FeatureMap;

/// Spatially averaged task features, concatenated over all tasks.
pub fn fewshot_features(model: &Model, trunk: &FeatureMap) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for t in 0..model.tasks().len() {
        out.extend(model.features_from_trunk(trunk, t)?.spatial_mean());
    }
    Ok(out)
}

/// Spatially averaged trunk features.
pub fn trunk_descriptor(trunk: &FeatureMap) -> Vec<f32> {
    trunk.spatial_mean()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotSplit {
    pub classes: Vec<String>,
    pub shots: usize,
    pub seed: u64,
    /// Positions into the image list.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `shots` training images per class, the rest for testing. Classes are
/// ordered by first appearance in `labels`.
pub fn fewshot_split(labels: &[String], shots: usize, seed: u64) -> Result<FewshotSplit> {
    if shots == 0 {
        return Err(Error::Split("shots must be at least 1".into()));
    }
    let mut classes: Vec<String> = Vec::new();
    for l in labels {
        if !classes.contains(l) {
            classes.push(l.clone());
        }
    }
    if classes.len() < 2 {
        return Err(Error::Split(format!("need at least 2 classes, found {}", classes.len())));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, class) in classes.iter().enumerate() {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| &labels[i] == class).collect();
        if members.len() < shots + 1 {
            return Err(Error::Split(format!(
                "class `{class}` has {} image(s), {shots}-shot needs {}",
                members.len(),
                shots + 1
            )));
        }
        members.shuffle(&mut rng::indexed(seed, "fewshot", (shots * 1000 + c) as u64));
        train.extend_from_slice(&members[..shots]);
        test.extend_from_slice(&members[shots..]);
    }
    Ok(FewshotSplit {
        classes,
        shots,
        seed,
        train,
        test,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 500,
            lr: 0.1,
            weight_decay: 1e-4,
        }
    }
}

/// Multinomial logistic regression by full-batch gradient descent from zero
/// weights. Returns `(weights [K x D], biases [K])`.
pub fn train_probe(x: &[Vec<f64>], y: &[usize], classes: usize, cfg: &ProbeConfig) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = x.first().map_or(0, Vec::len);
    let n = x.len() as f64;
    let mut w = vec![vec![0.0; d]; classes];
    let mut b = vec![0.0; classes];
    let mut p = vec![0.0; classes];
    for _ in 0..cfg.steps {
        let mut gw = vec![vec![0.0; d]; classes];
        let mut gb = vec![0.0; classes];
        for (xi, &yi) in x.iter().zip(y) {
            softmax_into(&w, &b, xi, &mut p);
            for k in 0..classes {
                let err = p[k] - if k == yi { 1.0 } else { 0.0 };
                gb[k] += err / n;
                for (g, &v) in gw[k].iter_mut().zip(xi) {
                    *g += err * v / n;
                }
            }
        }
        for k in 0..classes {
            b[k] -= cfg.lr * gb[k];
            for (wv, g) in w[k].iter_mut().zip(&gw[k]) {
                *wv -= cfg.lr * (g + cfg.weight_decay * *wv);
            }
        }
    }
    (w, b)
}

fn softmax_into(w: &[Vec<f64>], b: &[f64], x: &[f64], p: &mut [f64]) {
    for (k, pk) in p.iter_mut().enumerate() {
        *pk = b[k] + w[k].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
    let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for pk in p.iter_mut() {
        *pk = (*pk - m).exp();
        z += *pk;
    }
    for pk in p.iter_mut() {
        *pk /= z;
    }
}

fn predict(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..w.len() {
        let s = b[k] + w[k].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        if s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

/// Standardises with the training mean and deviation (unit scale for
/// constant dimensions).
fn standardize(features: &[Vec<f32>], train: &[usize]) -> Vec<Vec<f64>> {
    let d = features.first().map_or(0, Vec::len);
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in train {
        for (m, &v) in mean.iter_mut().zip(&features[i]) {
            *m += v as f64 / n;
        }
    }
    let mut sd = vec![0.0; d];
    for &i in train {
        for ((s, &v), m) in sd.iter_mut().zip(&features[i]).zip(&mean) {
            *s += (v as f64 - m).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    features
        .iter()
        .map(|f| f.iter().zip(&mean).zip(&sd).map(|((&v, m), s)| (v as f64 - m) / s).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewshotRow {
    pub shots: usize,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FewshotTable {
    pub rows: Vec<FewshotRow>,
    /// Mean accuracy per shots value over seeds.
    pub means: BTreeMap<usize, f64>,
}

impl FewshotTable {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("shots,seed,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.4}", r.shots, r.seed, r.accuracy);
        }
        s
    }
}

/// Probe accuracy (percent) for every `(shots, seed)` split.
pub fn run_fewshot(
    features: &[Vec<f32>],
    labels: &[String],
    shots: &[usize],
    seeds: &[u64],
    probe: &ProbeConfig,
) -> Result<FewshotTable> {
    if features.len() != labels.len() {
        return Err(Error::contract("one label per feature vector"));
    }
    let mut table = FewshotTable::default();
    for &k in shots {
        let mut acc = 0.0;
        for &seed in seeds {
            let split = fewshot_split(labels, k, seed)?;
            let x = standardize(features, &split.train);
            let class_of = |i: usize| split.classes.iter().position(|c| c == &labels[i]).expect("listed");
            let xt: Vec<Vec<f64>> = split.train.iter().map(|&i| x[i].clone()).collect();
            let yt: Vec<usize> = split.train.iter().map(|&i| class_of(i)).collect();
            let (w, b) = train_probe(&xt, &yt, split.classes.len(), probe);
            let hits = split.test.iter().filter(|&&i| predict(&w, &b, &x[i]) == class_of(i)).count();
            let accuracy = 100.0 * hits as f64 / split.test.len() as f64;
            acc += accuracy;
            table.rows.push(FewshotRow { shots: k, seed, accuracy });
        }
        if !seeds.is_empty() {
            table.means.insert(k, acc / seeds.len() as f64);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn labels(classes: usize, per: usize) -> Vec<String> {
        (0..classes * per).map(|i| format!("c{}", i / per)).collect()
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let l = labels(5, 20);
        for shots in [1, 2, 5] {
            let s = fewshot_split(&l, shots, 3).unwrap();
            assert_eq!(s.train.len(), 5 * shots);
            assert_eq!(s.test.len(), 100 - 5 * shots);
            assert!(s.train.iter().all(|i| !s.test.contains(i)));
            for c in &s.classes {
                assert_eq!(s.train.iter().filter(|&&i| &l[i] == c).count(), shots);
            }
        }
        assert_ne!(fewshot_split(&l, 2, 0).unwrap().train, fewshot_split(&l, 2, 1).unwrap().train);
    }

    #[test]
    fn small_class_is_named() {
        let mut l = labels(2, 3);
        l.pop();
        match fewshot_split(&l, 2, 0) {
            Err(Error::Split(m)) => assert!(m.contains("c1"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn separable_classes_are_learned() {
        let l = labels(2, 10);
        let mut r = rng::stream(0, "sep");
        let f: Vec<Vec<f32>> = l
            .iter()
            .map(|c| {
                let s = if c == "c0" { -1.0 } else { 1.0 };
                vec![s * (1.0 + r.random::<f32>()), r.random::<f32>()]
            })
            .collect();
        let t = run_fewshot(&f, &l, &[5], &[0, 1, 2], &ProbeConfig::default()).unwrap();
        assert_eq!(t.means[&5], 100.0);
    }

    #[test]
    fn shuffled_labels_sit_near_chance() {
        // Monte Carlo: features carry no label information.
        let l = labels(5, 20);
        let mut total = 0.0;
        let runs = 20;
        for s in 0..runs {
            let mut r = rng::stream(s, "noise");
            let f: Vec<Vec<f32>> = (0..100).map(|_| (0..8).map(|_| r.random::<f32>()).collect()).collect();
            let mut shuffled = l.clone();
            shuffled.shuffle(&mut r);
            total += run_fewshot(&f, &shuffled, &[5], &[s], &ProbeConfig::default()).unwrap().means[&5];
        }
        let mean = total / runs as f64;
        assert!((mean - 20.0).abs() <= 10.0, "{mean}");
    }

    #[test]
    fn constant_maps_give_constant_descriptors() {
        let f = FeatureMap::new(3, 2, 2, 16, vec![0.5; 12]).unwrap();
        assert_eq!(trunk_descriptor(&f), vec![0.5; 3]);
    }
}
