//! SGD over sampled pairs with frozen trunk features.

mod checkpoint;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, CheckpointMeta, MAGIC, VERSION};

use crate::dataset::{DatasetIndex, PairSample, PairSampler, Split};
use crate::error::{Error, Result};
use crate::gating::GatingVariant;
use crate::image::RgbImage;
use crate::model::{Bindings, Model, ModelSpec};
use crate::modnet::{ModularNetConfig, Preset};
use crate::objective::{batch_loss, contrastive_loss, FeatureSlot, LossConfig, PairTerm};
use crate::par::{self, Execution};
use crate::rng;
use crate::tensor::{sgd_step, BatchNormMode, Graph, SgdConfig, Tensor};
use crate::trunk::{FeatureMap, Trunk, TrunkConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Pairs per step.
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub variant: GatingVariant,
    pub temperature: f64,
    pub normalize: bool,
    pub symmetric: bool,
    pub preset: Preset,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch: 32,
            steps: 2000,
            seed: 0,
            variant: GatingVariant::Task,
            temperature: 1.0,
            normalize: false,
            symmetric: false,
            preset: Preset::Desk,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be nonnegative".into()));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("batch size and step count must be at least 1".into()));
        }
        self.loss().validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            normalize: self.normalize,
            symmetric: self.symmetric,
        }
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr as f32,
            momentum: self.momentum as f32,
            weight_decay: self.weight_decay as f32,
        }
    }
}

/// Trunk features of every image in the index, by image position.
pub fn trunk_cache(trunk: &Trunk, index: &DatasetIndex, exec: Execution) -> Result<Vec<FeatureMap>> {
    par::try_map_range(exec, index.images().len(), |i| {
        let rec = &index.images()[i];
        let img = RgbImage::load_png(&index.image_path(rec))?;
        let mut fm = trunk.forward(&img.to_tensor())?;
        fm.source_height = rec.height.min(fm.source_height);
        fm.source_width = rec.width.min(fm.source_width);
        Ok(fm)
    })
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

/// Owns a model under optimisation and the cached trunk features.
pub struct Trainer<'a> {
    index: &'a DatasetIndex,
    cache: Vec<FeatureMap>,
    model: Model,
    cfg: TrainConfig,
    /// Index task position to model task position.
    tasks: Vec<usize>,
    losses: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(index: &'a DatasetIndex, model: Model, cfg: TrainConfig, exec: Execution) -> Result<Self> {
        cfg.validate()?;
        let tasks = index
            .tasks()
            .iter()
            .map(|t| model.task_index(t))
            .collect::<Result<Vec<_>>>()?;
        let cache = trunk_cache(model.trunk(), index, exec)?;
        Ok(Trainer {
            index,
            cache,
            model,
            cfg,
            tasks,
            losses: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    fn describe(&self, p: &PairSample) -> String {
        let a = self.index.annotations();
        format!("{}:{}->{}", self.index.tasks()[p.task], a[p.source].image_id, a[p.target].image_id)
    }

    /// One optimisation step on the given pairs; returns the batch loss.
    pub fn step(&mut self, pairs: &[PairSample]) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let anns = self.index.annotations();
        let maps: Vec<&FeatureMap> = pairs
            .iter()
            .map(|p| p.source)
            .chain(pairs.iter().map(|p| p.target))
            .map(|a| {
                let pos = self.index.image_position(&anns[a].image_id).expect("validated index");
                &self.cache[pos]
            })
            .collect();
        let first = maps[0];
        let (c, h, w) = (first.channels, first.height, first.width);
        if let Some(m) = maps.iter().find(|m| (m.channels, m.height, m.width) != (c, h, w)) {
            return Err(Error::Shape {
                op: "train_batch",
                lhs: vec![c, h, w],
                rhs: vec![m.channels, m.height, m.width],
            });
        }
        let mut data = Vec::with_capacity(maps.len() * c * h * w);
        for m in &maps {
            data.extend_from_slice(&m.data);
        }
        let tasks: Vec<usize> = pairs.iter().chain(pairs).map(|p| self.tasks[p.task]).collect();

        let b = pairs.len();
        let mut g = Graph::<f32>::new();
        let mut bind = Bindings::new(&self.model.params, true);
        let x = g.constant(Tensor::new(vec![2 * b, c, h, w], data)?);
        let out = self.model.forward_graph(&mut g, &mut bind, x, &tasks, BatchNormMode::Train)?;
        let slot = |i: usize| FeatureSlot {
            var: out.f,
            index: i,
            stride: maps[i].stride,
            source: (maps[i].source_height, maps[i].source_width),
        };
        let terms: Vec<PairTerm<'_>> = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| PairTerm {
                src: slot(i),
                tgt: slot(b + i),
                src_kps: &anns[p.source].keypoints,
                tgt_kps: &anns[p.target].keypoints,
            })
            .collect();
        let loss_cfg = self.cfg.loss();
        let loss = batch_loss(&mut g, &terms, &loss_cfg)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            let mut bad = Vec::new();
            for (term, p) in terms.iter().zip(pairs) {
                let l = contrastive_loss(&mut g, term, &loss_cfg)?;
                if !g.value(l).item().is_finite() {
                    bad.push(self.describe(p));
                }
            }
            if bad.is_empty() {
                bad = pairs.iter().map(|p| self.describe(p)).collect();
            }
            return Err(Error::Diverged {
                step: self.losses.len() + 1,
                pairs: bad,
            });
        }
        let mut stats = Vec::with_capacity(out.batchnorms.len());
        for (prefix, bn) in &out.batchnorms {
            let (mean, var) = g
                .running_stats(*bn)
                .ok_or_else(|| Error::contract(format!("{prefix}: not a train-mode batchnorm")))?;
            stats.push((prefix.clone(), mean.to_vec(), var.to_vec()));
        }
        let grads = g.backward(loss)?;
        let mut grads = bind.gradients(&grads);
        drop(bind);
        for name in self.model.params.trainable_names() {
            if !grads.contains_key(name) {
                let shape = self.model.params.value(name)?.shape().to_vec();
                grads.insert(name.to_string(), Tensor::zeros(&shape));
            }
        }
        sgd_step(&mut self.model.params, &grads, self.cfg.sgd())?;
        for (prefix, mean, var) in stats {
            let n = mean.len();
            self.model
                .params
                .set_value(&format!("{prefix}.bn.running_mean"), Tensor::new(vec![n], mean)?)?;
            self.model
                .params
                .set_value(&format!("{prefix}.bn.running_var"), Tensor::new(vec![n], var)?)?;
        }
        self.losses.push(value);
        Ok(value)
    }

    /// Runs `cfg.steps` steps on freshly sampled train-split batches.
    pub fn run(&mut self) -> Result<()> {
        let sampler = PairSampler::new(self.index, Split::Train)?;
        let mut r = rng::stream(self.cfg.seed, "pairs");
        for _ in 0..self.cfg.steps {
            let pairs = sampler.batch(&mut r, self.cfg.batch);
            self.step(&pairs)?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        let meta = CheckpointMeta {
            model: self.model.spec().clone(),
            train: self.cfg,
            steps: self.losses.len(),
            final_loss: self.losses.last().copied().unwrap_or(f64::NAN),
        };
        TrainOutcome {
            checkpoint: Checkpoint {
                meta,
                params: self.model.params,
            },
            losses: self.losses,
        }
    }
}

/// Model structure for training on `index` under `cfg`. `modnet` replaces
/// the preset architecture when given.
pub fn model_spec(
    index: &DatasetIndex,
    cfg: &TrainConfig,
    trunk: &TrunkConfig,
    modnet: Option<&ModularNetConfig>,
) -> ModelSpec {
    ModelSpec {
        trunk: trunk.clone(),
        modnet: modnet.cloned().unwrap_or_else(|| cfg.preset.config()),
        tasks: index.tasks().to_vec(),
        variant: cfg.variant,
        seed: cfg.seed,
    }
}

pub fn train(index: &DatasetIndex, spec: ModelSpec, cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    if spec.variant != cfg.variant {
        return Err(Error::VariantMismatch {
            found: spec.variant.as_str().into(),
            requested: cfg.variant.as_str().into(),
        });
    }
    let model = Model::init(spec)?;
    let mut trainer = Trainer::new(index, model, cfg.clone(), exec)?;
    trainer.run()?;
    Ok(trainer.finish())
}

/// `ckpt.ckpt` gets its loss history in `ckpt.loss.csv`.
pub fn loss_csv_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

pub fn save_outcome(outcome: &TrainOutcome, path: &Path) -> Result<()> {
    save_checkpoint(&outcome.checkpoint, path)?;
    let csv = loss_csv_path(path);
    fs::write(&csv, loss_csv(&outcome.losses)).map_err(|e| Error::io(&csv, e))
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smoothed(losses: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for (i, l) in losses.iter().enumerate() {
        acc += l;
        if i >= w {
            acc -= losses[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{gen_synthetic, FewshotSpec, SynthConfig};
    use crate::gating::{EMBEDDINGS, FC1_WEIGHT, FC2_WEIGHT};
    use std::sync::OnceLock;

    fn world() -> &'static (tempfile::TempDir, DatasetIndex) {
        static WORLD: OnceLock<(tempfile::TempDir, DatasetIndex)> = OnceLock::new();
        WORLD.get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let cfg = SynthConfig {
                instances: 6,
                fewshot: FewshotSpec {
                    images: 0,
                    ..FewshotSpec::default()
                },
                ..SynthConfig::default()
            };
            let idx = gen_synthetic(&cfg, dir.path()).unwrap();
            (dir, idx)
        })
    }

    fn cfg(variant: GatingVariant, steps: usize) -> TrainConfig {
        TrainConfig {
            batch: 4,
            steps,
            variant,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    fn spec(idx: &DatasetIndex, c: &TrainConfig) -> ModelSpec {
        model_spec(idx, c, &TrunkConfig::default(), None)
    }

    #[test]
    fn config_contract() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { batch: 0, ..TrainConfig::default() },
            TrainConfig { steps: 0, ..TrainConfig::default() },
            TrainConfig { temperature: 0.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let (_, idx) = world();
        let c = TrainConfig {
            normalize: true,
            temperature: 0.1,
            ..cfg(GatingVariant::Task, 200)
        };
        let model = Model::init(spec(idx, &c)).unwrap();
        let mut t = Trainer::new(idx, model, c.clone(), Execution::Sequential).unwrap();
        let sampler = PairSampler::new(idx, Split::Train).unwrap();
        let pairs = sampler.batch(&mut rng::stream(1, "fixed"), 4);
        for _ in 0..200 {
            t.step(&pairs).unwrap();
        }
        let l = t.losses();
        assert!(l[199] < 0.25 * l[0], "{} -> {}", l[0], l[199]);
    }

    #[test]
    fn uniform_variant_leaves_gating_untouched() {
        let (_, idx) = world();
        let c = cfg(GatingVariant::Uniform, 3);
        let before = Model::init(spec(idx, &c)).unwrap().params;
        let out = train(idx, spec(idx, &c), &c, Execution::Sequential).unwrap();
        for name in [EMBEDDINGS, FC1_WEIGHT, FC2_WEIGHT] {
            assert_eq!(before.value(name).unwrap(), out.checkpoint.params.value(name).unwrap());
        }
        assert_ne!(
            before.value("modnet.l1.m1.conv.weight").unwrap(),
            out.checkpoint.params.value("modnet.l1.m1.conv.weight").unwrap()
        );
    }

    #[test]
    fn single_step_checkpoint_and_round_trip() {
        let (_, idx) = world();
        let c = cfg(GatingVariant::Task, 1);
        let out = train(idx, spec(idx, &c), &c, Execution::Sequential).unwrap();
        assert_eq!(out.checkpoint.meta.steps, 1);
        assert_eq!(out.losses.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_outcome(&out, &p1).unwrap();
        let back = load_checkpoint(&p1).unwrap();
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let csv = fs::read_to_string(loss_csv_path(&p1)).unwrap();
        assert!(csv.starts_with("step,loss\n1,"));

        let img = RgbImage::load_png(&idx.image_path(&idx.images()[0])).unwrap().to_tensor();
        let a = out.checkpoint.model().unwrap().features(&img, "pour").unwrap();
        let b = back.model().unwrap().features(&img, "pour").unwrap();
        assert_eq!(a.data, b.data);

        assert!(matches!(
            load_checkpoint_as(&p1, GatingVariant::Uniform),
            Err(Error::VariantMismatch { .. })
        ));
        load_checkpoint_as(&p1, GatingVariant::Task).unwrap();
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (_, idx) = world();
        let c = cfg(GatingVariant::Shared, 1);
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                model: spec(idx, &c),
                train: c.clone(),
                steps: 0,
                final_loss: 0.0,
            },
            params: Model::init(spec(idx, &c)).unwrap().params,
        };
        let bytes = ckpt.to_bytes().unwrap();
        Checkpoint::from_bytes(&bytes).unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Corruption { .. })
        ));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Format(_))));
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Format(_))));

        let mut partial = ckpt.params.clone();
        let mut fewer = crate::tensor::ParameterStore::new();
        for (name, p) in partial.iter().filter(|(n, _)| *n != EMBEDDINGS) {
            fewer.insert(name, p.value.clone(), p.trainable).unwrap();
        }
        partial = fewer;
        let broken = Checkpoint {
            meta: ckpt.meta.clone(),
            params: partial,
        };
        match Checkpoint::from_bytes(&broken.to_bytes().unwrap()) {
            Err(Error::Corruption { expected, .. }) => assert!(expected.iter().any(|n| n == EMBEDDINGS)),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn training_is_deterministic_and_keeps_the_trunk() {
        let (_, idx) = world();
        let c = cfg(GatingVariant::Task, 3);
        let a = train(idx, spec(idx, &c), &c, Execution::Sequential).unwrap();
        let b = train(idx, spec(idx, &c), &c, Execution::Parallel).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        let trunk = Trunk::init(&TrunkConfig::default()).unwrap();
        let again = a.checkpoint.model().unwrap();
        for (name, p) in trunk.params().iter() {
            assert_eq!(&p.value, again.trunk().params().value(name).unwrap());
        }
    }

    #[test]
    fn smoothing_window() {
        let s = smoothed(&[2.0, 4.0, 6.0, 8.0], 2);
        assert_eq!(s, vec![2.0, 3.0, 5.0, 7.0]);
    }
}
