//! The full model `f = T[R(I), G(t)]`: frozen trunk, gating and modular
//! network, plus the glue that binds stored parameters onto a graph.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{self, GatingVariant, GatingWeights, Layout};
use crate::modnet::{self, ModnetOutput, ModularNetConfig};
use crate::tensor::{BatchNormMode, Gradients, Graph, ParameterStore, Tensor, Var};
use crate::trunk::{FeatureMap, Trunk, TrunkConfig};

/// Lazily places stored parameters on a graph, once per name.
pub struct Bindings<'a> {
    store: &'a ParameterStore,
    track: bool,
    vars: BTreeMap<String, Var>,
}

impl<'a> Bindings<'a> {
    /// With `track`, trainable parameters become gradient-carrying leaves.
    pub fn new(store: &'a ParameterStore, track: bool) -> Self {
        Bindings {
            store,
            track,
            vars: BTreeMap::new(),
        }
    }

    pub fn get(&mut self, g: &mut Graph<f32>, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))?;
        let v = if self.track && p.trainable {
            g.parameter(p.value.clone())
        } else {
            g.constant(p.value.clone())
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(self.store.value(name)?.shape())
    }

    /// Gradients of every bound trainable parameter, zero where none flowed.
    pub fn gradients(&self, grads: &Gradients<f32>) -> HashMap<String, Tensor<f32>> {
        self.vars
            .iter()
            .filter(|(name, _)| self.track && self.store.get(name).is_some_and(|p| p.trainable))
            .map(|(name, v)| {
                let grad = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(name).expect("bound").value.shape()));
                (name.clone(), grad)
            })
            .collect()
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub trunk: TrunkConfig,
    pub modnet: ModularNetConfig,
    pub tasks: Vec<String>,
    pub variant: GatingVariant,
    pub seed: u64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        self.modnet.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("a model needs at least one task".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct Model {
    spec: ModelSpec,
    layout: Layout,
    trunk: Trunk,
    pub params: ParameterStore,
    overrides: BTreeMap<usize, GatingWeights>,
}

impl Model {
    /// Fresh parameters for `spec`. Gating parameters a variant does not use
    /// are still created, frozen, so every variant stores the same names.
    pub fn init(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let trunk = Trunk::init(&spec.trunk)?;
        let layout = spec.modnet.layout()?;
        let mut params = modnet::modnet_init(&spec.modnet, trunk.out_channels(), spec.seed)?;
        let task_trainable = spec.variant == GatingVariant::Task;
        gating::init_task_gating(
            &mut params,
            &layout,
            spec.tasks.len(),
            spec.modnet.embedding_dim,
            spec.modnet.gating_hidden,
            spec.seed,
            task_trainable,
        )?;
        if spec.variant == GatingVariant::Shared {
            gating::make_shared_gating(&mut params, &layout, true)?;
        }
        Ok(Model {
            spec,
            layout,
            trunk,
            params,
            overrides: BTreeMap::new(),
        })
    }

    /// Rebuilds a model around previously stored parameters.
    pub fn from_parts(spec: ModelSpec, params: ParameterStore) -> Result<Self> {
        let fresh = Model::init(spec)?;
        let expected: Vec<String> = fresh.params.names().map(str::to_string).collect();
        let found: Vec<String> = params.names().map(str::to_string).collect();
        if expected != found {
            return Err(Error::Corruption {
                reason: "parameter names differ from the model structure".into(),
                expected,
            });
        }
        for (name, p) in fresh.params.iter() {
            let got = params.value(name)?;
            if got.shape() != p.value.shape() {
                return Err(Error::Corruption {
                    reason: format!("`{name}` has shape {:?}, expected {:?}", got.shape(), p.value.shape()),
                    expected,
                });
            }
        }
        let mut params = params;
        for (name, p) in fresh.params.iter() {
            params.set_trainable(name, p.trainable)?;
        }
        Ok(Model { params, ..fresh })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn trunk(&self) -> &Trunk {
        &self.trunk
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn variant(&self) -> GatingVariant {
        self.spec.variant
    }

    pub fn tasks(&self) -> &[String] {
        &self.spec.tasks
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.spec
            .tasks
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::Vocabulary {
                kind: "task",
                name: name.to_string(),
            })
    }

    /// Replaces the gating weights of one task at inference time.
    pub fn set_gating_override(&mut self, task: usize, weights: GatingWeights) -> Result<()> {
        if task >= self.spec.tasks.len() {
            return Err(Error::contract(format!("task index {task} out of range")));
        }
        weights.validate(&self.layout)?;
        self.overrides.insert(task, weights);
        Ok(())
    }

    /// Installs the per-task gating rows carried by an annotation file.
    pub fn apply_overrides(&mut self, overrides: &BTreeMap<String, Vec<Vec<Vec<f32>>>>) -> Result<()> {
        for (name, layers) in overrides {
            let task = self.task_index(name)?;
            let layers = layers
                .iter()
                .map(|rows| {
                    let cols = rows.first().map_or(0, Vec::len);
                    Tensor::new(vec![rows.len(), cols], rows.concat())
                })
                .collect::<Result<Vec<_>>>()?;
            self.set_gating_override(task, GatingWeights { layers })?;
        }
        Ok(())
    }

    pub fn gating_weights(&self, task: usize) -> Result<GatingWeights> {
        if let Some(w) = self.overrides.get(&task) {
            return Ok(w.clone());
        }
        if task >= self.spec.tasks.len() {
            return Err(Error::contract(format!("task index {task} out of range")));
        }
        gating::weights_for_task(&self.params, &self.layout, self.spec.variant, task)
    }

    /// Gating plus modular network over a batch of trunk features `x`, one
    /// task per sample.
    pub fn forward_graph(
        &self,
        g: &mut Graph<f32>,
        bind: &mut Bindings<'_>,
        x: Var,
        tasks: &[usize],
        mode: BatchNormMode,
    ) -> Result<ModnetOutput> {
        if let Some(&t) = tasks.iter().find(|&&t| t >= self.spec.tasks.len()) {
            return Err(Error::contract(format!("task index {t} out of range")));
        }
        let w = gating::gating_graph(g, bind, &self.layout, self.spec.variant, tasks)?;
        modnet::modnet_graph(g, bind, &self.spec.modnet, x, &w, mode)
    }

    /// Eval-mode task features for trunk maps that share one grid size.
    pub fn features_from_trunk_batch(&self, rs: &[&FeatureMap], task: usize) -> Result<Vec<FeatureMap>> {
        let Some(first) = rs.first() else {
            return Ok(Vec::new());
        };
        if rs.iter().any(|r| (r.channels, r.height, r.width) != (first.channels, first.height, first.width)) {
            return rs.iter().map(|r| self.features_from_trunk(r, task)).collect();
        }
        let weights = self.gating_weights(task)?;
        let mut g = Graph::<f32>::new();
        let mut bind = Bindings::new(&self.params, false);
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(rs.len() * c * h * w);
        for r in rs {
            data.extend_from_slice(&r.data);
        }
        let x = g.constant(Tensor::new(vec![rs.len(), c, h, w], data)?);
        let gating = weights
            .layers
            .iter()
            .map(|m| {
                let s = m.shape().to_vec();
                Ok(g.constant(m.clone().reshaped(&[1, s[0], s[1]])?))
            })
            .collect::<Result<Vec<_>>>()?;
        let out = modnet::modnet_graph(&mut g, &mut bind, &self.spec.modnet, x, &gating, BatchNormMode::Eval)?;
        let f = g.value(out.f);
        let co = f.shape()[1];
        let per = co * h * w;
        rs.iter()
            .enumerate()
            .map(|(i, r)| {
                let mut fm = FeatureMap::new(co, h, w, r.stride, f.data()[i * per..(i + 1) * per].to_vec())?;
                fm.source_height = r.source_height;
                fm.source_width = r.source_width;
                Ok(fm)
            })
            .collect()
    }

    pub fn features_from_trunk(&self, r: &FeatureMap, task: usize) -> Result<FeatureMap> {
        let weights = self.gating_weights(task)?;
        modnet::modnet_forward(r, &weights, &self.params, &self.spec.modnet, BatchNormMode::Eval)
    }

    /// Full eval-mode forward of a `3 x H x W` image under a named task.
    pub fn features(&self, image: &Tensor<f32>, task: &str) -> Result<FeatureMap> {
        let t = self.task_index(task)?;
        let r = self.trunk.forward(image)?;
        self.features_from_trunk(&r, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    pub(crate) fn desk_spec(variant: GatingVariant) -> ModelSpec {
        ModelSpec {
            trunk: TrunkConfig::default(),
            modnet: ModularNetConfig::default(),
            tasks: vec!["pour".into(), "scoop".into()],
            variant,
            seed: 3,
        }
    }

    fn image(seed: u64) -> Tensor<f32> {
        let mut r = rng::stream(seed, "img");
        rng::normal_tensor(&mut r, &[3, 64, 64], 0.3)
    }

    #[test]
    fn desk_model_emits_32_by_4_by_4() {
        let m = Model::init(desk_spec(GatingVariant::Task)).unwrap();
        let f = m.features(&image(0), "scoop").unwrap();
        assert_eq!((f.channels, f.height, f.width, f.stride), (32, 4, 4, 16));
        assert_eq!((f.source_height, f.source_width), (64, 64));
    }

    #[test]
    fn unknown_task_is_a_vocabulary_error() {
        let m = Model::init(desk_spec(GatingVariant::Task)).unwrap();
        assert!(matches!(m.features(&image(0), "stir"), Err(Error::Vocabulary { .. })));
    }

    #[test]
    fn zeroed_head_matches_uniform_variant() {
        let mut task = Model::init(desk_spec(GatingVariant::Task)).unwrap();
        let shape = task.params.value(gating::FC2_WEIGHT).unwrap().shape().to_vec();
        task.params.set_value(gating::FC2_WEIGHT, Tensor::zeros(&shape)).unwrap();
        let uniform = Model::init(desk_spec(GatingVariant::Uniform)).unwrap();
        let img = image(5);
        let a = task.features(&img, "pour").unwrap();
        let b = uniform.features(&img, "pour").unwrap();
        let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn variants_freeze_unused_gating() {
        let u = Model::init(desk_spec(GatingVariant::Uniform)).unwrap();
        assert!(!u.params.get(gating::EMBEDDINGS).unwrap().trainable);
        let s = Model::init(desk_spec(GatingVariant::Shared)).unwrap();
        assert!(!s.params.get(gating::FC1_WEIGHT).unwrap().trainable);
        assert!(s.params.get(&gating::shared_logits_name(0)).unwrap().trainable);
        let t = Model::init(desk_spec(GatingVariant::Task)).unwrap();
        assert!(t.params.get(gating::EMBEDDINGS).unwrap().trainable);
    }

    #[test]
    fn batched_eval_equals_single_eval() {
        let m = Model::init(desk_spec(GatingVariant::Task)).unwrap();
        let rs: Vec<FeatureMap> = (0..3).map(|i| m.trunk().forward(&image(i)).unwrap()).collect();
        let refs: Vec<&FeatureMap> = rs.iter().collect();
        let batch = m.features_from_trunk_batch(&refs, 1).unwrap();
        for (r, b) in rs.iter().zip(&batch) {
            let single = m.features_from_trunk(r, 1).unwrap();
            let diff = single.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
            assert!(diff < 1e-5, "{diff}");
        }
    }

    #[test]
    fn from_parts_rejects_foreign_stores() {
        let t = Model::init(desk_spec(GatingVariant::Task)).unwrap();
        let err = Model::from_parts(desk_spec(GatingVariant::Shared), t.params.clone()).err().unwrap();
        assert!(matches!(err, Error::Corruption { .. }));
    }

    #[test]
    fn override_replaces_task_gating() {
        let mut m = Model::init(desk_spec(GatingVariant::Task)).unwrap();
        let u = gating::make_uniform_gating(m.layout());
        m.set_gating_override(0, u.clone()).unwrap();
        assert_eq!(m.gating_weights(0).unwrap(), u);
        assert_ne!(m.gating_weights(1).unwrap(), u);
    }

    #[test]
    fn file_overrides_are_applied_by_task_name() {
        let mut m = Model::init(desk_spec(GatingVariant::Task)).unwrap();
        let u = gating::make_uniform_gating(m.layout());
        let name = m.tasks()[1].clone();
        m.apply_overrides(&BTreeMap::from([(name, u.rows())])).unwrap();
        assert_eq!(m.gating_weights(1).unwrap(), u);
        assert_ne!(m.gating_weights(0).unwrap(), u);
        let bad = BTreeMap::from([("juggle".to_string(), u.rows())]);
        assert!(matches!(m.apply_overrides(&bad), Err(Error::Vocabulary { .. })));
    }
}
