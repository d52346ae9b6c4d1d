//! Modular feature extractor: layers of conv/batchnorm/ReLU modules whose
//! inputs are gated mixtures of the previous layer's outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{GatingWeights, Layout};
use crate::model::Bindings;
use crate::rng;
use crate::tensor::{BatchNormMode, Graph, Op, ParameterStore, Tensor, Var};
use crate::trunk::FeatureMap;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerSpec {
    const fn new(filters: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            filters,
            kernel,
            stride,
            padding,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    #[default]
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl Preset {
    pub fn config(self) -> ModularNetConfig {
        let filters = match self {
            Preset::Paper => 128,
            Preset::Desk => 32,
        };
        ModularNetConfig {
            layout: vec![6, 6, 6, 1],
            layers: vec![
                LayerSpec::new(filters, 7, 1, 3),
                LayerSpec::new(filters, 3, 1, 1),
                LayerSpec::new(filters, 3, 1, 1),
                LayerSpec::new(filters, 1, 1, 0),
            ],
            embedding_dim: 100,
            gating_hidden: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModularNetConfig {
    /// Modules per layer.
    pub layout: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub embedding_dim: usize,
    pub gating_hidden: usize,
}

impl Default for ModularNetConfig {
    fn default() -> Self {
        Preset::Desk.config()
    }
}

impl ModularNetConfig {
    pub fn validate(&self) -> Result<()> {
        let layout = self.layout()?;
        if self.layers.len() != layout.counts().len() {
            return Err(Error::Config(format!(
                "layout has {} layers but {} layer specs are given",
                self.layout.len(),
                self.layers.len()
            )));
        }
        if *self.layout.last().expect("nonempty") != 1 {
            return Err(Error::Config("the last layer must hold exactly one module".into()));
        }
        for (i, s) in self.layers.iter().enumerate() {
            if s.filters == 0 || s.kernel == 0 {
                return Err(Error::Config(format!("layer {}: filters and kernel must be positive", i + 1)));
            }
            if s.stride != 1 || 2 * s.padding + 1 != s.kernel {
                return Err(Error::Config(format!(
                    "layer {}: stride 1 and padding (kernel - 1) / 2 are required to keep the grid size",
                    i + 1
                )));
            }
        }
        if self.embedding_dim == 0 || self.gating_hidden == 0 {
            return Err(Error::Config("gating dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<Layout> {
        Layout::new(self.layout.clone())
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |s| s.filters)
    }

    pub fn block_count(&self) -> usize {
        self.layout.iter().sum()
    }
}

/// Parameter-name prefix of module `j` in layer `i` (both 1-based).
pub fn block_prefix(layer: usize, module: usize) -> String {
    format!("modnet.l{layer}.m{module}")
}

/// One conv/batchnorm block per module. Running statistics are stored as
/// non-trainable entries.
pub fn modnet_init(config: &ModularNetConfig, trunk_channels: usize, seed: u64) -> Result<ParameterStore> {
    config.validate()?;
    if trunk_channels == 0 {
        return Err(Error::Config("trunk channel count must be positive".into()));
    }
    let mut store = ParameterStore::new();
    let mut cin = trunk_channels;
    for (i, (spec, &count)) in config.layers.iter().zip(&config.layout).enumerate() {
        for j in 0..count {
            let prefix = block_prefix(i + 1, j + 1);
            let mut rng = rng::stream(seed, &prefix);
            let fan_in = cin * spec.kernel * spec.kernel;
            let f = spec.filters;
            let weight = rng::kaiming(&mut rng, &[f, cin, spec.kernel, spec.kernel], fan_in);
            store.insert(format!("{prefix}.conv.weight"), weight, true)?;
            store.insert(format!("{prefix}.conv.bias"), Tensor::zeros(&[1, f, 1, 1]), true)?;
            store.insert(format!("{prefix}.bn.gamma"), Tensor::full(&[f], 1.0), true)?;
            store.insert(format!("{prefix}.bn.beta"), Tensor::zeros(&[f]), true)?;
            store.insert(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[f]), false)?;
            store.insert(format!("{prefix}.bn.running_var"), Tensor::full(&[f], 1.0), false)?;
        }
        cin = spec.filters;
    }
    Ok(store)
}

/// Result of building the network on a graph.
pub struct ModnetOutput {
    /// Output of the single last-layer module, `[N, C, H', W']`.
    pub f: Var,
    /// Train-mode batchnorm nodes keyed by block prefix.
    pub batchnorms: Vec<(String, Var)>,
}

fn block(
    g: &mut Graph<f32>,
    bind: &mut Bindings<'_>,
    prefix: &str,
    spec: &LayerSpec,
    x: Var,
    mode: BatchNormMode,
) -> Result<(Var, Var)> {
    let w = bind.get(g, &format!("{prefix}.conv.weight"))?;
    let b = bind.get(g, &format!("{prefix}.conv.bias"))?;
    let gamma = bind.get(g, &format!("{prefix}.bn.gamma"))?;
    let beta = bind.get(g, &format!("{prefix}.bn.beta"))?;
    let mean = bind.get(g, &format!("{prefix}.bn.running_mean"))?;
    let var = bind.get(g, &format!("{prefix}.bn.running_var"))?;
    let y = g.conv2d(x, w, spec.stride, spec.padding)?;
    let y = g.add(y, b)?;
    let bn = g.apply(
        Op::BatchNorm2d {
            mode,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        },
        &[y, gamma, beta, mean, var],
    )?;
    Ok((g.relu(bn)?, bn))
}

/// Builds the modular network over a batch `x` of trunk features.
///
/// `gating` holds one `[B, M_i, M_{i-1}]` tensor per layer after the first,
/// with `B` equal to the batch size or 1 (shared by every sample).
pub fn modnet_graph(
    g: &mut Graph<f32>,
    bind: &mut Bindings<'_>,
    config: &ModularNetConfig,
    x: Var,
    gating: &[Var],
    mode: BatchNormMode,
) -> Result<ModnetOutput> {
    let layout = config.layout()?;
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(Error::Layer {
            layer: 1,
            detail: format!("expected an NCHW input, got {xs:?}"),
        });
    }
    let (n, h, w) = (xs[0], xs[2], xs[3]);
    let transitions: Vec<(usize, usize)> = layout.transitions().collect();
    if gating.len() != transitions.len() {
        return Err(Error::Config(format!(
            "{} gating tensors for {} mixing layers",
            gating.len(),
            transitions.len()
        )));
    }

    let mut batchnorms = Vec::new();
    let mut prev: Vec<Var> = Vec::new();
    for (i, spec) in config.layers.iter().enumerate() {
        let layer = i + 1;
        let count = config.layout[i];
        let mut outputs = Vec::with_capacity(count);
        for j in 0..count {
            let input = if i == 0 {
                x
            } else {
                let wt = gating[i - 1];
                let ws = g.shape(wt).to_vec();
                let (rows, cols) = transitions[i - 1];
                if ws.len() != 3 || ws[1] != rows || ws[2] != cols || (ws[0] != 1 && ws[0] != n) {
                    return Err(Error::Layer {
                        layer,
                        detail: format!("gating tensor {ws:?} does not fit {rows}x{cols} for batch {n}"),
                    });
                }
                let row = g.narrow(wt, 1, j, 1)?;
                let mut acc: Option<Var> = None;
                for (k, &o) in prev.iter().enumerate() {
                    let wk = g.narrow(row, 2, k, 1)?;
                    let wk = g.reshape(wk, &[ws[0], 1, 1, 1])?;
                    let term = g.mul(o, wk)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, term)?,
                        None => term,
                    });
                }
                acc.expect("previous layer is nonempty")
            };
            let prefix = block_prefix(layer, j + 1);
            let in_channels = g.shape(input)[1];
            let expected_in = bind.shape(&format!("{prefix}.conv.weight"))?[1];
            if in_channels != expected_in {
                return Err(Error::Layer {
                    layer,
                    detail: format!("input has {in_channels} channels, module expects {expected_in}"),
                });
            }
            let (out, bn) = block(g, bind, &prefix, spec, input, mode)?;
            let os = g.shape(out);
            if os != [n, spec.filters, h, w] {
                return Err(Error::Layer {
                    layer,
                    detail: format!("module output {os:?}, expected {:?}", [n, spec.filters, h, w]),
                });
            }
            if mode == BatchNormMode::Train {
                batchnorms.push((prefix, bn));
            }
            outputs.push(out);
        }
        prev = outputs;
    }
    Ok(ModnetOutput {
        f: prev[0],
        batchnorms,
    })
}

/// Copies updated running statistics from train-mode batchnorm nodes into
/// the store.
pub fn commit_running_stats(store: &mut ParameterStore, g: &Graph<f32>, batchnorms: &[(String, Var)]) -> Result<()> {
    for (prefix, bn) in batchnorms {
        let (mean, var) = g
            .running_stats(*bn)
            .ok_or_else(|| Error::contract(format!("{prefix}: not a train-mode batchnorm")))?;
        let c = mean.len();
        store.set_value(&format!("{prefix}.bn.running_mean"), Tensor::new(vec![c], mean.to_vec())?)?;
        store.set_value(&format!("{prefix}.bn.running_var"), Tensor::new(vec![c], var.to_vec())?)?;
    }
    Ok(())
}

/// Single-map forward with explicit gating weights.
pub fn modnet_forward(
    r: &FeatureMap,
    weights: &GatingWeights,
    params: &ParameterStore,
    config: &ModularNetConfig,
    mode: BatchNormMode,
) -> Result<FeatureMap> {
    let layout = config.layout()?;
    weights.validate(&layout)?;
    let mut g = Graph::<f32>::new();
    let mut bind = Bindings::new(params, false);
    let x = g.constant(r.to_tensor());
    let gating = weights
        .layers
        .iter()
        .map(|m| {
            let s = m.shape().to_vec();
            Ok(g.constant(m.clone().reshaped(&[1, s[0], s[1]])?))
        })
        .collect::<Result<Vec<_>>>()?;
    let out = modnet_graph(&mut g, &mut bind, config, x, &gating, mode)?;
    let mut fm = FeatureMap::from_tensor(g.value(out.f), r.stride)?;
    fm.source_height = r.source_height;
    fm.source_width = r.source_width;
    Ok(fm)
}
