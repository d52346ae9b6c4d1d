//! Task embeddings and the gating network that turns a task into per-layer
//! module-mixing matrices.
//!
//! For a layout `[M_1, .., M_N]` the gating output holds one `M_i x M_{i-1}`
//! matrix per layer `i >= 2`. Row `j` of that matrix gives the incoming
//! weights of module `j` and is softmax-projected onto the simplex.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Bindings;
use crate::rng;
use crate::tensor::{Graph, ParameterStore, Tensor, Var};

pub const EMBEDDINGS: &str = "gating.embeddings";
pub const FC1_WEIGHT: &str = "gating.fc1.weight";
pub const FC1_BIAS: &str = "gating.fc1.bias";
pub const FC2_WEIGHT: &str = "gating.fc2.weight";
pub const FC2_BIAS: &str = "gating.fc2.bias";

pub fn shared_logits_name(layer: usize) -> String {
    format!("gating.shared.l{layer}")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingVariant {
    /// Weights produced by the gating network from the task embedding.
    #[default]
    Task,
    /// Constant `1 / M_{i-1}` weights.
    Uniform,
    /// One learned set of logits shared by every task.
    Shared,
}

impl GatingVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            GatingVariant::Task => "task",
            GatingVariant::Uniform => "uniform",
            GatingVariant::Shared => "shared",
        }
    }
}

impl std::str::FromStr for GatingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "task" => Ok(GatingVariant::Task),
            "uniform" => Ok(GatingVariant::Uniform),
            "shared" => Ok(GatingVariant::Shared),
            other => Err(Error::Config(format!("unknown gating variant `{other}`"))),
        }
    }
}

/// Module counts per layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout(Vec<usize>);

impl Layout {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::Config(format!("invalid module layout {counts:?}")));
        }
        Ok(Layout(counts))
    }

    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    /// `(M_i, M_{i-1})` for every layer that has a mixing matrix.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.windows(2).map(|w| (w[1], w[0]))
    }

    /// Length of the flat gating-network output.
    pub fn gating_dim(&self) -> usize {
        self.transitions().map(|(a, b)| a * b).sum()
    }
}

/// Mixing matrices for one task, one per layer after the first.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingWeights {
    pub layers: Vec<Tensor<f32>>,
}

impl GatingWeights {
    /// Checks shapes against `layout` and that every row lies on the simplex.
    pub fn validate(&self, layout: &Layout) -> Result<()> {
        let expected: Vec<(usize, usize)> = layout.transitions().collect();
        if expected.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "{} gating matrices for a layout needing {}",
                self.layers.len(),
                expected.len()
            )));
        }
        for (i, (m, (rows, cols))) in self.layers.iter().zip(expected).enumerate() {
            if m.shape() != [rows, cols] {
                return Err(Error::Shape {
                    op: "gating_weights",
                    lhs: m.shape().to_vec(),
                    rhs: vec![rows, cols],
                });
            }
            for (r, row) in m.data().chunks(cols).enumerate() {
                if !is_simplex_row(row) {
                    return Err(Error::Domain(format!(
                        "gating layer {} row {r} is not on the probability simplex",
                        i + 2
                    )));
                }
            }
        }
        Ok(())
    }

    /// Row-major nested rows, for reports and JSON.
    pub fn rows(&self) -> Vec<Vec<Vec<f32>>> {
        self.layers
            .iter()
            .map(|m| m.data().chunks(m.shape()[1]).map(<[f32]>::to_vec).collect())
            .collect()
    }
}

pub fn is_simplex_row(row: &[f32]) -> bool {
    let sum: f64 = row.iter().map(|&v| v as f64).sum();
    row.iter().all(|&v| v >= 0.0 && v.is_finite()) && (sum - 1.0).abs() <= 1e-6
}

/// Every row of layer `i` equal to `1 / M_{i-1}`.
pub fn make_uniform_gating(layout: &Layout) -> GatingWeights {
    GatingWeights {
        layers: layout
            .transitions()
            .map(|(rows, cols)| Tensor::full(&[rows, cols], 1.0 / cols as f32))
            .collect(),
    }
}

/// Adds task-conditioned gating parameters: the embedding table and a
/// two-layer MLP. Second-layer biases start at zero.
pub fn init_task_gating(
    store: &mut ParameterStore,
    layout: &Layout,
    num_tasks: usize,
    embedding_dim: usize,
    hidden: usize,
    seed: u64,
    trainable: bool,
) -> Result<()> {
    if num_tasks == 0 || embedding_dim == 0 || hidden == 0 {
        return Err(Error::Config("gating dimensions must be positive".into()));
    }
    let mut rng = rng::stream(seed, "gating");
    let out = layout.gating_dim();
    let emb = rng::normal_tensor(&mut rng, &[num_tasks, embedding_dim], 1.0 / (embedding_dim as f64).sqrt());
    store.insert(EMBEDDINGS, emb, trainable)?;
    store.insert(FC1_WEIGHT, rng::kaiming(&mut rng, &[embedding_dim, hidden], embedding_dim), trainable)?;
    store.insert(FC1_BIAS, Tensor::zeros(&[1, hidden]), trainable)?;
    store.insert(FC2_WEIGHT, rng::kaiming(&mut rng, &[hidden, out.max(1)], hidden), trainable)?;
    store.insert(FC2_BIAS, Tensor::zeros(&[1, out.max(1)]), trainable)?;
    Ok(())
}

/// Adds task-independent gating logits, zero-initialised (uniform rows).
pub fn make_shared_gating(store: &mut ParameterStore, layout: &Layout, trainable: bool) -> Result<()> {
    for (i, (rows, cols)) in layout.transitions().enumerate() {
        store.insert(shared_logits_name(i), Tensor::zeros(&[rows, cols]), trainable)?;
    }
    Ok(())
}

/// Mixing matrices on the graph, each shaped `[B, M_i, M_{i-1}]` where `B`
/// is the number of tasks for the task variant and 1 otherwise.
pub fn gating_graph(
    g: &mut Graph<f32>,
    bind: &mut Bindings<'_>,
    layout: &Layout,
    variant: GatingVariant,
    tasks: &[usize],
) -> Result<Vec<Var>> {
    let mut out = Vec::new();
    match variant {
        GatingVariant::Uniform => {
            for m in make_uniform_gating(layout).layers {
                let s = m.shape().to_vec();
                out.push(g.constant(m.reshaped(&[1, s[0], s[1]])?));
            }
        }
        GatingVariant::Shared => {
            for (i, (rows, cols)) in layout.transitions().enumerate() {
                let logits = bind.get(g, &shared_logits_name(i))?;
                let w = g.softmax(logits, 1)?;
                out.push(g.reshape(w, &[1, rows, cols])?);
            }
        }
        GatingVariant::Task => {
            let table = bind.get(g, EMBEDDINGS)?;
            let emb = g.gather_rows(table, tasks.to_vec())?;
            let raw = gating_mlp(g, bind, emb)?;
            let expected = layout.gating_dim();
            if g.shape(raw)[1] != expected {
                return Err(Error::Config(format!(
                    "gating network emits {} values, layout needs {expected}",
                    g.shape(raw)[1]
                )));
            }
            let b = tasks.len();
            let mut offset = 0;
            for (rows, cols) in layout.transitions() {
                let block = g.narrow(raw, 1, offset, rows * cols)?;
                let block = g.reshape(block, &[b, rows, cols])?;
                out.push(g.softmax(block, 2)?);
                offset += rows * cols;
            }
        }
    }
    Ok(out)
}

fn gating_mlp(g: &mut Graph<f32>, bind: &mut Bindings<'_>, emb: Var) -> Result<Var> {
    let w1 = bind.get(g, FC1_WEIGHT)?;
    let b1 = bind.get(g, FC1_BIAS)?;
    let w2 = bind.get(g, FC2_WEIGHT)?;
    let b2 = bind.get(g, FC2_BIAS)?;
    let h = g.matmul(emb, w1)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h)?;
    let o = g.matmul(h, w2)?;
    g.add(o, b2)
}

/// Gating network applied to a free-standing embedding vector.
pub fn gating_forward(embedding: &[f32], store: &ParameterStore, layout: &Layout) -> Result<GatingWeights> {
    let mut g = Graph::<f32>::new();
    let mut bind = Bindings::new(store, false);
    let emb = g.constant(Tensor::new(vec![1, embedding.len()], embedding.to_vec())?);
    let raw = gating_mlp(&mut g, &mut bind, emb)?;
    let expected = layout.gating_dim();
    if g.shape(raw)[1] != expected {
        return Err(Error::Config(format!(
            "gating network emits {} values, layout needs {expected}",
            g.shape(raw)[1]
        )));
    }
    let mut layers = Vec::new();
    let mut offset = 0;
    for (rows, cols) in layout.transitions() {
        let block = g.narrow(raw, 1, offset, rows * cols)?;
        let block = g.reshape(block, &[rows, cols])?;
        let w = g.softmax(block, 1)?;
        layers.push(g.value(w).clone());
        offset += rows * cols;
    }
    Ok(GatingWeights { layers })
}

/// Evaluates a variant's weights for one task without tracking gradients.
pub fn weights_for_task(
    store: &ParameterStore,
    layout: &Layout,
    variant: GatingVariant,
    task: usize,
) -> Result<GatingWeights> {
    let mut g = Graph::<f32>::new();
    let mut bind = Bindings::new(store, false);
    let vars = gating_graph(&mut g, &mut bind, layout, variant, &[task])?;
    let layers = vars
        .into_iter()
        .map(|v| {
            let s = g.shape(v).to_vec();
            g.value(v).clone().reshaped(&s[1..])
        })
        .collect::<Result<_>>()?;
    Ok(GatingWeights { layers })
}
