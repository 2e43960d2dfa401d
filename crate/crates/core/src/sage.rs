//! GraphSAGE regressor from the keypoint graph to per-image sl(3) vectors.
//!
//! Each layer computes
//! `h_v ← act(W_selfᵀ h_v + W_neighᵀ · mean_{u ∈ N(v)} h_u + b)`
//! over the union of intra- and inter-image neighbors. Node embeddings are
//! mean-pooled per image and a linear head emits eight coefficients.
//!
//! The reverse pass is written out by hand; [`forward_with_tape`] keeps
//! every intermediate the pass needs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CorrespondenceGraph;
use crate::sl3::Sl3Vector;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const HEAD_INIT_SCALE: f64 = 1e-3;
const INPUT_DIM: usize = 2;
const OUTPUT_DIM: usize = Sl3Vector::DIM;

/// Regressor family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Message passing over the graph.
    #[default]
    Sage,
    /// Per-node MLP that ignores the adjacency.
    Mlp,
    /// Node coordinates pooled per image, then the linear head.
    Linear,
    /// Free per-image sl(3) vectors, no network.
    Direct,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sage" => Ok(Arch::Sage),
            "mlp" => Ok(Arch::Mlp),
            "linear" => Ok(Arch::Linear),
            "direct" => Ok(Arch::Direct),
            other => Err(Error::InvalidArgument(format!("unknown architecture {other:?}"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Sage => "sage",
            Arch::Mlp => "mlp",
            Arch::Linear => "linear",
            Arch::Direct => "direct",
        })
    }
}

/// Shape of a network to initialize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub arch: Arch,
    pub hidden_dim: usize,
    pub layers: usize,
    pub bias: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Sage,
            hidden_dim: 64,
            layers: 5,
            bias: true,
        }
    }
}

/// Weights of one message-passing layer. Matrices are `d_in × d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_self: DMatrix<f64>,
    pub w_neigh: Option<DMatrix<f64>>,
    pub bias: Option<DVector<f64>>,
}

/// Trainable network state.
#[derive(Debug, Clone, PartialEq)]
pub struct SageWeights {
    pub layers: Vec<LayerWeights>,
    /// `d_L × 8`.
    pub head_w: DMatrix<f64>,
    pub head_b: DVector<f64>,
}

impl SageWeights {
    pub fn arch(&self) -> Arch {
        match self.layers.first() {
            None => Arch::Linear,
            Some(l) if l.w_neigh.is_none() => Arch::Mlp,
            Some(_) => Arch::Sage,
        }
    }

    /// Width of the node embeddings fed to the head.
    pub fn embedding_dim(&self) -> usize {
        self.head_w.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// Every parameter block in a fixed order (layer by layer: self,
    /// neighbor, bias; then head weights and head bias).
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.w_self.as_slice());
            if let Some(w) = &l.w_neigh {
                out.push(w.as_slice());
            }
            if let Some(b) = &l.bias {
                out.push(b.as_slice());
            }
        }
        out.push(self.head_w.as_slice());
        out.push(self.head_b.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.w_self.as_mut_slice());
            if let Some(w) = &mut l.w_neigh {
                out.push(w.as_mut_slice());
            }
            if let Some(b) = &mut l.bias {
                out.push(b.as_mut_slice());
            }
        }
        out.push(self.head_w.as_mut_slice());
        out.push(self.head_b.as_mut_slice());
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Default GraphSAGE weights with biases.
pub fn init_weights(hidden_dim: usize, layers: usize, seed: u64) -> SageWeights {
    init_network(
        &NetworkConfig {
            arch: Arch::Sage,
            hidden_dim,
            layers,
            bias: true,
        },
        seed,
    )
}

/// Glorot-uniform matrices, zero biases, and a head shrunk by
/// [`HEAD_INIT_SCALE`] so initial outputs sit near the identity warp.
///
/// `Arch::Direct` has no network; it is initialized as `Sage` here and the
/// optimizer never calls this for it.
pub fn init_network(config: &NetworkConfig, seed: u64) -> SageWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hidden = config.hidden_dim.max(1);
    let n_layers = match config.arch {
        Arch::Linear => 0,
        _ => config.layers.max(1),
    };

    let mut glorot = |rows: usize, cols: usize, scale: f64| {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m[(r, c)] = scale * rng.random_range(-limit..limit);
            }
        }
        m
    };

    let mut layers = Vec::with_capacity(n_layers);
    let mut d_in = INPUT_DIM;
    for _ in 0..n_layers {
        let w_self = glorot(d_in, hidden, 1.0);
        let w_neigh = (config.arch != Arch::Mlp).then(|| glorot(d_in, hidden, 1.0));
        layers.push(LayerWeights {
            w_self,
            w_neigh,
            bias: config.bias.then(|| DVector::zeros(hidden)),
        });
        d_in = hidden;
    }
    let head_w = glorot(d_in, OUTPUT_DIM, HEAD_INIT_SCALE);
    SageWeights {
        layers,
        head_w,
        head_b: DVector::zeros(OUTPUT_DIM),
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Row `v` of the result is the mean of rows `neighbors[v]` of `h`, or
/// zero for an isolated node.
pub fn neighbor_mean(h: &DMatrix<f64>, neighbors: &[Vec<usize>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(h.nrows(), h.ncols());
    let rows = h.nrows();
    for (src, dst) in h
        .as_slice()
        .chunks_exact(rows)
        .zip(out.as_mut_slice().chunks_exact_mut(rows))
    {
        for (v, list) in neighbors.iter().enumerate() {
            if !list.is_empty() {
                let sum: f64 = list.iter().map(|&u| src[u]).sum();
                dst[v] = sum / list.len() as f64;
            }
        }
    }
    out
}

/// Adjoint of [`neighbor_mean`].
fn neighbor_mean_transpose(d: &DMatrix<f64>, neighbors: &[Vec<usize>]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(d.nrows(), d.ncols());
    let rows = d.nrows();
    for (src, dst) in d
        .as_slice()
        .chunks_exact(rows)
        .zip(out.as_mut_slice().chunks_exact_mut(rows))
    {
        for (v, list) in neighbors.iter().enumerate() {
            if !list.is_empty() {
                let share = src[v] / list.len() as f64;
                for &u in list {
                    dst[u] += share;
                }
            }
        }
    }
    out
}

fn add_row_bias(m: &mut DMatrix<f64>, bias: &DVector<f64>) {
    for c in 0..m.ncols() {
        let b = bias[c];
        for v in m.column_mut(c).iter_mut() {
            *v += b;
        }
    }
}

/// One message-passing layer; `activate` selects the leaky rectifier,
/// otherwise the layer is affine.
pub fn sage_layer(
    h_prev: &DMatrix<f64>,
    neighbors: &[Vec<usize>],
    w_self: &DMatrix<f64>,
    w_neigh: Option<&DMatrix<f64>>,
    bias: Option<&DVector<f64>>,
    activate: bool,
) -> DMatrix<f64> {
    let mut pre = pre_activation(h_prev, neighbors, w_self, w_neigh, bias, None);
    if activate {
        pre.apply(|x| *x = leaky(*x));
    }
    pre
}

fn pre_activation(
    h_prev: &DMatrix<f64>,
    neighbors: &[Vec<usize>],
    w_self: &DMatrix<f64>,
    w_neigh: Option<&DMatrix<f64>>,
    bias: Option<&DVector<f64>>,
    keep_mean: Option<&mut Option<DMatrix<f64>>>,
) -> DMatrix<f64> {
    let mut pre = h_prev * w_self;
    if let Some(w2) = w_neigh {
        let mean = neighbor_mean(h_prev, neighbors);
        pre += &mean * w2;
        if let Some(slot) = keep_mean {
            *slot = Some(mean);
        }
    }
    if let Some(b) = bias {
        add_row_bias(&mut pre, b);
    }
    pre
}

/// Per-image mean of node embeddings; row `i` belongs to dense image `i`.
pub fn readout(h: &DMatrix<f64>, image_tags: &[usize], n_images: usize) -> Result<DMatrix<f64>> {
    let mut z = DMatrix::zeros(n_images, h.ncols());
    let mut counts = vec![0usize; n_images];
    for (v, &img) in image_tags.iter().enumerate() {
        counts[img] += 1;
        for c in 0..h.ncols() {
            z[(img, c)] += h[(v, c)];
        }
    }
    for (i, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::InvalidArgument(format!(
                "image index {i} has no nodes to pool"
            )));
        }
        z.row_mut(i).scale_mut(1.0 / n as f64);
    }
    Ok(z)
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    inputs: Vec<DMatrix<f64>>,
    means: Vec<Option<DMatrix<f64>>>,
    pre: Vec<DMatrix<f64>>,
    pooled: DMatrix<f64>,
    counts: Vec<usize>,
}

/// Predicted sl(3) vector per image, ordered by image id.
pub fn forward(graph: &CorrespondenceGraph, weights: &SageWeights) -> Result<Vec<Sl3Vector>> {
    forward_with_tape(graph, weights).map(|(t, _)| t)
}

pub fn forward_with_tape(
    graph: &CorrespondenceGraph,
    weights: &SageWeights,
) -> Result<(Vec<Sl3Vector>, ForwardTape)> {
    let neighbors = graph.neighbor_lists();
    let mut h = graph.features0();
    if let Some(first) = weights.layers.first() {
        if first.w_self.nrows() != h.ncols() {
            return Err(Error::InvalidArgument(format!(
                "first layer expects {} input features, graph provides {}",
                first.w_self.nrows(),
                h.ncols()
            )));
        }
    }

    let mut inputs = Vec::with_capacity(weights.layers.len());
    let mut means = Vec::with_capacity(weights.layers.len());
    let mut pres = Vec::with_capacity(weights.layers.len());
    for layer in &weights.layers {
        let mut mean = None;
        let pre = pre_activation(
            &h,
            neighbors,
            &layer.w_self,
            layer.w_neigh.as_ref(),
            layer.bias.as_ref(),
            Some(&mut mean),
        );
        let next = pre.map(leaky);
        inputs.push(std::mem::replace(&mut h, next));
        means.push(mean);
        pres.push(pre);
    }

    let tags = graph.image_tags();
    let pooled = readout(&h, &tags, graph.n_images())?;
    if pooled.ncols() != weights.head_w.nrows() {
        return Err(Error::InvalidArgument(format!(
            "head expects {} features, embeddings have {}",
            weights.head_w.nrows(),
            pooled.ncols()
        )));
    }
    let mut out = &pooled * &weights.head_w;
    add_row_bias(&mut out, &weights.head_b);

    let thetas = (0..out.nrows())
        .map(|i| Sl3Vector(std::array::from_fn(|k| out[(i, k)])))
        .collect();
    let mut counts = vec![0usize; graph.n_images()];
    for &t in &tags {
        counts[t] += 1;
    }
    Ok((
        thetas,
        ForwardTape {
            inputs,
            means,
            pre: pres,
            pooled,
            counts,
        },
    ))
}

/// Gradient of a scalar with respect to every weight, given its gradient
/// with respect to each image's output vector.
pub fn backward(
    graph: &CorrespondenceGraph,
    weights: &SageWeights,
    tape: &ForwardTape,
    d_theta: &[Sl3Vector],
) -> SageWeights {
    let neighbors = graph.neighbor_lists();
    let mut grads = weights.zeros_like();

    let d_out = DMatrix::from_fn(d_theta.len(), OUTPUT_DIM, |i, k| d_theta[i].0[k]);
    grads.head_w = tape.pooled.transpose() * &d_out;
    for k in 0..OUTPUT_DIM {
        grads.head_b[k] = d_out.column(k).sum();
    }
    if weights.layers.is_empty() {
        return grads;
    }

    let d_pooled = &d_out * weights.head_w.transpose();
    let tags = graph.image_tags();
    let mut d_h = DMatrix::from_fn(tags.len(), d_pooled.ncols(), |v, c| {
        d_pooled[(tags[v], c)] / tape.counts[tags[v]] as f64
    });

    for l in (0..weights.layers.len()).rev() {
        let layer = &weights.layers[l];
        let mut d_pre = d_h;
        d_pre.zip_apply(&tape.pre[l], |d, x| *d *= leaky_grad(x));

        let g = &mut grads.layers[l];
        g.w_self = tape.inputs[l].transpose() * &d_pre;
        if let (Some(gw), Some(mean)) = (g.w_neigh.as_mut(), tape.means[l].as_ref()) {
            *gw = mean.transpose() * &d_pre;
        }
        if let Some(gb) = g.bias.as_mut() {
            for c in 0..d_pre.ncols() {
                gb[c] = d_pre.column(c).sum();
            }
        }
        if l == 0 {
            break;
        }
        let mut d_prev = &d_pre * layer.w_self.transpose();
        if let Some(w2) = &layer.w_neigh {
            d_prev += neighbor_mean_transpose(&(&d_pre * w2.transpose()), neighbors);
        }
        d_h = d_prev;
    }
    grads
}
