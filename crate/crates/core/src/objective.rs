//! Robust inverse-compositional keypoint loss.
//!
//! Every stored match `(a, b)` between images `i` and `j` is evaluated in
//! both directions: `a` warped by `exp(θ_i)` then `exp(−θ_j)` against `b`,
//! and `b` warped by `exp(θ_j)` then `exp(−θ_i)` against `a`. Each residual
//! goes through the Geman–McClure penalty (or a plain square for the ℓ2
//! variant).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CorrespondenceGraph;
use crate::sl3::{ExpTape, Homography, Mat3, Point2, Sl3Vector, W_EPSILON};

/// `z² / (z² + σ²)`.
pub fn geman_mcclure(z: f64, sigma: f64) -> f64 {
    let s = z * z;
    s / (s + sigma * sigma)
}

/// Per-image horizontal-flip flags; `true` means the image's coordinates
/// are mirrored before alignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlipFlags(pub Vec<bool>);

impl FlipFlags {
    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|f| **f).count()
    }

    pub fn toggled(&self, i: usize) -> Self {
        let mut f = self.clone();
        f.0[i] = !f.0[i];
        f
    }

    pub fn inverted(&self) -> Self {
        Self(self.0.iter().map(|f| !f).collect())
    }
}

/// Mirrors (`x → −x`) every node of each flagged image.
pub fn apply_flips(graph: &CorrespondenceGraph, flags: &FlipFlags) -> Result<CorrespondenceGraph> {
    if flags.len() != graph.n_images() {
        return Err(Error::InvalidArgument(format!(
            "{} flip flags for {} images",
            flags.len(),
            graph.n_images()
        )));
    }
    Ok(graph.map_positions(|img, p| if flags.get(img) { p.mirrored() } else { p }))
}

/// Options of the keypoint loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub sigma: f64,
    /// Geman–McClure if set, squared residuals otherwise.
    pub robust: bool,
    /// Divide by the number of ordered evaluations.
    pub normalize: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            sigma: 0.25,
            robust: true,
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    /// Sum of the terms in which each image takes part, as source or target.
    pub per_image: Vec<f64>,
    /// Residual norms, two per match: forward then reverse direction.
    /// Degenerate evaluations are `+∞`.
    pub residuals: Vec<f64>,
    /// Evaluations whose warped point fell at infinity.
    pub degenerate: usize,
}

/// Unnormalized loss for the given per-image vectors.
pub fn kp_ic_loss(
    graph: &CorrespondenceGraph,
    thetas: &[Sl3Vector],
    sigma: f64,
    robust: bool,
) -> Result<LossReport> {
    evaluate_loss(
        graph,
        thetas,
        &LossConfig {
            sigma,
            robust,
            normalize: false,
        },
    )
}

pub fn evaluate_loss(
    graph: &CorrespondenceGraph,
    thetas: &[Sl3Vector],
    config: &LossConfig,
) -> Result<LossReport> {
    let warps = ThetaWarps::new(graph, thetas, false)?;
    Ok(accumulate(graph, &warps, config, None))
}

/// Loss evaluated directly on per-image homographies; the relative warp of
/// pair `(i, j)` is `H_i` followed by `H_j⁻¹`.
pub fn loss_from_homographies(
    graph: &CorrespondenceGraph,
    homographies: &[Homography],
    config: &LossConfig,
) -> Result<LossReport> {
    check_len(graph, homographies.len())?;
    let forward: Vec<Mat3> = homographies.iter().map(|h| *h.matrix()).collect();
    let inverse: Vec<Mat3> = homographies.iter().map(|h| *h.inverse().matrix()).collect();
    let warps = MatrixWarps { forward, inverse };
    Ok(accumulate(graph, &warps, config, None))
}

/// Loss together with its gradient with respect to every image's vector.
pub fn loss_with_gradient(
    graph: &CorrespondenceGraph,
    thetas: &[Sl3Vector],
    config: &LossConfig,
) -> Result<(LossReport, Vec<Sl3Vector>)> {
    let warps = ThetaWarps::new(graph, thetas, true)?;
    let n = thetas.len();
    let mut grads = MatrixGrads {
        forward: vec![Mat3::zeros(); n],
        inverse: vec![Mat3::zeros(); n],
    };
    let report = accumulate(graph, &warps, config, Some(&mut grads));
    let tapes = warps.tapes.expect("tapes recorded");
    let d_theta = (0..n)
        .map(|i| {
            let d_plus = tapes[i].0.backward(&grads.forward[i]);
            let d_minus = tapes[i].1.backward(&grads.inverse[i]);
            Sl3Vector::algebra_adjoint(&(d_plus - d_minus))
        })
        .collect();
    Ok((report, d_theta))
}

fn check_len(graph: &CorrespondenceGraph, n: usize) -> Result<()> {
    if n != graph.n_images() {
        return Err(Error::InvalidArgument(format!(
            "{n} warps for {} images",
            graph.n_images()
        )));
    }
    if graph.matches().is_empty() {
        return Err(Error::InvalidArgument("graph has no matches".into()));
    }
    Ok(())
}

/// Per-image forward and inverse warp matrices.
trait WarpSource {
    fn forward(&self, i: usize) -> &Mat3;
    fn inverse(&self, j: usize) -> &Mat3;
}

struct MatrixWarps {
    forward: Vec<Mat3>,
    inverse: Vec<Mat3>,
}

impl WarpSource for MatrixWarps {
    fn forward(&self, i: usize) -> &Mat3 {
        &self.forward[i]
    }
    fn inverse(&self, j: usize) -> &Mat3 {
        &self.inverse[j]
    }
}

struct ThetaWarps {
    matrices: MatrixWarps,
    tapes: Option<Vec<(ExpTape, ExpTape)>>,
}

impl ThetaWarps {
    fn new(graph: &CorrespondenceGraph, thetas: &[Sl3Vector], keep_tapes: bool) -> Result<Self> {
        check_len(graph, thetas.len())?;
        if let Some(t) = thetas.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite warp vector {:?}", t.0)));
        }
        let tapes: Vec<(ExpTape, ExpTape)> = thetas
            .iter()
            .map(|t| {
                let a = t.to_algebra();
                (ExpTape::record(&a), ExpTape::record(&-a))
            })
            .collect();
        let matrices = MatrixWarps {
            forward: tapes.iter().map(|t| t.0.value()).collect(),
            inverse: tapes.iter().map(|t| t.1.value()).collect(),
        };
        Ok(Self {
            matrices,
            tapes: keep_tapes.then_some(tapes),
        })
    }
}

impl WarpSource for ThetaWarps {
    fn forward(&self, i: usize) -> &Mat3 {
        self.matrices.forward(i)
    }
    fn inverse(&self, j: usize) -> &Mat3 {
        self.matrices.inverse(j)
    }
}

struct MatrixGrads {
    forward: Vec<Mat3>,
    inverse: Vec<Mat3>,
}

fn accumulate(
    graph: &CorrespondenceGraph,
    warps: &dyn WarpSource,
    config: &LossConfig,
    mut grads: Option<&mut MatrixGrads>,
) -> LossReport {
    let n_eval = 2 * graph.matches().len();
    let scale = if config.normalize {
        1.0 / n_eval as f64
    } else {
        1.0
    };
    let sigma2 = config.sigma * config.sigma;

    let mut total = 0.0;
    let mut per_image = vec![0.0; graph.n_images()];
    let mut residuals = Vec::with_capacity(n_eval);
    let mut degenerate = 0;

    for m in graph.matches() {
        for (src, dst) in [(m.a, m.b), (m.b, m.a)] {
            let i = graph.nodes()[src].image;
            let j = graph.nodes()[dst].image;
            let x = graph.position(src);
            let target = graph.position(dst);
            let e_i = warps.forward(i);
            let e_j_inv = warps.inverse(j);
            let rel = e_j_inv * e_i;

            let q = rel * nalgebra::Vector3::new(x.x, x.y, 1.0);
            let w = q[2];
            if w.abs() <= W_EPSILON || !w.is_finite() {
                degenerate += 1;
                residuals.push(f64::INFINITY);
                if config.robust {
                    total += scale;
                    per_image[i] += scale;
                    per_image[j] += scale;
                }
                continue;
            }
            let warped = Point2::new(q[0] / w, q[1] / w);
            let r = (target.x - warped.x, target.y - warped.y);
            let s = r.0 * r.0 + r.1 * r.1;
            residuals.push(s.sqrt());

            let (value, d_value_ds) = if config.robust {
                let denom = s + sigma2;
                (s / denom, sigma2 / (denom * denom))
            } else {
                (s, 1.0)
            };
            total += scale * value;
            per_image[i] += scale * value;
            per_image[j] += scale * value;

            if let Some(g) = grads.as_deref_mut() {
                let ds = scale * d_value_ds;
                // s = ‖target − warped‖²
                let gy0 = -2.0 * r.0 * ds;
                let gy1 = -2.0 * r.1 * ds;
                let dq = nalgebra::Vector3::new(
                    gy0 / w,
                    gy1 / w,
                    -(gy0 * warped.x + gy1 * warped.y) / w,
                );
                let d_rel = dq * nalgebra::RowVector3::new(x.x, x.y, 1.0);
                g.forward[i] += e_j_inv.transpose() * d_rel;
                g.inverse[j] += d_rel * e_i.transpose();
            }
        }
    }
    if degenerate > 0 && !config.robust {
        log::warn!("{degenerate} residuals at infinity skipped in the l2 loss");
    }

    LossReport {
        total,
        per_image,
        residuals,
        degenerate,
    }
}
