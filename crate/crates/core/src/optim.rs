//! Test-time optimization: exact gradients, Adam, periodic flip search and
//! the final gauge pick.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CorrespondenceGraph, ImageMeta};
use crate::objective::{apply_flips, evaluate_loss, loss_with_gradient, FlipFlags, LossConfig};
use crate::sage::{self, Arch, NetworkConfig, SageWeights};
use crate::sl3::{gauge_normalize, GaugeMode, Homography, Sl3Vector};

/// Minimum loss decrease for a flip toggle to be kept.
pub const FLIP_ACCEPT_MARGIN: f64 = 1e-12;

/// A set of trainable arrays visited in a fixed order.
pub trait Parameters: Clone {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }

    fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Parameters for SageWeights {
    fn blocks(&self) -> Vec<&[f64]> {
        self.slices()
    }
    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.slices_mut()
    }
}

/// What the optimizer updates: network weights, or free per-image vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Network(SageWeights),
    Direct(Vec<Sl3Vector>),
}

impl Parameters for Model {
    fn blocks(&self) -> Vec<&[f64]> {
        match self {
            Model::Network(w) => w.slices(),
            Model::Direct(t) => t.iter().map(|v| &v.0[..]).collect(),
        }
    }
    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Model::Network(w) => w.slices_mut(),
            Model::Direct(t) => t.iter_mut().map(|v| &mut v.0[..]).collect(),
        }
    }
}

impl Model {
    /// Seeded initial state; free vectors start at zero.
    pub fn init(config: &NetworkConfig, n_images: usize, seed: u64) -> Self {
        match config.arch {
            Arch::Direct => Model::Direct(vec![Sl3Vector::zero(); n_images]),
            _ => Model::Network(sage::init_network(config, seed)),
        }
    }

    pub fn predict(&self, graph: &CorrespondenceGraph) -> Result<Vec<Sl3Vector>> {
        match self {
            Model::Network(w) => sage::forward(graph, w),
            Model::Direct(t) => {
                if t.len() != graph.n_images() {
                    return Err(Error::InvalidArgument(format!(
                        "{} free vectors for {} images",
                        t.len(),
                        graph.n_images()
                    )));
                }
                Ok(t.clone())
            }
        }
    }

    /// Human-readable name of each block, parallel to [`Parameters::blocks`].
    pub fn block_names(&self) -> Vec<String> {
        match self {
            Model::Network(w) => {
                let mut names = Vec::new();
                for (l, layer) in w.layers.iter().enumerate() {
                    names.push(format!("layer {l} self weights"));
                    if layer.w_neigh.is_some() {
                        names.push(format!("layer {l} neighbor weights"));
                    }
                    if layer.bias.is_some() {
                        names.push(format!("layer {l} bias"));
                    }
                }
                names.push("head weights".into());
                names.push("head bias".into());
                names
            }
            Model::Direct(t) => (0..t.len()).map(|i| format!("theta of image {i}")).collect(),
        }
    }
}

/// Loss on the current flip configuration and its gradient with respect
/// to every parameter.
pub fn loss_gradients(
    model: &Model,
    graph: &CorrespondenceGraph,
    loss: &LossConfig,
) -> Result<(f64, Model)> {
    let (value, grads) = match model {
        Model::Network(w) => {
            let (thetas, tape) = sage::forward_with_tape(graph, w)?;
            check_finite_thetas(&thetas, "network output")?;
            let (report, d_theta) = loss_with_gradient(graph, &thetas, loss)?;
            check_finite_thetas(&d_theta, "loss gradient")?;
            (report.total, Model::Network(sage::backward(graph, w, &tape, &d_theta)))
        }
        Model::Direct(t) => {
            let thetas = model.predict(graph)?;
            check_finite_thetas(&thetas, "free vector")?;
            let (report, d_theta) = loss_with_gradient(graph, t, loss)?;
            (report.total, Model::Direct(d_theta))
        }
    };
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value}")));
    }
    let names = grads.block_names();
    for (block, name) in grads.blocks().iter().zip(&names) {
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in {name}")));
        }
    }
    Ok((value, grads))
}

fn check_finite_thetas(thetas: &[Sl3Vector], what: &str) -> Result<()> {
    match thetas.iter().position(|t| !t.is_finite()) {
        Some(i) => Err(Error::Numerical(format!("non-finite {what} for image {i}"))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators shaped like the parameters they update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
    pub config: AdamConfig,
}

impl<P: Parameters> AdamState<P> {
    pub fn new(like: &P, config: AdamConfig) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step<P: Parameters>(params: &mut P, grads: &P, state: &mut AdamState<P>) -> Result<()> {
    let shapes = |p: &P| p.blocks().iter().map(|b| b.len()).collect::<Vec<_>>();
    let expected = shapes(params);
    if shapes(grads) != expected || shapes(&state.m) != expected || shapes(&state.v) != expected {
        return Err(Error::InvalidArgument("Adam shapes do not match the parameters".into()));
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);

    let g_blocks = grads.blocks();
    let mut m_blocks = state.m.blocks_mut();
    let mut v_blocks = state.v.blocks_mut();
    for (b, p) in params.blocks_mut().into_iter().enumerate() {
        let (g, m, v) = (g_blocks[b], &mut m_blocks[b], &mut v_blocks[b]);
        for k in 0..p.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Total loss of `model` on `graph` re-posed by `flags`.
pub fn flipped_loss(
    graph: &CorrespondenceGraph,
    model: &Model,
    flags: &FlipFlags,
    loss: &LossConfig,
) -> Result<f64> {
    let posed = apply_flips(graph, flags)?;
    let thetas = model.predict(&posed)?;
    Ok(evaluate_loss(&posed, &thetas, loss)?.total)
}

/// One greedy pass over the images in id order, keeping each single-image
/// toggle that lowers the loss. Returns the new flags and their loss.
pub fn flip_search(
    graph: &CorrespondenceGraph,
    model: &Model,
    flags: &FlipFlags,
    loss: &LossConfig,
) -> Result<(FlipFlags, f64)> {
    let mut best = flags.clone();
    let mut best_loss = flipped_loss(graph, model, &best, loss)?;
    for i in 0..graph.n_images() {
        let candidate = best.toggled(i);
        let l = flipped_loss(graph, model, &candidate, loss)?;
        if l < best_loss - FLIP_ACCEPT_MARGIN {
            best = candidate;
            best_loss = l;
        }
    }
    Ok((best, best_loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub sigma: f64,
    pub flip_every: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub network: NetworkConfig,
    pub robust: bool,
    pub gauge: GaugeMode,
    pub normalize: bool,
    /// Recorded only; the loop is always sequential.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 600,
            sigma: 0.25,
            flip_every: 100,
            adam: AdamConfig::default(),
            seed: 0,
            network: NetworkConfig::default(),
            robust: true,
            gauge: GaugeMode::Karcher,
            normalize: false,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.flip_every == 0 {
            return Err(Error::InvalidArgument("flip interval must be at least 1".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.adam.lr
            )));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if self.network.arch != Arch::Direct && self.network.hidden_dim == 0 {
            return Err(Error::InvalidArgument("hidden dimension must be at least 1".into()));
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            sigma: self.sigma,
            robust: self.robust,
            normalize: self.normalize,
        }
    }
}

/// One line of the per-epoch log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    /// Number of flags changed by the flip check run at this epoch.
    pub flips_changed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub flip_checks: usize,
    pub flips_changed: usize,
    /// The flag set was inverted (and warps mirrored) to flag at most half
    /// of the collection.
    pub flips_canonicalized: bool,
    pub gauge_fell_back: bool,
    pub degenerate_residuals: usize,
    pub orphan_images: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub images: Vec<ImageMeta>,
    /// Gauge-normalized warps, one per image in id order.
    pub homographies: Vec<Homography>,
    /// Raw predicted vectors before gauge normalization.
    pub thetas: Vec<Sl3Vector>,
    pub flips: FlipFlags,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
    /// Gauge actually applied.
    pub gauge: GaugeMode,
    pub convergence: Convergence,
    /// Final network weights; `None` for free vectors or loaded files.
    pub weights: Option<SageWeights>,
}

impl AlignmentResult {
    pub fn image_index(&self, id: u32) -> Option<usize> {
        self.images.iter().position(|m| m.id == id)
    }
}

/// An aborted run: the failure and the losses recorded before it.
#[derive(Debug)]
pub struct AlignFailure {
    pub error: Error,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

impl std::fmt::Display for AlignFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "epoch {}: {}", self.epoch, self.error)
    }
}

impl std::error::Error for AlignFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<AlignFailure> for Error {
    fn from(f: AlignFailure) -> Self {
        match f.error {
            Error::Numerical(msg) => Error::Numerical(format!("epoch {}: {msg}", f.epoch)),
            other => other,
        }
    }
}

pub fn align_collection(
    graph: &CorrespondenceGraph,
    config: &TrainConfig,
) -> std::result::Result<AlignmentResult, AlignFailure> {
    align_collection_logged(graph, config, &mut |_| {})
}

/// [`align_collection`] reporting every epoch to `sink`.
pub fn align_collection_logged(
    graph: &CorrespondenceGraph,
    config: &TrainConfig,
    sink: &mut dyn FnMut(&EpochLog),
) -> std::result::Result<AlignmentResult, AlignFailure> {
    let fail = |error: Error, epoch: usize, history: &[f64]| AlignFailure {
        error,
        epoch,
        loss_history: history.to_vec(),
    };
    config.validate().map_err(|e| fail(e, 0, &[]))?;
    if graph.matches().is_empty() {
        return Err(fail(Error::InvalidArgument("graph has no matches".into()), 0, &[]));
    }
    let orphan_images = graph.orphan_images();
    if !orphan_images.is_empty() {
        log::warn!("images without inter-image edges: {orphan_images:?}");
    }

    let loss = config.loss();
    let n = graph.n_images();
    let mut model = Model::init(&config.network, n, config.seed);
    let mut adam = AdamState::new(&model, config.adam);
    let mut flags = FlipFlags::none(n);
    let mut posed = graph.clone();
    let mut history = Vec::with_capacity(config.epochs);
    let mut flip_checks = 0;
    let mut flips_changed_total = 0;

    for epoch in 0..config.epochs {
        let mut flips_changed = 0;
        if epoch % config.flip_every == 0 {
            let (next, _) =
                flip_search(graph, &model, &flags, &loss).map_err(|e| fail(e, epoch, &history))?;
            flip_checks += 1;
            flips_changed = next.0.iter().zip(&flags.0).filter(|(a, b)| a != b).count();
            if flips_changed > 0 {
                flags = next;
                posed = apply_flips(graph, &flags).map_err(|e| fail(e, epoch, &history))?;
            }
            flips_changed_total += flips_changed;
        }
        let (value, grads) =
            loss_gradients(&model, &posed, &loss).map_err(|e| fail(e, epoch, &history))?;
        history.push(value);
        sink(&EpochLog {
            epoch,
            loss: value,
            flips_changed,
        });
        adam_step(&mut model, &grads, &mut adam).map_err(|e| fail(e, epoch, &history))?;
    }

    let end = config.epochs;
    let mut thetas = model.predict(&posed).map_err(|e| fail(e, end, &history))?;
    let report = evaluate_loss(&posed, &thetas, &loss).map_err(|e| fail(e, end, &history))?;
    if !report.total.is_finite() {
        return Err(fail(
            Error::Numerical(format!("final loss is {}", report.total)),
            end,
            &history,
        ));
    }

    // Mirroring the whole collection is itself a gauge freedom; prefer the
    // labelling that flags the minority.
    let flips_canonicalized = 2 * flags.count() > n;
    if flips_canonicalized {
        flags = flags.inverted();
        thetas = thetas.iter().map(|t| t.mirror_conjugate()).collect();
    }
    let gauge = gauge_normalize(&thetas, config.gauge).map_err(|e| fail(e, end, &history))?;

    Ok(AlignmentResult {
        images: graph.images().to_vec(),
        homographies: gauge.homographies,
        thetas,
        flips: flags,
        final_loss: report.total,
        convergence: Convergence {
            epochs_run: end,
            initial_loss: history.first().copied().unwrap_or(report.total),
            flip_checks,
            flips_changed: flips_changed_total,
            flips_canonicalized,
            gauge_fell_back: gauge.fell_back,
            degenerate_residuals: report.degenerate,
            orphan_images,
        },
        loss_history: history,
        gauge: gauge.mode,
        weights: match model {
            Model::Network(w) => Some(w),
            Model::Direct(_) => None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Scalar(Vec<f64>);

    impl Parameters for Scalar {
        fn blocks(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut p = Scalar(vec![0.5, -2.0]);
        let g = p.zeros_like();
        let mut s = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p, Scalar(vec![0.5, -2.0]));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_scalar_hand_calculation() {
        // m = 0.1·g, v = 0.001·g²; bias correction restores g and g², so
        // the step is lr·g / (|g| + eps).
        let g = 0.3;
        let cfg = AdamConfig::default();
        let mut p = Scalar(vec![1.0]);
        let mut s = AdamState::new(&p, cfg);
        adam_step(&mut p, &Scalar(vec![g]), &mut s).unwrap();
        let expected = 1.0 - cfg.lr * g / (g + cfg.eps);
        assert!((p.0[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn second_step_follows_recursion() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = Scalar(vec![0.0]);
        let mut s = AdamState::new(&p, cfg);
        adam_step(&mut p, &Scalar(vec![1.0]), &mut s).unwrap();
        adam_step(&mut p, &Scalar(vec![-2.0]), &mut s).unwrap();
        let m: f64 = 0.9 * 0.1 + 0.1 * -2.0;
        let v: f64 = 0.999 * 0.001 + 0.001 * 4.0;
        let step2 = 0.1 * (m / (1.0 - 0.81)) / ((v / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
        let expected = -0.1 / (1.0 + 1e-8) - step2;
        assert!((p.0[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut p = Scalar(vec![0.0, 1.0]);
        let mut s = AdamState::new(&p, AdamConfig::default());
        assert!(adam_step(&mut p, &Scalar(vec![1.0]), &mut s).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { flip_every: 0, ..Default::default() },
            TrainConfig { sigma: 0.0, ..Default::default() },
            TrainConfig { sigma: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidArgument(_))));
        }
    }
}
