#![allow(dead_code)]

pub mod dp_oracle;

use jointalign::graph::{CorrespondenceGraph, GraphMatch, GraphNode, ImageMeta};
use jointalign::sage::SageWeights;
use jointalign::sl3::{Point2, Sl3Vector};
use rand::Rng;

/// A small connected graph: every image gets `2..=max_nodes` nodes, the
/// images are chained by at least one match each, and a few extra matches
/// are sprinkled on top.
pub fn random_graph(rng: &mut impl Rng, n_images: usize, max_nodes: usize, extra: usize) -> CorrespondenceGraph {
    let images = (0..n_images as u32)
        .map(|id| ImageMeta { id, width: 64, height: 64 })
        .collect();
    let mut nodes = Vec::new();
    let mut per_image = Vec::new();
    for image in 0..n_images {
        let count = rng.random_range(2..=max_nodes.max(2));
        let start = nodes.len();
        for _ in 0..count {
            nodes.push(GraphNode {
                image,
                position: Point2::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)),
            });
        }
        per_image.push((start..nodes.len()).collect::<Vec<_>>());
    }
    let mut intra = Vec::new();
    for ids in &per_image {
        for (a, &u) in ids.iter().enumerate() {
            for &v in &ids[a + 1..] {
                intra.push((u, v));
            }
        }
    }
    let pick = |rng: &mut dyn rand::RngCore, img: usize| {
        let ids = &per_image[img];
        ids[rng.random_range(0..ids.len())]
    };
    let mut matches = Vec::new();
    for img in 1..n_images {
        matches.push(GraphMatch { a: pick(rng, img - 1), b: pick(rng, img) });
    }
    for _ in 0..extra {
        let i = rng.random_range(0..n_images);
        let mut j = rng.random_range(0..n_images - 1);
        if j >= i {
            j += 1;
        }
        matches.push(GraphMatch { a: pick(rng, i), b: pick(rng, j) });
    }
    let inter: Vec<_> = matches.iter().map(|m| (m.a, m.b)).collect();
    let mut inter_dedup = inter.clone();
    inter_dedup.iter_mut().for_each(|e| *e = (e.0.min(e.1), e.0.max(e.1)));
    inter_dedup.sort_unstable();
    inter_dedup.dedup();
    CorrespondenceGraph::from_parts(images, nodes, intra, inter_dedup, matches).unwrap()
}

pub fn random_theta(rng: &mut impl Rng, scale: f64) -> Sl3Vector {
    Sl3Vector(std::array::from_fn(|k| {
        let s = if k >= 6 { 0.1 * scale } else { scale };
        rng.random_range(-s..=s)
    }))
}

/// Overwrites every parameter with a uniform draw in `[-scale, scale]`.
pub fn randomize(weights: &mut SageWeights, rng: &mut impl Rng, scale: f64) {
    for block in weights.slices_mut() {
        for v in block {
            *v = rng.random_range(-scale..=scale);
        }
    }
}

use jointalign::objective::{evaluate_loss, LossConfig};
use jointalign::optim::{loss_gradients, Model, Parameters};

pub fn model_loss(model: &Model, graph: &CorrespondenceGraph, cfg: &LossConfig) -> f64 {
    evaluate_loss(graph, &model.predict(graph).unwrap(), cfg).unwrap().total
}

/// Largest per-coordinate relative error between the analytic gradient and
/// central differences with step `h`.
///
/// The denominator never drops below the round-off noise of the
/// difference quotient, `64·ε·(1 + |L|) / h`, scaled by the 1e-4 target;
/// coordinates smaller than that are effectively compared absolutely.
pub fn gradient_error(model: &Model, graph: &CorrespondenceGraph, cfg: &LossConfig, h: f64) -> f64 {
    let (value, grads) = loss_gradients(model, graph, cfg).unwrap();
    let analytic: Vec<f64> = grads.blocks().iter().flat_map(|b| b.iter().copied()).collect();
    let noise = 64.0 * f64::EPSILON * (1.0 + value.abs()) / h;
    let floor = noise / 1e-4;
    let mut worst = 0.0f64;
    let mut flat = 0;
    let n_blocks = model.blocks().len();
    for b in 0..n_blocks {
        let len = model.blocks()[b].len();
        for k in 0..len {
            let mut plus = model.clone();
            plus.blocks_mut()[b][k] += h;
            let mut minus = model.clone();
            minus.blocks_mut()[b][k] -= h;
            let fd = (model_loss(&plus, graph, cfg) - model_loss(&minus, graph, cfg)) / (2.0 * h);
            let a = analytic[flat];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(floor);
            worst = worst.max(err);
            flat += 1;
        }
    }
    worst
}
