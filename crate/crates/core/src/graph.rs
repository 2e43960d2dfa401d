//! Correspondence-graph construction from raw pairwise matches.
//!
//! Pipeline: per-pair confidence NMS → per-image pooling of surviving
//! keypoints → per-image DP-Means → one node per cluster mean. Every
//! surviving match is snapped to its two cluster-mean nodes and becomes an
//! inter-image edge; nodes of the same image are fully connected.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sl3::Point2;

/// Pixel dimensions of one image of the collection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub id: u32,
    pub width: u32,
    pub height: u32,
}

impl ImageMeta {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::Validation(format!(
                "image {} has size {}x{}; both sides must be at least 2 px",
                self.id, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Pixel → normalized `[-1, 1]²` coordinates.
    pub fn normalize(&self, px: Point2) -> Point2 {
        Point2::new(
            2.0 * px.x / (self.width as f64 - 1.0) - 1.0,
            2.0 * px.y / (self.height as f64 - 1.0) - 1.0,
        )
    }

    pub fn denormalize(&self, p: Point2) -> Point2 {
        Point2::new(
            (p.x + 1.0) * 0.5 * (self.width as f64 - 1.0),
            (p.y + 1.0) * 0.5 * (self.height as f64 - 1.0),
        )
    }

    pub fn max_side(&self) -> f64 {
        self.width.max(self.height) as f64
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    /// Whether a pixel coordinate lies inside the image, with `slack` px of
    /// tolerance on each side.
    pub fn contains(&self, px: Point2, slack: f64) -> bool {
        px.x >= -slack
            && px.y >= -slack
            && px.x <= self.width as f64 - 1.0 + slack
            && px.y <= self.height as f64 - 1.0 + slack
    }
}

/// Matches between one image pair, in pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMatchSet {
    pub i: u32,
    pub j: u32,
    pub points_i: Vec<Point2>,
    pub points_j: Vec<Point2>,
    pub conf: Vec<f64>,
}

impl RawMatchSet {
    pub fn len(&self) -> usize {
        self.conf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conf.is_empty()
    }

    /// Structural checks that do not need image metadata.
    pub fn validate(&self) -> Result<()> {
        let pair = format!("pair ({}, {})", self.i, self.j);
        if self.i == self.j {
            return Err(Error::Validation(format!("{pair} matches an image to itself")));
        }
        if self.points_i.len() != self.points_j.len() || self.points_i.len() != self.conf.len() {
            return Err(Error::Validation(format!(
                "{pair} has mismatched lengths: points_i {}, points_j {}, conf {}",
                self.points_i.len(),
                self.points_j.len(),
                self.conf.len()
            )));
        }
        if let Some(c) = self.conf.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(Error::Validation(format!(
                "{pair} has confidence {c} outside [0, 1]"
            )));
        }
        if self
            .points_i
            .iter()
            .chain(&self.points_j)
            .any(|p| !p.is_finite())
        {
            return Err(Error::Validation(format!("{pair} has non-finite coordinates")));
        }
        Ok(())
    }
}

/// Knobs for [`build_graph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    /// NMS window side in pixels; suppression radius is half of it.
    pub nms_window: f64,
    /// Matches kept per image pair after NMS.
    pub top_k: usize,
    /// DP-Means penalty in squared pixels. `None` means
    /// `(0.05 · image diagonal)²` per image.
    pub dp_penalty: Option<f64>,
    pub dp_init_n: usize,
    pub dp_max_iter: usize,
    pub intra_edges: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            nms_window: 30.0,
            top_k: 10,
            dp_penalty: None,
            dp_init_n: 3,
            dp_max_iter: 50,
            intra_edges: true,
        }
    }
}

impl BuildConfig {
    pub fn penalty_for(&self, image: &ImageMeta) -> f64 {
        self.dp_penalty
            .unwrap_or_else(|| (0.05 * image.diagonal()).powi(2))
    }
}

/// Greedy confidence NMS: repeatedly keep the best unsuppressed point and
/// suppress everything within Chebyshev distance `window / 2`.
///
/// Ties go to the lower original index.
pub fn nms_select(points: &[Point2], scores: &[f64], window: f64, k: usize) -> Vec<usize> {
    nms_select_joint(&[points], scores, window, k)
}

/// NMS over items that carry a position in several images at once. An item
/// survives only if none of its positions is suppressed.
pub fn nms_select_joint(
    positions: &[&[Point2]],
    scores: &[f64],
    window: f64,
    k: usize,
) -> Vec<usize> {
    let radius = 0.5 * window;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        if kept.len() >= k {
            break;
        }
        let suppressed = kept.iter().any(|&s| {
            positions.iter().any(|pts| {
                let (p, q) = (pts[idx], pts[s]);
                (p.x - q.x).abs().max((p.y - q.y).abs()) <= radius
            })
        });
        if !suppressed {
            kept.push(idx);
        }
    }
    kept
}

/// Result of a DP-Means run.
#[derive(Debug, Clone, PartialEq)]
pub struct DpMeans {
    pub means: Vec<Point2>,
    /// Cluster index of every input point.
    pub assignments: Vec<usize>,
    /// Objective after each assignment/update sweep.
    pub objective_history: Vec<f64>,
}

impl DpMeans {
    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&0.0)
    }
}

/// `Σ ‖x − μ_{a(x)}‖² + penalty · #clusters`.
pub fn dp_means_objective(
    points: &[Point2],
    means: &[Point2],
    assignments: &[usize],
    penalty: f64,
) -> f64 {
    let fit: f64 = points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| p.distance_sq(&means[a]))
        .sum();
    fit + penalty * means.len() as f64
}

/// Batch DP-Means.
///
/// Seeds up to `init_n` means by farthest-point selection starting at the
/// first point, never adding a seed within `penalty` (squared distance) of
/// an existing one. Each sweep assigns points in order, opening a cluster at
/// any point whose squared distance to every mean exceeds `penalty`, then
/// recomputes means and drops empty clusters. Stops when assignments repeat
/// or after `max_iter` sweeps.
pub fn dp_means(points: &[Point2], penalty: f64, init_n: usize, max_iter: usize) -> DpMeans {
    if points.is_empty() {
        return DpMeans {
            means: Vec::new(),
            assignments: Vec::new(),
            objective_history: Vec::new(),
        };
    }

    let mut means = vec![points[0]];
    while means.len() < init_n {
        let mut best: Option<(usize, f64)> = None;
        for (idx, p) in points.iter().enumerate() {
            let d = nearest(&means, p).1;
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((idx, d));
            }
        }
        match best {
            Some((idx, d)) if d > penalty => means.push(points[idx]),
            _ => break,
        }
    }

    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for _ in 0..max_iter.max(1) {
        let mut next = Vec::with_capacity(points.len());
        for p in points {
            let (c, d) = nearest(&means, p);
            if d > penalty {
                means.push(*p);
                next.push(means.len() - 1);
            } else {
                next.push(c);
            }
        }

        let mut sums = vec![(0.0, 0.0, 0usize); means.len()];
        for (p, &c) in points.iter().zip(&next) {
            sums[c].0 += p.x;
            sums[c].1 += p.y;
            sums[c].2 += 1;
        }
        let mut remap = vec![usize::MAX; means.len()];
        let mut updated = Vec::new();
        for (c, &(sx, sy, n)) in sums.iter().enumerate() {
            if n > 0 {
                remap[c] = updated.len();
                updated.push(Point2::new(sx / n as f64, sy / n as f64));
            }
        }
        for c in next.iter_mut() {
            *c = remap[*c];
        }
        means = updated;
        history.push(dp_means_objective(points, &means, &next, penalty));

        let done = next == assignments;
        assignments = next;
        if done {
            break;
        }
    }

    DpMeans {
        means,
        assignments,
        objective_history: history,
    }
}

fn nearest(means: &[Point2], p: &Point2) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in means.iter().enumerate() {
        let d = p.distance_sq(m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// A keypoint node: its image (dense index) and normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub image: usize,
    pub position: Point2,
}

/// One correspondence after snapping, as a pair of node indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMatch {
    pub a: usize,
    pub b: usize,
}

/// The keypoint graph over a whole collection.
///
/// Images are stored sorted by id; node `image` fields index that list.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceGraph {
    images: Vec<ImageMeta>,
    nodes: Vec<GraphNode>,
    intra_edges: Vec<(usize, usize)>,
    inter_edges: Vec<(usize, usize)>,
    matches: Vec<GraphMatch>,
    neighbors: Vec<Vec<usize>>,
    image_nodes: Vec<Vec<usize>>,
}

impl CorrespondenceGraph {
    /// Assembles and validates a graph from explicit parts. Edges are
    /// undirected and stored with the smaller index first.
    pub fn from_parts(
        images: Vec<ImageMeta>,
        nodes: Vec<GraphNode>,
        intra_edges: Vec<(usize, usize)>,
        inter_edges: Vec<(usize, usize)>,
        matches: Vec<GraphMatch>,
    ) -> Result<Self> {
        let n = nodes.len();
        if let Some(node) = nodes.iter().find(|v| v.image >= images.len()) {
            return Err(Error::Validation(format!(
                "node references image index {} of {}",
                node.image,
                images.len()
            )));
        }
        let canon = |(u, v): (usize, usize)| (u.min(v), u.max(v));
        let intra: Vec<_> = intra_edges.into_iter().map(canon).collect();
        let inter: Vec<_> = inter_edges.into_iter().map(canon).collect();
        for &(u, v) in intra.iter().chain(&inter) {
            if u == v || v >= n {
                return Err(Error::Validation(format!("invalid edge ({u}, {v})")));
            }
        }
        if let Some(&(u, v)) = intra.iter().find(|(u, v)| nodes[*u].image != nodes[*v].image) {
            return Err(Error::Validation(format!(
                "intra edge ({u}, {v}) joins different images"
            )));
        }
        if let Some(&(u, v)) = inter.iter().find(|(u, v)| nodes[*u].image == nodes[*v].image) {
            return Err(Error::Validation(format!(
                "inter edge ({u}, {v}) joins nodes of the same image"
            )));
        }
        for m in &matches {
            if m.a >= n || m.b >= n || nodes[m.a].image == nodes[m.b].image {
                return Err(Error::Validation(format!(
                    "match ({}, {}) must join nodes of two different images",
                    m.a, m.b
                )));
            }
        }

        let edge_set: BTreeSet<(usize, usize)> = intra.iter().chain(&inter).copied().collect();
        let mut neighbors = vec![Vec::new(); n];
        for &(u, v) in &edge_set {
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let mut image_nodes = vec![Vec::new(); images.len()];
        for (v, node) in nodes.iter().enumerate() {
            image_nodes[node.image].push(v);
        }

        Ok(Self {
            images,
            nodes,
            intra_edges: intra,
            inter_edges: inter,
            matches,
            neighbors,
            image_nodes,
        })
    }

    pub fn images(&self) -> &[ImageMeta] {
        &self.images
    }

    pub fn n_images(&self) -> usize {
        self.images.len()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn intra_edges(&self) -> &[(usize, usize)] {
        &self.intra_edges
    }

    pub fn inter_edges(&self) -> &[(usize, usize)] {
        &self.inter_edges
    }

    pub fn matches(&self) -> &[GraphMatch] {
        &self.matches
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    /// Sorted neighbor list of every node.
    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    /// Nodes of the image at dense index `image`, in node order.
    pub fn image_nodes(&self, image: usize) -> &[usize] {
        &self.image_nodes[image]
    }

    /// Dense image index of every node.
    pub fn image_tags(&self) -> Vec<usize> {
        self.nodes.iter().map(|v| v.image).collect()
    }

    pub fn position(&self, v: usize) -> Point2 {
        self.nodes[v].position
    }

    /// `|V| × 2` matrix of node coordinates.
    pub fn features0(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.nodes.len(), 2, |r, c| {
            let p = self.nodes[r].position;
            if c == 0 {
                p.x
            } else {
                p.y
            }
        })
    }

    /// Dense symmetric binary adjacency matrix.
    pub fn adjacency(&self) -> DMatrix<u8> {
        let n = self.nodes.len();
        let mut a = DMatrix::zeros(n, n);
        for (u, list) in self.neighbors.iter().enumerate() {
            for &v in list {
                a[(u, v)] = 1;
            }
        }
        a
    }

    /// Dense index of the image with the given id.
    pub fn image_index(&self, id: u32) -> Option<usize> {
        self.images.iter().position(|m| m.id == id)
    }

    /// Ids of images that have nodes but no inter-image edge.
    pub fn orphan_images(&self) -> Vec<u32> {
        let mut linked = vec![false; self.images.len()];
        for &(u, v) in &self.inter_edges {
            linked[self.nodes[u].image] = true;
            linked[self.nodes[v].image] = true;
        }
        linked
            .iter()
            .enumerate()
            .filter(|(_, l)| !**l)
            .map(|(i, _)| self.images[i].id)
            .collect()
    }

    /// Same topology with every node moved by `f(image, position)`.
    pub fn map_positions(&self, mut f: impl FnMut(usize, Point2) -> Point2) -> Self {
        let mut out = self.clone();
        for node in &mut out.nodes {
            node.position = f(node.image, node.position);
        }
        out
    }
}

/// Builds the collection graph from validated images and raw matches.
pub fn build_graph(
    images: &[ImageMeta],
    matches: &[RawMatchSet],
    config: &BuildConfig,
) -> Result<CorrespondenceGraph> {
    let mut metas = images.to_vec();
    metas.sort_by_key(|m| m.id);
    for w in metas.windows(2) {
        if w[0].id == w[1].id {
            return Err(Error::Validation(format!("duplicate image id {}", w[0].id)));
        }
    }
    for m in &metas {
        m.validate()?;
    }
    let index_of = |id: u32| metas.binary_search_by_key(&id, |m| m.id).ok();

    let mut in_pair = vec![false; metas.len()];
    let mut pair_indices = Vec::with_capacity(matches.len());
    for set in matches {
        set.validate()?;
        let (Some(a), Some(b)) = (index_of(set.i), index_of(set.j)) else {
            let missing = if index_of(set.i).is_none() { set.i } else { set.j };
            return Err(Error::Validation(format!(
                "pair ({}, {}) references unknown image id {missing}",
                set.i, set.j
            )));
        };
        for (pts, meta) in [(&set.points_i, &metas[a]), (&set.points_j, &metas[b])] {
            if let Some(p) = pts.iter().find(|p| !meta.contains(**p, 1.0)) {
                return Err(Error::Validation(format!(
                    "pair ({}, {}) point ({}, {}) lies outside image {} ({}x{})",
                    set.i, set.j, p.x, p.y, meta.id, meta.width, meta.height
                )));
            }
        }
        in_pair[a] = true;
        in_pair[b] = true;
        pair_indices.push((a, b));
    }
    if let Some(idx) = in_pair.iter().position(|p| !p) {
        return Err(Error::Validation(format!(
            "image {} appears in no match pair; its warp would be unconstrained",
            metas[idx].id
        )));
    }

    // Pool of surviving keypoints per image; each surviving match records
    // which pooled entry holds each of its endpoints.
    let mut pools: Vec<Vec<Point2>> = vec![Vec::new(); metas.len()];
    let mut kept: Vec<(usize, usize, usize, usize)> = Vec::new();
    for (set, &(a, b)) in matches.iter().zip(&pair_indices) {
        let survivors = nms_select_joint(
            &[&set.points_i, &set.points_j],
            &set.conf,
            config.nms_window,
            config.top_k,
        );
        for m in survivors {
            pools[a].push(set.points_i[m]);
            pools[b].push(set.points_j[m]);
            kept.push((a, pools[a].len() - 1, b, pools[b].len() - 1));
        }
    }

    let mut nodes = Vec::new();
    let mut pooled_to_node: Vec<Vec<usize>> = Vec::with_capacity(metas.len());
    for (idx, (meta, pool)) in metas.iter().zip(&pools).enumerate() {
        if pool.is_empty() {
            return Err(Error::Validation(format!(
                "image {} has no keypoints after non-maximum suppression",
                meta.id
            )));
        }
        let clusters = dp_means(
            pool,
            config.penalty_for(meta),
            config.dp_init_n,
            config.dp_max_iter,
        );
        let base = nodes.len();
        nodes.extend(clusters.means.iter().map(|m| GraphNode {
            image: idx,
            position: meta.normalize(*m),
        }));
        pooled_to_node.push(clusters.assignments.iter().map(|c| base + c).collect());
    }

    let graph_matches: Vec<GraphMatch> = kept
        .iter()
        .map(|&(a, pa, b, pb)| GraphMatch {
            a: pooled_to_node[a][pa],
            b: pooled_to_node[b][pb],
        })
        .collect();
    let inter: BTreeSet<(usize, usize)> = graph_matches
        .iter()
        .map(|m| (m.a.min(m.b), m.a.max(m.b)))
        .collect();

    let mut intra = Vec::new();
    if config.intra_edges {
        let mut start = 0;
        while start < nodes.len() {
            let image = nodes[start].image;
            let end = nodes[start..]
                .iter()
                .position(|v| v.image != image)
                .map_or(nodes.len(), |off| start + off);
            for u in start..end {
                for v in u + 1..end {
                    intra.push((u, v));
                }
            }
            start = end;
        }
    }

    let graph = CorrespondenceGraph::from_parts(
        metas,
        nodes,
        intra,
        inter.into_iter().collect(),
        graph_matches,
    )?;
    let orphans = graph.orphan_images();
    if !orphans.is_empty() {
        log::warn!("images without inter-image edges: {orphans:?}");
    }
    Ok(graph)
}
