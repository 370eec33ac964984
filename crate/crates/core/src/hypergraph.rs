//! Joint text-video hypergraph construction.
//!
//! One retrieval candidate pair (a text and a video) becomes a single
//! hypergraph. Node order is fixed: the video-global summary node first,
//! then the m selected keyframes, then the n word tokens. Hyperedge order is
//! fixed too: Global, IntraText, IntraVisual, then one CrossModal edge per
//! word. All structure downstream (incidence, degrees, adjacency, the
//! encoder wiring) keys off these orderings.

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, matmul, DenseMatrix};

/// Projected node features for one pair, kept per group.
#[derive(Debug, Clone)]
pub struct NodeSet {
    /// 1 x d summary of the whole video (mean of raw frame features, projected).
    pub video_global: DenseMatrix,
    /// m x d projected keyframe features.
    pub frames: DenseMatrix,
    /// n x d projected word features.
    pub words: DenseMatrix,
}

impl NodeSet {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_words(&self) -> usize {
        self.words.rows()
    }

    pub fn count(&self) -> usize {
        1 + self.frames.rows() + self.words.rows()
    }

    /// All node features stacked in canonical order: global, frames, words.
    pub fn stacked(&self) -> DenseMatrix {
        let d = self.video_global.cols();
        let mut data =
            Vec::with_capacity((1 + self.frames.rows() + self.words.rows()) * d);
        data.extend_from_slice(self.video_global.data());
        data.extend_from_slice(self.frames.data());
        data.extend_from_slice(self.words.data());
        DenseMatrix::from_vec(self.count(), d, data).expect("stacked nodes")
    }
}

/// Node index of the video-global node.
pub const GLOBAL_NODE: usize = 0;

pub fn frame_node(f: usize) -> usize {
    1 + f
}

pub fn word_node(m: usize, w: usize) -> usize {
    1 + m + w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperedgeKind {
    Global,
    IntraText,
    IntraVisual,
    /// Cross-modal edge anchored on word `w`.
    CrossModal(usize),
}

impl HyperedgeKind {
    /// Learnable-weight family slot: 0 global, 1 intra-text, 2 intra-visual,
    /// 3 cross-modal (shared across words).
    pub fn family(&self) -> usize {
        match self {
            HyperedgeKind::Global => 0,
            HyperedgeKind::IntraText => 1,
            HyperedgeKind::IntraVisual => 2,
            HyperedgeKind::CrossModal(_) => 3,
        }
    }
}

pub const NUM_EDGE_FAMILIES: usize = 4;

#[derive(Debug, Clone)]
pub struct Hyperedge {
    pub kind: HyperedgeKind,
    /// Member node indices, ascending, no duplicates.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct HyperedgeSet {
    pub edges: Vec<Hyperedge>,
}

impl HyperedgeSet {
    pub fn count(&self) -> usize {
        self.edges.len()
    }
}

/// A fully assembled pair hypergraph: features, structure, weights, degrees.
#[derive(Debug, Clone)]
pub struct Hypergraph {
    pub nodes: NodeSet,
    pub edges: HyperedgeSet,
    /// N x M binary incidence.
    pub incidence: DenseMatrix,
    /// Positive per-edge weights (length M).
    pub edge_weights: Vec<f64>,
    /// Weighted node degrees: D_d[i] = sum_j H[i][j] * w[j].
    pub node_degrees: Vec<f64>,
    /// Edge cardinalities: D_e[j] = sum_i H[i][j].
    pub edge_degrees: Vec<f64>,
}

/// The unit that gets scored: one text joined with one video.
pub type PairGraph = Hypergraph;

/// Greedy farthest-point keyframe selection under Euclidean distance.
///
/// Starts from frame 0; each step adds the frame maximizing the distance to
/// the closest already-selected frame, breaking ties toward the lowest
/// index. Returns `min(m, n_raw)` distinct indices in selection order.
pub fn select_keyframes(frames: &DenseMatrix, m: usize) -> Result<Vec<usize>> {
    let n_raw = frames.rows();
    if n_raw == 0 {
        return Err(Error::Empty("select_keyframes"));
    }
    if m == 0 {
        return Err(Error::InvalidArg("select_keyframes with m = 0".into()));
    }
    let take = m.min(n_raw);
    let mut selected = Vec::with_capacity(take);
    let mut min_dist = vec![f64::INFINITY; n_raw];
    let mut chosen = vec![false; n_raw];

    let dist = |a: usize, b: usize| -> f64 {
        frames
            .row(a)
            .iter()
            .zip(frames.row(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };

    selected.push(0);
    chosen[0] = true;
    while selected.len() < take {
        let last = *selected.last().expect("nonempty");
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n_raw {
            if chosen[i] {
                continue;
            }
            min_dist[i] = min_dist[i].min(dist(i, last));
            if min_dist[i] > best_d {
                best_d = min_dist[i];
                best = Some(i);
            }
        }
        let pick = best.expect("candidates remain");
        selected.push(pick);
        chosen[pick] = true;
    }
    Ok(selected)
}

/// Projects raw features into the shared d-dimensional node space.
///
/// `frame_feats` must already be keyframe-selected. The video-global node is
/// the column mean of the raw frame features, projected by `p_v`.
pub fn build_nodes(
    text_feats: &DenseMatrix,
    frame_feats: &DenseMatrix,
    p_t: &DenseMatrix,
    p_v: &DenseMatrix,
) -> Result<NodeSet> {
    if text_feats.rows() == 0 {
        return Err(Error::Empty("build_nodes text"));
    }
    if frame_feats.rows() == 0 {
        return Err(Error::Empty("build_nodes frames"));
    }
    if text_feats.cols() != p_t.rows() {
        return Err(Error::shape(
            "build_nodes",
            format!("text dim {} vs projection {}", text_feats.cols(), p_t.rows()),
        ));
    }
    if frame_feats.cols() != p_v.rows() {
        return Err(Error::shape(
            "build_nodes",
            format!("video dim {} vs projection {}", frame_feats.cols(), p_v.rows()),
        ));
    }
    if p_t.cols() != p_v.cols() {
        return Err(Error::shape(
            "build_nodes",
            format!("projection widths differ: {} vs {}", p_t.cols(), p_v.cols()),
        ));
    }
    let m = frame_feats.rows() as f64;
    let mut mean = DenseMatrix::zeros(1, frame_feats.cols());
    for i in 0..frame_feats.rows() {
        for j in 0..frame_feats.cols() {
            mean.set(0, j, mean.get(0, j) + frame_feats.get(i, j) / m);
        }
    }
    // Unit-norm node rows keep every downstream activation scale-free no
    // matter how wide or hot the raw features are.
    Ok(NodeSet {
        video_global: l2_normalize_rows(&matmul(&mean, p_v)?),
        frames: l2_normalize_rows(&matmul(frame_feats, p_v)?),
        words: l2_normalize_rows(&matmul(text_feats, p_t)?),
    })
}

/// The four-family hyperedge set for n words and m frames, in canonical
/// order: Global, IntraText, IntraVisual, CrossModal(0..n).
pub fn build_hyperedges(n: usize, m: usize) -> Result<HyperedgeSet> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidArg(format!(
            "build_hyperedges needs n, m >= 1 (got n={n}, m={m})"
        )));
    }
    let total = 1 + m + n;
    let mut edges = Vec::with_capacity(n + 3);
    edges.push(Hyperedge {
        kind: HyperedgeKind::Global,
        members: (0..total).collect(),
    });
    edges.push(Hyperedge {
        kind: HyperedgeKind::IntraText,
        members: (0..n).map(|w| word_node(m, w)).collect(),
    });
    let mut visual: Vec<usize> = vec![GLOBAL_NODE];
    visual.extend((0..m).map(frame_node));
    edges.push(Hyperedge {
        kind: HyperedgeKind::IntraVisual,
        members: visual.clone(),
    });
    for w in 0..n {
        let mut members = visual.clone();
        members.push(word_node(m, w));
        members.sort_unstable();
        edges.push(Hyperedge {
            kind: HyperedgeKind::CrossModal(w),
            members,
        });
    }
    Ok(HyperedgeSet { edges })
}

/// N x M binary incidence matrix from an edge set.
pub fn build_incidence(edges: &HyperedgeSet, num_nodes: usize) -> Result<DenseMatrix> {
    let mut h = DenseMatrix::zeros(num_nodes, edges.count());
    for (j, e) in edges.edges.iter().enumerate() {
        if e.members.is_empty() {
            return Err(Error::Empty("build_incidence edge"));
        }
        for w in e.members.windows(2) {
            if w[0] == w[1] {
                return Err(Error::InvalidArg(format!(
                    "duplicate member {} in edge {j}",
                    w[0]
                )));
            }
        }
        for &i in &e.members {
            if i >= num_nodes {
                return Err(Error::InvalidArg(format!(
                    "edge {j} references node {i} out of {num_nodes}"
                )));
            }
            h.set(i, j, 1.0);
        }
    }
    Ok(h)
}

/// Weighted node degrees and unweighted edge cardinalities.
pub fn degrees(incidence: &DenseMatrix, weights: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, m) = incidence.shape();
    if weights.len() != m {
        return Err(Error::shape(
            "degrees",
            format!("{} weights for {} edges", weights.len(), m),
        ));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0)) {
        return Err(Error::InvalidArg(format!("nonpositive edge weight {w}")));
    }
    let mut d_d = vec![0.0; n];
    let mut d_e = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let h = incidence.get(i, j);
            d_d[i] += h * weights[j];
            d_e[j] += h;
        }
    }
    Ok((d_d, d_e))
}

/// Symmetric normalized adjacency
/// `D_d^{-1/2} H W D_e^{-1/2} H^T D_d^{-1/2}`.
///
/// Positive weights and strictly positive degrees are required; with the
/// diagonal factors split evenly the product is a Gram matrix, hence
/// positive semidefinite.
pub fn normalized_adjacency(incidence: &DenseMatrix, weights: &[f64]) -> Result<DenseMatrix> {
    let (n, m) = incidence.shape();
    let (d_d, d_e) = degrees(incidence, weights)?;
    if let Some(i) = d_d.iter().position(|&d| d <= 0.0) {
        return Err(Error::InvalidArg(format!("node {i} has zero degree")));
    }
    if let Some(j) = d_e.iter().position(|&d| d <= 0.0) {
        return Err(Error::InvalidArg(format!("edge {j} has no members")));
    }
    // T = H (W De^{-1/2}) H^T, then conjugate by D_d^{-1/2}.
    let col_scale: Vec<f64> = (0..m).map(|j| weights[j] / d_e[j].sqrt()).collect();
    let mut t = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for k in 0..n {
            let mut s = 0.0;
            for j in 0..m {
                s += incidence.get(i, j) * col_scale[j] * incidence.get(k, j);
            }
            t.set(i, k, s);
        }
    }
    let inv_sqrt: Vec<f64> = d_d.iter().map(|d| 1.0 / d.sqrt()).collect();
    for i in 0..n {
        for k in 0..n {
            t.set(i, k, t.get(i, k) * inv_sqrt[i] * inv_sqrt[k]);
        }
    }
    Ok(t)
}

/// Materializes per-edge weights from the four family logits.
pub fn edge_weights_from_logits(edges: &HyperedgeSet, logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() != NUM_EDGE_FAMILIES {
        return Err(Error::shape(
            "edge_weights_from_logits",
            format!("{} logits, expected {NUM_EDGE_FAMILIES}", logits.len()),
        ));
    }
    Ok(edges
        .edges
        .iter()
        .map(|e| logits[e.kind.family()].exp())
        .collect())
}

/// Assembles the full pair graph for one (text, video) candidate.
///
/// `frame_feats` must already be keyframe-selected; `logits` are the four
/// family weight logits (weights = exp(logits), so zeros mean unit weights).
pub fn build_pair_graph(
    text_feats: &DenseMatrix,
    frame_feats: &DenseMatrix,
    p_t: &DenseMatrix,
    p_v: &DenseMatrix,
    logits: &[f64],
) -> Result<PairGraph> {
    let nodes = build_nodes(text_feats, frame_feats, p_t, p_v)?;
    let edges = build_hyperedges(nodes.num_words(), nodes.num_frames())?;
    let incidence = build_incidence(&edges, nodes.count())?;
    let edge_weights = edge_weights_from_logits(&edges, logits)?;
    let (node_degrees, edge_degrees) = degrees(&incidence, &edge_weights)?;
    Ok(Hypergraph {
        nodes,
        edges,
        incidence,
        edge_weights,
        node_degrees,
        edge_degrees,
    })
}
