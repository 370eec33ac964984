//! Attention-based hypergraph encoder.
//!
//! One layer runs, in order: node message passing, hyperedge state update,
//! attention scoring of incident (node, edge) pairs, attention-weighted node
//! update with a residual, and gated hyperedge aggregation. The layer ops
//! are recorded on the autodiff tape so training gets exact gradients; the
//! public functions here wrap the same tape code for plain (value-only) use.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::hypergraph::{Hyperedge, HyperedgeKind, HyperedgeSet, Hypergraph};
use crate::numerics::{DenseMatrix, LEAKY_SLOPE};

/// Bound on the gate exponent `-gamma * x` before `exp`, so adversarial
/// states cannot overflow to infinity. Inactive at training scale.
pub const GATE_CLAMP: f64 = 50.0;

/// Learnable tensors of one encoder layer plus the gate sharpness.
#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    /// d x d neighbor mixing.
    pub w_n: DenseMatrix,
    /// d x d self mixing.
    pub w_x: DenseMatrix,
    /// d x d global-edge transform.
    pub w_g: DenseMatrix,
    /// d x d intra-text transform.
    pub w_t: DenseMatrix,
    /// d x d intra-visual transform.
    pub w_v: DenseMatrix,
    /// 2d x d attention scorer, hidden layer.
    pub mlp_w1: DenseMatrix,
    /// 1 x d hidden bias.
    pub mlp_b1: DenseMatrix,
    /// d x 1 scorer output weights.
    pub mlp_w2: DenseMatrix,
    /// 1 x 1 scorer output bias.
    pub mlp_b2: DenseMatrix,
    /// d x d aggregation transform.
    pub w_r: DenseMatrix,
    /// Gate sharpness in exp(-gamma * x); positive, from config.
    pub gamma: f64,
}

impl EncoderLayerParams {
    /// Identity family transforms, zero mixing; handy for tests and the
    /// zero-layer edge-state rule.
    pub fn identity(d: usize, gamma: f64) -> Self {
        let mut eye = DenseMatrix::zeros(d, d);
        for i in 0..d {
            eye.set(i, i, 1.0);
        }
        EncoderLayerParams {
            w_n: DenseMatrix::zeros(d, d),
            w_x: eye.clone(),
            w_g: eye.clone(),
            w_t: eye.clone(),
            w_v: eye.clone(),
            mlp_w1: DenseMatrix::zeros(2 * d, d),
            mlp_b1: DenseMatrix::zeros(1, d),
            mlp_w2: DenseMatrix::zeros(d, 1),
            mlp_b2: DenseMatrix::zeros(1, 1),
            w_r: eye,
            gamma,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let checks: [(&str, (usize, usize), (usize, usize)); 10] = [
            ("w_n", self.w_n.shape(), (d, d)),
            ("w_x", self.w_x.shape(), (d, d)),
            ("w_g", self.w_g.shape(), (d, d)),
            ("w_t", self.w_t.shape(), (d, d)),
            ("w_v", self.w_v.shape(), (d, d)),
            ("mlp_w1", self.mlp_w1.shape(), (2 * d, d)),
            ("mlp_b1", self.mlp_b1.shape(), (1, d)),
            ("mlp_w2", self.mlp_w2.shape(), (d, 1)),
            ("mlp_b2", self.mlp_b2.shape(), (1, 1)),
            ("w_r", self.w_r.shape(), (d, d)),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::shape(
                    "encoder params",
                    format!("{name} is {got:?}, expected {want:?}"),
                ));
            }
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidArg(format!("gamma must be > 0, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Node and edge states flowing through the encoder.
#[derive(Debug, Clone)]
pub struct GraphState {
    /// N x d.
    pub node_states: DenseMatrix,
    /// M x d.
    pub edge_states: DenseMatrix,
}

impl GraphState {
    /// Initial state: projected node features, zero edge states.
    pub fn from_graph(graph: &Hypergraph) -> GraphState {
        let nodes = graph.nodes.stacked();
        let d = nodes.cols();
        GraphState {
            node_states: nodes,
            edge_states: DenseMatrix::zeros(graph.edges.count(), d),
        }
    }
}

/// Structure-derived constants of one hypergraph shape, shared by every
/// pair with the same (n, m). Everything here is a plain value; tapes get
/// them as constant leaves via [`GraphWiring::constants`].
#[derive(Debug)]
pub struct GraphWiring {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub n_words: usize,
    pub n_frames: usize,
    /// N x M binary incidence.
    pub incidence: DenseMatrix,
    /// N x N: 1 where two distinct nodes share at least one edge.
    nbr_mask: DenseMatrix,
    /// M x N: row j averages the members of edge j.
    mean_sel: DenseMatrix,
    /// M x N: binary membership (incidence transposed).
    member_sel: DenseMatrix,
    /// (node, edge) incident pairs, ordered by node then edge.
    pair_node: Rc<Vec<usize>>,
    pair_edge: Rc<Vec<usize>>,
    /// N x P: scatters per-pair rows back onto their node.
    scatter_node: DenseMatrix,
    /// N x 1: 1 / (number of incident edges), 0 for isolated nodes.
    z_recip: DenseMatrix,
    /// Per cross-modal edge: averaging rows over its text / visual members.
    cross_sel: Vec<Option<(DenseMatrix, DenseMatrix)>>,
    pub families: Vec<HyperedgeKind>,
    /// M x 4 one-hot family selector.
    fam_sel: DenseMatrix,
    /// M x 1 of 1/sqrt(|e_j|).
    de_isqrt: DenseMatrix,
}

impl GraphWiring {
    pub fn new(edges: &HyperedgeSet, n_words: usize, n_frames: usize) -> Result<Self> {
        let n_nodes = 1 + n_words + n_frames;
        let m = edges.count();
        if m == 0 {
            return Err(Error::Empty("wiring edges"));
        }
        let incidence = crate::hypergraph::build_incidence(edges, n_nodes)?;

        let mut nbr_mask = DenseMatrix::zeros(n_nodes, n_nodes);
        for e in &edges.edges {
            for &a in &e.members {
                for &b in &e.members {
                    if a != b {
                        nbr_mask.set(a, b, 1.0);
                    }
                }
            }
        }

        let mut mean_sel = DenseMatrix::zeros(m, n_nodes);
        let mut member_sel = DenseMatrix::zeros(m, n_nodes);
        let mut de_isqrt = DenseMatrix::zeros(m, 1);
        for (j, e) in edges.edges.iter().enumerate() {
            let card = e.members.len() as f64;
            de_isqrt.set(j, 0, 1.0 / card.sqrt());
            for &i in &e.members {
                member_sel.set(j, i, 1.0);
                mean_sel.set(j, i, 1.0 / card);
            }
        }

        let mut pair_node = Vec::new();
        let mut pair_edge = Vec::new();
        for i in 0..n_nodes {
            for j in 0..m {
                if incidence.get(i, j) > 0.0 {
                    pair_node.push(i);
                    pair_edge.push(j);
                }
            }
        }
        let mut scatter_node = DenseMatrix::zeros(n_nodes, pair_node.len());
        for (p, &i) in pair_node.iter().enumerate() {
            scatter_node.set(i, p, 1.0);
        }
        let mut z_recip = DenseMatrix::zeros(n_nodes, 1);
        for i in 0..n_nodes {
            let count: f64 = (0..m).map(|j| incidence.get(i, j)).sum();
            if count > 0.0 {
                z_recip.set(i, 0, 1.0 / count);
            }
        }

        let is_text = |i: usize| i >= 1 + n_frames;
        let mut cross_sel = Vec::with_capacity(m);
        for e in &edges.edges {
            match e.kind {
                HyperedgeKind::CrossModal(_) => {
                    let text: Vec<usize> = e.members.iter().copied().filter(|&i| is_text(i)).collect();
                    let vis: Vec<usize> = e.members.iter().copied().filter(|&i| !is_text(i)).collect();
                    if text.is_empty() || vis.is_empty() {
                        return Err(Error::InvalidArg(
                            "cross-modal edge must contain both text and visual members".into(),
                        ));
                    }
                    let mut trow = DenseMatrix::zeros(1, n_nodes);
                    for &i in &text {
                        trow.set(0, i, 1.0 / text.len() as f64);
                    }
                    let mut vrow = DenseMatrix::zeros(1, n_nodes);
                    for &i in &vis {
                        vrow.set(0, i, 1.0 / vis.len() as f64);
                    }
                    cross_sel.push(Some((trow, vrow)));
                }
                _ => cross_sel.push(None),
            }
        }

        let families: Vec<HyperedgeKind> = edges.edges.iter().map(|e| e.kind).collect();
        let mut fam_sel = DenseMatrix::zeros(m, crate::hypergraph::NUM_EDGE_FAMILIES);
        for (j, k) in families.iter().enumerate() {
            fam_sel.set(j, k.family(), 1.0);
        }

        Ok(GraphWiring {
            n_nodes,
            n_edges: m,
            n_words,
            n_frames,
            incidence,
            nbr_mask,
            mean_sel,
            member_sel,
            pair_node: Rc::new(pair_node),
            pair_edge: Rc::new(pair_edge),
            scatter_node,
            z_recip,
            cross_sel,
            families,
            fam_sel,
            de_isqrt,
        })
    }

    pub fn from_graph(graph: &Hypergraph) -> Result<Self> {
        GraphWiring::new(&graph.edges, graph.nodes.num_words(), graph.nodes.num_frames())
    }

    /// Registers the wiring as constant tape leaves.
    pub fn constants(&self, t: &mut Tape) -> WiringVars {
        WiringVars {
            incidence: t.constant(self.incidence.clone()),
            nbr_mask: t.constant(self.nbr_mask.clone()),
            mean_sel: t.constant(self.mean_sel.clone()),
            member_sel: t.constant(self.member_sel.clone()),
            scatter_node: t.constant(self.scatter_node.clone()),
            z_recip: t.constant(self.z_recip.clone()),
            fam_sel: t.constant(self.fam_sel.clone()),
            de_isqrt: t.constant(self.de_isqrt.clone()),
            cross_sel: self
                .cross_sel
                .iter()
                .map(|cs| cs.as_ref().map(|(tr, vr)| (t.constant(tr.clone()), t.constant(vr.clone()))))
                .collect(),
        }
    }
}

/// Tape handles of one wiring's constants.
pub struct WiringVars {
    pub incidence: Var,
    pub nbr_mask: Var,
    pub mean_sel: Var,
    pub member_sel: Var,
    pub scatter_node: Var,
    pub z_recip: Var,
    pub fam_sel: Var,
    pub de_isqrt: Var,
    cross_sel: Vec<Option<(Var, Var)>>,
}

/// Tape handles of one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub w_n: Var,
    pub w_x: Var,
    pub w_g: Var,
    pub w_t: Var,
    pub w_v: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub w_r: Var,
    pub gamma: f64,
}

impl LayerVars {
    /// Registers plain layer params as constants (value-only evaluation).
    pub fn constants(t: &mut Tape, p: &EncoderLayerParams) -> LayerVars {
        LayerVars {
            w_n: t.constant(p.w_n.clone()),
            w_x: t.constant(p.w_x.clone()),
            w_g: t.constant(p.w_g.clone()),
            w_t: t.constant(p.w_t.clone()),
            w_v: t.constant(p.w_v.clone()),
            mlp_w1: t.constant(p.mlp_w1.clone()),
            mlp_b1: t.constant(p.mlp_b1.clone()),
            mlp_w2: t.constant(p.mlp_w2.clone()),
            mlp_b2: t.constant(p.mlp_b2.clone()),
            w_r: t.constant(p.w_r.clone()),
            gamma: p.gamma,
        }
    }
}

/// x_i <- relu( sum_{j in N(i)} (x_j / D_d[j]) W_N + x_i W_x )
pub fn node_message_pass_t(
    t: &mut Tape,
    x: Var,
    w: &WiringVars,
    dd_inv: Var,
    lp: &LayerVars,
) -> Var {
    let xs = t.scale_rows(x, dd_inv);
    let nbr = t.matmul(w.nbr_mask, xs);
    let a = t.matmul(nbr, lp.w_n);
    let b = t.matmul(x, lp.w_x);
    let s = t.add(a, b);
    t.relu(s)
}

/// Family edge states from current node states: LeakyReLU(mean * W_family)
/// for global/intra edges; similarity-scaled normalized means for
/// cross-modal edges.
pub fn hyperedge_update_t(
    t: &mut Tape,
    x: Var,
    w: &WiringVars,
    wiring: &GraphWiring,
    lp: &LayerVars,
) -> Var {
    let means = t.matmul(w.mean_sel, x);
    let mut rows = Vec::with_capacity(wiring.n_edges);
    for (j, kind) in wiring.families.iter().enumerate() {
        let mean_j = t.gather_rows(means, Rc::new(vec![j]));
        let row = match kind {
            HyperedgeKind::Global | HyperedgeKind::IntraText | HyperedgeKind::IntraVisual => {
                let wfam = match kind {
                    HyperedgeKind::Global => lp.w_g,
                    HyperedgeKind::IntraText => lp.w_t,
                    _ => lp.w_v,
                };
                let m = t.matmul(mean_j, wfam);
                t.leaky_relu(m, LEAKY_SLOPE)
            }
            HyperedgeKind::CrossModal(_) => {
                let (tsel, vsel) = w.cross_sel[j].expect("cross selector present");
                let xt = t.matmul(tsel, x);
                let xv = t.matmul(vsel, x);
                let s = t.row_dot(xt, xv);
                let scaled = t.scale_rows(mean_j, s);
                t.l2_normalize_rows(scaled)
            }
        };
        rows.push(row);
    }
    t.concat_rows(&rows)
}

/// Per incident (node, edge) pair: score = mlp([x_i ; e_k]), softmax over
/// each node's incident edges. Returns a P x 1 column aligned with the
/// wiring's pair order.
pub fn attention_weights_t(
    t: &mut Tape,
    x: Var,
    e: Var,
    wiring: &GraphWiring,
    lp: &LayerVars,
) -> Var {
    let xi = t.gather_rows(x, wiring.pair_node.clone());
    let ek = t.gather_rows(e, wiring.pair_edge.clone());
    let c = t.concat_cols(xi, ek);
    let h = t.matmul(c, lp.mlp_w1);
    let hb = t.add_row_broadcast(h, lp.mlp_b1);
    let ha = t.relu(hb);
    let s = t.matmul(ha, lp.mlp_w2);
    let sb = t.add_row_broadcast(s, lp.mlp_b2);
    t.segment_softmax(sb, wiring.pair_node.clone())
}

/// x_i <- (1/Z_i) sum_k alpha_{i,k} e_k + x_i  (residual outside the
/// normalization; Z_i = number of incident edges).
pub fn attention_node_update_t(
    t: &mut Tape,
    x: Var,
    e: Var,
    alpha: Var,
    w: &WiringVars,
    wiring: &GraphWiring,
) -> Var {
    let ek = t.gather_rows(e, wiring.pair_edge.clone());
    let weighted = t.scale_rows(ek, alpha);
    let agg = t.matmul(w.scatter_node, weighted);
    let scaled = t.scale_rows(agg, w.z_recip);
    t.add(scaled, x)
}

/// e_j <- relu( sum_{k in e_j} (x_k (.) exp(-gamma x_k) / D_d[k]) W_r )
pub fn hyperedge_aggregate_t(
    t: &mut Tape,
    x: Var,
    w: &WiringVars,
    dd_inv: Var,
    lp: &LayerVars,
) -> Var {
    let neg = t.scale_const(x, -lp.gamma);
    let clamped = t.clamp(neg, -GATE_CLAMP, GATE_CLAMP);
    let gate = t.exp(clamped);
    let gx = t.hadamard(x, gate);
    let gs = t.scale_rows(gx, dd_inv);
    let summed = t.matmul(w.member_sel, gs);
    let m = t.matmul(summed, lp.w_r);
    t.relu(m)
}

/// Full encoder: `layers[..l]` applied in order. Returns final node states,
/// final edge states, and one attention column per layer.
///
/// With `l == 0` the node states are the projected inputs and the edge
/// states are the family transforms of those inputs with identity weights.
pub fn encode_t(
    t: &mut Tape,
    x0: Var,
    w: &WiringVars,
    wiring: &GraphWiring,
    dd_inv: Var,
    layers: &[LayerVars],
) -> (Var, Var, Vec<Var>) {
    if layers.is_empty() {
        let d = t.value(x0).cols();
        let identity = EncoderLayerParams::identity(d, 1.0);
        let lp = LayerVars::constants(t, &identity);
        let e = hyperedge_update_t(t, x0, w, wiring, &lp);
        return (x0, e, Vec::new());
    }
    let mut x = x0;
    let mut e = x0; // overwritten in the first iteration
    let mut attns = Vec::with_capacity(layers.len());
    for lp in layers {
        x = node_message_pass_t(t, x, w, dd_inv, lp);
        e = hyperedge_update_t(t, x, w, wiring, lp);
        let alpha = attention_weights_t(t, x, e, wiring, lp);
        attns.push(alpha);
        x = attention_node_update_t(t, x, e, alpha, w, wiring);
        e = hyperedge_aggregate_t(t, x, w, dd_inv, lp);
    }
    (x, e, attns)
}

// ---------------------------------------------------------------------------
// Plain (value-only) wrappers over the tape implementations.

struct PlainCtx {
    tape: Tape,
    wiring: GraphWiring,
    consts: WiringVars,
    dd_inv: Var,
}

fn plain_ctx(graph: &Hypergraph) -> Result<PlainCtx> {
    let wiring = GraphWiring::from_graph(graph)?;
    let mut tape = Tape::new();
    let consts = wiring.constants(&mut tape);
    let n = graph.node_degrees.len();
    if let Some(i) = graph.node_degrees.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::InvalidArg(format!("node {i} has nonpositive degree")));
    }
    let dd = t_column(&mut tape, &graph.node_degrees, n);
    let dd_inv = tape.powf(dd, -1.0);
    Ok(PlainCtx {
        tape,
        wiring,
        consts,
        dd_inv,
    })
}

fn t_column(t: &mut Tape, values: &[f64], n: usize) -> Var {
    let m = DenseMatrix::from_vec(n, 1, values.to_vec()).expect("column");
    t.constant(m)
}

fn check_state(state: &GraphState, graph: &Hypergraph, d: usize) -> Result<()> {
    let n = graph.nodes.count();
    let m = graph.edges.count();
    if state.node_states.shape() != (n, d) {
        return Err(Error::shape(
            "graph state",
            format!("node states {:?}, expected {:?}", state.node_states.shape(), (n, d)),
        ));
    }
    if state.edge_states.shape() != (m, d) {
        return Err(Error::shape(
            "graph state",
            format!("edge states {:?}, expected {:?}", state.edge_states.shape(), (m, d)),
        ));
    }
    Ok(())
}

/// One message-passing step over the node states.
pub fn node_message_pass(
    state: &GraphState,
    graph: &Hypergraph,
    params: &EncoderLayerParams,
) -> Result<DenseMatrix> {
    let d = state.node_states.cols();
    params.validate(d)?;
    check_state(state, graph, d)?;
    let mut ctx = plain_ctx(graph)?;
    let x = ctx.tape.constant(state.node_states.clone());
    let lp = LayerVars::constants(&mut ctx.tape, params);
    let out = node_message_pass_t(&mut ctx.tape, x, &ctx.consts, ctx.dd_inv, &lp);
    Ok(ctx.tape.value(out).clone())
}

/// Recomputes every hyperedge state from the current node states.
pub fn hyperedge_update(
    state: &GraphState,
    graph: &Hypergraph,
    params: &EncoderLayerParams,
) -> Result<DenseMatrix> {
    let d = state.node_states.cols();
    params.validate(d)?;
    check_state(state, graph, d)?;
    let mut ctx = plain_ctx(graph)?;
    let x = ctx.tape.constant(state.node_states.clone());
    let lp = LayerVars::constants(&mut ctx.tape, params);
    let out = hyperedge_update_t(&mut ctx.tape, x, &ctx.consts, &ctx.wiring, &lp);
    Ok(ctx.tape.value(out).clone())
}

/// Attention over incident (node, edge) pairs as a dense N x M matrix;
/// non-incident entries are zero and each node's incident row sums to 1.
pub fn attention_weights(
    state: &GraphState,
    graph: &Hypergraph,
    params: &EncoderLayerParams,
) -> Result<DenseMatrix> {
    let d = state.node_states.cols();
    params.validate(d)?;
    check_state(state, graph, d)?;
    let mut ctx = plain_ctx(graph)?;
    let x = ctx.tape.constant(state.node_states.clone());
    let e = ctx.tape.constant(state.edge_states.clone());
    let lp = LayerVars::constants(&mut ctx.tape, params);
    let alpha = attention_weights_t(&mut ctx.tape, x, e, &ctx.wiring, &lp);
    Ok(densify_attention(
        ctx.tape.value(alpha),
        &ctx.wiring,
    ))
}

fn densify_attention(alpha: &DenseMatrix, wiring: &GraphWiring) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(wiring.n_nodes, wiring.n_edges);
    for p in 0..alpha.rows() {
        out.set(wiring.pair_node[p], wiring.pair_edge[p], alpha.get(p, 0));
    }
    out
}

/// Attention-weighted edge mixture added residually onto the node states.
/// `attention` is the dense N x M matrix produced by [`attention_weights`].
pub fn attention_node_update(
    state: &GraphState,
    graph: &Hypergraph,
    attention: &DenseMatrix,
) -> Result<DenseMatrix> {
    let d = state.node_states.cols();
    check_state(state, graph, d)?;
    let (n, m) = (graph.nodes.count(), graph.edges.count());
    if attention.shape() != (n, m) {
        return Err(Error::shape(
            "attention_node_update",
            format!("attention {:?}, expected {:?}", attention.shape(), (n, m)),
        ));
    }
    let mut ctx = plain_ctx(graph)?;
    let x = ctx.tape.constant(state.node_states.clone());
    let e = ctx.tape.constant(state.edge_states.clone());
    // Re-sparsify onto the wiring's pair order.
    let mut alpha = DenseMatrix::zeros(ctx.wiring.pair_node.len(), 1);
    for p in 0..ctx.wiring.pair_node.len() {
        alpha.set(p, 0, attention.get(ctx.wiring.pair_node[p], ctx.wiring.pair_edge[p]));
    }
    let av = ctx.tape.constant(alpha);
    let out = attention_node_update_t(&mut ctx.tape, x, e, av, &ctx.consts, &ctx.wiring);
    Ok(ctx.tape.value(out).clone())
}

/// Gated aggregation of node states back onto their hyperedges.
pub fn hyperedge_aggregate(
    state: &GraphState,
    graph: &Hypergraph,
    params: &EncoderLayerParams,
) -> Result<DenseMatrix> {
    let d = state.node_states.cols();
    params.validate(d)?;
    check_state(state, graph, d)?;
    let mut ctx = plain_ctx(graph)?;
    let x = ctx.tape.constant(state.node_states.clone());
    let lp = LayerVars::constants(&mut ctx.tape, params);
    let out = hyperedge_aggregate_t(&mut ctx.tape, x, &ctx.consts, ctx.dd_inv, &lp);
    Ok(ctx.tape.value(out).clone())
}

/// Runs the first `l` layers over the graph's projected features.
pub fn encode(graph: &Hypergraph, layers: &[EncoderLayerParams], l: usize) -> Result<GraphState> {
    Ok(encode_with_attention(graph, layers, l)?.0)
}

/// Like [`encode`] but also returns each layer's dense attention matrix.
pub fn encode_with_attention(
    graph: &Hypergraph,
    layers: &[EncoderLayerParams],
    l: usize,
) -> Result<(GraphState, Vec<DenseMatrix>)> {
    if l > layers.len() {
        return Err(Error::InvalidArg(format!(
            "encode with l={l} but only {} layers",
            layers.len()
        )));
    }
    let d = graph.nodes.video_global.cols();
    for p in &layers[..l] {
        p.validate(d)?;
    }
    let mut ctx = plain_ctx(graph)?;
    let x0 = ctx.tape.constant(graph.nodes.stacked());
    let lvars: Vec<LayerVars> = layers[..l]
        .iter()
        .map(|p| LayerVars::constants(&mut ctx.tape, p))
        .collect();
    let (x, e, attns) = encode_t(&mut ctx.tape, x0, &ctx.consts, &ctx.wiring, ctx.dd_inv, &lvars);
    let state = GraphState {
        node_states: ctx.tape.value(x).clone(),
        edge_states: ctx.tape.value(e).clone(),
    };
    let dense: Vec<DenseMatrix> = attns
        .iter()
        .map(|&a| densify_attention(ctx.tape.value(a), &ctx.wiring))
        .collect();
    Ok((state, dense))
}

/// Builds a custom graph for tests and the layer-op contracts: explicit
/// node groups, edges and weights, with degrees derived on the spot.
pub fn assemble_graph(
    nodes: crate::hypergraph::NodeSet,
    edges: Vec<Hyperedge>,
    weights: Vec<f64>,
) -> Result<Hypergraph> {
    let edges = HyperedgeSet { edges };
    let incidence = crate::hypergraph::build_incidence(&edges, nodes.count())?;
    let (node_degrees, edge_degrees) = crate::hypergraph::degrees(&incidence, &weights)?;
    Ok(Hypergraph {
        nodes,
        edges,
        incidence,
        edge_weights: weights,
        node_degrees,
        edge_degrees,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::{build_pair_graph, NodeSet};
    use crate::numerics::{finite_diff_grad, gaussian_sample, rel_err, SeededRng};

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DenseMatrix {
        DenseMatrix::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    /// Two visual nodes joined by one global edge, d = 1.
    fn two_node_graph(x0: f64, x1: f64) -> Hypergraph {
        let nodes = NodeSet {
            video_global: mat(1, 1, &[x0]),
            frames: mat(1, 1, &[x1]),
            words: DenseMatrix::zeros(0, 1),
        };
        assemble_graph(
            nodes,
            vec![Hyperedge {
                kind: HyperedgeKind::Global,
                members: vec![0, 1],
            }],
            vec![1.0],
        )
        .unwrap()
    }

    fn random_params(d: usize, gamma: f64, rng: &mut SeededRng) -> EncoderLayerParams {
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = |r: usize, c: usize| {
            let mut m = DenseMatrix::zeros(r, c);
            for v in m.data_mut() {
                *v = rng.uniform(-bound, bound);
            }
            m
        };
        EncoderLayerParams {
            w_n: draw(d, d),
            w_x: draw(d, d),
            w_g: draw(d, d),
            w_t: draw(d, d),
            w_v: draw(d, d),
            mlp_w1: draw(2 * d, d),
            mlp_b1: draw(1, d),
            mlp_w2: draw(d, 1),
            mlp_b2: draw(1, 1),
            w_r: draw(d, d),
            gamma,
        }
    }

    #[test]
    fn message_pass_two_node_hand_value() {
        // x = [1, 2], W_N = W_x = [1], degrees [1, 1]:
        // each node receives the other over the shared edge.
        let graph = two_node_graph(1.0, 2.0);
        let state = GraphState::from_graph(&graph);
        let mut params = EncoderLayerParams::identity(1, 1.0);
        params.w_n = mat(1, 1, &[1.0]);
        let out = node_message_pass(&state, &graph, &params).unwrap();
        assert_eq!(out.data(), &[3.0, 3.0]);
    }

    #[test]
    fn message_pass_applies_relu() {
        let graph = two_node_graph(-5.0, 2.0);
        let state = GraphState::from_graph(&graph);
        let mut params = EncoderLayerParams::identity(1, 1.0);
        params.w_n = mat(1, 1, &[1.0]);
        // node 0: relu(2 + -5) = 0; node 1: relu(-5 + 2) = 0.
        let out = node_message_pass(&state, &graph, &params).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hyperedge_update_family_means() {
        let graph = two_node_graph(2.0, 4.0);
        let state = GraphState::from_graph(&graph);
        let params = EncoderLayerParams::identity(1, 1.0);
        let e = hyperedge_update(&state, &graph, &params).unwrap();
        assert_eq!(e.data(), &[3.0]);

        let neg = two_node_graph(-2.0, -4.0);
        let state = GraphState::from_graph(&neg);
        let e = hyperedge_update(&state, &neg, &params).unwrap();
        assert!((e.get(0, 0) - (-0.03)).abs() < 1e-12);
    }

    #[test]
    fn hyperedge_update_cross_modal_normalizes() {
        // n = 1 word, m = 1 frame; states [global, frame, word] = [0.5, 0.5, 2]:
        // cross edge: text mean 2, visual mean 0.5, dot = 1, member mean = 1,
        // normalized -> 1. Families with identity weights keep their means.
        let nodes = NodeSet {
            video_global: mat(1, 1, &[0.5]),
            frames: mat(1, 1, &[0.5]),
            words: mat(1, 1, &[2.0]),
        };
        let edges = crate::hypergraph::build_hyperedges(1, 1).unwrap().edges;
        let graph = assemble_graph(nodes, edges, vec![1.0; 4]).unwrap();
        let state = GraphState::from_graph(&graph);
        let params = EncoderLayerParams::identity(1, 1.0);
        let e = hyperedge_update(&state, &graph, &params).unwrap();
        // Order: Global, IntraText, IntraVisual, CrossModal(0).
        assert!((e.get(0, 0) - 1.0).abs() < 1e-12);
        assert!((e.get(1, 0) - 2.0).abs() < 1e-12);
        assert!((e.get(2, 0) - 0.5).abs() < 1e-12);
        assert!((e.get(3, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hyperedge_update_rejects_single_modality_cross_edge() {
        let nodes = NodeSet {
            video_global: mat(1, 1, &[0.5]),
            frames: mat(1, 1, &[0.5]),
            words: mat(1, 1, &[2.0]),
        };
        let edges = vec![Hyperedge {
            kind: HyperedgeKind::CrossModal(0),
            members: vec![0, 1], // visual only
        }];
        let graph = assemble_graph(nodes, edges, vec![1.0]).unwrap();
        let state = GraphState::from_graph(&graph);
        let params = EncoderLayerParams::identity(1, 1.0);
        assert!(hyperedge_update(&state, &graph, &params).is_err());
    }

    /// Two nodes sharing two edges so each node attends over two edges.
    fn two_edge_graph() -> Hypergraph {
        let nodes = NodeSet {
            video_global: mat(1, 1, &[1.0]),
            frames: mat(1, 1, &[1.0]),
            words: DenseMatrix::zeros(0, 1),
        };
        assemble_graph(
            nodes,
            vec![
                Hyperedge {
                    kind: HyperedgeKind::Global,
                    members: vec![0, 1],
                },
                Hyperedge {
                    kind: HyperedgeKind::IntraVisual,
                    members: vec![0, 1],
                },
            ],
            vec![1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn attention_softmax_hand_value() {
        // Scorer reads only the edge state and scales it by ln 2, so edge
        // states (1, 0) give scores (ln 2, 0) -> alpha (2/3, 1/3).
        let graph = two_edge_graph();
        let mut state = GraphState::from_graph(&graph);
        state.edge_states = mat(2, 1, &[1.0, 0.0]);
        let mut params = EncoderLayerParams::identity(1, 1.0);
        params.mlp_w1 = mat(2, 1, &[0.0, 1.0]);
        params.mlp_w2 = mat(1, 1, &[2.0f64.ln()]);
        let alpha = attention_weights(&state, &graph, &params).unwrap();
        for i in 0..2 {
            assert!((alpha.get(i, 0) - 2.0 / 3.0).abs() < 1e-12);
            assert!((alpha.get(i, 1) - 1.0 / 3.0).abs() < 1e-12);
            let row_sum: f64 = (0..2).map(|j| alpha.get(i, j)).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_node_update_hand_value() {
        // x = 1, edges (2, 4), alpha = (1/2, 1/2), Z = 2 -> 0.5*3 + 1 = 2.5.
        let graph = two_edge_graph();
        let mut state = GraphState::from_graph(&graph);
        state.edge_states = mat(2, 1, &[2.0, 4.0]);
        let alpha = mat(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let out = attention_node_update(&state, &graph, &alpha).unwrap();
        assert_eq!(out.data(), &[2.5, 2.5]);
    }

    #[test]
    fn hyperedge_aggregate_hand_value() {
        // Single node x = ln 2, degree 1, gamma = 1, W_r = 1:
        // relu(ln2 * exp(-ln2) / 1) = ln2 / 2.
        let nodes = NodeSet {
            video_global: mat(1, 1, &[2.0f64.ln()]),
            frames: DenseMatrix::zeros(0, 1),
            words: DenseMatrix::zeros(0, 1),
        };
        let graph = assemble_graph(
            nodes,
            vec![Hyperedge {
                kind: HyperedgeKind::Global,
                members: vec![0],
            }],
            vec![1.0],
        )
        .unwrap();
        let state = GraphState::from_graph(&graph);
        let params = EncoderLayerParams::identity(1, 1.0);
        let e = hyperedge_aggregate(&state, &graph, &params).unwrap();
        assert!((e.get(0, 0) - 0.34657359027997264).abs() < 1e-12);
    }

    fn random_pair_graph(
        n: usize,
        m: usize,
        d: usize,
        rng: &mut SeededRng,
    ) -> Hypergraph {
        let text = gaussian_sample(rng, n, 2 * d).unwrap();
        let frames = gaussian_sample(rng, m, 3 * d).unwrap();
        let p_t = gaussian_sample(rng, 2 * d, d).unwrap().scale(0.4);
        let p_v = gaussian_sample(rng, 3 * d, d).unwrap().scale(0.4);
        let logits: Vec<f64> = (0..4).map(|_| rng.uniform(-0.5, 0.5)).collect();
        build_pair_graph(&text, &frames, &p_t, &p_v, &logits).unwrap()
    }

    #[test]
    fn zero_layer_encode_returns_inputs_and_identity_family_states() {
        let mut rng = SeededRng::new(21);
        let graph = random_pair_graph(2, 3, 4, &mut rng);
        let state = encode(&graph, &[], 0).unwrap();
        assert_eq!(state.node_states.data(), graph.nodes.stacked().data());
        let identity = EncoderLayerParams::identity(4, 1.0);
        let expect =
            hyperedge_update(&GraphState::from_graph(&graph), &graph, &identity).unwrap();
        assert!(state.edge_states.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn encode_attention_rows_sum_to_one_every_layer() {
        let mut rng = SeededRng::new(22);
        for trial in 0..5 {
            let n = 1 + trial % 4;
            let m = 1 + (trial + 2) % 4;
            let graph = random_pair_graph(n, m, 5, &mut rng);
            let layers: Vec<EncoderLayerParams> =
                (0..2).map(|_| random_params(5, 1.0, &mut rng)).collect();
            let (_, attns) = encode_with_attention(&graph, &layers, 2).unwrap();
            assert_eq!(attns.len(), 2);
            for a in &attns {
                for i in 0..a.rows() {
                    let sum: f64 = (0..a.cols()).map(|j| a.get(i, j)).sum();
                    assert!((sum - 1.0).abs() < 1e-9, "row {i} sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn residual_identity_fixed_point() {
        // W_N = 0, W_x = I and zero edge states leave nonnegative node
        // states untouched by message pass + attention update.
        let mut rng = SeededRng::new(23);
        let graph = random_pair_graph(2, 2, 3, &mut rng);
        let mut state = GraphState::from_graph(&graph);
        // Force nonnegative inputs.
        state.node_states = state.node_states.map(f64::abs);
        state.edge_states = DenseMatrix::zeros(graph.edges.count(), 3);
        let params = EncoderLayerParams::identity(3, 1.0);

        let x1 = node_message_pass(&state, &graph, &params).unwrap();
        assert!(x1.max_abs_diff(&state.node_states) < 1e-15);
        let mid = GraphState {
            node_states: x1.clone(),
            edge_states: state.edge_states.clone(),
        };
        let alpha = attention_weights(&mid, &graph, &params).unwrap();
        let x2 = attention_node_update(&mid, &graph, &alpha).unwrap();
        assert!(x2.max_abs_diff(&state.node_states) < 1e-15);
    }

    #[test]
    fn encode_is_word_permutation_equivariant() {
        let d = 4;
        let mut rng = SeededRng::new(24);
        let n = 4;
        let m = 3;
        let text = gaussian_sample(&mut rng, n, 2 * d).unwrap();
        let frames = gaussian_sample(&mut rng, m, 3 * d).unwrap();
        let p_t = gaussian_sample(&mut rng, 2 * d, d).unwrap().scale(0.4);
        let p_v = gaussian_sample(&mut rng, 3 * d, d).unwrap().scale(0.4);
        let logits = [0.2, -0.1, 0.3, 0.05];
        let layers: Vec<EncoderLayerParams> =
            (0..2).map(|_| random_params(d, 1.0, &mut rng)).collect();

        let base = build_pair_graph(&text, &frames, &p_t, &p_v, &logits).unwrap();
        let out_base = encode(&base, &layers, 2).unwrap();

        // Rotate word order by one.
        let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for &src in &perm {
            rows.push(text.row(src).to_vec());
        }
        let text_p = DenseMatrix::from_rows(&rows).unwrap();
        let permuted = build_pair_graph(&text_p, &frames, &p_t, &p_v, &logits).unwrap();
        let out_perm = encode(&permuted, &layers, 2).unwrap();

        // Non-word nodes unchanged, word nodes permuted the same way.
        for i in 0..=m {
            for j in 0..d {
                let a = out_base.node_states.get(i, j);
                let b = out_perm.node_states.get(i, j);
                assert!((a - b).abs() < 1e-9, "node {i} dim {j}: {a} vs {b}");
            }
        }
        for w in 0..n {
            for j in 0..d {
                let a = out_base.node_states.get(1 + m + perm[w], j);
                let b = out_perm.node_states.get(1 + m + w, j);
                assert!((a - b).abs() < 1e-9, "word {w} dim {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn encode_stays_finite_with_large_entries() {
        // Inputs and parameters up to |10|: the gate clamp keeps everything
        // finite even in adversarial regimes.
        let mut rng = SeededRng::new(25);
        for _ in 0..5 {
            let d = 3;
            let n = 2;
            let m = 2;
            let big = |r: usize, c: usize, rng: &mut SeededRng| {
                let mut mm = DenseMatrix::zeros(r, c);
                for v in mm.data_mut() {
                    *v = rng.uniform(-10.0, 10.0);
                }
                mm
            };
            let text = big(n, d, &mut rng);
            let frames = big(m, d, &mut rng);
            let p_t = big(d, d, &mut rng);
            let p_v = big(d, d, &mut rng);
            let graph = build_pair_graph(&text, &frames, &p_t, &p_v, &[1.0; 4]).unwrap();
            let mut params = random_params(d, 1.0, &mut rng);
            for w in [
                &mut params.w_n,
                &mut params.w_x,
                &mut params.w_g,
                &mut params.w_t,
                &mut params.w_v,
                &mut params.w_r,
            ] {
                *w = big(d, d, &mut rng);
            }
            let layers = vec![params.clone(), params];
            let state = encode(&graph, &layers, 2).unwrap();
            assert!(state.node_states.is_finite());
            assert!(state.edge_states.is_finite());
        }
    }

    #[test]
    fn encoder_tape_gradients_match_finite_differences() {
        // End-to-end over one graph: all layer tensors and the family
        // logits as leaves, scalar = weighted sum of final node states.
        let d = 3;
        let n = 2;
        let m = 2;
        let mut rng = SeededRng::new(26);
        let text = gaussian_sample(&mut rng, n, d).unwrap();
        let frames = gaussian_sample(&mut rng, m, d).unwrap();
        let p_t = gaussian_sample(&mut rng, d, d).unwrap().scale(0.5);
        let p_v = gaussian_sample(&mut rng, d, d).unwrap().scale(0.5);
        let probe = gaussian_sample(&mut rng, 1 + n + m, d).unwrap();
        let base_params = random_params(d, 1.0, &mut rng);
        let logits0 = [0.1, -0.2, 0.15, 0.05];

        let shapes: Vec<(usize, usize)> = vec![
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (d, d),
            (2 * d, d),
            (1, d),
            (d, 1),
            (1, 1),
            (d, d),
            (4, 1),
        ];
        let flatten = |p: &EncoderLayerParams, logits: &[f64]| -> Vec<f64> {
            let mut out = Vec::new();
            for m in [
                &p.w_n, &p.w_x, &p.w_g, &p.w_t, &p.w_v, &p.mlp_w1, &p.mlp_b1, &p.mlp_w2,
                &p.mlp_b2, &p.w_r,
            ] {
                out.extend_from_slice(m.data());
            }
            out.extend_from_slice(logits);
            out
        };

        let eval = |theta: &[f64], want_grads: bool| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let mut offset = 0;
            let mut leaves = Vec::new();
            for &(r, c) in &shapes {
                let mm = DenseMatrix::from_vec(r, c, theta[offset..offset + r * c].to_vec())
                    .unwrap();
                offset += r * c;
                leaves.push(t.leaf(mm));
            }
            let lp = LayerVars {
                w_n: leaves[0],
                w_x: leaves[1],
                w_g: leaves[2],
                w_t: leaves[3],
                w_v: leaves[4],
                mlp_w1: leaves[5],
                mlp_b1: leaves[6],
                mlp_w2: leaves[7],
                mlp_b2: leaves[8],
                w_r: leaves[9],
                gamma: 1.0,
            };
            let logits = leaves[10];

            let edges = crate::hypergraph::build_hyperedges(n, m).unwrap();
            let wiring = GraphWiring::new(&edges, n, m).unwrap();
            let consts = wiring.constants(&mut t);
            let fam = t.constant(wiring.fam_sel.clone());
            let wlog = t.matmul(fam, logits);
            let wvec = t.exp(wlog);
            let inc = t.constant(wiring.incidence.clone());
            let dd = t.matmul(inc, wvec);
            let dd_inv = t.powf(dd, -1.0);

            let graph = build_pair_graph(&text, &frames, &p_t, &p_v, &[0.0; 4]).unwrap();
            let x0 = t.constant(graph.nodes.stacked());
            let lvars = vec![lp.clone(), lp];
            let (x, _, _) = encode_t(&mut t, x0, &consts, &wiring, dd_inv, &lvars);
            let pv = t.constant(probe.clone());
            let h = t.hadamard(x, pv);
            let root = t.sum_all(h);
            let loss = t.scalar(root);
            if !want_grads {
                return (loss, Vec::new());
            }
            let grads = t.backward(root);
            let mut flat = Vec::new();
            for (leaf, &(r, c)) in leaves.iter().zip(&shapes) {
                flat.extend_from_slice(grads.get(*leaf, (r, c)).data());
            }
            (loss, flat)
        };

        let theta = flatten(&base_params, &logits0);
        let (_, tape_grads) = eval(&theta, true);
        let fd = finite_diff_grad(&mut |th: &[f64]| eval(th, false).0, &theta, 1e-5).unwrap();
        let mut worst = 0.0f64;
        for (a, b) in tape_grads.iter().zip(fd.iter()) {
            worst = worst.max(rel_err(*a, *b, 1e-8));
        }
        assert!(worst < 1e-4, "max rel err {worst}");
    }

    #[test]
    fn encode_rejects_too_many_layers_and_bad_params() {
        let mut rng = SeededRng::new(27);
        let graph = random_pair_graph(1, 1, 3, &mut rng);
        assert!(encode(&graph, &[], 1).is_err());
        let mut bad = EncoderLayerParams::identity(3, 1.0);
        bad.gamma = 0.0;
        let state = GraphState::from_graph(&graph);
        assert!(hyperedge_aggregate(&state, &graph, &bad).is_err());
        let wrong = EncoderLayerParams::identity(4, 1.0);
        assert!(node_message_pass(&state, &graph, &wrong).is_err());
    }
}
