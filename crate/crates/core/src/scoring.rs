//! Pair scoring and the in-batch contrastive objective.
//!
//! A batch of B (text, video) pairs yields a B x B similarity matrix:
//! entry (i, j) scores text i against video j through its own joint
//! hypergraph. Both retrieval directions are trained with the diagonal
//! as the target, plus a KL regularizer from the variational head.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::encoder::{encode_t, EncoderLayerParams, GraphWiring, LayerVars, WiringVars};
use crate::error::{Error, Result};
use crate::hypergraph::select_keyframes;
use crate::numerics::{gaussian_sample, DenseMatrix, SeededRng, LEAKY_SLOPE};
use crate::variational::{
    adjacency_t, gcn_encode_t, kl_loss_t, reparameterize_t, VariationalParams, VariationalVars,
};

/// Graph readout parameters.
#[derive(Debug, Clone)]
pub struct ReadoutParams {
    /// d x 1 node-attention vector.
    pub u: DenseMatrix,
    /// 1 x d classifier vector.
    pub w: DenseMatrix,
}

/// Loss term weights; defaults follow the trained configuration.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_v2t: f64,
    pub lambda_t2v: f64,
    pub lambda_v: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_v2t: 0.5,
            lambda_t2v: 0.5,
            lambda_v: 0.6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_v2t", self.lambda_v2t),
            ("lambda_t2v", self.lambda_t2v),
            ("lambda_v", self.lambda_v),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArg(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Every learnable tensor of the model plus the structural constants
/// needed to rebuild its graphs. Tensor iteration order is fixed by
/// [`ModelParams::names`].
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub text_dim: usize,
    pub video_dim: usize,
    pub hidden_dim: usize,
    pub max_frames: usize,
    /// text_dim x d projection.
    pub p_t: DenseMatrix,
    /// video_dim x d projection.
    pub p_v: DenseMatrix,
    /// 4 x 1 per-family edge-weight logits.
    pub edge_logits: DenseMatrix,
    pub layers: Vec<EncoderLayerParams>,
    pub var: VariationalParams,
    pub readout: ReadoutParams,
}

impl ModelParams {
    /// Uniform init in [-1/sqrt(d), 1/sqrt(d)), each tensor from its own
    /// seeded stream so layouts can change without reshuffling everything.
    /// Edge logits start at zero (unit edge weights).
    pub fn init(
        text_dim: usize,
        video_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        gamma: f64,
        max_frames: usize,
        rng: &SeededRng,
    ) -> Result<ModelParams> {
        for (name, v) in [
            ("text_dim", text_dim),
            ("video_dim", video_dim),
            ("hidden_dim", hidden_dim),
            ("max_frames", max_frames),
        ] {
            if v == 0 {
                return Err(Error::InvalidArg(format!("{name} must be positive")));
            }
        }
        if !(gamma > 0.0) {
            return Err(Error::InvalidArg(format!("gamma must be > 0, got {gamma}")));
        }
        let d = hidden_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let draw = |name: &str, rows: usize, cols: usize| -> DenseMatrix {
            let mut stream = rng.child(name);
            let mut m = DenseMatrix::zeros(rows, cols);
            for v in m.data_mut() {
                *v = stream.uniform(-bound, bound);
            }
            m
        };
        let layers = (0..num_layers)
            .map(|l| EncoderLayerParams {
                w_n: draw(&format!("enc{l}.w_n"), d, d),
                w_x: draw(&format!("enc{l}.w_x"), d, d),
                w_g: draw(&format!("enc{l}.w_g"), d, d),
                w_t: draw(&format!("enc{l}.w_t"), d, d),
                w_v: draw(&format!("enc{l}.w_v"), d, d),
                mlp_w1: draw(&format!("enc{l}.mlp_w1"), 2 * d, d),
                mlp_b1: draw(&format!("enc{l}.mlp_b1"), 1, d),
                mlp_w2: draw(&format!("enc{l}.mlp_w2"), d, 1),
                mlp_b2: draw(&format!("enc{l}.mlp_b2"), 1, 1),
                w_r: draw(&format!("enc{l}.w_r"), d, d),
                gamma,
            })
            .collect();
        Ok(ModelParams {
            text_dim,
            video_dim,
            hidden_dim,
            max_frames,
            p_t: draw("proj.text", text_dim, d),
            p_v: draw("proj.video", video_dim, d),
            edge_logits: DenseMatrix::zeros(4, 1),
            layers,
            var: VariationalParams {
                w0: draw("var.w0", d, d),
                w_mu: draw("var.w_mu", d, d),
                w_sigma: draw("var.w_sigma", d, d),
            },
            readout: ReadoutParams {
                u: draw("readout.u", d, 1),
                w: draw("readout.w", 1, d),
            },
        })
    }

    pub fn gamma(&self) -> f64 {
        self.layers.first().map(|l| l.gamma).unwrap_or(1.0)
    }

    /// Canonical tensor order; serialization and the optimizer follow it.
    pub fn names(&self) -> Vec<String> {
        let mut out = vec![
            "proj.text".to_string(),
            "proj.video".to_string(),
            "edge.logits".to_string(),
        ];
        for l in 0..self.layers.len() {
            for f in [
                "w_n", "w_x", "w_g", "w_t", "w_v", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
                "w_r",
            ] {
                out.push(format!("enc{l}.{f}"));
            }
        }
        out.extend(["var.w0", "var.w_mu", "var.w_sigma", "readout.u", "readout.w"]
            .map(String::from));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&DenseMatrix> {
        if let Some(rest) = name.strip_prefix("enc") {
            let (idx, field) = rest.split_once('.')?;
            let l: usize = idx.parse().ok()?;
            let layer = self.layers.get(l)?;
            return Some(match field {
                "w_n" => &layer.w_n,
                "w_x" => &layer.w_x,
                "w_g" => &layer.w_g,
                "w_t" => &layer.w_t,
                "w_v" => &layer.w_v,
                "mlp_w1" => &layer.mlp_w1,
                "mlp_b1" => &layer.mlp_b1,
                "mlp_w2" => &layer.mlp_w2,
                "mlp_b2" => &layer.mlp_b2,
                "w_r" => &layer.w_r,
                _ => return None,
            });
        }
        Some(match name {
            "proj.text" => &self.p_t,
            "proj.video" => &self.p_v,
            "edge.logits" => &self.edge_logits,
            "var.w0" => &self.var.w0,
            "var.w_mu" => &self.var.w_mu,
            "var.w_sigma" => &self.var.w_sigma,
            "readout.u" => &self.readout.u,
            "readout.w" => &self.readout.w,
            _ => return None,
        })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        if let Some(rest) = name.strip_prefix("enc") {
            let (idx, field) = rest.split_once('.')?;
            let l: usize = idx.parse().ok()?;
            let layer = self.layers.get_mut(l)?;
            return Some(match field {
                "w_n" => &mut layer.w_n,
                "w_x" => &mut layer.w_x,
                "w_g" => &mut layer.w_g,
                "w_t" => &mut layer.w_t,
                "w_v" => &mut layer.w_v,
                "mlp_w1" => &mut layer.mlp_w1,
                "mlp_b1" => &mut layer.mlp_b1,
                "mlp_w2" => &mut layer.mlp_w2,
                "mlp_b2" => &mut layer.mlp_b2,
                "w_r" => &mut layer.w_r,
                _ => return None,
            });
        }
        Some(match name {
            "proj.text" => &mut self.p_t,
            "proj.video" => &mut self.p_v,
            "edge.logits" => &mut self.edge_logits,
            "var.w0" => &mut self.var.w0,
            "var.w_mu" => &mut self.var.w_mu,
            "var.w_sigma" => &mut self.var.w_sigma,
            "readout.u" => &mut self.readout.u,
            "readout.w" => &mut self.readout.w,
            _ => return None,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.names()
            .iter()
            .map(|n| self.tensor(n).map(|m| m.data().len()).unwrap_or(0))
            .sum()
    }

    /// All tensors concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for name in self.names() {
            out.extend_from_slice(self.tensor(&name).expect("canonical name").data());
        }
        out
    }

    /// Inverse of [`flatten`]; rejects length mismatches.
    pub fn assign_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_scalars() {
            return Err(Error::shape(
                "assign_flat",
                format!("{} values for {} slots", theta.len(), self.num_scalars()),
            ));
        }
        let mut off = 0;
        for name in self.names() {
            let m = self.tensor_mut(&name).expect("canonical name");
            let len = m.data().len();
            m.data_mut().copy_from_slice(&theta[off..off + len]);
            off += len;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.hidden_dim;
        if self.p_t.shape() != (self.text_dim, d) {
            return Err(Error::shape(
                "model params",
                format!("proj.text {:?}, expected {:?}", self.p_t.shape(), (self.text_dim, d)),
            ));
        }
        if self.p_v.shape() != (self.video_dim, d) {
            return Err(Error::shape(
                "model params",
                format!("proj.video {:?}, expected {:?}", self.p_v.shape(), (self.video_dim, d)),
            ));
        }
        if self.edge_logits.shape() != (4, 1) {
            return Err(Error::shape(
                "model params",
                format!("edge.logits {:?}, expected (4, 1)", self.edge_logits.shape()),
            ));
        }
        for layer in &self.layers {
            layer.validate(d)?;
        }
        self.var.validate(d)?;
        if self.readout.u.shape() != (d, 1) || self.readout.w.shape() != (1, d) {
            return Err(Error::shape(
                "model params",
                format!(
                    "readout u {:?} / w {:?}, expected {:?} / {:?}",
                    self.readout.u.shape(),
                    self.readout.w.shape(),
                    (d, 1),
                    (1, d)
                ),
            ));
        }
        if self.max_frames == 0 {
            return Err(Error::InvalidArg("max_frames must be positive".into()));
        }
        Ok(())
    }

    /// Registers every tensor on the tape. Trainable mode makes them leaves
    /// and returns the (name, handle) registry for gradient extraction.
    pub fn vars(&self, t: &mut Tape, trainable: bool) -> (ModelVars, Vec<(String, Var)>) {
        let mut registry = Vec::new();
        let mut reg = |t: &mut Tape, name: &str, m: &DenseMatrix| -> Var {
            let v = if trainable {
                t.leaf(m.clone())
            } else {
                t.constant(m.clone())
            };
            registry.push((name.to_string(), v));
            v
        };
        let p_t = reg(t, "proj.text", &self.p_t);
        let p_v = reg(t, "proj.video", &self.p_v);
        let logits = reg(t, "edge.logits", &self.edge_logits);
        let layers: Vec<LayerVars> = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, p)| LayerVars {
                w_n: reg(t, &format!("enc{l}.w_n"), &p.w_n),
                w_x: reg(t, &format!("enc{l}.w_x"), &p.w_x),
                w_g: reg(t, &format!("enc{l}.w_g"), &p.w_g),
                w_t: reg(t, &format!("enc{l}.w_t"), &p.w_t),
                w_v: reg(t, &format!("enc{l}.w_v"), &p.w_v),
                mlp_w1: reg(t, &format!("enc{l}.mlp_w1"), &p.mlp_w1),
                mlp_b1: reg(t, &format!("enc{l}.mlp_b1"), &p.mlp_b1),
                mlp_w2: reg(t, &format!("enc{l}.mlp_w2"), &p.mlp_w2),
                mlp_b2: reg(t, &format!("enc{l}.mlp_b2"), &p.mlp_b2),
                w_r: reg(t, &format!("enc{l}.w_r"), &p.w_r),
                gamma: p.gamma,
            })
            .collect();
        let var = VariationalVars {
            w0: reg(t, "var.w0", &self.var.w0),
            w_mu: reg(t, "var.w_mu", &self.var.w_mu),
            w_sigma: reg(t, "var.w_sigma", &self.var.w_sigma),
        };
        let u = reg(t, "readout.u", &self.readout.u);
        let w = reg(t, "readout.w", &self.readout.w);
        (
            ModelVars {
                p_t,
                p_v,
                logits,
                layers,
                var,
                u,
                w,
            },
            registry,
        )
    }
}

/// Tape handles of the full model.
pub struct ModelVars {
    pub p_t: Var,
    pub p_v: Var,
    pub logits: Var,
    pub layers: Vec<LayerVars>,
    pub var: VariationalVars,
    pub u: Var,
    pub w: Var,
}

/// One retrieval item with its keyframes already selected.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    /// n x text_dim raw token features.
    pub text: DenseMatrix,
    /// m x video_dim selected keyframe features, selection order.
    pub frames: DenseMatrix,
}

/// Caps a video at `max_frames` diverse keyframes and bundles it with its
/// text side.
pub fn prepare_pair(
    text: &DenseMatrix,
    video: &DenseMatrix,
    max_frames: usize,
) -> Result<PreparedPair> {
    if text.rows() == 0 {
        return Err(Error::Empty("prepare_pair text"));
    }
    let sel = select_keyframes(video, max_frames)?;
    let rows: Vec<Vec<f64>> = sel.iter().map(|&i| video.row(i).to_vec()).collect();
    Ok(PreparedPair {
        text: text.clone(),
        frames: DenseMatrix::from_rows(&rows)?,
    })
}

/// Where the reparameterization noise comes from.
pub enum NoiseSource<'a> {
    /// z = mu (evaluation).
    Eval,
    /// Fresh standard-normal draw per pair, in pair order.
    Rng(&'a mut SeededRng),
    /// Pre-drawn noise, indexed [text_i * B + video_j]. Lets a caller hold
    /// the sample fixed across repeated evaluations.
    Fixed(&'a [DenseMatrix]),
}

/// Pre-draws the noise a batch would consume, in the same order as
/// [`NoiseSource::Rng`].
pub fn draw_batch_noise(
    items: &[PreparedPair],
    d: usize,
    rng: &mut SeededRng,
) -> Result<Vec<DenseMatrix>> {
    let mut out = Vec::with_capacity(items.len() * items.len());
    for ti in items {
        for vj in items {
            let n_nodes = 1 + vj.frames.rows() + ti.text.rows();
            out.push(gaussian_sample(rng, n_nodes, d)?);
        }
    }
    Ok(out)
}

/// Attention-pooled graph representation: z = sigmoid(sum_i alpha_i h_i)
/// with alpha = softmax over nodes of u . h_i. Returns z as 1 x d.
pub fn readout_t(t: &mut Tape, h: Var, u: Var) -> Var {
    let n = t.value(h).rows();
    let scores = t.matmul(h, u);
    let alpha = t.segment_softmax(scores, Rc::new(vec![0; n]));
    let weighted = t.scale_rows(h, alpha);
    let ones = t.constant(DenseMatrix::from_vec(1, n, vec![1.0; n]).expect("ones row"));
    let pooled = t.matmul(ones, weighted);
    t.sigmoid(pooled)
}

/// Classifier logit s = LeakyReLU(w . z).
pub fn score_from_z_t(t: &mut Tape, z: Var, w: Var) -> Var {
    let raw = t.row_dot(z, w);
    t.leaky_relu(raw, LEAKY_SLOPE)
}

/// Everything after the initial node features: encoder layers, variational
/// head, readout. Returns (score, kl), both 1 x 1.
fn pair_heads_t(
    t: &mut Tape,
    mv: &ModelVars,
    wiring: &GraphWiring,
    wv: &WiringVars,
    a_bar: Var,
    dd_inv: Var,
    x0: Var,
    noise: Option<&DenseMatrix>,
) -> (Var, Var) {
    let (xl, _edges, _attn) = encode_t(t, x0, wv, wiring, dd_inv, &mv.layers);
    let (mu, ls) = gcn_encode_t(t, a_bar, xl, &mv.var);
    let z = match noise {
        Some(eps) => {
            let nv = t.constant(eps.clone());
            reparameterize_t(t, mu, ls, nv)
        }
        None => mu,
    };
    let kl = kl_loss_t(t, mu, ls);
    let zg = readout_t(t, z, mv.u);
    let s = score_from_z_t(t, zg, mv.w);
    (s, kl)
}

struct PairCtx {
    wiring: Rc<GraphWiring>,
    wv: WiringVars,
    a_bar: Var,
    dd_inv: Var,
}

fn build_pair_ctx(t: &mut Tape, n: usize, m: usize, logits: Var) -> Result<PairCtx> {
    let edges = crate::hypergraph::build_hyperedges(n, m)?;
    let wiring = Rc::new(GraphWiring::new(&edges, n, m)?);
    let wv = wiring.constants(t);
    let (a_bar, dd_inv) = adjacency_t(t, &wv, logits);
    Ok(PairCtx {
        wiring,
        wv,
        a_bar,
        dd_inv,
    })
}

/// Loss heads of one batch, all on the caller's tape.
pub struct BatchLoss {
    pub total: Var,
    pub l_t2v: Var,
    pub l_v2t: Var,
    /// KL per latent element, averaged over the batch's B^2 graphs.
    pub kl_mean: Var,
    /// B x B similarity matrix, rows = texts.
    pub sim: Var,
}

/// Scores all B x B pairs of one batch on a single tape and assembles the
/// weighted loss. Projections run once per item, not once per pair; graph
/// wirings are shared across pairs with equal (n, m).
pub fn batch_loss_t(
    t: &mut Tape,
    mv: &ModelVars,
    items: &[PreparedPair],
    weights: &LossWeights,
    noise: &mut NoiseSource,
) -> Result<BatchLoss> {
    weights.validate()?;
    let b = items.len();
    if b == 0 {
        return Err(Error::Empty("batch"));
    }
    let d = t.value(mv.u).rows();

    let mut tw = Vec::with_capacity(b);
    let mut fv = Vec::with_capacity(b);
    let mut gl = Vec::with_capacity(b);
    for item in items {
        let tc = t.constant(item.text.clone());
        let tp = t.matmul(tc, mv.p_t);
        tw.push(t.l2_normalize_rows(tp));
        let fc = t.constant(item.frames.clone());
        let m = item.frames.rows();
        let mean_row = t.constant(
            DenseMatrix::from_vec(1, m, vec![1.0 / m as f64; m]).expect("mean row"),
        );
        let raw_mean = t.matmul(mean_row, fc);
        let gp = t.matmul(raw_mean, mv.p_v);
        gl.push(t.l2_normalize_rows(gp));
        let fp = t.matmul(fc, mv.p_v);
        fv.push(t.l2_normalize_rows(fp));
    }

    let mut ctxs: Vec<((usize, usize), PairCtx)> = Vec::new();
    for ti in items {
        for vj in items {
            let key = (ti.text.rows(), vj.frames.rows());
            if !ctxs.iter().any(|(k, _)| *k == key) {
                let ctx = build_pair_ctx(t, key.0, key.1, mv.logits)?;
                ctxs.push((key, ctx));
            }
        }
    }

    let mut scores = Vec::with_capacity(b * b);
    let mut kls = Vec::with_capacity(b * b);
    let mut latent_elems = 0usize;
    for (i, ti) in items.iter().enumerate() {
        for (j, vj) in items.iter().enumerate() {
            let key = (ti.text.rows(), vj.frames.rows());
            let ctx = &ctxs.iter().find(|(k, _)| *k == key).expect("prebuilt ctx").1;
            latent_elems += ctx.wiring.n_nodes * d;
            let x0 = t.concat_rows(&[gl[j], fv[j], tw[i]]);
            let n_nodes = ctx.wiring.n_nodes;
            let drawn;
            let eps: Option<&DenseMatrix> = match noise {
                NoiseSource::Eval => None,
                NoiseSource::Rng(rng) => {
                    drawn = gaussian_sample(rng, n_nodes, d)?;
                    Some(&drawn)
                }
                NoiseSource::Fixed(all) => {
                    let e = all.get(i * b + j).ok_or_else(|| {
                        Error::shape("batch noise", format!("missing sample {i},{j}"))
                    })?;
                    if e.shape() != (n_nodes, d) {
                        return Err(Error::shape(
                            "batch noise",
                            format!("sample {i},{j} is {:?}, expected {:?}", e.shape(), (n_nodes, d)),
                        ));
                    }
                    Some(e)
                }
            };
            let (s, kl) =
                pair_heads_t(t, mv, &ctx.wiring, &ctx.wv, ctx.a_bar, ctx.dd_inv, x0, eps);
            scores.push(s);
            kls.push(kl);
        }
    }

    let sim = t.assemble_scalars(b, b, &scores);
    let l_t2v = t.ce_diag_rows(sim);
    let sim_t = t.transpose(sim);
    let l_v2t = t.ce_diag_rows(sim_t);
    // Per latent element, not per graph: node counts vary with the caption
    // length, and a per-element mean keeps lambda_v's meaning independent of
    // graph size and hidden width.
    let kl_all = t.assemble_scalars(b * b, 1, &kls);
    let kl_sum = t.sum_all(kl_all);
    let kl_mean = t.scale_const(kl_sum, 1.0 / latent_elems as f64);

    let a = t.scale_const(l_v2t, weights.lambda_v2t);
    let bterm = t.scale_const(l_t2v, weights.lambda_t2v);
    let ab = t.add(a, bterm);
    let c = t.scale_const(kl_mean, weights.lambda_v);
    let total = t.add(ab, c);
    Ok(BatchLoss {
        total,
        l_t2v,
        l_v2t,
        kl_mean,
        sim,
    })
}

/// Scoring mode: eval is deterministic, train samples reparameterization
/// noise from the given stream.
pub enum ScoreMode<'a> {
    Eval,
    Train(&'a mut SeededRng),
}

/// Attention-pooled graph representation of a node-state matrix.
pub fn readout(z_nodes: &DenseMatrix, params: &ReadoutParams) -> Result<DenseMatrix> {
    let (n, d) = z_nodes.shape();
    if n == 0 {
        return Err(Error::Empty("readout nodes"));
    }
    if params.u.shape() != (d, 1) || params.w.shape() != (1, d) {
        return Err(Error::shape(
            "readout",
            format!(
                "u {:?} / w {:?} against {d}-dim states",
                params.u.shape(),
                params.w.shape()
            ),
        ));
    }
    let mut t = Tape::new();
    let h = t.constant(z_nodes.clone());
    let u = t.constant(params.u.clone());
    let z = readout_t(&mut t, h, u);
    Ok(t.value(z).clone())
}

/// Scores one (text, video) pair end to end.
pub fn pair_score(
    text: &DenseMatrix,
    video: &DenseMatrix,
    params: &ModelParams,
    mode: &mut ScoreMode,
) -> Result<f64> {
    params.validate()?;
    if text.cols() != params.text_dim || video.cols() != params.video_dim {
        return Err(Error::shape(
            "pair_score",
            format!(
                "features {}/{}, model expects {}/{}",
                text.cols(),
                video.cols(),
                params.text_dim,
                params.video_dim
            ),
        ));
    }
    let item = prepare_pair(text, video, params.max_frames)?;
    let mut t = Tape::new();
    let (mv, _) = params.vars(&mut t, false);
    let ctx = build_pair_ctx(&mut t, item.text.rows(), item.frames.rows(), mv.logits)?;
    let items = [item];
    let mut noise = match mode {
        ScoreMode::Eval => NoiseSource::Eval,
        ScoreMode::Train(rng) => NoiseSource::Rng(rng),
    };
    // Single-pair forward shares the batch path for the projections.
    let loss_free = single_score_t(&mut t, &mv, &items[0], &ctx, &mut noise)?;
    Ok(t.scalar(loss_free))
}

fn single_score_t(
    t: &mut Tape,
    mv: &ModelVars,
    item: &PreparedPair,
    ctx: &PairCtx,
    noise: &mut NoiseSource,
) -> Result<Var> {
    let d = t.value(mv.u).rows();
    let tc = t.constant(item.text.clone());
    let tp = t.matmul(tc, mv.p_t);
    let tw = t.l2_normalize_rows(tp);
    let fc = t.constant(item.frames.clone());
    let m = item.frames.rows();
    let mean_row =
        t.constant(DenseMatrix::from_vec(1, m, vec![1.0 / m as f64; m]).expect("mean row"));
    let raw_mean = t.matmul(mean_row, fc);
    let gp = t.matmul(raw_mean, mv.p_v);
    let gl = t.l2_normalize_rows(gp);
    let fp = t.matmul(fc, mv.p_v);
    let fv = t.l2_normalize_rows(fp);
    let x0 = t.concat_rows(&[gl, fv, tw]);
    let drawn;
    let eps = match noise {
        NoiseSource::Eval => None,
        NoiseSource::Rng(rng) => {
            drawn = gaussian_sample(rng, ctx.wiring.n_nodes, d)?;
            Some(&drawn)
        }
        NoiseSource::Fixed(all) => all.first(),
    };
    let (s, _kl) = pair_heads_t(t, mv, &ctx.wiring, &ctx.wv, ctx.a_bar, ctx.dd_inv, x0, eps);
    Ok(s)
}

/// B x B score matrix; entry (i, j) = score of text i against video j.
pub fn similarity_matrix(
    texts: &[DenseMatrix],
    videos: &[DenseMatrix],
    params: &ModelParams,
    mode: &mut ScoreMode,
) -> Result<DenseMatrix> {
    if texts.is_empty() || videos.is_empty() {
        return Err(Error::Empty("similarity_matrix batch"));
    }
    if texts.len() != videos.len() {
        return Err(Error::shape(
            "similarity_matrix",
            format!("{} texts vs {} videos", texts.len(), videos.len()),
        ));
    }
    let b = texts.len();
    let mut out = DenseMatrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let s = pair_score(&texts[i], &videos[j], params, mode)?;
            out.set(i, j, s);
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    Ok(out)
}

/// Mean cross-entropy of each row (t2v) and column (v2t) softmax against
/// the diagonal target.
pub fn retrieval_losses(s: &DenseMatrix) -> Result<(f64, f64)> {
    let (r, c) = s.shape();
    if r == 0 {
        return Err(Error::Empty("retrieval_losses"));
    }
    if r != c {
        return Err(Error::shape(
            "retrieval_losses",
            format!("similarity matrix {r}x{c} not square"),
        ));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    let mut t = Tape::new();
    let sv = t.constant(s.clone());
    let l_t2v = t.ce_diag_rows(sv);
    let st = t.transpose(sv);
    let l_v2t = t.ce_diag_rows(st);
    Ok((t.scalar(l_t2v), t.scalar(l_v2t)))
}

/// lambda_v2t * l_v2t + lambda_t2v * l_t2v + lambda_v * l_kl.
pub fn total_loss(l_v2t: f64, l_t2v: f64, l_kl: f64, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    for (name, v) in [("l_v2t", l_v2t), ("l_t2v", l_t2v), ("l_kl", l_kl)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("total_loss input {name}")));
        }
    }
    Ok(weights.lambda_v2t * l_v2t + weights.lambda_t2v * l_t2v + weights.lambda_v * l_kl)
}
