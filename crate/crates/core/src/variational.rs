//! Variational head: a two-hop graph convolution over the normalized
//! hypergraph adjacency produces per-node Gaussian parameters, sampled
//! with the reparameterization trick and regularized toward the unit
//! Gaussian by a closed-form KL term.

use crate::autodiff::{Tape, Var};
use crate::encoder::WiringVars;
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// Bound on log-sigma before exponentiation.
pub const LOG_SIGMA_CLAMP: f64 = 10.0;

/// Learnable tensors of the variational head.
#[derive(Debug, Clone)]
pub struct VariationalParams {
    /// d x d inner convolution weights.
    pub w0: DenseMatrix,
    /// d x d mean head.
    pub w_mu: DenseMatrix,
    /// d x d log-sigma head.
    pub w_sigma: DenseMatrix,
}

impl VariationalParams {
    pub fn validate(&self, d: usize) -> Result<()> {
        for (name, m) in [("w0", &self.w0), ("w_mu", &self.w_mu), ("w_sigma", &self.w_sigma)] {
            if m.shape() != (d, d) {
                return Err(Error::shape(
                    "variational params",
                    format!("{name} is {:?}, expected {:?}", m.shape(), (d, d)),
                ));
            }
        }
        Ok(())
    }
}

/// Tape handles of the variational parameters.
#[derive(Debug, Clone, Copy)]
pub struct VariationalVars {
    pub w0: Var,
    pub w_mu: Var,
    pub w_sigma: Var,
}

impl VariationalVars {
    pub fn constants(t: &mut Tape, p: &VariationalParams) -> VariationalVars {
        VariationalVars {
            w0: t.constant(p.w0.clone()),
            w_mu: t.constant(p.w_mu.clone()),
            w_sigma: t.constant(p.w_sigma.clone()),
        }
    }
}

/// Normalized adjacency on the tape, differentiable through the family
/// logits: A = Dd^{-1/2} H W De^{-1/2} H^T Dd^{-1/2}. Also returns the
/// reciprocal weighted node degrees the encoder needs.
pub fn adjacency_t(t: &mut Tape, w: &WiringVars, logits: Var) -> (Var, Var) {
    let wlog = t.matmul(w.fam_sel, logits);
    let wvec = t.exp(wlog);
    let dd = t.matmul(w.incidence, wvec);
    let dd_inv = t.powf(dd, -1.0);
    let dd_isqrt = t.powf(dd, -0.5);
    let col = t.hadamard(wvec, w.de_isqrt);
    let hw = t.scale_cols(w.incidence, col);
    let sym = t.matmul(hw, w.member_sel);
    let half = t.scale_cols(sym, dd_isqrt);
    let a_bar = t.scale_rows(half, dd_isqrt);
    (a_bar, dd_inv)
}

/// hidden = A relu(A x W0); mu = hidden W_mu; log_sigma clamped.
pub fn gcn_encode_t(
    t: &mut Tape,
    a_bar: Var,
    x: Var,
    vp: &VariationalVars,
) -> (Var, Var) {
    let xw = t.matmul(x, vp.w0);
    let ax = t.matmul(a_bar, xw);
    let inner = t.relu(ax);
    let hidden = t.matmul(a_bar, inner);
    let mu = t.matmul(hidden, vp.w_mu);
    let ls_raw = t.matmul(hidden, vp.w_sigma);
    let log_sigma = t.clamp(ls_raw, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP);
    (mu, log_sigma)
}

/// z = mu + noise (.) exp(log_sigma). The noise is a fixed sample, so the
/// gradient flows through mu and log_sigma only.
pub fn reparameterize_t(t: &mut Tape, mu: Var, log_sigma: Var, noise: Var) -> Var {
    let sigma = t.exp(log_sigma);
    let scaled = t.hadamard(noise, sigma);
    t.add(mu, scaled)
}

/// KL(q || N(0, I)) = -1/2 sum(1 + 2 log_sigma - mu^2 - exp(2 log_sigma)),
/// summed over every node and dimension of one graph.
pub fn kl_loss_t(t: &mut Tape, mu: Var, log_sigma: Var) -> Var {
    let two_ls = t.scale_const(log_sigma, 2.0);
    let lead = t.add_scalar(two_ls, 1.0);
    let mu2 = t.hadamard(mu, mu);
    let var = t.exp(two_ls);
    let a = t.sub(lead, mu2);
    let b = t.sub(a, var);
    let s = t.sum_all(b);
    t.scale_const(s, -0.5)
}

fn check_adjacency(a_bar: &DenseMatrix, n: usize) -> Result<()> {
    if a_bar.shape() != (n, n) {
        return Err(Error::shape(
            "gcn_encode",
            format!("adjacency {:?}, expected {:?}", a_bar.shape(), (n, n)),
        ));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (a_bar.get(i, j) - a_bar.get(j, i)).abs() > 1e-9 {
                return Err(Error::InvalidArg(format!(
                    "adjacency not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Gaussian parameters for every node: (mu, log_sigma), both n x d.
pub fn gcn_encode(
    a_bar: &DenseMatrix,
    x: &DenseMatrix,
    params: &VariationalParams,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let (n, d) = x.shape();
    params.validate(d)?;
    check_adjacency(a_bar, n)?;
    let mut t = Tape::new();
    let av = t.constant(a_bar.clone());
    let xv = t.constant(x.clone());
    let vp = VariationalVars::constants(&mut t, params);
    let (mu, ls) = gcn_encode_t(&mut t, av, xv, &vp);
    Ok((t.value(mu).clone(), t.value(ls).clone()))
}

/// Draws z = mu + noise (.) sigma for a fixed standard-normal sample.
pub fn reparameterize(
    mu: &DenseMatrix,
    log_sigma: &DenseMatrix,
    noise: &DenseMatrix,
) -> Result<DenseMatrix> {
    if mu.shape() != log_sigma.shape() || mu.shape() != noise.shape() {
        return Err(Error::shape(
            "reparameterize",
            format!(
                "mu {:?}, log_sigma {:?}, noise {:?} must match",
                mu.shape(),
                log_sigma.shape(),
                noise.shape()
            ),
        ));
    }
    let mut t = Tape::new();
    let m = t.constant(mu.clone());
    let ls = t.constant(log_sigma.clone());
    let nv = t.constant(noise.clone());
    let z = reparameterize_t(&mut t, m, ls, nv);
    Ok(t.value(z).clone())
}

/// Closed-form KL divergence to the unit Gaussian.
pub fn kl_loss(mu: &DenseMatrix, log_sigma: &DenseMatrix) -> Result<f64> {
    if mu.shape() != log_sigma.shape() {
        return Err(Error::shape(
            "kl_loss",
            format!("mu {:?} vs log_sigma {:?}", mu.shape(), log_sigma.shape()),
        ));
    }
    let mut t = Tape::new();
    let m = t.constant(mu.clone());
    let ls = t.constant(log_sigma.clone());
    let k = kl_loss_t(&mut t, m, ls);
    Ok(t.scalar(k))
}
