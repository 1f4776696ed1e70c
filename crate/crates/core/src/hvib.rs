//! Hyperbolic variational information bottleneck.
//!
//! Token and patch matrices are encoded by a shared Gaussian head built on
//! Lorentz linear layers. Two losses act on the latents: a KL regulariser
//! toward `N(0, I)` and a symmetric InfoNCE over pooled latents.

use crate::lorentz::{lorentz_linear, Curvature};
use crate::numerics::{sample_standard_normal, Graph, NumericsError, SeededRng, Tensor, Var};

/// Lower bound added after softplus so that `ln sigma^2` stays finite.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Diagonal Gaussian `(mu, sigma)` and the draw `z = mu + sigma * eps`.
#[derive(Clone, Copy, Debug)]
pub struct LatentGaussian {
    pub mu: Var,
    pub sigma: Var,
    pub z: Var,
}

/// Weights of the shared modality encoder. `m_mu`/`m_sigma` are `h x d`
/// Lorentz maps; the `w_*` are `h x h` and the `b_*` are `1 x h`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderWeights {
    pub m_mu: Var,
    pub m_sigma: Var,
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_sigma: Var,
    pub b_sigma: Var,
}

/// `softplus(x) + SIGMA_FLOOR`.
pub fn positive_scale(g: &mut Graph, x: Var) -> Var {
    let sp = g.softplus(x);
    g.add_scalar(sp, SIGMA_FLOOR)
}

/// `mu + sigma * eps` with fresh standard-normal `eps` per entry, or
/// `z = mu` when `rng` is `None`.
pub fn reparameterize(g: &mut Graph, mu: Var, sigma: Var, rng: Option<&mut SeededRng>) -> Result<Var, NumericsError> {
    match rng {
        None => Ok(mu),
        Some(rng) => {
            let shape = g.value(mu).shape().to_vec();
            let eps = g.constant(sample_standard_normal(rng, &shape));
            let noise = g.mul(sigma, eps)?;
            g.add(mu, noise)
        }
    }
}

/// Encodes the rows of `x` (`rows x d`) into a `rows x h` Gaussian latent.
pub fn encode_modality(
    g: &mut Graph,
    x: Var,
    w: &EncoderWeights,
    c: Curvature,
    rng: Option<&mut SeededRng>,
) -> Result<LatentGaussian, NumericsError> {
    if !g.value(x).is_finite() {
        return Err(NumericsError::Domain {
            op: "encode_modality",
            detail: "non-finite input".into(),
        });
    }
    let hm = lorentz_linear(g, x, w.m_mu, c)?;
    let mu = g.affine(hm, w.w_mu, w.b_mu)?;
    let hs = lorentz_linear(g, x, w.m_sigma, c)?;
    let pre = g.affine(hs, w.w_sigma, w.b_sigma)?;
    let sigma = positive_scale(g, pre);
    let z = reparameterize(g, mu, sigma, rng)?;
    Ok(LatentGaussian { mu, sigma, z })
}

/// Per-row `KL(N(mu, sigma^2) || N(0, I))` as a `rows x 1` column.
pub fn gaussian_kl_rows(g: &mut Graph, mu: Var, sigma: Var) -> Result<Var, NumericsError> {
    if let Some(&s) = g.value(sigma).data().iter().find(|&&s| !(s > 0.0)) {
        return Err(NumericsError::Domain {
            op: "gaussian_kl",
            detail: format!("sigma must be positive, got {s}"),
        });
    }
    let mu2 = g.square(mu);
    let s2 = g.square(sigma);
    let ln_s2 = g.ln(s2);
    let a = g.add(mu2, s2)?;
    let b = g.sub(a, ln_s2)?;
    let b = g.add_scalar(b, -1.0);
    let rows = g.sum_cols(b);
    Ok(g.scale(rows, 0.5))
}

/// KL summed over coordinates and averaged over rows.
pub fn gaussian_kl(g: &mut Graph, mu: Var, sigma: Var) -> Result<Var, NumericsError> {
    let rows = gaussian_kl_rows(g, mu, sigma)?;
    Ok(g.mean(rows))
}

/// Value-level [`gaussian_kl`].
pub fn gaussian_kl_value(mu: &Tensor, sigma: &Tensor) -> Result<f64, NumericsError> {
    let mut g = Graph::new();
    let (m, s) = (g.constant(mu.as_matrix()), g.constant(sigma.as_matrix()));
    let kl = gaussian_kl(&mut g, m, s)?;
    Ok(g.scalar_value(kl))
}

/// `(KL_tv + KL_vt) / 2`.
pub fn regularization_loss(g: &mut Graph, tv: &LatentGaussian, vt: &LatentGaussian) -> Result<Var, NumericsError> {
    let a = gaussian_kl(g, tv.mu, tv.sigma)?;
    let b = gaussian_kl(g, vt.mu, vt.sigma)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Mean over rows, `1 x h`.
pub fn pooled_latent(g: &mut Graph, z: Var) -> Result<Var, NumericsError> {
    g.mean_rows(z)
}

/// Symmetric InfoNCE over `N` matched pairs with dot-product scores:
/// `-1/2 sum_i [log softmax_j(S)_ii + log softmax_j(S^T)_ii]`, `S = A B^T`.
pub fn contrastive_loss(g: &mut Graph, zt: Var, zv: Var) -> Result<Var, NumericsError> {
    let n = g.value(zt).rows();
    if n == 0 || g.value(zv).rows() != n {
        return Err(NumericsError::ShapeMismatch {
            op: "contrastive_loss",
            detail: format!("{n} text rows vs {} vision rows", g.value(zv).rows()),
        });
    }
    let s = g.matmul_t(zt, zv)?;
    let st = g.transpose(s);
    let l1 = g.log_softmax_rows(s);
    let l2 = g.log_softmax_rows(st);
    let d1 = g.diag(l1)?;
    let d2 = g.diag(l2)?;
    let both = g.add(d1, d2)?;
    let total = g.sum(both);
    Ok(g.scale(total, -0.5))
}
