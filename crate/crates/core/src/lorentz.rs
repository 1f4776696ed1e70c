//! Lorentz (hyperboloid) model of hyperbolic space.
//!
//! Points of the `n`-dimensional model with curvature `c < 0` are vectors
//! `x = [x0, xs]` in `R^(n+1)` with `<x, x>_L = 1/c` and `x0 > 0`, where
//! `<x, y>_L = -x0*y0 + xs.ys`. Only maps based at the origin
//! `o = [1/sqrt(-c), 0, ..., 0]` are provided.
//!
//! With `k = sqrt(-c)`, a tangent vector `[0, v]` at the origin maps to
//! `exp0([0, v]) = [cosh(k|v|)/k, sinh(k|v|)/(k|v|) * v]`, and a point `p`
//! maps back to `log0(p) = [0, A(k*p0) * ps]` with
//! `A(b) = acosh(b)/sqrt(b^2 - 1)`. Both have removable singularities at
//! the origin, handled with Taylor series.
//!
//! The Lorentz linear layer `log0(M_c(exp0(x)))` equals `M x` in exact
//! arithmetic. It is still evaluated through every map so that rounding and
//! gradients follow the hyperbolic path.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numerics::{CustomOp, Graph, NumericsError, Tensor, Var};

/// Largest `beta` deficit below 1 accepted as rounding noise in `log0`.
const BETA_TOLERANCE: f64 = 1e-6;
/// Below this `alpha`, `sinh(a)/a` is evaluated by its series.
const SINHC_SERIES: f64 = 1e-4;
/// Below this `alpha`, `(a cosh a - sinh a)/a^3` is evaluated by its series.
const SINHC_DERIV_SERIES: f64 = 1e-2;
/// Below this `beta - 1`, `A(beta)` and `A'(beta)` use their series.
const ACOSHC_SERIES: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum LorentzError {
    #[error("curvature must be negative, got {0}")]
    InvalidCurvature(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("vectors need at least {min} coordinates, got {got}")]
    TooShort { min: usize, got: usize },
    #[error("tangent vector at the origin must have a zero first coordinate, got {0}")]
    NotTangent(f64),
    #[error("point is off the manifold (beta = {0})")]
    OffManifold(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Negative sectional curvature `c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self, LorentzError> {
        if c < 0.0 && c.is_finite() {
            Ok(Self(c))
        } else {
            Err(LorentzError::InvalidCurvature(c))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `sqrt(-c)`.
    pub fn sqrt_neg(self) -> f64 {
        (-self.0).sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self(-1.0)
    }
}

impl TryFrom<f64> for Curvature {
    type Error = LorentzError;
    fn try_from(c: f64) -> Result<Self, Self::Error> {
        Self::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LorentzPoint {
    coords: Vec<f64>,
}

impl LorentzPoint {
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// `|<x, x>_L - 1/c|`.
    pub fn manifold_residual(&self, c: Curvature) -> f64 {
        (minkowski(&self.coords, &self.coords) - 1.0 / c.value()).abs()
    }
}

/// Tangent vector at the origin; the first coordinate is always 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
}

impl TangentVector {
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Spatial part, i.e. the Euclidean vector this tangent lifts.
    pub fn spatial(&self) -> &[f64] {
        &self.coords[1..]
    }
}

fn minkowski(x: &[f64], y: &[f64]) -> f64 {
    -x[0] * y[0] + x[1..].iter().zip(&y[1..]).map(|(a, b)| a * b).sum::<f64>()
}

/// Lorentz scalar product `-x0*y0 + sum_i xi*yi`.
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64, LorentzError> {
    if x.len() != y.len() {
        return Err(LorentzError::DimensionMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(LorentzError::TooShort { min: 2, got: x.len() });
    }
    Ok(minkowski(x, y))
}

pub fn origin(c: Curvature, n: usize) -> Result<LorentzPoint, LorentzError> {
    if n < 1 {
        return Err(LorentzError::TooShort { min: 1, got: n });
    }
    let mut coords = vec![0.0; n + 1];
    coords[0] = 1.0 / c.sqrt_neg();
    Ok(LorentzPoint { coords })
}

/// `x -> [0, x]`.
pub fn lift_to_tangent(x: &[f64]) -> Result<TangentVector, LorentzError> {
    if x.is_empty() {
        return Err(LorentzError::TooShort { min: 1, got: 0 });
    }
    let mut coords = Vec::with_capacity(x.len() + 1);
    coords.push(0.0);
    coords.extend_from_slice(x);
    Ok(TangentVector { coords })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `sinh(a)/a`.
fn sinhc(a: f64) -> f64 {
    if a < SINHC_SERIES {
        let a2 = a * a;
        1.0 + a2 / 6.0 + a2 * a2 / 120.0
    } else {
        a.sinh() / a
    }
}

/// `(a cosh a - sinh a) / a^3`, i.e. `sinhc'(a)/a`.
fn sinhc_deriv_over_a(a: f64) -> f64 {
    if a < SINHC_DERIV_SERIES {
        let a2 = a * a;
        1.0 / 3.0 + a2 / 30.0 + a2 * a2 / 840.0 + a2 * a2 * a2 / 45360.0
    } else {
        (a * a.cosh() - a.sinh()) / (a * a * a)
    }
}

/// `acosh(b)/sqrt(b^2 - 1)` for `b >= 1`.
fn acoshc(b: f64) -> f64 {
    let d = b - 1.0;
    if d < ACOSHC_SERIES {
        1.0 - d / 3.0 + 2.0 * d * d / 15.0 - 2.0 * d * d * d / 35.0
    } else {
        b.acosh() / (d * (b + 1.0)).sqrt()
    }
}

fn acoshc_deriv(b: f64) -> f64 {
    let d = b - 1.0;
    if d < ACOSHC_SERIES {
        -1.0 / 3.0 + 4.0 * d / 15.0 - 6.0 * d * d / 35.0
    } else {
        (1.0 - b * acoshc(b)) / (d * (b + 1.0))
    }
}

/// Writes `exp0([0, v])` into `out` (length `v.len() + 1`).
fn exp_spatial_into(v: &[f64], k: f64, out: &mut [f64]) {
    let alpha = k * norm(v);
    out[0] = alpha.cosh() / k;
    let s = sinhc(alpha);
    for (o, x) in out[1..].iter_mut().zip(v) {
        *o = s * x;
    }
}

/// `beta = c <o, p>_L = k * p0`, checked against the manifold and clamped to 1.
fn log_beta(p0: f64, k: f64) -> Result<f64, f64> {
    let beta = k * p0;
    if !(beta >= 1.0 - BETA_TOLERANCE) {
        return Err(beta);
    }
    Ok(beta.max(1.0))
}

/// `cosh(a) o + sinh(a)/a z` with `a = sqrt(-c) |z|_L`.
pub fn exp_at_origin(z: &[f64], c: Curvature) -> Result<LorentzPoint, LorentzError> {
    if z.len() < 2 {
        return Err(LorentzError::TooShort { min: 2, got: z.len() });
    }
    if z[0] != 0.0 {
        return Err(LorentzError::NotTangent(z[0]));
    }
    let mut coords = vec![0.0; z.len()];
    exp_spatial_into(&z[1..], c.sqrt_neg(), &mut coords);
    Ok(LorentzPoint { coords })
}

/// `acosh(b)/sqrt(b^2-1) (p - b o)` with `b = c <o, p>_L`.
pub fn log_at_origin(p: &[f64], c: Curvature) -> Result<TangentVector, LorentzError> {
    if p.len() < 2 {
        return Err(LorentzError::TooShort { min: 2, got: p.len() });
    }
    let k = c.sqrt_neg();
    let beta = log_beta(p[0], k).map_err(LorentzError::OffManifold)?;
    let a = acoshc(beta);
    let mut coords = Vec::with_capacity(p.len());
    coords.push(0.0);
    coords.extend(p[1..].iter().map(|x| a * x));
    Ok(TangentVector { coords })
}

/// `exp0(M^(log0(p)))` where `M^` maps `[v0, vs]` to `[0, M vs]`.
/// `m` is `out_dim x n` for a point of the `n`-dimensional model.
pub fn lorentz_linear_transform(p: &[f64], m: &Tensor, c: Curvature) -> Result<LorentzPoint, LorentzError> {
    let n = p.len().saturating_sub(1);
    if m.cols() != n {
        return Err(LorentzError::DimensionMismatch(m.cols(), n));
    }
    let v = log_at_origin(p, c)?;
    let mv = Tensor::row(v.spatial().to_vec()).matmul_t(m)?;
    exp_at_origin(lift_to_tangent(mv.data())?.coords(), c)
}

/// Row-wise Lorentz linear layer: `log0(M_c(exp0(lift(x))))`, projected to
/// the spatial coordinates. `x` is `rows x n` (or a single vector), `m` is
/// `out_dim x n`; the result is `rows x out_dim`.
pub fn lorentz_linear_layer(x: &Tensor, m: &Tensor, c: Curvature) -> Result<Tensor, LorentzError> {
    let mut g = Graph::new();
    let xv = g.constant(x.as_matrix());
    let mv = g.constant(m.as_matrix());
    let out = lorentz_linear(&mut g, xv, mv, c)?;
    g.ensure_finite()?;
    Ok(g.value(out).clone())
}

/// Differentiable row-wise `v -> exp0([0, v])`: `rows x n` to `rows x (n+1)`.
struct ExpMapOrigin {
    k: f64,
}

impl CustomOp for ExpMapOrigin {
    fn name(&self) -> &'static str {
        "exp_map_origin"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError> {
        let v = inputs[0];
        let (r, n) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(&[r, n + 1]);
        for i in 0..r {
            exp_spatial_into(v.row_slice(i), self.k, out.row_slice_mut(i));
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let v = inputs[0];
        let k = self.k;
        let mut gv = Tensor::zeros(&[v.rows(), v.cols()]);
        for i in 0..v.rows() {
            let zs = v.row_slice(i);
            let g = grad.row_slice(i);
            let (g0, gs) = (g[0], &g[1..]);
            let alpha = k * norm(zs);
            let s = sinhc(alpha);
            let t = sinhc_deriv_over_a(alpha);
            let zg: f64 = zs.iter().zip(gs).map(|(a, b)| a * b).sum();
            let coef = g0 * k * s + k * k * t * zg;
            for ((o, &z), &gj) in gv.row_slice_mut(i).iter_mut().zip(zs).zip(gs) {
                *o = coef * z + s * gj;
            }
        }
        vec![gv]
    }
}

/// Differentiable row-wise spatial part of `log0(p)`: `rows x (n+1)` to `rows x n`.
struct LogMapOrigin {
    k: f64,
}

impl CustomOp for LogMapOrigin {
    fn name(&self) -> &'static str {
        "log_map_origin"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError> {
        let p = inputs[0];
        let (r, n1) = (p.rows(), p.cols());
        if n1 < 2 {
            return Err(NumericsError::ShapeMismatch {
                op: "log_map_origin",
                detail: format!("points need at least 2 coordinates, got {n1}"),
            });
        }
        let mut out = Tensor::zeros(&[r, n1 - 1]);
        for i in 0..r {
            let row = p.row_slice(i);
            let beta = log_beta(row[0], self.k).map_err(|beta| NumericsError::Domain {
                op: "log_map_origin",
                detail: format!("row {i} is off the manifold (beta = {beta})"),
            })?;
            let a = acoshc(beta);
            for (o, x) in out.row_slice_mut(i).iter_mut().zip(&row[1..]) {
                *o = a * x;
            }
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let p = inputs[0];
        let k = self.k;
        let mut gp = Tensor::zeros(&[p.rows(), p.cols()]);
        for i in 0..p.rows() {
            let row = p.row_slice(i);
            let g = grad.row_slice(i);
            let beta = (k * row[0]).max(1.0);
            let a = acoshc(beta);
            let da = acoshc_deriv(beta);
            let pg: f64 = row[1..].iter().zip(g).map(|(x, y)| x * y).sum();
            let out = gp.row_slice_mut(i);
            out[0] = k * da * pg;
            for (o, gj) in out[1..].iter_mut().zip(g) {
                *o = a * gj;
            }
        }
        vec![gp]
    }
}

/// Row-wise `exp0` of lifted Euclidean rows on a graph.
pub fn exp_map_origin(g: &mut Graph, v: Var, c: Curvature) -> Result<Var, NumericsError> {
    g.custom(Arc::new(ExpMapOrigin { k: c.sqrt_neg() }), &[v])
}

/// Row-wise spatial part of `log0` on a graph.
pub fn log_map_origin(g: &mut Graph, p: Var, c: Curvature) -> Result<Var, NumericsError> {
    g.custom(Arc::new(LogMapOrigin { k: c.sqrt_neg() }), &[p])
}

/// Lorentz linear layer on a graph. `x` is `rows x n`, `m` is `out x n`.
pub fn lorentz_linear(g: &mut Graph, x: Var, m: Var, c: Curvature) -> Result<Var, NumericsError> {
    let on_manifold = exp_map_origin(g, x, c)?;
    let tangent = log_map_origin(g, on_manifold, c)?;
    let mapped = g.matmul_t(tangent, m)?;
    let image = exp_map_origin(g, mapped, c)?;
    log_map_origin(g, image, c)
}
