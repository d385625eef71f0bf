//! Poincaré-ball primitives at curvature −1.
//!
//! Every kernel comes in two flavours: a checked API over [`BallPoint`] /
//! [`TangentVector`] and a raw slice kernel with a matching vector-Jacobian
//! product (`*_vjp`) used by the autodiff tape. All arithmetic is `f64`.

use crate::error::{Error, Result};

/// Boundary margin of the ball.
pub const BALL_EPS: f64 = 1e-5;
/// Largest admissible norm of a ball point.
pub const MAX_NORM: f64 = 1.0 - BALL_EPS;
/// Rounding slack accepted on top of [`MAX_NORM`]; projected points land on
/// `MAX_NORM` up to a few ulps.
const NORM_SLACK: f64 = 1e-12;
/// Below this norm the log map switches to its Taylor series.
const SERIES_CUTOFF: f64 = 0.1;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    sq_norm(a).sqrt()
}

fn check_in_ball(coords: &[f64]) -> Result<()> {
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("ball point has non-finite coordinates".into()));
    }
    let n = norm(coords);
    if n > MAX_NORM + NORM_SLACK {
        return Err(Error::Domain(format!(
            "point norm {n} exceeds ball radius {MAX_NORM}"
        )));
    }
    Ok(())
}

/// A point of the open unit ball, kept at least `BALL_EPS` away from the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint(Vec<f64>);

impl BallPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Domain("ball point must have dim >= 1".into()));
        }
        check_in_ball(&coords)?;
        Ok(BallPoint(coords))
    }

    pub fn origin(dim: usize) -> Self {
        BallPoint(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A flat-space vector, output of the log map.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("tangent vector has non-finite entries".into()));
        }
        Ok(TangentVector(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn same_dim(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Structure(format!(
            "dimension mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Hyperbolic distance `arccosh(1 + 2‖x−y‖² / ((1−‖x‖²)(1−‖y‖²)))`.
pub fn poincare_distance(x: &BallPoint, y: &BallPoint) -> Result<f64> {
    same_dim(&x.0, &y.0)?;
    Ok(distance_raw(&x.0, &y.0))
}

/// Distance on raw coordinates; rejects points outside the admissible ball.
pub fn distance(x: &[f64], y: &[f64]) -> Result<f64> {
    same_dim(x, y)?;
    check_in_ball(x)?;
    check_in_ball(y)?;
    Ok(distance_raw(x, y))
}

#[inline]
fn distance_parts(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64) {
    let diff: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    let alpha = 1.0 - sq_norm(x);
    let beta = 1.0 - sq_norm(y);
    let delta = 2.0 * diff / (alpha * beta);
    (diff, alpha, beta, delta)
}

/// Unchecked distance kernel. `arccosh(1+δ)` is evaluated as
/// `ln_1p(δ + sqrt(δ(δ+2)))` to keep precision for nearby points.
pub fn distance_raw(x: &[f64], y: &[f64]) -> f64 {
    let (_, _, _, delta) = distance_parts(x, y);
    (delta + (delta * (delta + 2.0)).sqrt()).ln_1p()
}

/// Gradient of the distance scaled by `g`, accumulated into `gx`, `gy`.
/// At `x == y` the distance is not differentiable; the zero subgradient is used.
pub fn distance_vjp(x: &[f64], y: &[f64], g: f64, gx: &mut [f64], gy: &mut [f64]) {
    let (diff, alpha, beta, delta) = distance_parts(x, y);
    if delta <= 0.0 {
        return;
    }
    let dd = g / (delta * (delta + 2.0)).sqrt();
    let c_diff = 4.0 / (alpha * beta);
    let cx = 4.0 * diff / (alpha * alpha * beta);
    let cy = 4.0 * diff / (alpha * beta * beta);
    for k in 0..x.len() {
        let d = x[k] - y[k];
        gx[k] += dd * (c_diff * d + cx * x[k]);
        gy[k] += dd * (-c_diff * d + cy * y[k]);
    }
}

/// Möbius addition `x ⊕ y`, re-projected if rounding pushes it onto the boundary.
pub fn mobius_add(x: &BallPoint, y: &BallPoint) -> Result<BallPoint> {
    same_dim(&x.0, &y.0)?;
    let mut out = vec![0.0; x.dim()];
    let den = mobius_add_raw(&x.0, &y.0, &mut out);
    if den < 1e-12 {
        return Err(Error::Degenerate(format!(
            "Möbius denominator {den:e} below 1e-12"
        )));
    }
    Ok(BallPoint(project_in_place(out)))
}

/// Writes the unprojected `x ⊕ y` into `out` and returns the denominator.
pub fn mobius_add_raw(x: &[f64], y: &[f64], out: &mut [f64]) -> f64 {
    let xy = dot(x, y);
    let nx = sq_norm(x);
    let ny = sq_norm(y);
    let cx = 1.0 + 2.0 * xy + ny;
    let cy = 1.0 - nx;
    let den = 1.0 + 2.0 * xy + nx * ny;
    for k in 0..x.len() {
        out[k] = (cx * x[k] + cy * y[k]) / den;
    }
    den
}

/// Vector-Jacobian product of the unprojected Möbius sum.
pub fn mobius_add_vjp(x: &[f64], y: &[f64], g: &[f64], gx: &mut [f64], gy: &mut [f64]) {
    let xy = dot(x, y);
    let nx = sq_norm(x);
    let ny = sq_norm(y);
    let cx = 1.0 + 2.0 * xy + ny;
    let cy = 1.0 - nx;
    let den = 1.0 + 2.0 * xy + nx * ny;
    let xg = dot(x, g);
    let yg = dot(y, g);
    // numerator · g
    let ng = cx * xg + cy * yg;
    let q = ng / (den * den);
    for k in 0..x.len() {
        let jx = cx * g[k] + 2.0 * y[k] * xg - 2.0 * x[k] * yg;
        gx[k] += jx / den - q * (2.0 * y[k] + 2.0 * ny * x[k]);
        let jy = xg * (2.0 * x[k] + 2.0 * y[k]) + cy * g[k];
        gy[k] += jy / den - q * (2.0 * x[k] + 2.0 * nx * y[k]);
    }
}

/// Möbius addition followed by boundary projection, with its VJP.
pub fn mobius_add_projected_raw(x: &[f64], y: &[f64], out: &mut [f64]) {
    mobius_add_raw(x, y, out);
    let n = norm(out);
    if n >= MAX_NORM {
        let s = MAX_NORM / n;
        out.iter_mut().for_each(|v| *v *= s);
    }
}

pub fn mobius_add_projected_vjp(
    x: &[f64],
    y: &[f64],
    g: &[f64],
    gx: &mut [f64],
    gy: &mut [f64],
) {
    let mut raw = vec![0.0; x.len()];
    mobius_add_raw(x, y, &mut raw);
    let mut g_raw = vec![0.0; x.len()];
    exp_project_vjp(&raw, g, &mut g_raw);
    mobius_add_vjp(x, y, &g_raw, gx, gy);
}

fn project_in_place(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n >= MAX_NORM {
        let s = MAX_NORM / n;
        v.iter_mut().for_each(|c| *c *= s);
    }
    v
}

/// Moves a flat vector into the ball: identity inside radius `1 − ε`,
/// radial rescale onto that radius otherwise.
pub fn exp_project(v: &[f64]) -> Result<BallPoint> {
    if v.is_empty() {
        return Err(Error::Domain("cannot project an empty vector".into()));
    }
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::Domain("cannot project a non-finite vector".into()));
    }
    Ok(BallPoint(project_in_place(v.to_vec())))
}

pub fn exp_project_raw(v: &[f64], out: &mut [f64]) {
    let n = norm(v);
    let s = if n >= MAX_NORM { MAX_NORM / n } else { 1.0 };
    for (o, c) in out.iter_mut().zip(v) {
        *o = c * s;
    }
}

pub fn exp_project_vjp(v: &[f64], g: &[f64], gv: &mut [f64]) {
    let n = norm(v);
    if n < MAX_NORM {
        for (o, gk) in gv.iter_mut().zip(g) {
            *o += gk;
        }
        return;
    }
    let s = MAX_NORM / n;
    let vg = dot(v, g) / (n * n);
    for k in 0..v.len() {
        gv[k] += s * (g[k] - v[k] * vg);
    }
}

/// `2·artanh(n)/n` and `(d/dn)(2·artanh(n)/n) / n` for `n = ‖y‖`.
fn log_scale(n: f64) -> (f64, f64) {
    if n < SERIES_CUTOFF {
        // artanh(n)/n = Σ n^{2k}/(2k+1)
        let n2 = n * n;
        let mut f = 0.0;
        let mut df = 0.0;
        let mut pow = 1.0;
        for k in 0..12 {
            let kf = k as f64;
            f += pow / (2.0 * kf + 1.0);
            if k + 1 < 12 {
                let kk = kf + 1.0;
                df += 2.0 * kk * pow / (2.0 * kk + 1.0);
            }
            pow *= n2;
        }
        (2.0 * f, 2.0 * df)
    } else {
        let at = n.atanh();
        let f = 2.0 * at / n;
        let fp = (2.0 / (1.0 - n * n) * n - 2.0 * at) / (n * n);
        (f, fp / n)
    }
}

/// Logarithmic map at the origin, `2·artanh(‖y‖)·y/‖y‖`; the origin maps to zero.
pub fn log_origin(y: &BallPoint) -> TangentVector {
    let mut out = vec![0.0; y.dim()];
    log_origin_raw(&y.0, &mut out);
    TangentVector(out)
}

pub fn log_origin_raw(y: &[f64], out: &mut [f64]) {
    let (f, _) = log_scale(norm(y));
    for (o, c) in out.iter_mut().zip(y) {
        *o = f * c;
    }
}

pub fn log_origin_vjp(y: &[f64], g: &[f64], gy: &mut [f64]) {
    let (f, fpn) = log_scale(norm(y));
    let yg = dot(y, g);
    for k in 0..y.len() {
        gy[k] += f * g[k] + y[k] * fpn * yg;
    }
}

/// Exact exponential map at the origin, `tanh(‖v‖/2)·v/‖v‖`.
///
/// Not used by the model (which projects instead); kept as the inverse of
/// [`log_origin`] for round-trip checks.
pub fn exp_origin(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    let s = (n / 2.0).tanh() / n;
    v.iter().map(|c| c * s).collect()
}
