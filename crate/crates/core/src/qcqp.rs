//! Precoder update: a convex QCQP in the precoder, solved by a primal-dual
//! interior-point method on its second-order-cone form.
//!
//! For fixed equalizers and weights the update reads
//!
//! ```text
//! minimise    xi_c + sum_k ( sum_i p_i^H Psi_k p_i - 2 Re f_k^H p_k )
//! subject to  xi_c,k(P) <= xi_c          for every user k
//!             ||P||_F^2 <= P_t
//! ```
//!
//! where `xi_c,k(P)` is the sample-averaged common AWMSE of user k. In
//! broadcast mode the common column and `xi_c` are absent and the common term
//! is the constant 1.
//!
//! Each convex quadratic constraint `||R x||^2 + a^T x + c <= 0` is written as
//! the cone constraint `(t + 1, 2 R x, t - 1) in SOC` with `t = -(a^T x + c)`,
//! where `R` is a real lift of the Cholesky factor of the quadratic form. The
//! private part of the objective gets an epigraph variable `tau`.

use std::io::Write;

use crate::awsmse::{AwmmseComponents, ObjectiveMode};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_psd, dot, norm_sqr, ComplexMatrix, HermitianPsd, C64, EPS_PSD};
use crate::receivers::{PrecoderMatrix, EPS_POW};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Fraction of the distance to the cone boundary taken per step.
const STEP_FRACTION: f64 = 0.99;

/// Data of one precoder-update problem.
#[derive(Debug, Clone, PartialEq)]
pub struct QcqpProblem {
    n_t: usize,
    k: usize,
    mode: ObjectiveMode,
    psi_p: Vec<HermitianPsd>,
    psi_sum: HermitianPsd,
    f_p: Vec<Vec<C64>>,
    psi_c: Vec<HermitianPsd>,
    f_c: Vec<Vec<C64>>,
    common_const: Vec<f64>,
    p_t: f64,
    omitted_constant: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolverStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

impl std::fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolverStatus::Optimal => "optimal",
            SolverStatus::MaxIter => "max_iter",
            SolverStatus::Infeasible => "infeasible",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcqpSolution {
    pub p_star: PrecoderMatrix,
    pub xi_c_star: f64,
    /// Problem objective at `p_star`, without the omitted constant.
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolverStatus,
    /// Multipliers of the common constraints (empty in broadcast mode).
    pub lambda: Vec<f64>,
    /// Multiplier of the power constraint.
    pub mu: f64,
}

impl QcqpProblem {
    /// Assembles the update problem from per-user components.
    pub fn build(
        components: &[AwmmseComponents],
        sigma_n2: f64,
        p_t: f64,
        mode: ObjectiveMode,
    ) -> Result<Self> {
        let k = components.len();
        if k == 0 {
            return Err(Error::Dimension("no users".into()));
        }
        let n_t = components[0].f_p.len();
        for c in components {
            if c.f_p.len() != n_t
                || c.f_c.len() != n_t
                || c.psi_c.dim() != n_t
                || c.psi_p.dim() != n_t
            {
                return Err(Error::Dimension(
                    "component dimensions differ between users".into(),
                ));
            }
        }
        if !p_t.is_finite() || !sigma_n2.is_finite() {
            return Err(Error::InvalidInput(
                "power budget and noise variance must be finite".into(),
            ));
        }
        let mut psi_sum = HermitianPsd::zeros(n_t);
        for c in components {
            psi_sum.add_scaled(1.0, &c.psi_p);
        }
        let common_const: Vec<f64> = components
            .iter()
            .map(|c| c.common_constant(sigma_n2))
            .collect();
        if common_const.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite constraint constant".into()));
        }
        Ok(Self {
            n_t,
            k,
            mode,
            psi_p: components.iter().map(|c| c.psi_p.clone()).collect(),
            psi_sum,
            f_p: components.iter().map(|c| c.f_p.clone()).collect(),
            psi_c: components.iter().map(|c| c.psi_c.clone()).collect(),
            f_c: components.iter().map(|c| c.f_c.clone()).collect(),
            common_const,
            p_t,
            omitted_constant: components
                .iter()
                .map(|c| c.private_constant(sigma_n2))
                .sum(),
        })
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mode(&self) -> ObjectiveMode {
        self.mode
    }

    pub fn power_budget(&self) -> f64 {
        self.p_t
    }

    /// `sum_k (sigma^2 t_k + u_k - v_k)`-type constant dropped from the
    /// objective; adding it gives the AWSMSE.
    pub fn omitted_constant(&self) -> f64 {
        self.omitted_constant
    }

    /// Common AWMSE of user `k` at `p`.
    pub fn common_value(&self, k: usize, p: &PrecoderMatrix) -> f64 {
        let psi = &self.psi_c[k];
        let quad: f64 = (0..=self.k).map(|j| psi.quad_form(p.column(j))).sum();
        quad - 2.0 * dot(&self.f_c[k], p.common()).re + self.common_const[k]
    }

    /// Private part of the objective, without the omitted constant.
    pub fn private_value(&self, p: &PrecoderMatrix) -> f64 {
        (0..self.k)
            .map(|i| {
                self.psi_sum.quad_form(p.private(i)) - 2.0 * dot(&self.f_p[i], p.private(i)).re
            })
            .sum()
    }

    /// Smallest feasible `xi_c` at `p` (1 in broadcast mode).
    pub fn common_level(&self, p: &PrecoderMatrix) -> f64 {
        match self.mode {
            ObjectiveMode::Joint => (0..self.k)
                .map(|k| self.common_value(k, p))
                .fold(f64::NEG_INFINITY, f64::max),
            ObjectiveMode::BroadcastOnly => 1.0,
        }
    }

    /// Objective at `p` with `xi_c` at its smallest feasible value.
    pub fn objective_at(&self, p: &PrecoderMatrix) -> f64 {
        self.common_level(p) + self.private_value(p)
    }

    fn check_shape(&self, p: &PrecoderMatrix) -> Result<()> {
        if p.n_t() != self.n_t || p.k() != self.k {
            return Err(Error::Dimension(format!(
                "precoder is {}x{}, problem needs {}x{}",
                p.n_t(),
                p.k() + 1,
                self.n_t,
                self.k + 1
            )));
        }
        Ok(())
    }

    /// Writes the instance as plain text: dimensions, budget, then every
    /// matrix and vector row-major as `re im` pairs.
    pub fn dump<W: Write>(&self, mut out: W) -> Result<()> {
        let mode = match self.mode {
            ObjectiveMode::Joint => "joint",
            ObjectiveMode::BroadcastOnly => "broadcast",
        };
        writeln!(out, "n_t {} k {} mode {}", self.n_t, self.k, mode)?;
        writeln!(out, "p_t {:?}", self.p_t)?;
        writeln!(out, "omitted_constant {:?}", self.omitted_constant)?;
        let write_mat = |out: &mut W, name: &str, m: &HermitianPsd| -> Result<()> {
            writeln!(out, "{name}")?;
            for i in 0..m.dim() {
                let row: Vec<String> = (0..m.dim())
                    .map(|j| format!("{:?} {:?}", m.get(i, j).re, m.get(i, j).im))
                    .collect();
                writeln!(out, "{}", row.join(" "))?;
            }
            Ok(())
        };
        let write_vec = |out: &mut W, name: &str, v: &[C64]| -> Result<()> {
            let row: Vec<String> = v.iter().map(|z| format!("{:?} {:?}", z.re, z.im)).collect();
            writeln!(out, "{name}\n{}", row.join(" "))?;
            Ok(())
        };
        for k in 0..self.k {
            write_mat(&mut out, &format!("psi_p {k}"), &self.psi_p[k])?;
            write_vec(&mut out, &format!("f_p {k}"), &self.f_p[k])?;
            write_mat(&mut out, &format!("psi_c {k}"), &self.psi_c[k])?;
            write_vec(&mut out, &format!("f_c {k}"), &self.f_c[k])?;
            writeln!(out, "common_const {k} {:?}", self.common_const[k])?;
        }
        Ok(())
    }
}

/// Normalised KKT residual of `sol` for `q`: the largest of stationarity,
/// primal feasibility, dual feasibility and complementarity violations.
pub fn kkt_residual(q: &QcqpProblem, sol: &QcqpSolution) -> f64 {
    kkt_parts(q, &sol.p_star, sol.xi_c_star, &sol.lambda, sol.mu).unwrap_or(f64::INFINITY)
}

fn kkt_parts(
    q: &QcqpProblem,
    p: &PrecoderMatrix,
    xi_c: f64,
    lambda: &[f64],
    mu: f64,
) -> Option<f64> {
    if p.n_t() != q.n_t || p.k() != q.k {
        return None;
    }
    let joint = q.mode == ObjectiveMode::Joint;
    if joint && lambda.len() != q.k {
        return None;
    }
    let mut res: f64 = 0.0;
    let sqrt_pt = q.p_t.max(0.0).sqrt().max(f64::MIN_POSITIVE);

    // Stationarity, measured relative to the size of the terms involved and
    // multiplied by sqrt(P_t) to make it dimensionless.
    let mut column_residual = |terms: &[Vec<C64>]| {
        let mut sum = vec![C64::new(0.0, 0.0); q.n_t];
        let mut mag = 0.0f64;
        for t in terms {
            for (s, x) in sum.iter_mut().zip(t) {
                *s += x;
            }
            mag = mag.max(norm_sqr(t).sqrt());
        }
        let r = norm_sqr(&sum).sqrt();
        res = res.max(r * sqrt_pt / (1.0 + mag * sqrt_pt));
    };
    let axpy = |a: f64, v: Vec<C64>| -> Vec<C64> { v.into_iter().map(|x| x * a).collect() };
    if joint {
        let pc = p.common();
        let mut terms = Vec::new();
        for k in 0..q.k {
            terms.push(axpy(lambda[k], q.psi_c[k].mul_vec(pc)));
            terms.push(axpy(-lambda[k], q.f_c[k].clone()));
        }
        terms.push(axpy(mu, pc.to_vec()));
        column_residual(&terms);
    }
    for i in 0..q.k {
        let pi = p.private(i);
        let mut terms = vec![
            q.psi_sum.mul_vec(pi),
            axpy(-1.0, q.f_p[i].clone()),
            axpy(mu, pi.to_vec()),
        ];
        if joint {
            for k in 0..q.k {
                terms.push(axpy(lambda[k], q.psi_c[k].mul_vec(pi)));
            }
        }
        column_residual(&terms);
    }
    if !joint && norm_sqr(p.common()) > 0.0 {
        res = res.max(norm_sqr(p.common()) / q.p_t.max(f64::MIN_POSITIVE));
    }

    // Primal feasibility, complementarity and dual feasibility.
    if joint {
        let lsum: f64 = lambda.iter().sum();
        res = res.max((1.0 - lsum).abs());
        for k in 0..q.k {
            let g = q.common_value(k, p);
            let scale = 1.0 + g.abs().max(xi_c.abs());
            res = res.max((g - xi_c).max(0.0) / scale);
            res = res.max(lambda[k] * (xi_c - g).abs() / scale);
            res = res.max((-lambda[k]).max(0.0));
        }
    }
    let pw = p.power();
    let pt = q.p_t.max(f64::MIN_POSITIVE);
    res = res.max((pw - q.p_t).max(0.0) / pt);
    res = res.max(mu * pt * (q.p_t - pw).abs() / pt / (1.0 + mu * pt));
    res = res.max((-mu).max(0.0));
    if res.is_nan() {
        return Some(f64::INFINITY);
    }
    Some(res)
}

/// One second-order cone block `G x + s = h`, `s in SOC`.
#[derive(Debug, Clone)]
struct Cone {
    /// Row-major `dim x n`.
    g: Vec<f64>,
    h: Vec<f64>,
    dim: usize,
    /// Factor mapping the cone multiplier back to the unscaled constraint.
    scale: f64,
}

/// Variable layout of the lifted real problem.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n_t: usize,
    ncol: usize,
    first_private: usize,
    xi: Option<usize>,
    tau: usize,
    n: usize,
}

impl Layout {
    fn new(q: &QcqpProblem) -> Self {
        let joint = q.mode == ObjectiveMode::Joint;
        let ncol = if joint { q.k + 1 } else { q.k };
        let base = 2 * q.n_t * ncol;
        let (xi, tau, n) = if joint {
            (Some(base), base + 1, base + 2)
        } else {
            (None, base, base + 1)
        };
        Self {
            n_t: q.n_t,
            ncol,
            first_private: usize::from(joint),
            xi,
            tau,
            n,
        }
    }

    /// Offset of precoder column `j` (0 = common) in `x`, if present.
    fn column_offset(&self, j: usize) -> Option<usize> {
        if self.first_private == 1 {
            Some(2 * self.n_t * j)
        } else if j == 0 {
            None
        } else {
            Some(2 * self.n_t * (j - 1))
        }
    }
}

/// Real lift of `L^H` for lower-triangular `L`, acting on `[Re p; Im p]`.
fn lift_adjoint(l: &ComplexMatrix) -> Vec<f64> {
    let d = l.rows();
    let mut out = vec![0.0; 4 * d * d];
    let w = 2 * d;
    for i in 0..d {
        for j in 0..d {
            // (L^H)_{ij} = conj(L_{ji})
            let z = l[(j, i)].conj();
            out[i * w + j] = z.re;
            out[i * w + d + j] = -z.im;
            out[(d + i) * w + j] = z.im;
            out[(d + i) * w + d + j] = z.re;
        }
    }
    out
}

fn factor(psi: &HermitianPsd) -> Result<ComplexMatrix> {
    match cholesky_psd(psi, 0.0) {
        Ok(l) => Ok(l),
        Err(Error::NotPsd { .. }) => {
            let shift = 1e-12 * psi.trace().max(0.0) / psi.dim() as f64;
            cholesky_psd(psi, shift)
                .map_err(|e| Error::NumericalBreakdown(format!("quadratic form is not PSD: {e}")))
        }
        Err(e) => Err(e),
    }
}

/// Builds the cone `||R x||^2 + a^T x + c <= 0` with `R` given as
/// row-major blocks `(rows, x offset, 2 n_t x 2 n_t matrix)`.
fn quad_cone(
    n: usize,
    blocks: &[(usize, &[f64])],
    width: usize,
    a: &[f64],
    c: f64,
    scale: f64,
) -> Cone {
    let rows = blocks.len() * width;
    let dim = rows + 2;
    let mut g = vec![0.0; dim * n];
    let mut h = vec![0.0; dim];
    g[..n].copy_from_slice(a);
    g[(dim - 1) * n..].copy_from_slice(a);
    h[0] = 1.0 - c;
    h[dim - 1] = -1.0 - c;
    for (b, (off, r)) in blocks.iter().enumerate() {
        for i in 0..width {
            let row = 1 + b * width + i;
            for j in 0..width {
                g[row * n + off + j] = -2.0 * r[i * width + j];
            }
        }
    }
    Cone { g, h, dim, scale }
}

fn build_cones(q: &QcqpProblem, lay: &Layout, s: f64) -> Result<Vec<Cone>> {
    let n = lay.n;
    let d = q.n_t;
    let w = 2 * d;
    let mut cones = Vec::new();

    let lift_scaled = |psi: &HermitianPsd| -> Result<Vec<f64>> {
        let l = factor(psi)?;
        Ok(lift_adjoint(&l).into_iter().map(|x| x * s).collect())
    };

    // Private epigraph.
    let r_sum = lift_scaled(&q.psi_sum)?;
    let mut a = vec![0.0; n];
    let mut blocks = Vec::new();
    for i in 0..q.k {
        let off = lay.column_offset(i + 1).expect("private column present");
        for t in 0..d {
            a[off + t] = -2.0 * q.f_p[i][t].re * s;
            a[off + d + t] = -2.0 * q.f_p[i][t].im * s;
        }
        blocks.push((off, r_sum.as_slice()));
    }
    a[lay.tau] = -1.0;
    cones.push(quad_cone(n, &blocks, w, &a, 0.0, 1.0));

    // Common constraints.
    if let Some(xi) = lay.xi {
        for k in 0..q.k {
            let r = lift_scaled(&q.psi_c[k])?;
            let mut a = vec![0.0; n];
            for t in 0..d {
                a[t] = -2.0 * q.f_c[k][t].re * s;
                a[d + t] = -2.0 * q.f_c[k][t].im * s;
            }
            a[xi] = -1.0;
            let blocks: Vec<(usize, &[f64])> =
                (0..lay.ncol).map(|j| (j * w, r.as_slice())).collect();
            cones.push(quad_cone(n, &blocks, w, &a, q.common_const[k], 1.0));
        }
    }

    // Power, in variables scaled by sqrt(P_t): ||x_P||^2 <= 1.
    let ident: Vec<f64> = (0..w * w)
        .map(|i| if i / w == i % w { 1.0 } else { 0.0 })
        .collect();
    let blocks: Vec<(usize, &[f64])> = (0..lay.ncol).map(|j| (j * w, ident.as_slice())).collect();
    cones.push(quad_cone(n, &blocks, w, &vec![0.0; n], -1.0, q.p_t));
    Ok(cones)
}

// ---- SOC algebra -------------------------------------------------------

fn jdot(u: &[f64], v: &[f64]) -> f64 {
    u[0] * v[0] - u[1..].iter().zip(&v[1..]).map(|(a, b)| a * b).sum::<f64>()
}

fn rdot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Jordan product `u o v`.
fn jprod(u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(u.len());
    out.push(rdot(u, v));
    for i in 1..u.len() {
        out.push(u[0] * v[i] + v[0] * u[i]);
    }
    out
}

/// Solves `l o x = v` for `l` in the cone interior.
fn jsolve(l: &[f64], v: &[f64]) -> Vec<f64> {
    let det = jdot(l, l);
    let u0 = (l[0] * v[0] - rdot(&l[1..], &v[1..])) / det;
    let mut out = Vec::with_capacity(l.len());
    out.push(u0);
    for i in 1..l.len() {
        out.push((v[i] - u0 * l[i]) / l[0]);
    }
    out
}

/// Nesterov-Todd scaling of one cone: `W = eta (2 w w^T - J)` with
/// `w^T J w = 1`.
#[derive(Debug, Clone)]
struct NtScaling {
    w: Vec<f64>,
    eta: f64,
}

impl NtScaling {
    fn new(s: &[f64], z: &[f64]) -> Self {
        let ns = jdot(s, s).sqrt();
        let nz = jdot(z, z).sqrt();
        let sb: Vec<f64> = s.iter().map(|x| x / ns).collect();
        let zb: Vec<f64> = z.iter().map(|x| x / nz).collect();
        let gamma = ((1.0 + rdot(&zb, &sb)) / 2.0).sqrt();
        let mut w: Vec<f64> = sb.iter().zip(&zb).map(|(a, b)| -> f64 { a - b }).collect();
        w[0] = sb[0] + zb[0];
        for x in &mut w {
            *x /= 2.0 * gamma;
        }
        // Scaling point w -> generator v = (w + e) / sqrt(2 (w_0 + 1)).
        let denom = (2.0 * (w[0] + 1.0)).sqrt();
        w[0] += 1.0;
        for x in &mut w {
            *x /= denom;
        }
        Self {
            w,
            eta: (ns / nz).sqrt(),
        }
    }

    /// `W v`.
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let c = 2.0 * rdot(&self.w, v);
        let mut out: Vec<f64> = v
            .iter()
            .zip(&self.w)
            .map(|(x, w)| self.eta * (c * w + x))
            .collect();
        out[0] = self.eta * (c * self.w[0] - v[0]);
        out
    }

    /// `W^{-1} v`.
    fn apply_inv(&self, v: &[f64]) -> Vec<f64> {
        // W^{-1} = (2 J w w^T J - J) / eta
        let c = 2.0 * jdot(&self.w, v);
        let mut out: Vec<f64> = v
            .iter()
            .zip(&self.w)
            .map(|(x, w)| (-c * w + x) / self.eta)
            .collect();
        out[0] = (c * self.w[0] - v[0]) / self.eta;
        out
    }
}

/// Largest `alpha` keeping `x + alpha d` in the closed cone (may be infinite).
fn max_step(x: &[f64], d: &[f64]) -> f64 {
    let a = jdot(d, d);
    let b = jdot(x, d);
    let c = jdot(x, x).max(0.0);
    let mut best = f64::INFINITY;
    let mut consider = |r: f64| {
        if r > 0.0 && r < best {
            best = r;
        }
    };
    if a.abs() <= 1e-300 {
        if b < 0.0 {
            consider(-c / (2.0 * b));
        }
    } else {
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            let qq = -(b + b.signum() * sq);
            if qq != 0.0 {
                consider(qq / a);
                consider(c / qq);
            } else {
                consider(-b / a);
            }
        }
    }
    // The first component must also stay nonnegative.
    if d[0] < 0.0 {
        consider(-x[0] / d[0]);
    }
    best
}

// ---- dense real helpers --------------------------------------------------

fn chol_real(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return false;
        }
        let l = d.sqrt();
        a[j * n + j] = l;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / l;
        }
    }
    true
}

fn chol_solve_real(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

// ---- interior-point iteration ---------------------------------------------

struct Ipm<'a> {
    cones: &'a [Cone],
    n: usize,
    c: Vec<f64>,
}

struct Iterate {
    x: Vec<f64>,
    s: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
}

impl Ipm<'_> {
    fn gx(&self, cone: &Cone, x: &[f64]) -> Vec<f64> {
        (0..cone.dim)
            .map(|r| rdot(&cone.g[r * self.n..(r + 1) * self.n], x))
            .collect()
    }

    fn gtz_add(&self, cone: &Cone, z: &[f64], out: &mut [f64]) {
        for (r, zr) in z.iter().enumerate() {
            if *zr != 0.0 {
                for (o, g) in out.iter_mut().zip(&cone.g[r * self.n..(r + 1) * self.n]) {
                    *o += g * zr;
                }
            }
        }
    }

    fn residuals(&self, it: &Iterate) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut rx = self.c.clone();
        let mut rz = Vec::with_capacity(self.cones.len());
        for (i, cone) in self.cones.iter().enumerate() {
            self.gtz_add(cone, &it.z[i], &mut rx);
            let gx = self.gx(cone, &it.x);
            rz.push(
                (0..cone.dim)
                    .map(|r| gx[r] + it.s[i][r] - cone.h[r])
                    .collect(),
            );
        }
        (rx, rz)
    }

    /// Factorises `G^T W^{-2} G` and returns it with the scaled blocks
    /// `W^{-1} G` per cone (stored column-major by variable).
    fn factor(&self, scal: &[NtScaling]) -> Result<(Vec<f64>, Vec<Vec<Vec<f64>>>)> {
        let n = self.n;
        let mut hmat = vec![0.0; n * n];
        let mut wg_all = Vec::with_capacity(self.cones.len());
        for (cone, sc) in self.cones.iter().zip(scal) {
            let mut wg = Vec::with_capacity(n);
            for j in 0..n {
                let col: Vec<f64> = (0..cone.dim).map(|r| cone.g[r * n + j]).collect();
                wg.push(if col.iter().all(|v| *v == 0.0) {
                    col
                } else {
                    sc.apply_inv(&col)
                });
            }
            for i in 0..n {
                if wg[i].iter().all(|v| *v == 0.0) {
                    continue;
                }
                for j in i..n {
                    let v = rdot(&wg[i], &wg[j]);
                    hmat[i * n + j] += v;
                }
            }
            wg_all.push(wg);
        }
        for i in 0..n {
            for j in 0..i {
                hmat[i * n + j] = hmat[j * n + i];
            }
        }
        let maxd = (0..n)
            .map(|i| hmat[i * n + i])
            .fold(0.0f64, f64::max)
            .max(1e-300);
        let mut reg = 1e-14 * maxd;
        for _ in 0..8 {
            let mut a = hmat.clone();
            for i in 0..n {
                a[i * n + i] += reg;
            }
            if chol_real(&mut a, n) {
                return Ok((a, wg_all));
            }
            reg *= 100.0;
        }
        Err(Error::NumericalBreakdown(
            "reduced Newton system is not positive definite".into(),
        ))
    }

    /// Solves the linearised system
    ///
    /// ```text
    /// G^T dz = -r_x,   G dx + ds = -r_z,   W^{-1} ds + W dz = v
    /// ```
    ///
    /// with two rounds of iterative refinement.
    fn newton(
        &self,
        chol: &[f64],
        scal: &[NtScaling],
        rx: &[f64],
        rz: &[Vec<f64>],
        v: &[Vec<f64>],
    ) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (mut dx, mut ds, mut dz) = self.newton_once(chol, scal, rx, rz, v);
        for _ in 0..2 {
            // Residuals of the three block equations.
            let mut ex: Vec<f64> = rx.iter().map(|r| -r).collect();
            let mut ez = Vec::with_capacity(self.cones.len());
            let mut ev = Vec::with_capacity(self.cones.len());
            for (i, cone) in self.cones.iter().enumerate() {
                let mut gtz = vec![0.0; self.n];
                self.gtz_add(cone, &dz[i], &mut gtz);
                for (e, g) in ex.iter_mut().zip(&gtz) {
                    *e -= g;
                }
                let gdx = self.gx(cone, &dx);
                ez.push(
                    (0..cone.dim)
                        .map(|r| -rz[i][r] - gdx[r] - ds[i][r])
                        .collect::<Vec<f64>>(),
                );
                let a = scal[i].apply_inv(&ds[i]);
                let b = scal[i].apply(&dz[i]);
                ev.push(
                    (0..cone.dim)
                        .map(|r| v[i][r] - a[r] - b[r])
                        .collect::<Vec<f64>>(),
                );
            }
            let neg_ex: Vec<f64> = ex.iter().map(|e| -e).collect();
            let neg_ez: Vec<Vec<f64>> = ez.iter().map(|e| e.iter().map(|x| -x).collect()).collect();
            let (cx, cs, cz) = self.newton_once(chol, scal, &neg_ex, &neg_ez, &ev);
            for (a, b) in dx.iter_mut().zip(&cx) {
                *a += b;
            }
            for i in 0..self.cones.len() {
                for (a, b) in ds[i].iter_mut().zip(&cs[i]) {
                    *a += b;
                }
                for (a, b) in dz[i].iter_mut().zip(&cz[i]) {
                    *a += b;
                }
            }
        }
        (dx, ds, dz)
    }

    fn newton_once(
        &self,
        chol: &[f64],
        scal: &[NtScaling],
        rx: &[f64],
        rz: &[Vec<f64>],
        v: &[Vec<f64>],
    ) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = self.n;
        // dz = W^{-2} (G dx + W v + r_z), so
        // G^T W^{-2} G dx = -r_x - G^T W^{-2} (W v + r_z).
        let mut rhs: Vec<f64> = rx.iter().map(|r| -r).collect();
        let mut wv = Vec::with_capacity(self.cones.len());
        for (i, cone) in self.cones.iter().enumerate() {
            let wvi: Vec<f64> = scal[i].apply(&v[i]);
            let tmp: Vec<f64> = wvi.iter().zip(&rz[i]).map(|(a, b)| a + b).collect();
            let t = scal[i].apply_inv(&scal[i].apply_inv(&tmp));
            let mut gt = vec![0.0; n];
            self.gtz_add(cone, &t, &mut gt);
            for (r, g) in rhs.iter_mut().zip(&gt) {
                *r -= g;
            }
            wv.push(wvi);
        }
        let dx = chol_solve_real(chol, n, &rhs);
        let mut dz = Vec::with_capacity(self.cones.len());
        let mut ds = Vec::with_capacity(self.cones.len());
        for (i, cone) in self.cones.iter().enumerate() {
            let gdx = self.gx(cone, &dx);
            let tmp: Vec<f64> = (0..cone.dim)
                .map(|r| gdx[r] + wv[i][r] + rz[i][r])
                .collect();
            dz.push(scal[i].apply_inv(&scal[i].apply_inv(&tmp)));
            ds.push((0..cone.dim).map(|r| -rz[i][r] - gdx[r]).collect());
        }
        (dx, ds, dz)
    }
}

/// Solves `q` starting from `warm` (any precoder; it is scaled into the
/// interior). Returns the best iterate found.
pub fn solve(
    q: &QcqpProblem,
    warm: Option<&PrecoderMatrix>,
    tol: f64,
    max_iter: usize,
) -> Result<QcqpSolution> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidInput(
            "tolerance must be positive and max_iter at least 1".into(),
        ));
    }
    let joint = q.mode == ObjectiveMode::Joint;
    if q.p_t < 0.0 {
        let p = PrecoderMatrix::zeros(q.n_t, q.k);
        return Ok(QcqpSolution {
            xi_c_star: q.common_level(&p),
            objective: q.objective_at(&p),
            p_star: p,
            kkt_residual: f64::INFINITY,
            iterations: 0,
            status: SolverStatus::Infeasible,
            lambda: if joint { vec![0.0; q.k] } else { Vec::new() },
            mu: 0.0,
        });
    }
    if q.p_t == 0.0 {
        let p = PrecoderMatrix::zeros(q.n_t, q.k);
        let lambda = if joint {
            zero_power_multipliers(q)
        } else {
            Vec::new()
        };
        let mut sol = QcqpSolution {
            xi_c_star: q.common_level(&p),
            objective: q.objective_at(&p),
            p_star: p,
            kkt_residual: 0.0,
            iterations: 0,
            status: SolverStatus::Optimal,
            lambda,
            mu: 0.0,
        };
        sol.kkt_residual = 0.0;
        return Ok(sol);
    }
    for psi in q.psi_c.iter().chain(q.psi_p.iter()) {
        if psi.min_eigenvalue() < -EPS_PSD * psi.max_diagonal().max(f64::MIN_POSITIVE) {
            return Err(Error::NumericalBreakdown(
                "quadratic form is not PSD".into(),
            ));
        }
    }
    if let Some(w) = warm {
        q.check_shape(w)?;
    }

    let lay = Layout::new(q);
    let s_scale = q.p_t.sqrt();
    let cones = build_cones(q, &lay, s_scale)?;
    let mut c = vec![0.0; lay.n];
    if let Some(xi) = lay.xi {
        c[xi] = 1.0;
    }
    c[lay.tau] = 1.0;
    let ipm = Ipm {
        cones: &cones,
        n: lay.n,
        c,
    };

    // Starting point: the warm precoder pulled to 90% of the budget, with
    // epigraph variables given a unit margin.
    let mut start = match warm {
        Some(w) if !joint => w.with_common_zeroed(),
        Some(w) => w.clone(),
        None => PrecoderMatrix::zeros(q.n_t, q.k),
    };
    let pw = start.power();
    if pw > 0.9 * q.p_t {
        start = start.scaled((0.9 * q.p_t / pw).sqrt());
    }
    let mut x = vec![0.0; lay.n];
    write_precoder(&lay, &start, 1.0 / s_scale, &mut x);
    if let Some(xi) = lay.xi {
        x[xi] = q.common_level(&start) + 1.0;
    }
    x[lay.tau] = q.private_value(&start) + 1.0;
    let mut it = Iterate {
        s: cones
            .iter()
            .map(|cone| {
                let gx = ipm.gx(cone, &x);
                (0..cone.dim).map(|r| cone.h[r] - gx[r]).collect()
            })
            .collect(),
        z: cones.iter().map(|cone| unit(cone.dim)).collect(),
        x,
    };
    // Guard against a start on the cone boundary.
    for s in &mut it.s {
        let m = s[0] - rdot(&s[1..], &s[1..]).sqrt();
        if m < 1e-8 {
            s[0] += 1e-8 - m + 1e-3;
        }
    }

    let degree = cones.len() as f64;
    let hnorm = cones
        .iter()
        .flat_map(|c| c.h.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(1.0);
    let cnorm = rdot(&ipm.c, &ipm.c).sqrt().max(1.0);

    let mut best: Option<(f64, QcqpSolution)> = None;
    let mut iterations = 0;
    let mut status = SolverStatus::MaxIter;
    for iter in 0..=max_iter {
        let (rx, rz) = ipm.residuals(&it);
        let gap: f64 = it.s.iter().zip(&it.z).map(|(s, z)| rdot(s, z)).sum();
        let pobj = rdot(&ipm.c, &it.x);
        let pres = rz.iter().flatten().map(|v| v * v).sum::<f64>().sqrt() / hnorm;
        let dres = rdot(&rx, &rx).sqrt() / cnorm;
        let rgap = gap / (1.0 + pobj.abs());

        let cand = extract(q, &lay, &cones, &it, s_scale);
        let kkt = kkt_parts(q, &cand.p_star, cand.xi_c_star, &cand.lambda, cand.mu)
            .unwrap_or(f64::INFINITY);
        let score = kkt.max(pres).max(dres).max(rgap);
        let feasible = cand.p_star.power() <= q.p_t + EPS_POW;
        if feasible && best.as_ref().is_none_or(|(b, _)| score < *b) {
            let mut sol = cand;
            sol.kkt_residual = kkt;
            best = Some((score, sol));
        }
        iterations = iter;
        if pres <= tol && dres <= tol && rgap <= tol && feasible {
            if kkt <= tol {
                status = SolverStatus::Optimal;
                break;
            }
            let (_, incumbent) = best.as_ref().expect("feasible iterate recorded");
            if let Some(refined) = polish(q, incumbent, tol) {
                let score = refined.kkt_residual;
                best = Some((score, refined));
                if score <= tol {
                    status = SolverStatus::Optimal;
                    break;
                }
            }
        }
        if iter == max_iter {
            break;
        }

        let scal: Vec<NtScaling> =
            it.s.iter()
                .zip(&it.z)
                .map(|(s, z)| NtScaling::new(s, z))
                .collect();
        let lambda: Vec<Vec<f64>> = scal.iter().zip(&it.z).map(|(sc, z)| sc.apply(z)).collect();
        let (chol, _) = match ipm.factor(&scal) {
            Ok(f) => f,
            Err(e) => {
                if best.is_some() {
                    break;
                }
                return Err(e);
            }
        };
        let mu = gap / degree;

        // Predictor.
        let r_aff: Vec<Vec<f64>> = lambda
            .iter()
            .map(|l| jprod(l, l).into_iter().map(|v| -v).collect())
            .collect();
        let v_aff: Vec<Vec<f64>> = lambda
            .iter()
            .zip(&r_aff)
            .map(|(l, r)| jsolve(l, r))
            .collect();
        let (_, dsa, dza) = ipm.newton(&chol, &scal, &rx, &rz, &v_aff);
        let alpha_aff = step_length(&it, &dsa, &dza).min(1.0);
        let gap_aff: f64 =
            it.s.iter()
                .zip(&it.z)
                .zip(dsa.iter().zip(&dza))
                .map(|((s, z), (ds, dz))| {
                    let sn: Vec<f64> = s.iter().zip(ds).map(|(a, b)| a + alpha_aff * b).collect();
                    let zn: Vec<f64> = z.iter().zip(dz).map(|(a, b)| a + alpha_aff * b).collect();
                    rdot(&sn, &zn)
                })
                .sum();
        let sigma = (gap_aff.max(0.0) / gap).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let r_cc: Vec<Vec<f64>> = (0..cones.len())
            .map(|i| {
                let a = scal[i].apply_inv(&dsa[i]);
                let b = scal[i].apply(&dza[i]);
                let ll = jprod(&lambda[i], &lambda[i]);
                let ab = jprod(&a, &b);
                let mut r: Vec<f64> = ll.iter().zip(&ab).map(|(x, y)| -x - y).collect();
                r[0] += sigma * mu;
                r
            })
            .collect();
        let v_cc: Vec<Vec<f64>> = lambda
            .iter()
            .zip(&r_cc)
            .map(|(l, r)| jsolve(l, r))
            .collect();
        let (dx, ds, dz) = ipm.newton(&chol, &scal, &rx, &rz, &v_cc);
        let alpha = (STEP_FRACTION * step_length(&it, &ds, &dz)).min(1.0);
        for (xv, d) in it.x.iter_mut().zip(&dx) {
            *xv += alpha * d;
        }
        for i in 0..cones.len() {
            for (sv, d) in it.s[i].iter_mut().zip(&ds[i]) {
                *sv += alpha * d;
            }
            for (zv, d) in it.z[i].iter_mut().zip(&dz[i]) {
                *zv += alpha * d;
            }
        }
    }

    let (_, mut sol) =
        best.ok_or_else(|| Error::NumericalBreakdown("no feasible iterate".into()))?;
    sol.iterations = iterations;
    sol.status = if status == SolverStatus::Optimal && sol.kkt_residual <= tol {
        SolverStatus::Optimal
    } else {
        SolverStatus::MaxIter
    };
    Ok(sol)
}

fn unit(dim: usize) -> Vec<f64> {
    let mut e = vec![0.0; dim];
    e[0] = 1.0;
    e
}

fn step_length(it: &Iterate, ds: &[Vec<f64>], dz: &[Vec<f64>]) -> f64 {
    let mut a = f64::INFINITY;
    for i in 0..ds.len() {
        a = a
            .min(max_step(&it.s[i], &ds[i]))
            .min(max_step(&it.z[i], &dz[i]));
    }
    a
}

fn write_precoder(lay: &Layout, p: &PrecoderMatrix, factor: f64, x: &mut [f64]) {
    let d = lay.n_t;
    for j in 0..=p.k() {
        if let Some(off) = lay.column_offset(j) {
            for (t, z) in p.column(j).iter().enumerate() {
                x[off + t] = z.re * factor;
                x[off + d + t] = z.im * factor;
            }
        }
    }
}

fn read_precoder(lay: &Layout, k: usize, x: &[f64], factor: f64) -> PrecoderMatrix {
    let d = lay.n_t;
    let mut p = PrecoderMatrix::zeros(d, k);
    for j in 0..=k {
        if let Some(off) = lay.column_offset(j) {
            let col = p.column_mut(j);
            for (t, z) in col.iter_mut().enumerate() {
                *z = C64::new(x[off + t], x[off + d + t]) * factor;
            }
        }
    }
    p
}

fn extract(q: &QcqpProblem, lay: &Layout, cones: &[Cone], it: &Iterate, s: f64) -> QcqpSolution {
    let mut p = read_precoder(lay, q.k, &it.x, s);
    // Interior iterates sit strictly inside the power ball; clip rounding.
    let pw = p.power();
    if pw > q.p_t {
        p = p.scaled((q.p_t / pw).sqrt());
    }
    let multiplier = |i: usize| {
        let z = &it.z[i];
        (z[0] + z[z.len() - 1]) / cones[i].scale
    };
    let last = cones.len() - 1;
    let lambda: Vec<f64> = if lay.xi.is_some() {
        (1..=q.k).map(multiplier).collect()
    } else {
        Vec::new()
    };
    let mu = multiplier(last);
    let (lambda, mu) = refit_multipliers(q, &p, &lambda, mu).unwrap_or((lambda, mu));
    QcqpSolution {
        xi_c_star: q.common_level(&p),
        objective: q.objective_at(&p),
        p_star: p,
        kkt_residual: f64::INFINITY,
        iterations: 0,
        status: SolverStatus::MaxIter,
        lambda,
        mu,
    }
}

/// Least-squares multipliers for the stationarity conditions at `p`,
/// restricted to the constraints the cone duals mark as active. The cone
/// duals alone are only accurate to roughly the square root of the gap.
fn refit_multipliers(
    q: &QcqpProblem,
    p: &PrecoderMatrix,
    lambda: &[f64],
    mu: f64,
) -> Option<(Vec<f64>, f64)> {
    let joint = q.mode == ObjectiveMode::Joint;
    let lmax = lambda.iter().copied().fold(0.0f64, f64::max);
    let active: Vec<usize> = (0..lambda.len())
        .filter(|&k| lambda[k] > 1e-6 * lmax.max(1e-300))
        .collect();
    let mu_active = mu * q.p_t > 1e-9;

    // Stationarity vector = b0 + sum_j y_j a_j, stacked over columns.
    let stack = |cols: Vec<Vec<C64>>| -> Vec<f64> {
        cols.into_iter()
            .flatten()
            .flat_map(|z| [z.re, z.im])
            .collect()
    };
    let zero = vec![C64::new(0.0, 0.0); q.n_t];
    let sub =
        |a: Vec<C64>, b: &[C64]| -> Vec<C64> { a.into_iter().zip(b).map(|(x, y)| x - y).collect() };
    let mut b0 = Vec::new();
    if joint {
        b0.push(zero.clone());
    }
    for i in 0..q.k {
        b0.push(sub(q.psi_sum.mul_vec(p.private(i)), &q.f_p[i]));
    }
    let b0 = stack(b0);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for &k in &active {
        let mut a = vec![sub(q.psi_c[k].mul_vec(p.common()), &q.f_c[k])];
        for i in 0..q.k {
            a.push(q.psi_c[k].mul_vec(p.private(i)));
        }
        cols.push(stack(a));
    }
    if mu_active {
        let mut a = Vec::new();
        if joint {
            a.push(p.common().to_vec());
        }
        for i in 0..q.k {
            a.push(p.private(i).to_vec());
        }
        cols.push(stack(a));
    }
    let nv = cols.len();
    if nv == 0 {
        return None;
    }
    // Normal equations, bordered by sum(lambda) = 1 in joint mode.
    let ne = if joint { nv + 1 } else { nv };
    let mut m = vec![vec![0.0; ne]; ne];
    let mut rhs = vec![0.0; ne];
    for i in 0..nv {
        for j in 0..nv {
            m[i][j] = rdot(&cols[i], &cols[j]);
        }
        rhs[i] = -rdot(&cols[i], &b0);
    }
    if joint {
        for i in 0..active.len() {
            m[i][nv] = 1.0;
            m[nv][i] = 1.0;
        }
        rhs[nv] = 1.0;
    }
    let y = solve_dense(m, rhs)?;
    let mut lam = vec![0.0; lambda.len()];
    for (idx, &k) in active.iter().enumerate() {
        lam[k] = y[idx];
    }
    let new_mu = if mu_active { y[nv - 1] } else { 0.0 };
    if lam.iter().any(|v| *v < 0.0 || !v.is_finite()) || new_mu < 0.0 || !new_mu.is_finite() {
        return None;
    }
    Some((lam, new_mu))
}

/// Newton refinement of the KKT system with the active set read from `sol`:
/// stationarity, active common constraints at equality, multipliers summing
/// to one and, if active, the power constraint at equality. Returns the
/// refined solution when it lowers the KKT residual and stays feasible.
fn polish(q: &QcqpProblem, sol: &QcqpSolution, tol: f64) -> Option<QcqpSolution> {
    let joint = q.mode == ObjectiveMode::Joint;
    let active: Vec<usize> = (0..sol.lambda.len())
        .filter(|&k| sol.lambda[k] > 0.0)
        .collect();
    if joint && active.is_empty() {
        return None;
    }
    let pow_active = sol.mu > 0.0;
    let d = q.n_t;
    let cols: Vec<usize> = if joint {
        (0..=q.k).collect()
    } else {
        (1..=q.k).collect()
    };
    let np = 2 * d * cols.len();
    let na = active.len();
    let nvar = np + usize::from(joint) + na + usize::from(pow_active);

    let mut p = sol.p_star.clone();
    let mut xi = sol.xi_c_star;
    let mut lam = sol.lambda.clone();
    let mut mu = if pow_active { sol.mu } else { 0.0 };
    let mut best = sol.clone();

    let stack =
        |v: &[Vec<C64>]| -> Vec<f64> { v.iter().flatten().flat_map(|z| [z.re, z.im]).collect() };
    for _ in 0..6 {
        // Per-column Hessian blocks and constraint gradients.
        let mut common_hess = HermitianPsd::zeros(d);
        for &k in &active {
            common_hess.add_scaled(lam[k], &q.psi_c[k]);
        }
        let block = |j: usize| -> HermitianPsd {
            let mut h = common_hess.clone();
            if j > 0 {
                h.add_scaled(1.0, &q.psi_sum);
            }
            h.add_scaled(mu, &HermitianPsd::identity(d));
            h
        };
        let grad_k = |k: usize| -> Vec<f64> {
            let v: Vec<Vec<C64>> = cols
                .iter()
                .map(|&j| {
                    let mut g = q.psi_c[k].mul_vec(p.column(j));
                    if j == 0 {
                        for (a, f) in g.iter_mut().zip(&q.f_c[k]) {
                            *a -= f;
                        }
                    }
                    g
                })
                .collect();
            stack(&v)
        };
        let stat: Vec<f64> = {
            let v: Vec<Vec<C64>> = cols
                .iter()
                .map(|&j| {
                    let mut g = block(j).mul_vec(p.column(j));
                    if j > 0 {
                        for (a, f) in g.iter_mut().zip(&q.f_p[j - 1]) {
                            *a -= f;
                        }
                    }
                    for &k in &active {
                        if j == 0 {
                            for (a, f) in g.iter_mut().zip(&q.f_c[k]) {
                                *a -= f * lam[k];
                            }
                        }
                    }
                    g
                })
                .collect();
            stack(&v)
        };
        let grads: Vec<Vec<f64>> = active.iter().map(|&k| grad_k(k)).collect();
        let pvec = stack(
            &cols
                .iter()
                .map(|&j| p.column(j).to_vec())
                .collect::<Vec<_>>(),
        );

        let mut m = vec![vec![0.0; nvar]; nvar];
        let mut rhs = vec![0.0; nvar];
        // Stationarity rows.
        for (ci, &j) in cols.iter().enumerate() {
            let h = block(j);
            for r in 0..d {
                for c in 0..d {
                    let z = h.get(r, c);
                    let (row, col) = (2 * (ci * d + r), 2 * (ci * d + c));
                    m[row][col] = z.re;
                    m[row][col + 1] = -z.im;
                    m[row + 1][col] = z.im;
                    m[row + 1][col + 1] = z.re;
                }
            }
        }
        let mut col = np + usize::from(joint);
        for g in &grads {
            for r in 0..np {
                m[r][col] = g[r];
            }
            col += 1;
        }
        if pow_active {
            for r in 0..np {
                m[r][col] = pvec[r];
            }
        }
        for r in 0..np {
            rhs[r] = -stat[r];
        }
        let mut row = np;
        if joint {
            // sum lambda = 1
            for a in 0..na {
                m[row][np + 1 + a] = 1.0;
            }
            rhs[row] = 1.0 - active.iter().map(|&k| lam[k]).sum::<f64>();
            row += 1;
            for (a, &k) in active.iter().enumerate() {
                for c in 0..np {
                    m[row][c] = 2.0 * grads[a][c];
                }
                m[row][np] = -1.0;
                rhs[row] = -(q.common_value(k, &p) - xi);
                row += 1;
            }
        }
        if pow_active {
            for c in 0..np {
                m[row][c] = 2.0 * pvec[c];
            }
            rhs[row] = -(p.power() - q.p_t);
        }
        let step = solve_dense(m, rhs)?;
        for (ci, &j) in cols.iter().enumerate() {
            let colm = p.column_mut(j);
            for r in 0..d {
                colm[r] += C64::new(step[2 * (ci * d + r)], step[2 * (ci * d + r) + 1]);
            }
        }
        let mut idx = np;
        if joint {
            xi += step[idx];
            idx += 1;
        }
        for &k in &active {
            lam[k] += step[idx];
            idx += 1;
        }
        if pow_active {
            mu += step[idx];
        }
        if lam.iter().any(|v| *v < 0.0) || mu < 0.0 {
            return None;
        }
        let mut cand = QcqpSolution {
            xi_c_star: q.common_level(&p),
            objective: q.objective_at(&p),
            p_star: p.clone(),
            kkt_residual: 0.0,
            iterations: sol.iterations,
            status: sol.status,
            lambda: lam.clone(),
            mu,
        };
        if cand.p_star.power() > q.p_t {
            cand.p_star = cand.p_star.scaled((q.p_t / cand.p_star.power()).sqrt());
            cand.xi_c_star = q.common_level(&cand.p_star);
            cand.objective = q.objective_at(&cand.p_star);
        }
        cand.kkt_residual = kkt_residual(q, &cand);
        if cand.kkt_residual < best.kkt_residual {
            best = cand;
        }
        if best.kkt_residual <= 1e-3 * tol {
            break;
        }
    }
    (best.kkt_residual < sol.kkt_residual).then_some(best)
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-14 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in (col + 1)..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in (r + 1)..n {
            acc -= a[r][c] * x[c];
        }
        x[r] = acc / a[r][r];
    }
    Some(x)
}

/// Multipliers for `P = 0`: weight on the users with the largest constant.
fn zero_power_multipliers(q: &QcqpProblem) -> Vec<f64> {
    let top = q
        .common_const
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let active: Vec<bool> = q.common_const.iter().map(|c| *c == top).collect();
    let count = active.iter().filter(|a| **a).count() as f64;
    active
        .iter()
        .map(|a| if *a { 1.0 / count } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::awsmse::{accumulate_components, awmse_values, awsmse_objective, update_blocks};
    use crate::channel::{draw_sample, stream_rng, CsitConfig, MonteCarloSample};
    use crate::linalg::ComplexMatrix;
    use rand::Rng;

    fn random_precoder(rng: &mut impl Rng, n_t: usize, k: usize, p_t: f64) -> PrecoderMatrix {
        let cols: Vec<Vec<C64>> = (0..=k)
            .map(|_| {
                (0..n_t)
                    .map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                    .collect()
            })
            .collect();
        let p = PrecoderMatrix::from_parts(cols[0].clone(), cols[1..].to_vec()).unwrap();
        p.scaled((p_t / p.power()).sqrt())
    }

    fn instance(
        seed: u64,
        n_t: usize,
        k: usize,
        snr_db: f64,
        m: usize,
    ) -> (QcqpProblem, PrecoderMatrix, MonteCarloSample, f64) {
        let cfg = CsitConfig::from_snr_db(n_t, k, 0.6, snr_db).unwrap();
        let mut rng = stream_rng(seed, 0);
        let h = crate::channel::draw_channel(&mut rng, &cfg);
        let sample = draw_sample(&mut rng, &h, cfg.sigma_e2(), m).unwrap();
        let p0 = random_precoder(&mut rng, n_t, k, cfg.p_t);
        let gw = update_blocks(&sample, &p0, cfg.sigma_n2).unwrap();
        let comps = accumulate_components(&sample, &gw).unwrap();
        let q = QcqpProblem::build(&comps, cfg.sigma_n2, cfg.p_t, ObjectiveMode::Joint).unwrap();
        (q, p0, sample, cfg.sigma_n2)
    }

    fn trivial_components(n_t: usize) -> AwmmseComponents {
        AwmmseComponents {
            psi_c: HermitianPsd::identity(n_t),
            psi_p: HermitianPsd::identity(n_t),
            t_c: 1.0,
            t_p: 1.0,
            f_c: vec![C64::new(0.0, 0.0); n_t],
            f_p: vec![C64::new(0.0, 0.0); n_t],
            u_c: 1.0,
            u_p: 1.0,
            v_c: 0.0,
            v_p: 0.0,
        }
    }

    #[test]
    fn nt_scaling_maps_z_and_s_to_the_same_point() {
        let s = [3.0, 1.0, -0.5, 0.7];
        let z = [2.0, -0.3, 0.9, 0.1];
        let sc = NtScaling::new(&s, &z);
        let a = sc.apply(&z);
        let b = sc.apply_inv(&s);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{a:?} {b:?}");
        }
        let back = sc.apply(&sc.apply_inv(&s));
        for (x, y) in back.iter().zip(&s) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn jordan_solve_inverts_product() {
        let l = [2.0, 0.3, -0.4];
        let v = [0.5, 1.0, -2.0];
        let u = jsolve(&l, &v);
        let back = jprod(&l, &u);
        for (x, y) in back.iter().zip(&v) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn max_step_hits_the_boundary() {
        let x = [2.0, 0.0, 0.0];
        let d = [-1.0, 1.0, 0.0];
        let a = max_step(&x, &d);
        // (2 - a)^2 = a^2 -> a = 1
        assert!((a - 1.0).abs() < 1e-12);
        assert!(max_step(&x, &[1.0, 0.0, 0.0]).is_infinite());
    }

    #[test]
    fn trivial_problem_has_zero_minimiser() {
        let q =
            QcqpProblem::build(&[trivial_components(2)], 1.0, 4.0, ObjectiveMode::Joint).unwrap();
        let sol = solve(&q, None, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        assert!(sol.p_star.power() < 1e-7, "{}", sol.p_star.power());
        assert!((sol.xi_c_star - q.common_const[0]).abs() < 1e-7);
        assert!(sol.kkt_residual <= DEFAULT_TOL);

        let exact = QcqpSolution {
            p_star: PrecoderMatrix::zeros(2, 1),
            xi_c_star: q.common_const[0],
            objective: q.objective_at(&PrecoderMatrix::zeros(2, 1)),
            kkt_residual: 0.0,
            iterations: 0,
            status: SolverStatus::Optimal,
            lambda: vec![1.0],
            mu: 0.0,
        };
        assert!(kkt_residual(&q, &exact) <= 1e-10);
    }

    #[test]
    fn objective_matches_awmse_values_plus_constant() {
        let (q, _, sample, s2) = instance(3, 3, 2, 15.0, 40);
        let mut rng = stream_rng(99, 1);
        let p0 = random_precoder(&mut rng, 3, 2, q.power_budget());
        let gw = update_blocks(&sample, &p0, s2).unwrap();
        let comps = accumulate_components(&sample, &gw).unwrap();
        let q = QcqpProblem::build(&comps, s2, q.power_budget(), ObjectiveMode::Joint).unwrap();
        for _ in 0..5 {
            let frac = rng.random::<f64>();
            let p = random_precoder(&mut rng, 3, 2, q.power_budget() * frac);
            let (xc, xp) = awmse_values(&comps, &p, s2);
            let direct = awsmse_objective(&xc, &xp, ObjectiveMode::Joint);
            assert!((q.objective_at(&p) + q.omitted_constant() - direct).abs() < 1e-10);
            let (xc, xp) = awmse_values(&comps, &p.with_common_zeroed(), s2);
            let qb = QcqpProblem::build(&comps, s2, q.power_budget(), ObjectiveMode::BroadcastOnly)
                .unwrap();
            let direct = awsmse_objective(&xc, &xp, ObjectiveMode::BroadcastOnly);
            let mine = qb.objective_at(&p.with_common_zeroed()) + qb.omitted_constant();
            assert!((mine - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn unconstrained_private_columns_are_stationary() {
        // Tiny common forms, huge budget: the private columns decouple.
        let (q, p0, _, _) = instance(5, 2, 2, 10.0, 30);
        let mut q = q;
        q.p_t = 1e6;
        let sol = solve(&q, Some(&p0), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        for i in 0..2 {
            let mut lhs = q.psi_sum.mul_vec(sol.p_star.private(i));
            for k in 0..2 {
                let extra = q.psi_c[k].mul_vec(sol.p_star.private(i));
                for (l, e) in lhs.iter_mut().zip(extra) {
                    *l += e * sol.lambda[k];
                }
            }
            let r: f64 = lhs
                .iter()
                .zip(&q.f_p[i])
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>()
                .sqrt();
            assert!(r < 1e-6 * (1.0 + norm_sqr(&q.f_p[i]).sqrt()), "{r}");
        }
    }

    #[test]
    fn pure_power_objective_gives_zero() {
        // min ||p||^2 (Psi = I, f = 0) subject to ||p||^2 <= P_t.
        let mut c = trivial_components(3);
        c.psi_c = HermitianPsd::zeros(3);
        let q = QcqpProblem::build(&[c], 1.0, 10.0, ObjectiveMode::BroadcastOnly).unwrap();
        let sol = solve(&q, None, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        assert!(sol.p_star.power() < 1e-8);
    }

    #[test]
    fn solutions_are_feasible_and_kkt_small() {
        for seed in 0..100 {
            let snr = [0.0, 10.0, 20.0, 30.0][seed as usize % 4];
            let (q, p0, _, _) = instance(seed, 2, 2, snr, 20);
            let sol = solve(&q, Some(&p0), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            assert_eq!(
                sol.status,
                SolverStatus::Optimal,
                "seed {seed} kkt {}",
                sol.kkt_residual
            );
            assert!(sol.kkt_residual <= DEFAULT_TOL);
            assert!(kkt_residual(&q, &sol) <= DEFAULT_TOL);
            assert!(sol.p_star.power() <= q.power_budget() + EPS_POW);
            for k in 0..2 {
                assert!(q.common_value(k, &sol.p_star) <= sol.xi_c_star + DEFAULT_TOL);
            }
            // The solution never does worse than the warm start.
            assert!(sol.objective <= q.objective_at(&p0) + 1e-9);
        }
    }

    #[test]
    fn perturbation_increases_residual() {
        let (q, p0, _, _) = instance(11, 2, 2, 20.0, 20);
        let sol = solve(&q, Some(&p0), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let mut moved = sol.clone();
        moved.p_star = sol.p_star.scaled(1.0 - 1e-3);
        assert!(kkt_residual(&q, &moved) > kkt_residual(&q, &sol));
    }

    #[test]
    fn broadcast_mode_keeps_common_zero() {
        let (q, p0, sample, s2) = instance(8, 2, 2, 20.0, 20);
        let gw = update_blocks(&sample, &p0.with_common_zeroed(), s2).unwrap();
        let comps = accumulate_components(&sample, &gw).unwrap();
        let qb =
            QcqpProblem::build(&comps, s2, q.power_budget(), ObjectiveMode::BroadcastOnly).unwrap();
        let sol = solve(&qb, Some(&p0), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        assert_eq!(sol.p_star.common_power(), 0.0);
        assert!(sol.lambda.is_empty());
    }

    #[test]
    fn degenerate_budgets() {
        let (mut q, _, _, _) = instance(2, 2, 2, 10.0, 10);
        q.p_t = -1.0;
        assert_eq!(
            solve(&q, None, 1e-8, 10).unwrap().status,
            SolverStatus::Infeasible
        );
        q.p_t = 0.0;
        let sol = solve(&q, None, 1e-8, 10).unwrap();
        assert_eq!(sol.status, SolverStatus::Optimal);
        assert_eq!(sol.p_star.power(), 0.0);
    }

    #[test]
    fn dump_writes_every_block() {
        let (q, _, _, _) = instance(2, 2, 2, 10.0, 10);
        let mut buf = Vec::new();
        q.dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n_t 2 k 2 mode joint"));
        assert_eq!(text.matches("psi_c").count(), 2);
    }

    // ---- independent oracle: dual projected gradient over the simplex ----

    /// Gaussian elimination with partial pivoting on a dense complex system.
    fn gauss_solve(mut a: Vec<Vec<C64>>, mut b: Vec<C64>) -> Vec<C64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i][col].norm().total_cmp(&a[j][col].norm()))
                .unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for r in (col + 1)..n {
                let f = a[r][col] / a[col][col];
                for c in col..n {
                    let v = a[col][c];
                    a[r][c] -= f * v;
                }
                let v = b[col];
                b[r] -= f * v;
            }
        }
        let mut x = vec![C64::new(0.0, 0.0); n];
        for r in (0..n).rev() {
            let mut s = b[r];
            for c in (r + 1)..n {
                s -= a[r][c] * x[c];
            }
            x[r] = s / a[r][r];
        }
        x
    }

    fn dense(m: &HermitianPsd) -> Vec<Vec<C64>> {
        (0..m.dim())
            .map(|i| (0..m.dim()).map(|j| m.get(i, j)).collect())
            .collect()
    }

    /// Minimiser of the Lagrangian for fixed common multipliers, with the
    /// shared power ball handled by bisection on its multiplier.
    fn inner(q: &QcqpProblem, lam: &[f64]) -> PrecoderMatrix {
        let n = q.n_t;
        let mut mats = Vec::new();
        let mut rhs = Vec::new();
        let mut a0 = vec![vec![C64::new(0.0, 0.0); n]; n];
        let mut b0 = vec![C64::new(0.0, 0.0); n];
        for k in 0..q.k {
            let d = dense(&q.psi_c[k]);
            for i in 0..n {
                b0[i] += q.f_c[k][i] * lam[k];
                for j in 0..n {
                    a0[i][j] += d[i][j] * lam[k];
                }
            }
        }
        mats.push(a0.clone());
        rhs.push(b0);
        for i in 0..q.k {
            let mut a = dense(&q.psi_sum);
            for r in 0..n {
                for c in 0..n {
                    a[r][c] += a0[r][c];
                }
            }
            mats.push(a);
            rhs.push(q.f_p[i].clone());
        }
        let columns = |mu: f64| -> Vec<Vec<C64>> {
            mats.iter()
                .zip(&rhs)
                .map(|(a, b)| {
                    let mut a = a.clone();
                    for (i, row) in a.iter_mut().enumerate() {
                        row[i] += mu;
                    }
                    gauss_solve(a, b.clone())
                })
                .collect()
        };
        let power = |cols: &[Vec<C64>]| cols.iter().map(|c| norm_sqr(c)).sum::<f64>();
        let mut cols = columns(1e-14);
        if power(&cols) > q.p_t {
            let (mut lo, mut hi) = (0.0, 1.0);
            while power(&columns(hi)) > q.p_t {
                hi *= 2.0;
            }
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if power(&columns(mid)) > q.p_t {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            cols = columns(hi);
        }
        PrecoderMatrix::from_parts(cols[0].clone(), cols[1..].to_vec()).unwrap()
    }

    fn dual_value(q: &QcqpProblem, lam: &[f64]) -> (f64, PrecoderMatrix) {
        let p = inner(q, lam);
        let v = q.private_value(&p)
            + (0..q.k)
                .map(|k| lam[k] * q.common_value(k, &p))
                .sum::<f64>();
        (v, p)
    }

    fn project_simplex(v: &[f64]) -> Vec<f64> {
        let mut u = v.to_vec();
        u.sort_by(|a, b| b.total_cmp(a));
        let mut css = 0.0;
        let mut theta = 0.0;
        for (i, x) in u.iter().enumerate() {
            css += x;
            let t = (css - 1.0) / (i + 1) as f64;
            if x - t > 0.0 {
                theta = t;
            }
        }
        v.iter().map(|x| (x - theta).max(0.0)).collect()
    }

    fn oracle(q: &QcqpProblem, seed: u64) -> (f64, f64) {
        let mut rng = stream_rng(seed, 77);
        let mut best_dual = f64::NEG_INFINITY;
        let mut best_primal = f64::INFINITY;
        for _ in 0..20 {
            let mut lam =
                project_simplex(&(0..q.k).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
            let mut step = 1.0;
            let (mut val, mut p) = dual_value(q, &lam);
            for _ in 0..400 {
                let grad: Vec<f64> = (0..q.k).map(|k| q.common_value(k, &p)).collect();
                let mut improved = false;
                while step > 1e-16 {
                    let trial = project_simplex(
                        &lam.iter()
                            .zip(&grad)
                            .map(|(l, g)| l + step * g)
                            .collect::<Vec<_>>(),
                    );
                    let (tv, tp) = dual_value(q, &trial);
                    if tv > val {
                        lam = trial;
                        val = tv;
                        p = tp;
                        step *= 1.5;
                        improved = true;
                        break;
                    }
                    step *= 0.5;
                }
                best_primal = best_primal.min(q.objective_at(&p));
                if !improved || best_primal - val < 1e-10 {
                    break;
                }
            }
            best_dual = best_dual.max(val);
        }
        (best_primal, best_dual)
    }

    #[test]
    fn matches_dual_projected_gradient_oracle() {
        for seed in 0..6 {
            let (q, p0, _, _) =
                instance(100 + seed, 2, 2, [5.0, 20.0, 35.0][seed as usize % 3], 20);
            let sol = solve(&q, Some(&p0), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            let (primal, dual) = oracle(&q, seed);
            assert!(primal - dual < 1e-7, "oracle gap {}", primal - dual);
            assert!(
                (sol.objective - primal).abs() < 1e-5,
                "seed {seed}: {} vs {primal}",
                sol.objective
            );
        }
    }

    #[test]
    fn perfect_csit_single_sample_is_wmmse_step() {
        // One realization equal to the estimate: the components are those of a
        // deterministic WMMSE step, so the private-only problem has the
        // closed-form regularised solution.
        let h = ComplexMatrix::from_fn(2, 2, |i, j| {
            C64::new((i + 2 * j) as f64 * 0.3 + 0.2, 0.1 * i as f64 - 0.2)
        });
        let sample = MonteCarloSample::new(&[h]).unwrap();
        let mut rng = stream_rng(4, 4);
        let p0 = random_precoder(&mut rng, 2, 2, 10.0).with_common_zeroed();
        let gw = update_blocks(&sample, &p0, 1.0).unwrap();
        let comps = accumulate_components(&sample, &gw).unwrap();
        let q = QcqpProblem::build(&comps, 1.0, 10.0, ObjectiveMode::BroadcastOnly).unwrap();
        let sol = solve(&q, Some(&p0), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let oracle = inner(&q, &[0.0, 0.0]);
        for i in 0..2 {
            for (a, b) in sol.p_star.private(i).iter().zip(oracle.private(i)) {
                assert!((a - b).norm() < 1e-6, "{a} vs {b}");
            }
        }
    }
}
