//! Augmented weighted MSEs and the averaged components that turn the
//! precoder update into a deterministic QCQP.
//!
//! The augmented WMSE is measured in bits,
//!
//! ```text
//! xi(eps, u) = 1 + (u * eps - ln(u) - 1) / ln(2)
//!            = w * eps + 1 - 1/ln(2) - log2(u),      w = u / ln(2)
//! ```
//!
//! so that `u = 1 / eps` is its exact minimiser over the weight and the
//! minimum equals `1 - R` with `R = -log2(eps)`. The MSE itself enters with
//! weight `w`.
//!
//! For fixed equalizers and weights every AWMSE is a convex quadratic in the
//! precoder. Averaging its coefficients over the Monte-Carlo sample gives, per
//! user, the components stored in [`AwmmseComponents`].

use std::f64::consts::LN_2;

use rayon::prelude::*;

use crate::channel::MonteCarloSample;
use crate::error::{Error, Result};
use crate::linalg::{dot, HermitianPsd, C64};
use crate::receivers::{link_terms, PrecoderMatrix};
use crate::sum::{ordered_reduce, Accumulator, ComplexSum, NeumaierSum};

/// MMSE values at or below this are rejected before inversion.
pub const EPS_FLOOR: f64 = 1e-300;

/// Augmented WMSE of an MSE `eps` under weight `u > 0`, in bits.
pub fn wmse(eps: f64, u: f64) -> f64 {
    1.0 + (u * eps - u.ln() - 1.0) / LN_2
}

/// Weight on the MSE term for rate weight `u`.
pub fn mse_weight(u: f64) -> f64 {
    u / LN_2
}

/// Optimal weights `1 / eps_mmse` for the common and private MMSEs.
pub fn mmse_weights(eps_c_mmse: f64, eps_p_mmse: f64) -> Result<(f64, f64)> {
    for value in [eps_c_mmse, eps_p_mmse] {
        if !(value > EPS_FLOOR) {
            return Err(Error::DegenerateMmse { value });
        }
    }
    Ok((1.0 / eps_c_mmse, 1.0 / eps_p_mmse))
}

/// Equalizers and weights for every user and realization.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualizerWeightSet {
    k: usize,
    m: usize,
    // indexed [user * m + realization]
    g_c: Vec<C64>,
    g_p: Vec<C64>,
    u_c: Vec<f64>,
    u_p: Vec<f64>,
}

/// Equalizers and weights of one user in one realization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockEntry {
    pub g_c: C64,
    pub g_p: C64,
    pub u_c: f64,
    pub u_p: f64,
}

impl EqualizerWeightSet {
    /// Builds a set from entries ordered user-major (`entries[k * m + m_idx]`).
    pub fn from_entries(k: usize, m: usize, entries: &[BlockEntry]) -> Result<Self> {
        if entries.len() != k * m {
            return Err(Error::Dimension(format!(
                "{} entries for {k} users x {m} realizations",
                entries.len()
            )));
        }
        if entries.iter().any(|e| !(e.u_c > 0.0 && e.u_p > 0.0)) {
            return Err(Error::InvalidInput("weights must be positive".into()));
        }
        Ok(Self {
            k,
            m,
            g_c: entries.iter().map(|e| e.g_c).collect(),
            g_p: entries.iter().map(|e| e.g_p).collect(),
            u_c: entries.iter().map(|e| e.u_c).collect(),
            u_p: entries.iter().map(|e| e.u_p).collect(),
        })
    }

    pub fn users(&self) -> usize {
        self.k
    }

    pub fn realizations(&self) -> usize {
        self.m
    }

    pub fn entry(&self, k: usize, m: usize) -> BlockEntry {
        let i = k * self.m + m;
        BlockEntry {
            g_c: self.g_c[i],
            g_p: self.g_p[i],
            u_c: self.u_c[i],
            u_p: self.u_p[i],
        }
    }
}

/// MMSE equalizers and weights at precoder `p` for every realization.
pub fn update_blocks(
    sample: &MonteCarloSample,
    p: &PrecoderMatrix,
    sigma_n2: f64,
) -> Result<EqualizerWeightSet> {
    let (k, m) = (p.k(), sample.len());
    if (sample.n_t(), sample.k()) != (p.n_t(), k) {
        return Err(Error::Dimension("sample and precoder shapes differ".into()));
    }
    let per_realization: Vec<Vec<BlockEntry>> = (0..m)
        .into_par_iter()
        .map(|mi| {
            (0..k)
                .map(|user| {
                    let h = sample.channel(mi, user);
                    let lt = link_terms(h, p, user, sigma_n2);
                    let (u_c, u_p) = mmse_weights(lt.e_c / lt.t_c, lt.e_p / lt.t_p)?;
                    Ok(BlockEntry {
                        g_c: dot(p.common(), h) / lt.t_c,
                        g_p: dot(p.private(user), h) / lt.t_p,
                        u_c,
                        u_p,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let entries: Vec<BlockEntry> = (0..k)
        .flat_map(|user| per_realization.iter().map(move |row| row[user]))
        .collect();
    EqualizerWeightSet::from_entries(k, m, &entries)
}

/// Sample-averaged coefficients of one user's augmented WMSEs.
///
/// With `w = u / ln 2`: `t = w |g|^2`, `psi = t h h^H`, `f = w h conj(g)`,
/// `u` is the mean rate weight and `v` the mean of `log2(u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AwmmseComponents {
    pub psi_c: HermitianPsd,
    pub psi_p: HermitianPsd,
    pub t_c: f64,
    pub t_p: f64,
    pub f_c: Vec<C64>,
    pub f_p: Vec<C64>,
    pub u_c: f64,
    pub u_p: f64,
    pub v_c: f64,
    pub v_p: f64,
}

impl AwmmseComponents {
    /// Precoder-independent part of the common AWMSE.
    pub fn common_constant(&self, sigma_n2: f64) -> f64 {
        sigma_n2 * self.t_c + 1.0 + (self.u_c - 1.0) / LN_2 - self.v_c
    }

    /// Precoder-independent part of the private AWMSE.
    pub fn private_constant(&self, sigma_n2: f64) -> f64 {
        sigma_n2 * self.t_p + 1.0 + (self.u_p - 1.0) / LN_2 - self.v_p
    }
}

#[derive(Clone)]
struct UserAcc {
    n: usize,
    // upper triangles, row-major over i <= j
    psi_c: Vec<ComplexSum>,
    psi_p: Vec<ComplexSum>,
    f_c: Vec<ComplexSum>,
    f_p: Vec<ComplexSum>,
    t_c: NeumaierSum,
    t_p: NeumaierSum,
    u_c: NeumaierSum,
    u_p: NeumaierSum,
    v_c: NeumaierSum,
    v_p: NeumaierSum,
}

impl UserAcc {
    fn new(n: usize) -> Self {
        let tri = n * (n + 1) / 2;
        Self {
            n,
            psi_c: vec![ComplexSum::default(); tri],
            psi_p: vec![ComplexSum::default(); tri],
            f_c: vec![ComplexSum::default(); n],
            f_p: vec![ComplexSum::default(); n],
            t_c: NeumaierSum::default(),
            t_p: NeumaierSum::default(),
            u_c: NeumaierSum::default(),
            u_p: NeumaierSum::default(),
            v_c: NeumaierSum::default(),
            v_p: NeumaierSum::default(),
        }
    }

    fn add(&mut self, h: &[C64], e: &BlockEntry) {
        let (w_c, w_p) = (mse_weight(e.u_c), mse_weight(e.u_p));
        let t_c = w_c * e.g_c.norm_sqr();
        let t_p = w_p * e.g_p.norm_sqr();
        let mut idx = 0;
        for i in 0..self.n {
            for j in i..self.n {
                let hh = h[i] * h[j].conj();
                self.psi_c[idx].add(hh * t_c);
                self.psi_p[idx].add(hh * t_p);
                idx += 1;
            }
            self.f_c[i].add(h[i] * e.g_c.conj() * w_c);
            self.f_p[i].add(h[i] * e.g_p.conj() * w_p);
        }
        self.t_c.add(t_c);
        self.t_p.add(t_p);
        self.u_c.add(e.u_c);
        self.u_p.add(e.u_p);
        self.v_c.add(e.u_c.log2());
        self.v_p.add(e.u_p.log2());
    }

    fn merge_from(&mut self, other: &Self) {
        for (a, b) in self.psi_c.iter_mut().zip(&other.psi_c) {
            a.merge(b);
        }
        for (a, b) in self.psi_p.iter_mut().zip(&other.psi_p) {
            a.merge(b);
        }
        for (a, b) in self.f_c.iter_mut().zip(&other.f_c) {
            a.merge(b);
        }
        for (a, b) in self.f_p.iter_mut().zip(&other.f_p) {
            a.merge(b);
        }
        self.t_c.merge(&other.t_c);
        self.t_p.merge(&other.t_p);
        self.u_c.merge(&other.u_c);
        self.u_p.merge(&other.u_p);
        self.v_c.merge(&other.v_c);
        self.v_p.merge(&other.v_p);
    }

    fn finish(&self, m: usize) -> AwmmseComponents {
        let inv = 1.0 / m as f64;
        let n = self.n;
        let upper = |tri: &[ComplexSum]| {
            HermitianPsd::from_upper(n, |i, j| tri[packed_index(n, i, j)].value() * inv)
        };
        AwmmseComponents {
            psi_c: upper(&self.psi_c),
            psi_p: upper(&self.psi_p),
            t_c: self.t_c.value() * inv,
            t_p: self.t_p.value() * inv,
            f_c: self.f_c.iter().map(|s| s.value() * inv).collect(),
            f_p: self.f_p.iter().map(|s| s.value() * inv).collect(),
            u_c: self.u_c.value() * inv,
            u_p: self.u_p.value() * inv,
            v_c: self.v_c.value() * inv,
            v_p: self.v_p.value() * inv,
        }
    }
}

/// Index of `(i, j)`, `i <= j`, in a row-major packed upper triangle.
fn packed_index(n: usize, i: usize, j: usize) -> usize {
    i * n - i * (i + 1) / 2 + j
}

struct ComponentsAcc(Vec<UserAcc>);

impl Accumulator for ComponentsAcc {
    fn merge(&mut self, other: Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.merge_from(b);
        }
    }
}

/// Averages the per-realization components over the sample, one record per user.
pub fn accumulate_components(
    sample: &MonteCarloSample,
    gw: &EqualizerWeightSet,
) -> Result<Vec<AwmmseComponents>> {
    if (gw.users(), gw.realizations()) != (sample.k(), sample.len()) {
        return Err(Error::Dimension(
            "equalizer/weight set does not match the sample".into(),
        ));
    }
    let (k, n) = (sample.k(), sample.n_t());
    let acc = ordered_reduce(
        sample.len(),
        || ComponentsAcc(vec![UserAcc::new(n); k]),
        |acc, m| {
            for (user, ua) in acc.0.iter_mut().enumerate() {
                ua.add(sample.channel(m, user), &gw.entry(user, m));
            }
        },
    );
    Ok(acc.0.iter().map(|ua| ua.finish(sample.len())).collect())
}

/// Averaged augmented WMSEs `(xi_c, xi_p)` per user at precoder `p`.
pub fn awmse_values(
    components: &[AwmmseComponents],
    p: &PrecoderMatrix,
    sigma_n2: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(components.len(), p.k(), "one component record per user");
    let k = p.k();
    let mut xi_c = Vec::with_capacity(k);
    let mut xi_p = Vec::with_capacity(k);
    for (user, c) in components.iter().enumerate() {
        let private_quad_c: f64 = (0..k).map(|i| c.psi_c.quad_form(p.private(i))).sum();
        let private_quad_p: f64 = (0..k).map(|i| c.psi_p.quad_form(p.private(i))).sum();
        xi_c.push(
            c.psi_c.quad_form(p.common()) + private_quad_c - 2.0 * dot(&c.f_c, p.common()).re
                + c.common_constant(sigma_n2),
        );
        xi_p.push(
            private_quad_p - 2.0 * dot(&c.f_p, p.private(user)).re + c.private_constant(sigma_n2),
        );
    }
    (xi_c, xi_p)
}

/// How the common part enters the AWSMSE objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveMode {
    /// `max_k xi_c,k + sum_k xi_k`.
    Joint,
    /// Common symbol switched off: its AWMSE is pinned at 1 (zero rate).
    BroadcastOnly,
}

pub fn awsmse_objective(xi_c: &[f64], xi_p: &[f64], mode: ObjectiveMode) -> f64 {
    let common = match mode {
        ObjectiveMode::Joint => xi_c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ObjectiveMode::BroadcastOnly => 1.0,
    };
    common + xi_p.iter().sum::<f64>()
}

/// Running rate estimate `min_j upsilon_c,j + sum_k upsilon_k`.
pub fn rate_estimate(components: &[AwmmseComponents]) -> f64 {
    components
        .iter()
        .map(|c| c.v_c)
        .fold(f64::INFINITY, f64::min)
        + components.iter().map(|c| c.v_p).sum::<f64>()
}
