//! Per-user receive powers, MMSE equalizers, MSEs and rates for a
//! joint multicast/broadcast precoder, and their sample averages.
//!
//! Each user first decodes the common symbol treating everything else as
//! noise, cancels it, then decodes its private symbol. All quantities are
//! closed-form expectations over data symbols and noise.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::channel::MonteCarloSample;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm_sqr, ComplexMatrix, C64};
use crate::sum::{ordered_reduce, Accumulator, NeumaierSum};

/// Absolute slack on the transmit power constraint.
pub const EPS_POW: f64 = 1e-9;

/// Common precoder plus one private precoder per user.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderMatrix {
    n_t: usize,
    // column 0 is the common precoder, column k+1 the private precoder of user k
    columns: Vec<Vec<C64>>,
}

impl PrecoderMatrix {
    pub fn zeros(n_t: usize, k: usize) -> Self {
        Self {
            n_t,
            columns: vec![vec![C64::new(0.0, 0.0); n_t]; k + 1],
        }
    }

    pub fn from_parts(common: Vec<C64>, private: Vec<Vec<C64>>) -> Result<Self> {
        let n_t = common.len();
        if private.is_empty() {
            return Err(Error::Dimension(
                "at least one private precoder is required".into(),
            ));
        }
        if private.iter().any(|p| p.len() != n_t) {
            return Err(Error::Dimension("precoders of unequal length".into()));
        }
        let mut columns = Vec::with_capacity(private.len() + 1);
        columns.push(common);
        columns.extend(private);
        let p = Self { n_t, columns };
        if !p.power().is_finite() {
            return Err(Error::InvalidInput(
                "precoder has non-finite entries".into(),
            ));
        }
        Ok(p)
    }

    /// From an `N_t x (K+1)` matrix whose first column is the common precoder.
    pub fn from_matrix(m: &ComplexMatrix) -> Result<Self> {
        if m.cols() < 2 {
            return Err(Error::Dimension(
                "precoder matrix needs K+1 >= 2 columns".into(),
            ));
        }
        let cols = m.columns();
        Self::from_parts(cols[0].clone(), cols[1..].to_vec())
    }

    pub fn to_matrix(&self) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.n_t, self.columns.len(), |i, j| self.columns[j][i])
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    /// Number of users.
    pub fn k(&self) -> usize {
        self.columns.len() - 1
    }

    pub fn common(&self) -> &[C64] {
        &self.columns[0]
    }

    pub fn private(&self, k: usize) -> &[C64] {
        &self.columns[k + 1]
    }

    /// Column `j` of `[p_c, p_1, ..., p_K]`.
    pub fn column(&self, j: usize) -> &[C64] {
        &self.columns[j]
    }

    pub fn column_mut(&mut self, j: usize) -> &mut [C64] {
        &mut self.columns[j]
    }

    /// `tr(P P^H)`.
    pub fn power(&self) -> f64 {
        self.columns.iter().map(|c| norm_sqr(c)).sum()
    }

    pub fn common_power(&self) -> f64 {
        norm_sqr(&self.columns[0])
    }

    pub fn is_feasible(&self, p_t: f64) -> bool {
        self.power() <= p_t + EPS_POW
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            n_t: self.n_t,
            columns: self
                .columns
                .iter()
                .map(|c| c.iter().map(|z| z * a).collect())
                .collect(),
        }
    }

    pub fn with_common_zeroed(&self) -> Self {
        let mut p = self.clone();
        p.columns[0]
            .iter_mut()
            .for_each(|z| *z = C64::new(0.0, 0.0));
        p
    }
}

/// Receive powers of one user: `T_c,k`, `T_k`, `E_c,k`, `E_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkTerms {
    pub t_c: f64,
    pub t_p: f64,
    pub e_c: f64,
    pub e_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserRates {
    /// Rate at which this user could decode the common symbol.
    pub r_c: f64,
    /// Private rate after common-symbol cancellation.
    pub r_p: f64,
}

fn check_user(h_k: &[C64], p: &PrecoderMatrix, k: usize) {
    assert_eq!(h_k.len(), p.n_t(), "channel length");
    assert!(k < p.k(), "user index out of range");
}

pub fn link_terms(h_k: &[C64], p: &PrecoderMatrix, k: usize, sigma_n2: f64) -> LinkTerms {
    check_user(h_k, p, k);
    let mut t_p = sigma_n2;
    for i in 0..p.k() {
        t_p += dot(p.private(i), h_k).norm_sqr();
    }
    let t_c = t_p + dot(p.common(), h_k).norm_sqr();
    let e_p = t_p - dot(p.private(k), h_k).norm_sqr();
    LinkTerms {
        t_c,
        t_p,
        e_c: t_p,
        e_p,
    }
}

/// MMSE equalizers `(g_c, g_p)`.
pub fn mmse_equalizers(h_k: &[C64], p: &PrecoderMatrix, k: usize, sigma_n2: f64) -> (C64, C64) {
    let lt = link_terms(h_k, p, k, sigma_n2);
    (
        dot(p.common(), h_k) / lt.t_c,
        dot(p.private(k), h_k) / lt.t_p,
    )
}

/// MSEs `(eps_c, eps_p)` for arbitrary equalizers.
pub fn mse(
    h_k: &[C64],
    p: &PrecoderMatrix,
    k: usize,
    g_c: C64,
    g_p: C64,
    sigma_n2: f64,
) -> (f64, f64) {
    let lt = link_terms(h_k, p, k, sigma_n2);
    let eps_c = g_c.norm_sqr() * lt.t_c - 2.0 * (g_c * dot(h_k, p.common())).re + 1.0;
    let eps_p = g_p.norm_sqr() * lt.t_p - 2.0 * (g_p * dot(h_k, p.private(k))).re + 1.0;
    (eps_c, eps_p)
}

/// MMSEs `(E_c,k / T_c,k, E_k / T_k)`.
pub fn mmse(h_k: &[C64], p: &PrecoderMatrix, k: usize, sigma_n2: f64) -> (f64, f64) {
    let lt = link_terms(h_k, p, k, sigma_n2);
    (lt.e_c / lt.t_c, lt.e_p / lt.t_p)
}

/// SINRs `(gamma_c, gamma_p)` computed directly from receive powers.
pub fn sinrs(h_k: &[C64], p: &PrecoderMatrix, k: usize, sigma_n2: f64) -> (f64, f64) {
    let lt = link_terms(h_k, p, k, sigma_n2);
    let sig_c = dot(p.common(), h_k).norm_sqr();
    let sig_p = dot(p.private(k), h_k).norm_sqr();
    (sig_c / lt.e_c, sig_p / lt.e_p)
}

/// Common and private rates in bits per channel use.
pub fn rates(h_k: &[C64], p: &PrecoderMatrix, k: usize, sigma_n2: f64) -> UserRates {
    let (g_c, g_p) = sinrs(h_k, p, k, sigma_n2);
    UserRates {
        r_c: g_c.ln_1p() / LN_2,
        r_p: g_p.ln_1p() / LN_2,
    }
}

/// Per-user rates on one channel matrix (one column per user).
pub fn user_rates(h_all: &ComplexMatrix, p: &PrecoderMatrix, sigma_n2: f64) -> Vec<UserRates> {
    (0..p.k())
        .map(|k| rates(&h_all.column(k), p, k, sigma_n2))
        .collect()
}

/// Instantaneous sum rate: `min_k R_c,k + sum_k R_k`.
pub fn sum_rate(h_all: &ComplexMatrix, p: &PrecoderMatrix, sigma_n2: f64) -> f64 {
    let r = user_rates(h_all, p, sigma_n2);
    let common = r.iter().map(|u| u.r_c).fold(f64::INFINITY, f64::min);
    common + r.iter().map(|u| u.r_p).sum::<f64>()
}

/// Sample-average rates.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageRates {
    pub common: Vec<f64>,
    pub private: Vec<f64>,
    /// `min_k common[k] + sum_k private[k]`.
    pub asr: f64,
}

struct RateAcc {
    common: Vec<NeumaierSum>,
    private: Vec<NeumaierSum>,
}

impl Accumulator for RateAcc {
    fn merge(&mut self, other: Self) {
        for (a, b) in self.common.iter_mut().zip(&other.common) {
            a.merge(b);
        }
        for (a, b) in self.private.iter_mut().zip(&other.private) {
            a.merge(b);
        }
    }
}

pub fn average_rates(sample: &MonteCarloSample, p: &PrecoderMatrix, sigma_n2: f64) -> AverageRates {
    let k = p.k();
    assert_eq!((sample.n_t(), sample.k()), (p.n_t(), k), "sample shape");
    let acc = ordered_reduce(
        sample.len(),
        || RateAcc {
            common: vec![NeumaierSum::default(); k],
            private: vec![NeumaierSum::default(); k],
        },
        |acc, m| {
            for user in 0..k {
                let r = rates(sample.channel(m, user), p, user, sigma_n2);
                acc.common[user].add(r.r_c);
                acc.private[user].add(r.r_p);
            }
        },
    );
    let inv_m = 1.0 / sample.len() as f64;
    let common: Vec<f64> = acc.common.iter().map(|s| s.value() * inv_m).collect();
    let private: Vec<f64> = acc.private.iter().map(|s| s.value() * inv_m).collect();
    let asr = common.iter().copied().fold(f64::INFINITY, f64::min) + private.iter().sum::<f64>();
    AverageRates {
        common,
        private,
        asr,
    }
}
