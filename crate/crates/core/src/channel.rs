//! Channel generation: true channels, transmitter-side estimates and the
//! conditional Monte-Carlo sample drawn around an estimate.
//!
//! Randomness comes from ChaCha8 substreams addressed by
//! `(master_seed, stream_id)`. Evaluation channels and Monte-Carlo samples
//! always come from different stream ids.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ComplexMatrix, C64};

pub type StreamRng = ChaCha8Rng;

/// Generator for substream `stream_id` of `master_seed`.
pub fn stream_rng(master_seed: u64, stream_id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream_id);
    rng
}

/// What a substream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamPurpose {
    Channel = 1,
    Error = 2,
    Sample = 3,
}

/// Packs a purpose and up to three indices into a stream id.
///
/// Layout: purpose in bits 56..64, `a` in 40..56, `b` in 24..40 and `c` in
/// 0..24.
pub fn stream_id(purpose: StreamPurpose, a: usize, b: usize, c: usize) -> u64 {
    assert!(
        a < 1 << 16 && b < 1 << 16 && c < 1 << 24,
        "stream index out of range"
    );
    ((purpose as u64) << 56) | ((a as u64) << 40) | ((b as u64) << 24) | c as u64
}

/// Antenna/user counts, power budget, noise and CSIT quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsitConfig {
    pub n_t: usize,
    pub k: usize,
    /// CSIT quality exponent.
    pub alpha: f64,
    /// Transmit power budget (linear).
    pub p_t: f64,
    /// Noise variance (linear).
    pub sigma_n2: f64,
    /// Clamp the error variance at the channel variance (1.0).
    pub cap_error_variance: bool,
}

impl CsitConfig {
    pub fn new(n_t: usize, k: usize, alpha: f64, p_t: f64, sigma_n2: f64) -> Result<Self> {
        let cfg = Self {
            n_t,
            k,
            alpha,
            p_t,
            sigma_n2,
            cap_error_variance: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configuration with unit noise, so that the SNR equals `P_t`.
    pub fn from_snr_db(n_t: usize, k: usize, alpha: f64, snr_db: f64) -> Result<Self> {
        Self::new(n_t, k, alpha, db_to_linear(snr_db), 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_t == 0 {
            return Err(Error::Config("n_t and k must be positive".into()));
        }
        if self.k > self.n_t {
            return Err(Error::Config(format!(
                "k = {} exceeds n_t = {}",
                self.k, self.n_t
            )));
        }
        if !(self.p_t > 0.0 && self.p_t.is_finite()) {
            return Err(Error::Config("p_t must be positive and finite".into()));
        }
        if !(self.sigma_n2 > 0.0 && self.sigma_n2.is_finite()) {
            return Err(Error::Config("sigma_n2 must be positive and finite".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn sigma_e2(&self) -> f64 {
        if self.cap_error_variance {
            error_variance(self.p_t, self.alpha)
        } else {
            error_variance_uncapped(self.p_t, self.alpha)
        }
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// CSIT error variance `P_t^-alpha`, capped at 1.
pub fn error_variance(p_t: f64, alpha: f64) -> f64 {
    error_variance_uncapped(p_t, alpha).min(1.0)
}

pub fn error_variance_uncapped(p_t: f64, alpha: f64) -> f64 {
    p_t.powf(-alpha)
}

/// One draw of a circularly-symmetric complex Gaussian with total variance 1.
fn standard_cn(rng: &mut StreamRng) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// `rows x cols` matrix of i.i.d. CN(0, variance) entries, drawn row-major.
fn gaussian_matrix(rng: &mut StreamRng, rows: usize, cols: usize, variance: f64) -> ComplexMatrix {
    let sd = variance.sqrt();
    ComplexMatrix::from_fn(rows, cols, |_, _| standard_cn(rng) * sd)
}

/// True channel: `N_t x K`, one CN(0, 1) column per user.
pub fn draw_channel(rng: &mut StreamRng, cfg: &CsitConfig) -> ComplexMatrix {
    gaussian_matrix(rng, cfg.n_t, cfg.k, 1.0)
}

/// True channel, estimate and estimation error.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDraw {
    pub h_true: ComplexMatrix,
    pub h_est: ComplexMatrix,
    pub h_err: ComplexMatrix,
    pub sigma_e2: f64,
}

/// Draws `H`, then `H~ ~ CN(0, sigma_e^2)` from the same generator, and sets
/// `H^ = H - H~`.
pub fn make_draw(rng: &mut StreamRng, cfg: &CsitConfig) -> ChannelDraw {
    let h_true = draw_channel(rng, cfg);
    make_draw_from(h_true, rng, cfg.sigma_e2())
}

/// Completes a draw for a given true channel using `err_rng` for the error.
pub fn make_draw_from(
    h_true: ComplexMatrix,
    err_rng: &mut StreamRng,
    sigma_e2: f64,
) -> ChannelDraw {
    let h_err = gaussian_matrix(err_rng, h_true.rows(), h_true.cols(), sigma_e2);
    let h_est = h_true.sub(&h_err);
    ChannelDraw {
        h_true,
        h_est,
        h_err,
        sigma_e2,
    }
}

/// Conditional channel realizations `H^(m) = H^ + H~^(m)` around an estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSample {
    n_t: usize,
    k: usize,
    // realization-major, then user-major: users[m][k * n_t + i]
    users: Vec<Vec<C64>>,
}

impl MonteCarloSample {
    pub fn new(realizations: &[ComplexMatrix]) -> Result<Self> {
        let first = realizations
            .first()
            .ok_or_else(|| Error::InvalidInput("Monte-Carlo sample must be nonempty".into()))?;
        let (n_t, k) = (first.rows(), first.cols());
        let mut users = Vec::with_capacity(realizations.len());
        for h in realizations {
            if (h.rows(), h.cols()) != (n_t, k) {
                return Err(Error::Dimension("realizations of unequal shape".into()));
            }
            users.push((0..k).flat_map(|j| h.column(j)).collect());
        }
        Ok(Self { n_t, k, users })
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn n_t(&self) -> usize {
        self.n_t
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Channel vector of user `k` in realization `m`.
    pub fn channel(&self, m: usize, k: usize) -> &[C64] {
        &self.users[m][k * self.n_t..(k + 1) * self.n_t]
    }

    pub fn realization(&self, m: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(self.n_t, self.k, |i, j| self.channel(m, j)[i])
    }

    /// Sample with realizations reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            n_t: self.n_t,
            k: self.k,
            users: order.iter().map(|&m| self.users[m].clone()).collect(),
        }
    }

    /// Concatenation of two samples over the same channel shape.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if (self.n_t, self.k) != (other.n_t, other.k) {
            return Err(Error::Dimension("samples of unequal shape".into()));
        }
        let mut users = self.users.clone();
        users.extend(other.users.iter().cloned());
        Ok(Self {
            n_t: self.n_t,
            k: self.k,
            users,
        })
    }
}

/// `m` realizations of the estimate plus independent CN(0, sigma_e2) errors.
pub fn draw_sample(
    rng: &mut StreamRng,
    h_est: &ComplexMatrix,
    sigma_e2: f64,
    m: usize,
) -> Result<MonteCarloSample> {
    if m == 0 {
        return Err(Error::InvalidInput("sample size must be at least 1".into()));
    }
    let realizations: Vec<ComplexMatrix> = (0..m)
        .map(|_| h_est.add(&gaussian_matrix(rng, h_est.rows(), h_est.cols(), sigma_e2)))
        .collect();
    MonteCarloSample::new(&realizations)
}

/// Writes a channel fixture: header `nt k seed`, then one line per matrix row
/// holding `re im` pairs. Values use the shortest round-trip representation.
pub fn write_fixture<W: Write>(mut out: W, h: &ComplexMatrix, seed: u64) -> Result<()> {
    writeln!(out, "{} {} {}", h.rows(), h.cols(), seed)?;
    for i in 0..h.rows() {
        let mut line = String::new();
        for j in 0..h.cols() {
            if j > 0 {
                line.push(' ');
            }
            let z = h[(i, j)];
            write!(line, "{:?} {:?}", z.re, z.im).expect("write to string");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Parses a fixture written by [`write_fixture`]; returns the matrix and seed.
pub fn read_fixture<R: BufRead>(input: R) -> Result<(ComplexMatrix, u64)> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty fixture".into()))??;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 3 {
        return Err(Error::InvalidInput(format!(
            "bad fixture header {header:?}"
        )));
    }
    let parse_usize = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::InvalidInput(e.to_string()))
    };
    let (rows, cols) = (parse_usize(head[0])?, parse_usize(head[1])?);
    let seed = head[2]
        .parse::<u64>()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let line = lines
            .next()
            .ok_or_else(|| Error::InvalidInput("truncated fixture".into()))??;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::InvalidInput(e.to_string()))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 2 * cols {
            return Err(Error::InvalidInput(format!(
                "expected {} values per row",
                2 * cols
            )));
        }
        data.extend(vals.chunks(2).map(|p| C64::new(p[0], p[1])));
    }
    Ok((ComplexMatrix::new(rows, cols, data)?, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_variance_values() {
        assert!((error_variance(100.0, 0.6) - 0.063_095_734_448_019_32).abs() < 1e-15);
        assert_eq!(error_variance(37.0, 0.0), 1.0);
        assert_eq!(error_variance(0.1, 0.6), 1.0);
        assert!((error_variance_uncapped(0.1, 0.6) - 3.981_071_705_534_972).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(CsitConfig::new(2, 3, 0.5, 1.0, 1.0).is_err());
        assert!(CsitConfig::new(2, 2, 0.5, 0.0, 1.0).is_err());
        assert!(CsitConfig::new(2, 2, 0.5, 1.0, 0.0).is_err());
        assert!(CsitConfig::new(2, 2, -0.1, 1.0, 1.0).is_err());
        let cfg = CsitConfig::from_snr_db(2, 2, 0.6, 20.0).unwrap();
        assert!((cfg.p_t - 100.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_csit_estimate_equals_truth() {
        let mut cfg = CsitConfig::new(3, 2, 0.0, 10.0, 1.0).unwrap();
        cfg.alpha = f64::INFINITY; // P_t^-inf = 0
        let draw = make_draw(&mut stream_rng(1, 0), &cfg);
        assert_eq!(draw.sigma_e2, 0.0);
        assert_eq!(draw.h_est, draw.h_true);
    }

    #[test]
    fn vanishing_error_at_large_alpha() {
        let cfg = CsitConfig::new(2, 2, 10.0, 100.0, 1.0).unwrap();
        let draw = make_draw(&mut stream_rng(5, 0), &cfg);
        assert!(draw.h_err.frobenius_norm() <= 1e-4);
    }

    #[test]
    fn estimate_plus_error_is_truth() {
        let cfg = CsitConfig::new(4, 3, 0.3, 10.0, 1.0).unwrap();
        let d = make_draw(&mut stream_rng(2, 7), &cfg);
        let rec = d.h_est.add(&d.h_err);
        for (a, b) in rec.data().iter().zip(d.h_true.data()) {
            assert!((a - b).norm() <= 2.0 * f64::EPSILON * b.norm().max(1.0));
        }
    }

    #[test]
    fn degenerate_sample_repeats_estimate() {
        let h = ComplexMatrix::from_fn(2, 2, |i, j| C64::new(i as f64, j as f64));
        let s = draw_sample(&mut stream_rng(0, 0), &h, 0.0, 5).unwrap();
        assert_eq!(s.len(), 5);
        for m in 0..5 {
            assert_eq!(s.realization(m), h);
        }
        assert!(draw_sample(&mut stream_rng(0, 0), &h, 0.0, 0).is_err());
    }

    #[test]
    fn same_stream_is_reproducible_and_streams_differ() {
        let cfg = CsitConfig::new(2, 2, 0.6, 100.0, 1.0).unwrap();
        let a = make_draw(&mut stream_rng(11, 3), &cfg);
        let b = make_draw(&mut stream_rng(11, 3), &cfg);
        let c = make_draw(&mut stream_rng(11, 4), &cfg);
        assert_eq!(a, b);
        assert_ne!(a.h_true, c.h_true);
    }

    #[test]
    fn stream_ids_are_distinct() {
        let a = stream_id(StreamPurpose::Channel, 0, 0, 1);
        let b = stream_id(StreamPurpose::Sample, 0, 0, 1);
        let c = stream_id(StreamPurpose::Channel, 0, 1, 1);
        assert!(a != b && a != c && b != c);
    }

    #[test]
    fn fixture_round_trip() {
        let cfg = CsitConfig::new(3, 2, 0.6, 100.0, 1.0).unwrap();
        let h = draw_channel(&mut stream_rng(17, 0), &cfg);
        let mut buf = Vec::new();
        write_fixture(&mut buf, &h, 17).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("3 2 17\n"));
        let (back, seed) = read_fixture(&buf[..]).unwrap();
        assert_eq!(seed, 17);
        assert_eq!(back, h);
    }

    #[test]
    fn fixture_rejects_malformed() {
        assert!(read_fixture(&b""[..]).is_err());
        assert!(read_fixture(&b"2 2\n"[..]).is_err());
        assert!(read_fixture(&b"1 1 0\n0.5\n"[..]).is_err());
        assert!(read_fixture(&b"2 1 0\n0.5 0.1\n"[..]).is_err());
    }
}
