//! Experiment driver: configuration, per-channel runs, ESR sweeps and AO
//! convergence traces, with CSV/JSON output.
//!
//! Every channel index `c` owns three random substreams (true channel,
//! estimation error, Monte-Carlo sample). They do not depend on the SNR,
//! the CSIT exponent or the scheme, so all cells of a sweep see the same
//! channels and differ only in how the error is scaled.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ao::{run_ao, AoParams, AoTrace, InitScheme, DEFAULT_EPSILON_R, DEFAULT_N_MAX};
use crate::awsmse::ObjectiveMode;
use crate::baselines::{jmb_zf_svd_wf, zf_wf};
use crate::channel::{
    db_to_linear, draw_channel, draw_sample, make_draw_from, stream_id, stream_rng, ChannelDraw,
    CsitConfig, MonteCarloSample, StreamPurpose,
};
use crate::error::{Error, Result};
use crate::qcqp;
use crate::receivers::{sum_rate, PrecoderMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "JMB-AWSMSE")]
    JmbAwsmse,
    #[serde(rename = "BC-AWSMSE")]
    BcAwsmse,
    #[serde(rename = "JMB-ZF-SVD")]
    JmbZfSvd,
    #[serde(rename = "ZF-WF")]
    ZfWf,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::JmbAwsmse,
        Scheme::BcAwsmse,
        Scheme::JmbZfSvd,
        Scheme::ZfWf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::JmbAwsmse => "JMB-AWSMSE",
            Scheme::BcAwsmse => "BC-AWSMSE",
            Scheme::JmbZfSvd => "JMB-ZF-SVD",
            Scheme::ZfWf => "ZF-WF",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown scheme '{s}'")))
    }
}

fn default_n_t() -> usize {
    2
}
fn default_k() -> usize {
    2
}
fn default_alphas() -> Vec<f64> {
    vec![0.6]
}
fn default_snr_db() -> Vec<f64> {
    (0..=8).map(|i| 5.0 * i as f64).collect()
}
fn default_m() -> usize {
    200
}
fn default_n_channels() -> usize {
    20
}
fn default_schemes() -> Vec<Scheme> {
    Scheme::ALL.to_vec()
}
fn default_init() -> InitScheme {
    InitScheme::ZfSvd
}
fn default_epsilon_r() -> f64 {
    DEFAULT_EPSILON_R
}
fn default_n_max() -> usize {
    DEFAULT_N_MAX
}
fn default_solver_tol() -> f64 {
    qcqp::DEFAULT_TOL
}
fn default_solver_max_iter() -> usize {
    qcqp::DEFAULT_MAX_ITER
}
fn default_seed() -> u64 {
    1
}
fn default_true() -> bool {
    true
}
fn default_convergence_snr_db() -> Vec<f64> {
    vec![5.0, 20.0, 35.0]
}
fn default_convergence_inits() -> Vec<InitScheme> {
    InitScheme::ALL.to_vec()
}

pub const PAPER_SCALE_M: usize = 1000;
pub const PAPER_SCALE_CHANNELS: usize = 100;

/// One experiment, read from a JSON document. Missing keys take defaults;
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_n_t")]
    pub n_t: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_snr_db")]
    pub snr_db: Vec<f64>,
    /// Monte-Carlo sample size per channel.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_n_channels")]
    pub n_channels: usize,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_init")]
    pub init: InitScheme,
    #[serde(default = "default_epsilon_r")]
    pub epsilon_r: f64,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_solver_tol")]
    pub solver_tol: f64,
    #[serde(default = "default_solver_max_iter")]
    pub solver_max_iter: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub threads: usize,
    #[serde(default = "default_true")]
    pub cap_error_variance: bool,
    #[serde(default = "default_convergence_snr_db")]
    pub convergence_snr_db: Vec<f64>,
    #[serde(default = "default_convergence_inits")]
    pub convergence_inits: Vec<InitScheme>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn paper_scale(mut self) -> Self {
        self.m = PAPER_SCALE_M;
        self.n_channels = PAPER_SCALE_CHANNELS;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_t == 0 || self.k == 0 || self.m == 0 || self.n_channels == 0 {
            return bad("n_t, k, m and n_channels must be at least 1");
        }
        if self.k > self.n_t {
            return bad("k must not exceed n_t");
        }
        if self.alphas.is_empty() || self.snr_db.is_empty() || self.schemes.is_empty() {
            return bad("alphas, snr_db and schemes must be nonempty");
        }
        if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("every alpha must lie in [0, 1]");
        }
        if self
            .snr_db
            .iter()
            .chain(&self.convergence_snr_db)
            .any(|s| !s.is_finite())
        {
            return bad("SNR values must be finite");
        }
        if self.n_channels >= 1 << 24
            || self.alphas.len() >= 1 << 16
            || self.snr_db.len() >= 1 << 16
        {
            return bad("too many channels or grid points");
        }
        self.ao_params(self.init).validate()
    }

    pub fn ao_params(&self, init: InitScheme) -> AoParams {
        AoParams {
            epsilon_r: self.epsilon_r,
            n_max: self.n_max,
            solver_tol: self.solver_tol,
            solver_max_iter: self.solver_max_iter,
            init,
        }
    }

    pub fn csit(&self, alpha: f64, snr_db: f64) -> Result<CsitConfig> {
        let mut c = CsitConfig::new(self.n_t, self.k, alpha, db_to_linear(snr_db), 1.0)?;
        c.cap_error_variance = self.cap_error_variance;
        Ok(c)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
}

/// True channel, estimate and sample of channel index `c` for one cell.
pub fn channel_instance(
    cfg: &ExperimentConfig,
    csit: &CsitConfig,
    c: usize,
) -> Result<(ChannelDraw, MonteCarloSample)> {
    let h = draw_channel(
        &mut stream_rng(cfg.seed, stream_id(StreamPurpose::Channel, 0, 0, c)),
        csit,
    );
    let sigma_e2 = csit.sigma_e2();
    let draw = make_draw_from(
        h,
        &mut stream_rng(cfg.seed, stream_id(StreamPurpose::Error, 0, 0, c)),
        sigma_e2,
    );
    let sample = draw_sample(
        &mut stream_rng(cfg.seed, stream_id(StreamPurpose::Sample, 0, 0, c)),
        &draw.h_est,
        sigma_e2,
        cfg.m,
    )?;
    Ok((draw, sample))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleRun {
    pub precoder: PrecoderMatrix,
    /// Sum rate on the true channel.
    pub sum_rate: f64,
    pub trace: Option<AoTrace>,
}

/// Designs a precoder for channel `c` from the estimate and sample only,
/// then evaluates it on the true channel.
pub fn run_single(
    cfg: &ExperimentConfig,
    scheme: Scheme,
    alpha: f64,
    snr_db: f64,
    c: usize,
) -> Result<SingleRun> {
    let csit = cfg.csit(alpha, snr_db)?;
    let (draw, sample) = channel_instance(cfg, &csit, c)?;
    let (precoder, trace) = design(cfg, scheme, &csit, &draw.h_est, &sample)?;
    Ok(SingleRun {
        sum_rate: sum_rate(&draw.h_true, &precoder, csit.sigma_n2),
        precoder,
        trace,
    })
}

fn design(
    cfg: &ExperimentConfig,
    scheme: Scheme,
    csit: &CsitConfig,
    h_est: &crate::linalg::ComplexMatrix,
    sample: &MonteCarloSample,
) -> Result<(PrecoderMatrix, Option<AoTrace>)> {
    let params = cfg.ao_params(cfg.init);
    Ok(match scheme {
        Scheme::JmbAwsmse => {
            let (p, t) = run_ao(h_est, sample, csit, &params, ObjectiveMode::Joint)?;
            (p, Some(t))
        }
        Scheme::BcAwsmse => {
            let (p, t) = run_ao(h_est, sample, csit, &params, ObjectiveMode::BroadcastOnly)?;
            (p, Some(t))
        }
        Scheme::JmbZfSvd => (
            jmb_zf_svd_wf(h_est, csit.p_t, csit.alpha, csit.sigma_n2)?,
            None,
        ),
        Scheme::ZfWf => (zf_wf(h_est, csit.p_t, csit.sigma_n2)?, None),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsrRecord {
    pub scheme: Scheme,
    pub alpha: f64,
    pub snr_db: f64,
    pub esr: f64,
    pub std_err: f64,
    /// Channels that produced a rate.
    pub n_channels: usize,
    pub m: usize,
    pub seed: u64,
    pub wall_time: f64,
    /// Per-channel sum rates in channel order; `None` where the run failed.
    pub per_channel: Vec<Option<f64>>,
    pub failures: Vec<String>,
}

pub const ESR_CSV_HEADER: &str = "scheme,alpha,snr_db,esr,std_err,n_channels,m,seed";

impl EsrRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{},{},{}",
            self.scheme,
            self.alpha,
            self.snr_db,
            self.esr,
            self.std_err,
            self.n_channels,
            self.m,
            self.seed
        )
    }
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_and_std_err(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// All schemes of one `(alpha, snr)` cell. Must run inside the sweep pool.
fn run_cell(cfg: &ExperimentConfig, alpha: f64, snr_db: f64) -> Result<Vec<EsrRecord>> {
    let csit = cfg.csit(alpha, snr_db)?;
    let start = Instant::now();
    let jobs: Vec<(usize, usize)> = (0..cfg.n_channels)
        .flat_map(|c| (0..cfg.schemes.len()).map(move |s| (c, s)))
        .collect();
    let results: Vec<Result<f64>> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let (draw, sample) = channel_instance(cfg, &csit, c)?;
            let (p, _) = design(cfg, cfg.schemes[s], &csit, &draw.h_est, &sample)?;
            Ok(sum_rate(&draw.h_true, &p, csit.sigma_n2))
        })
        .collect();
    let wall_time = start.elapsed().as_secs_f64();
    let records = cfg
        .schemes
        .iter()
        .enumerate()
        .map(|(s, &scheme)| {
            let mut per_channel = Vec::with_capacity(cfg.n_channels);
            let mut failures = Vec::new();
            for c in 0..cfg.n_channels {
                match &results[c * cfg.schemes.len() + s] {
                    Ok(v) => per_channel.push(Some(*v)),
                    Err(e) => {
                        per_channel.push(None);
                        failures.push(format!("channel {c}: {e}"));
                    }
                }
            }
            let ok: Vec<f64> = per_channel.iter().flatten().copied().collect();
            let (esr, std_err) = mean_and_std_err(&ok);
            EsrRecord {
                scheme,
                alpha,
                snr_db,
                esr,
                std_err,
                n_channels: ok.len(),
                m: cfg.m,
                seed: cfg.seed,
                wall_time,
                per_channel,
                failures,
            }
        })
        .collect();
    Ok(records)
}

#[derive(Debug, Clone, Serialize)]
struct Meta<'a> {
    config: &'a ExperimentConfig,
    crate_version: &'static str,
    command: &'a str,
    decisions: Decisions,
}

#[derive(Debug, Clone, Serialize)]
struct Decisions {
    error_variance_capped: bool,
    wmse_weight_convention: &'static str,
    wf_gain_includes_noise: bool,
    bc_init_alpha: f64,
    solver_tol: f64,
    solver_max_iter: usize,
    epsilon_r: f64,
    n_max: usize,
    dof_split_private_budget: &'static str,
}

fn write_meta(cfg: &ExperimentConfig, out: &Path, command: &str) -> Result<()> {
    let meta = Meta {
        config: cfg,
        crate_version: env!("CARGO_PKG_VERSION"),
        command,
        decisions: Decisions {
            error_variance_capped: cfg.cap_error_variance,
            wmse_weight_convention: "xi = 1 + (u*eps - ln u - 1)/ln 2, exact minimiser u = 1/eps",
            wf_gain_includes_noise: true,
            bc_init_alpha: 1.0,
            solver_tol: cfg.solver_tol,
            solver_max_iter: cfg.solver_max_iter,
            epsilon_r: cfg.epsilon_r,
            n_max: cfg.n_max,
            dof_split_private_budget: "min(P_t^alpha, P_t)",
        },
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(out.join("meta.json"), text + "\n")?;
    Ok(())
}

/// Every scheme at every `(alpha, snr)` point. With `out`, writes
/// `meta.json` first and appends to `esr.csv` after each cell.
pub fn run_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<EsrRecord>> {
    cfg.validate()?;
    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_meta(cfg, dir, "sweep")?;
            let mut w = BufWriter::new(File::create(dir.join("esr.csv"))?);
            writeln!(w, "{ESR_CSV_HEADER}")?;
            w.flush()?;
            Some(w)
        }
        None => None,
    };
    let pool = cfg.pool()?;
    let mut all = Vec::new();
    for &alpha in &cfg.alphas {
        for &snr in &cfg.snr_db {
            let records = pool.install(|| run_cell(cfg, alpha, snr))?;
            if let Some(w) = csv.as_mut() {
                for r in &records {
                    writeln!(w, "{}", r.csv_row())?;
                }
                w.flush()?;
            }
            all.extend(records);
        }
    }
    Ok(all)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRun {
    pub snr_db: f64,
    pub init: InitScheme,
    pub trace: AoTrace,
}

/// AO traces of the joint scheme on channel 0 for every SNR and
/// initialisation in the convergence lists, at the first configured alpha.
pub fn run_convergence(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<ConvergenceRun>> {
    cfg.validate()?;
    let alpha = cfg.alphas[0];
    let jobs: Vec<(f64, InitScheme)> = cfg
        .convergence_snr_db
        .iter()
        .flat_map(|&s| cfg.convergence_inits.iter().map(move |&i| (s, i)))
        .collect();
    let pool = cfg.pool()?;
    let runs: Vec<Result<ConvergenceRun>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(snr_db, init)| {
                let csit = cfg.csit(alpha, snr_db)?;
                let (draw, sample) = channel_instance(cfg, &csit, 0)?;
                let (_, trace) = run_ao(
                    &draw.h_est,
                    &sample,
                    &csit,
                    &cfg.ao_params(init),
                    ObjectiveMode::Joint,
                )?;
                Ok(ConvergenceRun {
                    snr_db,
                    init,
                    trace,
                })
            })
            .collect()
    });
    let runs: Vec<ConvergenceRun> = runs.into_iter().collect::<Result<_>>()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_meta(cfg, dir, "convergence")?;
        for r in &runs {
            let name = format!("trace_{}_{}.csv", r.snr_db, r.init);
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            r.trace.write_csv(&mut w)?;
            w.flush()?;
        }
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            m: 30,
            n_channels: 3,
            snr_db: vec![10.0],
            threads: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn defaults_and_unknown_keys() {
        let cfg = ExperimentConfig::default();
        assert_eq!((cfg.m, cfg.n_channels), (200, 20));
        assert_eq!(
            cfg.snr_db,
            vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0]
        );
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"n_tx": 2}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"k": 3}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"schemes": []}"#),
            Err(Error::Config(_))
        ));
        let cfg =
            ExperimentConfig::from_json(r#"{"schemes": ["ZF-WF", "BC-AWSMSE"], "init": "MF-e"}"#)
                .unwrap();
        assert_eq!(cfg.schemes, vec![Scheme::ZfWf, Scheme::BcAwsmse]);
        assert_eq!(cfg.init, InitScheme::MfE);
        let paper = cfg.paper_scale();
        assert_eq!((paper.m, paper.n_channels), (1000, 100));
    }

    #[test]
    fn std_err_definition() {
        let (m, s) = mean_and_std_err(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zf_wf_with_perfect_estimate_hits_nominal_rate() {
        let cfg = small();
        let csit = cfg.csit(1.0, 10.0).unwrap();
        let mut exact = csit;
        exact.alpha = 50.0;
        let (draw, _) = channel_instance(&cfg, &exact, 0).unwrap();
        assert!(draw.sigma_e2 < 1e-40);
        let p = zf_wf(&draw.h_est, csit.p_t, csit.sigma_n2).unwrap();
        let dirs = crate::linalg::zf_directions(&draw.h_est).unwrap();
        let gains: Vec<f64> = (0..2)
            .map(|k| crate::linalg::dot(&draw.h_est.column(k), &dirs[k]).norm_sqr())
            .collect();
        let wf = crate::baselines::water_fill(&gains, csit.p_t).unwrap();
        let nominal: f64 = gains
            .iter()
            .zip(&wf.powers)
            .map(|(g, q)| (1.0 + g * q).log2())
            .sum();
        assert!((sum_rate(&draw.h_true, &p, 1.0) - nominal).abs() < 1e-8);
    }

    #[test]
    fn single_cell_sweep_matches_single_runs() {
        let cfg = ExperimentConfig {
            schemes: vec![Scheme::JmbAwsmse],
            ..small()
        };
        let records = run_sweep(&cfg, None).unwrap();
        assert_eq!(records.len(), 1);
        let rates: Vec<f64> = (0..3)
            .map(|c| {
                run_single(&cfg, Scheme::JmbAwsmse, 0.6, 10.0, c)
                    .unwrap()
                    .sum_rate
            })
            .collect();
        let (esr, se) = mean_and_std_err(&rates);
        assert_eq!(records[0].esr.to_bits(), esr.to_bits());
        assert_eq!(records[0].std_err.to_bits(), se.to_bits());
    }

    #[test]
    fn sweep_is_thread_count_independent() {
        let one = run_sweep(
            &ExperimentConfig {
                threads: 1,
                ..small()
            },
            None,
        )
        .unwrap();
        let four = run_sweep(
            &ExperimentConfig {
                threads: 4,
                ..small()
            },
            None,
        )
        .unwrap();
        for (a, b) in one.iter().zip(&four) {
            assert_eq!(a.csv_row(), b.csv_row());
        }
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            schemes: vec![Scheme::ZfWf, Scheme::JmbZfSvd],
            ..small()
        };
        run_sweep(&cfg, Some(dir.path())).unwrap();
        let csv = fs::read_to_string(dir.path().join("esr.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), ESR_CSV_HEADER);
        assert_eq!(lines.count(), 2);
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap())
                .unwrap();
        assert_eq!(meta["config"]["m"], 30);

        let conv = ExperimentConfig {
            n_max: 1,
            convergence_snr_db: vec![5.0],
            ..small()
        };
        let runs = run_convergence(&conv, Some(dir.path())).unwrap();
        assert_eq!(runs.len(), 4);
        for r in &runs {
            assert_eq!(r.trace.len(), 1);
        }
        assert!(dir.path().join("trace_5_ZF-SVD.csv").exists());
    }
}
