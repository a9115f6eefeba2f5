//! Alternating optimisation: MMSE equalizer/weight updates interleaved with
//! the precoder QCQP, and the structured initialisations it starts from.

use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::awsmse::{accumulate_components, rate_estimate, update_blocks, ObjectiveMode};
use crate::channel::{CsitConfig, MonteCarloSample};
use crate::error::{Error, Result};
use crate::linalg::{
    dominant_left_singular_vector, mf_directions, scale, unit_vector, zf_directions, ComplexMatrix,
};
use crate::qcqp::{self, QcqpProblem, SolverStatus};
use crate::receivers::{average_rates, PrecoderMatrix};

pub const DEFAULT_EPSILON_R: f64 = 1e-4;
pub const DEFAULT_N_MAX: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitScheme {
    #[serde(rename = "ZF-SVD")]
    ZfSvd,
    #[serde(rename = "ZF-e")]
    ZfE,
    #[serde(rename = "MF-SVD")]
    MfSvd,
    #[serde(rename = "MF-e")]
    MfE,
}

impl InitScheme {
    pub const ALL: [InitScheme; 4] = [
        InitScheme::ZfSvd,
        InitScheme::ZfE,
        InitScheme::MfSvd,
        InitScheme::MfE,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitScheme::ZfSvd => "ZF-SVD",
            InitScheme::ZfE => "ZF-e",
            InitScheme::MfSvd => "MF-SVD",
            InitScheme::MfE => "MF-e",
        }
    }
}

impl std::fmt::Display for InitScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InitScheme::ALL
            .into_iter()
            .find(|i| i.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown initialisation '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AoParams {
    pub epsilon_r: f64,
    pub n_max: usize,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub init: InitScheme,
}

impl Default for AoParams {
    fn default() -> Self {
        Self {
            epsilon_r: DEFAULT_EPSILON_R,
            n_max: DEFAULT_N_MAX,
            solver_tol: qcqp::DEFAULT_TOL,
            solver_max_iter: qcqp::DEFAULT_MAX_ITER,
            init: InitScheme::ZfSvd,
        }
    }
}

impl AoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_r > 0.0) {
            return Err(Error::Config("epsilon_r must be positive".into()));
        }
        if self.n_max == 0 {
            return Err(Error::Config("n_max must be at least 1".into()));
        }
        if !(self.solver_tol > 0.0) || self.solver_max_iter == 0 {
            return Err(Error::Config(
                "solver tolerance and iteration cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Common and per-private powers of the DoF-motivated split.
///
/// The common symbol gets `P_t - P_t^alpha` (never negative) and the private
/// symbols share the rest, which is `P_t^alpha` whenever `P_t >= 1`.
pub fn dof_power_split(p_t: f64, alpha: f64, k: usize) -> Result<(f64, f64)> {
    if !(p_t > 0.0) || !p_t.is_finite() {
        return Err(Error::InvalidInput("power budget must be positive".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput("alpha must lie in [0, 1]".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("at least one user".into()));
    }
    let common = (p_t - p_t.powf(alpha)).max(0.0);
    Ok((common, (p_t - common) / k as f64))
}

/// Structured starting precoder for `scheme`.
pub fn initialize(
    scheme: InitScheme,
    h_est: &ComplexMatrix,
    p_t: f64,
    alpha: f64,
) -> Result<PrecoderMatrix> {
    let k = h_est.cols();
    let (common, per_private) = dof_power_split(p_t, alpha, k)?;
    let dirs = match scheme {
        InitScheme::ZfSvd | InitScheme::ZfE => zf_directions(h_est)?,
        InitScheme::MfSvd | InitScheme::MfE => mf_directions(h_est)?,
    };
    let common_dir = match scheme {
        InitScheme::ZfSvd | InitScheme::MfSvd => {
            dominant_left_singular_vector(h_est, 1e-13, 100_000)?
        }
        InitScheme::ZfE | InitScheme::MfE => unit_vector(h_est.rows(), 0),
    };
    let private = dirs.iter().map(|d| scale(d, per_private.sqrt())).collect();
    PrecoderMatrix::from_parts(scale(&common_dir, common.sqrt()), private)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoIteration {
    pub iter: usize,
    /// Rate estimate from the components of this iteration, i.e. the ASR of
    /// the precoder entering the iteration.
    pub rbar: f64,
    /// Independently evaluated ASR of the precoder entering the iteration.
    pub asr: f64,
    /// AWSMSE after the precoder update, constant included.
    pub awsmse_obj: f64,
    pub power: f64,
    pub solver_status: SolverStatus,
    pub solver_iters: usize,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AoTrace {
    pub iterations: Vec<AoIteration>,
    pub stop_reason: StopReason,
    /// ASR of the returned precoder.
    pub final_asr: f64,
}

impl AoTrace {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    /// Whether any inner solve stopped short of the tolerance.
    pub fn had_inexact_solves(&self) -> bool {
        self.iterations
            .iter()
            .any(|i| i.solver_status != SolverStatus::Optimal)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iter,rbar,awsmse_obj,power,solver_status,solver_iters")?;
        for it in &self.iterations {
            writeln!(
                out,
                "{},{:?},{:?},{:?},{},{}",
                it.iter, it.rbar, it.awsmse_obj, it.power, it.solver_status, it.solver_iters
            )?;
        }
        Ok(())
    }
}

/// Runs the alternating optimisation from the initialisation in `params`.
///
/// In `BroadcastOnly` mode the common column is pinned at zero and the
/// initialisation uses the full budget for the private symbols.
pub fn run_ao(
    h_est: &ComplexMatrix,
    sample: &MonteCarloSample,
    cfg: &CsitConfig,
    params: &AoParams,
    mode: ObjectiveMode,
) -> Result<(PrecoderMatrix, AoTrace)> {
    let alpha = match mode {
        ObjectiveMode::Joint => cfg.alpha,
        ObjectiveMode::BroadcastOnly => 1.0,
    };
    let init = initialize(params.init, h_est, cfg.p_t, alpha)?;
    run_ao_from(init, sample, cfg, params, mode)
}

/// Runs the alternating optimisation from an explicit starting precoder.
pub fn run_ao_from(
    init: PrecoderMatrix,
    sample: &MonteCarloSample,
    cfg: &CsitConfig,
    params: &AoParams,
    mode: ObjectiveMode,
) -> Result<(PrecoderMatrix, AoTrace)> {
    params.validate()?;
    cfg.validate()?;
    if (init.n_t(), init.k()) != (sample.n_t(), sample.k()) {
        return Err(Error::Dimension(
            "initial precoder does not match the sample".into(),
        ));
    }
    let mut p = match mode {
        ObjectiveMode::Joint => init,
        ObjectiveMode::BroadcastOnly => init.with_common_zeroed(),
    };
    let mut iterations = Vec::new();
    let mut previous = 0.0;
    let mut stop_reason = StopReason::MaxIterations;
    for n in 1..=params.n_max {
        let gw = update_blocks(sample, &p, cfg.sigma_n2)?;
        let comps = accumulate_components(sample, &gw)?;
        let rbar = rate_estimate(&comps);
        let asr = average_rates(sample, &p, cfg.sigma_n2).asr;

        let q = QcqpProblem::build(&comps, cfg.sigma_n2, cfg.p_t, mode)?;
        let sol = qcqp::solve(&q, Some(&p), params.solver_tol, params.solver_max_iter)?;
        // Keep the incumbent unless the update improves on it.
        if sol.objective <= q.objective_at(&p) {
            p = sol.p_star.clone();
        }
        iterations.push(AoIteration {
            iter: n,
            rbar,
            asr,
            awsmse_obj: q.objective_at(&p) + q.omitted_constant(),
            power: p.power(),
            solver_status: sol.status,
            solver_iters: sol.iterations,
            kkt_residual: sol.kkt_residual,
        });
        if (rbar - previous).abs() < params.epsilon_r {
            stop_reason = StopReason::Converged;
            break;
        }
        previous = rbar;
    }
    let final_asr = average_rates(sample, &p, cfg.sigma_n2).asr;
    Ok((
        p,
        AoTrace {
            iterations,
            stop_reason,
            final_asr,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{draw_channel, draw_sample, stream_rng};
    use crate::linalg::{norm, C64};

    #[test]
    fn power_split_examples() {
        assert_eq!(dof_power_split(10.0, 1.0, 2).unwrap(), (0.0, 5.0));
        let (c, p) = dof_power_split(100.0, 0.6, 2).unwrap();
        assert!((c - 84.15).abs() < 0.05, "{c}");
        assert!((p - 7.92).abs() < 0.01, "{p}");
        for a in [0.0, 0.3, 1.0] {
            assert_eq!(dof_power_split(1.0, a, 3).unwrap().0, 0.0);
        }
        // Below unit power the private symbols never exceed the budget.
        let (c, p) = dof_power_split(0.1, 0.6, 2).unwrap();
        assert_eq!(c, 0.0);
        assert!((2.0 * p - 0.1).abs() < 1e-15);
        assert!(dof_power_split(-1.0, 0.5, 2).is_err());
        assert!(dof_power_split(1.0, 1.5, 2).is_err());
    }

    #[test]
    fn identity_channel_zf_e() {
        let p = initialize(InitScheme::ZfE, &ComplexMatrix::identity(2), 4.0, 0.5).unwrap();
        assert!((p.common()[0] - C64::new(2f64.sqrt(), 0.0)).norm() < 1e-15);
        assert!(p.common()[1].norm() < 1e-15);
        assert!((p.private(0)[0] - C64::new(1.0, 0.0)).norm() < 1e-15);
        assert!((p.private(1)[1] - C64::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn rank_one_mf_svd_common_direction() {
        let e2 = vec![C64::new(0.0, 0.0), C64::new(1.0, 0.0)];
        let h = ComplexMatrix::from_columns(&[e2.clone(), e2.clone()]).unwrap();
        let p = initialize(InitScheme::MfSvd, &h, 10.0, 0.5).unwrap();
        let dir: Vec<C64> = p.common().iter().map(|z| z / norm(p.common())).collect();
        assert!((dir[1].norm() - 1.0).abs() < 1e-10);
        assert!(matches!(
            initialize(InitScheme::ZfSvd, &h, 10.0, 0.5),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn initial_power_is_full_budget() {
        let mut rng = stream_rng(3, 0);
        for trial in 0..40 {
            let cfg = CsitConfig::from_snr_db(3, 2, 0.6, (trial % 5) as f64 * 10.0 - 10.0).unwrap();
            let h = draw_channel(&mut rng, &cfg);
            for s in InitScheme::ALL {
                let p = initialize(s, &h, cfg.p_t, cfg.alpha).unwrap();
                assert!(
                    (p.power() - cfg.p_t).abs() <= 1e-10 * cfg.p_t.max(1.0),
                    "{s} {}",
                    p.power()
                );
            }
        }
    }

    #[test]
    fn init_names_round_trip() {
        for s in InitScheme::ALL {
            assert_eq!(s.name().parse::<InitScheme>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(serde_json::from_str::<InitScheme>(&json).unwrap(), s);
        }
        assert!("bogus".parse::<InitScheme>().is_err());
    }

    fn setup(seed: u64, snr: f64, m: usize) -> (ComplexMatrix, MonteCarloSample, CsitConfig) {
        let cfg = CsitConfig::from_snr_db(2, 2, 0.6, snr).unwrap();
        let mut rng = stream_rng(seed, 0);
        let draw = crate::channel::make_draw(&mut rng, &cfg);
        let sample = draw_sample(&mut rng, &draw.h_est, cfg.sigma_e2(), m).unwrap();
        (draw.h_est, sample, cfg)
    }

    #[test]
    fn scalar_channel_reaches_capacity() {
        let cfg = CsitConfig::new(1, 1, 0.6, 10.0, 1.0).unwrap();
        let h = ComplexMatrix::new(1, 1, vec![C64::new(0.8, -0.6)]).unwrap();
        let sample = MonteCarloSample::new(std::slice::from_ref(&h)).unwrap();
        let (p, trace) = run_ao(
            &h,
            &sample,
            &cfg,
            &AoParams::default(),
            ObjectiveMode::Joint,
        )
        .unwrap();
        assert!((p.power() - 10.0).abs() < 1e-6);
        assert!(
            (trace.final_asr - 11f64.log2()).abs() < 1e-4,
            "{}",
            trace.final_asr
        );
    }

    #[test]
    fn huge_tolerance_runs_once() {
        let (h, sample, cfg) = setup(1, 20.0, 30);
        let params = AoParams {
            epsilon_r: 1e3,
            ..AoParams::default()
        };
        let (_, trace) = run_ao(&h, &sample, &cfg, &params, ObjectiveMode::Joint).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(trace.stop_reason, StopReason::Converged);
    }

    #[test]
    fn descent_identity_and_feasibility() {
        for (seed, snr) in [(2, 5.0), (3, 20.0), (4, 35.0)] {
            let (h, sample, cfg) = setup(seed, snr, 40);
            let (_, trace) = run_ao(
                &h,
                &sample,
                &cfg,
                &AoParams::default(),
                ObjectiveMode::Joint,
            )
            .unwrap();
            for w in trace.iterations.windows(2) {
                assert!(
                    w[1].awsmse_obj <= w[0].awsmse_obj + 1e-7,
                    "{} -> {}",
                    w[0].awsmse_obj,
                    w[1].awsmse_obj
                );
            }
            for it in &trace.iterations {
                assert!((it.rbar - it.asr).abs() < 1e-8);
                assert!(it.power <= cfg.p_t + crate::receivers::EPS_POW);
            }
        }
    }

    #[test]
    fn broadcast_mode_never_uses_common() {
        let (h, sample, cfg) = setup(5, 20.0, 30);
        let (p, trace) = run_ao(
            &h,
            &sample,
            &cfg,
            &AoParams::default(),
            ObjectiveMode::BroadcastOnly,
        )
        .unwrap();
        assert_eq!(p.common_power(), 0.0);
        for w in trace.iterations.windows(2) {
            assert!(w[1].awsmse_obj <= w[0].awsmse_obj + 1e-7);
        }
    }

    #[test]
    fn converged_point_is_stationary() {
        let (h, sample, cfg) = setup(6, 20.0, 30);
        let params = AoParams::default();
        let (p, trace) = run_ao(&h, &sample, &cfg, &params, ObjectiveMode::Joint).unwrap();
        let last = trace.iterations.last().unwrap().awsmse_obj;
        let one = AoParams { n_max: 1, ..params };
        let (_, extra) = run_ao_from(p, &sample, &cfg, &one, ObjectiveMode::Joint).unwrap();
        let delta = (extra.iterations[0].awsmse_obj - last).abs();
        assert!(
            delta <= params.epsilon_r.max(10.0 * params.solver_tol),
            "{delta}"
        );
    }

    #[test]
    fn trace_csv_has_fixed_columns() {
        let (h, sample, cfg) = setup(7, 10.0, 20);
        let params = AoParams {
            n_max: 3,
            ..AoParams::default()
        };
        let (_, trace) = run_ao(&h, &sample, &cfg, &params, ObjectiveMode::Joint).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,rbar,awsmse_obj,power,solver_status,solver_iters"
        );
        assert_eq!(lines.count(), trace.len());
        assert!(trace.len() <= 3);
    }
}
