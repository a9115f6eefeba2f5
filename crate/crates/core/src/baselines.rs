//! Reference schemes: zero-forcing with water-filling on the estimate, and
//! the fixed-structure JMB scheme (ZF private part, SVD common direction).

use crate::ao::dof_power_split;
use crate::error::{Error, Result};
use crate::linalg::{dominant_left_singular_vector, dot, scale, zf_directions, ComplexMatrix, C64};
use crate::receivers::PrecoderMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct WaterfillResult {
    pub powers: Vec<f64>,
    pub water_level: f64,
}

/// Maximises `sum log2(1 + g_k q_k)` subject to `sum q_k <= budget`.
///
/// Users are sorted by gain and the weakest active user is dropped until the
/// common level clears its inverse gain.
pub fn water_fill(gains: &[f64], budget: f64) -> Result<WaterfillResult> {
    if gains.is_empty() {
        return Err(Error::InvalidInput(
            "water-filling needs at least one gain".into(),
        ));
    }
    if gains.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
        return Err(Error::InvalidInput(
            "water-filling gains must be positive and finite".into(),
        ));
    }
    if !(budget >= 0.0) || !budget.is_finite() {
        return Err(Error::InvalidInput(
            "water-filling budget must be nonnegative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..gains.len()).collect();
    order.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]));
    let inv: Vec<f64> = order.iter().map(|&i| 1.0 / gains[i]).collect();

    let mut level = inv[0];
    for n in (1..=inv.len()).rev() {
        let candidate = (budget + inv[..n].iter().sum::<f64>()) / n as f64;
        if candidate > inv[n - 1] || n == 1 {
            level = candidate;
            break;
        }
    }
    let powers = gains.iter().map(|g| (level - 1.0 / g).max(0.0)).collect();
    Ok(WaterfillResult {
        powers,
        water_level: level,
    })
}

fn zf_with_budget(h_est: &ComplexMatrix, budget: f64, sigma_n2: f64) -> Result<Vec<Vec<C64>>> {
    let dirs = zf_directions(h_est)?;
    let gains: Vec<f64> = dirs
        .iter()
        .enumerate()
        .map(|(k, d)| dot(&h_est.column(k), d).norm_sqr() / sigma_n2)
        .collect();
    let wf = water_fill(&gains, budget)?;
    Ok(dirs
        .iter()
        .zip(&wf.powers)
        .map(|(d, q)| scale(d, q.sqrt()))
        .collect())
}

/// ZF directions on the estimate with water-filled powers; no common symbol.
pub fn zf_wf(h_est: &ComplexMatrix, p_t: f64, sigma_n2: f64) -> Result<PrecoderMatrix> {
    if !(sigma_n2 > 0.0) {
        return Err(Error::InvalidInput(
            "noise variance must be positive".into(),
        ));
    }
    let private = zf_with_budget(h_est, p_t, sigma_n2)?;
    PrecoderMatrix::from_parts(vec![C64::new(0.0, 0.0); h_est.rows()], private)
}

/// DoF power split, water-filling over the private budget and the dominant
/// left singular vector of the estimate as common direction.
pub fn jmb_zf_svd_wf(
    h_est: &ComplexMatrix,
    p_t: f64,
    alpha: f64,
    sigma_n2: f64,
) -> Result<PrecoderMatrix> {
    if !(sigma_n2 > 0.0) {
        return Err(Error::InvalidInput(
            "noise variance must be positive".into(),
        ));
    }
    let (common, per_private) = dof_power_split(p_t, alpha, h_est.cols())?;
    let private = zf_with_budget(h_est, per_private * h_est.cols() as f64, sigma_n2)?;
    let common_col = if common > 0.0 {
        scale(
            &dominant_left_singular_vector(h_est, 1e-13, 100_000)?,
            common.sqrt(),
        )
    } else {
        vec![C64::new(0.0, 0.0); h_est.rows()]
    };
    PrecoderMatrix::from_parts(common_col, private)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{draw_channel, stream_rng, CsitConfig};
    use crate::receivers::{sum_rate, user_rates};
    use proptest::prelude::*;

    fn bisection_oracle(gains: &[f64], budget: f64) -> Vec<f64> {
        let used = |l: f64| gains.iter().map(|g| (l - 1.0 / g).max(0.0)).sum::<f64>();
        let (mut lo, mut hi) = (
            0.0,
            budget + gains.iter().map(|g| 1.0 / g).fold(0.0, f64::max),
        );
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if used(mid) > budget {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        gains
            .iter()
            .map(|g| (0.5 * (lo + hi) - 1.0 / g).max(0.0))
            .collect()
    }

    #[test]
    fn equal_gains_split_evenly() {
        let wf = water_fill(&[2.0, 2.0, 2.0], 3.0).unwrap();
        for p in wf.powers {
            assert!((p - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn low_budget_goes_to_strongest() {
        let wf = water_fill(&[1.0, 100.0], 0.01).unwrap();
        assert_eq!(wf.powers[0], 0.0);
        assert!((wf.powers[1] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn matches_bisection() {
        let wf = water_fill(&[1.0, 4.0], 2.0).unwrap();
        let oracle = bisection_oracle(&[1.0, 4.0], 2.0);
        for (a, b) in wf.powers.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(water_fill(&[1.0, 0.0], 1.0).is_err());
        assert!(water_fill(&[1.0], -1.0).is_err());
        assert!(water_fill(&[], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn water_fill_kkt(gains in prop::collection::vec(1e-3f64..1e3, 1..8), budget in 0.0f64..100.0) {
            let wf = water_fill(&gains, budget).unwrap();
            let total: f64 = wf.powers.iter().sum();
            prop_assert!((total - budget).abs() <= 1e-10 * budget.max(1.0));
            for (p, g) in wf.powers.iter().zip(&gains) {
                prop_assert!(*p >= 0.0);
                if *p > 0.0 {
                    prop_assert!((1.0 / g + p - wf.water_level).abs() <= 1e-10 * wf.water_level.max(1.0));
                } else {
                    prop_assert!(1.0 / g >= wf.water_level - 1e-10 * wf.water_level.max(1.0));
                }
            }
        }
    }

    #[test]
    fn identity_channel_splits_evenly() {
        let h = ComplexMatrix::identity(2);
        let p = zf_wf(&h, 4.0, 1.0).unwrap();
        assert_eq!(p.common_power(), 0.0);
        assert!((p.private(0)[0].re - 2f64.sqrt()).abs() < 1e-15);
        assert!(p.private(0)[1].norm() < 1e-15);
        assert!((p.private(1)[1].re - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_user_is_matched() {
        let h = ComplexMatrix::new(
            3,
            1,
            vec![C64::new(1.0, 1.0), C64::new(0.0, -2.0), C64::new(0.5, 0.0)],
        )
        .unwrap();
        let p = zf_wf(&h, 5.0, 1.0).unwrap();
        assert!((p.power() - 5.0).abs() < 1e-12);
        // |h^H p|^2 = P ||h||^2 for a matched direction.
        let gain = dot(&h.column(0), p.private(0)).norm_sqr();
        assert!((gain - 5.0 * crate::linalg::norm_sqr(&h.column(0))).abs() < 1e-10);
    }

    #[test]
    fn nominal_rate_on_estimate() {
        let cfg = CsitConfig::from_snr_db(3, 3, 0.6, 20.0).unwrap();
        let mut rng = stream_rng(5, 0);
        for _ in 0..20 {
            let h = draw_channel(&mut rng, &cfg);
            let p = zf_wf(&h, cfg.p_t, cfg.sigma_n2).unwrap();
            let dirs = zf_directions(&h).unwrap();
            let gains: Vec<f64> = (0..3)
                .map(|k| dot(&h.column(k), &dirs[k]).norm_sqr() / cfg.sigma_n2)
                .collect();
            let wf = water_fill(&gains, cfg.p_t).unwrap();
            let nominal: f64 = gains
                .iter()
                .zip(&wf.powers)
                .map(|(g, q)| (g * q).ln_1p() / std::f64::consts::LN_2)
                .sum();
            assert!((sum_rate(&h, &p, cfg.sigma_n2) - nominal).abs() < 1e-10);
        }
    }

    #[test]
    fn estimation_error_leaves_interference() {
        let cfg = CsitConfig::from_snr_db(2, 2, 0.6, 20.0).unwrap();
        let mut rng = stream_rng(6, 0);
        let draw = crate::channel::make_draw(&mut rng, &cfg);
        let p = zf_wf(&draw.h_est, cfg.p_t, cfg.sigma_n2).unwrap();
        for k in 0..2 {
            let other = dot(&draw.h_true.column(k), p.private(1 - k)).norm_sqr();
            assert!(other > 0.0);
        }
        let _ = user_rates(&draw.h_true, &p, cfg.sigma_n2);
    }

    #[test]
    fn jmb_baseline_power_accounting() {
        let mut rng = stream_rng(7, 0);
        for snr in [0.0, 10.0, 30.0] {
            let cfg = CsitConfig::from_snr_db(3, 2, 0.6, snr).unwrap();
            let h = draw_channel(&mut rng, &cfg);
            let p = jmb_zf_svd_wf(&h, cfg.p_t, 0.6, cfg.sigma_n2).unwrap();
            assert!((p.power() - cfg.p_t).abs() <= 1e-10 * cfg.p_t.max(1.0));
        }
        let cfg = CsitConfig::from_snr_db(3, 2, 1.0, 20.0).unwrap();
        let h = draw_channel(&mut rng, &cfg);
        assert_eq!(
            jmb_zf_svd_wf(&h, cfg.p_t, 1.0, 1.0).unwrap(),
            zf_wf(&h, cfg.p_t, 1.0).unwrap()
        );
        let p = jmb_zf_svd_wf(&h, cfg.p_t, 0.0, 1.0).unwrap();
        assert!((p.power() - p.common_power() - 1.0).abs() < 1e-12);
    }
}
