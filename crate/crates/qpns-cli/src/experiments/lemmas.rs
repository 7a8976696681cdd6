//! Exact-identity checks: the multinomial rearrangement over random draws
//! and the exponent-interpolation inequality, including its closed-form
//! equality case.

use anyhow::Result;
use rand::Rng;
use serde::Serialize;

use qpns_core::rng::{self, stream_rng};
use qpns_core::stats::{holder_exponent_bound, multinomial_identity};

use crate::config::RunConfig;
use crate::output::{fmt_f64, OutDir};

use super::Identity;

#[derive(Debug, Serialize)]
struct MultinomialSummary {
    draws: u32,
    p_max: u32,
    m_max: u32,
    tolerance: f64,
    max_residual: f64,
    violations: u32,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct ExponentBoundSummary {
    draws: u32,
    violations: u32,
    worst_margin: f64,
    analytic_gap: f64,
    analytic_tolerance: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct Summary {
    #[serde(flatten)]
    identity: Identity,
    multinomial: MultinomialSummary,
    exponent_bound: ExponentBoundSummary,
    pass: bool,
}

/// Worst cases kept for the CSV table.
const WORST_KEPT: usize = 32;

pub fn run(cfg: &RunConfig, out: &mut OutDir) -> Result<bool> {
    let section = &cfg.lemmas;
    let mut rng = stream_rng(cfg.master_seed, rng::tags::MEASUREMENT, 0, 0);

    let p_max = section.p_max.clamp(1, 6);
    let m_max = section.m_max.clamp(1, 64) as usize;

    let mut worst: Vec<(f64, String, String)> = Vec::new();
    let mut max_residual = 0.0f64;
    let mut multinomial_violations = 0u32;
    for draw in 0..section.draws {
        let p = rng.gen_range(1..=p_max);
        let m = rng.gen_range(1..=m_max);
        let xs: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let check = multinomial_identity(&xs, p)?;
        max_residual = max_residual.max(check.residual);
        if check.residual > section.multinomial_tolerance {
            multinomial_violations += 1;
        }
        push_worst(
            &mut worst,
            check.residual,
            "multinomial".to_string(),
            format!("draw {draw} p {p} m {m}"),
        );
    }
    let multinomial = MultinomialSummary {
        draws: section.draws,
        p_max,
        m_max: m_max as u32,
        tolerance: section.multinomial_tolerance,
        max_residual,
        violations: multinomial_violations,
        pass: multinomial_violations == 0,
    };

    let mut bound_violations = 0u32;
    let mut worst_margin = f64::INFINITY;
    for draw in 0..section.draws {
        let d_cap = 1.0 + 9.0 * rng.gen::<f64>();
        let lambda1 = 2.0 * rng.gen::<f64>() + 1e-3;
        let lambda2 = 2.0 * rng.gen::<f64>() + 1e-3;
        let gamma = rng.gen::<f64>().max(1e-3);
        let delta = (rng.gen::<f64>() * d_cap).max(1e-9);
        let check = holder_exponent_bound(d_cap, lambda1, lambda2, gamma, delta)?;
        let margin = check.rhs - check.lhs;
        worst_margin = worst_margin.min(margin);
        if !check.pass {
            bound_violations += 1;
        }
        push_worst(
            &mut worst,
            -margin,
            "exponent-bound".to_string(),
            format!("draw {draw} cap {d_cap:.3} delta {delta:.3e} gamma {gamma:.3}"),
        );
    }

    // Closed-form equality: cap one, unit rates, full exponent, offset
    // e^{-2}. The balancing time is one and both sides reduce to 2/e.
    let delta_star = (-2.0f64).exp();
    let analytic = holder_exponent_bound(1.0, 1.0, 1.0, 1.0, delta_star)?;
    let analytic_gap = (analytic.lhs - analytic.rhs).abs() / analytic.rhs;
    let exponent_bound = ExponentBoundSummary {
        draws: section.draws,
        violations: bound_violations,
        worst_margin,
        analytic_gap,
        analytic_tolerance: section.analytic_tolerance,
        pass: bound_violations == 0 && analytic_gap <= section.analytic_tolerance,
    };

    let pass = multinomial.pass && exponent_bound.pass;

    let rows: Vec<Vec<String>> = worst
        .iter()
        .map(|(score, kind, label)| vec![kind.clone(), label.clone(), fmt_f64(*score)])
        .collect();
    out.write_csv(
        "worst_cases.csv",
        &[("ordering", "descending score".to_string())],
        &["kind", "case", "score"],
        &rows,
    )?;

    let summary = Summary {
        identity: Identity::new("lemmas", out, cfg),
        multinomial,
        exponent_bound,
        pass,
    };
    out.write_json("summary.json", &summary)?;
    Ok(pass)
}

/// Keep the highest-scoring cases, largest first.
fn push_worst(worst: &mut Vec<(f64, String, String)>, score: f64, kind: String, label: String) {
    worst.push((score, kind, label));
    worst.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    worst.truncate(WORST_KEPT);
}
