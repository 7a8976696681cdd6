//! Arithmetic quality of the torus frequency: the small-divisor lower bound,
//! the fitted effective exponent, and the decay rate of Birkhoff averages
//! along the rotation.

use anyhow::Result;
use serde::Serialize;

use qpns_core::forcing::{diophantine_check, fit_diophantine_exponent, TorusPoint};
use qpns_core::stats::birkhoff_rate;

use crate::config::RunConfig;
use crate::output::{fmt_f64, OutDir};

use super::Identity;

#[derive(Debug, Serialize)]
struct BoundBlock {
    k_check: f64,
    a_exponent: f64,
    kmax: u32,
    margin: f64,
    worst_k: Vec<i64>,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct FitBlock {
    a_fit: f64,
    k_fit: f64,
    residual: f64,
    records: usize,
}

#[derive(Debug, Serialize)]
struct BirkhoffBlock {
    slope: Option<f64>,
    slope_se: Option<f64>,
    r_squared: Option<f64>,
    slope_max: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct Summary {
    #[serde(flatten)]
    identity: Identity,
    frequency: Vec<f64>,
    bound: BoundBlock,
    fit: Option<FitBlock>,
    birkhoff: BirkhoffBlock,
    pass: bool,
}

pub fn run(cfg: &RunConfig, out: &mut OutDir) -> Result<bool> {
    let section = &cfg.diophantine;
    let alpha = cfg.frequency()?;
    let params = cfg.diophantine_params()?;

    let report = diophantine_check(&alpha, &params, section.kmax)?;
    let bound = BoundBlock {
        k_check: section.k_check,
        a_exponent: section.a_exponent,
        kmax: report.kmax,
        margin: report.margin,
        worst_k: report.worst_k.clone(),
        pass: report.pass,
    };

    let fit = if section.fit {
        let f = fit_diophantine_exponent(&alpha, section.kmax)?;
        Some(FitBlock {
            a_fit: f.a_fit,
            k_fit: f.k_fit,
            residual: f.residual,
            records: f.records,
        })
    } else {
        None
    };

    // Equidistribution probe: average the first angle's cosine along the
    // rotation orbit and fit the error decay against the length.
    let h0 = TorusPoint::origin(alpha.dim());
    let birkhoff_report = birkhoff_rate(
        |h| h.components()[0].cos(),
        0.0,
        &alpha,
        &h0,
        &section.birkhoff_lengths,
        section.birkhoff_floor,
    )?;
    let rows: Vec<Vec<String>> = birkhoff_report
        .lengths
        .iter()
        .zip(&birkhoff_report.errors)
        .map(|(&n, &e)| vec![n.to_string(), fmt_f64(e)])
        .collect();
    out.write_csv(
        "birkhoff.csv",
        &[("function", "cos of first angle".to_string())],
        &["length", "error"],
        &rows,
    )?;

    let birkhoff = match &birkhoff_report.fit {
        Some(f) => BirkhoffBlock {
            slope: Some(f.exponent),
            slope_se: Some(f.exponent_se),
            r_squared: Some(f.r_squared),
            slope_max: section.birkhoff_slope_max,
            pass: f.exponent <= section.birkhoff_slope_max,
        },
        None => BirkhoffBlock {
            slope: None,
            slope_se: None,
            r_squared: None,
            slope_max: section.birkhoff_slope_max,
            pass: false,
        },
    };

    let pass = bound.pass && birkhoff.pass;
    let summary = Summary {
        identity: Identity::new("diophantine", out, cfg),
        frequency: alpha.components().to_vec(),
        bound,
        fit,
        birkhoff,
        pass,
    };
    out.write_json("summary.json", &summary)?;
    Ok(pass)
}
