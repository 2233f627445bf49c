//! CSV tables and whitespace-separated plot data for a finished run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::experiment::{ReportRow, RowResult, RunReport};
use crate::error::{Error, Result};
use crate::upper::{sigma_band, w_band};

const NA: &str = "NA";

fn num(x: f64) -> String {
    format!("{x:.6e}")
}

fn ok_rows(report: &RunReport) -> impl Iterator<Item = (usize, &ReportRow, &RowResult)> {
    report
        .rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.result.as_ref().ok().map(|res| (i, r, res)))
}

/// Binary counts per sweep value, with the swept component first.
pub fn table_csv(report: &RunReport) -> String {
    let param = report.config.sweep_parameter.as_str();
    let sigma_first = param == "beta_sigma";
    let mut out = if sigma_first {
        String::from("beta_sigma,zeros_sigma,ones_sigma,zeros_w,ones_w\n")
    } else {
        String::from("beta_w,zeros_w,ones_w,zeros_sigma,ones_sigma\n")
    };
    for row in &report.rows {
        let v = row.sweep_value(param);
        match &row.result {
            Ok(r) if sigma_first => {
                let _ = writeln!(
                    out,
                    "{v},{},{},{},{}",
                    r.zeros_sigma, r.ones_sigma, r.zeros_w, r.ones_w
                );
            }
            Ok(r) => {
                let _ = writeln!(
                    out,
                    "{v},{},{},{},{}",
                    r.zeros_w, r.ones_w, r.zeros_sigma, r.ones_sigma
                );
            }
            Err(_) => {
                let _ = writeln!(out, "{v},{NA},{NA},{NA},{NA}");
            }
        }
    }
    out
}

/// Reconstruction errors per penalty weight and noise level.
pub fn errors_csv(report: &RunReport) -> String {
    let mut out = String::from("beta_w,beta_sigma,noise_sd,error_abs,error_rel\n");
    for row in &report.rows {
        let (a, r) = match &row.result {
            Ok(r) => (num(r.error_abs), num(r.error_rel)),
            Err(_) => (NA.into(), NA.into()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{a},{r}",
            row.beta_w, row.beta_sigma, row.noise_sd
        );
    }
    out
}

/// Every recorded quantity of every row.
pub fn summary_csv(report: &RunReport) -> String {
    let mut out = String::from(
        "beta_w,beta_sigma,noise_sd,status,w_zero,w_low,w_middle,w_high,w_one,\
         sigma_low,sigma_middle,sigma_high,zeros_w,ones_w,zeros_sigma,ones_sigma,\
         w_l1,sigma_l1,j0,j_end,iter,iter_da,pde_solves,elliptic_solves,\
         error_abs,error_rel,complementarity,ambiguous,thresholded,converged1,converged2,message\n",
    );
    for row in &report.rows {
        let _ = write!(out, "{},{},{},", row.beta_w, row.beta_sigma, row.noise_sd);
        match &row.result {
            Ok(r) => {
                let (w, s) = (&r.w_bands, &r.sigma_bands);
                let _ = writeln!(
                    out,
                    "ok,{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.2},{},{},{},{},{},{},{},{},{},",
                    w.zero,
                    w.low,
                    w.middle,
                    w.high,
                    w.one,
                    s.low,
                    s.middle,
                    s.high,
                    r.zeros_w,
                    r.ones_w,
                    r.zeros_sigma,
                    r.ones_sigma,
                    num(r.w_l1),
                    num(r.sigma_l1),
                    num(r.j0),
                    num(r.j_end),
                    r.iter,
                    r.iter_da,
                    r.pde_solves,
                    r.elliptic_solves,
                    num(r.error_abs),
                    num(r.error_rel),
                    num(r.complementarity),
                    r.ambiguous,
                    r.thresholded,
                    r.converged[0],
                    r.converged[1],
                );
            }
            Err(msg) => {
                let fields = vec![NA; 27].join(",");
                let _ = writeln!(out, "failed,{fields},\"{}\"", msg.replace('"', "'"));
            }
        }
    }
    out
}

/// `x y label` per candidate: band labels of the continuous weights.
pub fn placement_dat(report: &RunReport, r: &RowResult) -> String {
    let mut out = String::from("x y label\n");
    for (xy, &w) in report.candidate_coords.iter().zip(&r.placement.w) {
        let _ = writeln!(out, "{} {} {}", xy[0], xy[1], w_band(w).label());
    }
    out
}

/// `t_start t_end sigma label binary` per window.
pub fn sigma_dat(report: &RunReport, r: &RowResult) -> String {
    let mut out = String::from("t_start t_end sigma label binary\n");
    for (i, &(a, b)) in report.windows.iter().enumerate() {
        let s = r.placement.sigma[i];
        let _ = writeln!(
            out,
            "{a} {b} {} {} {}",
            num(s),
            sigma_band(s).label(),
            r.binary.sigma[i]
        );
    }
    out
}

fn put(dir: &Path, name: String, text: &str, written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    written.push(path);
    Ok(())
}

/// Writes tables, summary and plot data into `dir`, returning the paths written.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let id = &report.config.experiment;
    let mut written = Vec::new();
    put(
        dir,
        format!("exp{id}_table.csv"),
        &table_csv(report),
        &mut written,
    )?;
    put(
        dir,
        format!("exp{id}_errors.csv"),
        &errors_csv(report),
        &mut written,
    )?;
    put(
        dir,
        format!("exp{id}_summary.csv"),
        &summary_csv(report),
        &mut written,
    )?;
    put(
        dir,
        format!("exp{id}_config.toml"),
        &report.config.to_toml_string(),
        &mut written,
    )?;
    for (i, _, r) in ok_rows(report) {
        put(
            dir,
            format!("exp{id}_w_{i:02}.dat"),
            &placement_dat(report, r),
            &mut written,
        )?;
        put(
            dir,
            format!("exp{id}_sigma_{i:02}.dat"),
            &sigma_dat(report, r),
            &mut written,
        )?;
    }
    Ok(written)
}
