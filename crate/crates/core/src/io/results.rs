//! Result files and the percentage-error metric.
//!
//! `params.csv` and `gmm_params.csv` share one layout,
//! `component,parameter,estimate,error`, with rows `weight`, `mean.X`,
//! `sd.X`, `cov.X.Y` per component and a component-less `sigma` row. The
//! same layout doubles as the population truth file written by `simulate`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{fmt_f64, write_atomic, IoError};
use crate::driver::FitResult;
use crate::mixture::{align_components, CovarianceForm, MixtureParams, Partition};
use crate::model::ThetaVector;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRow {
    pub component: Option<usize>,
    pub parameter: String,
    pub estimate: f64,
    pub error: Option<f64>,
}

/// Rows for `params` in `flatten` order; `errors` must align with them.
pub fn param_rows(params: &MixtureParams, names: &[String], form: CovarianceForm, errors: Option<&[f64]>) -> Vec<ParamRow> {
    let flat = params.flatten(names, form);
    if let Some(e) = errors {
        assert_eq!(e.len(), flat.len(), "error bars do not line up with parameters");
    }
    flat.into_iter()
        .enumerate()
        .map(|(j, v)| ParamRow { component: v.component, parameter: v.name, estimate: v.value, error: errors.map(|e| e[j]) })
        .collect()
}

pub fn params_to_string(rows: &[ParamRow]) -> String {
    let mut s = String::from("component,parameter,estimate,error\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.component.map(|c| c.to_string()).unwrap_or_default(),
            r.parameter,
            fmt_f64(r.estimate),
            r.error.map(fmt_f64).unwrap_or_default()
        );
    }
    s
}

pub fn parse_params_str(text: &str) -> Result<Vec<ParamRow>, IoError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| IoError::Parse { line: 1, message: e.to_string() })?;
    if headers.iter().collect::<Vec<_>>() != ["component", "parameter", "estimate", "error"] {
        return Err(IoError::Parse { line: 1, message: "expected header component,parameter,estimate,error".into() });
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| IoError::Parse { line: e.position().map(|p| p.line()).unwrap_or(0), message: e.to_string() })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |m: String| IoError::Parse { line, message: m };
        let component = match &rec[0] {
            "" => None,
            c => Some(c.parse::<usize>().ok().filter(|c| *c >= 1).ok_or_else(|| bad(format!("bad component '{c}'")))?),
        };
        let estimate = rec[2].parse::<f64>().map_err(|_| bad(format!("bad estimate '{}'", &rec[2])))?;
        let error = match &rec[3] {
            "" => None,
            e => Some(e.parse::<f64>().map_err(|_| bad(format!("bad error '{e}'")))?),
        };
        rows.push(ParamRow { component, parameter: rec[1].to_string(), estimate, error });
    }
    Ok(rows)
}

pub fn parse_params(path: &Path) -> Result<Vec<ParamRow>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
    parse_params_str(&text).map_err(|e| e.in_file(path))
}

/// Rebuilds mixture parameters from rows. Parameter names come from the
/// `mean.*` rows of component 1, in file order.
pub fn params_from_rows(rows: &[ParamRow]) -> Result<(MixtureParams, Vec<String>), IoError> {
    let bad = |m: String| IoError::Format(m);
    let k = rows.iter().filter_map(|r| r.component).max().ok_or_else(|| bad("no component rows".into()))?;
    let names: Vec<String> = rows
        .iter()
        .filter(|r| r.component == Some(1))
        .filter_map(|r| r.parameter.strip_prefix("mean.").map(|s| s.to_string()))
        .collect();
    let p = names.len();
    if p == 0 {
        return Err(bad("no mean.* rows".into()));
    }
    let idx = |n: &str| names.iter().position(|x| x == n).ok_or_else(|| bad(format!("unknown parameter '{n}'")));
    let mut weights = vec![f64::NAN; k];
    let mut means = vec![DVector::from_element(p, f64::NAN); k];
    let mut covs = vec![DMatrix::zeros(p, p); k];
    let mut sds_seen = vec![vec![false; p]; k];
    let mut sigma = None;
    for r in rows {
        let Some(c) = r.component else {
            if r.parameter == "sigma" {
                sigma = Some(r.estimate);
                continue;
            }
            return Err(bad(format!("row '{}' has no component", r.parameter)));
        };
        let c = c - 1;
        let parts: Vec<&str> = r.parameter.split('.').collect();
        match parts.as_slice() {
            ["weight"] => weights[c] = r.estimate,
            ["mean", n] => means[c][idx(n)?] = r.estimate,
            ["sd", n] => {
                let j = idx(n)?;
                covs[c][(j, j)] = r.estimate * r.estimate;
                sds_seen[c][j] = true;
            }
            ["cov", a, b] => {
                let (a, b) = (idx(a)?, idx(b)?);
                covs[c][(a, b)] = r.estimate;
                covs[c][(b, a)] = r.estimate;
            }
            _ => return Err(bad(format!("unknown parameter row '{}'", r.parameter))),
        }
    }
    if weights.iter().any(|w| w.is_nan()) || means.iter().any(|m| m.iter().any(|v| v.is_nan())) || sds_seen.iter().flatten().any(|s| !s) {
        return Err(bad("incomplete parameter table (each component needs weight, mean.* and sd.* rows)".into()));
    }
    // weights are printed at full precision but may not sum to 1 bit-exactly
    let total: f64 = weights.iter().sum();
    let weights = weights.iter().map(|w| w / total).collect();
    let params = MixtureParams::new(weights, means, covs, sigma, Partition::all_mixed()).map_err(|e| bad(e.to_string()))?;
    Ok((params, names))
}

/// Mean absolute percentage error of the means and of the standard
/// deviations, after matching components.
#[derive(Debug, Clone, PartialEq)]
pub struct PercentageError {
    pub mean_pct: f64,
    pub sd_pct: f64,
    /// `(component, parameter, estimate, truth, percent)` for every
    /// compared row, components in truth order.
    pub rows: Vec<(Option<usize>, String, f64, f64, f64)>,
}

pub fn percentage_error(estimate: &MixtureParams, truth: &MixtureParams, names: &[String]) -> PercentageError {
    let perm = align_components(truth, estimate);
    let est = estimate.permuted(&perm);
    let e = est.flatten(names, CovarianceForm::Diagonal);
    let t = truth.flatten(names, CovarianceForm::Diagonal);
    let mut rows = Vec::new();
    let (mut m, mut s) = (Vec::new(), Vec::new());
    for (a, b) in e.iter().zip(&t) {
        debug_assert_eq!(a.name, b.name);
        let pct = if b.value != 0.0 { (a.value - b.value).abs() / b.value.abs() * 100.0 } else { f64::NAN };
        if pct.is_finite() {
            if a.name.starts_with("mean.") {
                m.push(pct);
            } else if a.name.starts_with("sd.") {
                s.push(pct);
            }
        }
        rows.push((b.component, b.name.clone(), a.value, b.value, pct));
    }
    let avg = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    PercentageError { mean_pct: avg(&m), sd_pct: avg(&s), rows }
}

pub fn percentage_table(pe: &PercentageError) -> String {
    let mut s = String::from("component\tparameter\testimate\ttruth\tpercent_error\n");
    for (c, n, e, t, p) in &pe.rows {
        let _ = writeln!(s, "{}\t{n}\t{}\t{}\t{:.3}", c.map(|c| c.to_string()).unwrap_or_default(), fmt_f64(*e), fmt_f64(*t), p);
    }
    let _ = writeln!(s, "mean percentage error (means)\t{:.3}", pe.mean_pct);
    let _ = writeln!(s, "mean percentage error (sds)\t{:.3}", pe.sd_pct);
    s
}

/// Per-subject parameter vectors, `ID,component,<names...>`.
pub fn thetas_to_string(ids: &[String], components: &[usize], thetas: &[ThetaVector], names: &[String]) -> String {
    let mut s = format!("ID,component,{}\n", names.join(","));
    for ((id, k), t) in ids.iter().zip(components).zip(thetas) {
        let vals: Vec<String> = t.iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(s, "{id},{},{}", k + 1, vals.join(","));
    }
    s
}

pub fn trace_to_string(result: &FitResult) -> String {
    let mut s = String::from("iteration,loglik,acceptance_rate\n");
    for (j, (ll, a)) in result.trace.iter().zip(&result.acceptance).enumerate() {
        let _ = writeln!(s, "{},{},{}", j + 1, fmt_f64(*ll), fmt_f64(*a));
    }
    s
}

pub fn samples_to_string(result: &FitResult) -> String {
    let mut s = format!("ID,component,{}\n", result.parameter_names.join(","));
    let smp = &result.samples;
    for j in 0..smp.len() {
        let vals: Vec<String> = smp.theta(j).iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(s, "{},{},{}", result.subject_ids[smp.subject(j)], smp.component(j) + 1, vals.join(","));
    }
    s
}

pub fn summary_text(result: &FitResult, truth: Option<&MixtureParams>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "converged\t{}", result.converged);
    let _ = writeln!(s, "iterations\t{}", result.iterations);
    let _ = writeln!(s, "final_loglik\t{}", result.trace.last().map(|v| fmt_f64(*v)).unwrap_or_default());
    let tail = result.acceptance.len().saturating_sub(result.failure_rates.len());
    let acc = &result.acceptance[tail..];
    let _ = writeln!(s, "mean_acceptance_rate\t{}", fmt_f64(acc.iter().sum::<f64>() / acc.len().max(1) as f64));
    let _ = writeln!(s, "stabilized_samples\t{}", result.samples.len());
    let (lo, hi) = result
        .subject_shares
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let _ = writeln!(s, "subject_share_min\t{}", fmt_f64(lo));
    let _ = writeln!(s, "subject_share_max\t{}", fmt_f64(hi));
    let fr = result.failure_rates.iter().copied().fold(0.0, f64::max);
    let _ = writeln!(s, "max_model_failure_rate\t{}", fmt_f64(fr));
    s.push_str("\nRPEM estimates\n");
    s.push_str(&params_to_string(&param_rows(&result.params, &result.parameter_names, result.covariance, Some(&result.errors))));
    if let Some(g) = &result.gmm {
        s.push_str("\nRPEM-GMM estimates\n");
        s.push_str(&params_to_string(&param_rows(g, &result.parameter_names, CovarianceForm::Full, None)));
    }
    if let Some(t) = truth {
        s.push_str("\nPercentage error against truth (RPEM)\n");
        s.push_str(&percentage_table(&percentage_error(&result.params, t, &result.parameter_names)));
        if let Some(g) = &result.gmm {
            s.push_str("\nPercentage error against truth (RPEM-GMM)\n");
            s.push_str(&percentage_table(&percentage_error(g, t, &result.parameter_names)));
        }
    }
    s
}

/// Writes `params.csv`, `trace.csv`, `samples.csv`, `gmm_params.csv` (when
/// present) and `summary.txt` into `dir`, each atomically.
pub fn write_result(result: &FitResult, dir: &Path, truth: Option<&MixtureParams>) -> Result<(), IoError> {
    std::fs::create_dir_all(dir).map_err(|source| IoError::Io { path: dir.to_path_buf(), source })?;
    let rows = param_rows(&result.params, &result.parameter_names, result.covariance, Some(&result.errors));
    write_atomic(&dir.join("params.csv"), params_to_string(&rows).as_bytes())?;
    write_atomic(&dir.join("trace.csv"), trace_to_string(result).as_bytes())?;
    write_atomic(&dir.join("samples.csv"), samples_to_string(result).as_bytes())?;
    if let Some(g) = &result.gmm {
        let rows = param_rows(g, &result.parameter_names, CovarianceForm::Full, None);
        write_atomic(&dir.join("gmm_params.csv"), params_to_string(&rows).as_bytes())?;
    }
    write_atomic(&dir.join("summary.txt"), summary_text(result, truth).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_parameter_table() {
        let p = MixtureParams::from_sds(vec![1.0], vec![vec![2.0]], vec![vec![0.5]], None, Partition::all_mixed()).unwrap();
        let rows = param_rows(&p, &names(&["x"]), CovarianceForm::Full, Some(&[0.0, 0.1, 0.05]));
        let text = params_to_string(&rows);
        assert_eq!(text, "component,parameter,estimate,error\n1,weight,1,0\n1,mean.x,2,0.1\n1,sd.x,0.5,0.05\n");
        assert_eq!(text.lines().filter(|l| l.contains("mean.")).count(), 1);
        assert_eq!(parse_params_str(&text).unwrap(), rows);
    }

    #[test]
    fn round_trip_with_covariances_and_sigma() {
        let p = MixtureParams::new(
            vec![0.3, 0.7],
            vec![DVector::from_vec(vec![0.1, 20.0]), DVector::from_vec(vec![0.7, 21.0])],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.01, 0.02, 0.02, 4.0]),
                DMatrix::from_row_slice(2, 2, &[0.04, -0.1, -0.1, 9.0]),
            ],
            Some(0.1),
            Partition::all_mixed(),
        )
        .unwrap();
        let n = names(&["k", "V"]);
        let rows = param_rows(&p, &n, CovarianceForm::Full, None);
        let parsed = parse_params_str(&params_to_string(&rows)).unwrap();
        assert_eq!(parsed, rows);
        let (back, back_names) = params_from_rows(&parsed).unwrap();
        assert_eq!(back_names, n);
        assert_eq!(back.weights(), p.weights());
        assert_eq!(back.mean(1), p.mean(1));
        assert_eq!(back.sigma(), Some(0.1));
        for k in 0..2 {
            assert!((back.cov(k) - p.cov(k)).abs().max() < 1e-15);
        }
    }

    #[test]
    fn percentage_error_definition() {
        let n = names(&["x"]);
        let t = MixtureParams::from_sds(vec![1.0], vec![vec![2.0]], vec![vec![1.0]], None, Partition::all_mixed()).unwrap();
        let e = MixtureParams::from_sds(vec![1.0], vec![vec![3.0]], vec![vec![1.0]], None, Partition::all_mixed()).unwrap();
        let pe = percentage_error(&e, &t, &n);
        assert!((pe.mean_pct - 50.0).abs() < 1e-12);
        assert_eq!(pe.sd_pct, 0.0);
        let same = percentage_error(&t, &t, &n);
        assert_eq!((same.mean_pct, same.sd_pct), (0.0, 0.0));
    }

    #[test]
    fn percentage_error_matches_components() {
        let n = names(&["x"]);
        let t = MixtureParams::from_sds(vec![0.5, 0.5], vec![vec![1.0], vec![10.0]], vec![vec![1.0]; 2], None, Partition::all_mixed()).unwrap();
        let e = t.permuted(&[1, 0]);
        assert_eq!(percentage_error(&e, &t, &n).mean_pct, 0.0);
    }
}
