use std::path::Path;

use crate::CliError;

pub const RESULTS_HEADER: &str = "method,setup,model,alpha,profile,seed,metric,value,wall_s";

/// One (configuration, seed, metric) measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsRow {
    pub method: String,
    /// `-` when the method has no time-aware setup.
    pub setup: String,
    pub model: String,
    pub alpha: f64,
    pub profile: String,
    pub seed: u64,
    pub metric: String,
    /// NaN marks a run that failed numerically.
    pub value: f64,
    pub wall_s: f64,
}

pub fn format_results(rows: &[ResultsRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{},{},{},{:.6},{:.6}\n",
            r.method, r.setup, r.model, r.alpha, r.profile, r.seed, r.metric, r.value, r.wall_s
        ));
    }
    out
}

pub fn write_results(rows: &[ResultsRow], path: &Path) -> Result<(), CliError> {
    std::fs::write(path, format_results(rows)).map_err(|e| CliError::io(path, e))
}

pub fn parse_results(text: &str) -> Result<Vec<ResultsRow>, CliError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(RESULTS_HEADER) => {}
        other => {
            return Err(CliError::Core(lmt_core::Error::Format(format!(
                "unexpected results header {other:?}"
            ))))
        }
    }
    let bad = |n: usize, what: &str| CliError::Core(lmt_core::Error::Format(format!("results line {}: {what}", n + 2)));
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(n, "expected 9 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n, "invalid number"));
            Ok(ResultsRow {
                method: f[0].to_string(),
                setup: f[1].to_string(),
                model: f[2].to_string(),
                alpha: num(f[3])?,
                profile: f[4].to_string(),
                seed: f[5].parse().map_err(|_| bad(n, "invalid seed"))?,
                metric: f[6].to_string(),
                value: num(f[7])?,
                wall_s: num(f[8])?,
            })
        })
        .collect()
}

pub fn read_results(path: &Path) -> Result<Vec<ResultsRow>, CliError> {
    parse_results(&std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: f64) -> ResultsRow {
        ResultsRow {
            method: "lmm".into(),
            setup: "-".into(),
            model: "-".into(),
            alpha: 1.0,
            profile: "linear".into(),
            seed: 3,
            metric: "kappa".into(),
            value,
            wall_s: 0.0,
        }
    }

    #[test]
    fn one_row_is_two_lines() {
        let s = format_results(&[row(0.7511)]);
        assert_eq!(s, format!("{RESULTS_HEADER}\nlmm,-,-,1.000000,linear,3,kappa,0.751100,0.000000\n"));
    }

    #[test]
    fn round_trip() {
        let rows = vec![row(0.7511), row(-0.25), row(0.0)];
        assert_eq!(parse_results(&format_results(&rows)).unwrap(), rows);
        assert_eq!(parse_results(&format_results(&[])).unwrap(), vec![]);
        let nan = parse_results(&format_results(&[row(f64::NAN)])).unwrap();
        assert!(nan[0].value.is_nan());
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(parse_results("a,b\n").is_err());
        assert!(parse_results(&format!("{RESULTS_HEADER}\n1,2\n")).is_err());
    }
}
