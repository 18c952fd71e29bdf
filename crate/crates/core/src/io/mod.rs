//! Config documents, artifact formats and experiment orchestration.

mod run;

pub use run::{replay, run, Flag, Report, RunManifest, RunOptions, RunOutcome, ValidationCheck};

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::experiments::{CellResult, ExperimentConfig, ExperimentKind, SlopeFit};

/// Exact CSV header of every cell table.
pub const CSV_HEADER: &str = "N,M,d_z,p,error,stderr,ess_mean,slope,slope_halfwidth,seed";

/// Exact header of the plot-data files.
pub const PLOT_HEADER: &str = "x,y,y_err";

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Parses a TOML config document without experiment-specific checks.
pub fn parse_config_unchecked(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| {
        let msg = e.message().trim().to_string();
        match e.span() {
            Some(span) => Error::Parse(format!("line {}: {msg}", line_of(text, span.start))),
            None => Error::Parse(msg),
        }
    })
}

/// Parses and validates a config document. The document's `experiment`
/// key selects the rules; without one the config is checked as for
/// `bounds`, which needs no rate fit.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg = parse_config_unchecked(text)?;
    cfg.validate(cfg.experiment.unwrap_or(ExperimentKind::Bounds))?;
    Ok(cfg)
}

/// Parses a document and validates it for `kind`.
pub fn parse_config_for(text: &str, kind: ExperimentKind) -> Result<ExperimentConfig> {
    let cfg = parse_config_unchecked(text)?;
    cfg.validate(kind)?;
    Ok(cfg)
}

pub fn serialize_config(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Parse(format!("cannot serialise config: {e}")))
}

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_float(v: f64) -> String {
    format!("{v}")
}

fn opt_float(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// The cell table; `fit` is repeated on every row (empty when absent).
pub fn cells_csv(cells: &[CellResult], fit: Option<&SlopeFit>) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    let slope = opt_float(fit.map(|f| f.slope));
    let half = opt_float(fit.map(|f| f.halfwidth));
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            c.n,
            c.m,
            c.d_z,
            c.p,
            fmt_float(c.error),
            fmt_float(c.stderr),
            fmt_float(c.ess_mean),
            slope,
            half,
            c.seed
        );
    }
    s
}

pub fn plot_csv(points: &[(f64, f64, f64)]) -> String {
    let mut s = String::from(PLOT_HEADER);
    s.push('\n');
    for &(x, y, e) in points {
        let _ = writeln!(s, "{},{},{}", fmt_float(x), fmt_float(y), fmt_float(e));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::YMode;

    #[test]
    fn minimal_document_gets_defaults() {
        let cfg = parse_config("schema_version = 1\nfamily = \"s1\"\nexperiment = \"sweep-n\"\n").unwrap();
        assert_eq!(cfg.p, 2);
        assert_eq!(cfg.replications, 200);
        assert_eq!(cfg.m_list, vec![16]);
        assert_eq!(cfg.y_mode, YMode::Fixed(vec![1.0]));
    }

    #[test]
    fn small_k_rejected_for_rate_sweeps() {
        let e = parse_config("schema_version = 1\nexperiment = \"sweep-n\"\nK = 10\n").unwrap_err();
        assert!(matches!(e, Error::Validation(_)), "{e}");
    }

    #[test]
    fn unknown_keys_report_their_line() {
        let e = parse_config("schema_version = 1\n\nsamples = 3\n").unwrap_err();
        match e {
            Error::Parse(m) => assert!(m.starts_with("line 3"), "{m}"),
            other => panic!("{other}"),
        }
        assert!(matches!(parse_config("schema_version = 1\n[family_params]\nbogus = 1\n"), Err(Error::Parse(_))));
    }

    #[test]
    fn unbounded_test_function_rejected() {
        let e = parse_config("schema_version = 1\ntest_function = \"identity\"\n").unwrap_err();
        assert!(matches!(e, Error::Validation(_)));
    }

    #[test]
    fn schema_version_checked() {
        assert!(matches!(parse_config("schema_version = 2\n"), Err(Error::Validation(_))));
        assert!(matches!(parse_config("family = \"s1\"\n"), Err(Error::Parse(_))));
    }

    #[test]
    fn round_trip() {
        let text = r#"
schema_version = 1
experiment = "random-obs"
family = "growing-spectra"
observation = "bounded"
bound = 1.5
N = [32, 64, 128, 256]
M = [8]
d_z = [3]
K = 40
p = 1
test_function = "cos"
direction = [1.0, 2.0]
seed = 77
r = 0.5
y_mode = "random-from-model"

[family_params]
d_x = 2
q = 0.25
convention = "density"
"#;
        let cfg = parse_config(text).unwrap();
        let again = parse_config(&serialize_config(&cfg).unwrap()).unwrap();
        assert_eq!(cfg, again);
        let fixed = ExperimentConfig { y_mode: YMode::Fixed(vec![0.25]), ..ExperimentConfig::default() };
        assert_eq!(parse_config(&serialize_config(&fixed).unwrap()).unwrap(), fixed);
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, 1e-300, 6.02e23, -2.5, 0.0] {
            assert_eq!(fmt_float(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(fmt_float(0.1), "0.1");
        assert_eq!(fmt_float(2.0), "2");
    }

    #[test]
    fn csv_layout() {
        let c = CellResult {
            n: 32,
            m: 8,
            d_z: 1,
            p: 2,
            error: 0.125,
            stderr: 0.01,
            ess_mean: 20.5,
            replications: 40,
            seed: 42,
        };
        let fit = SlopeFit { slope: -0.5, intercept: 0.0, halfwidth: 0.05 };
        assert_eq!(
            cells_csv(&[c.clone()], Some(&fit)),
            "N,M,d_z,p,error,stderr,ess_mean,slope,slope_halfwidth,seed\n32,8,1,2,0.125,0.01,20.5,-0.5,0.05,42\n"
        );
        assert!(cells_csv(&[c], None).ends_with("20.5,,,42\n"));
    }
}
