//! Result files: `result.json`, the `result.csv` summary derived from it,
//! `config.json` and `manifest.json`.
//!
//! Floats are written in Rust's shortest round-trip form, so the summary
//! rebuilt from `result.json` is byte-identical to the one written at run
//! time.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use heatlab_core::feynman_kac::{CoupledReport, DiagonalScalingReport, MCEstimate};
use heatlab_core::geometry::Geodesic;
use heatlab_core::linalg::{self, CMat};
use heatlab_core::psi::PsiValue;
use heatlab_core::sdw::SdwTable;
use heatlab_core::synge::SyngeData;
use heatlab_core::verification::{CheckReport, Suite};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const RESULT_JSON: &str = "result.json";
pub const RESULT_CSV: &str = "result.csv";
pub const CONFIG_JSON: &str = "config.json";
pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Results {
    Geodesic { geodesic: Geodesic },
    Synge { synge: SyngeData },
    Sdw { table: SdwTable },
    Psi { values: Vec<PsiValue> },
    KernelMc { estimate: MCEstimate },
    Scaling { coupled: Vec<CoupledReport>, diagonal: Vec<DiagonalScalingReport> },
    Verify { suite: Suite, seed: u64, reports: Vec<CheckReport> },
}

fn matrix_rows(out: &mut String, prefix: &str, a: &CMat) {
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let v = a[(i, j)];
            let _ = writeln!(out, "{prefix},{i},{j},{},{}", v.re, v.im);
        }
    }
}

impl Results {
    /// CSV summary table; a pure function of the result.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        match self {
            Results::Geodesic { geodesic } => {
                let d = geodesic.start.len();
                let pos: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
                let vel: Vec<String> = (1..=d).map(|i| format!("v{i}")).collect();
                let _ = writeln!(out, "lambda,{},{}", pos.join(","), vel.join(","));
                for k in &geodesic.knots {
                    let cells: Vec<String> = k.position.iter().chain(&k.velocity).map(f64::to_string).collect();
                    let _ = writeln!(out, "{},{}", k.lambda, cells.join(","));
                }
            }
            Results::Synge { synge } => {
                let _ = writeln!(out, "quantity,value");
                let _ = writeln!(out, "sigma,{}", synge.sigma);
                if let Some(v) = synge.vanvleck {
                    let _ = writeln!(out, "vanvleck,{v}");
                }
                for (mu, v) in synge.sigma_upper.iter().enumerate() {
                    let _ = writeln!(out, "sigma_upper_{},{v}", mu + 1);
                }
                for (mu, v) in synge.sigma_lower.iter().enumerate() {
                    let _ = writeln!(out, "sigma_lower_{},{v}", mu + 1);
                }
            }
            Results::Sdw { table } => {
                let _ = writeln!(out, "k,i,j,re,im");
                for (k, a) in table.coeffs.iter().enumerate() {
                    matrix_rows(&mut out, &k.to_string(), a);
                }
            }
            Results::Psi { values } => {
                let _ = writeln!(out, "k,i,j,re,im");
                for v in values {
                    matrix_rows(&mut out, &v.k.to_string(), &v.value);
                }
            }
            Results::KernelMc { estimate } => {
                let _ = writeln!(out, "i,j,re,im,stderr");
                let m = estimate.mean.nrows();
                for i in 0..m {
                    for j in 0..m {
                        let v = estimate.mean[(i, j)];
                        let _ = writeln!(out, "{i},{j},{},{},{}", v.re, v.im, estimate.stderr[i][j]);
                    }
                }
            }
            Results::Scaling { coupled, diagonal } => {
                let _ = writeln!(out, "check,tau,lhs,rhs,difference,stderr,passed");
                for c in coupled {
                    let _ = writeln!(
                        out,
                        "coupled,{},{},{},{},{},{}",
                        c.lhs.tau,
                        c.lhs.mean[(0, 0)].re,
                        c.rhs.mean[(0, 0)].re,
                        linalg::frobenius(&c.diff_mean),
                        c.diff_stderr[0][0],
                        c.passed
                    );
                }
                for r in diagonal {
                    let _ = writeln!(out, "diagonal,{},,,{},,{}", r.tau, r.max_defect, r.passed);
                }
            }
            Results::Verify { reports, .. } => {
                let _ = writeln!(out, "check_id,passed,max_residual,tolerance");
                for r in reports {
                    let _ = writeln!(out, "{},{},{},{}", r.check_id, r.passed, r.max_residual, r.tolerance);
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("results serialize");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub core_version: String,
    pub command: String,
    /// SHA-256 of `config.json`.
    pub input_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub wall_time_ms: u64,
    pub files: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<FileDigest, CliError> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    Ok(FileDigest { name: name.into(), sha256: sha256_hex(contents.as_bytes()) })
}

/// Writes every artifact of one run into `dir`.
pub fn write_run(
    dir: &Path,
    config_json: &str,
    results: &Results,
    command: &str,
    seed: u64,
    wall_time_ms: u64,
) -> Result<Manifest, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let files = vec![
        write(dir, CONFIG_JSON, config_json)?,
        write(dir, RESULT_JSON, &results.to_json())?,
        write(dir, RESULT_CSV, &results.summary())?,
    ];
    let manifest = Manifest {
        tool: "heatlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        core_version: heatlab_core::VERSION.into(),
        command: command.into(),
        input_sha256: sha256_hex(config_json.as_bytes()),
        seed,
        threads: rayon::current_num_threads(),
        wall_time_ms,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write(dir, MANIFEST_JSON, &text)?;
    Ok(manifest)
}

/// `result.json` inside a run directory, or the file itself.
pub fn result_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(RESULT_JSON)
    } else {
        path.to_path_buf()
    }
}

pub fn read_results(path: &Path) -> Result<Results, CliError> {
    let path = result_path(path);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{} is not a result file: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn summary_survives_a_json_round_trip() {
        let table = SdwTable {
            x: vec![0.4],
            y: vec![0.1],
            order: 1,
            coeffs: vec![linalg::identity(1), linalg::scalar(1, num_complex::Complex64::new(0.1 + 0.2, -1e-300))],
            stencil_width: 0.03,
            transport_tol: 1e-10,
            evaluations: 0,
        };
        let r = Results::Sdw { table };
        let back: Results = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back.summary(), r.summary());
        let row = r.summary().lines().find(|l| l.starts_with("1,0,0,")).unwrap().to_string();
        let im: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(row.starts_with("1,0,0,0.30000000000000004,"));
        assert_eq!(im, -1e-300);
    }
}
