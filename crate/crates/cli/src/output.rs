use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use uqboltz_core::experiment::{Check, ConvergenceReport, DecaySuiteReport, GapSuiteReport};
use uqboltz_core::{Error, Result};

/// Output directory that remembers every file written to it.
pub struct OutDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn csv<R: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = R>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row).map_err(|e| Error::Parse(format!("{name}: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(format!("{name}: {e}")))?;
        self.write(name, &bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub config: String,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    pub files: Vec<FileEntry>,
    pub checks: Vec<Check>,
    pub passed: bool,
}

pub fn file_entries(out: &OutDir) -> Result<Vec<FileEntry>> {
    out.files()
        .iter()
        .map(|name| {
            let path = out.path(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok(FileEntry {
                path: name.clone(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct EigenRow {
    modes: usize,
    index: usize,
    eigenvalue: f64,
}

pub fn write_gap(out: &mut OutDir, r: &GapSuiteReport) -> Result<()> {
    out.json("gap.json", r)?;
    out.csv(
        "eigenvalues.csv",
        r.entries.iter().flat_map(|e| {
            e.gap.eigenvalues.iter().enumerate().map(move |(index, &eigenvalue)| EigenRow {
                modes: e.modes,
                index,
                eigenvalue,
            })
        }),
    )
}

#[derive(Serialize)]
struct DecayRow<'a> {
    epsilon: f64,
    alpha: u8,
    t_final: f64,
    steps: usize,
    rate: f64,
    tau: f64,
    prefactor: f64,
    residual: f64,
    status: &'a str,
}

#[derive(Serialize)]
struct EnergyRow {
    t: f64,
    energy: f64,
}

fn energy_file(alpha: u8, eps: f64) -> String {
    format!("energy-a{alpha}-eps{eps}.csv")
}

pub fn write_decay(out: &mut OutDir, r: &DecaySuiteReport) -> Result<()> {
    out.json("decay.json", r)?;
    out.csv(
        "decay.csv",
        r.runs.iter().map(|x| DecayRow {
            epsilon: x.epsilon,
            alpha: x.alpha,
            t_final: x.t_final,
            steps: x.steps,
            rate: x.rate,
            tau: x.tau,
            prefactor: x.prefactor,
            residual: x.residual,
            status: &x.status,
        }),
    )?;
    let mut curves = Vec::new();
    for x in r.runs.iter().filter(|x| x.ok()) {
        let name = energy_file(x.alpha, x.epsilon);
        out.csv(
            &name,
            x.times.iter().zip(&x.energy).map(|(&t, &energy)| EnergyRow { t, energy }),
        )?;
        curves.push(format!(
            "'{name}' using 1:2 with lines title 'alpha={} eps={}'",
            x.alpha, x.epsilon
        ));
    }
    let script = format!(
        "set datafile separator ','\nset key autotitle columnhead\nset logscale y\n\
         set xlabel 't'\nset ylabel 'weighted energy'\nset terminal pngcairo size 900,600\n\
         set output 'decay.png'\nplot {}\n",
        if curves.is_empty() { "NaN notitle".to_string() } else { curves.join(", \\\n     ") }
    );
    out.write("decay.gp", script.as_bytes())
}

pub fn write_convergence(out: &mut OutDir, r: &ConvergenceReport) -> Result<()> {
    out.json("convergence.json", r)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["modes".to_string()];
    header.extend(r.snapshot_times.iter().map(|t| format!("error_t{t}")));
    header.extend(r.snapshot_times.iter().map(|t| format!("relative_t{t}")));
    let fail = |e: csv::Error| Error::Parse(format!("error.csv: {e}"));
    w.write_record(&header).map_err(fail)?;
    for (i, k) in r.k_sweep.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(r.errors[i].iter().map(|x| x.to_string()));
        row.extend(r.relative[i].iter().map(|x| x.to_string()));
        w.write_record(&row).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(format!("error.csv: {e}")))?;
    out.write("error.csv", &bytes)?;
    let s = r.snapshot_times.len();
    let script = format!(
        "set datafile separator ','\nset key autotitle columnhead\nset logscale y\n\
         set xlabel 'K'\nset ylabel 'relative error'\nset terminal pngcairo size 900,600\n\
         set output 'convergence.png'\nplot for [c={}:{}] 'error.csv' using 1:c with linespoints\n",
        s + 2,
        2 * s + 1
    );
    out.write("convergence.gp", script.as_bytes())
}
