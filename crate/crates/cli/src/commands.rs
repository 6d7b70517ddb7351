//! Run a resolved experiment and write its outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dqfleet::sim::output::{write_run_csv, write_summary_csv};
use dqfleet::sim::{run_experiment, RunResult};
use thiserror::Error;

use crate::config::{manifest_text, ConfigError, RunConfig};

pub const THREADS_ENV: &str = "DQFLEET_THREADS";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const MANIFEST_FILE: &str = "manifest.conf";
pub const GRAPH_FILE: &str = "graph.edges";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Sim(#[from] dqfleet::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{THREADS_ENV} must be a positive integer, got `{0}`")]
    Threads(String),
}

/// Worker cap from the environment; unset or empty means no cap.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) if v.trim().is_empty() => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Threads(v)),
        },
        Err(_) => Ok(None),
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let io_err = |source| CliError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err)
}

/// What an experiment produced.
pub struct Outcome {
    pub runs: Vec<RunResult>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    pub fn mode_runs(&self) -> usize {
        self.runs.iter().map(|r| r.modes.len()).sum()
    }

    pub fn diverged(&self) -> usize {
        self.runs.iter().map(RunResult::diverged).sum()
    }

    /// More than half of all mode runs diverged.
    pub fn failed(&self) -> bool {
        2 * self.diverged() > self.mode_runs()
    }
}

/// Run every job and write `run_<label>.csv` per job, the summary and a
/// manifest that reproduces the outputs.
pub fn execute(run: &RunConfig, out: &Path, threads: Option<usize>) -> Result<Outcome, CliError> {
    fs::create_dir_all(out).map_err(|source| CliError::Io { path: out.to_path_buf(), source })?;
    let runs = run_experiment(&run.experiment, threads)?;
    let mut files = Vec::new();
    for r in &runs {
        let path = out.join(format!("run_{}.csv", r.label));
        write_file(&path, |w| write_run_csv(w, r))?;
        files.push(path);
    }
    let summary = out.join(SUMMARY_FILE);
    write_file(&summary, |w| write_summary_csv(w, &runs))?;
    files.push(summary);

    let graph_file = match &run.experiment.base.graph {
        Some(g) => {
            let path = out.join(GRAPH_FILE);
            write_file(&path, |w| w.write_all(g.to_edge_list().as_bytes()))?;
            files.push(path);
            Some(GRAPH_FILE)
        }
        None => None,
    };
    let manifest = out.join(MANIFEST_FILE);
    let text = manifest_text(run, out, graph_file);
    write_file(&manifest, |w| w.write_all(text.as_bytes()))?;
    files.push(manifest);
    Ok(Outcome { runs, files })
}

/// One line per run, mode and metric window with the fleet medians.
pub fn report<W: Write>(w: &mut W, outcome: &Outcome) -> std::io::Result<()> {
    for r in &outcome.runs {
        for m in &r.modes {
            let status = match &m.diverged {
                Some(why) => format!("diverged ({why})"),
                None => "ok".to_string(),
            };
            for win in r.config.windows() {
                let s = m.summary(win);
                writeln!(
                    w,
                    "{} {} {} [{}]: att {:.3e} rad, pos {:.3e} m, angvel {:.3e} rad/s, linvel {:.3e} m/s",
                    r.label,
                    m.label,
                    status,
                    win.name(),
                    s.attitude.median,
                    s.position.median,
                    s.angular_velocity.median,
                    s.linear_velocity.median
                )?;
            }
        }
    }
    Ok(())
}
