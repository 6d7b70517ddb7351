//! CSV export of per-round errors and run summaries.

use std::io::{self, Write};

use super::runner::RunResult;

pub const RUN_HEADER: &str = "round,t,sat,mode,err_att_rad,err_pos_m,err_angvel,err_linvel";

const QUANTITIES: [&str; 4] = ["att", "pos", "angvel", "linvel"];

fn num(x: f64) -> String {
    format!("{x:.8e}")
}

/// One row per mode, round and satellite.
pub fn write_run_csv<W: Write>(out: &mut W, run: &RunResult) -> io::Result<()> {
    writeln!(out, "{RUN_HEADER}")?;
    let dt = run.config.dt();
    for m in &run.modes {
        for k in 0..m.rounds() {
            let round = k + 1;
            for (i, sat) in m.samples.iter().enumerate() {
                let e = sat[k];
                writeln!(
                    out,
                    "{round},{},{},{},{},{},{},{}",
                    num(round as f64 * dt),
                    i + 1,
                    m.label,
                    num(e.attitude),
                    num(e.position),
                    num(e.angular_velocity),
                    num(e.linear_velocity)
                )?;
            }
        }
    }
    Ok(())
}

pub fn summary_header() -> String {
    let mut h = String::from("run,scenario,seed,snr,leader_fraction,mode,status,window,rounds");
    for q in QUANTITIES {
        for stat in ["rms", "q1", "median", "q3"] {
            h.push_str(&format!(",{q}_{stat}"));
        }
    }
    h
}

/// One row per run, mode and metric window with the fleet RMS and the
/// quartiles of the per-satellite RMS.
pub fn write_summary_csv<W: Write>(out: &mut W, runs: &[RunResult]) -> io::Result<()> {
    writeln!(out, "{}", summary_header())?;
    for run in runs {
        let snr = run.config.noise.snr().map(num).unwrap_or_default();
        for m in &run.modes {
            let status = if m.diverged.is_some() { "diverged" } else { "ok" };
            for w in run.config.windows() {
                let rounds = w.slice(&vec![(); m.rounds()]).len();
                let total = m.fleet_rms(w);
                let s = m.summary(w);
                let quarts = [s.attitude, s.position, s.angular_velocity, s.linear_velocity];
                write!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    run.label,
                    run.config.kind,
                    run.seed,
                    snr,
                    num(run.config.leader_fraction),
                    m.label,
                    status,
                    w.name(),
                    rounds
                )?;
                for (r, q) in total.values().iter().zip(quarts) {
                    write!(out, ",{},{},{},{}", num(*r), num(q.q1), num(q.median), num(q.q3))?;
                }
                writeln!(out)?;
            }
        }
    }
    Ok(())
}
