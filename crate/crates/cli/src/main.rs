//! Batch driver: builds the filter for a scenario and writes fields, zones,
//! trajectories or sweep tables, plus a manifest, into an output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use riskaware::safety::activation_zone;
use riskaware::scenario::{
    build_filter, oracle_error, simulate, simulate_double, simulate_dynamic, sweep, BuiltFilter,
    Manifest, Scenario,
};
use riskaware::sim::Trajectory;

#[derive(Parser)]
#[command(name = "riskaware", version, about = "Risk-aware safety filter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for h and v and write the build report.
    Solve(Common),
    /// Activation sign grid and zero contours for the scenario's controller.
    Zones(Common),
    /// Closed-loop run on the static map.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Double integrator with the backstepping filter.
        #[arg(long)]
        double: bool,
    },
    /// Run with the fields rebuilt at every frame.
    Dynamic(Common),
    /// Flux scale by gamma table from the scenario's sweep section.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write h, v and (for dynamic runs) per-frame fields.
    #[arg(long)]
    dump_fields: bool,
    /// Horizon in frame periods for dynamic runs.
    #[arg(long)]
    frames: Option<usize>,
    /// Recorded in the manifest.
    #[arg(long)]
    seed: Option<u64>,
}

/// Files are written into a staging directory and moved into place only
/// once the whole command succeeds.
struct Output {
    dir: PathBuf,
    staging: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: &Path, command: &str) -> Result<Self> {
        let staging = dir.join(format!(".partial-{command}"));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(Self { dir: dir.to_owned(), staging, files: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.staging.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(name.to_owned());
        Ok(())
    }

    fn json(&mut self, name: &str, value: &impl serde::Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    fn commit(self) -> Result<()> {
        for name in &self.files {
            let target = self.dir.join(name);
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::rename(self.staging.join(name), &target)?;
        }
        fs::remove_dir_all(&self.staging)?;
        Ok(())
    }

    fn discard(self) {
        let _ = fs::remove_dir_all(&self.staging);
    }
}

fn dump_fields(out: &mut Output, built: &BuiltFilter, prefix: &str) -> Result<()> {
    out.write(&format!("{prefix}h.csv"), built.sf.h().to_csv())?;
    out.write(&format!("{prefix}vx.csv"), built.gf.v().x.to_csv())?;
    out.write(&format!("{prefix}vy.csv"), built.gf.v().y.to_csv())
}

fn audit(tr: &Trajectory) -> serde_json::Value {
    json!({
        "samples": tr.samples.len(),
        "dt": tr.dt,
        "termination": tr.termination.as_str(),
        "min_h": tr.min_h(),
        "min_h_b": tr.min_h_b(),
        "min_margin": tr.min_margin(),
        "path_length": tr.path_length(),
        "filter_ever_active": tr.filter_ever_active(),
        "final_position": [tr.final_position().x, tr.final_position().y],
    })
}

fn run(command: &Command, name: &str, c: &Common, out: &mut Output) -> Result<()> {
    let sc = Scenario::load(&c.scenario)
        .with_context(|| format!("loading {}", c.scenario.display()))?;
    out.json("manifest.json", &Manifest::new(&sc, name, c.seed))?;
    match command {
        Command::Solve(_) => {
            let built = build_filter(&sc)?;
            dump_fields(out, &built, "")?;
            let mut report = serde_json::to_value(&built.report)?;
            report["oracle_max_error"] = json!(oracle_error(&sc, &built));
            report["trace_error"] = json!(built.gf.trace_error());
            out.json("build_report.json", &report)?;
        }
        Command::Zones(_) => {
            let built = build_filter(&sc)?;
            let nominal = sc.nominal();
            let zone = activation_zone(
                &built.grid,
                |y| nominal.eval(y, &built.sf),
                &built.sf,
                &built.gf,
                &built.cfg,
                None,
            )?;
            out.write("zones_sign.csv", zone.sign_csv())?;
            out.write("zones_contours.csv", zone.contours_csv())?;
            out.write("activation.csv", zone.a().to_csv())?;
            out.json(
                "zones.json",
                &json!({
                    "active_cells": zone.active_count(),
                    "restricted_cells": zone.restricted_count(),
                    "contours": zone.contours().len(),
                }),
            )?;
            if c.dump_fields {
                dump_fields(out, &built, "")?;
            }
        }
        Command::Simulate { double, .. } => {
            let built = build_filter(&sc)?;
            let nominal = sc.nominal();
            let tr = if *double {
                simulate_double(&sc, &built, &nominal)?
            } else {
                simulate(&sc, &built, &nominal)?
            };
            out.write("trajectory.csv", tr.to_csv())?;
            out.json("audit.json", &audit(&tr))?;
            if c.dump_fields {
                dump_fields(out, &built, "")?;
            }
        }
        Command::Dynamic(_) => {
            let run = simulate_dynamic(&sc, c.frames)?;
            out.write("trajectory.csv", run.trajectory.to_csv())?;
            out.json("audit.json", &audit(&run.trajectory))?;
            let mut table = String::from("frame,t,free_cells,boundary_nodes,max_dh_dt,jump\n");
            for (n, f) in run.frames.iter().enumerate() {
                let rate = run.dh_dt[n]
                    .values()
                    .iter()
                    .filter(|v| v.is_finite())
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                let jump = run.frame_jumps.get(n).copied().unwrap_or(0.0);
                table.push_str(&format!(
                    "{n},{:?},{},{},{rate:?},{jump:?}\n",
                    f.t,
                    f.grid.free_count(),
                    f.gf.boundary().len()
                ));
                if c.dump_fields {
                    out.write(&format!("frames/{n:04}_h.csv"), f.sf.h().to_csv())?;
                    out.write(&format!("frames/{n:04}_dh_dt.csv"), run.dh_dt[n].to_csv())?;
                    out.write(&format!("frames/{n:04}_vx.csv"), f.gf.v().x.to_csv())?;
                    out.write(&format!("frames/{n:04}_vy.csv"), f.gf.v().y.to_csv())?;
                }
            }
            out.write("frames.csv", table)?;
        }
        Command::Sweep(_) => {
            let rows = sweep(&sc)?;
            let mut table = String::from(
                "flux_scale,gamma,zone_cells,restricted_cells,min_h,min_clearance,path_length,termination\n",
            );
            for r in &rows {
                table.push_str(&format!(
                    "{:?},{:?},{},{},{:?},{:?},{:?},{}\n",
                    r.flux_scale,
                    r.gamma,
                    r.zone_cells,
                    r.restricted_cells,
                    r.min_h,
                    r.min_clearance,
                    r.path_length,
                    r.termination
                ));
            }
            out.write("sweep.csv", table)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Solve(c) => ("solve", c),
        Command::Zones(c) => ("zones", c),
        Command::Simulate { common, .. } => ("simulate", common),
        Command::Dynamic(c) => ("dynamic", c),
        Command::Sweep(c) => ("sweep", c),
    };
    let result = Output::new(&common.out, name).and_then(|mut out| {
        match run(&cli.command, name, common, &mut out) {
            Ok(()) => out.commit(),
            Err(e) => {
                out.discard();
                Err(e)
            }
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
