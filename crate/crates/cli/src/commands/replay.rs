//! `mrbd report` — inspect a run report or replay it. A report embeds the
//! full config, command arguments, and input hashes, so `replay` can re-run
//! the command into a fresh directory and verify that every artifact comes
//! back byte-identical (the determinism contract, checked end to end).

use std::path::Path;
use std::str::FromStr;

use super::{ablate, evaluate, prepare, sweep, train, CliError, CmdResult};
use crate::config::RunConfig;
use crate::report::RunReport;

pub fn show(path: &Path) -> CmdResult<()> {
    RunReport::load(path)?; // validate before echoing
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::from(mrbd_core::Error::io(path.display().to_string(), e)))?;
    print!("{text}");
    Ok(())
}

pub fn replay(path: &Path, out_dir: &Path) -> CmdResult<()> {
    let original = RunReport::load(path)?;

    // The replay only means something if the inputs are still the ones the
    // report was built from.
    for (input, want) in &original.inputs {
        let p = Path::new(input);
        if !p.is_file() {
            return Err(CliError::usage(format!("replay input missing: {input}")));
        }
        let got = crate::report::sha256_file(p)?;
        if got != *want {
            return Err(CliError::usage(format!("input changed since the original run: {input}")));
        }
    }

    let arg = |k: &str| {
        original
            .args
            .get(k)
            .ok_or_else(|| CliError::usage(format!("report is missing the {k:?} argument")))
    };
    let fresh = match original.command.as_str() {
        "prepare" => prepare::execute(&prepare::params_from_args(&original.args, out_dir)?)?,
        "train" => train::execute(&RunConfig::from_snapshot(&original.config)?, out_dir)?,
        "evaluate" => evaluate::execute(&RunConfig::from_snapshot(&original.config)?, out_dir)?,
        "ablate" => {
            let axis = ablate::Axis::from_str(arg("axis")?)?;
            let values = arg("values")?.clone();
            ablate::execute(&RunConfig::from_snapshot(&original.config)?, out_dir, axis, Some(&values))?
        }
        "sweep" => {
            let mode = sweep::Mode::from_str(arg("mode")?)?;
            sweep::execute(&RunConfig::from_snapshot(&original.config)?, out_dir, mode)?
        }
        other => {
            return Err(CliError::usage(format!("report names an unknown command {other:?}")));
        }
    };

    let mut mismatches = Vec::new();
    let originals: std::collections::BTreeMap<&str, &str> = original
        .artifacts
        .iter()
        .map(|a| (a.path.as_str(), a.sha256.as_str()))
        .collect();
    for a in &fresh.artifacts {
        match originals.get(a.path.as_str()) {
            Some(want) if *want == a.sha256 => {}
            Some(_) => mismatches.push(format!("{} differs from the original", a.path)),
            None => mismatches.push(format!("{} was not in the original report", a.path)),
        }
    }
    for a in &original.artifacts {
        if !fresh.artifacts.iter().any(|f| f.path == a.path) {
            mismatches.push(format!("{} was not reproduced", a.path));
        }
    }

    if mismatches.is_empty() {
        println!(
            "replay verified: {} artifact(s) byte-identical at {}",
            fresh.artifacts.len(),
            out_dir.display()
        );
        Ok(())
    } else {
        Err(CliError::runtime(format!("replay diverged: {}", mismatches.join("; "))))
    }
}
