//! CSV writers for run artifacts: trace sets, per-step safety decisions,
//! repair iteration records, metric tables, iterate logs and centerlines.
//!
//! All values are plain numerics or bare words, so no quoting is needed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;

use crate::analysis::MetricSet;
use crate::mpsc::OverheadReport;
use crate::repair::{IterationRecord, RepairReport};
use crate::trajopt::IterateRecord;
use crate::types::{
    CoreError, DecisionKind, SafetyDecision, TraceSet, TracedRun, Trajectory,
};

fn fmt(v: f64) -> String {
    // Round-trippable float formatting.
    format!("{v:?}")
}

/// Columns: `run_id,t,x_0..x_{n-1},u_0..u_{m-1},intervened,sub_u_0..`.
/// Substitute columns are empty on non-intervened steps.
pub fn write_trace_set(path: &Path, traces: &TraceSet) -> Result<(), CoreError> {
    let (sdim, cdim) = match traces.runs.first().and_then(|r| r.trajectory.steps.first()) {
        Some((x, u)) => (x.len(), u.len()),
        None => return Err(CoreError::EmptyInput("trace set has no steps".into())),
    };
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = vec!["run_id".to_string(), "t".to_string()];
    header.extend((0..sdim).map(|i| format!("x_{i}")));
    header.extend((0..cdim).map(|i| format!("u_{i}")));
    header.push("intervened".to_string());
    header.extend((0..cdim).map(|i| format!("sub_u_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (run_id, run) in traces.runs.iter().enumerate() {
        for (t, (x, u)) in run.trajectory.steps.iter().enumerate() {
            let mut row = vec![run_id.to_string(), t.to_string()];
            row.extend(x.iter().map(|v| fmt(*v)));
            row.extend(u.iter().map(|v| fmt(*v)));
            row.push(if run.flags[t] { "1".into() } else { "0".into() });
            match &run.substitutes[t] {
                Some(s) => row.extend(s.iter().map(|v| fmt(*v))),
                None => row.extend(std::iter::repeat(String::new()).take(cdim)),
            }
            writeln!(w, "{}", row.join(","))?;
        }
    }
    Ok(())
}

/// Inverse of [`write_trace_set`].
pub fn read_trace_set(path: &Path) -> Result<TraceSet, CoreError> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::EmptyInput("trace CSV is empty".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    let sdim = cols.iter().filter(|c| c.starts_with("x_")).count();
    let cdim = cols.iter().filter(|c| c.starts_with("u_") && !c.starts_with("u_s")).count();
    let bad = |m: &str| CoreError::EmptyInput(format!("malformed trace CSV: {m}"));
    let mut traces = TraceSet::default();
    let mut cur_id: Option<usize> = None;
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 + sdim + 2 * cdim {
            return Err(bad("wrong column count"));
        }
        let run_id: usize = f[0].parse().map_err(|_| bad("run_id"))?;
        let parse = |s: &str| s.parse::<f64>().map_err(|_| bad("float"));
        let x = DVector::from_iterator(
            sdim,
            f[2..2 + sdim].iter().map(|s| parse(s)).collect::<Result<Vec<_>, _>>()?,
        );
        let u = DVector::from_iterator(
            cdim,
            f[2 + sdim..2 + sdim + cdim]
                .iter()
                .map(|s| parse(s))
                .collect::<Result<Vec<_>, _>>()?,
        );
        let intervened = f[2 + sdim + cdim] == "1";
        let sub = if intervened {
            Some(DVector::from_iterator(
                cdim,
                f[3 + sdim + cdim..]
                    .iter()
                    .map(|s| parse(s))
                    .collect::<Result<Vec<_>, _>>()?,
            ))
        } else {
            None
        };
        if cur_id != Some(run_id) {
            traces.runs.push(TracedRun {
                trajectory: Trajectory { steps: Vec::new() },
                flags: Vec::new(),
                substitutes: Vec::new(),
            });
            cur_id = Some(run_id);
        }
        let run = traces.runs.last_mut().unwrap();
        run.trajectory.steps.push((x, u));
        run.flags.push(intervened);
        run.substitutes.push(sub);
    }
    Ok(traces)
}

fn kind_name(k: DecisionKind) -> &'static str {
    match k {
        DecisionKind::PassThrough => "pass_through",
        DecisionKind::Override => "override",
        DecisionKind::Inevitable => "inevitable",
    }
}

/// Columns: `step,kind,max_phi,t_LC,t_SC1,t_SC2`.
pub fn write_decision_trace(path: &Path, decisions: &[SafetyDecision]) -> Result<(), CoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,kind,max_phi,t_LC,t_SC1,t_SC2")?;
    for (step, d) in decisions.iter().enumerate() {
        writeln!(
            w,
            "{step},{},{},{},{},{}",
            kind_name(d.kind),
            fmt(d.plan_max_phi),
            fmt(d.t_lc),
            fmt(d.t_sc1),
            fmt(d.t_sc2)
        )?;
    }
    Ok(())
}

/// Columns: `iteration,J,interventions,status`.
pub fn write_repair_records(path: &Path, records: &[IterationRecord]) -> Result<(), CoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iteration,J,interventions,status")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.iteration, fmt(r.j), r.interventions, r.status)?;
    }
    Ok(())
}

pub fn write_repair_summary(path: &Path, report: &RepairReport) -> Result<(), CoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "termination: {:?}", report.termination)?;
    writeln!(w, "iterations: {}", report.records.len())?;
    writeln!(w, "synthesis fallbacks: {}", report.synthesis_fallbacks)?;
    if let Some(last) = report.records.last() {
        writeln!(w, "final deviation loss: {}", fmt(last.j))?;
        writeln!(w, "final interventions: {}", last.interventions)?;
    }
    Ok(())
}

const METRIC_NAMES: [&str; 8] = [
    "Avg. Speed",
    "Lowest Speed",
    "Avg. Distance",
    "Tot. Steps",
    "Var. Speed",
    "Std. Speed Change",
    "Var. Distance",
    "Std. Distance Change",
];

/// One labelled row per metric set, metrics as columns under their table
/// names.
pub fn write_metrics(path: &Path, rows: &[(String, MetricSet)]) -> Result<(), CoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "label,{}", METRIC_NAMES.join(","))?;
    for (label, m) in rows {
        let vals = [
            m.avg_speed,
            m.lowest_speed,
            m.avg_distance,
            m.total_steps,
            m.var_speed,
            m.std_speed_change,
            m.var_distance,
            m.std_distance_change,
        ];
        writeln!(
            w,
            "{label},{}",
            vals.iter().map(|v| fmt(*v)).collect::<Vec<_>>().join(",")
        )?;
    }
    Ok(())
}

/// Columns: `round,iterate,merit,max_phi,step_norm`.
pub fn write_iterate_log(path: &Path, log: &[IterateRecord]) -> Result<(), CoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "round,iterate,merit,max_phi,step_norm")?;
    for r in log {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.round,
            r.iterate,
            fmt(r.merit),
            fmt(r.max_phi),
            fmt(r.step_norm)
        )?;
    }
    Ok(())
}

/// Polyline as `x,y` rows.
pub fn write_polyline(path: &Path, points: &[(f64, f64)]) -> Result<(), CoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x,y")?;
    for (x, y) in points {
        writeln!(w, "{},{}", fmt(*x), fmt(*y))?;
    }
    Ok(())
}

pub fn write_overhead_report(path: &Path, r: &OverheadReport) -> Result<(), CoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "component,mean_seconds,max_seconds")?;
    writeln!(w, "policy_eval,{},{}", fmt(r.mean_t_lc), fmt(r.max_t_lc))?;
    writeln!(w, "forward_simulation,{},{}", fmt(r.mean_t_sim), fmt(r.max_t_sim))?;
    writeln!(w, "pinned_solve,{},{}", fmt(r.mean_t_sc1), fmt(r.max_t_sc1))?;
    writeln!(w, "override_solve,{},{}", fmt(r.mean_t_sc2), fmt(r.max_t_sc2))?;
    writeln!(w)?;
    writeln!(w, "decision,count")?;
    writeln!(w, "pass_through_no_solve,{}", r.pass_through_no_solve)?;
    writeln!(w, "pass_through_solve,{}", r.pass_through_solve)?;
    writeln!(w, "override,{}", r.overrides)?;
    writeln!(w, "inevitable,{}", r.inevitable)?;
    writeln!(w, "total,{}", r.steps)?;
    Ok(())
}
