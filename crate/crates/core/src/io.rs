//! CSV and JSON formats for measures, event logs, solver output and plot
//! data. Floats are written in shortest round-trip form, rows in a fixed
//! order, so identical inputs give identical bytes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::analysis::ConvergenceReport;
use crate::error::{CoagError, Result};
use crate::flory::{FloryTrajectory, GridSpec};
use crate::simulator::EventRecord;
use crate::state::{ClusterState, DiscreteMeasure, Mass};

fn writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

fn label(l: Option<u32>) -> String {
    l.map(|v| v.to_string()).unwrap_or_default()
}

/// One row of a serialised measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRow {
    pub time: f64,
    pub mass: Mass,
    pub label: Option<u32>,
    pub attrs: Vec<f64>,
    pub weight: f64,
}

fn rows_of(time: f64, mu: &DiscreteMeasure) -> impl Iterator<Item = MeasureRow> + '_ {
    mu.iter().map(move |(x, w)| MeasureRow {
        time,
        mass: x.mass(),
        label: x.label(),
        attrs: x.attributes().to_vec(),
        weight: w,
    })
}

/// Columns `time, mass, label, attr_0.., weight`, one row per support state.
pub fn write_measures_csv<W: Write>(out: W, measures: &[(f64, &DiscreteMeasure)]) -> Result<()> {
    let dim = measures
        .iter()
        .flat_map(|(_, m)| m.support().iter().map(ClusterState::dim))
        .max()
        .unwrap_or(0);
    let mut w = writer(out);
    let mut header = vec!["time".to_string(), "mass".into(), "label".into()];
    header.extend((0..dim).map(|k| format!("attr_{k}")));
    header.push("weight".into());
    w.write_record(&header)?;
    for (t, mu) in measures {
        for row in rows_of(*t, mu) {
            if row.attrs.len() != dim {
                return Err(CoagError::Format("measures mix attribute dimensions".into()));
            }
            let mut rec = vec![float(row.time), row.mass.to_string(), label(row.label)];
            rec.extend(row.attrs.iter().map(|a| float(*a)));
            rec.push(float(row.weight));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| CoagError::Format(format!("bad {what} `{s}`")))
}

fn parse_mass(s: &str) -> Result<Mass> {
    let s = s.trim();
    if s.bytes().all(|b| b.is_ascii_digit()) {
        s.parse::<u64>()
            .map(Mass::Integer)
            .map_err(|_| CoagError::Format(format!("bad mass `{s}`")))
    } else {
        Ok(Mass::Real(parse_f64(s, "mass")?))
    }
}

/// Reads the output of [`write_measures_csv`], grouping rows by time.
pub fn read_measures_csv<R: Read>(input: R) -> Result<Vec<(f64, DiscreteMeasure)>> {
    let mut r = csv::ReaderBuilder::new().from_reader(input);
    let header = r.headers()?.clone();
    let n = header.len();
    if n < 4 || &header[0] != "time" || &header[1] != "mass" || &header[2] != "label" || &header[n - 1] != "weight" {
        return Err(CoagError::Format("unexpected measure CSV header".into()));
    }
    let mut out: Vec<(f64, Vec<ClusterState>, Vec<f64>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let time = parse_f64(&rec[0], "time")?;
        let mass = parse_mass(&rec[1])?;
        let lbl = match rec[2].trim() {
            "" => None,
            s => Some(s.parse().map_err(|_| CoagError::Format(format!("bad label `{s}`")))?),
        };
        let attrs = (3..n - 1).map(|k| parse_f64(&rec[k], "attribute")).collect::<Result<Vec<_>>>()?;
        let weight = parse_f64(&rec[n - 1], "weight")?;
        let state = ClusterState::new(mass, attrs, lbl)?;
        match out.last_mut() {
            Some((t, s, w)) if *t == time => {
                s.push(state);
                w.push(weight);
            }
            _ => out.push((time, vec![state], vec![weight])),
        }
    }
    out.into_iter()
        .map(|(t, s, w)| Ok((t, DiscreteMeasure::new(s, w)?)))
        .collect()
}

pub fn measures_to_json(measures: &[(f64, &DiscreteMeasure)]) -> Result<String> {
    let rows: Vec<MeasureRow> = measures.iter().flat_map(|(t, m)| rows_of(*t, m)).collect();
    Ok(serde_json::to_string_pretty(&rows)?)
}

pub fn measures_from_json(text: &str) -> Result<Vec<(f64, DiscreteMeasure)>> {
    let rows: Vec<MeasureRow> = serde_json::from_str(text)?;
    let mut out: Vec<(f64, Vec<ClusterState>, Vec<f64>)> = Vec::new();
    for row in rows {
        let state = ClusterState::new(row.mass, row.attrs, row.label)?;
        match out.last_mut() {
            Some((t, s, w)) if *t == row.time => {
                s.push(state);
                w.push(row.weight);
            }
            _ => out.push((row.time, vec![state], vec![row.weight])),
        }
    }
    out.into_iter()
        .map(|(t, s, w)| Ok((t, DiscreteMeasure::new(s, w)?)))
        .collect()
}

/// Columns `event_index, time, idx_x, idx_y, mass_x, mass_y, mass_child,
/// label_child, attr_0..` (child attributes).
pub fn write_events_csv<W: Write>(out: W, events: &[EventRecord]) -> Result<()> {
    let dim = events.iter().map(|e| e.child.dim()).max().unwrap_or(0);
    let mut w = writer(out);
    let mut header: Vec<String> = [
        "event_index",
        "time",
        "idx_x",
        "idx_y",
        "mass_x",
        "mass_y",
        "mass_child",
        "label_child",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..dim).map(|k| format!("attr_{k}")));
    w.write_record(&header)?;
    for e in events {
        let mut rec = vec![
            e.index.to_string(),
            float(e.time),
            e.idx_x.to_string(),
            e.idx_y.to_string(),
            e.mass_x.to_string(),
            e.mass_y.to_string(),
            e.child.mass().to_string(),
            label(e.child.label()),
        ];
        rec.extend(e.child.attributes().iter().map(|a| float(*a)));
        rec.resize(8 + dim, String::new());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Columns `time, state_id, weight` at every recorded time.
pub fn write_weights_csv<W: Write>(out: W, traj: &FloryTrajectory) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["time", "state_id", "weight"])?;
    for (t, ws) in traj.record_times.iter().zip(&traj.weights) {
        for (i, v) in ws.iter().enumerate() {
            w.write_record([float(*t), i.to_string(), float(*v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const MOMENT_COLUMNS: [&str; 7] = ["time", "m0", "m1", "m2", "reservoir_m2", "gel_mass", "overflow_mass"];

/// Columns `time, m0, m1, m2, reservoir_m2, gel_mass, overflow_mass`.
pub fn write_moments_csv<W: Write>(out: W, traj: &FloryTrajectory) -> Result<()> {
    let mut w = writer(out);
    w.write_record(MOMENT_COLUMNS)?;
    for k in 0..traj.times.len() {
        w.write_record([
            float(traj.times[k]),
            float(traj.m0[k]),
            float(traj.m1[k]),
            float(traj.m2[k]),
            float(traj.reservoir_m2[k]),
            float(traj.gel_mass[k]),
            float(traj.overflow_mass[k]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct GridJson<'a> {
    states: &'a [ClusterState],
    phi_symmetric: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    kbar: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    phi: Option<Vec<Vec<f64>>>,
}

pub fn grid_to_json(grid: &GridSpec, include_tables: bool) -> Result<String> {
    let n = grid.len();
    let table = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| f(i, j)).collect()).collect()
    };
    let doc = GridJson {
        states: grid.states(),
        phi_symmetric: grid.phi_symmetric(),
        kbar: include_tables.then(|| table(&|i, j| grid.kbar(i, j))),
        phi: (include_tables && grid.has_phi()).then(|| table(&|i, j| grid.phi(i, j))),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// A tidy `(series, x, y)` row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotRow {
    pub series: String,
    pub x: f64,
    pub y: f64,
}

/// Moment series `m0, m1, m2, reservoir_m2, gel_mass`, each in time order.
pub fn plot_rows_from_moments(traj: &FloryTrajectory) -> Vec<PlotRow> {
    let series: [(&str, &[f64]); 5] = [
        ("m0", &traj.m0),
        ("m1", &traj.m1),
        ("m2", &traj.m2),
        ("reservoir_m2", &traj.reservoir_m2),
        ("gel_mass", &traj.gel_mass),
    ];
    series
        .iter()
        .flat_map(|(name, values)| {
            traj.times.iter().zip(values.iter()).map(move |(t, v)| PlotRow {
                series: name.to_string(),
                x: *t,
                y: *v,
            })
        })
        .collect()
}

/// `err@t` series of median distance against `N`.
pub fn plot_rows_from_convergence(report: &ConvergenceReport) -> Vec<PlotRow> {
    let mut rows: Vec<PlotRow> = report
        .rows
        .iter()
        .map(|r| PlotRow {
            series: format!("err@{}", float(r.time)),
            x: r.n as f64,
            y: r.median,
        })
        .collect();
    rows.sort_by(|a, b| a.series.cmp(&b.series).then(a.x.total_cmp(&b.x)));
    rows
}

pub fn emit_plot_data<W: Write>(out: W, rows: &[PlotRow]) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["series", "x", "y"])?;
    for r in rows {
        w.write_record([r.series.clone(), float(r.x), float(r.y)])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flory::{build_grid, solve, SolverConfig};
    use crate::kernels::{ConservedQuantity, KernelSpec};

    fn sample_measure() -> DiscreteMeasure {
        DiscreteMeasure::new(
            vec![
                ClusterState::integer(1).with_attributes(vec![0.5, -1.25]).unwrap().with_label(2),
                ClusterState::integer(3).with_attributes(vec![0.1, 1e-17]).unwrap(),
            ],
            vec![0.3, 0.1 + 0.2],
        )
        .unwrap()
    }

    #[test]
    fn measure_csv_round_trip_is_exact() {
        let mu = sample_measure();
        let mut buf = Vec::new();
        write_measures_csv(&mut buf, &[(0.0, &mu), (1.5, &mu)]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("time,mass,label,attr_0,attr_1,weight\n"));
        assert!(!text.contains('\r'));
        let back = read_measures_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for (_, m) in &back {
            assert_eq!(m.weights(), mu.weights());
            assert!(m.support().iter().zip(mu.support()).all(|(a, b)| a.same_bits(b)));
        }
    }

    #[test]
    fn measure_json_round_trip_keeps_mass_kind() {
        let mu = DiscreteMeasure::new(
            vec![ClusterState::integer(2), ClusterState::real(2.5).unwrap()],
            vec![0.5, 0.5],
        )
        .unwrap();
        let text = measures_to_json(&[(0.25, &mu)]).unwrap();
        let back = measures_from_json(&text).unwrap();
        assert_eq!(back[0].0, 0.25);
        assert!(back[0].1.support()[0].mass().is_integer());
        assert!(!back[0].1.support()[1].mass().is_integer());
    }

    #[test]
    fn real_mass_written_distinctly() {
        let mu = DiscreteMeasure::dirac(ClusterState::real(2.0).unwrap(), 1.0).unwrap();
        let mut buf = Vec::new();
        write_measures_csv(&mut buf, &[(0.0, &mu)]).unwrap();
        let back = read_measures_csv(buf.as_slice()).unwrap();
        assert!(!back[0].1.support()[0].mass().is_integer());
    }

    #[test]
    fn plot_data() {
        let k = KernelSpec::constant(1.0).unwrap();
        let grid = build_grid(5, None, &k, &ConservedQuantity::zero()).unwrap();
        let traj = solve(&[1.0, 0.0, 0.0, 0.0, 0.0], &grid, &SolverConfig::new(0.1, 0.3)).unwrap();
        let rows = plot_rows_from_moments(&traj);
        let m2: Vec<f64> = rows.iter().filter(|r| r.series == "m2").map(|r| r.x).collect();
        assert_eq!(m2, traj.times);
        let mut a = Vec::new();
        let mut b = Vec::new();
        emit_plot_data(&mut a, &rows).unwrap();
        emit_plot_data(&mut b, &rows).unwrap();
        assert_eq!(a, b);
        let mut empty = Vec::new();
        emit_plot_data(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "series,x,y\n");
    }

    #[test]
    fn moments_and_grid_outputs() {
        let k = KernelSpec::multiplicative();
        let grid = build_grid(3, None, &k, &ConservedQuantity::mass_product()).unwrap();
        let json = grid_to_json(&grid, true).unwrap();
        assert!(json.contains("\"kbar\""));
        assert!(!grid_to_json(&grid, false).unwrap().contains("kbar"));
        let traj = solve(&[1.0, 0.0, 0.0], &grid, &SolverConfig::new(0.1, 0.2)).unwrap();
        let mut buf = Vec::new();
        write_moments_csv(&mut buf, &traj).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), traj.times.len() + 1);
        let mut buf = Vec::new();
        write_weights_csv(&mut buf, &traj).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 3 * traj.record_times.len());
    }
}
