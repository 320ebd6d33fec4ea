use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// Number of batches labeled so far.
    pub step: usize,
    /// Number of scenes labeled so far, excluding the initial training set.
    pub labeled_count: usize,
    pub map_new: f64,
    pub map_known: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub rows: Vec<CurveRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveField {
    MapNew,
    MapKnown,
}

impl CurveField {
    fn of(self, row: &CurveRow) -> f64 {
        match self {
            CurveField::MapNew => row.map_new,
            CurveField::MapKnown => row.map_known,
        }
    }
}

/// Trapezoidal area under `field` with one x unit per `eval_every` labeled
/// scenes. Not normalized.
pub fn auc(curve: &LearningCurve, field: CurveField, eval_every: usize) -> Result<f64> {
    if curve.rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "area needs at least 2 curve rows, got {}",
            curve.rows.len()
        )));
    }
    if eval_every == 0 {
        return Err(Error::InvalidArgument("eval_every must be at least 1".into()));
    }
    let unit = eval_every as f64;
    Ok(curve
        .rows
        .windows(2)
        .map(|w| {
            let dx = (w[1].labeled_count as f64 - w[0].labeled_count as f64) / unit;
            0.5 * dx * (field.of(&w[0]) + field.of(&w[1]))
        })
        .sum())
}

/// One exploration run as stored in a curves file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub curve: LearningCurve,
}

/// Writes `method,seed,step,labeled_count,map_new,map_known,ap_<class>...`.
pub fn write_curves_csv<W: Write>(out: W, class_names: &[String], runs: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["method", "seed", "step", "labeled_count", "map_new", "map_known"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(class_names.iter().map(|n| format!("ap_{n}")));
    w.write_record(&header)?;
    for run in runs {
        for row in &run.curve.rows {
            let mut rec = vec![
                run.method.clone(),
                run.seed.to_string(),
                row.step.to_string(),
                row.labeled_count.to_string(),
                row.map_new.to_string(),
                row.map_known.to_string(),
            ];
            for c in 0..class_names.len() {
                rec.push(row.per_class_ap.get(&c).map(f64::to_string).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad {what} value {field:?} in curves file")))
}

/// Reads a curves file back; returns class names and runs in file order.
pub fn read_curves_csv<R: Read>(input: R) -> Result<(Vec<String>, Vec<RunRecord>)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let fixed = ["method", "seed", "step", "labeled_count", "map_new", "map_known"];
    if header.len() < fixed.len() || header.iter().zip(fixed).any(|(a, b)| a != b) {
        return Err(Error::InvalidArgument("unexpected curves header".into()));
    }
    let class_names: Vec<String> = header
        .iter()
        .skip(fixed.len())
        .map(|h| h.strip_prefix("ap_").unwrap_or(h).to_string())
        .collect();
    let mut runs: Vec<RunRecord> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let method = rec[0].to_string();
        let seed: u64 = parse(&rec[1], "seed")?;
        let mut per_class_ap = BTreeMap::new();
        for (c, v) in rec.iter().skip(fixed.len()).enumerate() {
            if !v.is_empty() {
                per_class_ap.insert(c, parse(v, "ap")?);
            }
        }
        let row = CurveRow {
            step: parse(&rec[2], "step")?,
            labeled_count: parse(&rec[3], "labeled_count")?,
            map_new: parse(&rec[4], "map_new")?,
            map_known: parse(&rec[5], "map_known")?,
            per_class_ap,
        };
        match runs.last_mut() {
            Some(last) if last.method == method && last.seed == seed => last.curve.rows.push(row),
            _ => runs.push(RunRecord { method, seed, curve: LearningCurve { rows: vec![row] } }),
        }
    }
    Ok((class_names, runs))
}

/// Seed-averaged new-class mAP and area at fixed labeled counts, plus the
/// full curve, per method. Values are in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    /// `(checkpoint, map, auc)`; checkpoint `None` means the whole curve.
    pub points: Vec<(Option<usize>, f64, f64)>,
}

fn truncate(curve: &LearningCurve, upto: Option<usize>) -> LearningCurve {
    LearningCurve {
        rows: curve
            .rows
            .iter()
            .filter(|r| upto.is_none_or(|n| r.labeled_count <= n))
            .cloned()
            .collect(),
    }
}

pub fn summarize(runs: &[RunRecord], checkpoints: &[usize], eval_every: usize) -> Result<Vec<SummaryRow>> {
    let mut methods: Vec<&str> = Vec::new();
    for r in runs {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    let mut out = Vec::new();
    for m in methods {
        let group: Vec<&RunRecord> = runs.iter().filter(|r| r.method == m).collect();
        let mut points = Vec::new();
        for upto in checkpoints.iter().map(|&c| Some(c)).chain([None]) {
            let (mut map, mut area) = (0.0, 0.0);
            for run in &group {
                let t = truncate(&run.curve, upto);
                let last = t.rows.last().ok_or(Error::Empty("curve rows"))?;
                map += last.map_new;
                area += if t.rows.len() >= 2 { auc(&t, CurveField::MapNew, eval_every)? } else { 0.0 };
            }
            let n = group.len() as f64;
            points.push((upto, 100.0 * map / n, 100.0 * area / n));
        }
        out.push(SummaryRow { method: m.to_string(), points });
    }
    Ok(out)
}

/// Writes `method,map_<n>,auc_<n>,...,map_all,auc_all`.
pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = rows.first() {
        let mut header = vec!["method".to_string()];
        for (c, _, _) in &first.points {
            let tag = c.map_or("all".to_string(), |n| n.to_string());
            header.push(format!("map_{tag}"));
            header.push(format!("auc_{tag}"));
        }
        w.write_record(&header)?;
    }
    for row in rows {
        let mut rec = vec![row.method.clone()];
        for (_, map, area) in &row.points {
            rec.push(format!("{map:.2}"));
            rec.push(format!("{area:.2}"));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
