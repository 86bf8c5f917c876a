//! File formats.
//!
//! A dataset is a CSV with header `id,delta,time,event,x_1..x_p,q_0..q_{G-1}`
//! (q-cells empty when `delta = 0`, time/event empty without a survival
//! outcome) plus a JSON manifest `{grid, p, n, units}`. A truth file holds
//! `id,q_0..q_{G-1}` for rows whose response is hidden. Numbers are written
//! with the shortest decimal form that parses back to the same `f64`.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{DistributionalDataset, SurvivalRecord};
use crate::error::{Error, Result};
use crate::quantile::{empirical_quantile, ProbGrid, RawSampleStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid: ProbGrid,
    pub p: usize,
    pub n: usize,
    #[serde(default)]
    pub units: String,
}

/// `data.csv` → `data.json`.
pub fn manifest_path_for(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(cell: &str, what: &str) -> Result<f64> {
    cell.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("{what}: '{cell}' is not a number")))
}

fn q_header(g: usize) -> impl Iterator<Item = String> {
    (0..g).map(|k| format!("q_{k}"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let mut s = String::new();
    File::open(path)?.read_to_string(&mut s)?;
    Ok(serde_json::from_str(&s)?)
}

/// Writes the dataset CSV and its manifest. Hidden ground truth is not
/// written; see [`write_truth`].
pub fn write_dataset(
    csv_path: &Path,
    manifest_path: &Path,
    data: &DistributionalDataset,
    units: &str,
) -> Result<()> {
    let (p, g) = (data.p(), data.grid.len());
    let mut w = csv::Writer::from_path(csv_path)?;
    let mut header = vec![
        "id".to_string(),
        "delta".into(),
        "time".into(),
        "event".into(),
    ];
    header.extend((1..=p).map(|j| format!("x_{j}")));
    header.extend(q_header(g));
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![data.ids[i].clone(), u8::from(data.delta[i]).to_string()];
        match &data.survival {
            Some(s) => {
                rec.push(fmt_f64(s[i].time));
                rec.push(u8::from(s[i].event).to_string());
            }
            None => rec.extend([String::new(), String::new()]),
        }
        rec.extend((0..p).map(|j| fmt_f64(data.x[(i, j)])));
        match data.observed_response(i) {
            Some(y) => rec.extend(y.iter().map(|v| fmt_f64(*v))),
            None => rec.extend(std::iter::repeat_n(String::new(), g)),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    let manifest = DatasetManifest {
        grid: data.grid.clone(),
        p,
        n: data.n(),
        units: units.to_string(),
    };
    write_json(manifest_path, &manifest)
}

pub fn read_dataset(csv_path: &Path, manifest_path: &Path) -> Result<DistributionalDataset> {
    let manifest: DatasetManifest = read_json(manifest_path)?;
    let (p, g) = (manifest.p, manifest.grid.len());
    let mut r = csv::Reader::from_path(csv_path)?;
    let header = r.headers()?.clone();
    let mut expected = vec![
        "id".to_string(),
        "delta".into(),
        "time".into(),
        "event".into(),
    ];
    expected.extend((1..=p).map(|j| format!("x_{j}")));
    expected.extend(q_header(g));
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse(format!(
            "header does not match manifest (p = {p}, grid size = {g})"
        )));
    }
    let mut ids = Vec::new();
    let mut xs = Vec::new();
    let mut responses = Vec::new();
    let mut delta = Vec::new();
    let mut survival = Vec::new();
    let mut any_survival = false;
    let mut all_survival = true;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        ids.push(rec[0].to_string());
        let d = match rec[1].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse(format!(
                    "line {row}: delta must be 0 or 1, got '{other}'"
                )))
            }
        };
        delta.push(d);
        let (time, event) = (rec[2].trim(), rec[3].trim());
        if time.is_empty() && event.is_empty() {
            all_survival = false;
        } else {
            any_survival = true;
            let event = match event {
                "1" => true,
                "0" => false,
                other => {
                    return Err(Error::Parse(format!(
                        "line {row}: event must be 0 or 1, got '{other}'"
                    )))
                }
            };
            survival.push(SurvivalRecord::new(parse_f64(time, "time")?, event)?);
        }
        for j in 0..p {
            xs.push(parse_f64(&rec[4 + j], &format!("line {row} x_{}", j + 1))?);
        }
        let qs: Vec<&str> = (0..g).map(|k| rec[4 + p + k].trim()).collect();
        if qs.iter().all(|c| c.is_empty()) {
            responses.push(None);
        } else {
            let y = qs
                .iter()
                .enumerate()
                .map(|(k, c)| parse_f64(c, &format!("line {row} q_{k}")))
                .collect::<Result<Vec<_>>>()?;
            responses.push(Some(y));
        }
    }
    if ids.len() != manifest.n {
        return Err(Error::DimensionMismatch {
            expected: manifest.n,
            got: ids.len(),
        });
    }
    if any_survival && !all_survival {
        return Err(Error::Parse(
            "time/event must be given for every row or none".into(),
        ));
    }
    let n = ids.len();
    let x = DMatrix::from_row_slice(n, p, &xs);
    // q-cells of unobserved rows are ignored
    for (r, &d) in responses.iter_mut().zip(&delta) {
        if !d {
            *r = None;
        }
    }
    DistributionalDataset::new(
        ids,
        x,
        manifest.grid,
        responses,
        delta,
        any_survival.then_some(survival),
    )
}

/// Ground truth of the unobserved rows.
pub fn write_truth(path: &Path, data: &DistributionalDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(q_header(data.grid.len()));
    w.write_record(&header)?;
    for i in data.missing_indices() {
        if let Some(y) = &data.responses[i] {
            let mut rec = vec![data.ids[i].clone()];
            rec.extend(y.iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Attaches ground-truth responses to unobserved rows, matched by id.
/// Returns the number of rows that received a response.
pub fn attach_truth(path: &Path, data: &mut DistributionalDataset) -> Result<usize> {
    let index: HashMap<&str, usize> = data
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let g = data.grid.len();
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.len() != g + 1 {
        return Err(Error::DimensionMismatch {
            expected: g + 1,
            got: r.headers()?.len(),
        });
    }
    let mut updates = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let i = *index
            .get(&rec[0])
            .ok_or_else(|| Error::Parse(format!("truth id '{}' not in dataset", &rec[0])))?;
        if data.delta[i] {
            return Err(Error::InvalidArgument(format!(
                "truth given for observed row '{}'",
                &rec[0]
            )));
        }
        let y = (0..g)
            .map(|k| parse_f64(&rec[1 + k], "truth"))
            .collect::<Result<Vec<_>>>()?;
        updates.push((i, y));
    }
    for (i, y) in &updates {
        data.responses[*i] = Some(y.clone());
    }
    // revalidate monotonicity and finiteness through the constructor
    *data = DistributionalDataset::new(
        data.ids.clone(),
        data.x.clone(),
        data.grid.clone(),
        data.responses.clone(),
        data.delta.clone(),
        data.survival.clone(),
    )?;
    Ok(updates.len())
}

/// Reads `id` and `x_1..x_p` from any CSV carrying those columns (a
/// dataset file qualifies). Returns ids and the `n × p` covariate matrix.
pub fn read_covariates(path: &Path, p: usize) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse(format!("column '{name}' missing from {}", path.display())))
    };
    let id_col = find("id")?;
    let cols = (1..=p)
        .map(|j| find(&format!("x_{j}")))
        .collect::<Result<Vec<_>>>()?;
    if header.iter().any(|h| h.trim() == format!("x_{}", p + 1)) {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: p + 1,
        });
    }
    let mut ids = Vec::new();
    let mut xs = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        ids.push(rec[id_col].to_string());
        for (j, &c) in cols.iter().enumerate() {
            xs.push(parse_f64(
                &rec[c],
                &format!("line {} x_{}", line + 2, j + 1),
            )?);
        }
    }
    Ok((ids.clone(), DMatrix::from_row_slice(ids.len(), p, &xs)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub ids: Vec<String>,
    pub quantiles: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub rejects: Vec<Reject>,
}

/// Reads `(id, value)` rows and turns each subject's values into an
/// empirical quantile function. Cells that are empty or not finite numbers
/// are skipped; subjects left with no usable value, and ids from `expected`
/// that never appear, are rejected. Subjects are reported in order of first
/// appearance, followed by absent expected ids in the rejects.
pub fn ingest_raw(path: &Path, grid: &ProbGrid, expected: Option<&[String]>) -> Result<Ingested> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.len() < 2 || headers[0].trim() != "id" || headers[1].trim() != "value" {
        return Err(Error::Parse("raw file header must be 'id,value'".into()));
    }
    let mut order: Vec<String> = Vec::new();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut bad: BTreeMap<String, usize> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        if id.is_empty() {
            continue;
        }
        if !values.contains_key(&id) {
            order.push(id.clone());
            values.insert(id.clone(), Vec::new());
        }
        match rec
            .get(1)
            .map(str::trim)
            .and_then(|c| c.parse::<f64>().ok())
        {
            Some(v) if v.is_finite() => values.get_mut(&id).expect("inserted").push(v),
            _ => *bad.entry(id).or_default() += 1,
        }
    }
    let mut out = Ingested {
        ids: Vec::new(),
        quantiles: Vec::new(),
        counts: Vec::new(),
        rejects: Vec::new(),
    };
    for id in order {
        let v = values.remove(&id).expect("present");
        if v.is_empty() {
            let skipped = bad.get(&id).copied().unwrap_or(0);
            out.rejects.push(Reject {
                id,
                reason: format!("no usable values ({skipped} unparseable)"),
            });
            continue;
        }
        out.counts.push(v.len());
        let q = empirical_quantile(&RawSampleStream::new(v)?, grid);
        out.quantiles.push(q.into_values());
        out.ids.push(id);
    }
    if let Some(expected) = expected {
        for id in expected {
            if !out.ids.contains(id) && !out.rejects.iter().any(|r| &r.id == id) {
                out.rejects.push(Reject {
                    id: id.clone(),
                    reason: "no rows".into(),
                });
            }
        }
    }
    Ok(out)
}

pub fn write_quantiles(
    path: &Path,
    grid: &ProbGrid,
    ids: &[String],
    rows: &[Vec<f64>],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(q_header(grid.len()));
    w.write_record(&header)?;
    for (id, q) in ids.iter().zip(rows) {
        let mut rec = vec![id.clone()];
        rec.extend(q.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rejects(path: &Path, rejects: &[Reject]) -> Result<()> {
    write_rows(path, rejects, &["id", "reason"])
}

/// Plain string table as CSV.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Serializable rows as CSV with the header taken from the field names.
/// With no rows only `empty_header` is written.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T], empty_header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(empty_header)?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
