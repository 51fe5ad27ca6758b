//! Reading and writing datasets, fits and reports.
//!
//! Ordinal responses use a long CSV with columns `subject_id, time_index, item, level`,
//! one row per observed response, indices starting at 1. Survival outcomes use
//! `subject_id, time, event, covariate` with `event` in `{0, 1}`. Structured documents
//! (configs, designs, parameters, fit summaries, reports) are JSON. Floats are written
//! in shortest round-trip form so outputs are byte-stable.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::{Dataset, SubjectRecord};
use crate::em::{FitResult, Posterior};
use crate::error::{Error, Result};
use crate::inference::InfoMatrix;
use crate::ordinal::{ResponseCell, ResponseSet};
use crate::simulation::ReplicationRecord;
use crate::survival::{HazardSteps, SurvivalRecord};

pub const ORDINAL_COLUMNS: [&str; 4] = ["subject_id", "time_index", "item", "level"];
pub const SURVIVAL_COLUMNS: [&str; 4] = ["subject_id", "time", "event", "covariate"];

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

struct Columns {
    file: String,
    index: Vec<usize>,
}

impl Columns {
    fn locate(file: &str, headers: &csv::StringRecord, wanted: &[&str]) -> Result<Self> {
        let index = wanted
            .iter()
            .map(|name| {
                headers.iter().position(|h| h.trim() == *name).ok_or_else(|| Error::Schema {
                    file: file.to_string(),
                    row: 1,
                    column: (*name).to_string(),
                    message: format!("missing column; expected header {}", wanted.join(",")),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { file: file.to_string(), index })
    }

    fn schema(&self, row: usize, column: &str, message: String) -> Error {
        Error::Schema { file: self.file.clone(), row, column: column.to_string(), message }
    }

    fn field<'r>(&self, record: &'r csv::StringRecord, k: usize, row: usize, column: &str) -> Result<&'r str> {
        let value = record.get(self.index[k]).map(str::trim).unwrap_or("");
        if value.is_empty() {
            return Err(self.schema(row, column, "empty value".into()));
        }
        Ok(value)
    }

    fn index1(&self, record: &csv::StringRecord, k: usize, row: usize, column: &str) -> Result<usize> {
        let raw = self.field(record, k, row, column)?;
        match raw.parse::<usize>() {
            Ok(v) if v >= 1 => Ok(v - 1),
            _ => Err(self.schema(row, column, format!("expected an integer >= 1, got `{raw}`"))),
        }
    }

    fn real(&self, record: &csv::StringRecord, k: usize, row: usize, column: &str) -> Result<f64> {
        let raw = self.field(record, k, row, column)?;
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.schema(row, column, format!("expected a finite number, got `{raw}`"))),
        }
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?)
}

/// Responses keyed by subject id, in order of first appearance.
pub fn read_ordinal_csv(path: &Path) -> Result<Vec<(String, Vec<ResponseCell>)>> {
    let file = file_label(path);
    let mut rdr = reader(path)?;
    let cols = Columns::locate(&file, rdr.headers()?, &ORDINAL_COLUMNS)?;
    let mut order: Vec<(String, Vec<ResponseCell>)> = Vec::new();
    let mut position: HashMap<String, usize> = HashMap::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let row = k + 2;
        let id = cols.field(&record, 0, row, "subject_id")?.to_string();
        let cell = ResponseCell {
            time_index: cols.index1(&record, 1, row, "time_index")?,
            item: cols.index1(&record, 2, row, "item")?,
            level: cols.index1(&record, 3, row, "level")?,
        };
        let slot = *position.entry(id.clone()).or_insert_with(|| {
            order.push((id, Vec::new()));
            order.len() - 1
        });
        let cells = &mut order[slot].1;
        if cells.iter().any(|c| c.item == cell.item && c.time_index == cell.time_index) {
            return Err(cols.schema(
                row,
                "level",
                format!("duplicate response for item {} at time {}", cell.item + 1, cell.time_index + 1),
            ));
        }
        cells.push(cell);
    }
    Ok(order)
}

/// Survival records keyed by subject id, in file order.
pub fn read_survival_csv(path: &Path) -> Result<Vec<(String, SurvivalRecord)>> {
    let file = file_label(path);
    let mut rdr = reader(path)?;
    let cols = Columns::locate(&file, rdr.headers()?, &SURVIVAL_COLUMNS)?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let row = k + 2;
        let id = cols.field(&record, 0, row, "subject_id")?.to_string();
        if !seen.insert(id.clone()) {
            return Err(cols.schema(row, "subject_id", format!("subject `{id}` appears twice")));
        }
        let time = cols.real(&record, 1, row, "time")?;
        if time <= 0.0 {
            return Err(cols.schema(row, "time", format!("time must be positive, got {time}")));
        }
        let event = match cols.field(&record, 2, row, "event")? {
            "0" => false,
            "1" => true,
            other => return Err(cols.schema(row, "event", format!("expected 0 or 1, got `{other}`"))),
        };
        let covariate = cols.real(&record, 3, row, "covariate")?;
        out.push((id, SurvivalRecord::new(time, event, covariate)?));
    }
    if out.is_empty() {
        return Err(Error::Schema { file, row: 1, column: "subject_id".into(), message: "no subjects".into() });
    }
    Ok(out)
}

/// Joins the two files on `subject_id` (survival file order). Subjects without ordinal
/// rows have all cells missing. `dims` fixes `(items, levels)`; otherwise both are the
/// largest index observed.
pub fn read_dataset(ordinal: &Path, survival: &Path, dims: Option<(usize, usize)>) -> Result<Dataset> {
    let responses = read_ordinal_csv(ordinal)?;
    let outcomes = read_survival_csv(survival)?;
    let known: BTreeSet<&str> = outcomes.iter().map(|(id, _)| id.as_str()).collect();
    let missing: Vec<String> =
        responses.iter().filter(|(id, _)| !known.contains(id.as_str())).map(|(id, _)| id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::IdMismatch(missing));
    }
    let (items, levels) = match dims {
        Some(d) => d,
        None => {
            let cells = responses.iter().flat_map(|(_, c)| c);
            let items = cells.clone().map(|c| c.item + 1).max().unwrap_or(1);
            let levels = cells.map(|c| c.level + 1).max().unwrap_or(2).max(2);
            (items, levels)
        }
    };
    let mut by_id: HashMap<String, Vec<ResponseCell>> = responses.into_iter().collect();
    let subjects = outcomes
        .into_iter()
        .map(|(id, survival)| {
            let cells = by_id.remove(&id).unwrap_or_default();
            let responses = ResponseSet::new(cells).map_err(|e| Error::InvalidData(format!("subject {id}: {e}")))?;
            Ok(SubjectRecord { id, responses, survival })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(subjects, items, levels)
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new().from_writer(BufWriter::new(File::create(path)?)))
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Writes the dataset in the two-file layout read by [`read_dataset`].
pub fn write_dataset(data: &Dataset, ordinal: &Path, survival: &Path) -> Result<()> {
    let mut w = writer(ordinal)?;
    w.write_record(ORDINAL_COLUMNS)?;
    for s in data.subjects() {
        let mut cells = s.responses.cells().to_vec();
        cells.sort_unstable();
        for c in cells {
            w.write_record([
                s.id.clone(),
                (c.time_index + 1).to_string(),
                (c.item + 1).to_string(),
                (c.level + 1).to_string(),
            ])?;
        }
    }
    w.flush()?;
    let mut w = writer(survival)?;
    w.write_record(SURVIVAL_COLUMNS)?;
    for s in data.subjects() {
        let r = &s.survival;
        w.write_record([s.id.clone(), num(r.time), u8::from(r.event).to_string(), num(r.covariate)])?;
    }
    w.flush()?;
    Ok(())
}

/// Latent group labels (1-based) next to subject ids.
pub fn write_labels(data: &Dataset, labels: &[usize], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["subject_id", "group"])?;
    for (s, l) in data.subjects().iter().zip(labels) {
        w.write_record([s.id.clone(), (l + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Free parameters with standard errors, then the mixture weights (no standard error).
pub fn write_estimates(fit: &FitResult, path: &Path) -> Result<()> {
    let layout = fit.params.layout();
    let x = layout.pack(&fit.params)?;
    let mut w = writer(path)?;
    w.write_record(["parameter", "estimate", "std_error"])?;
    for ((name, v), se) in layout.names().iter().zip(&x).zip(&fit.std_errors) {
        w.write_record([name.clone(), num(*v), num(*se)])?;
    }
    for (r, p) in fit.params.pi.iter().enumerate() {
        w.write_record([format!("pi[{}]", r + 1), num(*p), String::new()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_posterior(data: &Dataset, posterior: &Posterior, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["subject_id".to_string()];
    header.extend((1..=posterior.n_groups()).map(|r| format!("gamma[{r}]")));
    w.write_record(&header)?;
    for (i, s) in data.subjects().iter().enumerate() {
        let mut row = vec![s.id.clone()];
        row.extend(posterior.row(i).iter().map(|v| num(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_hazard(hazard: &HazardSteps, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["time", "jump", "cumulative"])?;
    for ((t, j), c) in hazard.event_times().iter().zip(hazard.jumps()).zip(hazard.cumulative_values()) {
        w.write_record([num(*t), num(*j), num(*c)])?;
    }
    w.flush()?;
    Ok(())
}

/// Square matrix with parameter names as the header and first column.
pub fn write_information(info: &InfoMatrix, names: &[String], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["parameter".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, name) in names.iter().enumerate() {
        let mut row = vec![name.clone()];
        row.extend((0..info.dim()).map(|j| num(info.get(i, j))));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(trace: &[f64], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["iteration", "loglik"])?;
    for (k, v) in trace.iter().enumerate() {
        w.write_record([(k + 1).to_string(), num(*v)])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per Monte Carlo replication with estimates and standard errors by name.
pub fn write_replications(records: &[ReplicationRecord], names: &[String], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> =
        ["replication", "fit_seed", "converged", "n_iter", "loglik", "failure"].iter().map(|s| s.to_string()).collect();
    header.extend(names.iter().map(|n| format!("est_{n}")));
    header.extend(names.iter().map(|n| format!("se_{n}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.replication.to_string(),
            r.fit_seed.to_string(),
            u8::from(r.converged).to_string(),
            r.n_iter.to_string(),
            num(r.loglik),
            r.failure.clone().unwrap_or_default(),
        ];
        for values in [&r.estimates, &r.std_errors] {
            row.extend((0..names.len()).map(|k| values.get(k).map_or(String::new(), |v| num(*v))));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}
