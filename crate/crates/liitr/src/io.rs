//! Dataset CSV and explanation JSON-lines codecs.
//!
//! The dataset CSV has a header `x1,..,xp,t,y`, UTF-8, `.` decimal. Ground
//! truth travels in a JSON sidecar, never mixed into the CSV. All float
//! formatting is shortest-round-trip, so identical inputs serialize to
//! identical bytes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::Explanation;
use crate::numkit::Matrix;
use crate::simgen::{Dataset, GroundTruth, SimConfig};

/// Ground truth plus split bookkeeping for a generated run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub seed: u64,
    pub config: SimConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub truth: GroundTruth,
}

pub fn write_dataset_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = data.column_names.clone();
    header.push("t".into());
    header.push("y".into());
    w.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..data.n() {
        record.clear();
        for v in data.x.row(i) {
            record.push(format_float(*v));
        }
        record.push(data.t[i].to_string());
        record.push(format_float(data.y[i]));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.len() < 3 {
        return Err(Error::Data("dataset CSV needs at least x1,t,y".into()));
    }
    let p = header.len() - 2;
    if &header[p] != "t" || &header[p + 1] != "y" {
        return Err(Error::Data(
            "dataset CSV must end with columns t,y".into(),
        ));
    }
    let column_names: Vec<String> = (0..p).map(|i| header[i].to_string()).collect();
    let mut rows = Vec::new();
    let mut t = Vec::new();
    let mut y = Vec::new();
    for record in r.records() {
        let record = record?;
        let mut row = Vec::with_capacity(p);
        for i in 0..p {
            row.push(parse_float(&record[i])?);
        }
        let ti: u8 = record[p]
            .parse()
            .map_err(|_| Error::Data(format!("bad treatment value {:?}", &record[p])))?;
        t.push(ti);
        y.push(parse_float(&record[p + 1])?);
        rows.push(row);
    }
    let data = Dataset {
        x: Matrix::from_rows(&rows)?,
        t,
        y,
        column_names,
    };
    data.validate()?;
    Ok(data)
}

fn format_float(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    let mut buf = ryu_format(v);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(v: f64) -> String {
    // `Display` for f64 is shortest-round-trip in Rust.
    format!("{v}")
}

fn parse_float(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Data(format!("bad numeric value {s:?}")))
}

pub fn write_truth_sidecar<W: Write>(sidecar: &TruthSidecar, out: W) -> Result<()> {
    serde_json::to_writer_pretty(out, sidecar)?;
    Ok(())
}

pub fn read_truth_sidecar<R: Read>(input: R) -> Result<TruthSidecar> {
    Ok(serde_json::from_reader(input)?)
}

/// One explanation per line, in subject order.
pub fn write_explanations_jsonl<W: Write>(expls: &[Explanation], mut out: W) -> Result<()> {
    for e in expls {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_explanations_jsonl<R: Read>(input: R) -> Result<Vec<Explanation>> {
    let mut buf = String::new();
    let mut reader = std::io::BufReader::new(input);
    reader.read_to_string(&mut buf)?;
    buf.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
