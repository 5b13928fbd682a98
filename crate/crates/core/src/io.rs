//! Text file formats.
//!
//! All floats are written with 17 significant digits in scientific notation,
//! which round-trips every finite `f64` exactly.
//!
//! | magic | contents |
//! |-------|----------|
//! | `DSV1` | dataset |
//! | `EMB1` | embeddings |
//! | `CLF1` | classifier |
//! | `AUD1` | audit sidecar |
//! | `RID1` | calibrated re-identification filter |
//!
//! Configs are flat `key = value` lines with `#` comments.

use std::collections::BTreeMap;
use std::fmt::{self, Display};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::classifier::{Classifier, TrainMeta, TrainedOn};
use crate::features::{Embeddings, ExtractorKind, ExtractorSpec, IdentityExtractor, Projection};
use crate::privacy::{Calibration, ReidFilter, ThresholdObjective};
use crate::world::{Dataset, Origin, Record, Split};
use crate::{Error, Result};

/// Formats a float so that parsing it back yields the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("bad float `{s}`")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite value `{s}`")));
    }
    Ok(v)
}

fn parse_num<T: FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("bad {what} `{s}`")))
}

/// Flat `key = value` configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, "expected `key = value`"))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::parse(i + 1, "empty key"));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Typed lookup; a present but unparsable value is a config error.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`"))),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    /// Overlays every entry of `other`.
    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

impl Display for KvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// `MAGIC k=v k=v ...` header line.
struct Header {
    fields: BTreeMap<String, String>,
}

impl Header {
    fn parse(line: &str, magic_prefix: &str, expected: &str) -> Result<Self> {
        let mut tokens = line.split_whitespace();
        let magic = tokens.next().unwrap_or("");
        if magic != expected {
            let found = if magic.starts_with(magic_prefix) {
                magic.to_string()
            } else {
                return Err(Error::parse(1, format!("expected `{expected}` header")));
            };
            return Err(Error::Version {
                expected: expected.to_string(),
                found,
            });
        }
        let mut fields = BTreeMap::new();
        for t in tokens {
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| Error::parse(1, format!("bad header field `{t}`")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        Ok(Header { fields })
    }

    fn str(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::parse(1, format!("header is missing `{key}`")))
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<T> {
        parse_num(self.str(key)?, 1, key)
    }

    fn float(&self, key: &str) -> Result<f64> {
        parse_f64(self.str(key)?, 1)
    }
}

fn read(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

fn first_line(text: &str) -> Result<&str> {
    text.lines().next().ok_or_else(|| Error::parse(1, "empty file"))
}

pub fn dataset_to_string(ds: &Dataset) -> String {
    let mut out = format!(
        "DSV1 dim={} n={} classes={} origin={}\n",
        ds.dim,
        ds.len(),
        ds.n_classes,
        ds.origin
    );
    for r in &ds.records {
        out.push_str(&r.record_id.to_string());
        if ds.origin == Origin::Real {
            out.push(',');
            if let Some(id) = r.identity {
                out.push_str(&id.to_string());
            }
        }
        out.push(',');
        out.push_str(&r.split.to_string());
        out.push(',');
        out.extend(r.labels.iter().map(|&b| if b == 1 { '1' } else { '0' }));
        for v in &r.x {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn dataset_from_str(text: &str) -> Result<Dataset> {
    let h = Header::parse(first_line(text)?, "DSV", "DSV1")?;
    let dim: usize = h.num("dim")?;
    let n: usize = h.num("n")?;
    let k: usize = h.num("classes")?;
    let origin: Origin = h
        .str("origin")?
        .parse()
        .map_err(|_| Error::parse(1, "bad origin"))?;
    let fixed = if origin == Origin::Real { 4 } else { 3 };
    let mut records = Vec::with_capacity(n);
    for (i, line) in text.lines().enumerate().skip(1) {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != fixed + dim {
            return Err(Error::parse(
                ln,
                format!("expected {} columns, found {}", fixed + dim, cols.len()),
            ));
        }
        let record_id: u64 = parse_num(cols[0], ln, "record_id")?;
        let (identity, rest) = if origin == Origin::Real {
            let id = if cols[1].is_empty() {
                None
            } else {
                Some(parse_num(cols[1], ln, "identity")?)
            };
            (id, &cols[2..])
        } else {
            (None, &cols[1..])
        };
        let split: Split = rest[0].parse().map_err(|_| Error::parse(ln, "bad split"))?;
        let bits = rest[1];
        if bits.len() != k {
            return Err(Error::parse(ln, format!("expected {k} label bits")));
        }
        let labels = bits
            .bytes()
            .map(|b| match b {
                b'0' => Ok(0),
                b'1' => Ok(1),
                _ => Err(Error::parse(ln, "label bits must be 0 or 1")),
            })
            .collect::<Result<Vec<u8>>>()?;
        let x = rest[2..]
            .iter()
            .map(|s| parse_f64(s, ln))
            .collect::<Result<Vec<f64>>>()?;
        records.push(Record {
            record_id,
            identity,
            split,
            labels,
            x,
        });
    }
    if records.len() != n {
        return Err(Error::parse(1, format!("header says n={n}, found {} records", records.len())));
    }
    Dataset::new(origin, dim, k, records)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    Ok(fs::write(path, dataset_to_string(ds))?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_str(&read(path)?)
}

pub fn embeddings_to_string(e: &Embeddings) -> String {
    let mut out = format!("EMB1 dim={} n={}\n", e.dim, e.record_ids.len());
    for (id, row) in e.record_ids.iter().zip(&e.values) {
        out.push_str(&id.to_string());
        for v in row {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

pub fn embeddings_from_str(text: &str) -> Result<Embeddings> {
    let h = Header::parse(first_line(text)?, "EMB", "EMB1")?;
    let dim: usize = h.num("dim")?;
    let n: usize = h.num("n")?;
    let mut record_ids = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for (i, line) in text.lines().enumerate().skip(1) {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != dim + 1 {
            return Err(Error::parse(ln, format!("expected {} columns", dim + 1)));
        }
        record_ids.push(parse_num(cols[0], ln, "record_id")?);
        values.push(cols[1..].iter().map(|s| parse_f64(s, ln)).collect::<Result<Vec<_>>>()?);
    }
    if record_ids.len() != n {
        return Err(Error::parse(1, format!("header says n={n}, found {}", record_ids.len())));
    }
    Ok(Embeddings {
        dim,
        record_ids,
        values,
    })
}

pub fn write_embeddings(path: &Path, e: &Embeddings) -> Result<()> {
    Ok(fs::write(path, embeddings_to_string(e))?)
}

pub fn read_embeddings(path: &Path) -> Result<Embeddings> {
    embeddings_from_str(&read(path)?)
}

fn float_row(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",")
}

pub fn classifier_to_string(clf: &Classifier) -> String {
    let degenerate = if clf.meta.degenerate_classes.is_empty() {
        "-".to_string()
    } else {
        clf.meta
            .degenerate_classes
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(":")
    };
    let mut out = format!(
        "CLF1 classes={} dim={} trained_on={} epochs={} learning_rate={} seed={} best_epoch={} degenerate={}\n",
        clf.n_classes(),
        clf.dim(),
        clf.trained_on,
        clf.meta.epochs,
        fmt_f64(clf.meta.learning_rate),
        clf.meta.seed,
        clf.meta.best_epoch,
        degenerate
    );
    for k in 0..clf.n_classes() {
        out.push_str(&float_row(clf.weight_row(k)));
        out.push('\n');
    }
    out.push_str(&float_row(clf.bias()));
    out.push('\n');
    out
}

pub fn classifier_from_str(text: &str) -> Result<Classifier> {
    let h = Header::parse(first_line(text)?, "CLF", "CLF1")?;
    let k: usize = h.num("classes")?;
    let dim: usize = h.num("dim")?;
    let trained_on: TrainedOn = h.str("trained_on")?.parse().map_err(|_| Error::parse(1, "bad trained_on"))?;
    let degenerate_classes = match h.str("degenerate")? {
        "-" => Vec::new(),
        s => s
            .split(':')
            .map(|c| parse_num(c, 1, "degenerate class"))
            .collect::<Result<Vec<usize>>>()?,
    };
    let meta = TrainMeta {
        epochs: h.num("epochs")?,
        learning_rate: h.float("learning_rate")?,
        seed: h.num("seed")?,
        best_epoch: h.num("best_epoch")?,
        degenerate_classes,
    };
    let rows: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    if rows.len() != k + 1 {
        return Err(Error::parse(1, format!("expected {} parameter rows, found {}", k + 1, rows.len())));
    }
    let parse_row = |(i, line): (usize, &str), width: usize| -> Result<Vec<f64>> {
        let vals = line
            .split(',')
            .map(|s| parse_f64(s, i + 1))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != width {
            return Err(Error::parse(i + 1, format!("expected {width} values")));
        }
        Ok(vals)
    };
    let mut weights = Vec::with_capacity(k * dim);
    for &row in &rows[..k] {
        weights.extend(parse_row(row, dim)?);
    }
    let bias = parse_row(rows[k], k)?;
    Classifier::from_parts(k, dim, weights, bias, trained_on, meta)
}

pub fn write_classifier(path: &Path, clf: &Classifier) -> Result<()> {
    Ok(fs::write(path, classifier_to_string(clf))?)
}

pub fn read_classifier(path: &Path) -> Result<Classifier> {
    classifier_from_str(&read(path)?)
}

/// One released record's provenance, as stored in the audit sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRow {
    pub record_id: u64,
    pub source_record_id: u64,
    pub guidance_used: f64,
    pub n_candidates_filtered: usize,
    pub final_bce: f64,
}

pub fn audit_to_string(rows: &[AuditRow]) -> String {
    let mut out = format!("AUD1 n={}\n", rows.len());
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.record_id,
            r.source_record_id,
            fmt_f64(r.guidance_used),
            r.n_candidates_filtered,
            fmt_f64(r.final_bce)
        ));
    }
    out
}

pub fn audit_from_str(text: &str) -> Result<Vec<AuditRow>> {
    let h = Header::parse(first_line(text)?, "AUD", "AUD1")?;
    let n: usize = h.num("n")?;
    let mut rows = Vec::with_capacity(n);
    for (i, line) in text.lines().enumerate().skip(1) {
        let ln = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::parse(ln, "expected 5 columns"));
        }
        rows.push(AuditRow {
            record_id: parse_num(cols[0], ln, "record_id")?,
            source_record_id: parse_num(cols[1], ln, "source_record_id")?,
            guidance_used: parse_f64(cols[2], ln)?,
            n_candidates_filtered: parse_num(cols[3], ln, "n_candidates_filtered")?,
            final_bce: parse_f64(cols[4], ln)?,
        });
    }
    if rows.len() != n {
        return Err(Error::parse(1, format!("header says n={n}, found {}", rows.len())));
    }
    Ok(rows)
}

pub fn write_audit(path: &Path, rows: &[AuditRow]) -> Result<()> {
    Ok(fs::write(path, audit_to_string(rows))?)
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRow>> {
    audit_from_str(&read(path)?)
}

fn projection_name(p: Projection) -> &'static str {
    match p {
        Projection::Seeded => "seeded",
        Projection::Identity => "identity",
    }
}

pub fn filter_to_string(filter: &ReidFilter) -> Result<String> {
    let tau = filter.tau().ok_or(Error::Uncalibrated)?;
    let s = filter.extractor_spec();
    let mut out = format!(
        "RID1 in_dim={} out_dim={} block_start={} block_len={} projection={} seed={} tau={}",
        s.in_dim,
        s.out_dim,
        s.block_start,
        s.block_len,
        projection_name(s.projection),
        s.seed,
        fmt_f64(tau)
    );
    match filter.calibration() {
        Some(c) => out.push_str(&format!(
            " objective={} auroc={} fnr={} n_fit={} n_heldout={}",
            c.objective,
            fmt_f64(c.heldout_auroc),
            fmt_f64(c.heldout_fnr),
            c.n_fit,
            c.n_heldout
        )),
        None => out.push_str(" objective=none"),
    }
    out.push('\n');
    Ok(out)
}

pub fn filter_from_str(text: &str) -> Result<ReidFilter> {
    let h = Header::parse(first_line(text)?, "RID", "RID1")?;
    let projection = match h.str("projection")? {
        "seeded" => Projection::Seeded,
        "identity" => Projection::Identity,
        other => return Err(Error::parse(1, format!("unknown projection `{other}`"))),
    };
    let spec = ExtractorSpec {
        kind: ExtractorKind::Identity,
        in_dim: h.num("in_dim")?,
        out_dim: h.num("out_dim")?,
        block_start: h.num("block_start")?,
        block_len: h.num("block_len")?,
        projection,
        seed: h.num("seed")?,
    };
    let calibration = match h.str("objective")? {
        "none" => None,
        obj => Some(Calibration {
            objective: obj.parse::<ThresholdObjective>().map_err(|_| Error::parse(1, "bad objective"))?,
            heldout_auroc: h.float("auroc")?,
            heldout_fnr: h.float("fnr")?,
            n_fit: h.num("n_fit")?,
            n_heldout: h.num("n_heldout")?,
        }),
    };
    ReidFilter::from_parts(IdentityExtractor::new(spec)?, h.float("tau")?, calibration)
}

pub fn write_filter(path: &Path, filter: &ReidFilter) -> Result<()> {
    Ok(fs::write(path, filter_to_string(filter)?)?)
}

pub fn read_filter(path: &Path) -> Result<ReidFilter> {
    filter_from_str(&read(path)?)
}
