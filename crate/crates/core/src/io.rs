//! Instance and label file formats.
//!
//! Two interchangeable instance encodings are accepted:
//!
//! - JSONL, one object per line:
//!   `{"frame_id": "f1", "class_id": 0, "confidence": 0.9, "embedding": [..],
//!   "geom": {"l": .., "w": .., "h": .., "vol": .., "rot": .., "pts": ..}}`.
//!   An optional integer `instance` key names the detection within its frame;
//!   without it detections are numbered in order of appearance.
//! - CSV with header `frame_id,class_id,confidence,e0..e{D-1},l,w,h,vol,rot,pts`.
//!
//! Labels are a plain list of frame ids, one per line. In every format blank
//! lines and lines starting with `#` are skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{FrameId, FramePool, GeometricFeatures, InstanceRecord, PoolError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    /// `.csv` selects CSV; anything else is read as JSONL.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Jsonl,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ParseOptions {
    /// Number of classes. When absent it is inferred as `max(class_id) + 1`.
    pub class_count: Option<usize>,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("embedding dimension {found}, expected {expected}")]
    EmbeddingDim { expected: usize, found: usize },
    #[error("embedding dimension {0} is below 2")]
    EmbeddingTooSmall(usize),
    #[error("non-finite value in `{0}`")]
    NonFinite(&'static str),
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("unknown class_id {0}")]
    UnknownClass(i64),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("duplicate instance {instance} in frame `{frame}`")]
    DuplicateInstance { frame: FrameId, instance: u32 },
}

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("no records")]
    NoRecords,
    #[error("line {line}: {source}")]
    Record { line: u64, source: RecordError },
    #[error("labels: frame `{0}` does not appear in the instance file")]
    UnknownLabeledFrame(FrameId),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ParseError {
    fn at(line: u64, source: RecordError) -> Self {
        ParseError::Record { line, source }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    frame_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    instance: Option<u32>,
    class_id: i64,
    confidence: f64,
    embedding: Vec<f64>,
    geom: JsonGeom,
}

#[derive(Serialize, Deserialize)]
struct JsonGeom {
    l: f64,
    w: f64,
    h: f64,
    vol: f64,
    rot: f64,
    pts: f64,
}

/// A record as read, before class-count validation.
struct RawRecord {
    line: u64,
    frame_id: FrameId,
    instance: Option<u32>,
    class_id: i64,
    confidence: f64,
    embedding: Vec<f64>,
    geometry: GeometricFeatures,
}

/// Reads an instance stream into a pool whose labeled set is `labeled`.
pub fn parse_instances<R: Read>(
    reader: R,
    format: Format,
    labeled: &BTreeSet<FrameId>,
    options: &ParseOptions,
) -> Result<FramePool, ParseError> {
    let raw = match format {
        Format::Jsonl => read_jsonl(reader)?,
        Format::Csv => read_csv(reader)?,
    };
    build_pool(raw, labeled, options)
}

/// Reads a labels file: one frame id per line.
pub fn parse_labels<R: Read>(reader: R) -> Result<BTreeSet<FrameId>, ParseError> {
    let mut labels = BTreeSet::new();
    for line in BufReader::new(reader).lines() {
        let line = line?;
        let id = line.trim();
        if id.is_empty() || id.starts_with('#') {
            continue;
        }
        labels.insert(FrameId::new(id));
    }
    Ok(labels)
}

fn read_jsonl<R: Read>(reader: R) -> Result<Vec<RawRecord>, ParseError> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let lineno = idx as u64 + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(trimmed)
            .map_err(|e| ParseError::at(lineno, RecordError::Malformed(e.to_string())))?;
        out.push(RawRecord {
            line: lineno,
            frame_id: FrameId::new(rec.frame_id),
            instance: rec.instance,
            class_id: rec.class_id,
            confidence: rec.confidence,
            embedding: rec.embedding,
            geometry: GeometricFeatures {
                length: rec.geom.l,
                width: rec.geom.w,
                height: rec.geom.h,
                volume: rec.geom.vol,
                rotation: rec.geom.rot,
                point_density: rec.geom.pts,
            },
        });
    }
    Ok(out)
}

const GEOM_COLUMNS: [&str; 6] = ["l", "w", "h", "vol", "rot", "pts"];

fn read_csv<R: Read>(reader: R) -> Result<Vec<RawRecord>, ParseError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| ParseError::at(1, RecordError::Malformed(e.to_string())))?
        .clone();
    let header_line = rdr.position().line().max(1);
    let embedding_dim = check_csv_header(&header).map_err(|m| ParseError::at(header_line, RecordError::Malformed(m)))?;

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            ParseError::at(line, RecordError::Malformed(e.to_string()))
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64, ParseError> {
            row[i].parse::<f64>().map_err(|_| {
                ParseError::at(
                    line,
                    RecordError::Malformed(format!("column `{}`: `{}` is not a number", &header[i], &row[i])),
                )
            })
        };
        let class_id = row[1].parse::<i64>().map_err(|_| {
            ParseError::at(line, RecordError::Malformed(format!("class_id `{}` is not an integer", &row[1])))
        })?;
        let embedding = (0..embedding_dim).map(|d| num(3 + d)).collect::<Result<Vec<_>, _>>()?;
        let g = 3 + embedding_dim;
        out.push(RawRecord {
            line,
            frame_id: FrameId::new(&row[0]),
            instance: None,
            class_id,
            confidence: num(2)?,
            embedding,
            geometry: GeometricFeatures {
                length: num(g)?,
                width: num(g + 1)?,
                height: num(g + 2)?,
                volume: num(g + 3)?,
                rotation: num(g + 4)?,
                point_density: num(g + 5)?,
            },
        });
    }
    Ok(out)
}

/// Returns the embedding dimension announced by a CSV header.
fn check_csv_header(header: &csv::StringRecord) -> Result<usize, String> {
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 + 2 + GEOM_COLUMNS.len() {
        return Err(format!("header has {} columns, too few", cols.len()));
    }
    if cols[..3] != ["frame_id", "class_id", "confidence"] {
        return Err("header must start with frame_id,class_id,confidence".into());
    }
    let dim = cols.len() - 3 - GEOM_COLUMNS.len();
    for d in 0..dim {
        if cols[3 + d] != format!("e{d}") {
            return Err(format!("expected column `e{d}`, found `{}`", cols[3 + d]));
        }
    }
    if cols[3 + dim..] != GEOM_COLUMNS {
        return Err("header must end with l,w,h,vol,rot,pts".into());
    }
    Ok(dim)
}

fn build_pool(
    raw: Vec<RawRecord>,
    labeled: &BTreeSet<FrameId>,
    options: &ParseOptions,
) -> Result<FramePool, ParseError> {
    let first = raw.first().ok_or(ParseError::NoRecords)?;
    let dim = first.embedding.len();
    if dim < 2 {
        return Err(ParseError::at(first.line, RecordError::EmbeddingTooSmall(dim)));
    }
    let class_count = match options.class_count {
        Some(c) => c,
        None => raw.iter().map(|r| r.class_id.max(0) as usize + 1).max().unwrap_or(1),
    };

    let mut frames: BTreeMap<FrameId, Vec<InstanceRecord>> = BTreeMap::new();
    let mut next_slot: BTreeMap<FrameId, u32> = BTreeMap::new();
    let mut seen: BTreeSet<(FrameId, u32)> = BTreeSet::new();
    for r in raw {
        let fail = |e| Err(ParseError::at(r.line, e));
        if r.embedding.len() != dim {
            return fail(RecordError::EmbeddingDim {
                expected: dim,
                found: r.embedding.len(),
            });
        }
        if r.embedding.iter().any(|v| !v.is_finite()) {
            return fail(RecordError::NonFinite("embedding"));
        }
        if !r.confidence.is_finite() || !(0.0..=1.0).contains(&r.confidence) {
            return fail(RecordError::Confidence(r.confidence));
        }
        if r.class_id < 0 || r.class_id as usize >= class_count {
            return fail(RecordError::UnknownClass(r.class_id));
        }
        if let Err(reason) = r.geometry.validate() {
            return fail(RecordError::Geometry(reason));
        }
        let slot = next_slot.entry(r.frame_id.clone()).or_insert(0);
        let instance = r.instance.unwrap_or(*slot);
        *slot = slot.saturating_add(1).max(instance.saturating_add(1));
        if !seen.insert((r.frame_id.clone(), instance)) {
            return fail(RecordError::DuplicateInstance {
                frame: r.frame_id,
                instance,
            });
        }
        frames.entry(r.frame_id.clone()).or_default().push(InstanceRecord {
            frame_id: r.frame_id,
            instance,
            class_id: r.class_id as usize,
            confidence: r.confidence,
            embedding: r.embedding,
            geometry: r.geometry,
        });
    }
    if let Some(missing) = labeled.iter().find(|id| !frames.contains_key(*id)) {
        return Err(ParseError::UnknownLabeledFrame(missing.clone()));
    }
    Ok(FramePool::new(frames, labeled.clone(), class_count, 0)?)
}

/// Writes every instance as JSONL, frames in canonical order.
pub fn write_jsonl<W: Write>(pool: &FramePool, mut out: W) -> std::io::Result<()> {
    for (_, r) in pool.instances() {
        let g = &r.geometry;
        let rec = JsonRecord {
            frame_id: r.frame_id.as_str().to_owned(),
            instance: Some(r.instance),
            class_id: r.class_id as i64,
            confidence: r.confidence,
            embedding: r.embedding.clone(),
            geom: JsonGeom {
                l: g.length,
                w: g.width,
                h: g.height,
                vol: g.volume,
                rot: g.rotation,
                pts: g.point_density,
            },
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes every instance as CSV. Instance indices are not representable in
/// CSV; re-reading renumbers detections in order of appearance.
pub fn write_csv<W: Write>(pool: &FramePool, out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["frame_id".to_owned(), "class_id".to_owned(), "confidence".to_owned()];
    header.extend((0..pool.embedding_dim()).map(|d| format!("e{d}")));
    header.extend(GEOM_COLUMNS.iter().map(|s| (*s).to_owned()));
    w.write_record(&header)?;
    for (_, r) in pool.instances() {
        let mut row = vec![r.frame_id.to_string(), r.class_id.to_string(), r.confidence.to_string()];
        row.extend(r.embedding.iter().map(f64::to_string));
        row.extend(r.geometry.to_array().iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the labeled frame ids, one per line, sorted.
pub fn write_labels<W: Write>(pool: &FramePool, mut out: W) -> std::io::Result<()> {
    for id in pool.labeled() {
        writeln!(out, "{id}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(frame: &str, class: i64, conf: &str) -> String {
        format!(
            r#"{{"frame_id":"{frame}","class_id":{class},"confidence":{conf},"embedding":[1.5e0,-2E-1],"geom":{{"l":4,"w":1.8,"h":1.5,"vol":10.8,"rot":0.3,"pts":120}}}}"#
        )
    }

    fn labels(ids: &[&str]) -> BTreeSet<FrameId> {
        ids.iter().map(|s| FrameId::from(*s)).collect()
    }

    #[test]
    fn empty_stream_is_an_error() {
        let err = parse_instances("".as_bytes(), Format::Jsonl, &BTreeSet::new(), &ParseOptions::default());
        assert!(matches!(err, Err(ParseError::NoRecords)));
        assert_eq!(err.unwrap_err().to_string(), "no records");
    }

    #[test]
    fn groups_by_frame() {
        let text = [line("f1", 0, "0.9"), line("f1", 1, "0.4"), line("f2", 0, "0.7")].join("\n");
        let pool = parse_instances(text.as_bytes(), Format::Jsonl, &labels(&["f2"]), &ParseOptions::default()).unwrap();
        assert_eq!(pool.unlabeled().collect::<Vec<_>>(), vec![&FrameId::from("f1")]);
        assert_eq!(pool.frame(&"f1".into()).unwrap().len(), 2);
        assert_eq!(pool.frame(&"f2".into()).unwrap().len(), 1);
        assert!(pool.is_labeled(&"f2".into()));
        assert_eq!(pool.class_count(), 2);
        assert_eq!(pool.frame(&"f1".into()).unwrap()[0].embedding, vec![1.5, -0.2]);
    }

    #[test]
    fn confidence_out_of_range_names_the_line() {
        let text = [line("f1", 0, "0.9"), line("f1", 0, "1.3")].join("\n");
        let err = parse_instances(text.as_bytes(), Format::Jsonl, &BTreeSet::new(), &ParseOptions::default())
            .unwrap_err();
        assert!(matches!(err, ParseError::Record { line: 2, source: RecordError::Confidence(_) }));
        assert!(err.to_string().starts_with("line 2:"), "{err}");
    }

    #[test]
    fn malformed_and_inconsistent_lines() {
        let text = format!("{}\n\n{{not json", line("f1", 0, "0.9"));
        let err = parse_instances(text.as_bytes(), Format::Jsonl, &BTreeSet::new(), &ParseOptions::default())
            .unwrap_err();
        assert!(matches!(err, ParseError::Record { line: 3, source: RecordError::Malformed(_) }));

        let bad_dim = line("f2", 0, "0.5").replace("[1.5e0,-2E-1]", "[1,2,3]");
        let text = format!("{}\n{bad_dim}", line("f1", 0, "0.9"));
        let err = parse_instances(text.as_bytes(), Format::Jsonl, &BTreeSet::new(), &ParseOptions::default())
            .unwrap_err();
        assert!(matches!(err, ParseError::Record { line: 2, source: RecordError::EmbeddingDim { .. } }));

        let opts = ParseOptions { class_count: Some(2) };
        let err = parse_instances(line("f1", 2, "0.5").as_bytes(), Format::Jsonl, &BTreeSet::new(), &opts)
            .unwrap_err();
        assert!(matches!(err, ParseError::Record { source: RecordError::UnknownClass(2), .. }));
        let err = parse_instances(line("f1", -1, "0.5").as_bytes(), Format::Jsonl, &BTreeSet::new(), &opts)
            .unwrap_err();
        assert!(matches!(err, ParseError::Record { source: RecordError::UnknownClass(-1), .. }));
    }

    #[test]
    fn duplicate_instance_index_rejected() {
        let a = line("f1", 0, "0.9").replacen('{', r#"{"instance":3,"#, 1);
        let text = format!("{a}\n{a}");
        let err = parse_instances(text.as_bytes(), Format::Jsonl, &BTreeSet::new(), &ParseOptions::default())
            .unwrap_err();
        assert!(matches!(err, ParseError::Record { line: 2, source: RecordError::DuplicateInstance { .. } }));
    }

    #[test]
    fn unknown_labeled_frame() {
        let err = parse_instances(line("f1", 0, "0.9").as_bytes(), Format::Jsonl, &labels(&["zz"]), &ParseOptions::default())
            .unwrap_err();
        assert!(matches!(err, ParseError::UnknownLabeledFrame(_)));
    }

    #[test]
    fn csv_with_scientific_notation() {
        let text = "# comment\nframe_id,class_id,confidence,e0,e1,e2,l,w,h,vol,rot,pts\n\
                    a,0,9e-1,1,2,3e2,4,2,1.5,12,0,1E2\n\
                    a,1,0.5,1,2,3,4,2,1.5,12,-0.1,0\n";
        let pool = parse_instances(text.as_bytes(), Format::Csv, &BTreeSet::new(), &ParseOptions::default()).unwrap();
        let recs = pool.frame(&"a".into()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].confidence, 0.9);
        assert_eq!(recs[0].embedding, vec![1.0, 2.0, 300.0]);
        assert_eq!(recs[0].geometry.point_density, 100.0);
        assert_eq!(recs[1].instance, 1);

        let bad = "frame_id,class_id,confidence,e0,e1,l,w,h,vol,rot,pts\na,0,0.5,1,x,4,2,1.5,12,0,1\n";
        let err = parse_instances(bad.as_bytes(), Format::Csv, &BTreeSet::new(), &ParseOptions::default())
            .unwrap_err();
        assert!(matches!(err, ParseError::Record { line: 2, .. }), "{err}");

        let bad_header = "frame_id,class_id,confidence,e1,e0,l,w,h,vol,rot,pts\n";
        assert!(parse_instances(bad_header.as_bytes(), Format::Csv, &BTreeSet::new(), &ParseOptions::default()).is_err());
    }

    #[test]
    fn labels_file_skips_blanks_and_comments() {
        let got = parse_labels("# labeled\nf2\n\n  f1  \n".as_bytes()).unwrap();
        assert_eq!(got, labels(&["f1", "f2"]));
    }
}
