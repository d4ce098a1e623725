//! Line-oriented UTF-8 manifest.
//!
//! ```text
//! # comments and blank lines are ignored
//! @source raster
//! @attribute collar round v_neck square
//! @attribute sleeve short long
//! @ratios 8 1 1
//! @query_fraction 0.2
//! img_0001 split=train 0:1 1:0
//! img_0002 split=val role=query 0:2
//! ```
//!
//! Directives come first. Each record line holds an image id, optional
//! `split=`/`role=` tags and `attribute:value` index pairs.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use super::{
    AnnotationRecord, Assignment, Attribute, AttributeVocabulary, DatasetManifest, ImageSource,
    Role, Split,
};
use crate::error::{Error, Result};

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut attributes = Vec::new();
    let mut source = ImageSource::Raster;
    let mut ratios = None;
    let mut query_fraction = None;
    let mut records: Vec<AnnotationRecord> = Vec::new();
    let mut assignments: Vec<Option<Assignment>> = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut vocab: Option<AttributeVocabulary> = None;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let head = tokens.next().expect("line is non-empty");
        if let Some(directive) = head.strip_prefix('@') {
            if !records.is_empty() {
                return Err(perr(line_no, "directive after the first record"));
            }
            let rest: Vec<&str> = tokens.collect();
            match directive {
                "source" => {
                    source = match rest.as_slice() {
                        ["raster"] => ImageSource::Raster,
                        ["features"] => ImageSource::Features,
                        _ => return Err(perr(line_no, "expected `@source raster|features`")),
                    }
                }
                "attribute" => {
                    let [name, values @ ..] = rest.as_slice() else {
                        return Err(perr(line_no, "attribute needs a name"));
                    };
                    attributes.push(Attribute {
                        name: name.to_string(),
                        values: values.iter().map(|v| v.to_string()).collect(),
                    });
                }
                "ratios" => {
                    let parsed: Vec<f64> = rest
                        .iter()
                        .map(|v| v.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| perr(line_no, format!("bad ratio: {e}")))?;
                    let [a, b, c] = parsed[..] else {
                        return Err(perr(line_no, "expected three ratios"));
                    };
                    ratios = Some([a, b, c]);
                }
                "query_fraction" => {
                    let [v] = rest.as_slice() else {
                        return Err(perr(line_no, "expected one value"));
                    };
                    query_fraction = Some(
                        v.parse::<f64>()
                            .map_err(|e| perr(line_no, format!("bad query fraction: {e}")))?,
                    );
                }
                other => return Err(perr(line_no, format!("unknown directive @{other}"))),
            }
            continue;
        }

        let vocabulary = match &vocab {
            Some(v) => v,
            None => {
                let v = AttributeVocabulary::new(std::mem::take(&mut attributes))
                    .map_err(|e| perr(line_no, e.to_string()))?;
                vocab.insert(v)
            }
        };
        let image_id = head.to_string();
        if !seen_ids.insert(image_id.clone()) {
            return Err(perr(line_no, format!("duplicate image id {image_id}")));
        }
        let mut labels: Vec<(usize, usize)> = Vec::new();
        let mut split = None;
        let mut role = None;
        for tok in tokens {
            if let Some(s) = tok.strip_prefix("split=") {
                split = Some(match s {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    "test" => Split::Test,
                    _ => return Err(perr(line_no, format!("unknown split {s:?}"))),
                });
            } else if let Some(r) = tok.strip_prefix("role=") {
                role = Some(match r {
                    "query" => Role::Query,
                    "candidate" => Role::Candidate,
                    _ => return Err(perr(line_no, format!("unknown role {r:?}"))),
                });
            } else {
                let (a, v) = tok
                    .split_once(':')
                    .ok_or_else(|| perr(line_no, format!("malformed label {tok:?}")))?;
                let a: usize = a
                    .parse()
                    .map_err(|_| perr(line_no, format!("malformed attribute index in {tok:?}")))?;
                let v: usize = v
                    .parse()
                    .map_err(|_| perr(line_no, format!("malformed value index in {tok:?}")))?;
                if a >= vocabulary.len() {
                    return Err(perr(
                        line_no,
                        format!("unknown attribute index {a} for {image_id}"),
                    ));
                }
                if v >= vocabulary.value_count(a) {
                    return Err(perr(
                        line_no,
                        format!("unknown value index {v} of attribute {a} for {image_id}"),
                    ));
                }
                if labels.iter().any(|&(b, _)| b == a) {
                    return Err(perr(
                        line_no,
                        format!("image {image_id} has two values for attribute {a}"),
                    ));
                }
                labels.push((a, v));
            }
        }
        let assignment = match (split, role) {
            (None, None) => None,
            (None, Some(_)) => return Err(perr(line_no, "role without split")),
            (Some(Split::Train), Some(_)) => {
                return Err(perr(line_no, "training images take no role"))
            }
            (Some(s), r) => Some(Assignment { split: s, role: r }),
        };
        labels.sort_unstable();
        records.push(AnnotationRecord { image_id, labels });
        assignments.push(assignment);
    }

    let vocabulary = match vocab {
        Some(v) => v,
        None => AttributeVocabulary::new(attributes).map_err(|e| perr(0, e.to_string()))?,
    };
    let assignments = if assignments.iter().all(Option::is_none) {
        None
    } else if assignments.iter().all(Option::is_some) {
        Some(assignments.into_iter().map(Option::unwrap).collect())
    } else {
        return Err(perr(0, "either every record or none carries a split"));
    };
    Ok(DatasetManifest {
        vocabulary,
        records,
        source,
        assignments,
        ratios,
        query_fraction,
    })
}

pub fn render_manifest(m: &DatasetManifest) -> String {
    let mut out = String::new();
    let source = match m.source {
        ImageSource::Raster => "raster",
        ImageSource::Features => "features",
    };
    writeln!(out, "@source {source}").unwrap();
    for a in m.vocabulary.attributes() {
        writeln!(out, "@attribute {} {}", a.name, a.values.join(" ")).unwrap();
    }
    if let Some([a, b, c]) = m.ratios {
        writeln!(out, "@ratios {a} {b} {c}").unwrap();
    }
    if let Some(q) = m.query_fraction {
        writeln!(out, "@query_fraction {q}").unwrap();
    }
    for (i, r) in m.records.iter().enumerate() {
        out.push_str(&r.image_id);
        if let Some(a) = m.assignment(i) {
            write!(out, " split={}", a.split.as_str()).unwrap();
            if let Some(role) = a.role {
                write!(out, " role={}", role.as_str()).unwrap();
            }
        }
        for (a, v) in &r.labels {
            write!(out, " {a}:{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<()> {
    std::fs::write(path, render_manifest(m)).map_err(|e| Error::io(path, e))
}
