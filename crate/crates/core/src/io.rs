//! File formats: metadata CSV, tensor CSV, and artifact payloads.
//!
//! Metadata CSV: UTF-8, header `domain_id,z1,z2,p,y`, one observation per
//! row. Ingestion enforces the |z1| >= |z2| orientation by swapping
//! (z1, z2, p) -> (z2, z1, 1-p) and logs each swap.
//!
//! Tensor CSV: header `train_ids,target_id,value,flag`, train ids joined
//! with `+`, reals written with 17 significant digits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::meta::{validate_metadata, DomainSample, Lottery, MetaData, Observation, Violation};
use crate::transfer::{TensorEntry, TransferErrorTensor};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("no observations")]
    NoObservations,
    #[error("unexpected header `{0}`")]
    BadHeader(String),
}

/// One orientation swap applied during ingestion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapNote {
    pub line: usize,
    pub domain: String,
}

#[derive(Debug)]
pub struct IngestReport {
    pub meta: MetaData,
    pub swaps: Vec<SwapNote>,
    pub violations: Vec<Violation>,
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Parses the metadata CSV format; applies orientation swaps (logged) and
/// runs validation on the result.
pub fn parse_metadata_csv(text: &str) -> Result<IngestReport, IoError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(IoError::NoObservations)?;
    let header_norm: String = header
        .split(',')
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(",");
    if header_norm != "domain_id,z1,z2,p,y" {
        return Err(IoError::BadHeader(header.to_string()));
    }
    let mut order: Vec<String> = Vec::new();
    let mut by_id: std::collections::HashMap<String, Vec<Observation>> =
        std::collections::HashMap::new();
    let mut swaps = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1; // 1-based
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(IoError::Malformed {
                line,
                message: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let id = fields[0].to_string();
        if id.is_empty() {
            return Err(IoError::Malformed {
                line,
                message: "empty domain_id".into(),
            });
        }
        let parse = |name: &str, s: &str| -> Result<f64, IoError> {
            s.parse::<f64>().map_err(|_| IoError::Malformed {
                line,
                message: format!("cannot parse {name} `{s}`"),
            })
        };
        let z1 = parse("z1", fields[1])?;
        let z2 = parse("z2", fields[2])?;
        let p = parse("p", fields[3])?;
        let y = parse("y", fields[4])?;
        let (lot, swapped) = Lottery::new(z1, z2, p).oriented();
        if swapped {
            swaps.push(SwapNote {
                line,
                domain: id.clone(),
            });
        }
        if !by_id.contains_key(&id) {
            order.push(id.clone());
        }
        by_id.entry(id).or_default().push(Observation::new(lot, y));
    }
    if order.is_empty() {
        return Err(IoError::NoObservations);
    }
    let samples: Vec<DomainSample> = order
        .into_iter()
        .map(|id| {
            let obs = by_id.remove(&id).unwrap();
            DomainSample::new(id, obs)
        })
        .collect();
    let meta = MetaData::new(samples);
    let violations = validate_metadata(&meta);
    Ok(IngestReport {
        meta,
        swaps,
        violations,
    })
}

pub fn metadata_to_csv(meta: &MetaData) -> String {
    let mut out = String::from("domain_id,z1,z2,p,y\n");
    for s in &meta.samples {
        for o in &s.observations {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.id,
                fmt17(o.lottery.z1),
                fmt17(o.lottery.z2),
                fmt17(o.lottery.p),
                fmt17(o.outcome)
            ));
        }
    }
    out
}

pub fn tensor_to_csv(tensor: &TransferErrorTensor) -> String {
    let mut out = String::from("train_ids,target_id,value,flag\n");
    for e in &tensor.entries {
        let train = e
            .train
            .iter()
            .map(|&i| tensor.domain_ids[i].as_str())
            .collect::<Vec<_>>()
            .join("+");
        let value = if e.flag.is_some() {
            String::new()
        } else {
            fmt17(e.value)
        };
        let flag = e.flag.clone().unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            train, tensor.domain_ids[e.target], value, flag
        ));
    }
    out
}

/// Reads a tensor CSV back. Domain ids are indexed in order of first
/// appearance; `rule`, `measure`, and `seed` are not part of the format
/// and must be supplied by the caller.
pub fn tensor_from_csv(
    text: &str,
    rule: String,
    measure: String,
    seed: u64,
) -> Result<TransferErrorTensor, IoError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(IoError::NoObservations)?;
    if header.trim() != "train_ids,target_id,value,flag" {
        return Err(IoError::BadHeader(header.to_string()));
    }
    let mut ids: Vec<String> = Vec::new();
    let mut index = std::collections::HashMap::new();
    let intern = |name: &str,
                  ids: &mut Vec<String>,
                  index: &mut std::collections::HashMap<String, usize>|
     -> usize {
        if let Some(&i) = index.get(name) {
            return i;
        }
        ids.push(name.to_string());
        index.insert(name.to_string(), ids.len() - 1);
        ids.len() - 1
    };
    let mut rows: Vec<(Vec<usize>, usize, f64, Option<String>)> = Vec::new();
    let mut r = 0usize;
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.splitn(4, ',').collect();
        if fields.len() != 4 {
            return Err(IoError::Malformed {
                line,
                message: "expected 4 fields".into(),
            });
        }
        let mut train: Vec<usize> = fields[0]
            .split('+')
            .map(|t| intern(t, &mut ids, &mut index))
            .collect();
        let target = intern(fields[1], &mut ids, &mut index);
        r = train.len();
        train.sort_unstable();
        let flag = if fields[3].is_empty() {
            None
        } else {
            Some(fields[3].to_string())
        };
        let value = if flag.is_some() {
            f64::NAN
        } else {
            fields[2].parse::<f64>().map_err(|_| IoError::Malformed {
                line,
                message: format!("cannot parse value `{}`", fields[2]),
            })?
        };
        rows.push((train, target, value, flag));
    }
    if rows.is_empty() {
        return Err(IoError::NoObservations);
    }
    let entries: Vec<TensorEntry> = rows
        .into_iter()
        .map(|(train, target, value, flag)| TensorEntry {
            train,
            target,
            value,
            flag,
        })
        .collect();
    Ok(TransferErrorTensor {
        n: ids.len(),
        r,
        domain_ids: ids,
        entries,
        rule,
        measure,
        seed,
    })
}
