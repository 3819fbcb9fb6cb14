use std::fs;
use std::path::Path;

use super::{normalize_timestamps, Quadruple, TkgDataset};
use crate::error::{Result, TkgError};

/// A quadruple as read from disk, before timestamp densification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RawQuadruple {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
    pub time: u64,
}

/// Parses tab-separated `s r o t` lines. A fifth column is ignored, blank
/// lines are skipped.
pub fn parse_quadruples(text: &str) -> Result<Vec<RawQuadruple>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(TkgError::Parse {
                line: line_no,
                message: format!("expected at least 4 tab-separated columns, found {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<u64> {
            fields[i].parse::<u64>().map_err(|_| TkgError::Parse {
                line: line_no,
                message: format!("column {} is not a non-negative integer: `{}`", i + 1, fields[i]),
            })
        };
        out.push(RawQuadruple {
            subject: num(0)? as usize,
            relation: num(1)? as usize,
            object: num(2)? as usize,
            time: num(3)?,
        });
    }
    Ok(out)
}

pub fn parse_quadruple_file(path: &Path) -> Result<Vec<RawQuadruple>> {
    let text = fs::read_to_string(path).map_err(|e| TkgError::io(path, e))?;
    parse_quadruples(&text)
}

/// Reads counts from an optional `stat.txt` (`entities relations [...]`).
fn read_stats(dir: &Path) -> Result<Option<(usize, usize)>> {
    let path = dir.join("stat.txt");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| TkgError::io(&path, e))?;
    let nums: Vec<usize> = text
        .split_whitespace()
        .map(|t| {
            t.parse().map_err(|_| TkgError::Parse {
                line: 1,
                message: format!("stat.txt: `{t}` is not an integer"),
            })
        })
        .collect::<Result<_>>()?;
    match nums.as_slice() {
        [e, r, ..] => Ok(Some((*e, *r))),
        _ => Err(TkgError::Parse {
            line: 1,
            message: "stat.txt needs entity and relation counts".into(),
        }),
    }
}

/// Loads `train.txt`, `valid.txt` and `test.txt` from a directory.
///
/// Timestamps are densified over the union of all three files, so split
/// boundaries are plain indices. Entity and relation counts come from
/// `stat.txt` when present, otherwise from the largest id seen.
pub fn load_dataset_dir(dir: &Path) -> Result<TkgDataset> {
    let parts: Vec<Vec<RawQuadruple>> = ["train.txt", "valid.txt", "test.txt"]
        .iter()
        .map(|f| parse_quadruple_file(&dir.join(f)))
        .collect::<Result<_>>()?;
    let all: Vec<RawQuadruple> = parts.iter().flatten().copied().collect();
    let (quads, num_times) = normalize_timestamps(&all)?;

    let mut offset = 0;
    let mut ranges = Vec::new();
    for p in &parts {
        let q = &quads[offset..offset + p.len()];
        offset += p.len();
        ranges.push((q.iter().map(|q| q.time).min(), q.iter().map(|q| q.time).max()));
    }
    let train_end = ranges[0].1.map_or(0, |m| m + 1);
    let valid_end = ranges[1].1.map_or(train_end, |m| m + 1);
    if ranges[1].0.is_some_and(|v| v < train_end) || ranges[2].0.is_some_and(|t| t < valid_end) {
        return Err(TkgError::contract(
            "splits overlap in time: train < valid < test must hold",
        ));
    }

    let observed_e = quads.iter().map(|q| q.subject.max(q.object) + 1).max().unwrap_or(0);
    let observed_r = quads.iter().map(|q| q.relation + 1).max().unwrap_or(0);
    let (num_entities, num_raw_relations) = match read_stats(dir)? {
        Some((e, r)) => (e.max(observed_e), r.max(observed_r)),
        None => (observed_e, observed_r),
    };
    TkgDataset::from_quadruples(&quads, num_entities, num_raw_relations, num_times, (train_end, valid_end))
}

fn write_quads(path: &Path, quads: &[Quadruple]) -> Result<()> {
    let mut text = String::new();
    for q in quads {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", q.subject, q.relation, q.object, q.time));
    }
    fs::write(path, text).map_err(|e| TkgError::io(path, e))
}

/// Writes the raw edges of each split as TSV (time index as timestamp) plus
/// `stat.txt` with `entities relations timestamps`.
pub fn write_dataset_dir(dataset: &TkgDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| TkgError::io(dir, e))?;
    let (train_end, valid_end) = dataset.split_boundaries;
    let t = dataset.num_times();
    write_quads(&dir.join("train.txt"), &dataset.raw_quadruples(0..train_end))?;
    write_quads(&dir.join("valid.txt"), &dataset.raw_quadruples(train_end..valid_end))?;
    write_quads(&dir.join("test.txt"), &dataset.raw_quadruples(valid_end..t))?;
    let stat = format!("{}\t{}\t{}\n", dataset.num_entities, dataset.num_raw_relations, t);
    let path = dir.join("stat.txt");
    fs::write(&path, stat).map_err(|e| TkgError::io(&path, e))
}
