//! Run manifests: what was run, on which data, with which resolved config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tkg_core::data::TkgDataset;
use tkg_core::training::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct DatasetInfo {
    /// Directory path, or `synth` for the built-in synthetic dataset.
    pub source: String,
    /// SHA-256 of the canonical quadruple listing.
    pub fingerprint: String,
    pub num_entities: usize,
    pub num_raw_relations: usize,
    pub num_timestamps: usize,
    pub split_boundaries: (usize, usize),
}

impl DatasetInfo {
    pub fn new(source: impl Into<String>, ds: &TkgDataset) -> Self {
        DatasetInfo {
            source: source.into(),
            fingerprint: fingerprint(ds),
            num_entities: ds.num_entities,
            num_raw_relations: ds.num_raw_relations,
            num_timestamps: ds.num_times(),
            split_boundaries: ds.split_boundaries,
        }
    }
}

/// Content hash independent of file layout: sizes, split boundaries and
/// every raw quadruple in snapshot order.
pub fn fingerprint(ds: &TkgDataset) -> String {
    let mut h = Sha256::new();
    h.update(format!(
        "entities {}\nrelations {}\ntimestamps {}\nsplit {} {}\n",
        ds.num_entities,
        ds.num_raw_relations,
        ds.num_times(),
        ds.split_boundaries.0,
        ds.split_boundaries.1
    ));
    for q in ds.raw_quadruples(0..ds.num_times()) {
        h.update(format!("{}\t{}\t{}\t{}\n", q.subject, q.relation, q.object, q.time));
    }
    format!("{:x}", h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    DryRun,
    Ok,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Resolved configuration, after preset, file and flags.
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub dataset: Option<DatasetInfo>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
    pub status: RunStatus,
    pub outputs: BTreeMap<String, PathBuf>,
    #[serde(skip)]
    path: PathBuf,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

impl RunManifest {
    /// Creates `out_dir` and writes a running manifest into it.
    pub fn begin(command: &str, out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        Ok(RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: BTreeMap::new(),
            seed: None,
            dataset: None,
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
            status: RunStatus::Running,
            outputs: BTreeMap::new(),
            path: out_dir.join(MANIFEST_FILE),
        })
    }

    pub fn with_config(mut self, config: &TrainConfig) -> Self {
        self.config = config
            .to_map()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        self.seed = Some(config.seed);
        self
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.to_string(), path.to_path_buf());
    }

    pub fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&self.path, text + "\n").with_context(|| format!("writing {}", self.path.display()))
    }

    pub fn finish(&mut self, status: RunStatus) -> Result<()> {
        self.status = status;
        self.finished_unix_ms = Some(now_ms());
        self.write()
    }
}
