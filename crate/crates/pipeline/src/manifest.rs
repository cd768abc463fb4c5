//! Per-stage run manifests. A step is skipped when its recorded input
//! digests, parameter digest and output digests all still match.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, Read};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Universe,
    Splits,
    Annotate,
    Distill,
    Eval,
    Analytics,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Universe,
        Stage::Splits,
        Stage::Annotate,
        Stage::Distill,
        Stage::Eval,
        Stage::Analytics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Universe => "universe",
            Stage::Splits => "splits",
            Stage::Annotate => "annotate",
            Stage::Distill => "distill",
            Stage::Eval => "eval",
            Stage::Analytics => "analytics",
        }
    }

    pub fn steps(self) -> &'static [Step] {
        match self {
            Stage::Ingest => &[Step::Ingest],
            Stage::Universe => &[Step::Universe],
            Stage::Splits => &[Step::Splits],
            Stage::Annotate => &[Step::Annotate],
            Stage::Distill => &[Step::Distill, Step::Ensemble],
            Stage::Eval => &[Step::Eval, Step::Census],
            Stage::Analytics => &[Step::Analytics, Step::Audit],
        }
    }
}

/// The unit a CLI verb runs. Several steps can share a stage manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Ingest,
    Universe,
    Splits,
    Annotate,
    Distill,
    Ensemble,
    Eval,
    Census,
    Analytics,
    Audit,
}

impl Step {
    pub const ALL: [Step; 10] = [
        Step::Ingest,
        Step::Universe,
        Step::Splits,
        Step::Annotate,
        Step::Distill,
        Step::Ensemble,
        Step::Eval,
        Step::Census,
        Step::Analytics,
        Step::Audit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::Ingest => "ingest",
            Step::Universe => "universe",
            Step::Splits => "splits",
            Step::Annotate => "annotate",
            Step::Distill => "distill",
            Step::Ensemble => "ensemble",
            Step::Eval => "eval",
            Step::Census => "census",
            Step::Analytics => "analytics",
            Step::Audit => "audit",
        }
    }

    pub fn stage(self) -> Stage {
        match self {
            Step::Ingest => Stage::Ingest,
            Step::Universe => Stage::Universe,
            Step::Splits => Stage::Splits,
            Step::Annotate => Stage::Annotate,
            Step::Distill | Step::Ensemble => Stage::Distill,
            Step::Eval | Step::Census => Stage::Eval,
            Step::Analytics | Step::Audit => Stage::Analytics,
        }
    }

    /// Steps whose outputs this step reads.
    pub fn upstream(self) -> &'static [Step] {
        match self {
            Step::Ingest => &[],
            Step::Universe => &[Step::Ingest],
            Step::Splits => &[Step::Universe],
            Step::Annotate => &[Step::Splits],
            Step::Distill => &[Step::Annotate],
            Step::Ensemble => &[Step::Distill, Step::Splits],
            Step::Eval => &[Step::Ensemble, Step::Annotate],
            Step::Census => &[Step::Eval],
            Step::Analytics => &[Step::Census],
            Step::Audit => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

pub fn digest_file(path: &Path) -> io::Result<FileDigest> {
    let mut hasher = Sha256::new();
    let mut reader = BufReader::new(File::open(path)?);
    let mut buf = [0u8; 64 * 1024];
    let mut bytes = 0u64;
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        bytes += n as u64;
        hasher.update(&buf[..n]);
    }
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex(&hasher.finalize()),
        bytes,
    })
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: Step,
    pub status: Status,
    /// Digest of the configuration the step depends on.
    pub params: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Operational details that are not part of the reproducible output.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

impl StepRecord {
    /// Still valid: complete, same parameters, and every input and output
    /// file unchanged on disk.
    pub fn is_current(&self, params: &str, inputs: &[PathBuf]) -> bool {
        if self.status != Status::Complete || self.params != params {
            return false;
        }
        let recorded: Vec<&Path> = self.inputs.iter().map(|d| d.path.as_path()).collect();
        let wanted: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
        if recorded != wanted {
            return false;
        }
        self.inputs
            .iter()
            .chain(&self.outputs)
            .all(|d| digest_file(&d.path).is_ok_and(|now| now.sha256 == d.sha256))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: Stage,
    pub steps: BTreeMap<Step, StepRecord>,
}

impl RunManifest {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            steps: BTreeMap::new(),
        }
    }

    pub fn path(dir: &Path, stage: Stage) -> PathBuf {
        dir.join(format!("{}.json", stage.name()))
    }

    pub fn load(dir: &Path, stage: Stage) -> io::Result<Option<Self>> {
        let path = Self::path(dir, stage);
        if !path.exists() {
            return Ok(None);
        }
        let m = serde_json::from_reader(BufReader::new(File::open(&path)?)).map_err(io::Error::other)?;
        Ok(Some(m))
    }

    pub fn save(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        std::fs::write(Self::path(dir, self.stage), text + "\n")
    }

    /// Every step of the stage has a complete record.
    pub fn is_complete(&self) -> bool {
        self.stage
            .steps()
            .iter()
            .all(|s| self.steps.get(s).is_some_and(|r| r.status == Status::Complete))
    }

    /// Output digests of all steps, for cross-run comparison.
    pub fn output_digests(&self) -> BTreeMap<String, String> {
        self.steps
            .values()
            .flat_map(|r| &r.outputs)
            .map(|d| {
                (
                    d.path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                    d.sha256.clone(),
                )
            })
            .collect()
    }
}
