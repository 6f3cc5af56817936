//! Dataset bundles: `manifest.json`, `observations.csv`, `ground_truth.csv`.
//!
//! Floats are written in Rust's shortest round-trip form (`{:?}`), so every
//! value reads back bit-identical. The manifest is pretty-printed JSON with
//! sorted keys and records the SHA-256 of both data files; the bundle hash
//! is the SHA-256 of the manifest bytes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baseline::EvalReport;
use crate::dsl::parse_system;
use crate::generator::{materialize_dataset, Dataset, DatasetMetadata, GenerateError, GeneratorConfig, ImtsInstance, Observation};
use crate::rng::RNG_ALGORITHM;
use crate::solver::regular_grid;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} already exists (use --force to overwrite)")]
    AlreadyExists(PathBuf),
    #[error("unsupported bundle format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u64 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("{file}: hash mismatch (manifest {expected}, file {actual})")]
    HashMismatch { file: &'static str, expected: String, actual: String },
    #[error("{file}: {message}")]
    Consistency { file: &'static str, message: String },
    #[error("bundle was generated with RNG `{found}`, this build uses `{RNG_ALGORITHM}`; regeneration cannot be verified")]
    RngMismatch { found: String },
    #[error("regeneration failed: {0}")]
    Regenerate(#[from] GenerateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InstanceRecord {
    id: usize,
    seed: u64,
    attempt: u64,
    onset: usize,
    initial: Vec<f64>,
    constants: Vec<f64>,
    duration: f64,
    observations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FileRecord {
    sha256: String,
    rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u64,
    metadata: DatasetMetadata,
    instances: Vec<InstanceRecord>,
    files: std::collections::BTreeMap<String, FileRecord>,
}

/// Serialized bundle contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleFiles {
    pub manifest: Vec<u8>,
    pub observations: Vec<u8>,
    pub ground_truth: Vec<u8>,
}

impl BundleFiles {
    pub fn manifest_hash(&self) -> String {
        sha256_hex(&self.manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn render_bundle(dataset: &Dataset) -> BundleFiles {
    let channels = dataset.metadata.channels;
    let mut obs = String::from("instance_id,t,channel,value\n");
    let mut gt = String::from("instance_id,step,channel,value\n");
    let (mut obs_rows, mut gt_rows) = (0, 0);
    for inst in &dataset.instances {
        for o in &inst.observations {
            writeln!(obs, "{},{:?},{},{:?}", inst.id, o.t, o.channel, o.value).unwrap();
            obs_rows += 1;
        }
        for (k, row) in inst.ground_truth.chunks(channels).enumerate() {
            for (c, v) in row.iter().enumerate() {
                writeln!(gt, "{},{},{},{:?}", inst.id, k, c, v).unwrap();
                gt_rows += 1;
            }
        }
    }
    let files = [
        (OBSERVATIONS_FILE.to_string(), FileRecord { sha256: sha256_hex(obs.as_bytes()), rows: obs_rows }),
        (GROUND_TRUTH_FILE.to_string(), FileRecord { sha256: sha256_hex(gt.as_bytes()), rows: gt_rows }),
    ]
    .into_iter()
    .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION as u64,
        metadata: dataset.metadata.clone(),
        instances: dataset
            .instances
            .iter()
            .map(|i| InstanceRecord {
                id: i.id,
                seed: i.seed,
                attempt: i.attempt,
                onset: i.onset,
                initial: i.initial.clone(),
                constants: i.constants.clone(),
                duration: i.duration,
                observations: i.observations.len(),
            })
            .collect(),
        files,
    };
    // Round-tripping through `Value` sorts every object's keys.
    let value = serde_json::to_value(&manifest).expect("manifest serializes");
    let mut text = serde_json::to_string_pretty(&value).expect("manifest serializes");
    text.push('\n');
    BundleFiles { manifest: text.into_bytes(), observations: obs.into_bytes(), ground_truth: gt.into_bytes() }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// Writes the bundle into `dir` (created if missing) and returns the
/// manifest hash. Existing bundle files are only replaced with `force`.
pub fn write_bundle(dataset: &Dataset, dir: &Path, force: bool) -> Result<String, IoError> {
    let files = render_bundle(dataset);
    if !force {
        for name in [MANIFEST_FILE, OBSERVATIONS_FILE, GROUND_TRUTH_FILE] {
            let p = dir.join(name);
            if p.exists() {
                return Err(IoError::AlreadyExists(p));
            }
        }
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, bytes) in [
        (OBSERVATIONS_FILE, &files.observations),
        (GROUND_TRUTH_FILE, &files.ground_truth),
        (MANIFEST_FILE, &files.manifest),
    ] {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))?;
    }
    Ok(files.manifest_hash())
}

fn read(dir: &Path, name: &str) -> Result<Vec<u8>, IoError> {
    let p = dir.join(name);
    fs::read(&p).map_err(io_err(&p))
}

fn parse_manifest(bytes: &[u8]) -> Result<Manifest, IoError> {
    let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| IoError::Manifest(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| IoError::Manifest("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(IoError::Version { found: version });
    }
    serde_json::from_value(value).map_err(|e| IoError::Manifest(e.to_string()))
}

fn check_hash(manifest: &Manifest, file: &'static str, bytes: &[u8]) -> Result<(), IoError> {
    let expected = manifest
        .files
        .get(file)
        .ok_or_else(|| IoError::Manifest(format!("no entry for {file}")))?
        .sha256
        .clone();
    let actual = sha256_hex(bytes);
    if expected != actual {
        return Err(IoError::HashMismatch { file, expected, actual });
    }
    Ok(())
}

/// Parses `a,b,c,value` rows after checking the header.
fn rows(file: &'static str, bytes: &[u8], header: &[&str]) -> Result<Vec<(usize, String, usize, f64)>, IoError> {
    let bad = |message: String| IoError::Consistency { file, message };
    let mut reader = csv::ReaderBuilder::new().from_reader(bytes);
    let found: Vec<String> = reader.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    if found != header {
        return Err(bad(format!("expected header {}, found {}", header.join(","), found.join(","))));
    }
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let parse_err = |what: &str| bad(format!("row {}: invalid {what}", line + 2));
        if rec.len() != 4 {
            return Err(parse_err("field count"));
        }
        out.push((
            rec[0].parse().map_err(|_| parse_err(header[0]))?,
            rec[1].to_string(),
            rec[2].parse().map_err(|_| parse_err("channel"))?,
            rec[3].parse().map_err(|_| parse_err("value"))?,
        ));
    }
    Ok(out)
}

pub fn read_bundle(dir: &Path) -> Result<Dataset, IoError> {
    let manifest = parse_manifest(&read(dir, MANIFEST_FILE)?)?;
    let obs_bytes = read(dir, OBSERVATIONS_FILE)?;
    let gt_bytes = read(dir, GROUND_TRUTH_FILE)?;
    check_hash(&manifest, OBSERVATIONS_FILE, &obs_bytes)?;
    check_hash(&manifest, GROUND_TRUTH_FILE, &gt_bytes)?;

    let meta = manifest.metadata;
    let channels = meta.channels;
    let window = meta.dataset.window_steps;
    let index: HashMap<usize, usize> = manifest.instances.iter().enumerate().map(|(k, r)| (r.id, k)).collect();
    let mut instances: Vec<ImtsInstance> = manifest
        .instances
        .iter()
        .map(|r| ImtsInstance {
            id: r.id,
            seed: r.seed,
            attempt: r.attempt,
            onset: r.onset,
            initial: r.initial.clone(),
            constants: r.constants.clone(),
            duration: r.duration,
            observations: Vec::with_capacity(r.observations),
            ground_truth: vec![f64::NAN; window * channels],
        })
        .collect();

    let gt_err = |message: String| IoError::Consistency { file: GROUND_TRUTH_FILE, message };
    let gt_rows = rows(GROUND_TRUTH_FILE, &gt_bytes, &["instance_id", "step", "channel", "value"])?;
    if gt_rows.len() != instances.len() * window * channels {
        return Err(gt_err(format!("{} rows, expected {}", gt_rows.len(), instances.len() * window * channels)));
    }
    for (id, step, c, v) in gt_rows {
        let k = *index.get(&id).ok_or_else(|| gt_err(format!("unknown instance {id}")))?;
        let step: usize = step.parse().map_err(|_| gt_err(format!("invalid step `{step}`")))?;
        if step >= window || c >= channels {
            return Err(gt_err(format!("cell ({step}, {c}) outside the window")));
        }
        instances[k].ground_truth[step * channels + c] = v;
    }
    if instances.iter().any(|i| i.ground_truth.iter().any(|v| v.is_nan())) {
        return Err(gt_err("missing ground-truth cells".into()));
    }

    let obs_err = |message: String| IoError::Consistency { file: OBSERVATIONS_FILE, message };
    let steps: Vec<HashMap<u64, usize>> = instances
        .iter()
        .map(|i| {
            regular_grid(i.duration, meta.dataset.grid_steps)[i.onset..i.onset + window]
                .iter()
                .enumerate()
                .map(|(k, t)| (t.to_bits(), k))
                .collect()
        })
        .collect();
    for (id, t, c, value) in rows(OBSERVATIONS_FILE, &obs_bytes, &["instance_id", "t", "channel", "value"])? {
        let k = *index.get(&id).ok_or_else(|| obs_err(format!("unknown instance {id}")))?;
        let t: f64 = t.parse().map_err(|_| obs_err(format!("invalid time `{t}`")))?;
        let step = *steps[k]
            .get(&t.to_bits())
            .ok_or_else(|| obs_err(format!("instance {id}: time {t:?} is not on the window grid")))?;
        if c >= channels {
            return Err(obs_err(format!("instance {id}: channel {c} out of range")));
        }
        instances[k].observations.push(Observation { step, t, channel: c, value });
    }
    for (inst, rec) in instances.iter().zip(&manifest.instances) {
        if inst.observations.len() != rec.observations {
            return Err(obs_err(format!(
                "instance {}: {} observations, manifest says {}",
                inst.id,
                inst.observations.len(),
                rec.observations
            )));
        }
    }
    Ok(Dataset { metadata: meta, instances })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    pub recorded: String,
    pub regenerated: String,
}

impl Verification {
    pub fn matches(&self) -> bool {
        self.recorded == self.regenerated
    }
}

/// Regenerates the bundle from its manifest alone and compares manifest
/// hashes.
pub fn verify_bundle(dir: &Path) -> Result<Verification, IoError> {
    let manifest_bytes = read(dir, MANIFEST_FILE)?;
    let manifest = parse_manifest(&manifest_bytes)?;
    let meta = manifest.metadata;
    if meta.rng_algorithm != RNG_ALGORITHM {
        return Err(IoError::RngMismatch { found: meta.rng_algorithm });
    }
    let spec = parse_system(&meta.system_source).map_err(|e| IoError::Manifest(format!("system source: {e}")))?;
    let gen = GeneratorConfig {
        system: meta.system.clone(),
        spread: meta.spread,
        initial_law: meta.initial_law.clone(),
        protocol: meta.protocol,
        master_seed: meta.eval_seed,
    };
    let mut dataset = materialize_dataset(&spec, &gen, &meta.dataset, meta.solver)?;
    dataset.metadata.system = meta.system;
    dataset.metadata.split_fraction = meta.split_fraction;
    Ok(Verification { recorded: sha256_hex(&manifest_bytes), regenerated: render_bundle(&dataset).manifest_hash() })
}

/// Plot-ready per-fold CSV rows: `dataset,baseline,fold,mse`.
pub fn eval_csv(dataset: &str, report: &EvalReport, header: bool) -> String {
    let mut out = String::new();
    if header {
        out.push_str("dataset,baseline,fold,mse\n");
    }
    for f in &report.folds {
        writeln!(out, "{dataset},{},{},{:?}", f.baseline, f.fold, f.mse).unwrap();
    }
    out
}
