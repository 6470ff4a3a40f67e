//! On-disk formats. Field names are frozen in FORMATS.md.
//!
//! Structured documents are pretty-printed JSON; per-image records are JSON
//! lines preceded by a header line; tabular data is CSV preceded by a
//! `# format_version` comment. Every header carries `format_version`, and
//! readers refuse any major version other than [`FORMAT_MAJOR`].

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{EvaluationReport, PrPoint};
use crate::pipeline::ImageDetections;
use crate::pseudolabel::{PseudoLabel, TauObj};
use crate::rejection::RejectionConfig;
use crate::sim::{
    ImageRecord, ImagePseudoLabels, PseudoLabelPass, Scenario, ScenarioConfig, Split, ToyDetector,
    TraceEntry, TrainConfig,
};

pub const FORMAT_VERSION: &str = "1.0";
pub const FORMAT_MAJOR: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const PSEUDO_LABEL_FILE: &str = "pseudo_labels.jsonl";
pub const TRACE_FILE: &str = "trace.csv";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const PR_CURVES_FILE: &str = "pr_curves.csv";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, message: impl ToString) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Accepts `found` when its major component is [`FORMAT_MAJOR`].
pub fn check_version(path: &Path, found: &str) -> Result<()> {
    let major = found.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major == Some(FORMAT_MAJOR) {
        Ok(())
    } else {
        Err(Error::FormatVersion {
            path: path.to_path_buf(),
            found: found.to_string(),
            expected: FORMAT_MAJOR,
        })
    }
}

fn version_of(path: &Path, value: &serde_json::Value) -> Result<()> {
    match value.get("format_version").and_then(|v| v.as_str()) {
        Some(v) => check_version(path, v),
        None => Err(format_err(path, "missing format_version")),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON encoding of a scenario configuration.
pub fn config_hash(config: &ScenarioConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("scenario config serializes"))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes a pretty-printed JSON document with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Reads a versioned JSON document; the version is checked before the body
/// is interpreted, so an unknown major surfaces as such.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let value: serde_json::Value =
        serde_json::from_str(&read_text(path)?).map_err(|e| format_err(path, e))?;
    version_of(path, &value)?;
    serde_json::from_value(value).map_err(|e| format_err(path, e))
}

fn push_line<T: Serialize>(buf: &mut Vec<u8>, value: &T) -> serde_json::Result<()> {
    serde_json::to_writer(&mut *buf, value)?;
    buf.push(b'\n');
    Ok(())
}

pub fn write_jsonl<H: Serialize, T: Serialize>(path: &Path, header: &H, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    push_line(&mut buf, header).map_err(|e| format_err(path, e))?;
    for r in rows {
        push_line(&mut buf, r).map_err(|e| format_err(path, e))?;
    }
    write_bytes(path, &buf)
}

pub fn read_jsonl<H: DeserializeOwned, T: DeserializeOwned>(path: &Path) -> Result<(H, Vec<T>)> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| format_err(path, "empty file, expected a header line"))?
        .map_err(io_err(path))?;
    let header: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| format_err(path, format!("header: {e}")))?;
    version_of(path, &header)?;
    let header = serde_json::from_value(header).map_err(|e| format_err(path, format!("header: {e}")))?;
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| format_err(path, format!("line {}: {e}", n + 2)))?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Seeds that produced an artifact, outermost first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedChain {
    pub scenario: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: ScenarioConfig,
    pub train_images: usize,
    pub test_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitHeader {
    pub format_version: String,
    pub split: Split,
    pub seed: u64,
    pub config_hash: String,
    pub images: usize,
}

/// Writes `manifest.json`, `train.jsonl` and `test.jsonl` into `dir`.
pub fn write_scenario(dir: &Path, scenario: &Scenario) -> Result<Manifest> {
    create_dir(dir)?;
    let hash = config_hash(&scenario.config);
    let seed = scenario.config.seed;
    for (split, file, images) in [
        (Split::Train, TRAIN_FILE, &scenario.train),
        (Split::Test, TEST_FILE, &scenario.test),
    ] {
        let header = SplitHeader {
            format_version: FORMAT_VERSION.into(),
            split,
            seed,
            config_hash: hash.clone(),
            images: images.len(),
        };
        write_jsonl(&dir.join(file), &header, images)?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION.into(),
        seed,
        config_hash: hash,
        config: scenario.config.clone(),
        train_images: scenario.train.len(),
        test_images: scenario.test.len(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads a scenario directory, checking that every split belongs to the
/// manifest.
pub fn read_scenario(dir: &Path) -> Result<(Manifest, Scenario)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = read_json(&manifest_path)?;
    manifest.config.validate()?;
    let recomputed = config_hash(&manifest.config);
    if recomputed != manifest.config_hash {
        return Err(format_err(
            &manifest_path,
            format!("config_hash {} does not match config ({recomputed})", manifest.config_hash),
        ));
    }
    let load = |file: &str, split: Split, expected: usize| -> Result<Vec<ImageRecord>> {
        let path = dir.join(file);
        let (header, images): (SplitHeader, Vec<ImageRecord>) = read_jsonl(&path)?;
        if header.config_hash != manifest.config_hash {
            return Err(Error::ManifestMismatch {
                left: manifest.config_hash.clone(),
                right: header.config_hash,
            });
        }
        if header.split != split || images.len() != expected || header.images != expected {
            return Err(format_err(&path, format!("expected {expected} {split:?} images")));
        }
        for img in &images {
            for r in &img.regions {
                if r.features.len() != manifest.config.feature_dim {
                    return Err(Error::DimensionMismatch {
                        expected: manifest.config.feature_dim,
                        actual: r.features.len(),
                    });
                }
            }
        }
        Ok(images)
    };
    let train = load(TRAIN_FILE, Split::Train, manifest.train_images)?;
    let test = load(TEST_FILE, Split::Test, manifest.test_images)?;
    let scenario = Scenario {
        label_space: manifest.config.label_space()?,
        config: manifest.config.clone(),
        train,
        test,
    };
    Ok((manifest, scenario))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: String,
    pub scenario_hash: String,
    pub seeds: SeedChain,
    pub train_config: TrainConfig,
    pub detector: ToyDetector,
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let model: ModelFile = read_json(path)?;
    model.detector.validate()?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassSummary {
    pub pass: u8,
    pub tau: TauObj,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelHeader {
    pub format_version: String,
    pub scenario_hash: String,
    pub seeds: SeedChain,
    pub passes: Vec<PassSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabelLine {
    pub pass: u8,
    pub image_id: u64,
    pub labels: Vec<PseudoLabel>,
}

pub fn write_pseudo_labels(
    path: &Path,
    scenario_hash: &str,
    seeds: SeedChain,
    passes: &[PseudoLabelPass],
) -> Result<()> {
    let header = PseudoLabelHeader {
        format_version: FORMAT_VERSION.into(),
        scenario_hash: scenario_hash.into(),
        seeds,
        passes: passes
            .iter()
            .map(|p| PassSummary {
                pass: p.pass,
                tau: p.tau,
            })
            .collect(),
    };
    let lines: Vec<PseudoLabelLine> = passes
        .iter()
        .flat_map(|p| {
            p.images.iter().map(|i| PseudoLabelLine {
                pass: p.pass,
                image_id: i.image_id,
                labels: i.labels.clone(),
            })
        })
        .collect();
    write_jsonl(path, &header, &lines)
}

pub fn read_pseudo_labels(path: &Path) -> Result<(PseudoLabelHeader, Vec<PseudoLabelPass>)> {
    let (header, lines): (PseudoLabelHeader, Vec<PseudoLabelLine>) = read_jsonl(path)?;
    let mut passes: Vec<PseudoLabelPass> = header
        .passes
        .iter()
        .map(|s| PseudoLabelPass {
            pass: s.pass,
            tau: s.tau,
            images: Vec::new(),
        })
        .collect();
    for line in lines {
        let target = passes
            .iter_mut()
            .find(|p| p.pass == line.pass)
            .ok_or_else(|| format_err(path, format!("line for undeclared pass {}", line.pass)))?;
        target.images.push(ImagePseudoLabels {
            image_id: line.image_id,
            labels: line.labels,
        });
    }
    Ok((header, passes))
}

const CSV_VERSION_PREFIX: &str = "# format_version ";

/// A `# format_version` line followed by a headed CSV table.
fn csv_text<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<String> {
    let mut w = csv::Writer::from_writer(format!("{CSV_VERSION_PREFIX}{FORMAT_VERSION}\n").into_bytes());
    for r in rows {
        w.serialize(r).map_err(|e| format_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| format_err(path, e))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn csv_read<R: DeserializeOwned>(path: &Path, columns: &[&str]) -> Result<Vec<R>> {
    let text = read_text(path)?;
    let (first, body) = text.split_once('\n').unwrap_or((&text, ""));
    let version = first
        .strip_prefix(CSV_VERSION_PREFIX)
        .ok_or_else(|| format_err(path, "missing '# format_version' line"))?;
    check_version(path, version.trim())?;
    let mut r = csv::Reader::from_reader(body.as_bytes());
    let headers = r.headers().map_err(|e| format_err(path, e))?;
    if headers.iter().ne(columns.iter().copied()) {
        return Err(format_err(path, format!("expected columns {columns:?}, found {headers:?}")));
    }
    r.deserialize().map(|row| row.map_err(|e| format_err(path, e))).collect()
}

pub fn write_trace(path: &Path, trace: &[TraceEntry]) -> Result<()> {
    write_bytes(path, csv_text(path, trace)?.as_bytes())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEntry>> {
    csv_read(path, &["step", "iteration", "loss"])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsHeader {
    pub format_version: String,
    pub scenario_hash: String,
    pub model_hash: String,
    pub seeds: SeedChain,
    pub rejection: RejectionConfig,
    pub iou_threshold: f64,
}

pub fn write_detections(path: &Path, header: &DetectionsHeader, dets: &[ImageDetections]) -> Result<()> {
    write_jsonl(path, header, dets)
}

pub fn read_detections(path: &Path) -> Result<(DetectionsHeader, Vec<ImageDetections>)> {
    read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub format_version: String,
    pub scenario_hash: String,
    pub model_hash: String,
    pub seeds: SeedChain,
    pub report: EvaluationReport,
}

#[derive(Serialize, Deserialize)]
struct PrRow {
    class: String,
    rank: usize,
    recall: f64,
    precision: f64,
}

pub fn write_pr_curves(path: &Path, curves: &[(String, Vec<PrPoint>)]) -> Result<()> {
    let rows = curves.iter().flat_map(|(class, points)| {
        points.iter().enumerate().map(move |(rank, p)| PrRow {
            class: class.clone(),
            rank: rank + 1,
            recall: p.recall,
            precision: p.precision,
        })
    });
    write_bytes(path, csv_text(path, rows)?.as_bytes())
}

pub fn read_pr_curves(path: &Path) -> Result<Vec<(String, Vec<PrPoint>)>> {
    let mut out: Vec<(String, Vec<PrPoint>)> = Vec::new();
    for r in csv_read::<PrRow>(path, &["class", "rank", "recall", "precision"])? {
        let point = PrPoint {
            recall: r.recall,
            precision: r.precision,
        };
        match out.last_mut() {
            Some((c, pts)) if *c == r.class => pts.push(point),
            _ => out.push((r.class, vec![point])),
        }
    }
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

/// Every parameter a command may take, loadable from a JSON file. Unknown
/// fields are rejected so that a stale config fails loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: String,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub rejection: RejectionConfig,
    /// IoU at which detections match truths during evaluation.
    pub iou_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION.into(),
            scenario: ScenarioConfig::default(),
            train: TrainConfig::default(),
            rejection: RejectionConfig::default(),
            iou_threshold: 0.5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(&read_text(path)?).map_err(|e| format_err(path, e))?;
        if let Some(v) = value.get("format_version").and_then(|v| v.as_str()) {
            check_version(path, v)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| match unknown_field(&e) {
            Some(field) => Error::config(field, "unknown field"),
            None => format_err(path, e),
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        self.rejection.validate()?;
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::config("iou_threshold", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// The configuration with every implicit default written out.
    pub fn resolved(&self) -> Self {
        Self {
            rejection: self.rejection.resolved(),
            ..self.clone()
        }
    }
}

fn unknown_field(e: &serde_json::Error) -> Option<String> {
    let msg = e.to_string();
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest.split('`').next()?.to_string())
}
