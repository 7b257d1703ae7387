// SPDX-License-Identifier: MIT OR Apache-2.0

//! Graph records and their on-disk form.
//!
//! A record holds one sample's hidden-state matrix `H` (`L x d`) and causal
//! attention map `A` (`L x L`) taken from a single transformer layer. Tensors
//! are stored in the CGZ1 binary layout (32-bit little-endian floats,
//! row-major); tokens and metadata live in a JSON manifest next to them.
//!
//! CGZ1 layout, in order:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `43 47 5A 31` ("CGZ1") |
//! | 2 | u16 version = 1 |
//! | 4 | u32 `L` |
//! | 4 | u32 `d` |
//! | 4 | u32 layer index |
//! | 1 | u8 label (0 fact, 1 hallucination, 255 unknown) |
//! | 3 | zero padding |
//! | 4·L·d | `H`, f32 |
//! | 4·L·L | `A`, f32 |

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Tensor;
use crate::synth::SynthConfig;

pub const MAGIC: [u8; 4] = *b"CGZ1";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 22;
/// Allowed deviation of an attention row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-2;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Fact,
    Hallucination,
    Unknown,
}

impl Label {
    pub fn to_byte(self) -> u8 {
        match self {
            Label::Fact => 0,
            Label::Hallucination => 1,
            Label::Unknown => 255,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Label::Fact),
            1 => Some(Label::Hallucination),
            255 => Some(Label::Unknown),
            _ => None,
        }
    }

    /// Class index (0 fact, 1 hallucination), or `None` when unknown.
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Fact => Some(0),
            Label::Hallucination => Some(1),
            Label::Unknown => None,
        }
    }

    pub fn from_class(c: usize) -> Self {
        if c == 0 {
            Label::Fact
        } else {
            Label::Hallucination
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub model_id: String,
    pub layer_index: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphRecord {
    pub sample_id: String,
    pub tokens: Vec<String>,
    pub hidden: Tensor,
    pub attention: Tensor,
    pub label: Label,
    pub meta: RecordMeta,
}

impl GraphRecord {
    pub fn len(&self) -> usize {
        self.attention.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.hidden.cols()
    }

    /// Rounds both tensors to the nearest `f32`, i.e. to exactly what a
    /// save/load cycle would produce.
    pub fn quantize(&mut self) {
        self.hidden = self.hidden.map(|x| x as f32 as f64);
        self.attention = self.attention.map(|x| x as f32 as f64);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    Shape,
    NonFiniteHidden,
    NonFiniteAttention,
    NegativeAttention,
    Mask,
    RowSum,
}

/// One broken record invariant, with the offending location.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub field: &'static str,
    pub index: Option<(usize, usize)>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let what = match self.kind {
            ViolationKind::Shape => "shape",
            ViolationKind::NonFiniteHidden => "non-finite hidden",
            ViolationKind::NonFiniteAttention => "non-finite attention",
            ViolationKind::NegativeAttention => "negative attention",
            ViolationKind::Mask => "mask violation",
            ViolationKind::RowSum => "row-sum",
        };
        write!(f, "{what}: {}", self.field)?;
        if let Some((i, j)) = self.index {
            write!(f, "[{i}][{j}]")?;
        }
        write!(f, " {}", self.detail)
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unrecognized format in {0}: bad magic bytes")]
    UnrecognizedFormat(PathBuf),
    #[error("unsupported CGZ1 version {version} in {path}")]
    UnsupportedVersion { path: PathBuf, version: u16 },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path} has {extra} trailing bytes after the payload")]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("invalid label byte {byte} in {path}")]
    BadLabel { path: PathBuf, byte: u8 },
    #[error("invalid record {sample_id}: {}", join_violations(.violations))]
    Invalid {
        sample_id: String,
        violations: Vec<Violation>,
    },
    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("duplicate sample_id {0:?} in manifest")]
    DuplicateId(String),
    #[error("duplicate split assignment for sample {0:?}")]
    DuplicateSplit(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Checks every record invariant; an empty list means the record is legal.
pub fn validate(record: &GraphRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let l = record.attention.rows();
    let shape = |detail: String| Violation {
        kind: ViolationKind::Shape,
        field: "shape",
        index: None,
        detail,
    };
    if l == 0 {
        out.push(shape("L must be >= 1".into()));
    }
    if record.hidden.cols() == 0 {
        out.push(shape("d must be >= 1".into()));
    }
    if record.attention.cols() != l {
        out.push(shape(format!("attention is {:?}, must be square", record.attention.shape())));
    }
    if record.hidden.rows() != l {
        out.push(shape(format!("hidden has {} rows, attention has {l}", record.hidden.rows())));
    }
    if record.tokens.len() != l {
        out.push(shape(format!("{} tokens for L = {l}", record.tokens.len())));
    }
    if !out.is_empty() {
        return out;
    }

    for i in 0..l {
        for (j, &x) in record.hidden.row_slice(i).iter().enumerate() {
            if !x.is_finite() {
                out.push(Violation {
                    kind: ViolationKind::NonFiniteHidden,
                    field: "hidden",
                    index: Some((i, j)),
                    detail: format!("= {x}, must be finite"),
                });
            }
        }
    }
    for i in 0..l {
        let mut row_ok = true;
        let mut sum = 0.0;
        for j in 0..l {
            let x = record.attention.get(i, j);
            if !x.is_finite() {
                row_ok = false;
                out.push(Violation {
                    kind: ViolationKind::NonFiniteAttention,
                    field: "attention",
                    index: Some((i, j)),
                    detail: format!("= {x}, must be finite"),
                });
                continue;
            }
            if x < 0.0 {
                out.push(Violation {
                    kind: ViolationKind::NegativeAttention,
                    field: "attention",
                    index: Some((i, j)),
                    detail: format!("= {x}, must be >= 0"),
                });
            }
            if j > i && x != 0.0 {
                out.push(Violation {
                    kind: ViolationKind::Mask,
                    field: "attention",
                    index: Some((i, j)),
                    detail: format!("= {x}, must be 0 for j > i"),
                });
            }
            if j <= i {
                sum += x;
            }
        }
        if row_ok && (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            out.push(Violation {
                kind: ViolationKind::RowSum,
                field: "attention",
                index: Some((i, i)),
                detail: format!("row {i} sums to {sum}, must lie in [1 - {ROW_SUM_TOLERANCE}, 1 + {ROW_SUM_TOLERANCE}]"),
            });
        }
    }
    out
}

/// Serializes a record into CGZ1 bytes. Refuses records that fail [`validate`].
pub fn encode_record(record: &GraphRecord) -> Result<Vec<u8>, DataError> {
    let violations = validate(record);
    if !violations.is_empty() {
        return Err(DataError::Invalid {
            sample_id: record.sample_id.clone(),
            violations,
        });
    }
    let (l, d) = (record.len(), record.dim());
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * (l * d + l * l));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(l as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&record.meta.layer_index.to_le_bytes());
    buf.push(record.label.to_byte());
    buf.extend_from_slice(&[0, 0, 0]);
    for &x in record.hidden.data().iter().chain(record.attention.data()) {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(buf)
}

/// Parses CGZ1 bytes. Tokens are placeholders (`t0`, `t1`, ...) and the
/// model id is empty; the manifest supplies both.
pub fn decode_record(bytes: &[u8], path: &Path, sample_id: &str) -> Result<GraphRecord, DataError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(DataError::UnrecognizedFormat(path.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let (l, d, layer) = (u32_at(6), u32_at(10), u32_at(14) as u32);
    let label = Label::from_byte(bytes[18]).ok_or(DataError::BadLabel {
        path: path.to_path_buf(),
        byte: bytes[18],
    })?;
    let expected = HEADER_LEN + 4 * (l * d + l * l);
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes {
            path: path.to_path_buf(),
            extra: bytes.len() - expected,
        });
    }
    let floats: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let (h, a) = floats.split_at(l * d);
    let record = GraphRecord {
        sample_id: sample_id.to_string(),
        tokens: (0..l).map(|i| format!("t{i}")).collect(),
        hidden: Tensor::new(l, d, h.to_vec()),
        attention: Tensor::new(l, l, a.to_vec()),
        label,
        meta: RecordMeta {
            model_id: String::new(),
            layer_index: layer,
        },
    };
    let violations = validate(&record);
    if !violations.is_empty() {
        return Err(DataError::Invalid {
            sample_id: sample_id.to_string(),
            violations,
        });
    }
    Ok(record)
}

pub fn save_record(record: &GraphRecord, path: &Path) -> Result<(), DataError> {
    let bytes = encode_record(record)?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

/// Loads a CGZ1 file; the sample id defaults to the file stem.
pub fn load_record(path: &Path) -> Result<GraphRecord, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_record(&bytes, path, &id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub tokens: Vec<String>,
    pub model_id: String,
    pub layer_index: u32,
    #[serde(default)]
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<ManifestEntry>,
    /// Optional declared split sizes; mismatches are reported on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_counts: Option<BTreeMap<Split, usize>>,
    /// Generating configuration for synthetic datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthConfig>,
}

/// A set of records with a disjoint train/val/test assignment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<GraphRecord>,
    pub splits: BTreeMap<String, Split>,
    pub generator: Option<SynthConfig>,
    /// Human-readable notes about declared vs. actual split sizes.
    pub count_mismatches: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&GraphRecord> {
        self.records
            .iter()
            .filter(|r| self.splits.get(&r.sample_id) == Some(&split))
            .collect()
    }

    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut c: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for s in self.splits.values() {
            *c.entry(*s).or_default() += 1;
        }
        c
    }

    pub fn get(&self, sample_id: &str) -> Option<&GraphRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }

    /// Keeps only records extracted from the given layer.
    pub fn filter_layer(&mut self, layer: u32) {
        self.records.retain(|r| r.meta.layer_index == layer);
        let kept: HashSet<&str> = self.records.iter().map(|r| r.sample_id.as_str()).collect();
        self.splits.retain(|id, _| kept.contains(id.as_str()));
    }

    /// Writes one CGZ1 file per record plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, DataError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut entries = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let file = format!("{}.cgz", sanitize(&r.sample_id));
            save_record(r, &dir.join(&file))?;
            entries.push(ManifestEntry {
                id: r.sample_id.clone(),
                file,
                tokens: r.tokens.clone(),
                model_id: r.meta.model_id.clone(),
                layer_index: r.meta.layer_index,
                split: self.splits.get(&r.sample_id).copied(),
            });
        }
        let manifest = Manifest {
            records: entries,
            expected_counts: None,
            generator: self.generator.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(path)
    }
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Loads a JSON manifest and every record it references. Relative file
/// paths resolve against the manifest's directory; `path` may also name the
/// directory itself.
pub fn load_manifest(path: &Path) -> Result<Dataset, DataError> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));

    let mut seen: BTreeMap<&str, Option<Split>> = BTreeMap::new();
    for e in &manifest.records {
        if let Some(prev) = seen.insert(&e.id, e.split) {
            return Err(if prev != e.split {
                DataError::DuplicateSplit(e.id.clone())
            } else {
                DataError::DuplicateId(e.id.clone())
            });
        }
    }

    let mut ds = Dataset {
        generator: manifest.generator.clone(),
        ..Dataset::default()
    };
    for e in &manifest.records {
        let file = base.join(&e.file);
        let mut r = load_record(&file)?;
        r.sample_id = e.id.clone();
        if e.tokens.len() != r.len() {
            return Err(DataError::Manifest {
                path: path.clone(),
                message: format!("{}: {} tokens listed for L = {}", e.id, e.tokens.len(), r.len()),
            });
        }
        if e.layer_index != r.meta.layer_index {
            return Err(DataError::Manifest {
                path: path.clone(),
                message: format!(
                    "{}: manifest layer {} disagrees with file layer {}",
                    e.id, e.layer_index, r.meta.layer_index
                ),
            });
        }
        r.tokens = e.tokens.clone();
        r.meta.model_id = e.model_id.clone();
        if let Some(s) = e.split {
            ds.splits.insert(e.id.clone(), s);
        }
        ds.records.push(r);
    }
    if let Some(expected) = &manifest.expected_counts {
        let actual = ds.counts();
        for (split, want) in expected {
            let got = actual.get(split).copied().unwrap_or(0);
            if got != *want {
                let note = format!("split {split}: manifest declares {want} records, found {got}");
                log::warn!("{note}");
                ds.count_mismatches.push(note);
            }
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_record(l: usize, d: usize, seed: u64) -> GraphRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = Tensor::random_normal(l, d, 1.0, &mut rng);
        let mut attention = Tensor::zeros(l, l);
        for i in 0..l {
            let w: Vec<f64> = (0..=i).map(|_| rng.random_range(0.1..1.0)).collect();
            let z: f64 = w.iter().sum();
            for (j, x) in w.iter().enumerate() {
                attention.set(i, j, x / z);
            }
        }
        let mut r = GraphRecord {
            sample_id: format!("rand-{seed}"),
            tokens: (0..l).map(|i| format!("t{i}")).collect(),
            hidden,
            attention,
            label: Label::Hallucination,
            meta: RecordMeta {
                model_id: "test".into(),
                layer_index: 20,
            },
        };
        r.quantize();
        r
    }

    fn smallest() -> GraphRecord {
        GraphRecord {
            sample_id: "s".into(),
            tokens: vec!["a".into()],
            hidden: Tensor::zeros(1, 2),
            attention: Tensor::ones(1, 1),
            label: Label::Fact,
            meta: RecordMeta {
                model_id: String::new(),
                layer_index: 0,
            },
        }
    }

    #[test]
    fn smallest_record_round_trips() {
        let r = smallest();
        let bytes = encode_record(&r).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4 * 3);
        let back = decode_record(&bytes, Path::new("s.cgz"), "s").unwrap();
        assert_eq!(back.hidden, r.hidden);
        assert_eq!(back.attention, r.attention);
        assert_eq!(back.label, Label::Fact);
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut r = random_record(3, 2, 1);
        r.meta.layer_index = 7;
        r.label = Label::Unknown;
        let b = encode_record(&r).unwrap();
        assert_eq!(&b[..4], &[0x43, 0x47, 0x5A, 0x31]);
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..10], &[3, 0, 0, 0]);
        assert_eq!(&b[10..14], &[2, 0, 0, 0]);
        assert_eq!(&b[14..18], &[7, 0, 0, 0]);
        assert_eq!(b[18], 255);
        assert_eq!(&b[19..22], &[0, 0, 0]);
        assert_eq!(&b[22..26], &(r.hidden.get(0, 0) as f32).to_le_bytes());
    }

    #[test]
    fn upper_triangle_entry_is_a_mask_violation() {
        let mut r = random_record(2, 3, 2);
        r.attention.set(0, 1, 0.3);
        let err = encode_record(&r).unwrap_err();
        assert!(err.to_string().contains("mask violation"), "{err}");
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let r = random_record(7, 5, 123);
        let p1 = dir.path().join("a.cgz");
        let p2 = dir.path().join("b.cgz");
        save_record(&r, &p1).unwrap();
        let back = load_record(&p1).unwrap();
        save_record(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(back.hidden, r.hidden);
        assert_eq!(back.attention, r.attention);
    }

    #[test]
    fn bad_magic_is_unrecognized() {
        let mut b = encode_record(&random_record(2, 2, 3)).unwrap();
        b[0] = b'X';
        let err = decode_record(&b, Path::new("x"), "x").unwrap_err();
        assert!(err.to_string().contains("unrecognized format"));
    }

    #[test]
    fn short_payload_is_truncated() {
        let b = encode_record(&random_record(3, 4, 4)).unwrap();
        let err = decode_record(&b[..b.len() - 5], Path::new("x"), "x").unwrap_err();
        assert!(matches!(err, DataError::Truncated { .. }));
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn nan_in_payload_is_rejected_on_load() {
        let r = random_record(2, 2, 5);
        let mut b = encode_record(&r).unwrap();
        b[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_record(&b, Path::new("x"), "x").unwrap_err();
        assert!(err.to_string().contains("non-finite hidden"), "{err}");
    }

    #[test]
    fn legal_record_has_no_violations() {
        assert!(validate(&random_record(5, 3, 6)).is_empty());
        assert!(validate(&smallest()).is_empty());
    }

    #[test]
    fn half_row_sum_is_one_violation() {
        let mut r = random_record(3, 2, 7);
        let row: Vec<f64> = r.attention.row_slice(2).iter().map(|x| x * 0.5).collect();
        for (j, x) in row.into_iter().enumerate() {
            r.attention.set(2, j, x);
        }
        let v = validate(&r);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::RowSum);
        assert_eq!(v[0].index, Some((2, 2)));
    }

    #[test]
    fn nan_hidden_is_one_violation() {
        let mut r = random_record(3, 2, 8);
        r.hidden.set(1, 1, f64::NAN);
        let v = validate(&r);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::NonFiniteHidden);
        assert_eq!(v[0].to_string(), "non-finite hidden: hidden[1][1] = NaN, must be finite");
    }

    fn write_manifest(dir: &Path, entries: &[(&str, Option<Split>)]) -> PathBuf {
        let mut recs = Vec::new();
        for (k, (id, split)) in entries.iter().enumerate() {
            let r = random_record(3, 2, 100 + k as u64);
            let file = format!("{id}-{k}.cgz");
            save_record(&r, &dir.join(&file)).unwrap();
            recs.push(ManifestEntry {
                id: id.to_string(),
                file,
                tokens: vec!["a".into(), "b".into(), "c".into()],
                model_id: "m".into(),
                layer_index: 20,
                split: *split,
            });
        }
        let m = Manifest {
            records: recs,
            expected_counts: None,
            generator: None,
        };
        let p = dir.join(MANIFEST_FILE);
        fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
        p
    }

    #[test]
    fn id_in_two_splits_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &[("x", Some(Split::Train)), ("x", Some(Split::Val))]);
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("duplicate split assignment"));
    }

    #[test]
    fn repeated_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &[("x", Some(Split::Train)), ("x", Some(Split::Train))]);
        assert!(matches!(load_manifest(&p), Err(DataError::DuplicateId(_))));
    }

    #[test]
    fn empty_manifest_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &[]);
        let ds = load_manifest(&p).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn missing_record_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &[("x", Some(Split::Test))]);
        fs::remove_file(dir.path().join("x-0.cgz")).unwrap();
        assert!(matches!(load_manifest(&p), Err(DataError::Io { .. })));
    }

    #[test]
    fn manifest_supplies_tokens_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), &[("a", Some(Split::Train)), ("b", Some(Split::Test)), ("c", None)]);
        let ds = load_manifest(&p).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.get("a").unwrap().tokens, vec!["a", "b", "c"]);
        assert_eq!(ds.get("a").unwrap().meta.model_id, "m");
        let c = ds.counts();
        assert_eq!((c[&Split::Train], c[&Split::Val], c[&Split::Test]), (1, 0, 1));
    }
}
