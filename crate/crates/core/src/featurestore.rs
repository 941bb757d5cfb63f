//! Proposal feature records and their on-disk formats.
//!
//! The canonical format is ONDF, a little-endian binary layout:
//!
//! ```text
//! header:  magic "ONDF" | version u16 | D u32 | K u32 | record_count u64
//!          | id_class_count u32 | id_class i32 * id_class_count
//! record:  image_id u64 | bbox f32 * 4 | class_id i32 | is_id u8
//!          | feature f32 * D | logits f32 * K
//! ```
//!
//! Records follow the header contiguously, in file order. JSONL is offered
//! for debugging: the first line is the header object, every further line
//! is one record object with the same field names as [`FeatureRecord`].
//!
//! Logits never include the detector's background class.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAGIC: [u8; 4] = *b"ONDF";
pub const FORMAT_VERSION: u16 = 1;
/// One feature vector of this width occupies 4096 bytes.
pub const DEFAULT_FEATURE_DIM: u32 = 1024;

/// One detected object proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub image_id: u64,
    /// `(x, y, w, h)` in pixels; carried through but never used for scoring.
    pub bbox: [f32; 4],
    pub class_id: i32,
    pub is_id: bool,
    pub feature: Vec<f32>,
    pub logits: Vec<f32>,
}

impl FeatureRecord {
    /// Bytes occupied by one record in the binary layout.
    pub fn encoded_len(feature_dim: usize, logit_count: usize) -> usize {
        8 + 16 + 4 + 1 + 4 * feature_dim + 4 * logit_count
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u16,
    pub feature_dim: u32,
    pub logit_count: u32,
    pub record_count: u64,
    /// Sorted, duplicate-free.
    pub id_classes: Vec<i32>,
}

impl DatasetHeader {
    pub fn new(feature_dim: u32, logit_count: u32, id_classes: impl IntoIterator<Item = i32>) -> Self {
        let id_classes: BTreeSet<i32> = id_classes.into_iter().collect();
        Self {
            version: FORMAT_VERSION,
            feature_dim,
            logit_count,
            record_count: 0,
            id_classes: id_classes.into_iter().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        if self.feature_dim == 0 || self.logit_count == 0 {
            return Err(Error::malformed("header", "feature_dim and logit_count must be >= 1"));
        }
        if self.id_classes.is_empty() {
            return Err(Error::malformed("header", "id class set is empty"));
        }
        if self.id_classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::malformed("header", "id class set must be sorted and duplicate-free"));
        }
        Ok(())
    }

    pub fn is_id_class(&self, class_id: i32) -> bool {
        self.id_classes.binary_search(&class_id).is_ok()
    }

    /// Checks one record against the header contract.
    pub fn check_record(&self, index: u64, record: &FeatureRecord) -> Result<()> {
        if record.feature.len() != self.feature_dim as usize {
            return Err(Error::LengthMismatch {
                index,
                what: "feature",
                found: record.feature.len(),
                expected: self.feature_dim as usize,
            });
        }
        if record.logits.len() != self.logit_count as usize {
            return Err(Error::LengthMismatch {
                index,
                what: "logits",
                found: record.logits.len(),
                expected: self.logit_count as usize,
            });
        }
        if record.is_id != self.is_id_class(record.class_id) {
            return Err(Error::IdFlagMismatch {
                index,
                class_id: record.class_id,
                is_id: record.is_id,
            });
        }
        Ok(())
    }

    fn encoded_len(&self) -> usize {
        4 + 2 + 4 + 4 + 8 + 4 + 4 * self.id_classes.len()
    }
}

/// A header plus its records. Immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    /// Builds a dataset, fixing up `record_count` and validating every record.
    pub fn new(mut header: DatasetHeader, records: Vec<FeatureRecord>) -> Result<Self> {
        header.record_count = records.len() as u64;
        header.validate()?;
        for (i, r) in records.iter().enumerate() {
            header.check_record(i as u64, r)?;
        }
        Ok(Self { header, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.header.feature_dim as usize
    }

    /// Every class id present in the records.
    pub fn classes(&self) -> BTreeSet<i32> {
        self.records.iter().map(|r| r.class_id).collect()
    }

    pub fn ood_classes(&self) -> BTreeSet<i32> {
        self.records
            .iter()
            .filter(|r| !r.is_id)
            .map(|r| r.class_id)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    Jsonl,
}

impl Format {
    /// `.jsonl` selects JSONL, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => Format::Jsonl,
            _ => Format::Binary,
        }
    }
}

/// Writes `records` under `header`, returning the number of bytes written.
pub fn write_dataset(
    records: &[FeatureRecord],
    header: &DatasetHeader,
    path: &Path,
    format: Format,
) -> Result<u64> {
    let mut header = header.clone();
    header.record_count = records.len() as u64;
    header.validate()?;
    for (i, r) in records.iter().enumerate() {
        header.check_record(i as u64, r)?;
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = CountingWriter::new(BufWriter::new(file));
    let res = match format {
        Format::Binary => encode_binary(&header, records, &mut out),
        Format::Jsonl => encode_jsonl(&header, records, &mut out),
    };
    res.and_then(|_| out.flush()).map_err(|e| Error::io(path, e))?;
    Ok(out.written)
}

pub fn load_dataset(path: &Path, format: Format) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    match format {
        Format::Binary => decode_binary(reader),
        Format::Jsonl => decode_jsonl(reader),
    }
}

/// Serializes to an in-memory ONDF buffer.
pub fn to_binary_bytes(header: &DatasetHeader, records: &[FeatureRecord]) -> Vec<u8> {
    let mut header = header.clone();
    header.record_count = records.len() as u64;
    let mut buf = Vec::with_capacity(
        header.encoded_len()
            + records.len()
                * FeatureRecord::encoded_len(header.feature_dim as usize, header.logit_count as usize),
    );
    encode_binary(&header, records, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn from_binary_bytes(bytes: &[u8]) -> Result<Dataset> {
    decode_binary(bytes)
}

fn encode_binary<W: Write>(header: &DatasetHeader, records: &[FeatureRecord], out: &mut W) -> std::io::Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&header.version.to_le_bytes())?;
    out.write_all(&header.feature_dim.to_le_bytes())?;
    out.write_all(&header.logit_count.to_le_bytes())?;
    out.write_all(&header.record_count.to_le_bytes())?;
    out.write_all(&(header.id_classes.len() as u32).to_le_bytes())?;
    for c in &header.id_classes {
        out.write_all(&c.to_le_bytes())?;
    }
    let mut buf = Vec::new();
    for r in records {
        buf.clear();
        buf.extend_from_slice(&r.image_id.to_le_bytes());
        for v in r.bbox {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&r.class_id.to_le_bytes());
        buf.push(u8::from(r.is_id));
        for v in r.feature.iter().chain(&r.logits) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_header_bytes<R: Read>(input: &mut R, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    input
        .read_exact(&mut buf)
        .map_err(|_| Error::malformed("header", "file ends inside the header"))?;
    Ok(buf)
}

fn decode_binary<R: Read>(mut input: R) -> Result<Dataset> {
    let fixed = read_header_bytes(&mut input, 26)?;
    let magic: [u8; 4] = fixed[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: MAGIC,
        });
    }
    let version = u16::from_le_bytes(fixed[4..6].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let feature_dim = u32::from_le_bytes(fixed[6..10].try_into().unwrap());
    let logit_count = u32::from_le_bytes(fixed[10..14].try_into().unwrap());
    let record_count = u64::from_le_bytes(fixed[14..22].try_into().unwrap());
    let n_classes = u32::from_le_bytes(fixed[22..26].try_into().unwrap()) as usize;
    let class_bytes = read_header_bytes(&mut input, 4 * n_classes)?;
    let id_classes = class_bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let header = DatasetHeader {
        version,
        feature_dim,
        logit_count,
        record_count,
        id_classes,
    };
    header.validate()?;

    let d = feature_dim as usize;
    let k = logit_count as usize;
    let mut buf = vec![0u8; FeatureRecord::encoded_len(d, k)];
    // Cap the up-front reservation so a corrupt count cannot exhaust memory.
    let mut records = Vec::with_capacity(record_count.min(1 << 16) as usize);
    for index in 0..record_count {
        read_full(&mut input, &mut buf).map_err(|_| Error::Truncated { index })?;
        let f32_at = |off: usize| f32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
        let is_id = match buf[28] {
            0 => false,
            1 => true,
            other => return Err(Error::malformed("record", format!("record {index}: is_id byte {other}"))),
        };
        let record = FeatureRecord {
            image_id: u64::from_le_bytes(buf[0..8].try_into().unwrap()),
            bbox: [f32_at(8), f32_at(12), f32_at(16), f32_at(20)],
            class_id: i32::from_le_bytes(buf[24..28].try_into().unwrap()),
            is_id,
            feature: (0..d).map(|j| f32_at(29 + 4 * j)).collect(),
            logits: (0..k).map(|j| f32_at(29 + 4 * (d + j))).collect(),
        };
        header.check_record(index, &record)?;
        records.push(record);
    }
    let mut probe = [0u8; 1];
    if input.read(&mut probe).map_err(|e| Error::io("<dataset>", e))? != 0 {
        return Err(Error::malformed("dataset", "trailing bytes after the last record"));
    }
    Ok(Dataset { header, records })
}

fn read_full<R: Read>(input: &mut R, buf: &mut [u8]) -> std::io::Result<()> {
    input.read_exact(buf)
}

#[derive(Serialize, Deserialize)]
struct JsonHeader {
    magic: String,
    version: u16,
    feature_dim: u32,
    logit_count: u32,
    record_count: u64,
    id_classes: Vec<i32>,
}

fn encode_jsonl<W: Write>(header: &DatasetHeader, records: &[FeatureRecord], out: &mut W) -> std::io::Result<()> {
    let head = JsonHeader {
        magic: String::from_utf8_lossy(&MAGIC).into_owned(),
        version: header.version,
        feature_dim: header.feature_dim,
        logit_count: header.logit_count,
        record_count: header.record_count,
        id_classes: header.id_classes.clone(),
    };
    serde_json::to_writer(&mut *out, &head)?;
    out.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn decode_jsonl<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::malformed("header", "empty file"))?
        .map_err(|e| Error::io("<dataset>", e))?;
    let head: JsonHeader = serde_json::from_str(&first).map_err(|e| Error::malformed("header", e.to_string()))?;
    if head.magic.as_bytes() != MAGIC {
        let mut found = [0u8; 4];
        for (dst, src) in found.iter_mut().zip(head.magic.bytes()) {
            *dst = src;
        }
        return Err(Error::BadMagic {
            found,
            expected: MAGIC,
        });
    }
    let header = DatasetHeader {
        version: head.version,
        feature_dim: head.feature_dim,
        logit_count: head.logit_count,
        record_count: head.record_count,
        id_classes: head.id_classes,
    };
    header.validate()?;
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let index = records.len() as u64;
        let record: FeatureRecord = serde_json::from_str(&line)
            .map_err(|e| Error::malformed("record", format!("record {index}: {e}")))?;
        header.check_record(index, &record)?;
        records.push(record);
    }
    if records.len() as u64 != header.record_count {
        return Err(Error::Truncated {
            index: records.len() as u64,
        });
    }
    Ok(Dataset { header, records })
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W> CountingWriter<W> {
    fn new(inner: W) -> Self {
        Self { inner, written: 0 }
    }
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.written += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Parameters of the Gaussian-cluster generator.
///
/// Id records come from `id_clusters` centers, ood records from
/// `ood_clusters` centers; all centers are uniform in a hypercube of
/// half-width `center_scale`. Logits score each record against the id
/// centers: `logit_k = -sharpness * |x - c_k| + N(0, logit_noise^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub feature_dim: usize,
    pub id_clusters: usize,
    pub ood_clusters: usize,
    pub samples_per_cluster: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    pub logit_sharpness: f64,
    pub logit_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            feature_dim: DEFAULT_FEATURE_DIM as usize,
            id_clusters: 20,
            ood_clusters: 60,
            samples_per_cluster: 100,
            center_scale: 1.0,
            noise_sigma: 0.5,
            logit_sharpness: 1.0,
            logit_noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.feature_dim == 0 || self.id_clusters == 0 || self.ood_clusters == 0 || self.samples_per_cluster == 0 {
            return bad("synthetic counts and dimension must be >= 1");
        }
        if !(self.noise_sigma >= 0.0) || !(self.logit_noise >= 0.0) {
            return bad("noise levels must be >= 0");
        }
        if !(self.logit_sharpness > 0.0) {
            return bad("logit sharpness must be > 0");
        }
        if !(self.center_scale >= 0.0) {
            return bad("center scale must be >= 0");
        }
        Ok(())
    }
}

/// Draws a dataset from `cfg`. A pure function of the config.
///
/// Records are emitted cluster by cluster, id clusters first. Id cluster
/// `k` has class `k`; ood cluster `j` has class `id_clusters + j`. Every
/// record sits in its own image.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let mut center_rng = rng::stream(cfg.seed, 1);
    let mut sample_rng = rng::stream(cfg.seed, 2);
    let mut logit_rng = rng::stream(cfg.seed, 3);

    let cube = Uniform::new_inclusive(-cfg.center_scale, cfg.center_scale)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut draw_center = || -> Vec<f64> { (0..d).map(|_| cube.sample(&mut center_rng)).collect() };
    let id_centers: Vec<Vec<f64>> = (0..cfg.id_clusters).map(|_| draw_center()).collect();
    let ood_centers: Vec<Vec<f64>> = (0..cfg.ood_clusters).map(|_| draw_center()).collect();

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let logit_noise = Normal::new(0.0, cfg.logit_noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let total = (cfg.id_clusters + cfg.ood_clusters) * cfg.samples_per_cluster;
    let mut records = Vec::with_capacity(total);
    let clusters = id_centers
        .iter()
        .enumerate()
        .map(|(k, c)| (k as i32, true, c))
        .chain(
            ood_centers
                .iter()
                .enumerate()
                .map(|(j, c)| ((cfg.id_clusters + j) as i32, false, c)),
        );
    for (class_id, is_id, center) in clusters {
        for _ in 0..cfg.samples_per_cluster {
            let point: Vec<f64> = center.iter().map(|c| c + noise.sample(&mut sample_rng)).collect();
            let logits = id_centers
                .iter()
                .map(|ck| {
                    let dist = point
                        .iter()
                        .zip(ck)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    (-cfg.logit_sharpness * dist + logit_noise.sample(&mut logit_rng)) as f32
                })
                .collect();
            let x = sample_rng.random_range(0.0f32..600.0);
            let y = sample_rng.random_range(0.0f32..400.0);
            let w = sample_rng.random_range(8.0f32..200.0);
            let h = sample_rng.random_range(8.0f32..200.0);
            records.push(FeatureRecord {
                image_id: records.len() as u64,
                bbox: [x, y, w, h],
                class_id,
                is_id,
                feature: point.iter().map(|&v| v as f32).collect(),
                logits,
            });
        }
    }
    let header = DatasetHeader::new(d as u32, cfg.id_clusters as u32, 0..cfg.id_clusters as i32);
    Dataset::new(header, records)
}
