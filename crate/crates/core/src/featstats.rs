//! Domain-sensitive instance descriptors built from per-level channel
//! statistics, plus descriptor-set persistence in a binary and a CSV format.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{GbError, Result};

/// Channel-wise mean and population standard deviation of one feature level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevelStats {
    pub level_index: usize,
    pub mean_vec: Vec<f32>,
    pub std_vec: Vec<f32>,
}

/// One sample's concatenated statistics vector with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub sample_id: String,
    pub z: Vec<f32>,
    pub gt_count: Option<f32>,
    pub true_domain: Option<i32>,
}

/// An ordered collection of descriptors sharing one dimension. The position
/// of a descriptor is its sample identity everywhere downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    descriptors: Vec<Descriptor>,
    dim: usize,
}

/// Per-channel mean and population (1/N) standard deviation over the spatial
/// extent of a C×H×W activation map.
pub fn channel_stats(feature_map: ArrayView3<'_, f64>, level_index: usize) -> Result<FeatureLevelStats> {
    let (c, h, w) = feature_map.dim();
    if c < 1 || h * w < 1 {
        return Err(GbError::invalid("empty feature map"));
    }
    if level_index < 1 {
        return Err(GbError::invalid("level_index must be >= 1"));
    }
    if feature_map.iter().any(|v| !v.is_finite()) {
        return Err(GbError::invalid("non-finite activations"));
    }
    let hw = (h * w) as f64;
    let mut mean_vec = Vec::with_capacity(c);
    let mut std_vec = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = feature_map.index_axis(ndarray::Axis(0), ch);
        let mean = plane.sum() / hw;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
        mean_vec.push(mean as f32);
        std_vec.push(var.sqrt() as f32);
    }
    Ok(FeatureLevelStats {
        level_index,
        mean_vec,
        std_vec,
    })
}

/// Concatenates per-level statistics into one descriptor, level-ascending,
/// mean before std within a level.
pub fn build_descriptor(
    stats: &[FeatureLevelStats],
    sample_id: impl Into<String>,
    gt_count: Option<f32>,
    true_domain: Option<i32>,
) -> Result<Descriptor> {
    if stats.is_empty() {
        return Err(GbError::invalid("no feature levels"));
    }
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by_key(|&i| stats[i].level_index);
    for pair in order.windows(2) {
        if stats[pair[0]].level_index == stats[pair[1]].level_index {
            return Err(GbError::invalid(format!(
                "duplicate level index {}",
                stats[pair[0]].level_index
            )));
        }
    }
    let mut z = Vec::new();
    for &i in &order {
        let s = &stats[i];
        if s.level_index < 1 {
            return Err(GbError::invalid("level_index must be >= 1"));
        }
        if s.mean_vec.len() != s.std_vec.len() {
            return Err(GbError::invalid("mean/std length mismatch"));
        }
        if s.mean_vec.iter().any(|v| !v.is_finite()) || s.std_vec.iter().any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(GbError::invalid("non-finite or negative level statistics"));
        }
        z.extend_from_slice(&s.mean_vec);
        z.extend_from_slice(&s.std_vec);
    }
    if let Some(cnt) = gt_count {
        if !cnt.is_finite() || cnt < 0.0 {
            return Err(GbError::invalid("gt_count must be finite and >= 0"));
        }
    }
    Ok(Descriptor {
        sample_id: sample_id.into(),
        z,
        gt_count,
        true_domain,
    })
}

impl DescriptorSet {
    /// All descriptors must share one dimension and have unique ids; optional
    /// columns must be present on all descriptors or on none.
    pub fn new(descriptors: Vec<Descriptor>) -> Result<Self> {
        let Some(first) = descriptors.first() else {
            return Err(GbError::invalid("empty dataset"));
        };
        let dim = first.z.len();
        if dim == 0 {
            return Err(GbError::invalid("zero-dimensional descriptors"));
        }
        let n_count = descriptors.iter().filter(|d| d.gt_count.is_some()).count();
        let n_domain = descriptors.iter().filter(|d| d.true_domain.is_some()).count();
        if n_count != 0 && n_count != descriptors.len() {
            return Err(GbError::invalid("gt_count present on some descriptors but not all"));
        }
        if n_domain != 0 && n_domain != descriptors.len() {
            return Err(GbError::invalid("true_domain present on some descriptors but not all"));
        }
        let mut ids: Vec<&str> = Vec::with_capacity(descriptors.len());
        for d in &descriptors {
            if d.z.len() != dim {
                return Err(GbError::invalid(format!(
                    "descriptor {} has dimension {}, expected {}",
                    d.sample_id,
                    d.z.len(),
                    dim
                )));
            }
            if d.z.iter().any(|v| !v.is_finite()) {
                return Err(GbError::NonFinite(format!("value in descriptor {}", d.sample_id)));
            }
            if let Some(c) = d.gt_count {
                if !c.is_finite() || c < 0.0 {
                    return Err(GbError::invalid("gt_count must be finite and >= 0"));
                }
            }
            ids.push(&d.sample_id);
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        for pair in sorted.windows(2) {
            if pair[0] == pair[1] {
                return Err(GbError::DuplicateId(pair[0].to_string()));
            }
        }
        Ok(DescriptorSet { descriptors, dim })
    }

    /// Builds a set from an N×D matrix; ids are decimal indices "0".."N-1".
    pub fn from_matrix(
        z: &Array2<f64>,
        gt_counts: Option<&[f64]>,
        true_domains: Option<&[i32]>,
    ) -> Result<Self> {
        let n = z.nrows();
        if let Some(c) = gt_counts {
            if c.len() != n {
                return Err(GbError::invalid("gt_counts length mismatch"));
            }
        }
        if let Some(d) = true_domains {
            if d.len() != n {
                return Err(GbError::invalid("true_domains length mismatch"));
            }
        }
        let descriptors = (0..n)
            .map(|i| Descriptor {
                sample_id: i.to_string(),
                z: z.row(i).iter().map(|&v| v as f32).collect(),
                gt_count: gt_counts.map(|c| c[i] as f32),
                true_domain: true_domains.map(|d| d[i]),
            })
            .collect();
        Self::new(descriptors)
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn descriptors(&self) -> &[Descriptor] {
        &self.descriptors
    }

    /// The N×D descriptor matrix in f64.
    pub fn matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.len(), self.dim));
        for (i, d) in self.descriptors.iter().enumerate() {
            for (j, &v) in d.z.iter().enumerate() {
                m[[i, j]] = v as f64;
            }
        }
        m
    }

    pub fn gt_counts(&self) -> Option<Vec<f64>> {
        if self.descriptors.iter().all(|d| d.gt_count.is_some()) {
            Some(self.descriptors.iter().map(|d| d.gt_count.unwrap() as f64).collect())
        } else {
            None
        }
    }

    pub fn true_domains(&self) -> Option<Vec<i32>> {
        if self.descriptors.iter().all(|d| d.true_domain.is_some()) {
            Some(self.descriptors.iter().map(|d| d.true_domain.unwrap()).collect())
        } else {
            None
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BinHeader {
    magic: String,
    n: usize,
    d: usize,
    has_count: bool,
    has_domain: bool,
}

const MAGIC: &str = "GBD1";

/// Writes the binary descriptor format: one JSON header line, then N·D
/// little-endian f32 values row-major, then optional counts and domains.
pub fn save_descriptors_binary(set: &DescriptorSet, path: impl AsRef<Path>) -> Result<()> {
    let header = BinHeader {
        magic: MAGIC.to_string(),
        n: set.len(),
        d: set.dim(),
        has_count: set.gt_counts().is_some(),
        has_domain: set.true_domains().is_some(),
    };
    let mut buf = serde_json::to_vec(&header).expect("header serializes");
    buf.push(b'\n');
    for d in set.descriptors() {
        for v in &d.z {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if header.has_count {
        for d in set.descriptors() {
            buf.extend_from_slice(&d.gt_count.unwrap().to_le_bytes());
        }
    }
    if header.has_domain {
        for d in set.descriptors() {
            buf.extend_from_slice(&d.true_domain.unwrap().to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads the binary descriptor format. The format carries no ids; samples get
/// decimal index ids "0".."N-1".
pub fn load_descriptors_binary(path: impl AsRef<Path>) -> Result<DescriptorSet> {
    let bytes = std::fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| GbError::BadHeader("missing header line".into()))?;
    let header: BinHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| GbError::BadHeader(e.to_string()))?;
    if header.magic != MAGIC {
        return Err(GbError::BadHeader(format!("unknown magic {:?}", header.magic)));
    }
    if header.n == 0 || header.d == 0 {
        return Err(GbError::BadHeader("n and d must be positive".into()));
    }
    let mut expected = header.n * header.d * 4;
    if header.has_count {
        expected += header.n * 4;
    }
    if header.has_domain {
        expected += header.n * 4;
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != expected {
        return Err(GbError::PayloadSize {
            expected,
            found: payload.len(),
        });
    }
    let f32_at = |off: usize| f32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
    let mut descriptors = Vec::with_capacity(header.n);
    let counts_base = header.n * header.d * 4;
    let domains_base = counts_base + if header.has_count { header.n * 4 } else { 0 };
    for i in 0..header.n {
        let mut z = Vec::with_capacity(header.d);
        for j in 0..header.d {
            let v = f32_at((i * header.d + j) * 4);
            if !v.is_finite() {
                return Err(GbError::NonFinite(format!("value at row {i} column {j}")));
            }
            z.push(v);
        }
        let gt_count = if header.has_count {
            let c = f32_at(counts_base + i * 4);
            if !c.is_finite() {
                return Err(GbError::NonFinite(format!("count at row {i}")));
            }
            Some(c)
        } else {
            None
        };
        let true_domain = if header.has_domain {
            let off = domains_base + i * 4;
            Some(i32::from_le_bytes(payload[off..off + 4].try_into().unwrap()))
        } else {
            None
        };
        descriptors.push(Descriptor {
            sample_id: i.to_string(),
            z,
            gt_count,
            true_domain,
        });
    }
    DescriptorSet::new(descriptors)
}

/// Writes the CSV descriptor format: header `id,z0..z{D-1}[,count][,domain]`.
pub fn save_descriptors_csv(set: &DescriptorSet, path: impl AsRef<Path>) -> Result<()> {
    let has_count = set.gt_counts().is_some();
    let has_domain = set.true_domains().is_some();
    let mut out = String::from("id");
    for j in 0..set.dim() {
        write!(out, ",z{j}").unwrap();
    }
    if has_count {
        out.push_str(",count");
    }
    if has_domain {
        out.push_str(",domain");
    }
    out.push('\n');
    for d in set.descriptors() {
        out.push_str(&d.sample_id);
        for v in &d.z {
            write!(out, ",{v}").unwrap();
        }
        if has_count {
            write!(out, ",{}", d.gt_count.unwrap()).unwrap();
        }
        if has_domain {
            write!(out, ",{}", d.true_domain.unwrap()).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads the CSV descriptor format.
pub fn load_descriptors_csv(path: impl AsRef<Path>) -> Result<DescriptorSet> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| GbError::BadHeader("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"id") {
        return Err(GbError::BadHeader("first column must be id".into()));
    }
    let mut rest = &cols[1..];
    let has_domain = rest.last() == Some(&"domain");
    if has_domain {
        rest = &rest[..rest.len() - 1];
    }
    let has_count = rest.last() == Some(&"count");
    if has_count {
        rest = &rest[..rest.len() - 1];
    }
    let dim = rest.len();
    if dim == 0 {
        return Err(GbError::BadHeader("no z columns".into()));
    }
    for (j, name) in rest.iter().enumerate() {
        if *name != format!("z{j}") {
            return Err(GbError::BadHeader(format!(
                "expected column z{j}, found {name:?}"
            )));
        }
    }
    let arity = 1 + dim + has_count as usize + has_domain as usize;
    let mut descriptors = Vec::new();
    for (line_no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != arity {
            return Err(GbError::RowArity {
                line: line_no + 1,
                expected: arity,
                found: fields.len(),
            });
        }
        let parse_f32 = |s: &str| -> Result<f32> {
            let v: f32 = s.parse().map_err(|_| GbError::BadValue {
                line: line_no + 1,
                msg: format!("not a number: {s:?}"),
            })?;
            if !v.is_finite() {
                return Err(GbError::NonFinite(format!("value at line {}", line_no + 1)));
            }
            Ok(v)
        };
        let mut z = Vec::with_capacity(dim);
        for s in &fields[1..1 + dim] {
            z.push(parse_f32(s)?);
        }
        let gt_count = if has_count {
            Some(parse_f32(fields[1 + dim])?)
        } else {
            None
        };
        let true_domain = if has_domain {
            let s = fields[arity - 1];
            Some(s.parse::<i32>().map_err(|_| GbError::BadValue {
                line: line_no + 1,
                msg: format!("not an integer domain: {s:?}"),
            })?)
        } else {
            None
        };
        descriptors.push(Descriptor {
            sample_id: fields[0].to_string(),
            z,
            gt_count,
            true_domain,
        });
    }
    DescriptorSet::new(descriptors)
}

/// Loads either format, sniffing the first byte (binary files start with the
/// JSON header's `{`).
pub fn load_descriptors(path: impl AsRef<Path>) -> Result<DescriptorSet> {
    let path = path.as_ref();
    let mut first = [0u8; 1];
    {
        use std::io::Read;
        let mut f = std::fs::File::open(path)?;
        let n = f.read(&mut first)?;
        if n == 0 {
            return Err(GbError::BadHeader("empty file".into()));
        }
    }
    if first[0] == b'{' {
        load_descriptors_binary(path)
    } else {
        load_descriptors_csv(path)
    }
}
