//! Little-endian binary feature banks.
//!
//! Flat bank (`PRFB`):
//!
//! ```text
//! magic "PRFB" | version u16 | kind u8 | dim u32 | count u64
//! | count NUL-terminated UTF-8 ids | count*dim f32 | crc32 u32
//! ```
//!
//! Grouped bank (`PRFG`) has the same header and ids, then `count + 1`
//! u64 offsets, then `offsets[count] * dim` f32 rows, then the CRC.
//! The CRC32 covers every byte that precedes it.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ArtifactError;

pub const FLAT_MAGIC: &[u8; 4] = b"PRFB";
pub const GROUPED_MAGIC: &[u8; 4] = b"PRFG";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankKind {
    Fused,
    Question,
    Image,
    AnswerLogits,
}

impl BankKind {
    pub fn code(self) -> u8 {
        match self {
            BankKind::Fused => 0,
            BankKind::Question => 1,
            BankKind::Image => 2,
            BankKind::AnswerLogits => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BankKind::Fused),
            1 => Some(BankKind::Question),
            2 => Some(BankKind::Image),
            3 => Some(BankKind::AnswerLogits),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BankKind::Fused => "fused",
            BankKind::Question => "question",
            BankKind::Image => "image",
            BankKind::AnswerLogits => "answer_logits",
        }
    }
}

/// Dense `count × dim` f32 rows keyed by sample id.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    kind: BankKind,
    dim: usize,
    sample_ids: Vec<String>,
    rows: Vec<f32>,
    index: HashMap<String, usize>,
    norms: Vec<f64>,
}

impl PartialEq for FeatureBank {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.dim == other.dim
            && self.sample_ids == other.sample_ids
            && self.rows.iter().map(|v| v.to_bits()).eq(other.rows.iter().map(|v| v.to_bits()))
    }
}

impl FeatureBank {
    pub fn new(
        kind: BankKind,
        dim: usize,
        sample_ids: Vec<String>,
        rows: Vec<f32>,
    ) -> Result<Self, ArtifactError> {
        if dim == 0 {
            return Err(ArtifactError::Format("bank dim must be positive".into()));
        }
        if sample_ids.is_empty() {
            return Err(ArtifactError::Format("bank count must be positive".into()));
        }
        if rows.len() != sample_ids.len() * dim {
            return Err(ArtifactError::LengthMismatch {
                expected: sample_ids.len() * dim,
                actual: rows.len(),
            });
        }
        let index = index_ids(&sample_ids)?;
        if let Some(row) = first_non_finite_row(&rows, dim) {
            return Err(ArtifactError::NonFinite { row });
        }
        let norms = rows.chunks_exact(dim).map(norm64).collect();
        Ok(Self {
            kind,
            dim,
            sample_ids,
            rows,
            index,
            norms,
        })
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Euclidean norm of row `i`, computed in f64 at construction.
    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.row(i))
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.rows.len() * 4);
        write_header(&mut out, FLAT_MAGIC, self.kind, self.dim, &self.sample_ids);
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArtifactError> {
        let mut cur = Cursor::new(bytes);
        let header = read_header(&mut cur, FLAT_MAGIC)?;
        let float_count = header.count.checked_mul(header.dim).ok_or_else(|| {
            ArtifactError::Format("dim * count overflows".into())
        })?;
        let expected = float_count * 4 + 4;
        let remaining = cur.remaining();
        if remaining != expected {
            return Err(ArtifactError::LengthMismatch {
                expected,
                actual: remaining,
            });
        }
        let rows = cur.f32s(float_count)?;
        verify_crc(bytes, cur.pos)?;
        if let Some(row) = first_non_finite_row(&rows, header.dim) {
            return Err(ArtifactError::NonFinite { row });
        }
        Self::new(header.kind, header.dim, header.ids, rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArtifactError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| ArtifactError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ArtifactError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| ArtifactError::io(path, e))
    }
}

/// Ragged groups of rows, one group per sample (per-answer-word features).
#[derive(Debug, Clone)]
pub struct GroupedFeatureBank {
    kind: BankKind,
    dim: usize,
    sample_ids: Vec<String>,
    offsets: Vec<u64>,
    rows: Vec<f32>,
    index: HashMap<String, usize>,
}

impl PartialEq for GroupedFeatureBank {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.dim == other.dim
            && self.sample_ids == other.sample_ids
            && self.offsets == other.offsets
            && self.rows.iter().map(|v| v.to_bits()).eq(other.rows.iter().map(|v| v.to_bits()))
    }
}

impl GroupedFeatureBank {
    pub fn new(
        kind: BankKind,
        dim: usize,
        sample_ids: Vec<String>,
        offsets: Vec<u64>,
        rows: Vec<f32>,
    ) -> Result<Self, ArtifactError> {
        if dim == 0 {
            return Err(ArtifactError::Format("bank dim must be positive".into()));
        }
        if sample_ids.is_empty() {
            return Err(ArtifactError::Format("bank count must be positive".into()));
        }
        if offsets.len() != sample_ids.len() + 1 {
            return Err(ArtifactError::Format(format!(
                "expected {} offsets, found {}",
                sample_ids.len() + 1,
                offsets.len()
            )));
        }
        validate_offsets(&offsets, rows.len() / dim)?;
        if !rows.len().is_multiple_of(dim) {
            return Err(ArtifactError::LengthMismatch {
                expected: offsets[sample_ids.len()] as usize * dim,
                actual: rows.len(),
            });
        }
        let index = index_ids(&sample_ids)?;
        if let Some(row) = first_non_finite_row(&rows, dim) {
            return Err(ArtifactError::NonFinite { row });
        }
        Ok(Self {
            kind,
            dim,
            sample_ids,
            offsets,
            rows,
            index,
        })
    }

    /// Builds a bank from per-sample groups, each a list of `dim`-long rows.
    pub fn from_groups(
        kind: BankKind,
        dim: usize,
        groups: Vec<(String, Vec<Vec<f32>>)>,
    ) -> Result<Self, ArtifactError> {
        let mut ids = Vec::with_capacity(groups.len());
        let mut offsets = vec![0u64];
        let mut rows = Vec::new();
        for (id, group) in groups {
            for row in &group {
                if row.len() != dim {
                    return Err(ArtifactError::Format(format!(
                        "group {id} has a row of length {} (dim {dim})",
                        row.len()
                    )));
                }
                rows.extend_from_slice(row);
            }
            ids.push(id);
            offsets.push(offsets.last().unwrap() + group.len() as u64);
        }
        Self::new(kind, dim, ids, offsets, rows)
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn total_rows(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    pub fn group_len(&self, i: usize) -> usize {
        (self.offsets[i + 1] - self.offsets[i]) as usize
    }

    /// Rows of group `i`, flattened (`group_len(i) * dim` values).
    pub fn group(&self, i: usize) -> &[f32] {
        let start = self.offsets[i] as usize * self.dim;
        let end = self.offsets[i + 1] as usize * self.dim;
        &self.rows[start..end]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.position(id).map(|i| self.group(i))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.rows.len() * 4);
        write_header(&mut out, GROUPED_MAGIC, self.kind, self.dim, &self.sample_ids);
        for off in &self.offsets {
            out.extend_from_slice(&off.to_le_bytes());
        }
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArtifactError> {
        let mut cur = Cursor::new(bytes);
        let header = read_header(&mut cur, GROUPED_MAGIC)?;
        let offsets = cur.u64s(header.count + 1)?;
        let remaining = cur.remaining();
        if remaining < 4 || !(remaining - 4).is_multiple_of(header.dim * 4) {
            return Err(ArtifactError::LengthMismatch {
                expected: *offsets.last().unwrap() as usize * header.dim * 4 + 4,
                actual: remaining,
            });
        }
        let total = (remaining - 4) / (header.dim * 4);
        validate_offsets(&offsets, total)?;
        let rows = cur.f32s(total * header.dim)?;
        verify_crc(bytes, cur.pos)?;
        Self::new(header.kind, header.dim, header.ids, offsets, rows)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArtifactError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| ArtifactError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ArtifactError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| ArtifactError::io(path, e))
    }
}

fn validate_offsets(offsets: &[u64], total_rows: usize) -> Result<(), ArtifactError> {
    if offsets[0] != 0 {
        return Err(ArtifactError::Offsets(format!(
            "offsets[0] is {}, expected 0",
            offsets[0]
        )));
    }
    for (i, w) in offsets.windows(2).enumerate() {
        if w[1] < w[0] {
            return Err(ArtifactError::Offsets(format!(
                "offsets not monotone at index {}: {} < {}",
                i + 1,
                w[1],
                w[0]
            )));
        }
        if w[1] == w[0] {
            return Err(ArtifactError::Offsets(format!("group {i} is empty")));
        }
    }
    let last = *offsets.last().unwrap();
    if last as usize != total_rows {
        return Err(ArtifactError::Offsets(format!(
            "offsets end at {last} but payload holds {total_rows} rows"
        )));
    }
    Ok(())
}

fn index_ids(ids: &[String]) -> Result<HashMap<String, usize>, ArtifactError> {
    let mut index = HashMap::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.clone(), i).is_some() {
            return Err(ArtifactError::DuplicateId(id.clone()));
        }
    }
    Ok(index)
}

fn first_non_finite_row(rows: &[f32], dim: usize) -> Option<usize> {
    rows.iter().position(|v| !v.is_finite()).map(|i| i / dim)
}

pub(crate) fn norm64(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], kind: BankKind, dim: usize, ids: &[String]) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind.code());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for id in ids {
        out.extend_from_slice(id.as_bytes());
        out.push(0);
    }
}

struct Header {
    kind: BankKind,
    dim: usize,
    count: usize,
    ids: Vec<String>,
}

fn read_header(cur: &mut Cursor<'_>, magic: &[u8; 4]) -> Result<Header, ArtifactError> {
    let found = cur.take(4)?;
    if found != magic {
        return Err(ArtifactError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ArtifactError::Format(format!("unsupported bank version {version}")));
    }
    let code = cur.take(1)?[0];
    let kind = BankKind::from_code(code)
        .ok_or_else(|| ArtifactError::Format(format!("unknown bank kind code {code}")))?;
    let dim = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
    if dim == 0 || count == 0 {
        return Err(ArtifactError::Format(format!(
            "dim and count must be positive (dim {dim}, count {count})"
        )));
    }
    let mut ids = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let raw = cur.until_nul()?;
        let id = std::str::from_utf8(raw)
            .map_err(|_| ArtifactError::Format(format!("sample id {} is not UTF-8", ids.len())))?;
        ids.push(id.to_owned());
    }
    Ok(Header {
        kind,
        dim,
        count,
        ids,
    })
}

fn verify_crc(bytes: &[u8], payload_end: usize) -> Result<(), ArtifactError> {
    let stored = u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..payload_end]);
    if stored != computed {
        return Err(ArtifactError::Checksum { stored, computed });
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ArtifactError> {
        if self.remaining() < n {
            return Err(ArtifactError::Truncated { offset: self.pos });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn until_nul(&mut self) -> Result<&'a [u8], ArtifactError> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == 0)
            .ok_or(ArtifactError::Truncated { offset: self.pos })?;
        self.pos += end + 1;
        Ok(&rest[..end])
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, ArtifactError> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn u64s(&mut self, n: usize) -> Result<Vec<u64>, ArtifactError> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
