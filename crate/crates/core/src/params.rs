//! Model parameters as named groups over one flat `f32` vector, plus the
//! `.orbt` checkpoint format.
//!
//! Every group carries two exclusion flags. Groups excluded from distance are
//! invisible to L2 and sign dissimilarity; groups excluded from merge are
//! copied through untouched by back-merging and interpolation. The layout is
//! fixed when a store is built and shared between clones.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub exclude_from_distance: bool,
    pub exclude_from_merge: bool,
}

impl ParamGroup {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }

    fn excluded(&self, kind: MaskKind) -> bool {
        match kind {
            MaskKind::Distance => self.exclude_from_distance,
            MaskKind::Merge => self.exclude_from_merge,
        }
    }
}

/// Which exclusion flag a masked view honours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Distance,
    Merge,
}

/// Declarative description of one group, used to build a layout.
#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub name: String,
    pub len: usize,
    /// Sets both exclusion flags (SID-vocabulary groups).
    pub excluded: bool,
}

impl GroupSpec {
    pub fn included(name: &str, len: usize) -> Self {
        Self {
            name: name.to_owned(),
            len,
            excluded: false,
        }
    }

    pub fn excluded(name: &str, len: usize) -> Self {
        Self {
            name: name.to_owned(),
            len,
            excluded: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    values: Vec<f32>,
    groups: Arc<[ParamGroup]>,
}

impl ParamStore {
    /// Zero-initialised store with groups laid out contiguously in order.
    pub fn zeros(specs: &[GroupSpec]) -> Result<Self> {
        let mut groups = Vec::with_capacity(specs.len());
        let mut offset = 0usize;
        for spec in specs {
            if groups.iter().any(|g: &ParamGroup| g.name == spec.name) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate group name `{}`",
                    spec.name
                )));
            }
            groups.push(ParamGroup {
                name: spec.name.clone(),
                offset,
                len: spec.len,
                exclude_from_distance: spec.excluded,
                exclude_from_merge: spec.excluded,
            });
            offset += spec.len;
        }
        Ok(Self {
            values: vec![0.0; offset],
            groups: groups.into(),
        })
    }

    /// Builds a store from an explicit group table and payload, validating the
    /// layout invariants.
    pub fn from_parts(groups: Vec<ParamGroup>, values: Vec<f32>) -> Result<Self> {
        let mut expected = 0usize;
        for g in &groups {
            if g.offset != expected {
                return Err(Error::Malformed(format!(
                    "group `{}` starts at {} but previous group ends at {}",
                    g.name, g.offset, expected
                )));
            }
            expected = g
                .offset
                .checked_add(g.len)
                .ok_or_else(|| Error::Malformed(format!("group `{}` overflows", g.name)))?;
        }
        if expected != values.len() {
            return Err(Error::Malformed(format!(
                "group table covers {expected} scalars but payload has {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Malformed(format!("non-finite scalar at index {i}")));
        }
        Ok(Self {
            values,
            groups: groups.into(),
        })
    }

    /// Same layout, all values zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![0.0; self.values.len()],
            groups: Arc::clone(&self.groups),
        }
    }

    /// Same layout with the given values.
    pub fn with_values(&self, values: Vec<f32>) -> Self {
        assert_eq!(
            values.len(),
            self.values.len(),
            "payload length must match layout"
        );
        Self {
            values,
            groups: Arc::clone(&self.groups),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn group_values(&self, name: &str) -> Option<&[f32]> {
        self.group(name).map(|g| &self.values[g.range()])
    }

    pub fn group_values_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let range = self.group(name)?.range();
        Some(&mut self.values[range])
    }

    /// Ordered, coalesced index ranges of every group whose exclusion flag for
    /// `kind` is cleared.
    pub fn masked_view(&self, kind: MaskKind) -> Vec<Range<usize>> {
        let mut ranges: Vec<Range<usize>> = Vec::new();
        for g in self
            .groups
            .iter()
            .filter(|g| !g.excluded(kind) && g.len > 0)
        {
            match ranges.last_mut() {
                Some(last) if last.end == g.offset => last.end = g.offset + g.len,
                _ => ranges.push(g.range()),
            }
        }
        ranges
    }

    /// Number of scalars covered by `masked_view(kind)`.
    pub fn included_count(&self, kind: MaskKind) -> usize {
        self.groups
            .iter()
            .filter(|g| !g.excluded(kind))
            .map(|g| g.len)
            .sum()
    }

    /// Iterator over the included scalars for `kind`, in flat order.
    pub fn masked_values(&self, kind: MaskKind) -> impl Iterator<Item = f32> + '_ {
        self.masked_view(kind)
            .into_iter()
            .flat_map(move |r| self.values[r].iter().copied())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Succeeds iff both stores have identical group names, offsets, lengths and
/// flags. Reports the first differing group.
pub fn assert_compatible(a: &ParamStore, b: &ParamStore) -> Result<()> {
    if Arc::ptr_eq(&a.groups, &b.groups) {
        return Ok(());
    }
    for (i, (ga, gb)) in a.groups.iter().zip(b.groups.iter()).enumerate() {
        let detail = if ga.name != gb.name {
            format!("name `{}` vs `{}` at position {i}", ga.name, gb.name)
        } else if ga.offset != gb.offset {
            format!("offset {} vs {}", ga.offset, gb.offset)
        } else if ga.len != gb.len {
            format!("length {} vs {}", ga.len, gb.len)
        } else if ga.exclude_from_distance != gb.exclude_from_distance {
            "exclude_from_distance flag".to_owned()
        } else if ga.exclude_from_merge != gb.exclude_from_merge {
            "exclude_from_merge flag".to_owned()
        } else {
            continue;
        };
        return Err(Error::Incompatible {
            group: ga.name.clone(),
            detail,
        });
    }
    if a.groups.len() != b.groups.len() {
        let (longer, n) = if a.groups.len() > b.groups.len() {
            (a, b.groups.len())
        } else {
            (b, a.groups.len())
        };
        return Err(Error::Incompatible {
            group: longer.groups[n].name.clone(),
            detail: format!("group count {} vs {}", a.groups.len(), b.groups.len()),
        });
    }
    Ok(())
}

/// A parameter snapshot plus the run metadata needed to resume analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub step: u64,
    pub cumulative_merges: u64,
    pub rng_seed: u64,
    /// Free-form; the trainer stores model hyperparameters here as JSON.
    pub tag: String,
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ORBT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_EXTENSION: &str = "orbt";

impl Checkpoint {
    pub fn new(store: ParamStore, step: u64) -> Self {
        Self {
            store,
            step,
            cumulative_merges: 0,
            rng_seed: 0,
            tag: String::new(),
        }
    }

    /// Serialises to the `.orbt` little-endian layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.tag.len() + self.store.len() * 4);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.cumulative_merges.to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&(self.tag.len() as u32).to_le_bytes());
        out.extend_from_slice(self.tag.as_bytes());
        out.extend_from_slice(&(self.store.groups.len() as u32).to_le_bytes());
        for g in self.store.groups.iter() {
            out.extend_from_slice(&(g.name.len() as u32).to_le_bytes());
            out.extend_from_slice(g.name.as_bytes());
            out.extend_from_slice(&(g.offset as u64).to_le_bytes());
            out.extend_from_slice(&(g.len as u64).to_le_bytes());
            out.push(g.exclude_from_distance as u8);
            out.push(g.exclude_from_merge as u8);
        }
        out.extend_from_slice(&(self.store.len() as u64).to_le_bytes());
        for v in &self.store.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn read_from<R: Read>(reader: R) -> Result<Self> {
        let mut r = Reader { inner: reader };
        let mut magic = [0u8; 4];
        r.exact(&mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let step = r.u64()?;
        let cumulative_merges = r.u64()?;
        let rng_seed = r.u64()?;
        let tag = r.string()?;
        let group_count = r.u32()? as usize;
        let mut groups = Vec::with_capacity(group_count.min(1024));
        for _ in 0..group_count {
            let name = r.string()?;
            let offset = r.len()?;
            let len = r.len()?;
            let exclude_from_distance = r.flag()?;
            let exclude_from_merge = r.flag()?;
            groups.push(ParamGroup {
                name,
                offset,
                len,
                exclude_from_distance,
                exclude_from_merge,
            });
        }
        let count = r.len()?;
        let mut payload = Vec::new();
        (&mut r.inner)
            .take(count as u64 * 4)
            .read_to_end(&mut payload)?;
        if payload.len() != count * 4 {
            return Err(Error::Truncated);
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut trailing = [0u8; 1];
        if r.inner.read(&mut trailing)? != 0 {
            return Err(Error::Malformed("trailing bytes after payload".to_owned()));
        }
        let store = ParamStore::from_parts(groups, values)?;
        Ok(Self {
            store,
            step,
            cumulative_merges,
            rng_seed,
            tag,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => Error::Truncated,
            _ => Error::Io(e),
        })
    }

    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .map_err(|_| Error::Malformed(format!("length {v} exceeds address space")))
    }

    fn flag(&mut self) -> Result<bool> {
        let mut b = [0u8; 1];
        self.exact(&mut b)?;
        match b[0] {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Malformed(format!("flag byte {other}"))),
        }
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let mut buf = Vec::new();
        (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        if buf.len() != n {
            return Err(Error::Truncated);
        }
        String::from_utf8(buf).map_err(|e| Error::Malformed(format!("invalid utf-8: {e}")))
    }
}
