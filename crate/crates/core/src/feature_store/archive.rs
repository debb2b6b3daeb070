//! Binary archive of per-utterance, per-layer frame features.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DSUA" | version u32 = 1 | L u32 | D u32 | num_utts u32
//! index:   per utterance { id_len u16 | id (UTF-8) | T u32 | payload_offset u64 }
//! payload: per utterance L·T·D f32, layer-major then frame-major
//! ```
//!
//! `payload_offset` is the absolute byte offset of the utterance tensor from
//! the start of the file. Payloads are stored contiguously in index order.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"DSUA";
pub const ARCHIVE_VERSION: u32 = 1;

const HEADER_BYTES: u64 = 4 + 4 * 4;

/// One utterance: an `L × T × D` tensor of `f32` features.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    id: String,
    num_layers: usize,
    num_frames: usize,
    feature_dim: usize,
    values: Vec<f32>,
}

impl Utterance {
    /// `values` is laid out layer-major then frame-major.
    pub fn new(
        id: impl Into<String>,
        num_layers: usize,
        num_frames: usize,
        feature_dim: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        let id = id.into();
        validate_utt_id(&id)?;
        if num_frames == 0 {
            return Err(Error::Validation(format!("utterance `{id}` has no frames")));
        }
        if values.len() != num_layers * num_frames * feature_dim {
            return Err(Error::Validation(format!(
                "utterance `{id}`: {} values for shape {num_layers}x{num_frames}x{feature_dim}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "utterance `{id}` has non-finite value at flat index {pos}"
            )));
        }
        Ok(Self {
            id,
            num_layers,
            num_frames,
            feature_dim,
            values,
        })
    }

    /// Build from per-layer `T × D` matrices.
    pub fn from_layers<T: Scalar>(id: impl Into<String>, layers: &[Matrix<T>]) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::arg("utterance needs at least one layer"))?;
        let (t, d) = (first.rows(), first.cols());
        if layers.iter().any(|m| m.rows() != t || m.cols() != d) {
            return Err(Error::arg("layers disagree on frame count or dimension"));
        }
        let values = layers
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|v| v.as_f32()))
            .collect();
        Self::new(id, layers.len(), t, d, values)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Raw `T·D` slice of layer `layer` (0-based).
    pub fn layer(&self, layer: usize) -> &[f32] {
        let n = self.num_frames * self.feature_dim;
        &self.values[layer * n..(layer + 1) * n]
    }

    /// Layer `layer` (0-based) as a `T × D` matrix in the requested precision.
    pub fn layer_matrix<T: Scalar>(&self, layer: usize) -> Matrix<T> {
        let data = self.layer(layer).iter().map(|&v| T::of(v as f64)).collect();
        Matrix::from_vec(self.num_frames, self.feature_dim, data).expect("shape checked at construction")
    }

    pub fn layer_matrices<T: Scalar>(&self) -> Vec<Matrix<T>> {
        (0..self.num_layers).map(|l| self.layer_matrix(l)).collect()
    }
}

fn validate_utt_id(id: &str) -> Result<()> {
    if id.is_empty() {
        return Err(Error::Validation("utterance id is empty".into()));
    }
    if id.contains(['\t', '\n', '\r']) {
        return Err(Error::Validation(format!(
            "utterance id {id:?} contains a tab or newline"
        )));
    }
    if id.len() > u16::MAX as usize {
        return Err(Error::Validation("utterance id longer than 65535 bytes".into()));
    }
    Ok(())
}

/// Ordered collection of utterances sharing one `(L, D)` geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArchive {
    num_layers: usize,
    feature_dim: usize,
    utterances: Vec<Utterance>,
}

impl FeatureArchive {
    pub fn new(num_layers: usize, feature_dim: usize) -> Result<Self> {
        if num_layers == 0 || feature_dim == 0 {
            return Err(Error::Validation(
                "archive needs at least one layer and one feature dimension".into(),
            ));
        }
        Ok(Self {
            num_layers,
            feature_dim,
            utterances: Vec::new(),
        })
    }

    pub fn push(&mut self, utt: Utterance) -> Result<()> {
        if utt.num_layers != self.num_layers || utt.feature_dim != self.feature_dim {
            return Err(Error::Validation(format!(
                "utterance `{}` has geometry L={} D={}, archive has L={} D={}",
                utt.id, utt.num_layers, utt.feature_dim, self.num_layers, self.feature_dim
            )));
        }
        if self.utterances.iter().any(|u| u.id == utt.id) {
            return Err(Error::Validation(format!("duplicate utterance id `{}`", utt.id)));
        }
        self.utterances.push(utt);
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.num_frames).sum()
    }

    /// New archive holding the utterances for which `keep` returns true.
    pub fn filter(&self, mut keep: impl FnMut(&Utterance) -> bool) -> FeatureArchive {
        FeatureArchive {
            num_layers: self.num_layers,
            feature_dim: self.feature_dim,
            utterances: self.utterances.iter().filter(|u| keep(u)).cloned().collect(),
        }
    }

    /// Re-checks every invariant. Archives built through [`FeatureArchive::push`]
    /// always pass.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for u in &self.utterances {
            validate_utt_id(&u.id)?;
            if !seen.insert(u.id.as_str()) {
                return Err(Error::Validation(format!("duplicate utterance id `{}`", u.id)));
            }
            if u.num_layers != self.num_layers || u.feature_dim != self.feature_dim {
                return Err(Error::Validation(format!("utterance `{}` has wrong geometry", u.id)));
            }
            if u.num_frames == 0 {
                return Err(Error::Validation(format!("utterance `{}` has no frames", u.id)));
            }
            if u.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("utterance `{}` has non-finite values", u.id)));
            }
        }
        Ok(())
    }

    /// Serialize to `sink`, returning the number of bytes written.
    pub fn write_to<W: Write>(&self, sink: W) -> Result<u64> {
        self.validate()?;
        let mut w = CountingWriter { inner: sink, count: 0 };
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_u32::<LittleEndian>(ARCHIVE_VERSION)?;
        w.write_u32::<LittleEndian>(to_u32(self.num_layers, "L")?)?;
        w.write_u32::<LittleEndian>(to_u32(self.feature_dim, "D")?)?;
        w.write_u32::<LittleEndian>(to_u32(self.utterances.len(), "num_utts")?)?;

        let index_bytes: u64 = self
            .utterances
            .iter()
            .map(|u| 2 + u.id.len() as u64 + 4 + 8)
            .sum();
        let mut offset = HEADER_BYTES + index_bytes;
        for u in &self.utterances {
            w.write_u16::<LittleEndian>(u.id.len() as u16)?;
            w.write_all(u.id.as_bytes())?;
            w.write_u32::<LittleEndian>(to_u32(u.num_frames, "T")?)?;
            w.write_u64::<LittleEndian>(offset)?;
            offset += 4 * u.values.len() as u64;
        }
        for u in &self.utterances {
            for &v in &u.values {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(w.count)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<u64> {
        let file = BufWriter::new(File::create(path)?);
        self.write_to(file)
    }

    /// Parse an archive; truncated or inconsistent input is a corruption error.
    pub fn read_from<R: Read>(source: R) -> Result<Self> {
        let mut r = CountingReader { inner: source, count: 0 };
        let mut magic = [0u8; 4];
        read_exact_or(&mut r, &mut magic, "magic")?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::format(format!(
                "bad magic {:?}, expected \"DSUA\"",
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = read_u32(&mut r, "version")?;
        if version != ARCHIVE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: ARCHIVE_VERSION,
            });
        }
        let num_layers = read_u32(&mut r, "L")? as usize;
        let feature_dim = read_u32(&mut r, "D")? as usize;
        let num_utts = read_u32(&mut r, "num_utts")? as usize;
        let mut archive = FeatureArchive::new(num_layers, feature_dim)
            .map_err(|e| Error::Corruption(e.to_string()))?;

        let mut index = Vec::with_capacity(num_utts.min(1 << 16));
        for _ in 0..num_utts {
            let id_len = r
                .read_u16::<LittleEndian>()
                .map_err(|_| truncated("index entry"))? as usize;
            let mut id = vec![0u8; id_len];
            read_exact_or(&mut r, &mut id, "utterance id")?;
            let id = String::from_utf8(id)
                .map_err(|_| Error::Corruption("utterance id is not UTF-8".into()))?;
            let frames = read_u32(&mut r, "frame count")? as usize;
            let offset = r
                .read_u64::<LittleEndian>()
                .map_err(|_| truncated("payload offset"))?;
            index.push((id, frames, offset));
        }

        for (id, frames, offset) in index {
            if offset != r.count {
                return Err(Error::Corruption(format!(
                    "utterance `{id}` payload offset {offset} does not match position {}",
                    r.count
                )));
            }
            let n = num_layers
                .checked_mul(frames)
                .and_then(|v| v.checked_mul(feature_dim))
                .ok_or_else(|| Error::Corruption("payload size overflows".into()))?;
            let mut bytes = vec![0u8; n * 4];
            read_exact_or(&mut r, &mut bytes, "payload")?;
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let utt = Utterance::new(id, num_layers, frames, feature_dim, values)
                .map_err(|e| Error::Corruption(e.to_string()))?;
            archive.push(utt).map_err(|e| Error::Corruption(e.to_string()))?;
        }

        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Corruption("trailing bytes after payload".into()));
        }
        Ok(archive)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Validation(format!("{what} = {v} exceeds u32")))
}

fn truncated(what: &str) -> Error {
    Error::Corruption(format!("archive truncated while reading {what}"))
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof if what == "magic" => {
            Error::format("input shorter than the magic string")
        }
        std::io::ErrorKind::UnexpectedEof => truncated(what),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

struct CountingWriter<W> {
    inner: W,
    count: u64,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.count += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

struct CountingReader<R> {
    inner: R,
    count: u64,
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.count += n as u64;
        Ok(n)
    }
}
