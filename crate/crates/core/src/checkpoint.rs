//! The `MPCK` checkpoint container.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! "MPCK"                      magic
//! u32 version                 currently 1
//! u32 scalar_bytes            4 (f32) or 8 (f64) for every parameter block
//! u32 input_dim
//! u32 class_count
//! u32 hidden_count, then hidden_count x u32 width
//! per affine layer, input side first:
//!     weight block            outputs x inputs scalars, row-major
//!     bias block              outputs scalars
//! u128 rng_position           shuffle stream position in 32-bit words
//! sections until end of file:
//!     [u8; 4] tag, u64 payload length, payload
//! ```
//!
//! Sections written by this crate:
//!
//! * `META`: u64 epoch, f64 train accuracy, f64 loss, f64 wall seconds.
//! * `VELO`: momentum buffers laid out like the parameter blocks.
//! * `SUBS`, `VELP`, `LRPB`: probe artifacts, see the probe modules.
//!
//! Readers skip unknown tags.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::mlp::{CheckpointRecord, Dense, MlpParams, MlpSpec, Real};

pub const MAGIC: &[u8; 4] = b"MPCK";
pub const VERSION: u32 = 1;

pub const TAG_META: [u8; 4] = *b"META";
pub const TAG_VELOCITY: [u8; 4] = *b"VELO";
pub const TAG_SUBSPACES: [u8; 4] = *b"SUBS";
pub const TAG_VELPIC: [u8; 4] = *b"VELP";
pub const TAG_LR_PROBE: [u8; 4] = *b"LRPB";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint stores {stored}-byte reals, reader expects {expected}")]
    ScalarWidth { stored: u32, expected: usize },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Tagged payload after the parameter blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub tag: [u8; 4],
    pub payload: Vec<u8>,
}

impl Section {
    pub fn new(tag: [u8; 4], payload: Vec<u8>) -> Self {
        Self { tag, payload }
    }

    pub fn tag_str(&self) -> String {
        String::from_utf8_lossy(&self.tag).into_owned()
    }
}

/// Little-endian byte sink.
#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn len_u32(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("dimension fits in u32"));
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn reals<T: Real>(&mut self, vs: &[T]) {
        for v in vs {
            v.write_le(&mut self.buf);
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

/// Little-endian byte source with truncation checks.
#[derive(Debug)]
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub fn u128(&mut self, what: &'static str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array(what)?))
    }

    pub fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    pub fn len_u32(&mut self, what: &'static str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    pub fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn reals<T: Real>(&mut self, n: usize, what: &'static str) -> Result<Vec<T>> {
        let bytes = self.take(n.checked_mul(T::BYTES).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
    }

    pub fn finish(&self, what: &'static str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes in {what}",
                self.remaining()
            )));
        }
        Ok(())
    }
}

fn write_blocks<T: Real>(w: &mut ByteWriter, p: &MlpParams<T>) {
    for layer in &p.layers {
        w.reals(&layer.weight);
        w.reals(&layer.bias);
    }
}

fn read_blocks<T: Real>(r: &mut ByteReader, spec: &MlpSpec) -> Result<MlpParams<T>> {
    let mut layers = Vec::new();
    for (i, o) in spec.layer_shapes() {
        let weight = r.reals::<T>(i * o, "weight block")?;
        let bias = r.reals::<T>(o, "bias block")?;
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(CheckpointError::Malformed("non-finite parameter".into()));
        }
        layers.push(Dense {
            inputs: i,
            outputs: o,
            weight,
            bias,
        });
    }
    Ok(MlpParams {
        spec: spec.clone(),
        layers,
    })
}

/// Serializes a checkpoint with its `META` and `VELO` sections plus `extra`.
pub fn encode<T: Real>(record: &CheckpointRecord<T>, extra: &[Section]) -> Vec<u8> {
    let spec = &record.params.spec;
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.len_u32(T::BYTES);
    w.len_u32(spec.input_dim);
    w.len_u32(spec.class_count);
    w.len_u32(spec.hidden.len());
    for h in &spec.hidden {
        w.len_u32(*h);
    }
    write_blocks(&mut w, &record.params);
    w.u128(record.rng_position);

    let mut meta = ByteWriter::new();
    meta.u64(record.epoch as u64);
    meta.f64(record.train_accuracy);
    meta.f64(record.loss);
    meta.f64(record.wall_seconds);
    let mut velo = ByteWriter::new();
    write_blocks(&mut velo, &record.velocity);

    let sections = [
        Section::new(TAG_META, meta.into_inner()),
        Section::new(TAG_VELOCITY, velo.into_inner()),
    ];
    for s in sections.iter().chain(extra) {
        w.bytes(&s.tag);
        w.u64(s.payload.len() as u64);
        w.bytes(&s.payload);
    }
    w.into_inner()
}

/// Parses a checkpoint. Sections other than `META` and `VELO` are returned
/// in file order. A missing `VELO` yields zero momentum.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(CheckpointRecord<T>, Vec<Section>)> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let width = r.u32("scalar width")?;
    if width as usize != T::BYTES {
        return Err(CheckpointError::ScalarWidth {
            stored: width,
            expected: T::BYTES,
        });
    }
    let input_dim = r.len_u32("spec header")?;
    let class_count = r.len_u32("spec header")?;
    let hidden_count = r.len_u32("spec header")?;
    if hidden_count > r.remaining() / 4 {
        return Err(CheckpointError::Truncated("spec header"));
    }
    let hidden = (0..hidden_count)
        .map(|_| r.len_u32("spec header"))
        .collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec::new(input_dim, hidden, class_count).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let params = read_blocks::<T>(&mut r, &spec)?;
    let rng_position = r.u128("rng position")?;

    let mut record = CheckpointRecord {
        epoch: 0,
        velocity: MlpParams::zeros(&spec),
        params,
        rng_position,
        train_accuracy: f64::NAN,
        loss: f64::NAN,
        wall_seconds: 0.0,
    };
    let mut extra = Vec::new();
    let mut seen_meta = false;
    while r.remaining() > 0 {
        let tag: [u8; 4] = r.take(4, "section tag")?.try_into().expect("4 bytes");
        let len = usize::try_from(r.u64("section length")?).map_err(|_| CheckpointError::Truncated("section"))?;
        let payload = r.take(len, "section payload")?;
        match tag {
            TAG_META => {
                let mut m = ByteReader::new(payload);
                record.epoch = m.u64("META")? as usize;
                record.train_accuracy = m.f64("META")?;
                record.loss = m.f64("META")?;
                record.wall_seconds = m.f64("META")?;
                m.finish("META")?;
                seen_meta = true;
            }
            TAG_VELOCITY => {
                let mut v = ByteReader::new(payload);
                record.velocity = read_blocks(&mut v, &spec)?;
                v.finish("VELO")?;
            }
            _ => extra.push(Section::new(tag, payload.to_vec())),
        }
    }
    if !seen_meta {
        return Err(CheckpointError::Malformed("missing META section".into()));
    }
    Ok((record, extra))
}

/// Writes through a temporary file and a rename, so a crash never leaves a
/// half-written checkpoint under the final name.
pub fn write_file<T: Real>(path: &Path, record: &CheckpointRecord<T>, extra: &[Section]) -> Result<()> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("mpck.tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&encode(record, extra)).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn read_file<T: Real>(path: &Path) -> Result<(CheckpointRecord<T>, Vec<Section>)> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
