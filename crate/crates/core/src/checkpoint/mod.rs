//! Checkpoint storage: lazy reading, streaming writing and cross-model
//! compatibility checks.

mod compat;
mod dtype;
mod header;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use compat::{validate_compatibility, CompatReport, NameFilter, SkipReason, Skipped};
pub use dtype::{decode, encode, Dtype};
pub use header::{parse_header, serialize_header, Header, TensorMeta, MAX_HEADER_LEN, METADATA_KEY};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An opened checkpoint file. Reads are positional, so one handle can serve
/// many threads at once.
#[derive(Debug)]
pub struct CheckpointFile {
    path: PathBuf,
    file: File,
    data_start: u64,
    bytes_read: AtomicU64,
}

impl CheckpointFile {
    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Total bytes pulled from disk so far, header included.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    fn read_range(&self, begin: u64, end: u64) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; (end - begin) as usize];
        self.file
            .read_exact_at(&mut buf, self.data_start + begin)
            .map_err(|e| Error::io(&self.path, e))?;
        self.bytes_read.fetch_add(end - begin, Ordering::Relaxed);
        Ok(buf)
    }
}

/// A tensor payload in its storage dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Arc<[u8]>,
}

impl RawTensor {
    pub fn from_tensor<T: Scalar>(tensor: &Tensor<T>, dtype: Dtype) -> Result<Self> {
        Ok(Self {
            dtype,
            shape: tensor.shape().to_vec(),
            bytes: encode(dtype, tensor.data())?.into(),
        })
    }

    /// Wrap integer or raw bytes (used for masks and verbatim copies).
    pub fn from_bytes(dtype: Dtype, shape: Vec<usize>, bytes: Vec<u8>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel * dtype.width() != bytes.len() {
            return Err(Error::Consistency(format!(
                "{} bytes do not fit shape {shape:?} of {dtype}",
                bytes.len()
            )));
        }
        Ok(Self {
            dtype,
            shape,
            bytes: bytes.into(),
        })
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), decode(self.dtype, &self.bytes)?)
    }

    /// Re-encode into another float dtype; non-float payloads are returned as is.
    pub fn convert(&self, dtype: Dtype) -> Result<Self> {
        if dtype == self.dtype || !self.dtype.is_float() {
            return Ok(self.clone());
        }
        let values: Vec<f64> = decode(self.dtype, &self.bytes)?;
        Ok(Self {
            dtype,
            shape: self.shape.clone(),
            bytes: encode(dtype, &values)?.into(),
        })
    }
}

#[derive(Debug, Clone)]
enum Payload {
    Lazy { file: Arc<CheckpointFile>, offsets: (u64, u64) },
    Loaded(Arc<[u8]>),
}

#[derive(Debug, Clone)]
struct Entry {
    dtype: Dtype,
    shape: Vec<usize>,
    payload: Payload,
}

/// Named tensors in canonical (lexicographic) order. Entries are either
/// backed by an opened file and read on demand, or held in memory.
#[derive(Debug, Clone, Default)]
pub struct WeightMap {
    entries: BTreeMap<String, Entry>,
    metadata: BTreeMap<String, String>,
}

impl WeightMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Open a checkpoint, reading only the header.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        open_checkpoint(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn dtype(&self, name: &str) -> Result<Dtype> {
        self.entry(name).map(|e| e.dtype)
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        self.entry(name).map(|e| e.shape.as_slice())
    }

    pub fn numel(&self, name: &str) -> Result<usize> {
        self.shape(name).map(|s| s.iter().product())
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Metadata for every tensor in canonical order. For in-memory entries the
    /// offsets are those a freshly written file would use.
    pub fn metas(&self) -> Vec<TensorMeta> {
        let mut cursor = 0u64;
        self.entries
            .iter()
            .map(|(name, e)| {
                let offsets = match &e.payload {
                    Payload::Lazy { offsets, .. } => *offsets,
                    Payload::Loaded(bytes) => (cursor, cursor + bytes.len() as u64),
                };
                cursor = offsets.1;
                TensorMeta {
                    name: name.clone(),
                    dtype: e.dtype,
                    shape: e.shape.clone(),
                    data_offsets: offsets,
                }
            })
            .collect()
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries.get(name).ok_or_else(|| Error::Lookup(name.to_string()))
    }

    /// The payload in its storage dtype.
    pub fn read_raw(&self, name: &str) -> Result<RawTensor> {
        let e = self.entry(name)?;
        let bytes = match &e.payload {
            Payload::Loaded(bytes) => bytes.clone(),
            Payload::Lazy { file, offsets } => file.read_range(offsets.0, offsets.1)?.into(),
        };
        Ok(RawTensor {
            dtype: e.dtype,
            shape: e.shape.clone(),
            bytes,
        })
    }

    /// Read a float tensor converted to the working precision `T`. Widening
    /// from f16/bf16/f32 is exact.
    pub fn read_tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let raw = self.read_raw(name)?;
        if !raw.dtype.is_float() {
            return Err(Error::Consistency(format!(
                "tensor {name} has non-float dtype {}",
                raw.dtype
            )));
        }
        raw.to_tensor()
    }

    /// Shorthand for the production working precision.
    pub fn read_f32(&self, name: &str) -> Result<Tensor<f32>> {
        self.read_tensor(name)
    }

    pub fn insert_raw(&mut self, name: impl Into<String>, raw: RawTensor) {
        self.entries.insert(
            name.into(),
            Entry {
                dtype: raw.dtype,
                shape: raw.shape,
                payload: Payload::Loaded(raw.bytes),
            },
        );
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>, dtype: Dtype) -> Result<()> {
        self.insert_raw(name, RawTensor::from_tensor(tensor, dtype)?);
        Ok(())
    }

    /// Insert in the scalar's own dtype.
    pub fn insert_native<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.insert(name, tensor, T::DTYPE).expect("native dtype always encodes");
    }

    /// Read every payload into memory.
    pub fn materialize(&self) -> Result<WeightMap> {
        let mut out = WeightMap {
            entries: BTreeMap::new(),
            metadata: self.metadata.clone(),
        };
        for name in self.entries.keys() {
            out.insert_raw(name.clone(), self.read_raw(name)?);
        }
        Ok(out)
    }

    /// Bytes read from backing files so far (zero for purely in-memory maps).
    pub fn bytes_read(&self) -> u64 {
        let mut seen = Vec::new();
        let mut total = 0;
        for e in self.entries.values() {
            if let Payload::Lazy { file, .. } = &e.payload {
                if !seen.iter().any(|f| Arc::ptr_eq(f, file)) {
                    total += file.bytes_read();
                    seen.push(file.clone());
                }
            }
        }
        total
    }
}

/// Open a checkpoint lazily: only the header is read.
pub fn open_checkpoint(path: impl AsRef<Path>) -> Result<WeightMap> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = file.metadata().map_err(|e| Error::io(path, e))?.len();

    let mut len_bytes = [0u8; 8];
    if file_len < 8 {
        return Err(Error::format("header_length", "header length truncated"));
    }
    file.read_exact(&mut len_bytes).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len_bytes);
    if header_len > MAX_HEADER_LEN {
        return Err(Error::format(
            "header_length",
            format!("header length {header_len} exceeds the {MAX_HEADER_LEN}-byte limit"),
        ));
    }
    if header_len > file_len - 8 {
        return Err(Error::format(
            "header_length",
            format!("header length {header_len} runs past end of file ({file_len} bytes)"),
        ));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    file.read_exact(&mut header_bytes).map_err(|e| Error::io(path, e))?;
    let data_start = 8 + header_len;
    let header = parse_header(&header_bytes, file_len - data_start)?;

    let handle = Arc::new(CheckpointFile {
        path: path.to_path_buf(),
        file,
        data_start,
        bytes_read: AtomicU64::new(data_start),
    });
    let entries = header
        .tensors
        .into_iter()
        .map(|t| {
            (
                t.name,
                Entry {
                    dtype: t.dtype,
                    shape: t.shape,
                    payload: Payload::Lazy {
                        file: handle.clone(),
                        offsets: t.data_offsets,
                    },
                },
            )
        })
        .collect();
    Ok(WeightMap {
        entries,
        metadata: header.metadata,
    })
}

/// How float tensors are stored on write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtypePolicy {
    /// Keep each tensor's dtype.
    #[default]
    Keep,
    /// Store every float tensor as F32.
    #[serde(rename = "f32")]
    ForceF32,
}

impl DtypePolicy {
    pub fn resolve(self, dtype: Dtype) -> Dtype {
        match self {
            DtypePolicy::Keep => dtype,
            DtypePolicy::ForceF32 if dtype.is_float() => Dtype::F32,
            DtypePolicy::ForceF32 => dtype,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WriteOptions {
    pub dtype_policy: DtypePolicy,
    /// Reject NaN/Inf in float tensors.
    pub strict_finite: bool,
}

fn check_finite(name: &str, raw: &RawTensor) -> Result<()> {
    if !raw.dtype.is_float() {
        return Ok(());
    }
    let values: Vec<f64> = decode(raw.dtype, &raw.bytes)?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!(
            "non-finite value in tensor {name} (index {i})"
        )));
    }
    Ok(())
}

/// Writes a checkpoint one tensor at a time. The layout is fixed up front from
/// the declared tensors, which must then be written in canonical name order.
/// Data goes to a sibling `.partial` file that is renamed on [`finish`] and
/// removed if the writer is dropped early.
///
/// [`finish`]: CheckpointWriter::finish
pub struct CheckpointWriter {
    target: PathBuf,
    partial: PathBuf,
    out: Option<BufWriter<File>>,
    metas: Vec<TensorMeta>,
    next: usize,
    strict_finite: bool,
}

impl CheckpointWriter {
    /// `tensors` lists (name, stored dtype, shape); it is sorted by name here.
    pub fn create(
        path: impl AsRef<Path>,
        mut tensors: Vec<(String, Dtype, Vec<usize>)>,
        metadata: &BTreeMap<String, String>,
        strict_finite: bool,
    ) -> Result<Self> {
        let target = path.as_ref().to_path_buf();
        tensors.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = tensors.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::Consistency(format!("duplicate tensor name {}", w[0].0)));
        }
        let mut cursor = 0u64;
        let metas: Vec<TensorMeta> = tensors
            .into_iter()
            .map(|(name, dtype, shape)| {
                let len = (shape.iter().product::<usize>() * dtype.width()) as u64;
                let meta = TensorMeta {
                    name,
                    dtype,
                    shape,
                    data_offsets: (cursor, cursor + len),
                };
                cursor += len;
                meta
            })
            .collect();
        let header = serialize_header(&metas, metadata);

        let mut partial = target.clone().into_os_string();
        partial.push(".partial");
        let partial = PathBuf::from(partial);
        let file = File::create(&partial).map_err(|e| Error::io(&partial, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&(header.len() as u64).to_le_bytes())
            .and_then(|_| out.write_all(&header))
            .map_err(|e| Error::io(&partial, e))?;
        Ok(Self {
            target,
            partial,
            out: Some(out),
            metas,
            next: 0,
            strict_finite,
        })
    }

    /// Name of the tensor expected next, if any.
    pub fn next_name(&self) -> Option<&str> {
        self.metas.get(self.next).map(|m| m.name.as_str())
    }

    pub fn write_tensor(&mut self, name: &str, raw: &RawTensor) -> Result<()> {
        let meta = self
            .metas
            .get(self.next)
            .ok_or_else(|| Error::Consistency(format!("tensor {name} written past the declared set")))?;
        if meta.name != name || meta.shape != raw.shape {
            return Err(Error::Consistency(format!(
                "expected tensor {} {:?}, got {name} {:?}",
                meta.name, meta.shape, raw.shape
            )));
        }
        let raw = raw.convert(meta.dtype)?;
        if raw.dtype != meta.dtype {
            return Err(Error::Consistency(format!(
                "tensor {name} declared as {} but payload is {}",
                meta.dtype, raw.dtype
            )));
        }
        if self.strict_finite {
            check_finite(name, &raw)?;
        }
        let out = self.out.as_mut().expect("writer is open");
        out.write_all(&raw.bytes).map_err(|e| Error::io(&self.partial, e))?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.next != self.metas.len() {
            return Err(Error::Consistency(format!(
                "{} of {} tensors written",
                self.next,
                self.metas.len()
            )));
        }
        let out = self.out.take().expect("writer is open");
        let file = out.into_inner().map_err(|e| Error::io(&self.partial, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&self.partial, e))?;
        drop(file);
        std::fs::rename(&self.partial, &self.target).map_err(|e| Error::io(&self.target, e))?;
        Ok(())
    }
}

impl Drop for CheckpointWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = std::fs::remove_file(&self.partial);
        }
    }
}

/// Write a whole map. Under [`DtypePolicy::Keep`] payloads are copied byte for
/// byte.
pub fn write_checkpoint(path: impl AsRef<Path>, map: &WeightMap, options: WriteOptions) -> Result<()> {
    let tensors = map
        .entries
        .iter()
        .map(|(n, e)| (n.clone(), options.dtype_policy.resolve(e.dtype), e.shape.clone()))
        .collect();
    let mut writer = CheckpointWriter::create(path, tensors, &map.metadata, options.strict_finite)?;
    for name in map.entries.keys() {
        writer.write_tensor(name, &map.read_raw(name)?)?;
    }
    writer.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map() -> WeightMap {
        let mut m = WeightMap::new();
        m.insert_native("w", &Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap());
        m.insert_native("b", &Tensor::new(vec![2], vec![0.5f32, -0.5]).unwrap());
        m
    }

    #[test]
    fn open_is_lazy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        write_checkpoint(&path, &sample_map(), WriteOptions::default()).unwrap();
        let map = open_checkpoint(&path).unwrap();
        assert_eq!(map.len(), 2);
        let file_len = std::fs::metadata(&path).unwrap().len();
        let payload = 24;
        assert_eq!(map.bytes_read(), file_len - payload);
        map.read_raw("w").unwrap();
        assert_eq!(map.bytes_read(), file_len - payload + 16);
    }

    #[test]
    fn empty_file_is_truncated_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty");
        std::fs::write(&path, b"").unwrap();
        let err = open_checkpoint(&path).unwrap_err();
        assert_eq!(err.category(), "format");
        assert!(err.to_string().contains("header length truncated"));
    }

    #[test]
    fn missing_name_is_lookup_error() {
        let err = sample_map().read_f32("missing").unwrap_err();
        assert_eq!(err.category(), "lookup");
    }

    #[test]
    fn round_trip_keeps_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut m = sample_map();
        m.insert("h", &Tensor::from_vec(vec![1.5f32, -2.25]), Dtype::BF16).unwrap();
        m.insert_raw("ids", RawTensor::from_bytes(Dtype::I64, vec![2], [7i64, -1].iter().flat_map(|v| v.to_le_bytes()).collect()).unwrap());
        m.metadata_mut().insert("k".into(), "v".into());
        write_checkpoint(&path, &m, WriteOptions::default()).unwrap();
        let back = open_checkpoint(&path).unwrap();
        assert_eq!(back.metadata(), m.metadata());
        for name in m.names() {
            assert_eq!(back.read_raw(name).unwrap(), m.read_raw(name).unwrap());
        }
    }

    #[test]
    fn force_f32_widens_half_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut m = WeightMap::new();
        m.insert("h", &Tensor::from_vec(vec![1.5f32]), Dtype::F16).unwrap();
        write_checkpoint(
            &path,
            &m,
            WriteOptions {
                dtype_policy: DtypePolicy::ForceF32,
                strict_finite: false,
            },
        )
        .unwrap();
        let back = open_checkpoint(&path).unwrap();
        assert_eq!(back.dtype("h").unwrap(), Dtype::F32);
        assert_eq!(back.read_f32("h").unwrap().data(), &[1.5]);
    }

    #[test]
    fn strict_finite_rejects_nan_and_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut m = WeightMap::new();
        m.insert_native("w", &Tensor::from_vec(vec![1.0f32, f32::NAN]));
        let err = write_checkpoint(
            &path,
            &m,
            WriteOptions {
                dtype_policy: DtypePolicy::Keep,
                strict_finite: true,
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("non-finite value in tensor w"), "{err}");
        assert!(!path.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let err = write_checkpoint("/nonexistent-dir/x/m.safetensors", &sample_map(), WriteOptions::default()).unwrap_err();
        assert_eq!(err.category(), "io");
    }
}
