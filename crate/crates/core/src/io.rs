//! Little-endian binary formats: tensor files, compressed index streams,
//! a named-entry container, and 8-bit grayscale previews.
//!
//! Tensor file: `"UDT1"`, dtype code `u8` (1 = f32, 2 = f64, 3 = u16),
//! `ndim` as `u8`, `ndim` dims as `u64`, then the row-major payload.
//!
//! Stream file: `"UVQ1"`, `n1 n2 n3 L` as `u32`, a 32-byte model
//! fingerprint, then `n1 n2 n3` row-major `u16` indices.
//!
//! Container: `"UDC1"`, entry count as `u32`, then per entry the name length
//! (`u32`), the UTF-8 name, the payload length (`u64`) and the payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vq::IndexGrid;

pub const TENSOR_MAGIC: [u8; 4] = *b"UDT1";
pub const STREAM_MAGIC: [u8; 4] = *b"UVQ1";
pub const CONTAINER_MAGIC: [u8; 4] = *b"UDC1";

/// Bytes before the index body of a stream file.
pub const STREAM_HEADER_LEN: usize = 4 + 4 * 4 + 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    U16 = 3,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            3 => Ok(Dtype::U16),
            _ => Err(Error::Malformed(format!("unknown dtype code {code}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U16 => 2,
        }
    }
}

/// Payload of a tensor file in its stored element type.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U16(Vec<u16>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::U16(_) => Dtype::U16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoded contents of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.len() > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("{} dimensions exceed 255", shape.len())));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "{} elements do not fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: TensorData::F64(t.data().to_vec()),
        }
    }

    /// The payload as an `f64` tensor; other dtypes are a mismatch.
    pub fn into_tensor(self) -> Result<Tensor> {
        match self.data {
            TensorData::F64(v) => Tensor::from_vec(&self.shape, v),
            other => Err(Error::DtypeMismatch {
                expected: Dtype::F64.code(),
                found: other.dtype().code(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.data.dtype();
        let mut out = Vec::with_capacity(6 + 8 * self.shape.len() + dtype.size() * self.data.len());
        out.extend_from_slice(&TENSOR_MAGIC);
        out.push(dtype.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "tensor file");
        r.magic(TENSOR_MAGIC)?;
        let dtype = Dtype::from_code(r.u8()?)?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.len_u64()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Malformed(format!("shape {shape:?} overflows")))?;
        let payload = r.take(
            n.checked_mul(dtype.size())
                .ok_or_else(|| Error::Malformed(format!("shape {shape:?} overflows")))?,
        )?;
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U16 => TensorData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        r.finish()?;
        Ok(Self { shape, data })
    }
}

/// Writes an `f64` tensor file.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path, &TensorFile::from_tensor(t).to_bytes())
}

/// Reads an `f64` tensor file.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    TensorFile::from_bytes(&fs::read(path)?)?.into_tensor()
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &TensorFile) -> Result<()> {
    write_atomic(path, &t.to_bytes())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    TensorFile::from_bytes(&fs::read(path)?)
}

/// Transmitted code indices plus the fingerprint of the model that made them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedStream {
    pub codebook_size: usize,
    pub fingerprint: [u8; 32],
    pub indices: IndexGrid,
}

impl CompressedStream {
    pub fn new(indices: IndexGrid, codebook_size: usize, fingerprint: [u8; 32]) -> Result<Self> {
        if indices.shape().len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "stream needs a 3D index grid, got {:?}",
                indices.shape()
            )));
        }
        if let Some(&i) = indices.indices().iter().find(|&&i| i as usize >= codebook_size) {
            return Err(Error::IndexOutOfRange {
                index: i as usize,
                size: codebook_size,
            });
        }
        Ok(Self {
            codebook_size,
            fingerprint,
            indices,
        })
    }

    pub fn code_shape(&self) -> [usize; 3] {
        let s = self.indices.shape();
        [s[0], s[1], s[2]]
    }

    /// Bits per index of a bit-packed encoding, `ceil(log2 L)` (at least 1).
    pub fn bits_per_index(&self) -> u32 {
        (usize::BITS - (self.codebook_size.max(2) - 1).leading_zeros()).max(1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(STREAM_HEADER_LEN + 2 * self.indices.len());
        out.extend_from_slice(&STREAM_MAGIC);
        for v in self.code_shape().into_iter().chain([self.codebook_size]) {
            let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.fingerprint);
        for &i in self.indices.indices() {
            out.extend_from_slice(&i.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "stream");
        r.magic(STREAM_MAGIC)?;
        let shape = vec![r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let codebook_size = r.u32()? as usize;
        let fingerprint: [u8; 32] = r.take(32)?.try_into().unwrap();
        let n = shape.iter().product::<usize>();
        let body = r.take(n * 2)?;
        r.finish()?;
        let indices = body
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Self::new(IndexGrid::new(shape, indices)?, codebook_size, fingerprint).map_err(|e| match e {
            Error::IndexOutOfRange { index, size } => {
                Error::Malformed(format!("stream index {index} not below codebook size {size}"))
            }
            other => other,
        })
    }
}

pub fn write_stream(path: impl AsRef<Path>, s: &CompressedStream) -> Result<()> {
    write_atomic(path, &s.to_bytes()?)
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<CompressedStream> {
    CompressedStream::from_bytes(&fs::read(path)?)
}

/// Ordered list of named binary entries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Container {
    entries: Vec<(String, Vec<u8>)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, payload: Vec<u8>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate container entry {name:?}")));
        }
        self.entries.push((name, payload));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
    }

    /// Like [`Container::get`], but a missing entry is an error.
    pub fn require(&self, name: &str) -> Result<&[u8]> {
        self.get(name)
            .ok_or_else(|| Error::Malformed(format!("container has no entry {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CONTAINER_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, payload) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "container");
        r.magic(CONTAINER_MAGIC)?;
        let count = r.u32()?;
        let mut c = Container::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Malformed("container entry name is not UTF-8".into()))?
                .to_string();
            let len = r.len_u64()?;
            let payload = r.take(len)?.to_vec();
            c.insert(name, payload).map_err(|e| Error::Malformed(e.to_string()))?;
        }
        r.finish()?;
        Ok(c)
    }
}

/// Writes `bytes` to a temporary sibling file and renames it over `path`,
/// so readers never observe a partially written file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Binary (P5) graymap of an `(n_x, n_z)` image with rows along `z`.
/// Values are mapped linearly from `[-m, m]` to `0..=255`, `m = max|u|`,
/// so zero is mid-gray.
pub fn pgm_bytes(image: &Tensor) -> Result<Vec<u8>> {
    if image.ndim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "preview needs a 2D image, got {:?}",
            image.shape()
        )));
    }
    let [nx, nz] = [image.shape()[0], image.shape()[1]];
    let m = image.max_abs();
    let mut out = format!("P5\n{nx} {nz}\n255\n").into_bytes();
    for iz in 0..nz {
        for ix in 0..nx {
            let v = image.data()[ix * nz + iz];
            let level = if m > 0.0 { (v / m + 1.0) * 127.5 } else { 127.5 };
            out.push(level.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    write_atomic(path, &pgm_bytes(image)?)
}

/// Bounds-checked little-endian cursor.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{} needs {} more bytes at offset {}, {} available",
                self.what,
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.take(4)?.try_into().unwrap();
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Malformed(format!("length {v} does not fit in memory")))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Malformed(format!(
                "{} has {} trailing bytes",
                self.what,
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn zero_2x3_f64_file_is_70_bytes() {
        let bytes = TensorFile::from_tensor(&Tensor::zeros(&[2, 3])).to_bytes();
        assert_eq!(bytes.len(), 4 + 1 + 1 + 16 + 48);
        assert_eq!(&bytes[..6], b"UDT1\x02\x02");
        assert_eq!(&bytes[6..14], &2u64.to_le_bytes());
    }

    #[test]
    fn scalar_round_trips() {
        let t = Tensor::from_vec(&[], vec![-3.25]).unwrap();
        let bytes = TensorFile::from_tensor(&t).to_bytes();
        assert_eq!(bytes.len(), 6 + 8);
        assert_eq!(TensorFile::from_bytes(&bytes).unwrap().into_tensor().unwrap(), t);
    }

    #[test]
    fn f32_and_u16_round_trip() {
        for data in [
            TensorData::F32(vec![1.5, -0.0, f32::MIN_POSITIVE, 7.0]),
            TensorData::U16(vec![0, 1, 65535, 42]),
        ] {
            let t = TensorFile::new(vec![2, 2], data).unwrap();
            assert_eq!(TensorFile::from_bytes(&t.to_bytes()).unwrap(), t);
        }
    }

    #[test]
    fn corrupt_tensor_files_give_distinct_errors() {
        let good = TensorFile::from_tensor(&Tensor::zeros(&[2, 3])).to_bytes();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(TensorFile::from_bytes(&bad_magic), Err(Error::BadMagic { .. })));
        assert!(matches!(
            TensorFile::from_bytes(&good[..good.len() - 1]),
            Err(Error::Truncated(_))
        ));
        let u16_file = TensorFile::new(vec![1], TensorData::U16(vec![3])).unwrap().to_bytes();
        assert!(matches!(
            TensorFile::from_bytes(&u16_file).unwrap().into_tensor(),
            Err(Error::DtypeMismatch { expected: 2, found: 3 })
        ));
        let mut unknown = good.clone();
        unknown[4] = 9;
        assert!(matches!(TensorFile::from_bytes(&unknown), Err(Error::Malformed(_))));
        let mut trailing = good;
        trailing.push(0);
        assert!(matches!(TensorFile::from_bytes(&trailing), Err(Error::Malformed(_))));
    }

    #[test]
    fn stream_size_for_30x10x10_code() {
        let q = IndexGrid::new(vec![30, 10, 10], vec![511; 3000]).unwrap();
        let s = CompressedStream::new(q, 512, [7; 32]).unwrap();
        let bytes = s.to_bytes().unwrap();
        assert_eq!(STREAM_HEADER_LEN, 52);
        assert_eq!(bytes.len(), 52 + 3000 * 2);
        assert_eq!(CompressedStream::from_bytes(&bytes).unwrap(), s);
        assert_eq!(s.bits_per_index(), 9);
    }

    #[test]
    fn bits_per_index_is_ceil_log2() {
        let q = IndexGrid::new(vec![1, 1, 1], vec![0]).unwrap();
        for (l, bits) in [(1, 1), (2, 1), (3, 2), (32, 5), (33, 6), (65536, 16)] {
            assert_eq!(CompressedStream::new(q.clone(), l, [0; 32]).unwrap().bits_per_index(), bits);
        }
    }

    #[test]
    fn stream_rejects_out_of_range_and_truncation() {
        let q = IndexGrid::new(vec![1, 1, 2], vec![0, 4]).unwrap();
        assert!(matches!(
            CompressedStream::new(q.clone(), 4, [0; 32]),
            Err(Error::IndexOutOfRange { index: 4, size: 4 })
        ));
        let bytes = CompressedStream::new(q, 5, [0; 32]).unwrap().to_bytes().unwrap();
        let mut shrunk = bytes.clone();
        shrunk[16..20].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(CompressedStream::from_bytes(&shrunk), Err(Error::Malformed(_))));
        assert!(matches!(
            CompressedStream::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            CompressedStream::from_bytes(b"UDT1"),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn container_round_trips_and_rejects_duplicates() {
        let mut c = Container::new();
        c.insert("a", vec![1, 2, 3]).unwrap();
        c.insert("empty", vec![]).unwrap();
        assert!(c.insert("a", vec![]).is_err());
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.require("a").unwrap(), &[1, 2, 3]);
        assert!(back.require("missing").is_err());
    }

    #[test]
    fn pgm_maps_zero_to_mid_gray_with_z_rows() {
        let img = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, -1.0, 0.5, 0.0, 0.0]).unwrap();
        let bytes = pgm_bytes(&img).unwrap();
        let header = b"P5\n2 3\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        // Row z=0 holds (x=0, x=1) = (0.0, 0.5).
        assert_eq!(&bytes[header.len()..], &[128, 191, 255, 128, 0, 128]);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"second");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn random_tensors_round_trip_bitwise(
            shape in proptest::collection::vec(0usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = shape.iter().product::<usize>();
            let data: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.gen())).collect();
            let t = TensorFile::new(shape, TensorData::F64(data)).unwrap();
            let bytes = t.to_bytes();
            let back = TensorFile::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }

        #[test]
        fn streams_round_trip(
            dims in proptest::array::uniform3(1usize..5),
            l in 1usize..600,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = dims.iter().product::<usize>();
            let idx: Vec<u16> = (0..n).map(|_| rng.gen_range(0..l) as u16).collect();
            let mut fp = [0u8; 32];
            rng.fill(&mut fp);
            let s = CompressedStream::new(IndexGrid::new(dims.to_vec(), idx).unwrap(), l, fp).unwrap();
            let bytes = s.to_bytes().unwrap();
            prop_assert_eq!(bytes.len(), STREAM_HEADER_LEN + 2 * n);
            prop_assert_eq!(CompressedStream::from_bytes(&bytes).unwrap(), s);
        }
    }
}
