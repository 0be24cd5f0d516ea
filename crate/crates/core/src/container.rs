//! The `ALTS` v1 tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes   "ALTS"
//! version      u32       1
//! dtype        u8        1 = f32, 2 = u8
//! rank         u8        0..=4
//! dims         rank × u64
//! meta_len     u32
//! metadata     meta_len bytes of UTF-8 `key=value` lines
//! payload      product(dims) × element size, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"ALTS";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 4;
pub const MAX_DIM: u64 = 1 << 32;

pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic {0:02x?}, expected \"ALTS\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("rank {0} exceeds the maximum of 4")]
    RankTooLarge(usize),
    #[error("dimension {axis} = {value} overflows")]
    DimOverflow { axis: usize, value: u64 },
    #[error("truncated container: needed {needed} bytes for {what}, {available} available")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("payload has {found} elements, dims imply {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("bad metadata: {0}")]
    BadMetadata(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }
}

/// A row-major array of rank at most 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, ContainerError> {
        if dims.len() > MAX_RANK {
            return Err(ContainerError::RankTooLarge(dims.len()));
        }
        for (axis, &d) in dims.iter().enumerate() {
            if d as u64 > MAX_DIM {
                return Err(ContainerError::DimOverflow {
                    axis,
                    value: d as u64,
                });
            }
        }
        let expected = element_count(&dims)?;
        if expected != data.len() {
            return Err(ContainerError::ShapeMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn f32(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, ContainerError> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn u8(dims: Vec<usize>, data: Vec<u8>) -> Result<Self, ContainerError> {
        Self::new(dims, TensorData::U8(data))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_parts(self) -> (Vec<usize>, TensorData) {
        (self.dims, self.data)
    }
}

fn element_count(dims: &[usize]) -> Result<usize, ContainerError> {
    dims.iter().enumerate().try_fold(1usize, |acc, (axis, &d)| {
        acc.checked_mul(d).ok_or(ContainerError::DimOverflow {
            axis,
            value: d as u64,
        })
    })
}

fn encode_metadata(meta: &Metadata) -> Result<Vec<u8>, ContainerError> {
    let mut out = String::new();
    for (k, v) in meta {
        if k.is_empty() || k.contains(['=', '\n']) {
            return Err(ContainerError::BadMetadata(format!("invalid key {k:?}")));
        }
        if v.contains('\n') {
            return Err(ContainerError::BadMetadata(format!(
                "value for {k:?} contains a newline"
            )));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    Ok(out.into_bytes())
}

fn decode_metadata(bytes: &[u8]) -> Result<Metadata, ContainerError> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| ContainerError::BadMetadata(format!("not UTF-8: {e}")))?;
    let mut meta = Metadata::new();
    for line in text.split('\n').filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ContainerError::BadMetadata(format!("line without '=': {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    Ok(meta)
}

pub fn encode(tensor: &Tensor, meta: &Metadata) -> Result<Vec<u8>, ContainerError> {
    let meta_bytes = encode_metadata(meta)?;
    let meta_len = u32::try_from(meta_bytes.len())
        .map_err(|_| ContainerError::BadMetadata("metadata longer than 4 GiB".into()))?;
    let elem = match tensor.data {
        TensorData::F32(_) => 4,
        TensorData::U8(_) => 1,
    };
    let mut out = Vec::with_capacity(
        14 + 8 * tensor.dims.len() + meta_bytes.len() + elem * tensor.data.len(),
    );
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(tensor.data.dtype_code());
    out.push(tensor.dims.len() as u8);
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    match &tensor.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ContainerError::Truncated {
                what,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, ContainerError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, ContainerError> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Tensor, Metadata), ContainerError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(ContainerError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let dtype = r.u8("dtype")?;
    if dtype != 1 && dtype != 2 {
        return Err(ContainerError::UnknownDtype(dtype));
    }
    let rank = r.u8("rank")? as usize;
    if rank > MAX_RANK {
        return Err(ContainerError::RankTooLarge(rank));
    }
    let mut dims = Vec::with_capacity(rank);
    for axis in 0..rank {
        let value = r.u64("dims")?;
        if value > MAX_DIM || usize::try_from(value).is_err() {
            return Err(ContainerError::DimOverflow { axis, value });
        }
        dims.push(value as usize);
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta = decode_metadata(r.take(meta_len, "metadata")?)?;
    let count = element_count(&dims)?;
    let elem = if dtype == 1 { 4 } else { 1 };
    let payload_len = count.checked_mul(elem).ok_or(ContainerError::DimOverflow {
        axis: rank.saturating_sub(1),
        value: dims.last().copied().unwrap_or(0) as u64,
    })?;
    let payload = r.take(payload_len, "payload")?;
    let trailing = bytes.len() - r.pos;
    if trailing != 0 {
        return Err(ContainerError::TrailingBytes(trailing));
    }
    let data = if dtype == 1 {
        TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    } else {
        TensorData::U8(payload.to_vec())
    };
    Ok((Tensor { dims, data }, meta))
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn write_container(path: &Path, tensor: &Tensor, meta: &Metadata) -> Result<(), ContainerError> {
    let bytes = encode(tensor, meta)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<(Tensor, Metadata), ContainerError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_round_trip() {
        let t = Tensor::f32(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut meta = Metadata::new();
        meta.insert("kind".into(), "test".into());
        let (back, m) = decode(&encode(&t, &meta).unwrap()).unwrap();
        assert_eq!(back, t);
        assert_eq!(m, meta);
    }

    #[test]
    fn empty_metadata_round_trips_empty() {
        let t = Tensor::u8(vec![3], vec![0, 1, 2]).unwrap();
        let (back, m) = decode(&encode(&t, &Metadata::new()).unwrap()).unwrap();
        assert_eq!(back, t);
        assert!(m.is_empty());
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::f32(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let mut meta = Metadata::new();
        meta.insert("a".into(), "b".into());
        let bytes = encode(&t, &meta).unwrap();
        let mut expected = b"ALTS".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&[1, 2]);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&4u32.to_le_bytes());
        expected.extend_from_slice(b"a=b\n");
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-0.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let t = Tensor::f32(vec![1], vec![1.0]).unwrap();
        let mut bytes = encode(&t, &Metadata::new()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(ContainerError::BadMagic(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::f32(vec![4], vec![1.0; 4]).unwrap();
        let bytes = encode(&t, &Metadata::new()).unwrap();
        let err = decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, ContainerError::Truncated { what: "payload", .. }));
        let err = decode(&bytes[..6]).unwrap_err();
        assert!(matches!(err, ContainerError::Truncated { what: "version", .. }));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let t = Tensor::f32(vec![1], vec![1.0]).unwrap();
        let mut bytes = encode(&t, &Metadata::new()).unwrap();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(ContainerError::TrailingBytes(1))));
    }

    #[test]
    fn oversized_dim_is_rejected() {
        let mut bytes = b"ALTS".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&[1, 1]);
        bytes.extend_from_slice(&((1u64 << 32) + 1).to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(ContainerError::DimOverflow { axis: 0, .. })
        ));
    }

    #[test]
    fn rank_and_dtype_checks() {
        assert!(matches!(
            Tensor::f32(vec![1; 5], vec![0.0]),
            Err(ContainerError::RankTooLarge(5))
        ));
        let mut bytes = encode(&Tensor::u8(vec![], vec![9]).unwrap(), &Metadata::new()).unwrap();
        bytes[8] = 7;
        assert!(matches!(decode(&bytes), Err(ContainerError::UnknownDtype(7))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.alts");
        let t = Tensor::f32(vec![2, 1, 3], (0..6).map(|i| i as f32 * 0.25).collect()).unwrap();
        let mut meta = Metadata::new();
        meta.insert("id".into(), "7".into());
        write_container(&path, &t, &meta).unwrap();
        assert_eq!(read_container(&path).unwrap(), (t, meta));
    }

    fn tensor_strategy() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(0usize..5, 0..=4).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            (
                Just(dims),
                prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n),
            )
                .prop_map(|(dims, data)| Tensor::f32(dims, data).unwrap())
        })
    }

    fn bits(t: &Tensor) -> (Vec<usize>, Vec<u32>) {
        match t.data() {
            TensorData::F32(v) => (t.dims().to_vec(), v.iter().map(|x| x.to_bits()).collect()),
            TensorData::U8(v) => (t.dims().to_vec(), v.iter().map(|&x| x as u32).collect()),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn round_trip_is_bit_exact(t in tensor_strategy(), key in "[a-z]{1,6}", value in "[ -~]{0,12}") {
            let mut meta = Metadata::new();
            meta.insert(key, value);
            let (back, m) = decode(&encode(&t, &meta).unwrap()).unwrap();
            prop_assert_eq!(bits(&back), bits(&t));
            prop_assert_eq!(m, meta);
        }
    }
}
