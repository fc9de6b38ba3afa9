//! Binary tensor container used for weights and datasets.
//!
//! Layout, all multi-byte integers little-endian:
//!
//! ```text
//! magic   b"MGTF"
//! version u32
//! count   u32                      number of named tensors
//! per tensor:
//!   name_len u32, name bytes       UTF-8
//!   rank     u32
//!   dims     u32 * rank
//!   dtype    u8                    0 = float32, 1 = uint16
//!   data     row-major, LE         f32 or u16 per dtype
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::types::{GridGeometry, TokenGrid, VocabSpec};

pub const MAGIC: [u8; 4] = *b"MGTF";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U16: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    U16(Vec<u16>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: TensorData) -> Result<Self> {
        let expected: usize = dims.iter().map(|&d| d as usize).product();
        if expected != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "tensor dims {:?} imply {} elements, data holds {}",
                dims,
                expected,
                data.len()
            )));
        }
        Ok(NamedTensor {
            name: name.into(),
            dims,
            data,
        })
    }

    /// f32 tensor from an f64 matrix (values rounded to f32).
    pub fn from_matrix(name: impl Into<String>, m: &Array2<f64>) -> Self {
        let (rows, cols) = m.dim();
        let data: Vec<f32> = m.iter().map(|&v| v as f32).collect();
        NamedTensor {
            name: name.into(),
            dims: vec![rows as u32, cols as u32],
            data: TensorData::F32(data),
        }
    }

    /// f64 matrix view of an f32 tensor of rank 2.
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::MalformedFile(format!(
                "tensor '{}' has rank {}, expected 2",
                self.name,
                self.dims.len()
            )));
        }
        let TensorData::F32(data) = &self.data else {
            return Err(Error::MalformedFile(format!(
                "tensor '{}' is not float32",
                self.name
            )));
        };
        let shape = (self.dims[0] as usize, self.dims[1] as usize);
        Array2::from_shape_vec(shape, data.iter().map(|&v| v as f64).collect())
            .map_err(|e| Error::MalformedFile(format!("tensor '{}': {e}", self.name)))
    }

    pub fn as_u16(&self) -> Result<&[u16]> {
        match &self.data {
            TensorData::U16(v) => Ok(v),
            TensorData::F32(_) => Err(Error::MalformedFile(format!(
                "tensor '{}' is not uint16",
                self.name
            ))),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::U16(_) => Err(Error::MalformedFile(format!(
                "tensor '{}' is not float32",
                self.name
            ))),
        }
    }
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        TensorFile { tensors }
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::MalformedFile(format!("missing tensor '{name}'")))
    }

    pub fn push(&mut self, tensor: NamedTensor) {
        self.tensors.push(tensor);
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&d.to_le_bytes())?;
            }
            match &t.data {
                TensorData::F32(data) => {
                    w.write_all(&[DTYPE_F32])?;
                    for &v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                TensorData::U16(data) => {
                    w.write_all(&[DTYPE_U16])?;
                    for &v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::MalformedFile("truncated header".to_string()))?;
        if magic != MAGIC {
            return Err(Error::MalformedFile(format!(
                "bad magic bytes {magic:02x?}"
            )));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|_| Error::MalformedFile("truncated tensor name".to_string()))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::MalformedFile("tensor name is not UTF-8".to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u32(&mut r)?);
            }
            let elements: usize = dims.iter().map(|&d| d as usize).product();
            let mut dtype = [0u8; 1];
            r.read_exact(&mut dtype)
                .map_err(|_| Error::MalformedFile("truncated dtype".to_string()))?;
            let data = match dtype[0] {
                DTYPE_F32 => {
                    let mut buf = vec![0u8; elements * 4];
                    r.read_exact(&mut buf)
                        .map_err(|_| Error::MalformedFile("truncated tensor data".to_string()))?;
                    TensorData::F32(
                        buf.chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                            .collect(),
                    )
                }
                DTYPE_U16 => {
                    let mut buf = vec![0u8; elements * 2];
                    r.read_exact(&mut buf)
                        .map_err(|_| Error::MalformedFile("truncated tensor data".to_string()))?;
                    TensorData::U16(
                        buf.chunks_exact(2)
                            .map(|c| u16::from_le_bytes([c[0], c[1]]))
                            .collect(),
                    )
                }
                other => {
                    return Err(Error::MalformedFile(format!("unknown dtype byte {other}")));
                }
            };
            tensors.push(NamedTensor { name, dims, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::MalformedFile(
                "trailing bytes after last tensor".to_string(),
            ));
        }
        Ok(TensorFile { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_from(BufReader::new(file))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::MalformedFile("truncated u32".to_string()))?;
    Ok(u32::from_le_bytes(buf))
}

/// Weight matrices as a container: tensors `w_spatial`, `w_label`, plus a
/// `shape_hw` tensor recording the grid split of n.
pub fn params_to_tensor_file(params: &crate::types::MrfParams) -> TensorFile {
    let geometry = params.geometry();
    TensorFile::new(vec![
        NamedTensor::new(
            "shape_hw",
            vec![2],
            TensorData::U16(vec![geometry.height() as u16, geometry.width() as u16]),
        )
        .expect("shape tensor"),
        NamedTensor::from_matrix("w_spatial", params.w_spatial()),
        NamedTensor::from_matrix("w_label", params.w_label()),
    ])
}

pub fn params_from_tensor_file(file: &TensorFile) -> Result<crate::types::MrfParams> {
    let shape = file.get("shape_hw")?.as_u16()?;
    if shape.len() != 2 {
        return Err(Error::MalformedFile(
            "shape_hw must hold [height, width]".to_string(),
        ));
    }
    let geometry = GridGeometry::new(shape[0] as usize, shape[1] as usize)?;
    let w_label = file.get("w_label")?.to_matrix()?;
    let vocab = VocabSpec::new(w_label.dim().0)?;
    crate::types::MrfParams::new(geometry, vocab, file.get("w_spatial")?.to_matrix()?, w_label)
}

/// Write weights at `path`.
pub fn save_params(path: impl AsRef<Path>, params: &crate::types::MrfParams) -> Result<()> {
    params_to_tensor_file(params).write(path)
}

/// Read weights written by [`save_params`].
pub fn load_params(path: impl AsRef<Path>) -> Result<crate::types::MrfParams> {
    params_from_tensor_file(&TensorFile::read(path)?)
}

/// Stack token grids into one `[count, height, width]` uint16 tensor.
pub fn grids_to_tensor(name: impl Into<String>, grids: &[TokenGrid]) -> Result<NamedTensor> {
    if grids.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let geometry = grids[0].geometry();
    let mut data = Vec::with_capacity(grids.len() * geometry.n());
    for g in grids {
        if g.geometry() != geometry {
            return Err(Error::DimensionMismatch(
                "grids in one tensor must share geometry".to_string(),
            ));
        }
        data.extend_from_slice(g.labels());
    }
    NamedTensor::new(
        name,
        vec![
            grids.len() as u32,
            geometry.height() as u32,
            geometry.width() as u32,
        ],
        TensorData::U16(data),
    )
}

/// Inverse of [`grids_to_tensor`].
pub fn tensor_to_grids(tensor: &NamedTensor, vocab: &VocabSpec) -> Result<Vec<TokenGrid>> {
    if tensor.dims.len() != 3 {
        return Err(Error::MalformedFile(format!(
            "tensor '{}' has rank {}, expected 3",
            tensor.name,
            tensor.dims.len()
        )));
    }
    let count = tensor.dims[0] as usize;
    let geometry = GridGeometry::new(tensor.dims[1] as usize, tensor.dims[2] as usize)?;
    let labels = tensor.as_u16()?;
    let n = geometry.n();
    let mut grids = Vec::with_capacity(count);
    for c in 0..count {
        grids.push(TokenGrid::new(
            geometry,
            labels[c * n..(c + 1) * n].to_vec(),
            vocab,
        )?);
    }
    Ok(grids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_mixed_dtypes() {
        let m = array![[1.0f64, -2.5], [0.0, 1e-7]];
        let file = TensorFile::new(vec![
            NamedTensor::from_matrix("weights", &m),
            NamedTensor::new("labels", vec![2, 2], TensorData::U16(vec![0, 1, 2, 3])).unwrap(),
        ]);
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        let back = TensorFile::read_from(&buf[..]).unwrap();
        assert_eq!(back, file);
        // Write-then-read is bit-identical at the container level.
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let file = TensorFile::new(vec![NamedTensor::new(
            "t",
            vec![1],
            TensorData::U16(vec![7]),
        )
        .unwrap()]);
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        buf[0] = b'X';
        let err = TensorFile::read_from(&buf[..]).unwrap_err();
        assert!(err.to_string().contains("malformed file"));
    }

    #[test]
    fn version_mismatch_rejected() {
        let file = TensorFile::new(vec![]);
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        buf[4] = 99;
        let err = TensorFile::read_from(&buf[..]).unwrap_err();
        assert!(matches!(err, Error::VersionMismatch { found: 99, .. }));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let file = TensorFile::new(vec![]);
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        buf.push(0);
        assert!(TensorFile::read_from(&buf[..]).is_err());
    }

    #[test]
    fn grid_stack_roundtrip() {
        let g = GridGeometry::new(2, 3).unwrap();
        let v = VocabSpec::new(4).unwrap();
        let grids = vec![
            TokenGrid::new(g, vec![0, 1, 2, 3, 0, 1], &v).unwrap(),
            TokenGrid::new(g, vec![3, 3, 3, 0, 0, 0], &v).unwrap(),
        ];
        let tensor = grids_to_tensor("labels", &grids).unwrap();
        let back = tensor_to_grids(&tensor, &v).unwrap();
        assert_eq!(back, grids);
    }
}
