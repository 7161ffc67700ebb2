//! Volume container and the `.gvol` file format.
//!
//! A volume is stored as two files: `<name>.gvol` holds the 8-byte magic
//! `GASAVOL1` followed by the raw little-endian payload (row-major, channel
//! slowest), and `<name>.gvol.json` holds the header
//! `{dtype, shape, spacing, origin, kind}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 8] = b"GASAVOL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    Image,
    Labels,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U16,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U16 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U16(Vec<u16>),
}

impl VolumeData {
    pub fn dtype(&self) -> DType {
        match self {
            VolumeData::F32(_) => DType::F32,
            VolumeData::F64(_) => DType::F64,
            VolumeData::U16(_) => DType::U16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VolumeData::F32(v) => v.len(),
            VolumeData::F64(v) => v.len(),
            VolumeData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// `[W, H, D]` or `[C, W, H, D]`.
    pub shape: Vec<usize>,
    /// Millimetres per voxel along W, H, D.
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub kind: VolumeKind,
    pub data: VolumeData,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: DType,
    shape: Vec<usize>,
    spacing: [f64; 3],
    origin: [f64; 3],
    kind: VolumeKind,
}

pub(crate) fn check_spacing(spacing: &[f64]) -> Result<()> {
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::InvalidSpacing(spacing.to_vec()));
    }
    Ok(())
}

impl Volume {
    pub fn new(
        shape: Vec<usize>,
        spacing: [f64; 3],
        origin: [f64; 3],
        kind: VolumeKind,
        data: VolumeData,
    ) -> Result<Self> {
        let v = Self {
            shape,
            spacing,
            origin,
            kind,
            data,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn image(shape: Vec<usize>, values: Vec<f64>, spacing: [f64; 3]) -> Result<Self> {
        Self::new(shape, spacing, [0.0; 3], VolumeKind::Image, VolumeData::F64(values))
    }

    pub fn labels(dims: [usize; 3], labels: Vec<u16>, spacing: [f64; 3]) -> Result<Self> {
        Self::new(
            dims.to_vec(),
            spacing,
            [0.0; 3],
            VolumeKind::Labels,
            VolumeData::U16(labels),
        )
    }

    pub fn validate(&self) -> Result<()> {
        check_spacing(&self.spacing)?;
        if !(self.shape.len() == 3 || self.shape.len() == 4) || self.shape.contains(&0) {
            return Err(Error::shape(format!(
                "volume shape must be [W,H,D] or [C,W,H,D], got {:?}",
                self.shape
            )));
        }
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {n} values, payload has {}",
                self.shape,
                self.data.len()
            )));
        }
        match (self.kind, &self.data) {
            (VolumeKind::Labels, VolumeData::U16(_)) => Ok(()),
            (VolumeKind::Image, VolumeData::F32(_) | VolumeData::F64(_)) => Ok(()),
            (kind, data) => Err(Error::InvalidConfig(format!(
                "{kind:?} volume cannot hold {:?} data",
                data.dtype()
            ))),
        }
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = &self.shape[self.shape.len() - 3..];
        [s[0], s[1], s[2]]
    }

    pub fn channels(&self) -> usize {
        if self.shape.len() == 4 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn voxels(&self) -> usize {
        self.spatial().iter().product()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            VolumeData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            VolumeData::F64(v) => v.clone(),
            VolumeData::U16(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn label_data(&self) -> Result<&[u16]> {
        match &self.data {
            VolumeData::U16(v) => Ok(v),
            other => Err(Error::InvalidConfig(format!(
                "expected label data, found {:?}",
                other.dtype()
            ))),
        }
    }

    /// Image values as a `[C, W, H, D]` tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let [w, h, d] = self.spatial();
        Tensor::new([self.channels(), w, h, d], self.to_f64())
    }

    /// Same geometry with new image values.
    pub fn with_values(&self, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(
            shape,
            self.spacing,
            self.origin,
            VolumeKind::Image,
            VolumeData::F64(values),
        )
    }

    pub fn max_label(&self) -> Result<u16> {
        Ok(self.label_data()?.iter().copied().max().unwrap_or(0))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    v.validate()?;
    let header = Header {
        dtype: v.data.dtype(),
        shape: v.shape.clone(),
        spacing: v.spacing,
        origin: v.origin,
        kind: v.kind,
    };
    let mut bytes = Vec::with_capacity(8 + v.data.len() * v.data.dtype().size());
    bytes.extend_from_slice(VOLUME_MAGIC);
    match &v.data {
        VolumeData::F32(d) => d.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        VolumeData::F64(d) => d.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
        VolumeData::U16(d) => d.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes())),
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..8] != VOLUME_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let payload = &bytes[8..];
    let n: usize = header.shape.iter().product();
    let size = header.dtype.size();
    if payload.len() != n * size {
        return Err(Error::format(
            path,
            format!(
                "payload of {} bytes, header shape {:?} needs {}",
                payload.len(),
                header.shape,
                n * size
            ),
        ));
    }
    let data = match header.dtype {
        DType::F32 => VolumeData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => VolumeData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U16 => VolumeData::U16(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Volume::new(header.shape, header.spacing, header.origin, header.kind, data)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let vols = [
            Volume::new(
                vec![2, 3, 2],
                [0.7, 0.7, 3.0],
                [1.5, -2.0, 0.25],
                VolumeKind::Image,
                VolumeData::F32((0..12).map(|i| i as f32 * 0.1).collect()),
            )
            .unwrap(),
            Volume::image(vec![2, 2, 1, 3], (0..12).map(|i| (i as f64).sqrt()).collect(), [1.0, 2.0, 0.5])
                .unwrap(),
            Volume::labels([2, 2, 2], vec![0, 1, 2, 3, 65535, 0, 1, 7], [0.7, 0.7, 3.0]).unwrap(),
        ];
        for (i, v) in vols.iter().enumerate() {
            let p = dir.path().join(format!("v{i}.gvol"));
            write_volume(v, &p).unwrap();
            let back = read_volume(&p).unwrap();
            assert_eq!(&back, v);
            assert_eq!(back.spacing.map(f64::to_bits), v.spacing.map(f64::to_bits));
        }
    }

    #[test]
    fn truncated_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.gvol");
        let v = Volume::labels([2, 2, 2], vec![1; 8], [1.0; 3]).unwrap();
        write_volume(&v, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_volume(&p), Err(Error::Format { .. })));
        assert!(matches!(
            read_volume(&dir.path().join("missing.gvol")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(matches!(
            Volume::labels([2, 2, 2], vec![0; 8], [1.0, 0.0, 1.0]),
            Err(Error::InvalidSpacing(_))
        ));
        assert!(Volume::labels([2, 2, 2], vec![0; 7], [1.0; 3]).is_err());
        assert!(Volume::new(
            vec![2, 2, 2],
            [1.0; 3],
            [0.0; 3],
            VolumeKind::Labels,
            VolumeData::F64(vec![0.0; 8])
        )
        .is_err());
    }
}
