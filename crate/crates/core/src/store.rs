//! Binary persistence of activation tensors and the dataset manifest.
//!
//! Tensor file layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SCLP"
//! 4       4     version (u32) = 1
//! 8       32    dims B, L, N_h, d (four u64)
//! 40      4·n   payload, f32 LE, row-major over (B, L, N_h, d)
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScalpelError};
use crate::json;

pub const MAGIC: &[u8; 4] = b"SCLP";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 * 8;

/// Which activation manifold a tensor was collected from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldLabel {
    Trusted,
    HallucImage,
    HallucObject,
}

impl ManifoldLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ManifoldLabel::Trusted => "trusted",
            ManifoldLabel::HallucImage => "halluc_image",
            ManifoldLabel::HallucObject => "halluc_object",
        }
    }

    /// Probe label: 0 for factual, 1 for hallucinated.
    pub fn class(self) -> u8 {
        match self {
            ManifoldLabel::Trusted => 0,
            _ => 1,
        }
    }
}

/// Perturbation level a hallucination manifold was built at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Image,
    Object,
}

impl Level {
    pub const ALL: [Level; 2] = [Level::Image, Level::Object];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Image => "image",
            Level::Object => "object",
        }
    }

    pub fn label(self) -> ManifoldLabel {
        match self {
            Level::Image => ManifoldLabel::HallucImage,
            Level::Object => ManifoldLabel::HallucObject,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for ManifoldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tensor dimensions `(B, L, N_h, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub samples: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl Dims {
    pub fn new(samples: usize, layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            samples,
            layers,
            heads,
            head_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.samples * self.layers * self.heads * self.head_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn as_array(&self) -> [usize; 4] {
        [self.samples, self.layers, self.heads, self.head_dim]
    }
}

/// Per-sample, per-layer, per-head activation vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    dims: Dims,
    data: Vec<f32>,
    pub label: Option<ManifoldLabel>,
}

impl ActivationTensor {
    pub fn new(dims: Dims, data: Vec<f32>, label: Option<ManifoldLabel>) -> Result<Self> {
        if dims.as_array().contains(&0) {
            return Err(ScalpelError::EmptyDimension);
        }
        if data.len() != dims.len() {
            return Err(ScalpelError::DimensionMismatch {
                expected: dims.len(),
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ScalpelError::NonFinite);
        }
        Ok(Self { dims, data, label })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn offset(&self, sample: usize, layer: usize, head: usize) -> usize {
        let Dims {
            layers,
            heads,
            head_dim,
            ..
        } = self.dims;
        ((sample * layers + layer) * heads + head) * head_dim
    }

    /// Activation vector of one (sample, layer, head).
    pub fn vector(&self, sample: usize, layer: usize, head: usize) -> &[f32] {
        let o = self.offset(sample, layer, head);
        &self.data[o..o + self.dims.head_dim]
    }

    /// Extract the `B × d` activations of one head, widened to f64.
    pub fn slice_head(&self, layer: usize, head: usize) -> Result<DMatrix<f64>> {
        if layer >= self.dims.layers {
            return Err(ScalpelError::OutOfRange {
                what: "layer",
                index: layer,
                limit: self.dims.layers,
            });
        }
        if head >= self.dims.heads {
            return Err(ScalpelError::OutOfRange {
                what: "head",
                index: head,
                limit: self.dims.heads,
            });
        }
        let b = self.dims.samples;
        let d = self.dims.head_dim;
        Ok(DMatrix::from_fn(b, d, |row, col| {
            self.data[self.offset(row, layer, head) + col] as f64
        }))
    }

    /// Row-stack tensors with identical `(L, N_h, d)`.
    pub fn concat(parts: &[&ActivationTensor]) -> Result<Self> {
        let first = parts.first().ok_or(ScalpelError::EmptyDimension)?;
        let mut data = Vec::new();
        let mut samples = 0;
        for p in parts {
            let d = p.dims;
            if (d.layers, d.heads, d.head_dim) != (first.dims.layers, first.dims.heads, first.dims.head_dim) {
                return Err(ScalpelError::DimensionMismatch {
                    expected: first.dims.heads * first.dims.head_dim,
                    got: d.heads * d.head_dim,
                });
            }
            samples += d.samples;
            data.extend_from_slice(&p.data);
        }
        let dims = Dims::new(samples, first.dims.layers, first.dims.heads, first.dims.head_dim);
        Self::new(dims, data, first.label)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.dims.as_array() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ScalpelError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(ScalpelError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(ScalpelError::BadVersion(version));
        }
        let mut dims = [0usize; 4];
        for (i, d) in dims.iter_mut().enumerate() {
            let start = 8 + 8 * i;
            let raw = u64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
            *d = usize::try_from(raw).map_err(|_| ScalpelError::Truncated)?;
        }
        let dims = Dims::new(dims[0], dims[1], dims[2], dims[3]);
        let n = dims
            .samples
            .checked_mul(dims.layers)
            .and_then(|x| x.checked_mul(dims.heads))
            .and_then(|x| x.checked_mul(dims.head_dim))
            .ok_or(ScalpelError::Truncated)?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != 4 * n {
            return Err(ScalpelError::Truncated);
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dims, data, None)
    }
}

pub fn write_tensor(t: &ActivationTensor, path: &Path) -> Result<()> {
    // constructor already guarantees finite, non-empty data
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| ScalpelError::io(parent, e))?;
        }
    }
    fs::write(path, t.to_bytes()).map_err(|e| ScalpelError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<ActivationTensor> {
    let bytes = fs::read(path).map_err(|e| ScalpelError::io(path, e))?;
    ActivationTensor::from_bytes(&bytes)
}

/// One tensor file referenced by a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub label: ManifoldLabel,
    /// Path relative to the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
    /// Per-sample class: 0 = factual, 1 = hallucinated.
    pub sample_labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(seed: u64) -> Self {
        Self {
            schema_version: json::SCHEMA_VERSION,
            seed,
            entries: Vec::new(),
        }
    }

    /// Write `tensor` next to the manifest and register it.
    pub fn add(&mut self, dir: &Path, file_name: &str, tensor: &ActivationTensor) -> Result<()> {
        let label = tensor
            .label
            .ok_or_else(|| ScalpelError::InvalidArgument("tensor has no manifold label".into()))?;
        let path = dir.join(file_name);
        write_tensor(tensor, &path)?;
        let sha256 = json::sha256_hex(&tensor.to_bytes());
        self.entries.retain(|e| e.label != label);
        self.entries.push(ManifestEntry {
            label,
            path: PathBuf::from(file_name),
            sha256,
            sample_labels: vec![label.class(); tensor.dims().samples],
        });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        json::write_artifact(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = json::read_artifact(path)?;
        json::check_schema(m.schema_version, "dataset manifest")?;
        Ok(m)
    }

    /// Read every referenced tensor, checking headers and label lengths.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        for label in self.entries.iter().map(|e| e.label) {
            self.load_tensor(dir, label)?;
        }
        Ok(())
    }

    pub fn load_tensor(&self, dir: &Path, label: ManifoldLabel) -> Result<ActivationTensor> {
        let entry = self
            .entries
            .iter()
            .find(|e| e.label == label)
            .ok_or_else(|| ScalpelError::MissingArtifact(format!("{label} tensor")))?;
        let path = dir.join(&entry.path);
        let mut t = read_tensor(&path)?;
        if entry.sample_labels.len() != t.dims().samples {
            return Err(ScalpelError::DimensionMismatch {
                expected: t.dims().samples,
                got: entry.sample_labels.len(),
            });
        }
        t.label = Some(label);
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ActivationTensor {
        let dims = Dims::new(2, 1, 2, 3);
        let data = (0..12).map(|i| i as f32 * 0.5 - 1.0).collect();
        ActivationTensor::new(dims, data, Some(ManifoldLabel::Trusted)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sclp");
        let t = small();
        write_tensor(&t, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SCLP");
        assert_eq!(bytes.len(), 40 + 12 * 4);
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.dims(), t.dims());
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn rejects_nan_and_empty_dims() {
        let err = ActivationTensor::new(Dims::new(1, 1, 1, 2), vec![0.0, f32::NAN], None).unwrap_err();
        assert_eq!(err.to_string(), "non-finite payload");
        let err = ActivationTensor::new(Dims::new(0, 1, 1, 1), vec![], None).unwrap_err();
        assert_eq!(err.to_string(), "empty dimension");
    }

    #[test]
    fn header_and_length_validation() {
        let mut bytes = small().to_bytes();
        let truncated = &bytes[..bytes.len() - 4];
        assert_eq!(ActivationTensor::from_bytes(truncated).unwrap_err().to_string(), "truncated payload");
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(ActivationTensor::from_bytes(&bytes).unwrap_err().to_string(), "not an activation file");
    }

    #[test]
    fn slice_head_rows() {
        let t = small();
        let m = t.slice_head(0, 1).unwrap();
        assert_eq!(m.shape(), (2, 3));
        for b in 0..2 {
            for k in 0..3 {
                assert_eq!(m[(b, k)], t.vector(b, 0, 1)[k] as f64);
            }
        }
        assert_eq!(m[(0, 0)], 0.5);
        assert_eq!(m[(1, 2)], 4.5);
        assert!(matches!(t.slice_head(0, 2), Err(ScalpelError::OutOfRange { .. })));
        assert!(t.slice_head(1, 0).is_err());
    }

    #[test]
    fn slice_head_single_sample() {
        let t = ActivationTensor::new(Dims::new(1, 2, 1, 4), (0..8).map(|i| i as f32).collect(), None).unwrap();
        let m = t.slice_head(1, 0).unwrap();
        assert_eq!(m.shape(), (1, 4));
        assert_eq!(m[(0, 0)], 4.0);
    }

    #[test]
    fn slice_head_matches_row_major_enumeration() {
        for (b, l, h, d) in [(1, 1, 1, 1), (2, 3, 2, 2), (3, 2, 4, 1), (2, 2, 2, 5)] {
            let dims = Dims::new(b, l, h, d);
            let data: Vec<f32> = (0..dims.len()).map(|i| i as f32).collect();
            let t = ActivationTensor::new(dims, data, None).unwrap();
            for layer in 0..l {
                for head in 0..h {
                    let m = t.slice_head(layer, head).unwrap();
                    for s in 0..b {
                        for k in 0..d {
                            let flat = ((s * l + layer) * h + head) * d + k;
                            assert_eq!(m[(s, k)], flat as f64);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn concat_row_stacks() {
        let t = small();
        let c = ActivationTensor::concat(&[&t, &t]).unwrap();
        assert_eq!(c.dims().samples, 4);
        assert_eq!(c.vector(2, 0, 1), t.vector(0, 0, 1));
    }

    #[test]
    fn manifest_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(5);
        m.add(dir.path(), "trusted.sclp", &small()).unwrap();
        let mpath = dir.path().join("manifest.json");
        m.save(&mpath).unwrap();
        let back = DatasetManifest::load(&mpath).unwrap();
        assert_eq!(back, m);
        back.validate(dir.path()).unwrap();
        let t = back.load_tensor(dir.path(), ManifoldLabel::Trusted).unwrap();
        assert_eq!(t.label, Some(ManifoldLabel::Trusted));

        let mut broken = back.clone();
        broken.entries[0].sample_labels.pop();
        assert!(broken.validate(dir.path()).is_err());
        fs::remove_file(dir.path().join("trusted.sclp")).unwrap();
        assert!(back.validate(dir.path()).is_err());
    }
}
