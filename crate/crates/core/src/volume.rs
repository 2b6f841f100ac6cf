//! 3D rasters, the AVL1 on-disk format, and case manifests.
//!
//! Voxels are stored with x fastest, then y, then z: the voxel at `(x, y, z)`
//! lives at `z * nx * ny + y * nx + x`. Axial slices are the z planes.
//!
//! AVL1 layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `AVL1` |
//! | 1     | dtype (0 = f32, 1 = u8) |
//! | 12    | nx, ny, nz as u32 |
//! | 12    | sx, sy, sz as f32 (mm) |
//! | ...   | payload |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AVL_MAGIC: &[u8; 4] = b"AVL1";
pub const AVL_HEADER_LEN: usize = 29;

/// Scalar types that can live in an AVL1 payload.
pub trait Voxel: Copy + PartialEq + Default + std::fmt::Debug + Send + Sync + 'static {
    const DTYPE: u8;
    const WIDTH: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Per-value invariant of the voxel role.
    fn check(self) -> std::result::Result<(), String>;
}

impl Voxel for f32 {
    const DTYPE: u8 = 0;
    const WIDTH: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }

    fn check(self) -> std::result::Result<(), String> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(format!("non-finite voxel value {self}"))
        }
    }
}

impl Voxel for u8 {
    const DTYPE: u8 = 1;
    const WIDTH: usize = 1;

    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }

    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }

    fn check(self) -> std::result::Result<(), String> {
        if self <= 1 {
            Ok(())
        } else {
            Err(format!("label voxel value {self} is not 0 or 1"))
        }
    }
}

/// A 3D raster with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<T>,
}

/// Intensity image.
pub type Volume3D = Volume<f32>;
/// Binary mask, 1 = left atrium.
pub type LabelVolume = Volume<u8>;

impl<T: Voxel> Volume<T> {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<T>) -> Result<Self> {
        let v = Volume {
            dims,
            spacing,
            voxels,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![T::default(); n])
    }

    /// Checks every type invariant.
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Integrity(format!(
                "dims {:?} must all be positive",
                self.dims
            )));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Integrity(format!(
                "spacing {:?} must be finite and positive",
                self.spacing
            )));
        }
        let expected: usize = self.dims.iter().product();
        if self.voxels.len() != expected {
            return Err(Error::Integrity(format!(
                "dims {:?} declare {expected} voxels but {} are present",
                self.dims,
                self.voxels.len()
            )));
        }
        if let Some((i, msg)) = self
            .voxels
            .iter()
            .enumerate()
            .find_map(|(i, v)| v.check().err().map(|m| (i, m)))
        {
            return Err(Error::Integrity(format!("voxel {i}: {msg}")));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[T] {
        &self.voxels
    }

    /// Mutable voxel access; invariants are re-checked on save.
    pub fn voxels_mut(&mut self) -> &mut [T] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<T> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        z * self.dims[0] * self.dims[1] + y * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.voxels[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.index(x, y, z);
        self.voxels[i] = value;
    }

    /// Voxels of axial plane `z`, row-major (y, x).
    pub fn slice_z(&self, z: usize) -> &[T] {
        let plane = self.dims[0] * self.dims[1];
        &self.voxels[z * plane..(z + 1) * plane]
    }

    pub fn same_geometry<U: Voxel>(&self, other: &Volume<U>) -> bool {
        self.dims == other.dims() && self.spacing == other.spacing()
    }

    /// Encodes to AVL1 bytes after checking invariants.
    pub fn to_avl_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::with_capacity(AVL_HEADER_LEN + self.voxels.len() * T::WIDTH);
        out.extend_from_slice(AVL_MAGIC);
        out.push(T::DTYPE);
        for d in self.dims {
            let d = u32::try_from(d)
                .map_err(|_| Error::Integrity(format!("dimension {d} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_le_bytes());
        }
        for &v in &self.voxels {
            v.write_le(&mut out);
        }
        Ok(out)
    }

    /// Decodes AVL1 bytes; `path` is only used in error messages.
    pub fn from_avl_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |field, detail: String| Error::Format {
            path: path.to_path_buf(),
            field,
            detail,
        };
        if bytes.len() < 4 || &bytes[..4] != AVL_MAGIC {
            return Err(fmt("magic", "expected `AVL1`".into()));
        }
        let dtype = *bytes
            .get(4)
            .ok_or_else(|| fmt("dtype", "header truncated".into()))?;
        if dtype != T::DTYPE {
            return Err(fmt(
                "dtype",
                format!("found code {dtype}, expected {}", T::DTYPE),
            ));
        }
        let mut dims = [0usize; 3];
        for (i, (d, name)) in dims.iter_mut().zip(["nx", "ny", "nz"]).enumerate() {
            let off = 5 + 4 * i;
            let raw = bytes
                .get(off..off + 4)
                .ok_or_else(|| fmt(name, "header truncated".into()))?;
            let v = u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]);
            if v == 0 {
                return Err(fmt(name, "dimension must be positive".into()));
            }
            *d = v as usize;
        }
        let mut spacing = [0f32; 3];
        for (i, (s, name)) in spacing.iter_mut().zip(["sx", "sy", "sz"]).enumerate() {
            let off = 17 + 4 * i;
            let raw = bytes
                .get(off..off + 4)
                .ok_or_else(|| fmt(name, "header truncated".into()))?;
            let v = f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]);
            if !(v.is_finite() && v > 0.0) {
                return Err(fmt(name, format!("spacing {v} must be finite and positive")));
            }
            *s = v;
        }
        let payload = &bytes[AVL_HEADER_LEN..];
        let declared = dims.iter().product::<usize>();
        if payload.len() != declared * T::WIDTH {
            return Err(Error::Integrity(format!(
                "{}: header declares {declared} voxels but payload holds {} bytes ({} voxels)",
                path.display(),
                payload.len(),
                payload.len() as f64 / T::WIDTH as f64
            )));
        }
        let voxels = payload.chunks_exact(T::WIDTH).map(T::read_le).collect();
        Volume::new(dims, spacing, voxels).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_avl_bytes(&bytes, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_avl_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    Volume3D::load(path)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    LabelVolume::load(path)
}

pub fn save_volume<T: Voxel>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    v.save(path)
}

/// Pre/post ablation status of a subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Pre,
    Post,
}

impl Ablation {
    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "pre" => Some(Ablation::Pre),
            "post" => Some(Ablation::Post),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Pre => "pre",
            Ablation::Post => "post",
        }
    }

    /// Classification target: 1 for post-ablation.
    pub fn label(self) -> u8 {
        match self {
            Ablation::Pre => 0,
            Ablation::Post => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseRecord {
    pub case_id: String,
    pub volume: PathBuf,
    pub mask: Option<PathBuf>,
    pub ablation: Option<Ablation>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    volume: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ablation: Option<String>,
}

/// Reads a JSON manifest; relative paths resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<CaseRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        field: "manifest",
        detail: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = std::collections::HashSet::new();
    let mut records = Vec::with_capacity(entries.len());
    for entry in entries {
        if entry.id.is_empty() {
            return Err(Error::Validation("empty case id in manifest".into()));
        }
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate case id `{}` in {}",
                entry.id,
                path.display()
            )));
        }
        let ablation = match entry.ablation.as_deref() {
            None => None,
            Some(tok) => Some(Ablation::parse(tok).ok_or_else(|| {
                Error::Validation(format!(
                    "case `{}`: unknown ablation token `{tok}` (expected `pre` or `post`)",
                    entry.id
                ))
            })?),
        };
        let volume = resolve(base, &entry.volume);
        if !volume.is_file() {
            return Err(Error::Validation(format!(
                "case `{}`: volume {} not found",
                entry.id,
                volume.display()
            )));
        }
        let mask = entry.mask.as_deref().map(|m| resolve(base, m));
        if let Some(m) = &mask {
            if !m.is_file() {
                return Err(Error::Validation(format!(
                    "case `{}`: mask {} not found",
                    entry.id,
                    m.display()
                )));
            }
        }
        records.push(CaseRecord {
            case_id: entry.id,
            volume,
            mask,
            ablation,
        });
    }
    Ok(records)
}

/// Writes a manifest with paths made relative to the manifest directory when possible.
pub fn save_manifest(path: impl AsRef<Path>, cases: &[CaseRecord]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let rel = |p: &Path| -> String {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let entries: Vec<ManifestEntry> = cases
        .iter()
        .map(|c| ManifestEntry {
            id: c.case_id.clone(),
            volume: rel(&c.volume),
            mask: c.mask.as_deref().map(rel),
            ablation: c.ablation.map(|a| a.as_str().to_string()),
        })
        .collect();
    let mut text = serde_json::to_string_pretty(&entries)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_volume_round_trip_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.avl");
        let v = Volume3D::new([2, 2, 1], [1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        v.save(&p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.voxels(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(back.dims(), [2, 2, 1]);
    }

    #[test]
    fn truncated_payload_is_integrity_error() {
        let v = Volume3D::new([2, 2, 2], [1.0; 3], vec![1.0; 8]).unwrap();
        let mut bytes = v.to_avl_bytes().unwrap();
        bytes.truncate(bytes.len() - 4);
        let err = Volume3D::from_avl_bytes(&bytes, Path::new("x.avl")).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "{err}");
        assert!(err.to_string().contains("8 voxels"));
    }

    #[test]
    fn zero_volume_file_layout() {
        let v = Volume3D::zeros([1, 1, 1], [1.0; 3]).unwrap();
        let bytes = v.to_avl_bytes().unwrap();
        assert_eq!(bytes.len(), AVL_HEADER_LEN + 4);
        assert_eq!(&bytes[..4], b"AVL1");
        assert_eq!(bytes[4], 0);
        assert_eq!(&bytes[5..9], &1u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &1f32.to_le_bytes());
        assert!(bytes[AVL_HEADER_LEN..].iter().all(|&b| b == 0));
    }

    #[test]
    fn label_value_two_rejected_before_write() {
        assert!(LabelVolume::new([1, 1, 2], [1.0; 3], vec![0, 2]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.avl");
        let mut m = LabelVolume::zeros([2, 1, 1], [1.0; 3]).unwrap();
        m.voxels_mut()[1] = 2;
        assert!(matches!(m.save(&p), Err(Error::Integrity(_))));
        assert!(!p.exists());
    }

    #[test]
    fn malformed_header_names_field() {
        let v = Volume3D::zeros([1, 1, 1], [1.0; 3]).unwrap();
        let mut bytes = v.to_avl_bytes().unwrap();
        bytes[17..21].copy_from_slice(&(-1f32).to_le_bytes());
        match Volume3D::from_avl_bytes(&bytes, Path::new("x")) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "sx"),
            other => panic!("unexpected {other:?}"),
        }
        bytes[0] = b'X';
        match Volume3D::from_avl_bytes(&bytes, Path::new("x")) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("unexpected {other:?}"),
        }
        let short = &v.to_avl_bytes().unwrap()[..10];
        match Volume3D::from_avl_bytes(short, Path::new("x")) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "ny"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dtype_mismatch_is_format_error() {
        let m = LabelVolume::zeros([1, 1, 1], [1.0; 3]).unwrap();
        let bytes = m.to_avl_bytes().unwrap();
        assert_eq!(bytes.len(), AVL_HEADER_LEN + 1);
        assert!(matches!(
            Volume3D::from_avl_bytes(&bytes, Path::new("m")),
            Err(Error::Format { field: "dtype", .. })
        ));
    }

    #[test]
    fn nan_voxel_rejected_on_load() {
        let v = Volume3D::zeros([1, 1, 1], [1.0; 3]).unwrap();
        let mut bytes = v.to_avl_bytes().unwrap();
        bytes[AVL_HEADER_LEN..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            Volume3D::from_avl_bytes(&bytes, Path::new("n")),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn single_hot_voxel_layout() {
        let dims = [3, 4, 5];
        for (x, y, z) in [(0, 0, 0), (2, 1, 3), (1, 3, 4)] {
            let mut v = LabelVolume::zeros(dims, [1.0; 3]).unwrap();
            v.set(x, y, z, 1);
            let hot: Vec<usize> = (0..v.len()).filter(|&i| v.voxels()[i] == 1).collect();
            assert_eq!(hot, vec![z * 12 + y * 3 + x]);
            assert_eq!(v.slice_z(z)[y * 3 + x], 1);
        }
    }

    fn touch(dir: &Path, name: &str) {
        fs::write(dir.join(name), b"").unwrap();
    }

    #[test]
    fn manifest_parse_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.avl");
        touch(dir.path(), "b.avl");
        touch(dir.path(), "b_mask.avl");
        let mp = dir.path().join("manifest.json");
        fs::write(
            &mp,
            r#"[{"id":"A","volume":"a.avl","ablation":"pre"},
                {"id":"B","volume":"b.avl","mask":"b_mask.avl","ablation":"post"}]"#,
        )
        .unwrap();
        let recs = load_manifest(&mp).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].case_id, "A");
        assert_eq!(recs[0].ablation, Some(Ablation::Pre));
        assert_eq!(recs[0].mask, None);
        assert_eq!(recs[1].ablation, Some(Ablation::Post));
        assert_eq!(recs[1].mask.as_deref(), Some(dir.path().join("b_mask.avl").as_path()));

        fs::write(
            &mp,
            r#"[{"id":"A","volume":"a.avl"},{"id":"A","volume":"b.avl"}]"#,
        )
        .unwrap();
        let err = load_manifest(&mp).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("duplicate"));

        fs::write(&mp, r#"[{"id":"A","volume":"a.avl","ablation":"during"}]"#).unwrap();
        assert!(load_manifest(&mp).unwrap_err().to_string().contains("during"));
    }

    #[test]
    fn manifest_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.avl");
        let cases = vec![CaseRecord {
            case_id: "A".into(),
            volume: dir.path().join("a.avl"),
            mask: None,
            ablation: Some(Ablation::Post),
        }];
        let mp = dir.path().join("m.json");
        save_manifest(&mp, &cases).unwrap();
        assert!(fs::read_to_string(&mp).unwrap().contains("\"a.avl\""));
        assert_eq!(load_manifest(&mp).unwrap(), cases);
    }

    fn arb_volume() -> impl Strategy<Value = Volume3D> {
        (1usize..6, 1usize..6, 1usize..4, 0.1f32..4.0, 0.1f32..4.0, 0.1f32..4.0).prop_flat_map(
            |(nx, ny, nz, sx, sy, sz)| {
                prop::collection::vec(-1e6f32..1e6, nx * ny * nz).prop_map(move |v| {
                    Volume3D::new([nx, ny, nz], [sx, sy, sz], v).unwrap()
                })
            },
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]
        #[test]
        fn avl_bytes_round_trip(v in arb_volume()) {
            let bytes = v.to_avl_bytes().unwrap();
            let back = Volume3D::from_avl_bytes(&bytes, Path::new("p")).unwrap();
            prop_assert_eq!(&back, &v);
            prop_assert_eq!(back.to_avl_bytes().unwrap(), bytes);
        }
    }
}
