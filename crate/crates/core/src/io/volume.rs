//! 4D voxel volumes with a JSON header and raw little-endian f32 payload.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sh::{self, ShCoeffs};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("unsupported dtype {dtype:?} in {path} (only f32le)")]
    UnsupportedDtype { path: PathBuf, dtype: String },
    #[error("payload {path} holds {got} bytes, header dims need {want}")]
    PayloadSizeMismatch { path: PathBuf, want: usize, got: usize },
    #[error("data length {got} does not match dims product {want}")]
    DataLengthMismatch { want: usize, got: usize },
    #[error("dims must all be positive, got {0:?}")]
    ZeroDim([usize; 4]),
    #[error("voxel size must be positive, got {0:?}")]
    NonPositiveVoxelSize([f64; 3]),
    #[error("channel count {c} is not a valid even-order SH coefficient count")]
    BadShChannelCount { c: usize },
    #[error("mask voxel {index} holds {value}, masks are strictly 0.0 or 1.0")]
    NonBinaryMask { index: usize, value: f32 },
}

/// What a volume's channel axis means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    /// Raw per-gradient diffusion-weighted measurements.
    DwiSignal,
    /// SH coefficients of the normalized signal on the shell.
    ShSignal,
    /// SH coefficients of a fiber orientation distribution.
    ShFodf,
    /// Binary 0/1 mask, one channel.
    Mask,
}

/// X*Y*Z voxel grid with C channels, flat index [x][y][z][c] with the
/// channel fastest-varying, so each voxel's channel vector is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    dims: [usize; 4],
    voxel_size_mm: [f64; 3],
    kind: VolumeKind,
    data: Vec<f32>,
}

impl Volume4D {
    pub fn new(
        dims: [usize; 4],
        voxel_size_mm: [f64; 3],
        kind: VolumeKind,
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::ZeroDim(dims));
        }
        if voxel_size_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(VolumeError::NonPositiveVoxelSize(voxel_size_mm));
        }
        let want = dims.iter().product::<usize>();
        if data.len() != want {
            return Err(VolumeError::DataLengthMismatch { want, got: data.len() });
        }
        match kind {
            VolumeKind::ShSignal | VolumeKind::ShFodf => {
                if sh_order_from_count(dims[3]).is_none() {
                    return Err(VolumeError::BadShChannelCount { c: dims[3] });
                }
            }
            VolumeKind::Mask => {
                for (index, &value) in data.iter().enumerate() {
                    if value != 0.0 && value != 1.0 {
                        return Err(VolumeError::NonBinaryMask { index, value });
                    }
                }
            }
            VolumeKind::DwiSignal => {}
        }
        Ok(Self { dims, voxel_size_mm, kind, data })
    }

    pub fn zeros(dims: [usize; 4], voxel_size_mm: [f64; 3], kind: VolumeKind) -> Self {
        let data = vec![0.0; dims.iter().product()];
        // A zero fill satisfies every kind's invariants except the SH
        // channel-count rule, which `new` still enforces.
        Self::new(dims, voxel_size_mm, kind, data).expect("zero volume is valid")
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn voxel_size_mm(&self) -> [f64; 3] {
        self.voxel_size_mm
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Flat index of voxel (x, y, z), channel 0.
    pub fn voxel_offset(&self, x: usize, y: usize, z: usize) -> usize {
        ((x * self.dims[1] + y) * self.dims[2] + z) * self.dims[3]
    }

    /// The contiguous channel vector of one voxel.
    pub fn channels(&self, x: usize, y: usize, z: usize) -> &[f32] {
        let o = self.voxel_offset(x, y, z);
        &self.data[o..o + self.dims[3]]
    }

    pub fn channels_mut(&mut self, x: usize, y: usize, z: usize) -> &mut [f32] {
        let o = self.voxel_offset(x, y, z);
        let c = self.dims[3];
        &mut self.data[o..o + c]
    }

    /// SH order implied by the channel count, for SH-kind volumes.
    pub fn sh_order(&self) -> Option<usize> {
        match self.kind {
            VolumeKind::ShSignal | VolumeKind::ShFodf => sh_order_from_count(self.dims[3]),
            _ => None,
        }
    }

    /// The voxel's channel vector as SH coefficients (SH-kind volumes).
    pub fn sh_at(&self, x: usize, y: usize, z: usize) -> Option<ShCoeffs> {
        let order = self.sh_order()?;
        let c: Vec<f64> = self.channels(x, y, z).iter().map(|&v| v as f64).collect();
        ShCoeffs::new(order, c).ok()
    }

    /// True where a mask volume is 1.0.
    pub fn mask_at(&self, x: usize, y: usize, z: usize) -> bool {
        self.channels(x, y, z)[0] == 1.0
    }

    /// Iterates over all (x, y, z) voxel coordinates in index order.
    pub fn voxel_coords(&self) -> impl Iterator<Item = (usize, usize, usize)> {
        let [x, y, z, _] = self.dims;
        (0..x).flat_map(move |i| (0..y).flat_map(move |j| (0..z).map(move |k| (i, j, k))))
    }
}

/// The even SH order whose coefficient count is exactly `c`, if any.
pub fn sh_order_from_count(c: usize) -> Option<usize> {
    let mut order = 0;
    loop {
        let n = sh::coefficient_count(order);
        if n == c {
            return Some(order);
        }
        if n > c {
            return None;
        }
        order += 2;
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    format: String,
    version: u32,
    kind: VolumeKind,
    dims: [usize; 4],
    voxel_size_mm: [f64; 3],
    dtype: String,
}

/// Resolves `<name>`, `<name>.dwv` or `<name>.dwv.json` to the header and
/// payload paths `<name>.dwv.json` / `<name>.dwv.raw`.
fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let base = if let Some(stripped) = s.strip_suffix(".dwv.json") {
        stripped.to_string()
    } else if let Some(stripped) = s.strip_suffix(".dwv.raw") {
        stripped.to_string()
    } else if let Some(stripped) = s.strip_suffix(".dwv") {
        stripped.to_string()
    } else {
        s.into_owned()
    };
    (PathBuf::from(format!("{base}.dwv.json")), PathBuf::from(format!("{base}.dwv.raw")))
}

/// Writes the header and raw little-endian f32 payload for `v`.
pub fn write_volume(v: &Volume4D, path: &Path) -> Result<(), VolumeError> {
    let (header_path, raw_path) = volume_paths(path);
    let header = VolumeHeader {
        format: "dwv".to_string(),
        version: 1,
        kind: v.kind,
        dims: v.dims,
        voxel_size_mm: v.voxel_size_mm,
        dtype: "f32le".to_string(),
    };
    let io_err = |path: &PathBuf, source| VolumeError::IoFailure { path: path.clone(), source };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&header_path, text).map_err(|e| io_err(&header_path, e))?;
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for value in &v.data {
        bytes.extend_from_slice(&value.to_le_bytes());
    }
    let mut f = fs::File::create(&raw_path).map_err(|e| io_err(&raw_path, e))?;
    f.write_all(&bytes).map_err(|e| io_err(&raw_path, e))
}

/// Reads a volume written by [`write_volume`], validating the header, the
/// payload byte count, and the volume invariants.
pub fn read_volume(path: &Path) -> Result<Volume4D, VolumeError> {
    let (header_path, raw_path) = volume_paths(path);
    let io_err = |path: &PathBuf, source| VolumeError::IoFailure { path: path.clone(), source };
    let text = fs::read_to_string(&header_path).map_err(|e| io_err(&header_path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| {
        VolumeError::MalformedHeader { path: header_path.clone(), reason: e.to_string() }
    })?;
    if header.format != "dwv" || header.version != 1 {
        return Err(VolumeError::MalformedHeader {
            path: header_path.clone(),
            reason: format!("unknown format {}/{}", header.format, header.version),
        });
    }
    if header.dtype != "f32le" {
        return Err(VolumeError::UnsupportedDtype { path: header_path, dtype: header.dtype });
    }
    let bytes = fs::read(&raw_path).map_err(|e| io_err(&raw_path, e))?;
    let want = header.dims.iter().product::<usize>() * 4;
    if bytes.len() != want {
        return Err(VolumeError::PayloadSizeMismatch { path: raw_path, want, got: bytes.len() });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume4D::new(header.dims, header.voxel_size_mm, header.kind, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn random_volume(dims: [usize; 4], seed: u64) -> Volume4D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.iter().product()).map(|_| rng.gen_range(-10.0..10.0)).collect();
        Volume4D::new(dims, [2.0, 2.0, 2.0], VolumeKind::DwiSignal, data).unwrap()
    }

    #[test]
    fn header_dims_and_payload_agree() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.dwv");
        let v = random_volume([2, 2, 2, 1], 1);
        write_volume(&v, &path).unwrap();
        let raw = dir.path().join("v.dwv.raw");
        assert_eq!(fs::read(&raw).unwrap().len(), 32);
        let back = read_volume(&path).unwrap();
        assert_eq!(back.data().len(), 8);

        // Truncate the payload: 28 bytes can no longer match 2x2x2x1.
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..28]).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(VolumeError::PayloadSizeMismatch { want: 32, got: 28, .. })
        ));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        for seed in 0..8 {
            let v = random_volume([3, 4, 5, 7], seed);
            let path = dir.path().join(format!("v{seed}.dwv"));
            write_volume(&v, &path).unwrap();
            let back = read_volume(&path).unwrap();
            assert_eq!(v, back);
            // Write the read-back volume again: identical bytes.
            let path2 = dir.path().join(format!("w{seed}.dwv"));
            write_volume(&back, &path2).unwrap();
            assert_eq!(
                fs::read(dir.path().join(format!("v{seed}.dwv.raw"))).unwrap(),
                fs::read(dir.path().join(format!("w{seed}.dwv.raw"))).unwrap()
            );
        }
    }

    #[test]
    fn nan_bit_pattern_survives_round_trip() {
        let dir = tempdir().unwrap();
        let mut v = random_volume([2, 2, 2, 2], 3);
        v.data_mut()[5] = f32::from_bits(0x7FC0_1234);
        let path = dir.path().join("nan.dwv");
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.data()[5].to_bits(), 0x7FC0_1234);
    }

    #[test]
    fn non_binary_mask_rejected_before_write() {
        let err = Volume4D::new([2, 2, 2, 1], [1.0; 3], VolumeKind::Mask, vec![0.0; 7]
            .into_iter()
            .chain([0.5])
            .collect());
        assert!(matches!(err, Err(VolumeError::NonBinaryMask { index: 7, .. })));
    }

    #[test]
    fn sh_kind_requires_valid_channel_count() {
        assert!(Volume4D::new([2, 2, 2, 45], [1.0; 3], VolumeKind::ShFodf, vec![0.0; 360]).is_ok());
        assert!(matches!(
            Volume4D::new([2, 2, 2, 44], [1.0; 3], VolumeKind::ShFodf, vec![0.0; 352]),
            Err(VolumeError::BadShChannelCount { c: 44 })
        ));
        assert_eq!(sh_order_from_count(45), Some(8));
        assert_eq!(sh_order_from_count(28), Some(6));
        assert_eq!(sh_order_from_count(1), Some(0));
        assert_eq!(sh_order_from_count(44), None);
    }

    #[test]
    fn malformed_header_and_dtype_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.dwv");
        fs::write(dir.path().join("bad.dwv.json"), "{not json").unwrap();
        assert!(matches!(read_volume(&path), Err(VolumeError::MalformedHeader { .. })));

        let v = random_volume([2, 2, 2, 1], 5);
        write_volume(&v, &path).unwrap();
        let text = fs::read_to_string(dir.path().join("bad.dwv.json")).unwrap();
        fs::write(dir.path().join("bad.dwv.json"), text.replace("f32le", "f64le")).unwrap();
        assert!(matches!(read_volume(&path), Err(VolumeError::UnsupportedDtype { .. })));
    }
}
