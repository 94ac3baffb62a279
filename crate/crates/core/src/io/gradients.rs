//! FSL-convention gradient tables: a `.bval` file with one row of
//! b-values and a `.bvec` file with three rows of x, y, z components.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::sphere::{DirectionSet, SphereError};

/// Text-file rounding this far from unit norm is silently renormalized;
/// anything worse is an error.
const RENORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GradientError {
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {token:?} in {path} as a number")]
    ParseError { path: PathBuf, token: String },
    #[error("bvec file must have exactly 3 non-empty rows, got {0}")]
    BadRowCount(usize),
    #[error("column counts disagree: {bvals} b-values vs bvec rows of {rows:?}")]
    ColumnCountMismatch { bvals: usize, rows: [usize; 3] },
    #[error("direction {index} has norm {norm} with b = {bval}, beyond the renormalization tolerance")]
    NonUnitVector { index: usize, norm: f64, bval: f64 },
}

/// One acquisition shell: per-measurement b-value and gradient direction.
/// Directions with b > 0 are exactly unit norm; b = 0 entries may be zero
/// vectors.
#[derive(Debug, Clone)]
pub struct GradientScheme {
    bvals: Vec<f64>,
    bvecs: Vec<Vector3<f64>>,
}

impl GradientScheme {
    pub fn new(bvals: Vec<f64>, bvecs: Vec<Vector3<f64>>) -> Result<Self, GradientError> {
        if bvals.len() != bvecs.len() {
            return Err(GradientError::ColumnCountMismatch {
                bvals: bvals.len(),
                rows: [bvecs.len(); 3],
            });
        }
        let mut scheme = Self { bvals, bvecs };
        scheme.renormalize()?;
        Ok(scheme)
    }

    fn renormalize(&mut self) -> Result<(), GradientError> {
        for (index, (bval, vec)) in self.bvals.iter().zip(self.bvecs.iter_mut()).enumerate() {
            if *bval > 0.0 {
                let norm = vec.norm();
                if (norm - 1.0).abs() > RENORM_TOLERANCE {
                    return Err(GradientError::NonUnitVector { index, norm, bval: *bval });
                }
                *vec /= norm;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn bvecs(&self) -> &[Vector3<f64>] {
        &self.bvecs
    }

    /// Measurement indices with b = 0.
    pub fn b0_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bvals[i] == 0.0).collect()
    }

    /// Measurement indices with b > 0.
    pub fn dwi_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bvals[i] > 0.0).collect()
    }

    /// The diffusion-weighted directions as an axis set.
    pub fn dwi_directions(&self) -> Result<DirectionSet, SphereError> {
        let dirs = self.dwi_indices().iter().map(|&i| self.bvecs[i]).collect();
        DirectionSet::new(dirs, true)
    }

    /// Restriction to a subset of measurement indices.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            bvals: indices.iter().map(|&i| self.bvals[i]).collect(),
            bvecs: indices.iter().map(|&i| self.bvecs[i]).collect(),
        }
    }
}

fn parse_rows(path: &Path) -> Result<Vec<Vec<f64>>, GradientError> {
    let text = fs::read_to_string(path)
        .map_err(|e| GradientError::IoFailure { path: path.to_path_buf(), source: e })?;
    let mut rows = Vec::new();
    for line in text.lines() {
        let mut row = Vec::new();
        for token in line.split_whitespace() {
            let value: f64 = token.parse().map_err(|_| GradientError::ParseError {
                path: path.to_path_buf(),
                token: token.to_string(),
            })?;
            row.push(value);
        }
        if !row.is_empty() {
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Reads an FSL-style `.bval`/`.bvec` pair. Directions whose norm deviates
/// from 1 by at most 1e-3 are renormalized; larger deviations error.
pub fn read_gradients(bval_path: &Path, bvec_path: &Path) -> Result<GradientScheme, GradientError> {
    let bval_rows = parse_rows(bval_path)?;
    let bvals: Vec<f64> = bval_rows.into_iter().flatten().collect();
    let bvec_rows = parse_rows(bvec_path)?;
    if bvec_rows.len() != 3 {
        return Err(GradientError::BadRowCount(bvec_rows.len()));
    }
    let rows = [bvec_rows[0].len(), bvec_rows[1].len(), bvec_rows[2].len()];
    if rows[0] != rows[1] || rows[1] != rows[2] || rows[0] != bvals.len() {
        return Err(GradientError::ColumnCountMismatch { bvals: bvals.len(), rows });
    }
    let bvecs = (0..rows[0])
        .map(|i| Vector3::new(bvec_rows[0][i], bvec_rows[1][i], bvec_rows[2][i]))
        .collect();
    GradientScheme::new(bvals, bvecs)
}

/// Writes the FSL-style `.bval`/`.bvec` pair for `scheme`.
pub fn write_gradients(
    scheme: &GradientScheme,
    bval_path: &Path,
    bvec_path: &Path,
) -> Result<(), GradientError> {
    let io_err = |path: &Path, source| GradientError::IoFailure { path: path.to_path_buf(), source };
    let bval_line = scheme
        .bvals
        .iter()
        .map(|b| format!("{b}"))
        .collect::<Vec<_>>()
        .join(" ");
    fs::write(bval_path, format!("{bval_line}\n")).map_err(|e| io_err(bval_path, e))?;
    let mut lines = String::new();
    for axis in 0..3 {
        let row = scheme
            .bvecs
            .iter()
            .map(|v| format!("{:.16e}", v[axis]))
            .collect::<Vec<_>>()
            .join(" ");
        lines.push_str(&row);
        lines.push('\n');
    }
    fs::write(bvec_path, lines).map_err(|e| io_err(bvec_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_pair(dir: &Path, bval: &str, bvec: &str) -> (PathBuf, PathBuf) {
        let bval_path = dir.join("g.bval");
        let bvec_path = dir.join("g.bvec");
        fs::write(&bval_path, bval).unwrap();
        fs::write(&bvec_path, bvec).unwrap();
        (bval_path, bvec_path)
    }

    #[test]
    fn b0_entries_are_exempt_from_unit_norm() {
        let dir = tempdir().unwrap();
        let (bval, bvec) = write_pair(dir.path(), "0 1000 1000", "0 1 0\n0 0 1\n0 0 0");
        let scheme = read_gradients(&bval, &bvec).unwrap();
        assert_eq!(scheme.len(), 3);
        assert_eq!(scheme.b0_indices(), vec![0]);
        assert_eq!(scheme.dwi_indices(), vec![1, 2]);
        assert_eq!(scheme.bvecs()[0], Vector3::zeros());
    }

    #[test]
    fn exact_unit_vector_accepted() {
        let dir = tempdir().unwrap();
        let (bval, bvec) = write_pair(dir.path(), "1000", "0.6\n0.8\n0.0");
        let scheme = read_gradients(&bval, &bvec).unwrap();
        assert!((scheme.bvecs()[0].norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn small_deviation_renormalized_large_rejected() {
        let dir = tempdir().unwrap();
        // Norm 1.0005: inside tolerance, renormalized to exactly 1.
        let (bval, bvec) = write_pair(dir.path(), "1000", "1.0005\n0\n0");
        let scheme = read_gradients(&bval, &bvec).unwrap();
        assert_eq!(scheme.bvecs()[0].norm(), 1.0);

        let (bval, bvec) = write_pair(dir.path(), "1000", "1\n1\n1");
        assert!(matches!(
            read_gradients(&bval, &bvec),
            Err(GradientError::NonUnitVector { index: 0, .. })
        ));
    }

    #[test]
    fn column_count_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let (bval, bvec) = write_pair(dir.path(), "0 1000", "0 1 0\n0 0 1\n0 0 0");
        assert!(matches!(
            read_gradients(&bval, &bvec),
            Err(GradientError::ColumnCountMismatch { bvals: 2, .. })
        ));
    }

    #[test]
    fn parse_error_reported_with_token() {
        let dir = tempdir().unwrap();
        let (bval, bvec) = write_pair(dir.path(), "0 abc", "0 1\n0 0\n0 0");
        assert!(matches!(read_gradients(&bval, &bvec), Err(GradientError::ParseError { .. })));
    }

    #[test]
    fn write_read_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let scheme = GradientScheme::new(
            vec![0.0, 2000.0, 2000.0],
            vec![
                Vector3::zeros(),
                Vector3::new(0.6, 0.8, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
            ],
        )
        .unwrap();
        let bval = dir.path().join("w.bval");
        let bvec = dir.path().join("w.bvec");
        write_gradients(&scheme, &bval, &bvec).unwrap();
        let back = read_gradients(&bval, &bvec).unwrap();
        assert_eq!(back.bvals(), scheme.bvals());
        for (a, b) in back.bvecs().iter().zip(scheme.bvecs()) {
            assert_eq!(a, b);
        }
    }
}
