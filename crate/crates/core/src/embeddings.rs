//! Frozen representation spaces stored as a JSON manifest next to a raw
//! little-endian `f32` row-major matrix.
//!
//! Ground-truth labels live in a separate newline-delimited file referenced by
//! the optional `labels_path` manifest key. Training code never reads it.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Rows whose L2 norm falls below this are rejected by [`normalize_rows`].
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub name: String,
    pub n_samples: usize,
    pub dim: usize,
    pub dtype: Dtype,
    /// Relative to the manifest's directory.
    pub data_path: String,
    pub pre_normalized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_path: Option<String>,
}

impl EmbeddingManifest {
    pub fn expected_bytes(&self) -> usize {
        self.n_samples * self.dim * std::mem::size_of::<f32>()
    }
}

/// An `N x d` matrix of per-sample features. Values are held as `f64` but are
/// always exactly representable as `f32` when they came from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSpace {
    pub manifest: EmbeddingManifest,
    pub matrix: Array2<f64>,
}

impl EmbeddingSpace {
    /// Wraps an in-memory matrix, checking finiteness.
    pub fn from_matrix(name: impl Into<String>, matrix: Array2<f64>) -> Result<Self> {
        let (n, d) = matrix.dim();
        if n == 0 || d == 0 {
            return Err(Error::Data(format!("empty embedding matrix {n}x{d}")));
        }
        check_finite(matrix.view())?;
        let name = name.into();
        Ok(Self {
            manifest: EmbeddingManifest {
                data_path: format!("{name}.f32"),
                name,
                n_samples: n,
                dim: d,
                dtype: Dtype::F32,
                pre_normalized: false,
                labels_path: None,
            },
            matrix,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.matrix.view()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthLabels {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl GroundTruthLabels {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Data("class count must be positive".into()));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Data(format!("label {l} at index {i} out of range for K={k}")));
        }
        Ok(Self { labels, k })
    }

    /// Infers `K` as one past the largest label.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let k = labels.iter().copied().max().map_or(0, |m| m + 1);
        Self::new(labels, k)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_finite(matrix: ArrayView2<'_, f64>) -> Result<()> {
    for (i, row) in matrix.axis_iter(Axis(0)).enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at row {i}, column {j}")));
        }
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<EmbeddingManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: EmbeddingManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if manifest.n_samples == 0 || manifest.dim == 0 {
        return Err(Error::Format {
            path: path.to_owned(),
            message: format!("n_samples={} and dim={} must be positive", manifest.n_samples, manifest.dim),
        });
    }
    Ok(manifest)
}

fn sibling(manifest_path: &Path, relative: &str) -> PathBuf {
    manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(relative)
}

pub fn load_space(manifest_path: impl AsRef<Path>) -> Result<EmbeddingSpace> {
    let manifest_path = manifest_path.as_ref();
    let manifest = read_manifest(manifest_path)?;
    let data_path = sibling(manifest_path, &manifest.data_path);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if bytes.len() != manifest.expected_bytes() {
        return Err(Error::Format {
            path: data_path,
            message: format!(
                "expected {} bytes for {}x{} f32, found {}",
                manifest.expected_bytes(),
                manifest.n_samples,
                manifest.dim,
                bytes.len()
            ),
        });
    }
    log::debug!(
        "loaded {} ({}x{}), sha256 {}",
        data_path.display(),
        manifest.n_samples,
        manifest.dim,
        hex::encode(Sha256::digest(&bytes))
    );
    let values: Vec<f64> =
        bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
    let matrix =
        Array2::from_shape_vec((manifest.n_samples, manifest.dim), values).expect("byte count checked against shape");
    check_finite(matrix.view())?;
    Ok(EmbeddingSpace { manifest, matrix })
}

/// Writes `<dir>/<name>.json` and the binary it references. Values are
/// narrowed to `f32`.
pub fn save_space(space: &EmbeddingSpace, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = space.manifest.clone();
    manifest.n_samples = space.n_samples();
    manifest.dim = space.dim();
    let data_path = dir.join(&manifest.data_path);
    let mut bytes = Vec::with_capacity(manifest.expected_bytes());
    for &v in space.matrix.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
    let manifest_path = dir.join(format!("{}.json", manifest.name));
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Returns each row divided by its L2 norm.
pub fn normalize_rows(space: &EmbeddingSpace) -> Result<EmbeddingSpace> {
    let mut matrix = space.matrix.clone();
    normalize_rows_in_place(&mut matrix)?;
    let mut manifest = space.manifest.clone();
    manifest.pre_normalized = true;
    Ok(EmbeddingSpace { manifest, matrix })
}

pub fn normalize_rows_in_place(matrix: &mut Array2<f64>) -> Result<()> {
    for (i, mut row) in matrix.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm.is_nan() || norm < MIN_ROW_NORM {
            return Err(Error::Data(format!("row {i} has norm {norm:e}, cannot normalize")));
        }
        row /= norm;
    }
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<GroundTruthLabels> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let label = line
            .parse::<usize>()
            .map_err(|e| Error::Format { path: path.to_owned(), message: format!("line {}: {e}", line_no + 1) })?;
        labels.push(label);
    }
    GroundTruthLabels::from_labels(labels)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads the labels sidecar a manifest points to, if any.
pub fn load_manifest_labels(manifest_path: impl AsRef<Path>) -> Result<Option<GroundTruthLabels>> {
    let manifest_path = manifest_path.as_ref();
    let manifest = read_manifest(manifest_path)?;
    match manifest.labels_path {
        None => Ok(None),
        Some(rel) => {
            let labels = read_labels(sibling(manifest_path, &rel))?;
            if labels.len() != manifest.n_samples {
                return Err(Error::Data(format!(
                    "labels file has {} entries, manifest has {} samples",
                    labels.len(),
                    manifest.n_samples
                )));
            }
            Ok(Some(labels))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn space(matrix: Array2<f64>) -> EmbeddingSpace {
        EmbeddingSpace::from_matrix("phi", matrix).unwrap()
    }

    #[test]
    fn loads_four_by_two() {
        let dir = tempfile::tempdir().unwrap();
        let s = space(array![[1., 2.], [3., 4.], [5., 6.], [7., 8.]]);
        let path = save_space(&s, dir.path()).unwrap();
        assert_eq!(fs::metadata(dir.path().join("phi.f32")).unwrap().len(), 32);
        let loaded = load_space(&path).unwrap();
        assert_eq!(loaded.matrix, s.matrix);
        assert_eq!(loaded.manifest, s.manifest);
    }

    #[test]
    fn short_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_space(&space(Array2::ones((4, 2))), dir.path()).unwrap();
        let data = dir.path().join("phi.f32");
        let bytes = fs::read(&data).unwrap();
        fs::write(&data, &bytes[..30]).unwrap();
        assert!(matches!(load_space(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn nan_on_disk_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_space(&space(Array2::ones((2, 2))), dir.path()).unwrap();
        let data = dir.path().join("phi.f32");
        let mut bytes = fs::read(&data).unwrap();
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&data, bytes).unwrap();
        assert!(matches!(load_space(&path), Err(Error::Data(_))));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Array2::from_shape_fn((7, 5), |_| f64::from(rng.random::<f32>() - 0.5));
        let path = save_space(&space(m), dir.path()).unwrap();
        let first = fs::read(dir.path().join("phi.f32")).unwrap();
        let loaded = load_space(&path).unwrap();
        let other = tempfile::tempdir().unwrap();
        save_space(&loaded, other.path()).unwrap();
        assert_eq!(first, fs::read(other.path().join("phi.f32")).unwrap());
    }

    #[test]
    fn two_spaces_write_two_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let a = EmbeddingSpace::from_matrix("phi1", Array2::ones((3, 2))).unwrap();
        let b = EmbeddingSpace::from_matrix("phi2", Array2::ones((3, 4))).unwrap();
        let pa = save_space(&a, dir.path()).unwrap();
        let pb = save_space(&b, dir.path()).unwrap();
        assert_ne!(pa, pb);
        assert_eq!(load_space(pb).unwrap().dim(), 4);
    }

    #[test]
    fn manifest_keys_are_exact() {
        let s = space(Array2::ones((1, 1)));
        let v = serde_json::to_value(&s.manifest).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["data_path", "dim", "dtype", "n_samples", "name", "pre_normalized"]);
        assert_eq!(v["dtype"], "f32");
    }

    #[test]
    fn normalize_three_four_five() {
        let s = normalize_rows(&space(array![[3., 4.], [1e-3, 0.]])).unwrap();
        assert!((s.matrix[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((s.matrix[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(s.matrix.row(1).to_vec(), vec![1.0, 0.0]);
        assert!(s.manifest.pre_normalized);
    }

    #[test]
    fn unit_row_is_fixed() {
        let s = normalize_rows(&space(array![[1., 0., 0.]])).unwrap();
        assert_eq!(s.matrix, array![[1., 0., 0.]]);
    }

    #[test]
    fn random_rows_have_unit_norm_and_normalizing_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Array2::from_shape_fn((16, 8), |_| rng.random::<f64>() * 4.0 - 2.0);
        let once = normalize_rows(&space(m)).unwrap();
        for row in once.matrix.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-7);
        }
        let twice = normalize_rows(&once).unwrap();
        for (a, b) in once.matrix.iter().zip(twice.matrix.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_row_names_index() {
        let err = normalize_rows(&space(array![[1., 1.], [0., 0.]])).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
    }

    #[test]
    fn labels_out_of_range_rejected() {
        assert!(GroundTruthLabels::new(vec![0, 3], 3).is_err());
        assert_eq!(GroundTruthLabels::from_labels(vec![0, 2, 1]).unwrap().k, 3);
    }

    #[test]
    fn labels_sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = space(Array2::ones((3, 2)));
        s.manifest.labels_path = Some("phi.labels".into());
        let path = save_space(&s, dir.path()).unwrap();
        write_labels(dir.path().join("phi.labels"), &[2, 0, 1]).unwrap();
        let labels = load_manifest_labels(&path).unwrap().unwrap();
        assert_eq!(labels.labels, vec![2, 0, 1]);
        assert_eq!(labels.k, 3);
    }
}
