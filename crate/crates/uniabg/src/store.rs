//! Feature sets, dataset manifests, and the `UVF1` vector file format.
//!
//! Features are stored as row-major matrices with per-row string ids and a
//! view tag. Everything downstream assumes rows were l2-normalized once at
//! ingestion, so similarity is always a plain dot product.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const UVF_MAGIC: &[u8; 4] = b"UVF1";

/// Source view of a feature set or image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    Drone,
    Satellite,
    Apv,
}

impl ViewTag {
    /// Class index used by the view discriminator (drone=0, satellite=1, apv=2).
    pub fn class_index(self) -> usize {
        match self {
            ViewTag::Drone => 0,
            ViewTag::Satellite => 1,
            ViewTag::Apv => 2,
        }
    }
}

impl std::fmt::Display for ViewTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ViewTag::Drone => write!(f, "drone"),
            ViewTag::Satellite => write!(f, "satellite"),
            ViewTag::Apv => write!(f, "apv"),
        }
    }
}

/// A count x dim matrix of features with row ids and a view tag.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub vectors: Vec<f64>,
    pub ids: Vec<String>,
    pub view: ViewTag,
}

impl EmbeddingSet {
    pub fn new(dim: usize, vectors: Vec<f64>, ids: Vec<String>, view: ViewTag) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Param("embedding dim must be positive".into()));
        }
        if vectors.len() != ids.len() * dim {
            return Err(Error::Shape(format!(
                "vector buffer has {} values, expected {} ({} rows x dim {})",
                vectors.len(),
                ids.len() * dim,
                ids.len(),
                dim
            )));
        }
        let mut seen = HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate id `{id}`")));
            }
        }
        if let Some(bad) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at flat index {bad} (row {})",
                bad / dim
            )));
        }
        Ok(EmbeddingSet {
            dim,
            vectors,
            ids,
            view,
        })
    }

    pub fn count(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Replaces ids (e.g. with ids taken from a manifest).
    pub fn with_ids(self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.count() {
            return Err(Error::Shape(format!(
                "{} ids for {} rows",
                ids.len(),
                self.count()
            )));
        }
        EmbeddingSet::new(self.dim, self.vectors, ids, self.view)
    }
}

/// One dataset entry. `class_id` exists only for evaluation and synthetic
/// data; training code never reads it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub view: ViewTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
}

/// JSON-backed dataset manifest.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(transparent)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let m: Manifest =
            serde_json::from_str(&raw).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let raw = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, raw).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate manifest id `{}`", e.id)));
            }
        }
        Ok(())
    }

    /// Ids of entries carrying the given view, in manifest order.
    pub fn ids_for_view(&self, view: ViewTag) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.view == view)
            .map(|e| e.id.clone())
            .collect()
    }

    /// Class ids of entries carrying the given view, in manifest order.
    pub fn classes_for_view(&self, view: ViewTag) -> Result<Vec<u32>> {
        self.entries
            .iter()
            .filter(|e| e.view == view)
            .map(|e| {
                e.class_id
                    .ok_or_else(|| Error::Argument(format!("entry `{}` has no class_id", e.id)))
            })
            .collect()
    }
}

/// Reads a `UVF1` vector file. The file carries no ids, so rows are named by
/// index; attach manifest ids afterwards if needed.
pub fn read_vector_file(path: &Path, view: ViewTag) -> Result<EmbeddingSet> {
    let mut file =
        fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header)
        .map_err(|_| Error::Format(format!("{}: missing UVF1 header", path.display())))?;
    if &header[0..4] != UVF_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic {:?}",
            path.display(),
            &header[0..4]
        )));
    }
    let count = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::Format(format!("{}: dim 0", path.display())));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let expected = count * dim * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "{}: payload is {} bytes, expected {}",
            path.display(),
            payload.len(),
            expected
        )));
    }
    let mut vectors = Vec::with_capacity(count * dim);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "{}: non-finite value in payload",
                path.display()
            )));
        }
        vectors.push(v as f64);
    }
    let ids = (0..count).map(|i| i.to_string()).collect();
    EmbeddingSet::new(dim, vectors, ids, view)
}

/// Writes a `UVF1` vector file: magic, u32 count, u32 dim, then count*dim
/// little-endian f32 values.
pub fn write_vector_file(set: &EmbeddingSet, path: &Path) -> Result<()> {
    if set.dim == 0 {
        return Err(Error::Param("cannot write a set with dim 0".into()));
    }
    let mut buf = Vec::with_capacity(12 + set.vectors.len() * 4);
    buf.extend_from_slice(UVF_MAGIC);
    buf.extend_from_slice(&(set.count() as u32).to_le_bytes());
    buf.extend_from_slice(&(set.dim as u32).to_le_bytes());
    for &v in &set.vectors {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Divides every row by its Euclidean norm. Ids and view are preserved.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut out = set.vectors.clone();
    for (i, row) in out.chunks_mut(set.dim).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return Err(Error::ZeroNorm(set.ids[i].clone()));
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    EmbeddingSet::new(set.dim, out, set.ids.clone(), set.view)
}

/// Euclidean norm of a row slice.
pub fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trip_identity() {
        let dir = tmp();
        let p = dir.path().join("v.uvf");
        let set = EmbeddingSet::new(
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            vec!["0".into(), "1".into()],
            ViewTag::Drone,
        )
        .unwrap();
        write_vector_file(&set, &p).unwrap();
        let back = read_vector_file(&p, ViewTag::Drone).unwrap();
        assert_eq!(back.count(), 2);
        assert_eq!(back.dim, 3);
        assert_eq!(back.vectors, set.vectors);
    }

    #[test]
    fn empty_file_is_format_error() {
        let dir = tmp();
        let p = dir.path().join("empty.uvf");
        std::fs::write(&p, b"").unwrap();
        assert!(matches!(
            read_vector_file(&p, ViewTag::Drone),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tmp();
        let p = dir.path().join("bad.uvf");
        std::fs::write(&p, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f").unwrap();
        assert!(matches!(
            read_vector_file(&p, ViewTag::Drone),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn truncated_payload_is_length_error() {
        let dir = tmp();
        let p = dir.path().join("trunc.uvf");
        let mut buf = Vec::new();
        buf.extend_from_slice(b"UVF1");
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&3u32.to_le_bytes());
        buf.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&p, buf).unwrap();
        assert!(matches!(
            read_vector_file(&p, ViewTag::Drone),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn non_finite_payload_is_data_error() {
        let dir = tmp();
        let p = dir.path().join("nan.uvf");
        let mut buf = Vec::new();
        buf.extend_from_slice(b"UVF1");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&p, buf).unwrap();
        assert!(matches!(
            read_vector_file(&p, ViewTag::Drone),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn zero_row_set_is_valid_file() {
        let dir = tmp();
        let p = dir.path().join("zero.uvf");
        let set = EmbeddingSet::new(4, vec![], vec![], ViewTag::Satellite).unwrap();
        write_vector_file(&set, &p).unwrap();
        let back = read_vector_file(&p, ViewTag::Satellite).unwrap();
        assert_eq!(back.count(), 0);
        assert_eq!(back.dim, 4);
    }

    #[test]
    fn dim_zero_rejected() {
        assert!(EmbeddingSet::new(0, vec![], vec![], ViewTag::Drone).is_err());
    }

    #[test]
    fn random_round_trip_is_byte_exact() {
        let dir = tmp();
        let p = dir.path().join("rand.uvf");
        let mut rng = crate::util::seeded_rng(11);
        let dim = 8;
        let count = 100;
        // Generate f32-representable values so the f64 in-memory form maps
        // back to identical bytes.
        let vectors: Vec<f64> = (0..count * dim)
            .map(|_| rng.gen_range(-2.0f32..2.0f32) as f64)
            .collect();
        let ids = (0..count).map(|i| i.to_string()).collect();
        let set = EmbeddingSet::new(dim, vectors, ids, ViewTag::Drone).unwrap();
        write_vector_file(&set, &p).unwrap();
        let bytes_a = std::fs::read(&p).unwrap();
        let back = read_vector_file(&p, ViewTag::Drone).unwrap();
        let p2 = dir.path().join("rand2.uvf");
        write_vector_file(&back, &p2).unwrap();
        let bytes_b = std::fs::read(&p2).unwrap();
        assert_eq!(bytes_a, bytes_b);
        assert_eq!(set.vectors, back.vectors);
    }

    #[test]
    fn normalize_three_four_five() {
        let set = EmbeddingSet::new(2, vec![3.0, 4.0], vec!["a".into()], ViewTag::Drone).unwrap();
        let n = l2_normalize(&set).unwrap();
        assert!((n.vectors[0] - 0.6).abs() < 1e-12);
        assert!((n.vectors[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn normalize_zero_row_names_id() {
        let set = EmbeddingSet::new(
            2,
            vec![1.0, 0.0, 0.0, 0.0],
            vec!["good".into(), "bad".into()],
            ViewTag::Drone,
        )
        .unwrap();
        match l2_normalize(&set) {
            Err(Error::ZeroNorm(id)) => assert_eq!(id, "bad"),
            other => panic!("expected ZeroNorm, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_unit(
            rows in proptest::collection::vec(
                proptest::collection::vec(-10.0f64..10.0, 4), 1..20)
        ) {
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let ids = (0..rows.len()).map(|i| i.to_string()).collect();
            let set = EmbeddingSet::new(4, flat, ids, ViewTag::Drone).unwrap();
            if let Ok(n1) = l2_normalize(&set) {
                for i in 0..n1.count() {
                    prop_assert!((row_norm(n1.row(i)) - 1.0).abs() < 1e-9);
                }
                let n2 = l2_normalize(&n1).unwrap();
                for (a, b) in n1.vectors.iter().zip(&n2.vectors) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
