//! Embedding matrices and the similarity/distance primitives the losses and
//! metrics are built on.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_NORM: f64 = 1e-12;

/// Row-major `rows x dim` matrix of f64.
///
/// Also used for raw features and gradient matrices, in which case
/// `is_normalized` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be >= 1".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch {
                rows,
                dim,
                len: data.len(),
            });
        }
        Ok(EmbeddingMatrix {
            rows,
            dim,
            data,
            normalized: false,
        })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingMatrix {
            rows,
            dim,
            data: vec![0.0; rows * dim],
            normalized: false,
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        EmbeddingMatrix::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Mutable row access clears the normalized flag.
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        self.normalized = false;
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.normalized = false;
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Copy the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            rows: idx.len(),
            dim: self.dim,
            data,
            normalized: self.normalized,
        }
    }

    /// Mark rows as unit-norm without rescaling. Checked to 1e-6.
    pub fn assume_normalized(mut self) -> Result<Self> {
        for (i, r) in self.iter_rows().enumerate() {
            let n = norm(r);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!(
                    "row {i} has norm {n}, expected unit norm"
                )));
            }
        }
        self.normalized = true;
        Ok(self)
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &EmbeddingMatrix, scale: f64) {
        assert_eq!((self.rows, self.dim), (other.rows, other.dim));
        self.normalized = false;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Divide every row by its L2 norm.
pub fn l2_normalize(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut out = matrix.clone();
    for i in 0..out.rows {
        let row = &mut out.data[i * out.dim..(i + 1) * out.dim];
        let n = norm(row);
        if !(n >= MIN_NORM) {
            return Err(Error::ZeroNorm { row: i, norm: n });
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    out.normalized = true;
    Ok(out)
}

/// Dot product of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(dot(u, v).clamp(-1.0, 1.0))
}

pub fn euclid_dist(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Dense row-major `rows x cols` score table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                rows,
                dim: cols,
                len: data.len(),
            });
        }
        Ok(ScoreMatrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.as_ref().len(),
                });
            }
            data.extend_from_slice(r.as_ref());
        }
        ScoreMatrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn get_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> ScoreMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        ScoreMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScoreMatrix {
        ScoreMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Cosine similarity of every image row against every text row.
pub fn sim_matrix(images: &EmbeddingMatrix, texts: &EmbeddingMatrix) -> Result<ScoreMatrix> {
    if images.dim != texts.dim {
        return Err(Error::DimensionMismatch {
            expected: images.dim,
            got: texts.dim,
        });
    }
    let mut data = Vec::with_capacity(images.rows * texts.rows);
    for u in images.iter_rows() {
        for v in texts.iter_rows() {
            data.push(cosine_sim(u, v)?);
        }
    }
    ScoreMatrix::new(images.rows, texts.rows, data)
}

/// Euclidean distance of every `a` row against every `b` row.
pub fn dist_matrix(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<ScoreMatrix> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim,
            got: b.dim,
        });
    }
    let mut data = Vec::with_capacity(a.rows * b.rows);
    for u in a.iter_rows() {
        for v in b.iter_rows() {
            data.push(euclid_dist(u, v)?);
        }
    }
    ScoreMatrix::new(a.rows, b.rows, data)
}

/// Element type of a binary feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// JSON manifest that sits next to a flat little-endian binary matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureManifest {
    pub rows: usize,
    pub dim: usize,
    pub dtype: Dtype,
    pub ids: Vec<String>,
}

/// A matrix with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub ids: Vec<String>,
    pub matrix: EmbeddingMatrix,
}

impl FeatureSet {
    pub fn new(ids: Vec<String>, matrix: EmbeddingMatrix) -> Result<Self> {
        if ids.len() != matrix.rows() {
            return Err(Error::InvalidConfig(format!(
                "{} ids for {} rows",
                ids.len(),
                matrix.rows()
            )));
        }
        Ok(FeatureSet { ids, matrix })
    }

    pub fn index_of(&self) -> std::collections::HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Binary data path for a manifest path: same stem, `.bin` extension.
    pub fn data_path(manifest: &Path) -> PathBuf {
        manifest.with_extension("bin")
    }

    /// Write `<stem>.json` + `<stem>.bin`.
    pub fn write_binary(&self, manifest_path: &Path, dtype: Dtype) -> Result<()> {
        let manifest = FeatureManifest {
            rows: self.matrix.rows(),
            dim: self.matrix.dim(),
            dtype,
            ids: self.ids.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(manifest_path, json + "\n").map_err(|e| Error::io(manifest_path, e))?;

        let data_path = Self::data_path(manifest_path);
        let mut bytes = Vec::with_capacity(self.matrix.as_slice().len() * dtype.width());
        for &x in self.matrix.as_slice() {
            match dtype {
                Dtype::F32 => bytes.extend_from_slice(&(x as f32).to_le_bytes()),
                Dtype::F64 => bytes.extend_from_slice(&x.to_le_bytes()),
            }
        }
        std::fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))
    }

    pub fn read_binary(manifest_path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: FeatureManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
        if manifest.ids.len() != manifest.rows {
            return Err(Error::format(
                manifest_path,
                format!("{} ids for {} rows", manifest.ids.len(), manifest.rows),
            ));
        }
        let data_path = Self::data_path(manifest_path);
        let mut bytes = Vec::new();
        File::open(&data_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&data_path, e))?;
        let width = manifest.dtype.width();
        let expected = manifest.rows * manifest.dim * width;
        if bytes.len() != expected {
            return Err(Error::format(
                &data_path,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(width)
            .map(|c| match manifest.dtype {
                Dtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                Dtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        let matrix = EmbeddingMatrix::new(manifest.rows, manifest.dim, data)
            .map_err(|e| Error::format(manifest_path, e.to_string()))?;
        FeatureSet::new(manifest.ids, matrix)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for (id, row) in self.ids.iter().zip(self.matrix.iter_rows()) {
            let rec = JsonlRow {
                id: id.clone(),
                vec: row.to_vec(),
            };
            let line = serde_json::to_string(&rec).expect("row serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlRow = serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            ids.push(rec.id);
            rows.push(rec.vec);
        }
        if rows.is_empty() {
            return Err(Error::format(path, "no feature rows"));
        }
        let matrix =
            EmbeddingMatrix::from_rows(&rows).map_err(|e| Error::format(path, e.to_string()))?;
        FeatureSet::new(ids, matrix)
    }

    /// Dispatch on extension: `.jsonl` reads the row format, anything else is
    /// treated as a manifest.
    pub fn read(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => Self::read_jsonl(path),
            _ => Self::read_binary(path),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRow {
    id: String,
    vec: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = norm(v);
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn normalize_examples() {
        let m = EmbeddingMatrix::from_rows(&[[3.0, 4.0]]).unwrap();
        let n = l2_normalize(&m).unwrap();
        assert!(n.is_normalized());
        assert!((n.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-15);

        let m = EmbeddingMatrix::from_rows(&[[2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(l2_normalize(&m).unwrap().row(0), &[1.0, 0.0, 0.0]);

        let again = l2_normalize(&n).unwrap();
        for (a, b) in again.as_slice().iter().zip(n.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let m = EmbeddingMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        match l2_normalize(&m) {
            Err(Error::ZeroNorm { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sim_and_dist_examples() {
        let u = [1.0, 0.0];
        let v = [0.0, 1.0];
        let w = [-1.0, 0.0];
        assert_eq!(cosine_sim(&u, &u).unwrap(), 1.0);
        assert_eq!(cosine_sim(&u, &v).unwrap(), 0.0);
        assert_eq!(cosine_sim(&u, &w).unwrap(), -1.0);
        assert_eq!(euclid_dist(&u, &u).unwrap(), 0.0);
        assert!((euclid_dist(&u, &v).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(euclid_dist(&u, &w).unwrap(), 2.0);
        assert!(cosine_sim(&u, &[1.0, 0.0, 0.0]).is_err());
        assert!(euclid_dist(&u, &[1.0]).is_err());
    }

    #[test]
    fn cosine_is_clamped() {
        let u = [1.0 + 1e-12, 0.0];
        assert_eq!(cosine_sim(&u, &u).unwrap(), 1.0);
    }

    #[test]
    fn sim_matrix_examples() {
        let a = l2_normalize(&EmbeddingMatrix::from_rows(&[[1.0, 2.0, 2.0]]).unwrap()).unwrap();
        let s = sim_matrix(&a, &a).unwrap();
        assert_eq!((s.rows(), s.cols()), (1, 1));
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15);

        let imgs = l2_normalize(
            &EmbeddingMatrix::from_rows(&[[1.0, 2.0, 0.5, -1.0], [0.3, -0.2, 1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let txts = l2_normalize(
            &EmbeddingMatrix::from_rows(&[
                [0.0, 1.0, 0.0, 0.0],
                [1.0, 1.0, 1.0, 1.0],
                [-2.0, 0.1, 0.3, 0.9],
            ])
            .unwrap(),
        )
        .unwrap();
        let s = sim_matrix(&imgs, &txts).unwrap();
        assert_eq!((s.rows(), s.cols()), (2, 3));
        for i in 0..2 {
            for j in 0..3 {
                let brute: f64 = (0..4).map(|k| imgs.row(i)[k] * txts.row(j)[k]).sum();
                assert_eq!(s.get(i, j), cosine_sim(imgs.row(i), txts.row(j)).unwrap());
                assert!((s.get(i, j) - brute).abs() < 1e-15);
            }
        }

        let s = sim_matrix(&txts, &txts).unwrap();
        for i in 0..3 {
            assert!((s.get(i, i) - 1.0).abs() < 1e-12);
            for j in 0..3 {
                assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
        assert!(sim_matrix(&imgs, &a).is_err());
    }

    #[test]
    fn feature_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = EmbeddingMatrix::from_rows(&[[0.5, -1.25], [3.0, 1e-3]]).unwrap();
        let set = FeatureSet::new(vec!["a".into(), "b".into()], m).unwrap();

        let p64 = dir.path().join("f64.json");
        set.write_binary(&p64, Dtype::F64).unwrap();
        assert_eq!(std::fs::metadata(dir.path().join("f64.bin")).unwrap().len(), 32);
        assert_eq!(FeatureSet::read(&p64).unwrap(), set);

        let p32 = dir.path().join("f32.json");
        set.write_binary(&p32, Dtype::F32).unwrap();
        let back = FeatureSet::read(&p32).unwrap();
        for (a, b) in back.matrix.as_slice().iter().zip(set.matrix.as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }

        let pj = dir.path().join("rows.jsonl");
        set.write_jsonl(&pj).unwrap();
        assert_eq!(FeatureSet::read(&pj).unwrap(), set);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let set = FeatureSet::new(
            vec!["a".into()],
            EmbeddingMatrix::from_rows(&[[1.0, 2.0]]).unwrap(),
        )
        .unwrap();
        let p = dir.path().join("x.json");
        set.write_binary(&p, Dtype::F64).unwrap();
        std::fs::write(dir.path().join("x.bin"), [0u8; 7]).unwrap();
        assert!(matches!(FeatureSet::read(&p), Err(Error::Format { .. })));
    }

    fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, d).prop_filter("nonzero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn distance_similarity_identity(u in vec_strategy(6), v in vec_strategy(6)) {
            let (u, v) = (unit(&u), unit(&v));
            let s = cosine_sim(&u, &v).unwrap();
            let d = euclid_dist(&u, &v).unwrap();
            prop_assert!((d * d + 2.0 * s - 2.0).abs() < 1e-9);
            prop_assert_eq!(s, cosine_sim(&v, &u).unwrap());
        }

        #[test]
        fn positive_scaling_is_invisible(u in vec_strategy(5), v in vec_strategy(5), c in 1e-3f64..1e3) {
            let m = EmbeddingMatrix::from_rows(&[u.clone(), v.clone()]).unwrap();
            let scaled: Vec<f64> = u.iter().map(|x| x * c).collect();
            let ms = EmbeddingMatrix::from_rows(&[scaled, v]).unwrap();
            let (n, ns) = (l2_normalize(&m).unwrap(), l2_normalize(&ms).unwrap());
            for (a, b) in n.as_slice().iter().zip(ns.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let s = sim_matrix(&n, &n).unwrap();
            let ss = sim_matrix(&ns, &ns).unwrap();
            prop_assert!((s.get(0, 1) - ss.get(0, 1)).abs() < 1e-9);
        }

        #[test]
        fn triangle_inequality(a in vec_strategy(4), b in vec_strategy(4), c in vec_strategy(4)) {
            let (a, b, c) = (unit(&a), unit(&b), unit(&c));
            let ab = euclid_dist(&a, &b).unwrap();
            let bc = euclid_dist(&b, &c).unwrap();
            let ac = euclid_dist(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
