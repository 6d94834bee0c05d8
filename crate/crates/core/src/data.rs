//! Dataset ingestion: MNIST IDX files, the `BHFT0001` feature format, a
//! seeded Gaussian-cluster generator and query/database splits.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binio::{read_labels, write_atomic, write_labels, ByteReader};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const FEATURES_MAGIC: &[u8; 8] = b"BHFT0001";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Matrix,
    pub labels: Vec<Vec<u32>>,
    pub provenance: String,
}

impl Dataset {
    pub fn new(items: Matrix, labels: Vec<Vec<u32>>, provenance: impl Into<String>) -> Result<Self> {
        if items.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if labels.len() != items.rows() {
            return Err(Error::Mismatch(format!(
                "{} items but {} label sets",
                items.rows(),
                labels.len()
            )));
        }
        Ok(Self {
            items,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.items.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.items.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.items.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("index {bad} out of range for {} items", self.len())));
        }
        Self::new(
            self.items.select_rows(indices),
            indices.iter().map(|&i| self.labels[i].clone()).collect(),
            self.provenance.clone(),
        )
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                detail: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn check_idx_magic(reader: &mut ByteReader<'_>, expected: u32) -> Result<()> {
    let magic = reader.u32_be("idx magic")?;
    if magic != expected {
        return Err(Error::BadMagic {
            path: reader.path(),
            expected: format!("{expected:#010x}"),
        });
    }
    Ok(())
}

/// Reads an IDX image/label pair (optionally gzipped); pixels become `v / 255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read_maybe_gz(images_path)?;
    let mut images = ByteReader::new(&image_bytes, images_path);
    check_idx_magic(&mut images, IDX_IMAGES_MAGIC)?;
    let n = images.u32_be("image count")? as usize;
    let rows = images.u32_be("row count")? as usize;
    let cols = images.u32_be("column count")? as usize;
    let dim = rows * cols;
    let pixels = images.take(n * dim, "pixel data")?;
    images.finish()?;

    let label_bytes = read_maybe_gz(labels_path)?;
    let mut labels = ByteReader::new(&label_bytes, labels_path);
    check_idx_magic(&mut labels, IDX_LABELS_MAGIC)?;
    let n_labels = labels.u32_be("label count")? as usize;
    if n_labels != n {
        return Err(Error::Mismatch(format!(
            "{} has {n} images but {} has {n_labels} labels",
            images_path.display(),
            labels_path.display()
        )));
    }
    let label_data = labels.take(n, "label data")?;
    labels.finish()?;

    let items = Matrix::new(n, dim, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    Dataset::new(
        items,
        label_data.iter().map(|&l| vec![u32::from(l)]).collect(),
        format!("idx:{}", images_path.display()),
    )
}

/// Finds an IDX image/label pair inside `dir`.
///
/// Image files are recognised by `images-idx3-ubyte` in their name (with or
/// without `.gz`); a `train-` prefix is preferred, then lexical order. The
/// label file is the same name with `images-idx3` replaced by `labels-idx1`.
pub fn find_idx_pair(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut candidates: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|name| name.contains("images-idx3-ubyte"))
        .collect();
    candidates.sort_by_key(|name| (!name.starts_with("train-"), name.clone()));
    for name in candidates {
        let label_name = name.replace("images-idx3", "labels-idx1");
        let label_path = dir.join(&label_name);
        if label_path.is_file() {
            return Ok((dir.join(name), label_path));
        }
    }
    Err(Error::Malformed {
        path: dir.to_path_buf(),
        detail: "no IDX image/label pair found".into(),
    })
}

pub fn load_idx_dir(dir: &Path) -> Result<Dataset> {
    let (images, labels) = find_idx_pair(dir)?;
    load_idx(&images, &labels)
}

/// Writes IDX files (uncompressed). Items must be pixel intensities in `[0, 1]`.
pub fn write_idx(dataset: &Dataset, rows: u32, cols: u32, images_path: &Path, labels_path: &Path) -> Result<()> {
    if (rows * cols) as usize != dataset.dim() {
        return Err(Error::invalid("image geometry does not match dataset dimension"));
    }
    let n = dataset.len() as u32;
    let mut img = Vec::with_capacity(16 + dataset.items.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&n.to_be_bytes());
    img.extend_from_slice(&rows.to_be_bytes());
    img.extend_from_slice(&cols.to_be_bytes());
    img.extend(dataset.items.as_slice().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    for set in &dataset.labels {
        let l = *set.first().ok_or_else(|| Error::invalid("IDX needs one label per item"))?;
        lab.push(u8::try_from(l).map_err(|_| Error::invalid("IDX labels must fit in a byte"))?);
    }
    write_atomic(images_path, &img)?;
    write_atomic(labels_path, &lab)
}

/// Gaussian clusters around seeded unit-sphere centres.
///
/// Items are grouped by class (`n_per_class` rows of class 0, then class 1,
/// ...); each item is `centre + spread · N(0, I)` and carries its class id as
/// its only label.
pub fn synthetic_clusters(n_per_class: usize, classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("synthetic clusters need at least two classes"));
    }
    if !(spread >= 0.0) || dim == 0 || n_per_class == 0 {
        return Err(Error::invalid("synthetic clusters need spread >= 0, dim > 0 and n_per_class > 0"));
    }
    let mut rng = RngStream::new(seed);
    let centres = loop {
        let mut c = Matrix::zeros(classes, dim);
        for r in 0..classes {
            let row = c.row_mut(r);
            let norm = loop {
                row.iter_mut().for_each(|v| *v = rng.gaussian());
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 1e-12 {
                    break n;
                }
            };
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let distinct = (0..classes).all(|i| {
            (i + 1..classes).all(|j| {
                c.row(i)
                    .iter()
                    .zip(c.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    > 1e-12
            })
        });
        if distinct {
            break c;
        }
    };
    let mut items = Matrix::zeros(n_per_class * classes, dim);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for class in 0..classes {
        for i in 0..n_per_class {
            let row = items.row_mut(class * n_per_class + i);
            for (v, &c) in row.iter_mut().zip(centres.row(class)) {
                *v = c + spread * rng.gaussian();
            }
            labels.push(vec![class as u32]);
        }
    }
    Dataset::new(
        items,
        labels,
        format!("synthetic:n={n_per_class},classes={classes},dim={dim},spread={spread},seed={seed}"),
    )
}

/// Serialized `BHFT0001` feature file:
///
/// ```text
/// b"BHFT0001" | u64 M | u32 D | M·D f64 (row-major) | M × (u16 count, count × u32)
/// ```
///
/// All integers and floats little-endian.
pub fn features_to_bytes(dataset: &Dataset) -> Result<Vec<u8>> {
    let dim = u32::try_from(dataset.dim()).map_err(|_| Error::invalid("feature dimension exceeds u32"))?;
    let mut out = Vec::with_capacity(20 + 8 * dataset.items.len());
    out.extend_from_slice(FEATURES_MAGIC);
    out.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for v in dataset.items.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    write_labels(&mut out, &dataset.labels)?;
    Ok(out)
}

pub fn write_features(path: &Path, dataset: &Dataset) -> Result<()> {
    write_atomic(path, &features_to_bytes(dataset)?)
}

pub fn features_from_bytes(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes, path);
    r.expect_magic(FEATURES_MAGIC)?;
    let m = r.u64_le("item count")? as usize;
    let d = r.u32_le("dimension")? as usize;
    if m == 0 {
        return Err(Error::EmptyDataset);
    }
    let n_values = m
        .checked_mul(d)
        .filter(|n| n.checked_mul(8).is_some())
        .ok_or_else(|| Error::Malformed {
            path: path.to_path_buf(),
            detail: "declared size overflows".into(),
        })?;
    let raw = r.take(8 * n_values, "feature values")?;
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: "non-finite feature value".into(),
        });
    }
    let labels = read_labels(&mut r, m)?;
    r.finish()?;
    Dataset::new(Matrix::new(m, d, values)?, labels, format!("features:{}", path.display()))
}

pub fn load_features(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    features_from_bytes(&bytes, path)
}

/// Loads a dataset from an IDX directory or a `BHFT0001` file.
pub fn load_any(path: &Path) -> Result<Dataset> {
    if path.is_dir() {
        load_idx_dir(path)
    } else {
        load_features(path)
    }
}

/// Query/database partition saved next to a run for reproducibility.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySplit {
    pub seed: u64,
    pub queries_per_class: usize,
    pub query: Vec<usize>,
    pub database: Vec<usize>,
}

impl QuerySplit {
    /// Draws `per_class` queries per class (keyed by each item's first
    /// label); everything else forms the database and training set.
    pub fn per_class(labels: &[Vec<u32>], per_class: usize, seed: u64) -> Result<Self> {
        let mut by_class: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
        for (i, set) in labels.iter().enumerate() {
            let class = *set
                .first()
                .ok_or_else(|| Error::invalid(format!("item {i} has no label")))?;
            by_class.entry(class).or_default().push(i);
        }
        let mut rng = RngStream::new(seed);
        let mut is_query = vec![false; labels.len()];
        for (class, mut members) in by_class {
            if members.len() <= per_class {
                return Err(Error::invalid(format!(
                    "class {class} has {} items, cannot draw {per_class} queries and keep a database",
                    members.len()
                )));
            }
            rng.shuffle(&mut members);
            for &i in &members[..per_class] {
                is_query[i] = true;
            }
        }
        let (query, database): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| is_query[i]);
        Ok(Self {
            seed,
            queries_per_class: per_class,
            query,
            database,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}
