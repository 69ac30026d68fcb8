//! Dataset ingestion: MNIST IDX files, tabular CSV, and a synthetic
//! Gaussian generator with recorded parameters. Every path produces features
//! in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
    image_shape: Option<(usize, usize)>,
    provenance: String,
}

impl Dataset {
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        classes: usize,
        image_shape: Option<(usize, usize)>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Consistency("dataset has no samples".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(pos) = labels.iter().position(|&y| y >= classes) {
            return Err(Error::Index {
                what: "dataset label",
                index: labels[pos],
                bound: classes,
            });
        }
        if let Some(pos) = features.as_slice().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Consistency(format!(
                "feature value {} at flat index {pos} outside [0, 1]",
                features.as_slice()[pos]
            )));
        }
        if let Some((h, w)) = image_shape {
            if h * w != features.cols() {
                return Err(Error::Consistency(format!(
                    "image shape {h}x{w} does not match {} features",
                    features.cols()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            classes,
            image_shape,
            provenance: provenance.into(),
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Consistency("empty subset".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index {
                what: "dataset row",
                index: bad,
                bound: self.len(),
            });
        }
        Ok(Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            image_shape: self.image_shape,
            provenance: self.provenance.clone(),
        })
    }

    /// First `n` rows (all rows when `n` is 0 or exceeds the length).
    pub fn head(&self, n: usize) -> Dataset {
        let n = if n == 0 { self.len() } else { n.min(self.len()) };
        let idx: Vec<usize> = (0..n).collect();
        self.subset(&idx).expect("non-empty prefix")
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Consistency("concat of zero datasets".into()))?;
        let d = first.dim();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim() != d || p.classes != first.classes {
                return Err(Error::Consistency("concat of datasets with different shapes".into()));
            }
            data.extend_from_slice(p.features.as_slice());
            labels.extend_from_slice(&p.labels);
        }
        Ok(Dataset {
            features: Matrix::from_parts(labels.len(), d, data),
            labels,
            classes: first.classes,
            image_shape: first.image_shape,
            provenance: first.provenance.clone(),
        })
    }

    /// Seeded shuffle, then the last `round(fraction·n)` rows become the
    /// second part. Both parts are kept non-empty.
    pub fn split_holdout(&self, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 || self.len() < 2 {
            return Err(Error::Config(format!(
                "holdout fraction {fraction} on {} samples",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut idx);
        let hold = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len() - 1);
        let cut = self.len() - hold;
        Ok((self.subset(&idx[..cut])?, self.subset(&idx[cut..])?))
    }
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header ({} bytes)", bytes.len())))
}

/// Parses an IDX3 image file; returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "IDX images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "IDX images: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n = be_u32(bytes, 4, "IDX images")? as usize;
    let rows = be_u32(bytes, 8, "IDX images")? as usize;
    let cols = be_u32(bytes, 12, "IDX images")? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::Format(format!(
            "IDX images: header declares {n}x{rows}x{cols} = {need} bytes, payload has {}",
            payload.len()
        )));
    }
    Ok((n, rows, cols, payload))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "IDX labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "IDX labels: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let n = be_u32(bytes, 4, "IDX labels")? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "IDX labels: header declares {n} labels, payload has {}",
            payload.len()
        )));
    }
    Ok(payload)
}

pub fn idx_from_bytes(images: &[u8], labels: &[u8], provenance: &str) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let features = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(
        Matrix::new(n, rows * cols, features)?,
        labels,
        classes,
        Some((rows, cols)),
        provenance,
    )
}

pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    idx_from_bytes(&img, &lab, &format!("idx:{}", images.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

/// Loads `train-*` or `t10k-*` IDX files from `dir`.
pub fn load_mnist(dir: &Path, split: MnistSplit) -> Result<Dataset> {
    let prefix = match split {
        MnistSplit::Train => "train",
        MnistSplit::Test => "t10k",
    };
    read_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

// ---------------------------------------------------------------------------
// Synthetic
// ---------------------------------------------------------------------------

/// Generative parameters of a synthetic dataset.
///
/// A sample of class `c` is `x = μ_c + σ·z`, `z ~ N(0, I)`, then squashed
/// coordinatewise with `clamp(0.5 + x / (2R), 0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub means: Vec<Vec<f64>>,
    pub sigma: f64,
    pub half_range: f64,
}

impl SynthParams {
    /// Bayes-optimal accuracy of the unsquashed two-class problem,
    /// `Φ(‖μ₁ − μ₀‖ / 2σ)`. Clipping only occurs beyond 4σ from every mean.
    pub fn two_class_bayes_accuracy(&self) -> Option<f64> {
        if self.means.len() != 2 {
            return None;
        }
        let dist = self.means[0]
            .iter()
            .zip(&self.means[1])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        Some(std_normal_cdf(dist / (2.0 * self.sigma)))
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

// Numerical Recipes erfc, fractional error < 1.2e-7.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98
                                    + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
            .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
    /// Distance of each class mean from the origin is `separation / 2`.
    pub separation: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(n: usize, d: usize, classes: usize, seed: u64) -> Self {
        Self {
            n,
            d,
            classes,
            separation: 4.0,
            sigma: 1.0,
            seed,
        }
    }

    pub fn generate(&self) -> Result<(Dataset, SynthParams)> {
        if self.classes == 0 || self.d == 0 || self.n < self.classes {
            return Err(Error::Config(format!(
                "synthetic data needs n >= K >= 1 and d >= 1; got n={}, d={}, K={}",
                self.n, self.d, self.classes
            )));
        }
        let mut rng = Rng::new(self.seed);
        let radius = self.separation / 2.0;
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(self.classes);
        for c in 0..self.classes {
            if self.classes == 2 && c == 1 {
                means.push(means[0].iter().map(|v| -v).collect());
                continue;
            }
            let mut u: Vec<f64> = (0..self.d).map(|_| rng.normal()).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            u.iter_mut().for_each(|v| *v *= radius / norm);
            means.push(u);
        }
        let half_range = radius + 4.0 * self.sigma;

        let mut labels: Vec<usize> = (0..self.n).map(|i| i % self.classes).collect();
        rng.shuffle(&mut labels);
        let mut data = Vec::with_capacity(self.n * self.d);
        for &y in &labels {
            for mu in &means[y] {
                let x = mu + self.sigma * rng.normal();
                data.push((0.5 + x / (2.0 * half_range)).clamp(0.0, 1.0));
            }
        }
        let ds = Dataset::new(
            Matrix::new(self.n, self.d, data)?,
            labels,
            self.classes,
            None,
            format!("synth:n={},d={},K={},seed={}", self.n, self.d, self.classes, self.seed),
        )?;
        Ok((
            ds,
            SynthParams {
                means,
                sigma: self.sigma,
                half_range,
            },
        ))
    }
}

/// Gaussian class-conditional data with balanced, shuffled labels.
pub fn synth_classification(n: usize, d: usize, classes: usize, seed: u64) -> Result<(Dataset, SynthParams)> {
    SynthSpec::new(n, d, classes, seed).generate()
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionPlan {
    pub clients: usize,
    pub indices: Vec<Vec<usize>>,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn sizes(&self) -> Vec<usize> {
        self.indices.iter().map(Vec::len).collect()
    }
}

/// Seeded shuffle and contiguous split. Each client gets `⌊n/K⌋` rows and the
/// `n mod K` leftover rows go one apiece to the last clients.
pub fn partition_iid(n: usize, clients: usize, seed: u64) -> Result<PartitionPlan> {
    if clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if clients > n {
        return Err(Error::Partition(format!("{clients} clients for {n} samples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let base = n / clients;
    let extra = n % clients;
    let mut indices = Vec::with_capacity(clients);
    let mut start = 0;
    for k in 0..clients {
        let size = base + usize::from(k >= clients - extra);
        indices.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(PartitionPlan {
        clients,
        indices,
        seed,
    })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Reads a numeric CSV with a header row. Feature columns are min-max scaled
/// to `[0, 1]` (constant columns become 0); `label_column` must hold
/// non-negative integers.
pub fn read_csv_tabular(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_idx = header
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Parse {
            row: 1,
            msg: format!("label column {label_column:?} not in header"),
        })?;
    let width = header.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); width - 1];
    let mut labels = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        if rec.len() != width {
            return Err(Error::Parse {
                row,
                msg: format!("{} cells, header has {width}", rec.len()),
            });
        }
        let mut col = 0;
        for (c, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            if c == label_idx {
                let y: usize = cell.parse().map_err(|_| Error::Parse {
                    row,
                    msg: format!("label {cell:?} is not a non-negative integer"),
                })?;
                labels.push(y);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row,
                    msg: format!("cell {cell:?} in column {c} is not numeric"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        msg: format!("cell {cell:?} in column {c} is not finite"),
                    });
                }
                columns[col].push(v);
                col += 1;
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            row: 1,
            msg: "no data rows after the header".into(),
        });
    }
    for col in &mut columns {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for v in col.iter_mut() {
            *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        }
    }
    let n = labels.len();
    let d = columns.len();
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        for col in &columns {
            data.push(col[i]);
        }
    }
    let classes = labels.iter().max().unwrap() + 1;
    Dataset::new(
        Matrix::new(n, d, data)?,
        labels,
        classes,
        None,
        format!("csv:{}", path.display()),
    )
}

/// Writes features as `f0..f{d-1}` plus a trailing `label` column.
pub fn write_csv_tabular(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (row, y) in ds.features.iter_rows().zip(&ds.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            row: 0,
            msg: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, r: u32, c: u32, payload: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for w in [IDX_IMAGES_MAGIC, n, r, c] {
            b.extend_from_slice(&w.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn idx_two_images() {
        let img = idx_images(2, 2, 2, &[0, 255, 51, 102, 1, 2, 3, 4]);
        assert_eq!(
            &img[..16],
            &[0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2]
        );
        let ds = idx_from_bytes(&img, &idx_labels(&[3, 7]), "t").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.image_shape(), Some((2, 2)));
        assert_eq!(ds.features().get(0, 0), 0.0);
        assert_eq!(ds.features().get(0, 1), 1.0);
        assert_eq!(ds.labels(), &[3, 7]);
    }

    #[test]
    fn idx_rejects_bad_input() {
        let good = idx_images(1, 1, 2, &[1, 2]);
        let mut le = good.clone();
        le[..4].copy_from_slice(&IDX_IMAGES_MAGIC.to_le_bytes());
        let err = idx_from_bytes(&le, &idx_labels(&[0]), "t").unwrap_err().to_string();
        assert!(err.contains("0x03080000"), "{err}");
        assert!(matches!(idx_from_bytes(&good[..10], &idx_labels(&[0]), "t"), Err(Error::Format(_))));
        assert!(matches!(idx_from_bytes(&good[..17], &idx_labels(&[0]), "t"), Err(Error::Format(_))));
        assert!(matches!(
            idx_from_bytes(&good, &idx_labels(&[0, 1]), "t"),
            Err(Error::Consistency(_))
        ));
        assert!(matches!(idx_from_bytes(&good, &good, "t"), Err(Error::Format(_))));
    }

    #[test]
    fn partition_sizes() {
        let p = partition_iid(9, 3, 1).unwrap();
        assert_eq!(p.sizes(), vec![3, 3, 3]);
        assert_eq!(partition_iid(10, 3, 1).unwrap().sizes(), vec![3, 3, 4]);
        assert_eq!(partition_iid(11, 3, 1).unwrap().sizes(), vec![3, 4, 4]);
        let one = partition_iid(5, 1, 1).unwrap();
        let mut all = one.indices[0].clone();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert!(matches!(partition_iid(2, 3, 1), Err(Error::Partition(_))));
        assert!(matches!(partition_iid(2, 0, 1), Err(Error::Partition(_))));
    }

    #[test]
    fn synth_one_per_class_and_deterministic() {
        let (ds, _) = synth_classification(5, 3, 5, 11).unwrap();
        let mut l = ds.labels().to_vec();
        l.sort();
        assert_eq!(l, vec![0, 1, 2, 3, 4]);
        let (a, pa) = synth_classification(50, 4, 3, 2).unwrap();
        let (b, pb) = synth_classification(50, 4, 3, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert!(synth_classification(2, 3, 5, 0).is_err());
    }

    #[test]
    fn bayes_accuracy_for_four_sigma() {
        let (_, p) = synth_classification(10, 2, 2, 3).unwrap();
        let acc = p.two_class_bayes_accuracy().unwrap();
        // Φ(2) = 0.977249868...
        assert!((acc - 0.977_249_868).abs() < 1e-6, "{acc}");
    }

    #[test]
    fn csv_constant_column_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "x,c,label\n1,5,0\n3,5,1\n2,5,1\n").unwrap();
        let ds = read_csv_tabular(&p, "label").unwrap();
        assert_eq!(ds.features().as_slice(), &[0.0, 0.0, 1.0, 0.0, 0.5, 0.0]);
        assert_eq!(ds.classes(), 2);

        fs::write(&p, "x,label\n").unwrap();
        assert!(read_csv_tabular(&p, "label").is_err());

        fs::write(&p, "x,label\n1,0\n2\n").unwrap();
        assert!(matches!(read_csv_tabular(&p, "label"), Err(Error::Parse { row: 3, .. })));

        fs::write(&p, "x,label\n1,0\nabc,1\n").unwrap();
        assert!(matches!(read_csv_tabular(&p, "label"), Err(Error::Parse { row: 3, .. })));

        assert!(matches!(
            read_csv_tabular(&dir.path().join("missing.csv"), "label"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn holdout_split_sizes() {
        let (ds, _) = synth_classification(100, 2, 2, 1).unwrap();
        let (a, b) = ds.split_holdout(0.2, &mut Rng::new(4)).unwrap();
        assert_eq!((a.len(), b.len()), (80, 20));
    }
}
