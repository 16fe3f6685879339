//! Labeled datasets: synthetic generators with controlled label noise, and
//! a plain CSV persistence format (`f0..f{d-1},label[,noisy]`).

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature matrix, integer class labels and an optional ground-truth mask of
/// flipped labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// `true` where the stored label was flipped away from the ground truth.
    pub noise_mask: Option<Vec<bool>>,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        n_classes: usize,
        noise_mask: Option<Vec<bool>>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let ds = LabeledDataset {
            features,
            labels,
            n_classes,
            noise_mask,
            name: name.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if self.labels.len() != n {
            return Err(Error::Dimension {
                what: "label count",
                expected: n,
                got: self.labels.len(),
            });
        }
        if let Some(mask) = &self.noise_mask {
            if mask.len() != n {
                return Err(Error::Dimension {
                    what: "noise mask length",
                    expected: n,
                    got: mask.len(),
                });
            }
        }
        if self.n_classes == 0 {
            return Err(Error::config("dataset must declare at least one class"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::config(format!(
                "label {bad} out of range for {} classes",
                self.n_classes
            )));
        }
        if self.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("dataset contains non-finite features"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.features.ncols();
        let flat = self
            .features
            .as_slice()
            .expect("feature matrix is kept in standard layout");
        &flat[i * d..(i + 1) * d]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn flipped_count(&self) -> usize {
        self.noise_mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&b| b).count())
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        let features = self.features.select(Axis(0), indices);
        LabeledDataset {
            features: to_standard(features),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            noise_mask: self
                .noise_mask
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i]).collect()),
            name: self.name.clone(),
        }
    }

    /// Dataset without sample `j`.
    pub fn without(&self, j: usize) -> LabeledDataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| i != j).collect();
        self.select(&keep)
    }

    /// Flips the labels at `indices` (binary: to the other class; multiclass:
    /// uniformly to one of the other classes) and toggles their mask bits.
    /// For binary data, flipping the same indices twice restores the original.
    pub fn flip_labels(&self, indices: &[usize], rng: &mut impl Rng) -> Result<LabeledDataset> {
        if self.n_classes < 2 {
            return Err(Error::config("cannot flip labels of a single-class dataset"));
        }
        let mut out = self.clone();
        let mut mask = out.noise_mask.take().unwrap_or_else(|| vec![false; self.len()]);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::config(format!("flip index {i} out of range")));
            }
            let y = out.labels[i];
            out.labels[i] = if self.n_classes == 2 {
                1 - y
            } else {
                let r = rng.random_range(0..self.n_classes - 1);
                if r >= y {
                    r + 1
                } else {
                    r
                }
            };
            mask[i] = !mask[i];
        }
        out.noise_mask = Some(mask);
        Ok(out)
    }
}

fn to_standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Label-noise injection: `flips_per_class` samples of every class have their
/// label flipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub flips_per_class: usize,
    pub seed: u64,
}

/// Flips exactly `flips_per_class` labels in each class, sampled uniformly
/// without replacement, and records them in the noise mask.
pub fn inject_label_noise(ds: &LabeledDataset, spec: NoiseSpec) -> Result<LabeledDataset> {
    let counts = ds.class_counts();
    if spec.flips_per_class * ds.n_classes > ds.len() {
        return Err(Error::config(format!(
            "{} flips per class x {} classes exceeds {} samples",
            spec.flips_per_class,
            ds.n_classes,
            ds.len()
        )));
    }
    if let Some((c, &have)) = counts
        .iter()
        .enumerate()
        .find(|(_, &have)| have < spec.flips_per_class)
    {
        return Err(Error::config(format!(
            "class {c} has {have} samples, cannot flip {}",
            spec.flips_per_class
        )));
    }
    if spec.flips_per_class == 0 {
        let mut out = ds.clone();
        out.noise_mask.get_or_insert_with(|| vec![false; ds.len()]);
        return Ok(out);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen = Vec::with_capacity(spec.flips_per_class * ds.n_classes);
    for class in 0..ds.n_classes {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        let picks = index::sample(&mut rng, members.len(), spec.flips_per_class);
        let mut picked: Vec<usize> = picks.into_iter().map(|k| members[k]).collect();
        picked.sort_unstable();
        chosen.extend(picked);
    }
    ds.flip_labels(&chosen, &mut rng)
}

/// Two isotropic Gaussian clusters, one per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobGeometry {
    pub std: f64,
    pub center_offset: f64,
}

impl Default for BlobGeometry {
    fn default() -> Self {
        // centers at (-2, -2) and (2, 2): separation 5.66 >= 6 * 0.8
        BlobGeometry {
            std: 0.8,
            center_offset: 2.0,
        }
    }
}

fn check_even(n_train: usize, n_test: usize) -> Result<()> {
    if !n_train.is_multiple_of(2) || !n_test.is_multiple_of(2) {
        return Err(Error::config(format!(
            "sample counts must be even for balanced binary classes (got {n_train}, {n_test})"
        )));
    }
    Ok(())
}

/// Interleaves a balanced sample of both classes in random order.
fn shuffled_binary(
    n: usize,
    rng: &mut ChaCha8Rng,
    mut draw: impl FnMut(usize, &mut ChaCha8Rng) -> [f64; 2],
    name: &str,
) -> LabeledDataset {
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i >= n / 2)).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), rng);
    let mut features = Array2::zeros((n, 2));
    for (i, &y) in labels.iter().enumerate() {
        let [a, b] = draw(y, rng);
        features[[i, 0]] = a;
        features[[i, 1]] = b;
    }
    LabeledDataset {
        features,
        labels,
        n_classes: 2,
        noise_mask: None,
        name: name.to_string(),
    }
}

pub fn gen_linear_blobs(
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    gen_linear_blobs_with(n_train, n_test, BlobGeometry::default(), seed)
}

pub fn gen_linear_blobs_with(
    n_train: usize,
    n_test: usize,
    geometry: BlobGeometry,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    check_even(n_train, n_test)?;
    if !(geometry.std >= 0.0) {
        return Err(Error::config("blob std must be non-negative"));
    }
    let normal = Normal::new(0.0, geometry.std).expect("validated std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let off = geometry.center_offset;
    let mut draw = |y: usize, rng: &mut ChaCha8Rng| {
        let c = if y == 0 { -off } else { off };
        [c + normal.sample(rng), c + normal.sample(rng)]
    };
    let train = shuffled_binary(n_train, &mut rng, &mut draw, "blobs-train");
    let test = shuffled_binary(n_test, &mut rng, &mut draw, "blobs-test");
    Ok((train, test))
}

/// Default Gaussian jitter for the two-moons generator.
pub const MOONS_JITTER: f64 = 0.15;

/// Interleaved half moons: class 0 on the upper unit arc, class 1 on the lower
/// arc shifted by (1, -0.5); arc parameters uniform in [0, pi].
pub fn gen_half_moons(
    n_train: usize,
    n_test: usize,
    jitter: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    check_even(n_train, n_test)?;
    if !(jitter >= 0.0) || !jitter.is_finite() {
        return Err(Error::config(format!("moons jitter must be >= 0, got {jitter}")));
    }
    let normal = Normal::new(0.0, jitter).expect("validated jitter");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |y: usize, rng: &mut ChaCha8Rng| {
        let t = rng.random_range(0.0..=PI);
        let [x0, x1] = if y == 0 {
            [t.cos(), t.sin()]
        } else {
            [1.0 - t.cos(), 0.5 - t.sin()]
        };
        [x0 + normal.sample(rng), x1 + normal.sample(rng)]
    };
    let train = shuffled_binary(n_train, &mut rng, &mut draw, "moons-train");
    let test = shuffled_binary(n_test, &mut rng, &mut draw, "moons-test");
    Ok((train, test))
}

/// Writes `f0..f{d-1},label[,noisy]` with 17 significant digits per feature.
pub fn write_csv(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let d = ds.n_features();
    let mut header: Vec<String> = (0..d).map(|k| format!("f{k}")).collect();
    header.push("label".into());
    if ds.noise_mask.is_some() {
        header.push("noisy".into());
    }
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.row(i).iter().map(|x| format!("{x:.16e}")).collect();
        rec.push(ds.labels[i].to_string());
        if let Some(mask) = &ds.noise_mask {
            rec.push(u8::from(mask[i]).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the CSV layout written by [`write_csv`]. The class count is
/// `max(label) + 1`, at least 2.
pub fn read_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let parse_err = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

    let label_col = header
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| parse_err("missing `label` column".into()))?;
    let mut seen = HashSet::new();
    for (k, h) in header.iter().enumerate() {
        if !seen.insert(h.as_str()) {
            return Err(parse_err(format!("duplicate column `{h}`")));
        }
        let ok = if k < label_col {
            *h == format!("f{k}")
        } else if k == label_col {
            true
        } else {
            k == label_col + 1 && h == "noisy"
        };
        if !ok {
            return Err(parse_err(format!("unexpected column `{h}` at position {k}")));
        }
    }
    let d = label_col;
    let has_mask = header.len() == d + 2;

    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut mask = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(format!("row {}: {e}", line + 1)))?;
        for k in 0..d {
            let v: f64 = rec[k]
                .parse()
                .map_err(|_| parse_err(format!("row {}: non-numeric feature `{}`", line + 1, &rec[k])))?;
            feats.push(v);
        }
        let y: usize = rec[d]
            .parse()
            .map_err(|_| parse_err(format!("row {}: bad label `{}`", line + 1, &rec[d])))?;
        labels.push(y);
        if has_mask {
            let b = match &rec[d + 1] {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(parse_err(format!("row {}: bad noisy flag `{other}`", line + 1))),
            };
            mask.push(b);
        }
    }
    let n = labels.len();
    let features = Array2::from_shape_vec((n, d), feats).expect("row lengths checked");
    let n_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabeledDataset::new(features, labels, n_classes, has_mask.then_some(mask), name)
        .map_err(|e| parse_err(e.to_string()))
}
