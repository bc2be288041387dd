//! Synthetic data, label-noise injection, vector augmentation, stratified
//! splitting and the dataset CSV format.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numnet::Matrix;
use crate::{seeded_rng, Error, Result};

/// Features with their hidden clean labels and observed noisy labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub x: Matrix,
    pub y_clean: Vec<usize>,
    pub y_noisy: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(
        x: Matrix,
        y_clean: Vec<usize>,
        y_noisy: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let n = x.rows();
        if y_clean.len() != n || y_noisy.len() != n {
            return Err(Error::Shape(format!(
                "{n} rows but {} clean / {} noisy labels",
                y_clean.len(),
                y_noisy.len()
            )));
        }
        if classes < 1 {
            return Err(Error::InvalidConfig("class count must be positive".into()));
        }
        if let Some(bad) = y_clean.iter().chain(&y_noisy).find(|&&y| y >= classes) {
            return Err(Error::InvalidConfig(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Self {
            x,
            y_clean,
            y_noisy,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Fraction of samples whose observed label differs from the clean one.
    pub fn noise_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let flipped = self
            .y_clean
            .iter()
            .zip(&self.y_noisy)
            .filter(|(a, b)| a != b)
            .count();
        flipped as f64 / self.len() as f64
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            x: self.x.select_rows(indices),
            y_clean: indices.iter().map(|&i| self.y_clean[i]).collect(),
            y_noisy: indices.iter().map(|&i| self.y_noisy[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn with_noisy_labels(&self, y_noisy: Vec<usize>) -> Result<LabeledDataset> {
        LabeledDataset::new(self.x.clone(), self.y_clean.clone(), y_noisy, self.classes)
    }
}

/// Parameters of [`make_blobs`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub sigma: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            n_per_class: 500,
            dim: 16,
            separation: 4.0,
            sigma: 1.0,
        }
    }
}

impl BlobSpec {
    pub fn generate(&self, seed: u64) -> Result<LabeledDataset> {
        make_blobs(
            self.classes,
            self.n_per_class,
            self.dim,
            self.separation,
            self.sigma,
            seed,
        )
    }
}

/// Isotropic Gaussian classes around `separation·u_c`, with the unit
/// directions `u_c` drawn uniformly on the sphere. Rows are shuffled; the
/// noisy labels start equal to the clean ones.
pub fn make_blobs(
    classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 || dim < 2 {
        return Err(Error::InvalidConfig(format!(
            "blobs need at least 2 classes and 2 dimensions, got C={classes}, d={dim}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be positive".into()));
    }
    if !(separation > 0.0 && separation.is_finite()) || !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "separation must be > 0 and sigma ≥ 0, got {separation} and {sigma}"
        )));
    }
    let mut rng = seeded_rng(seed);
    let centers = sphere_points(classes, dim, &mut rng);

    let n = classes * n_per_class;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut data = vec![0.0; n * dim];
    let mut labels = vec![0; n];
    for (slot, &src) in order.iter().enumerate() {
        let c = src / n_per_class;
        labels[slot] = c;
        let row = &mut data[slot * dim..(slot + 1) * dim];
        for (v, &u) in row.iter_mut().zip(&centers[c]) {
            let noise: f64 = rng.sample(StandardNormal);
            *v = separation * u + sigma * noise;
        }
    }
    LabeledDataset::new(Matrix::new(n, dim, data)?, labels.clone(), labels, classes)
}

/// `count` distinct unit vectors, drawn as normalized Gaussians.
fn sphere_points<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(count);
    while points.len() < count {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        let u: Vec<f64> = v.iter().map(|a| a / norm).collect();
        if points.iter().any(|p| p == &u) {
            continue;
        }
        points.push(u);
    }
    points
}

/// How the replacement label of a symmetric-noise sample is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetricConvention {
    /// Uniform over all classes, the true class included.
    #[default]
    UniformOverAll,
    /// Uniform over the other `C − 1` classes.
    ExcludeTrue,
}

/// Per-class flip targets; `None` leaves a class untouched.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PairMap(pub Vec<Option<usize>>);

impl PairMap {
    /// `c → (c + 1) mod C` for even `c`.
    pub fn even_to_next(classes: usize) -> Self {
        PairMap(
            (0..classes)
                .map(|c| (c % 2 == 0).then_some((c + 1) % classes))
                .collect(),
        )
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.0.len() != classes {
            return Err(Error::InvalidConfig(format!(
                "pair map covers {} classes, dataset has {classes}",
                self.0.len()
            )));
        }
        for (c, t) in self.0.iter().enumerate() {
            match *t {
                Some(t) if t == c => {
                    return Err(Error::InvalidConfig(format!(
                        "pair map sends class {c} to itself"
                    )))
                }
                Some(t) if t >= classes => {
                    return Err(Error::InvalidConfig(format!(
                        "pair map target {t} outside [0, {classes})"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NoiseKind {
    Symmetric {
        convention: SymmetricConvention,
    },
    Asymmetric {
        /// Defaults to [`PairMap::even_to_next`].
        pair_map: Option<PairMap>,
    },
}

/// Serialized as one flat object, e.g.
/// `{"kind": "symmetric", "ratio": 0.5, "seed": 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseDoc", into = "NoiseDoc")]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub ratio: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum NoiseTag {
    Symmetric,
    Asymmetric,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoiseDoc {
    kind: NoiseTag,
    ratio: f64,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    convention: Option<SymmetricConvention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pair_map: Option<PairMap>,
}

impl TryFrom<NoiseDoc> for NoiseSpec {
    type Error = String;

    fn try_from(d: NoiseDoc) -> std::result::Result<Self, String> {
        let kind = match d.kind {
            NoiseTag::Symmetric if d.pair_map.is_some() => {
                return Err("pair_map is only valid for asymmetric noise".into())
            }
            NoiseTag::Symmetric => NoiseKind::Symmetric {
                convention: d.convention.unwrap_or_default(),
            },
            NoiseTag::Asymmetric if d.convention.is_some() => {
                return Err("convention is only valid for symmetric noise".into())
            }
            NoiseTag::Asymmetric => NoiseKind::Asymmetric {
                pair_map: d.pair_map,
            },
        };
        Ok(NoiseSpec {
            kind,
            ratio: d.ratio,
            seed: d.seed,
        })
    }
}

impl From<NoiseSpec> for NoiseDoc {
    fn from(n: NoiseSpec) -> Self {
        let (kind, convention, pair_map) = match n.kind {
            NoiseKind::Symmetric { convention } => (NoiseTag::Symmetric, Some(convention), None),
            NoiseKind::Asymmetric { pair_map } => (NoiseTag::Asymmetric, None, pair_map),
        };
        NoiseDoc {
            kind,
            ratio: n.ratio,
            seed: n.seed,
            convention,
            pair_map,
        }
    }
}

impl NoiseSpec {
    pub fn symmetric(ratio: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Symmetric {
                convention: SymmetricConvention::UniformOverAll,
            },
            ratio,
            seed,
        }
    }

    pub fn apply(&self, ds: &LabeledDataset) -> Result<LabeledDataset> {
        let mut rng = seeded_rng(self.seed);
        match &self.kind {
            NoiseKind::Symmetric { convention } => {
                inject_symmetric_noise_with(ds, self.ratio, *convention, &mut rng)
            }
            NoiseKind::Asymmetric { pair_map } => {
                let map = pair_map
                    .clone()
                    .unwrap_or_else(|| PairMap::even_to_next(ds.classes));
                inject_asymmetric_noise(ds, self.ratio, &map, &mut rng)
            }
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidConfig(format!(
            "noise ratio {ratio} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Each sample is selected with probability `ratio` and relabeled uniformly
/// over all classes. Labels are always derived from `y_clean`.
pub fn inject_symmetric_noise<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    ratio: f64,
    rng: &mut R,
) -> Result<LabeledDataset> {
    inject_symmetric_noise_with(ds, ratio, SymmetricConvention::UniformOverAll, rng)
}

pub fn inject_symmetric_noise_with<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    ratio: f64,
    convention: SymmetricConvention,
    rng: &mut R,
) -> Result<LabeledDataset> {
    check_ratio(ratio)?;
    let c = ds.classes;
    if convention == SymmetricConvention::ExcludeTrue && c < 2 {
        return Err(Error::InvalidConfig(
            "excluding the true class needs C ≥ 2".into(),
        ));
    }
    let noisy = ds
        .y_clean
        .iter()
        .map(|&y| {
            if rng.random::<f64>() >= ratio {
                return y;
            }
            match convention {
                SymmetricConvention::UniformOverAll => rng.random_range(0..c),
                SymmetricConvention::ExcludeTrue => {
                    let k = rng.random_range(0..c - 1);
                    if k >= y {
                        k + 1
                    } else {
                        k
                    }
                }
            }
        })
        .collect();
    ds.with_noisy_labels(noisy)
}

/// Each sample of a mapped class `c` becomes `pair_map(c)` with probability
/// `ratio`.
pub fn inject_asymmetric_noise<R: Rng + ?Sized>(
    ds: &LabeledDataset,
    ratio: f64,
    pair_map: &PairMap,
    rng: &mut R,
) -> Result<LabeledDataset> {
    check_ratio(ratio)?;
    pair_map.validate(ds.classes)?;
    let noisy = ds
        .y_clean
        .iter()
        .map(|&y| {
            let flip = rng.random::<f64>() < ratio;
            match pair_map.0[y] {
                Some(t) if flip => t,
                _ => y,
            }
        })
        .collect();
    ds.with_noisy_labels(noisy)
}

/// Random view of a feature vector: `mask ⊙ (s·x + ε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub jitter_sigma: f64,
    pub scale_range: (f64, f64),
    pub drop_prob: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.5,
            scale_range: (0.8, 1.2),
            drop_prob: 0.1,
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self {
            jitter_sigma: 0.0,
            scale_range: (1.0, 1.0),
            drop_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::InvalidConfig("jitter_sigma must be ≥ 0".into()));
        }
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "scale_range must satisfy 0 < lo ≤ 1 ≤ hi, got ({lo}, {hi})"
            )));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::InvalidConfig("drop_prob must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.jitter_sigma == 0.0 && self.scale_range == (1.0, 1.0) && self.drop_prob == 0.0
    }
}

pub fn augment<R: Rng + ?Sized>(x: &[f64], spec: &AugmentationSpec, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    augment_in_place(&mut out, spec, rng);
    out
}

fn augment_in_place<R: Rng + ?Sized>(x: &mut [f64], spec: &AugmentationSpec, rng: &mut R) {
    if spec.is_identity() {
        return;
    }
    let (lo, hi) = spec.scale_range;
    let s = if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    };
    // Normal::new only fails for negative or non-finite sigma, which validate() rejects.
    let jitter = Normal::new(0.0, spec.jitter_sigma).expect("valid jitter sigma");
    for v in x.iter_mut() {
        let eps = if spec.jitter_sigma > 0.0 {
            jitter.sample(rng)
        } else {
            0.0
        };
        let keep = spec.drop_prob == 0.0 || rng.random::<f64>() >= spec.drop_prob;
        *v = if keep { s * *v + eps } else { 0.0 };
    }
}

/// Augments every row independently.
pub fn augment_rows<R: Rng + ?Sized>(x: &Matrix, spec: &AugmentationSpec, rng: &mut R) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        augment_in_place(out.row_mut(r), spec, rng);
    }
    out
}

/// Stratified by clean class. Returns sorted `(train, test)` index lists.
pub fn split_indices(
    ds: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test fraction {test_fraction} outside (0, 1)"
        )));
    }
    let mut by_class = vec![Vec::new(); ds.classes];
    for (i, &y) in ds.y_clean.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = seeded_rng(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut idx) in by_class.into_iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "class {c} has {} sample(s); stratified split needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn train_test_split(
    ds: &LabeledDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, test) = split_indices(ds, test_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Writes `x_0..x_{d−1},y_clean,y_noisy` with a header row.
pub fn write_csv<W: Write>(ds: &LabeledDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("x_{j}")).collect();
    header.push("y_clean".into());
    header.push("y_noisy".into());
    w.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(ds.dim() + 2);
    for i in 0..ds.len() {
        record.clear();
        record.extend(ds.x.row(i).iter().map(|v| v.to_string()));
        record.push(ds.y_clean[i].to_string());
        record.push(ds.y_noisy[i].to_string());
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the CSV written by [`write_csv`]. Without `classes`, the class
/// count is one more than the largest label present.
pub fn read_csv<R: Read>(reader: R, classes: Option<usize>) -> Result<LabeledDataset> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let cols = headers.len();
    if cols < 3 {
        return Err(Error::format("header", "expected x_0.., y_clean, y_noisy"));
    }
    let dim = cols - 2;
    for (j, h) in headers.iter().take(dim).enumerate() {
        if h != format!("x_{j}") {
            return Err(Error::format(
                "header",
                format!("column {j} is `{h}`, expected `x_{j}`"),
            ));
        }
    }
    if &headers[dim] != "y_clean" || &headers[dim + 1] != "y_noisy" {
        return Err(Error::format(
            "header",
            "last two columns must be y_clean, y_noisy",
        ));
    }

    let mut data = Vec::new();
    let mut y_clean = Vec::new();
    let mut y_noisy = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(Error::format(
                format!("row {line}"),
                format!("{} fields, expected {cols}", rec.len()),
            ));
        }
        for j in 0..dim {
            let v: f64 = rec[j]
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("row {line} x_{j}"), "not a number"))?;
            if !v.is_finite() {
                return Err(Error::format(
                    format!("row {line} x_{j}"),
                    "non-finite value",
                ));
            }
            data.push(v);
        }
        let label = |k: usize, name: &str| -> Result<usize> {
            rec[k]
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("row {line} {name}"), "not a label"))
        };
        y_clean.push(label(dim, "y_clean")?);
        y_noisy.push(label(dim + 1, "y_noisy")?);
    }
    let n = y_clean.len();
    if n == 0 {
        return Err(Error::Empty("dataset CSV has no rows".into()));
    }
    let observed = y_clean.iter().chain(&y_noisy).copied().max().unwrap_or(0) + 1;
    let classes = classes.unwrap_or(observed);
    LabeledDataset::new(Matrix::new(n, dim, data)?, y_clean, y_noisy, classes)
}
