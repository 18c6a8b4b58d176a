//! Multi-view multi-label data, incompleteness injection and label structure.

mod correlation;
mod io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{Matrix, RngStream};

pub use correlation::{
    build_correlation, export_correlation_csv, label_similarity_graph, truncate_correlation,
    LabelCorrelation, LabelGraph,
};
pub use io::{
    load_dataset, read_matrix_csv, save_dataset, write_matrix_csv, DatasetManifest, MANIFEST,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::contract(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Views `X^(v)`, zero-filled labels `Y`, view indicator `W` and label
/// indicator `G`, plus a split tag per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    views: Vec<Matrix>,
    labels: Matrix,
    view_mask: Matrix,
    label_mask: Matrix,
    split: Vec<Split>,
    seed: u64,
}

/// Rows of a dataset restricted to one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub views: Vec<Matrix>,
    pub labels: Matrix,
    pub view_mask: Matrix,
    pub label_mask: Matrix,
}

fn is_binary(m: &Matrix) -> bool {
    m.data().iter().all(|&x| x == 0.0 || x == 1.0)
}

impl MultiViewDataset {
    pub fn new(
        views: Vec<Matrix>,
        labels: Matrix,
        view_mask: Matrix,
        label_mask: Matrix,
        split: Vec<Split>,
        seed: u64,
    ) -> Result<Self> {
        let n = labels.rows();
        if views.is_empty() {
            return Err(Error::contract("dataset needs at least one view"));
        }
        for (v, x) in views.iter().enumerate() {
            if x.rows() != n {
                return Err(Error::contract(format!(
                    "view {v} has {} rows, labels have {n}",
                    x.rows()
                )));
            }
        }
        if view_mask.shape() != (n, views.len()) {
            return Err(Error::Dimension {
                op: "view indicator",
                lhs: (n, views.len()),
                rhs: view_mask.shape(),
            });
        }
        label_mask.check_same_shape(&labels, "label indicator")?;
        if split.len() != n {
            return Err(Error::contract(format!(
                "split has {} tags for {n} samples",
                split.len()
            )));
        }
        for (name, m) in [("Y", &labels), ("W", &view_mask), ("G", &label_mask)] {
            if !is_binary(m) {
                return Err(Error::contract(format!("{name} must contain only 0/1")));
            }
        }
        if let Some(i) = view_mask
            .iter_rows()
            .position(|r| r.iter().all(|&w| w == 0.0))
        {
            return Err(Error::contract(format!("sample {i} has no available view")));
        }
        if labels
            .data()
            .iter()
            .zip(label_mask.data())
            .any(|(&y, &g)| g == 0.0 && y != 0.0)
        {
            return Err(Error::contract("Y must be zero wherever G is zero"));
        }
        Ok(MultiViewDataset {
            views,
            labels,
            view_mask,
            label_mask,
            split,
            seed,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.rows()
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.cols()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(Matrix::cols).collect()
    }

    pub fn views(&self) -> &[Matrix] {
        &self.views
    }

    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    pub fn view_mask(&self) -> &Matrix {
        &self.view_mask
    }

    pub fn label_mask(&self) -> &Matrix {
        &self.label_mask
    }

    pub fn split(&self) -> &[Split] {
        &self.split
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.n_samples())
            .filter(|&i| self.split[i] == split)
            .collect()
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        Batch {
            views: self.views.iter().map(|x| x.select_rows(rows)).collect(),
            labels: self.labels.select_rows(rows),
            view_mask: self.view_mask.select_rows(rows),
            label_mask: self.label_mask.select_rows(rows),
        }
    }

    /// Label correlation from the training rows, truncated at `sigma`.
    pub fn correlation(&self, sigma: f64) -> Result<LabelCorrelation> {
        let train = self.labels.select_rows(&self.indices(Split::Train));
        LabelCorrelation::new(build_correlation(&train), sigma)
    }
}

/// Sample counts for a 70/15/15 partition of `n`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.70 * n as f64).round() as usize;
    let val = ((0.15 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Random 70/15/15 split tags.
pub fn random_split(n: usize, rng: &mut RngStream) -> Vec<Split> {
    let (train, val, _) = split_sizes(n);
    let mut tags = vec![Split::Test; n];
    for (rank, i) in rng.permutation(n).into_iter().enumerate() {
        tags[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    tags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub views: usize,
    pub classes: usize,
    pub dims: Vec<usize>,
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// `dims` defaults to `4c + 8v` features for view `v`.
    pub fn new(n: usize, views: usize, classes: usize, noise: f64, seed: u64) -> Self {
        SynthConfig {
            n,
            views,
            classes,
            dims: (0..views).map(|v| 4 * classes + 8 * v).collect(),
            noise,
            seed,
        }
    }

    pub fn with_dims(mut self, dims: Vec<usize>) -> Self {
        self.dims = dims;
        self
    }
}

/// Generated data together with the generator's ground truth.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: MultiViewDataset,
    /// `c x c` class prototypes; the latent of sample `i` is `Y_i P`.
    pub prototypes: Matrix,
    /// Per-view `c x d_v` projections.
    pub projections: Vec<Matrix>,
}

/// Labels fall into topics of about three; a sample draws one topic, turns
/// on each of its labels with probability 0.7 and, one time in five, one
/// more label from anywhere. Every sample gets at least one label.
fn topic_labels(n: usize, c: usize, rng: &mut RngStream) -> Matrix {
    let topics = c.div_ceil(3);
    let order = rng.permutation(c);
    let members: Vec<Vec<usize>> = (0..topics)
        .map(|t| order.iter().copied().skip(t).step_by(topics).collect())
        .collect();
    let mut labels = Matrix::zeros(n, c);
    for i in 0..n {
        let topic = &members[rng.below(topics)];
        for &j in topic {
            if rng.uniform() < 0.7 {
                labels[(i, j)] = 1.0;
            }
        }
        if rng.uniform() < 0.2 {
            labels[(i, rng.below(c))] = 1.0;
        }
        if labels.row(i).iter().all(|&y| y == 0.0) {
            labels[(i, topic[rng.below(topic.len())])] = 1.0;
        }
    }
    labels
}

/// Desk-scale synthetic data: multi-hot labels (1 to 3 positives) mixed
/// through random class prototypes, then projected into each view with a
/// view-specific random linear map plus Gaussian noise.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthOutput> {
    let SynthConfig {
        n,
        views: m,
        classes: c,
        ..
    } = *cfg;
    if n < 4 || m < 1 || c < 2 {
        return Err(Error::contract(format!(
            "synth needs n >= 4, m >= 1, c >= 2 (got n={n}, m={m}, c={c})"
        )));
    }
    if cfg.dims.len() != m || cfg.dims.contains(&0) {
        return Err(Error::contract(format!(
            "synth needs {m} positive view dims, got {:?}",
            cfg.dims
        )));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::contract("noise must be a finite non-negative value"));
    }
    let mut rng = RngStream::new(cfg.seed);

    let prototypes = rng.normal_matrix(c, c);
    let labels = topic_labels(n, c, &mut rng);
    let latent = labels.matmul(&prototypes)?;

    let scale = 1.0 / (c as f64).sqrt();
    let mut projections = Vec::with_capacity(m);
    let mut views = Vec::with_capacity(m);
    for &d in &cfg.dims {
        let proj = rng.normal_matrix(c, d).map(|x| x * scale);
        let mut x = latent.matmul(&proj)?;
        if cfg.noise > 0.0 {
            for v in x.data_mut() {
                *v += cfg.noise * rng.normal();
            }
        }
        projections.push(proj);
        views.push(x);
    }
    let split = random_split(n, &mut rng);
    let dataset = MultiViewDataset::new(
        views,
        labels,
        Matrix::ones(n, m),
        Matrix::ones(n, c),
        split,
        cfg.seed,
    )?;
    Ok(SynthOutput {
        dataset,
        prototypes,
        projections,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub view_missing_rate: f64,
    pub label_missing_rate: f64,
    pub seed: u64,
}

impl InjectionConfig {
    pub fn new(view_missing_rate: f64, label_missing_rate: f64, seed: u64) -> Result<Self> {
        for (name, r) in [("view", view_missing_rate), ("label", label_missing_rate)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::contract(format!(
                    "{name} missing rate must lie in [0, 1), got {r}"
                )));
            }
        }
        Ok(InjectionConfig {
            view_missing_rate,
            label_missing_rate,
            seed,
        })
    }
}

/// Hides views and labels.
///
/// Per view, `round(p_v n)` samples lose that view; samples left with no view
/// get one view back, chosen uniformly. Per class, `round(p_l k)` of the `k`
/// known positive training entries and likewise of the known negatives
/// become unknown; validation and test labels stay complete. Missing view
/// rows are refilled with standard normal noise.
pub fn inject_missing(ds: &MultiViewDataset, cfg: &InjectionConfig) -> Result<MultiViewDataset> {
    let cfg = InjectionConfig::new(cfg.view_missing_rate, cfg.label_missing_rate, cfg.seed)?;
    let (n, m, c) = (ds.n_samples(), ds.n_views(), ds.n_classes());
    let mut rng = RngStream::new(cfg.seed);

    let mut w = ds.view_mask.clone();
    let drop = (cfg.view_missing_rate * n as f64).round() as usize;
    for v in 0..m {
        for i in rng.choose(n, drop) {
            w[(i, v)] = 0.0;
        }
    }
    for i in 0..n {
        if w.row(i).iter().all(|&x| x == 0.0) {
            let v = rng.below(m);
            w[(i, v)] = 1.0;
        }
    }

    let mut y = ds.labels.clone();
    let mut g = ds.label_mask.clone();
    let train = ds.indices(Split::Train);
    for j in 0..c {
        let known = train.iter().copied().filter(|&i| g[(i, j)] == 1.0);
        let (pos, neg): (Vec<usize>, Vec<usize>) = known.partition(|&i| y[(i, j)] == 1.0);
        for group in [pos, neg] {
            let hide = (cfg.label_missing_rate * group.len() as f64).round() as usize;
            for k in rng.choose(group.len(), hide) {
                let i = group[k];
                g[(i, j)] = 0.0;
                y[(i, j)] = 0.0;
            }
        }
    }

    let mut views = ds.views.clone();
    for (v, x) in views.iter_mut().enumerate() {
        for i in 0..n {
            if w[(i, v)] == 0.0 {
                for val in x.row_mut(i) {
                    *val = rng.normal();
                }
            }
        }
    }
    MultiViewDataset::new(views, y, w, g, ds.split.clone(), ds.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> MultiViewDataset {
        synth_dataset(&SynthConfig::new(60, 2, 4, 0.1, 3))
            .unwrap()
            .dataset
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(&SynthConfig::new(30, 2, 3, 0.5, 9)).unwrap();
        let b = synth_dataset(&SynthConfig::new(30, 2, 3, 0.5, 9)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = synth_dataset(&SynthConfig::new(30, 2, 3, 0.5, 10)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn synth_split_is_70_15_15() {
        let ds = synth_dataset(&SynthConfig::new(100, 2, 3, 0.0, 1))
            .unwrap()
            .dataset;
        assert_eq!(ds.indices(Split::Train).len(), 70);
        assert_eq!(ds.indices(Split::Val).len(), 15);
        assert_eq!(ds.indices(Split::Test).len(), 15);
    }

    #[test]
    fn synth_label_cardinality() {
        let ds = small();
        for row in ds.labels().iter_rows() {
            let k = row.iter().sum::<f64>();
            assert!((1.0..=3.0).contains(&k));
        }
    }

    #[test]
    fn synth_rejects_bad_sizes() {
        assert!(synth_dataset(&SynthConfig::new(3, 2, 3, 0.0, 1)).is_err());
        assert!(synth_dataset(&SynthConfig::new(10, 0, 3, 0.0, 1)).is_err());
        assert!(synth_dataset(&SynthConfig::new(10, 2, 1, 0.0, 1)).is_err());
        assert!(synth_dataset(&SynthConfig::new(10, 2, 3, 0.0, 1).with_dims(vec![4])).is_err());
    }

    #[test]
    fn zero_rates_leave_dataset_unchanged() {
        let ds = small();
        let out = inject_missing(&ds, &InjectionConfig::new(0.0, 0.0, 5).unwrap()).unwrap();
        assert_eq!(out, ds);
    }

    #[test]
    fn rates_must_be_below_one() {
        assert!(InjectionConfig::new(1.0, 0.0, 1).is_err());
        assert!(InjectionConfig::new(0.0, -0.1, 1).is_err());
    }

    #[test]
    fn injection_hides_exact_label_fractions_on_train_rows() {
        let ds = small();
        let out = inject_missing(&ds, &InjectionConfig::new(0.5, 0.5, 2).unwrap()).unwrap();
        let train = ds.indices(Split::Train);
        for j in 0..ds.n_classes() {
            let pos: Vec<usize> = train
                .iter()
                .copied()
                .filter(|&i| ds.labels()[(i, j)] == 1.0)
                .collect();
            let hidden = pos
                .iter()
                .filter(|&&i| out.label_mask()[(i, j)] == 0.0)
                .count();
            assert_eq!(hidden, (0.5 * pos.len() as f64).round() as usize);
        }
        for i in ds
            .indices(Split::Val)
            .into_iter()
            .chain(ds.indices(Split::Test))
        {
            assert!(out.label_mask().row(i).iter().all(|&g| g == 1.0));
        }
    }

    #[test]
    fn missing_views_are_refilled_and_available_views_kept() {
        let ds = small();
        let out = inject_missing(&ds, &InjectionConfig::new(0.5, 0.0, 4).unwrap()).unwrap();
        for v in 0..ds.n_views() {
            for i in 0..ds.n_samples() {
                let same = out.views()[v].row(i) == ds.views()[v].row(i);
                assert_eq!(same, out.view_mask()[(i, v)] == 1.0, "sample {i} view {v}");
            }
        }
    }
}
