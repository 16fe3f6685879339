//! Outlier analysis in gradient space.
//!
//! Every detector maps an `n x p` gradient matrix to one outlyingness score
//! per sample (higher = more outlying); [`select_outliers`] turns scores into
//! a budgeted [`TrimPlan`] and [`trim`] drops the flagged samples.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::influence::InfluenceMethod;
use crate::model::GradientMatrix;
use crate::par;

/// Euler–Mascheroni constant as used by the isolation-forest normalizer.
pub const EULER_GAMMA: f64 = 0.5772156649;

/// Subsample size used when none is given.
pub const DEFAULT_PSI: usize = 256;
pub const DEFAULT_TREES: usize = 100;

/// Gradient dimension above which rows are randomly projected before the
/// isolation forest.
pub const PROJECTION_THRESHOLD: usize = 4096;

/// Scoring method that produced a trim plan: one of the gradient-space
/// detectors or an influence baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Iforest,
    L1,
    L2,
    SemiInlier,
    Exact,
    Lissa,
    Trace,
    SelfExact,
    SelfLissa,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Iforest,
        Method::L1,
        Method::L2,
        Method::SemiInlier,
        Method::Exact,
        Method::Lissa,
        Method::Trace,
        Method::SelfExact,
        Method::SelfLissa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Iforest => "iforest",
            Method::L1 => "l1",
            Method::L2 => "l2",
            Method::SemiInlier => "semi_inlier",
            Method::Exact => "exact",
            Method::Lissa => "lissa",
            Method::Trace => "trace",
            Method::SelfExact => "self_exact",
            Method::SelfLissa => "self_lissa",
        }
    }

    pub fn influence(self) -> Option<InfluenceMethod> {
        match self {
            Method::Exact => Some(InfluenceMethod::Exact),
            Method::Lissa => Some(InfluenceMethod::Lissa),
            Method::Trace => Some(InfluenceMethod::Trace),
            Method::SelfExact => Some(InfluenceMethod::SelfExact),
            Method::SelfLissa => Some(InfluenceMethod::SelfLissa),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

pub fn l1_scores(g: &GradientMatrix) -> Vec<f64> {
    par::map_range(g.n_rows(), |i| g.row(i).iter().map(|x| x.abs()).sum())
}

pub fn l2_scores(g: &GradientMatrix) -> Vec<f64> {
    par::map_range(g.n_rows(), |i| g.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Average path length of an unsuccessful BST search over `n` points:
/// `c(1) = 0`, `c(2) = 1`, `c(n) = 2 (ln(n - 1) + gamma) - 2 (n - 1) / n`.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        value: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        size: usize,
    },
}

/// One isolation tree stored as an arena; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ITree {
    pub nodes: Vec<Node>,
}

impl ITree {
    /// Depth at which `x` reaches a leaf plus `c(leaf size)`.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0usize;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                Node::Split {
                    feature,
                    value,
                    left,
                    right,
                } => {
                    node = if x[feature] < value { left } else { right } as usize;
                    depth += 1.0;
                }
                Node::Leaf { size } => return depth + average_path_length(size),
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Split { left, right, .. } => {
                    1 + walk(nodes, left as usize).max(walk(nodes, right as usize))
                }
                Node::Leaf { .. } => 0,
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IForestParams {
    pub n_trees: usize,
    /// `None` uses `min(256, n)`.
    pub psi: Option<usize>,
    pub seed: u64,
}

impl Default for IForestParams {
    fn default() -> Self {
        IForestParams {
            n_trees: DEFAULT_TREES,
            psi: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForest {
    pub trees: Vec<ITree>,
    pub n_trees: usize,
    pub psi: usize,
    pub height_limit: usize,
    pub seed: u64,
    pub n_features: usize,
}

struct TreeBuilder<'a> {
    x: &'a Array2<f64>,
    limit: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

/// Rejection draws before falling back to a full scan for splittable features.
const FEATURE_DRAWS: usize = 32;

impl TreeBuilder<'_> {
    fn range(&self, idx: &[usize], feature: usize) -> (f64, f64) {
        idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            let v = self.x[[i, feature]];
            (lo.min(v), hi.max(v))
        })
    }

    /// Uniformly chosen feature that is not constant over `idx`, with its range.
    fn pick_feature(&mut self, idx: &[usize]) -> Option<(usize, f64, f64)> {
        let m = self.x.ncols();
        for _ in 0..FEATURE_DRAWS.min(m) {
            let f = self.rng.random_range(0..m);
            let (lo, hi) = self.range(idx, f);
            if lo < hi {
                return Some((f, lo, hi));
            }
        }
        let splittable: Vec<(usize, f64, f64)> = (0..m)
            .filter_map(|f| {
                let (lo, hi) = self.range(idx, f);
                (lo < hi).then_some((f, lo, hi))
            })
            .collect();
        if splittable.is_empty() {
            None
        } else {
            Some(splittable[self.rng.random_range(0..splittable.len())])
        }
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        if depth >= self.limit || idx.len() <= 1 {
            self.nodes.push(Node::Leaf { size: idx.len() });
            return id;
        }
        let Some((feature, lo, hi)) = self.pick_feature(idx) else {
            self.nodes.push(Node::Leaf { size: idx.len() });
            return id;
        };
        // split strictly inside (lo, hi) so both children are non-empty
        let mut value = self.rng.random_range(lo..hi);
        while value <= lo {
            value = self.rng.random_range(lo..hi);
        }
        self.nodes.push(Node::Leaf { size: 0 });
        let mut cut = 0;
        for k in 0..idx.len() {
            if self.x[[idx[k], feature]] < value {
                idx.swap(k, cut);
                cut += 1;
            }
        }
        let (l, r) = idx.split_at_mut(cut);
        let left = self.build(l, depth + 1);
        let right = self.build(r, depth + 1);
        self.nodes[id as usize] = Node::Split {
            feature,
            value,
            left,
            right,
        };
        id
    }
}

/// Fits an isolation forest. Tree `t` draws from its own ChaCha stream so the
/// forest does not depend on how trees are scheduled.
pub fn fit_iforest(x: &Array2<f64>, params: IForestParams) -> Result<IsolationForest> {
    let n = x.nrows();
    if n < 2 || x.ncols() == 0 {
        return Err(Error::config(format!(
            "isolation forest needs at least 2 rows and 1 column, got {}x{}",
            n,
            x.ncols()
        )));
    }
    if params.n_trees == 0 {
        return Err(Error::config("isolation forest needs at least one tree"));
    }
    let psi = match params.psi {
        None => DEFAULT_PSI.min(n),
        Some(psi) if psi > n => {
            return Err(Error::config(format!("subsample size {psi} exceeds {n} rows")))
        }
        Some(psi) if psi < 2 => return Err(Error::config("subsample size must be at least 2")),
        Some(psi) => psi,
    };
    let height_limit = (psi as f64).log2().ceil() as usize;
    let trees = par::map_range(params.n_trees, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(t as u64);
        let mut idx = index::sample(&mut rng, n, psi).into_vec();
        let mut builder = TreeBuilder {
            x,
            limit: height_limit,
            rng,
            nodes: Vec::new(),
        };
        builder.build(&mut idx, 0);
        ITree {
            nodes: builder.nodes,
        }
    });
    Ok(IsolationForest {
        trees,
        n_trees: params.n_trees,
        psi,
        height_limit,
        seed: params.seed,
        n_features: x.ncols(),
    })
}

impl IsolationForest {
    pub fn mean_path_length(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// `s(x) = 2^(-E[h(x)] / c(psi))`, in (0, 1].
    pub fn score_point(&self, x: &[f64]) -> f64 {
        anomaly_score(self.mean_path_length(x), self.psi)
    }

    pub fn scores(&self, x: &Array2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::Dimension {
                what: "isolation forest features",
                expected: self.n_features,
                got: x.ncols(),
            });
        }
        Ok(par::map_range(x.nrows(), |i| {
            let row: Vec<f64> = x.row(i).to_vec();
            self.score_point(&row)
        }))
    }
}

pub fn anomaly_score(mean_path: f64, psi: usize) -> f64 {
    2f64.powf(-mean_path / average_path_length(psi))
}

pub fn iforest_scores(model: &IsolationForest, x: &Array2<f64>) -> Result<Vec<f64>> {
    model.scores(x)
}

/// Z-scores every column; constant columns become zero.
pub fn standardize(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows().max(1) as f64;
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        col.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionTarget {
    Dim(usize),
    /// Johnson–Lindenstrauss distortion; the dimension follows from `n`.
    Eps(f64),
}

/// Minimum JL dimension `ceil(4 ln n / (eps^2 / 2 - eps^3 / 3))`.
pub fn jl_min_dim(n: usize, eps: f64) -> Result<usize> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::config(format!("JL eps must lie in (0, 1), got {eps}")));
    }
    let denom = eps * eps / 2.0 - eps.powi(3) / 3.0;
    Ok((4.0 * (n.max(1) as f64).ln() / denom).ceil().max(1.0) as usize)
}

#[derive(Debug, Clone)]
pub struct Projected {
    pub matrix: Array2<f64>,
    /// False when the requested dimension exceeded the input and rows were
    /// passed through unchanged.
    pub applied: bool,
    pub target_dim: usize,
}

/// Sparse random projection with density `1/sqrt(p)` and non-zero entries
/// `+-sqrt(sqrt(p) / m)`. Output component `k` draws from its own stream.
pub fn sparse_random_projection(g: &Array2<f64>, target: ProjectionTarget, seed: u64) -> Result<Projected> {
    let (n, p) = g.dim();
    let m = match target {
        ProjectionTarget::Dim(0) => return Err(Error::config("projection dimension must be positive")),
        ProjectionTarget::Dim(m) => m,
        ProjectionTarget::Eps(eps) => jl_min_dim(n, eps)?,
    };
    if m > p {
        log::warn!("projection to {m} dims requested for {p}-dim rows; passing rows through unchanged");
        return Ok(Projected {
            matrix: g.clone(),
            applied: false,
            target_dim: m,
        });
    }
    let density = 1.0 / (p as f64).sqrt();
    let value = ((p as f64).sqrt() / m as f64).sqrt();
    let components: Vec<Vec<(usize, f64)>> = par::map_range(m, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let nnz = Binomial::new(p as u64, density).expect("density in (0, 1]").sample(&mut rng) as usize;
        let mut picked = index::sample(&mut rng, p, nnz).into_vec();
        picked.sort_unstable();
        picked
            .into_iter()
            .map(|j| (j, if rng.random_bool(0.5) { value } else { -value }))
            .collect()
    });
    let mut data = vec![0.0; n * m];
    par::fill_rows(&mut data, m, |i, out| {
        let row = g.row(i);
        for (o, comp) in out.iter_mut().zip(&components) {
            *o = comp.iter().map(|&(j, w)| w * row[j]).sum();
        }
    });
    Ok(Projected {
        matrix: Array2::from_shape_vec((n, m), data).expect("sized above"),
        applied: true,
        target_dim: m,
    })
}

/// Mean Euclidean distance from each training row to its `k_nn` nearest
/// inlier rows.
pub fn semi_inlier_scores(g_train: &GradientMatrix, g_inliers: &GradientMatrix, k_nn: usize) -> Result<Vec<f64>> {
    if g_inliers.n_rows() == 0 {
        return Err(Error::config("inlier reference set is empty"));
    }
    if g_train.dim() != g_inliers.dim() {
        return Err(Error::Dimension {
            what: "inlier gradient dimension",
            expected: g_train.dim(),
            got: g_inliers.dim(),
        });
    }
    if k_nn == 0 || k_nn > g_inliers.n_rows() {
        return Err(Error::config(format!(
            "k_nn must lie in 1..={}, got {k_nn}",
            g_inliers.n_rows()
        )));
    }
    Ok(par::map_range(g_train.n_rows(), |i| {
        let a = g_train.row(i);
        let mut d: Vec<f64> = (0..g_inliers.n_rows())
            .map(|j| {
                a.iter()
                    .zip(g_inliers.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        if k_nn < d.len() {
            d.select_nth_unstable_by(k_nn - 1, f64::total_cmp);
        }
        d[..k_nn].iter().sum::<f64>() / k_nn as f64
    }))
}

/// Budgeted set of flagged samples, most outlying first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimPlan {
    pub detector: Method,
    pub budget_k: usize,
    pub flagged: Vec<usize>,
    pub scores: Vec<f64>,
}

impl TrimPlan {
    pub fn is_flagged_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.scores.len()];
        for &i in &self.flagged {
            mask[i] = true;
        }
        mask
    }

    /// Indices that survive trimming, in original order.
    pub fn survivors(&self) -> Vec<usize> {
        let mask = self.is_flagged_mask();
        (0..mask.len()).filter(|&i| !mask[i]).collect()
    }
}

/// Descending by score, ties by ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order
}

/// Flags the `budget_k` highest-scoring samples.
pub fn select_outliers(scores: &[f64], budget_k: usize, detector: Method) -> TrimPlan {
    let mut flagged = rank_descending(scores);
    flagged.truncate(budget_k);
    TrimPlan {
        detector,
        budget_k,
        flagged,
        scores: scores.to_vec(),
    }
}

/// Removes the flagged samples; survivors keep their order and mask bits.
pub fn trim(ds: &LabeledDataset, plan: &TrimPlan) -> Result<LabeledDataset> {
    if let Some(&bad) = plan.flagged.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::config(format!(
            "trim plan flags index {bad} but the dataset has {} samples",
            ds.len()
        )));
    }
    let mut drop = vec![false; ds.len()];
    plan.flagged.iter().for_each(|&i| drop[i] = true);
    let keep: Vec<usize> = (0..ds.len()).filter(|&i| !drop[i]).collect();
    Ok(ds.select(&keep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSelector;
    use ndarray::array;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand_distr::Normal;

    fn gm(rows: Array2<f64>) -> GradientMatrix {
        GradientMatrix::new(rows, LayerSelector::All, "t")
    }

    #[test]
    fn norm_scores() {
        let g = gm(array![[3.0, 4.0], [0.0, 0.0], [-1.0, 1.0]]);
        assert_eq!(l1_scores(&g), vec![7.0, 0.0, 2.0]);
        assert_eq!(l2_scores(&g)[..2], [5.0, 0.0]);
    }

    #[test]
    fn path_length_normalizer() {
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(2), 1.0);
        let c3 = 2.0 * (2f64.ln() + EULER_GAMMA) - 4.0 / 3.0;
        assert_eq!(average_path_length(3), c3);
        assert!((c3 - 1.2074).abs() < 1e-4);
        for n in 2..2000 {
            assert!(average_path_length(n + 1) > average_path_length(n));
        }
    }

    #[test]
    fn scoring_law_fixed_point_and_monotonicity() {
        assert_eq!(anomaly_score(average_path_length(256), 256), 0.5);
        assert_eq!(anomaly_score(0.0, 256), 1.0);
        assert!(anomaly_score(3.0, 64) > anomaly_score(3.5, 64));
    }

    fn cluster_with_far_point(seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut x = Array2::zeros((100, 2));
        for i in 0..99 {
            x[[i, 0]] = normal.sample(&mut rng);
            x[[i, 1]] = normal.sample(&mut rng);
        }
        x[[99, 0]] = 12.0;
        x[[99, 1]] = -9.0;
        x
    }

    #[test]
    fn far_point_gets_maximum_score() {
        for seed in 0..10 {
            let x = cluster_with_far_point(seed);
            let forest = fit_iforest(&x, IForestParams { seed, ..Default::default() }).unwrap();
            let s = forest.scores(&x).unwrap();
            assert_eq!(rank_descending(&s)[0], 99, "seed {seed}");
            assert!(s.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn psi_is_clamped_by_default_and_validated_otherwise() {
        let x = Array2::from_shape_fn((250, 3), |(i, j)| (i * 7 + j * 13) as f64 % 17.0);
        let forest = fit_iforest(&x, IForestParams::default()).unwrap();
        assert_eq!(forest.psi, 250);
        assert_eq!(forest.trees.len(), 100);
        assert_eq!(forest.height_limit, 8);
        assert!(forest.trees.iter().all(|t| t.depth() <= 8));
        let explicit = IForestParams { psi: Some(256), ..Default::default() };
        assert!(fit_iforest(&x, explicit).is_err());
        assert!(fit_iforest(&Array2::zeros((1, 3)), IForestParams::default()).is_err());
    }

    #[test]
    fn constant_data_yields_single_leaf_trees() {
        let x = Array2::from_elem((40, 3), 2.5);
        let forest = fit_iforest(&x, IForestParams { n_trees: 10, ..Default::default() }).unwrap();
        for t in &forest.trees {
            assert_eq!(t.nodes, vec![Node::Leaf { size: 40 }]);
        }
        assert!(forest.scores(&x).unwrap().iter().all(|&s| s == 0.5));
    }

    #[test]
    fn splits_lie_within_routed_range() {
        let x = cluster_with_far_point(3);
        let forest = fit_iforest(&x, IForestParams { n_trees: 20, psi: Some(64), seed: 1 }).unwrap();
        let (lo, hi) = (x.fold(f64::INFINITY, |a, &b| a.min(b)), x.fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
        for t in &forest.trees {
            for node in &t.nodes {
                if let Node::Split { value, .. } = *node {
                    assert!(value > lo && value < hi);
                }
            }
        }
    }

    #[test]
    fn forest_is_deterministic_and_single_tree_is_valid() {
        let x = cluster_with_far_point(0);
        let p = IForestParams { n_trees: 8, psi: None, seed: 42 };
        assert_eq!(fit_iforest(&x, p).unwrap(), fit_iforest(&x, p).unwrap());
        let single = fit_iforest(&x, IForestParams { n_trees: 1, ..p }).unwrap();
        assert_eq!(single.trees.len(), 1);
        assert!(single.scores(&x).is_ok());
        assert!(single.scores(&Array2::zeros((2, 3))).is_err());
    }

    #[test]
    fn jl_dimension_formula() {
        let expected = (4.0 * 50_000f64.ln() / (0.005 - 0.001 / 3.0)).ceil() as usize;
        assert_eq!(jl_min_dim(50_000, 0.1).unwrap(), expected);
        assert_eq!(expected, 9275);
        assert!(jl_min_dim(10, 1.0).is_err());
    }

    #[test]
    fn projection_of_zero_is_zero_and_oversized_passes_through() {
        let z = Array2::zeros((5, 400));
        let p = sparse_random_projection(&z, ProjectionTarget::Dim(30), 1).unwrap();
        assert!(p.applied);
        assert_eq!(p.matrix.dim(), (5, 30));
        assert!(p.matrix.iter().all(|&v| v == 0.0));
        let small = Array2::ones((3, 4));
        let p = sparse_random_projection(&small, ProjectionTarget::Dim(10), 1).unwrap();
        assert!(!p.applied);
        assert_eq!(p.matrix, small);
    }

    #[test]
    fn projection_preserves_pairwise_distances() {
        let (n, p, eps) = (200, 5000, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let g = Array2::from_shape_fn((n, p), |_| normal.sample(&mut rng));
        let proj = sparse_random_projection(&g, ProjectionTarget::Eps(eps), 4).unwrap();
        assert!(proj.applied);
        let mut ratios: Vec<f64> = (0..1000)
            .map(|_| {
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n);
                while b == a {
                    b = rng.random_range(0..n);
                }
                let d = (&g.row(a) - &g.row(b)).mapv(|v| v * v).sum().sqrt();
                let dp = (&proj.matrix.row(a) - &proj.matrix.row(b)).mapv(|v| v * v).sum().sqrt();
                dp / d
            })
            .collect();
        ratios.sort_by(f64::total_cmp);
        let median = ratios[500];
        assert!((1.0 - eps..=1.0 + eps).contains(&median), "median ratio {median}");
    }

    #[test]
    fn selection_order_and_budget() {
        let plan = select_outliers(&[5.0, 1.0, 3.0], 2, Method::L2);
        assert_eq!(plan.flagged, vec![0, 2]);
        assert!(select_outliers(&[5.0, 1.0], 0, Method::L2).flagged.is_empty());
        assert_eq!(select_outliers(&[1.0, 1.0, 2.0], 9, Method::L1).flagged, vec![2, 0, 1]);
        let big: Vec<f64> = (0..50_000).map(|i| (i % 977) as f64).collect();
        assert_eq!(select_outliers(&big, 2500, Method::Iforest).flagged.len(), 2500);
    }

    #[test]
    fn trimming() {
        let (ds, _) = crate::data::gen_half_moons(250, 2, 0.1, 1).unwrap();
        let scores: Vec<f64> = (0..250).map(|i| i as f64).collect();
        let plan = select_outliers(&scores, 20, Method::Iforest);
        let t = trim(&ds, &plan).unwrap();
        assert_eq!(t.len(), 230);
        assert_eq!(t.labels[..], ds.labels[..230]);
        assert_eq!(trim(&ds, &select_outliers(&scores, 0, Method::L1)).unwrap(), ds);
        let everything = trim(&ds, &select_outliers(&scores, 250, Method::L1)).unwrap();
        assert!(everything.is_empty());
        let bad = TrimPlan { flagged: vec![300], ..plan };
        assert!(trim(&ds, &bad).is_err());
    }

    #[test]
    fn semi_inlier_examples() {
        let train = gm(array![[1.0, 2.0], [6.0, 8.0]]);
        let inliers = gm(array![[1.0, 2.0], [0.0, 0.0], [0.0, 0.0]]);
        let s = semi_inlier_scores(&train, &inliers, 1).unwrap();
        assert_eq!(s[0], 0.0);
        let origin = gm(Array2::zeros((4, 2)));
        let s = semi_inlier_scores(&train, &origin, 4).unwrap();
        assert_eq!(s[1], 10.0);
        assert!(semi_inlier_scores(&train, &gm(Array2::zeros((0, 2))), 1).is_err());
        assert!(semi_inlier_scores(&train, &origin, 5).is_err());
    }

    proptest! {
        #[test]
        fn norm_rankings_are_scale_invariant(vals in proptest::collection::vec(-100.0..100.0f64, 24), e in -20i32..20, k in 0usize..8) {
            // powers of two scale every score exactly, so rankings must match bitwise
            let g = gm(Array2::from_shape_vec((8, 3), vals).unwrap());
            let scaled = g.scaled(2f64.powi(e));
            for (plain, big) in [(l1_scores(&g), l1_scores(&scaled)), (l2_scores(&g), l2_scores(&scaled))] {
                let a = select_outliers(&plain, k, Method::L1);
                let b = select_outliers(&big, k, Method::L1);
                prop_assert_eq!(a.flagged.len(), k);
                prop_assert_eq!(a.flagged, b.flagged);
            }
        }

        #[test]
        fn norm_scores_scale_linearly(vals in proptest::collection::vec(-100.0..100.0f64, 12), c in 0.001..1000.0f64) {
            let g = gm(Array2::from_shape_vec((4, 3), vals).unwrap());
            let s = l2_scores(&g);
            let t = l2_scores(&g.scaled(c));
            for (x, y) in s.iter().zip(&t) {
                prop_assert!((c * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
            }
        }

        #[test]
        fn zero_budget_trim_is_identity(seed in 0u64..1000) {
            let (ds, _) = crate::data::gen_linear_blobs(10, 2, seed).unwrap();
            let plan = select_outliers(&[1.0; 10], 0, Method::L2);
            prop_assert_eq!(trim(&ds, &plan).unwrap(), ds);
        }
    }
}
