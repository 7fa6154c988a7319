//! Classification forest for the at-risk propensity `P{R(t) = 1 | W(t)}`.
//!
//! Each tree is grown on a subject-level bootstrap where every drawn subject
//! contributes a single randomly chosen window. Predictions for a row average
//! the trees whose bootstrap never drew that row's subject.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features tried per split; `None` means `⌊√p⌋`.
    pub mtry: Option<usize>,
    /// Smallest allowed daughter node.
    pub min_node_size: usize,
    pub max_depth: Option<usize>,
    pub clip: f64,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 500,
            mtry: None,
            min_node_size: 10,
            max_depth: None,
            clip: 0.01,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self, n_features: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("forest.n_trees must be at least 1".into()));
        }
        if !(self.clip > 0.0 && self.clip < 0.5) {
            return Err(Error::Config(format!("forest.clip must lie in (0, 0.5), got {}", self.clip)));
        }
        if self.min_node_size == 0 {
            return Err(Error::Config("forest.min_node_size must be at least 1".into()));
        }
        if let Some(m) = self.mtry {
            if m == 0 || m > n_features {
                return Err(Error::Config(format!("forest.mtry must lie in 1..={n_features}, got {m}")));
            }
        }
        Ok(())
    }

    pub fn mtry_for(&self, n_features: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| (n_features as f64).sqrt().floor() as usize)
            .clamp(1, n_features.max(1))
    }
}

/// Labelled rows in column-major form. Feature columns are kept sorted by
/// name, so the order in which features are supplied never matters.
#[derive(Clone, Debug)]
pub struct TrainingPanel {
    feature_names: Vec<String>,
    columns: Vec<Vec<f64>>,
    labels: Vec<bool>,
    subject_of_row: Vec<usize>,
    subject_ids: Vec<String>,
    rows_of_subject: Vec<Vec<usize>>,
}

impl TrainingPanel {
    /// Builds a panel from `(subject_id, label, features)` rows.
    pub fn new<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, bool, &'a BTreeMap<String, f64>)>,
    {
        let mut feature_names: Option<Vec<String>> = None;
        let mut columns: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        let mut subject_of_row = Vec::new();
        let mut subject_ids = Vec::new();
        let mut rows_of_subject: Vec<Vec<usize>> = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (row, (id, label, features)) in rows.into_iter().enumerate() {
            let names = feature_names.get_or_insert_with(|| {
                columns = vec![Vec::new(); features.len()];
                features.keys().cloned().collect()
            });
            if features.len() != names.len() || !features.keys().zip(names.iter()).all(|(a, b)| a == b) {
                return Err(Error::InvalidInput(format!(
                    "row {row} (subject {id}) has a different feature set"
                )));
            }
            for (col, (name, &v)) in columns.iter_mut().zip(features) {
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!("feature `{name}` is not finite for subject {id}")));
                }
                col.push(v);
            }
            let s = *index.entry(id).or_insert_with(|| {
                subject_ids.push(id.to_string());
                rows_of_subject.push(Vec::new());
                subject_ids.len() - 1
            });
            rows_of_subject[s].push(row);
            subject_of_row.push(s);
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(Error::InvalidInput("training panel is empty".into()));
        }
        Ok(TrainingPanel {
            feature_names: feature_names.unwrap_or_default(),
            columns,
            labels,
            subject_of_row,
            subject_ids,
            rows_of_subject,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn subject_of_row(&self, row: usize) -> usize {
        self.subject_of_row[row]
    }

    fn value(&self, feature: usize, row: usize) -> f64 {
        self.columns[feature][row]
    }
}

/// One bootstrap draw: the selected rows (one per drawn subject occurrence)
/// and, per subject, whether it was drawn at all.
#[derive(Clone, Debug)]
pub struct Bootstrap {
    pub rows: Vec<usize>,
    pub in_bag: Vec<bool>,
}

pub fn two_stage_bootstrap<R: Rng>(panel: &TrainingPanel, rng: &mut R) -> Bootstrap {
    let n = panel.n_subjects();
    let mut in_bag = vec![false; n];
    let rows = (0..n)
        .map(|_| {
            let s = rng.random_range(0..n);
            in_bag[s] = true;
            let candidates = &panel.rows_of_subject[s];
            candidates[rng.random_range(0..candidates.len())]
        })
        .collect();
    Bootstrap { rows, in_bag }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, panel: &TrainingPanel, row: usize) -> f64 {
        self.predict_with(|f| panel.value(f, row))
    }

    fn predict_with(&self, value: impl Fn(usize) -> f64) -> f64 {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf(p) => return p,
                Node::Split { feature, threshold, left, right } => {
                    k = if value(feature) <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], k: usize) -> usize {
            match nodes[k] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

fn gini_sum(n: usize, pos: usize) -> f64 {
    // n · 2p(1 − p)
    if n == 0 {
        0.0
    } else {
        2.0 * pos as f64 * (n - pos) as f64 / n as f64
    }
}

struct Grower<'a, R: Rng> {
    panel: &'a TrainingPanel,
    mtry: usize,
    min_node: usize,
    max_depth: usize,
    rng: &'a mut R,
    nodes: Vec<Node>,
    scratch: Vec<(f64, bool)>,
}

impl<R: Rng> Grower<'_, R> {
    fn grow(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let id = self.nodes.len();
        let pos = rows.iter().filter(|&&r| self.panel.labels[r]).count();
        let n = rows.len();
        self.nodes.push(Node::Leaf(pos as f64 / n as f64));
        if pos == 0 || pos == n || depth >= self.max_depth || n < 2 * self.min_node {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(rows, pos) else {
            return id;
        };
        let mut split = 0;
        for k in 0..n {
            if self.panel.value(feature, rows[k]) <= threshold {
                rows.swap(k, split);
                split += 1;
            }
        }
        let (l, r) = rows.split_at_mut(split);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }

    fn best_split(&mut self, rows: &[usize], pos: usize) -> Option<(usize, f64)> {
        let n = rows.len();
        let parent = gini_sum(n, pos);
        let p = self.panel.n_features();
        let mut features = sample(self.rng, p, self.mtry).into_vec();
        features.sort_unstable();
        let mut best: Option<(f64, usize, f64)> = None;
        for f in features {
            self.scratch.clear();
            self.scratch.extend(rows.iter().map(|&r| (self.panel.value(f, r), self.panel.labels[r])));
            self.scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for k in 1..n {
                left_pos += usize::from(self.scratch[k - 1].1);
                let (lo, hi) = (self.scratch[k - 1].0, self.scratch[k].0);
                if lo == hi || k < self.min_node || n - k < self.min_node {
                    continue;
                }
                let cost = gini_sum(k, left_pos) + gini_sum(n - k, pos - left_pos);
                if cost < parent && best.is_none_or(|(c, _, _)| cost < c) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some((cost, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Grows one tree on the given rows (repeats allowed).
pub fn grow_tree<R: Rng>(panel: &TrainingPanel, rows: &[usize], cfg: &ForestConfig, rng: &mut R) -> Tree {
    assert!(!rows.is_empty(), "a tree needs at least one row");
    let mut rows = rows.to_vec();
    let mut grower = Grower {
        panel,
        mtry: cfg.mtry_for(panel.n_features()),
        min_node: cfg.min_node_size.max(1),
        max_depth: cfg.max_depth.unwrap_or(usize::MAX),
        rng,
        nodes: Vec::new(),
        scratch: Vec::with_capacity(rows.len()),
    };
    if panel.n_features() == 0 {
        grower.max_depth = 0;
    }
    grower.grow(&mut rows, 0);
    Tree { nodes: grower.nodes }
}

#[derive(Clone, Debug)]
pub struct Forest {
    pub trees: Vec<Tree>,
    /// `in_bag[b][s]`: subject `s` was drawn for tree `b`.
    pub in_bag: Vec<Vec<bool>>,
    pub clip: f64,
}

pub fn fit_forest(panel: &TrainingPanel, cfg: &ForestConfig, exec: Execution) -> Result<Forest> {
    cfg.validate(panel.n_features())?;
    let grown = exec.map_range(cfg.n_trees, |b| {
        let mut rng = seed::rng(seed::derive(cfg.seed, b));
        let boot = two_stage_bootstrap(panel, &mut rng);
        let tree = grow_tree(panel, &boot.rows, cfg, &mut rng);
        (tree, boot.in_bag)
    });
    let (trees, in_bag) = grown.into_iter().unzip();
    Ok(Forest { trees, in_bag, clip: cfg.clip })
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightTable {
    /// Clipped propensities, aligned with the panel rows.
    pub pi_hat: Vec<f64>,
    pub n_oob_trees: Vec<usize>,
    /// Rows whose subject was in every bag; these use all trees.
    pub fallback: Vec<bool>,
}

/// Out-of-bag propensities for every panel row.
pub fn oob_predict(forest: &Forest, panel: &TrainingPanel, exec: Execution) -> WeightTable {
    assert!(!forest.trees.is_empty(), "forest has no trees");
    let per_row = exec.map_range(panel.n_rows(), |row| {
        let s = panel.subject_of_row(row);
        let mut sum = 0.0;
        let mut count = 0;
        for (tree, bag) in forest.trees.iter().zip(&forest.in_bag) {
            if !bag[s] {
                sum += tree.predict_row(panel, row);
                count += 1;
            }
        }
        let fallback = count == 0;
        if fallback {
            sum = forest.trees.iter().map(|t| t.predict_row(panel, row)).sum();
        }
        let denom = if fallback { forest.trees.len() } else { count };
        let p = (sum / denom as f64).clamp(forest.clip, 1.0 - forest.clip);
        (p, count, fallback)
    });
    let mut table = WeightTable {
        pi_hat: Vec::with_capacity(per_row.len()),
        n_oob_trees: Vec::with_capacity(per_row.len()),
        fallback: Vec::with_capacity(per_row.len()),
    };
    for (p, c, f) in per_row {
        table.pi_hat.push(p);
        table.n_oob_trees.push(c);
        table.fallback.push(f);
    }
    let n_fallback = table.fallback.iter().filter(|f| **f).count();
    if n_fallback > 0 {
        log::warn!("{n_fallback} rows had no out-of-bag tree; averaged over all trees instead");
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn panel_from(rows: &[(&str, bool, Vec<(&str, f64)>)]) -> TrainingPanel {
        let maps: Vec<BTreeMap<String, f64>> = rows
            .iter()
            .map(|(_, _, f)| f.iter().map(|(k, v)| (k.to_string(), *v)).collect())
            .collect();
        TrainingPanel::new(rows.iter().zip(&maps).map(|((id, y, _), m)| (*id, *y, m))).unwrap()
    }

    fn one_feature(xs: &[f64], ys: &[bool]) -> TrainingPanel {
        let ids: Vec<String> = (0..xs.len()).map(|i| format!("s{i:05}")).collect();
        let maps: Vec<BTreeMap<String, f64>> =
            xs.iter().map(|&x| BTreeMap::from([("x".to_string(), x)])).collect();
        TrainingPanel::new(ids.iter().zip(ys).zip(&maps).map(|((id, y), m)| (id.as_str(), *y, m))).unwrap()
    }

    fn small_cfg() -> ForestConfig {
        ForestConfig { min_node_size: 1, ..ForestConfig::default() }
    }

    #[test]
    fn bootstrap_single_subject() {
        let p = panel_from(&[
            ("a", true, vec![("x", 0.0)]),
            ("a", false, vec![("x", 1.0)]),
            ("a", true, vec![("x", 2.0)]),
        ]);
        let mut rng = seed::rng(1);
        for _ in 0..20 {
            let b = two_stage_bootstrap(&p, &mut rng);
            assert_eq!(b.rows.len(), 1);
            assert!(b.rows[0] < 3);
            assert_eq!(b.in_bag, vec![true]);
        }
    }

    #[test]
    fn bootstrap_oob_fraction_is_about_one_over_e() {
        let n = 500;
        let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let p = one_feature(&xs, &vec![true; n]);
        let mut rng = seed::rng(2);
        let reps = 10_000;
        let mut oob = 0usize;
        for _ in 0..reps {
            oob += two_stage_bootstrap(&p, &mut rng).in_bag.iter().filter(|b| !**b).count();
        }
        let frac = oob as f64 / (reps * n) as f64;
        assert!((frac - (-1f64).exp()).abs() < 0.01, "{frac}");
    }

    #[test]
    fn repeated_subjects_draw_windows_independently() {
        // two subjects with many windows: repeats of the same subject should
        // not always pick the same window
        let mut rows = Vec::new();
        for s in ["a", "b"] {
            for k in 0..50 {
                rows.push((s, k % 2 == 0, vec![("x", k as f64)]));
            }
        }
        let p = panel_from(&rows);
        let mut rng = seed::rng(3);
        let mut differing = 0;
        for _ in 0..200 {
            let b = two_stage_bootstrap(&p, &mut rng);
            let (s0, s1) = (p.subject_of_row(b.rows[0]), p.subject_of_row(b.rows[1]));
            if s0 == s1 && b.rows[0] != b.rows[1] {
                differing += 1;
            }
        }
        assert!(differing > 50);
    }

    #[test]
    fn tree_examples() {
        let p = one_feature(&[0.0, 1.0, 2.0, 3.0], &[true, true, false, false]);
        let mut rng = seed::rng(4);
        let t = grow_tree(&p, &[0, 1, 2, 3], &small_cfg(), &mut rng);
        assert_eq!(t.nodes[0], Node::Split { feature: 0, threshold: 1.5, left: 1, right: 2 });
        assert_eq!(t.predict_row(&p, 0), 1.0);
        assert_eq!(t.predict_row(&p, 3), 0.0);

        let p = one_feature(&[0.0, 1.0, 2.0], &[true; 3]);
        assert_eq!(grow_tree(&p, &[0, 1, 2], &small_cfg(), &mut rng).n_leaves(), 1);

        let p = one_feature(&[5.0; 4], &[true, false, true, true]);
        let t = grow_tree(&p, &[0, 1, 2, 3], &small_cfg(), &mut rng);
        assert_eq!(t.nodes, vec![Node::Leaf(0.75)]);
    }

    #[test]
    fn min_node_size_bounds_daughters() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let ys: Vec<bool> = (0..40).map(|i| i % 3 == 0).collect();
        let p = one_feature(&xs, &ys);
        let rows: Vec<usize> = (0..40).collect();
        let cfg = ForestConfig { min_node_size: 7, ..ForestConfig::default() };
        let t = grow_tree(&p, &rows, &cfg, &mut seed::rng(5));
        let mut counts = vec![0usize; t.nodes.len()];
        for r in 0..40 {
            let mut k = 0;
            while let Node::Split { feature, threshold, left, right } = t.nodes[k] {
                k = if p.value(feature, r) <= threshold { left } else { right };
            }
            counts[k] += 1;
        }
        for (k, node) in t.nodes.iter().enumerate() {
            if matches!(node, Node::Leaf(_)) {
                assert!(counts[k] >= 7);
            }
        }
        let shallow = ForestConfig { max_depth: Some(1), ..cfg };
        assert!(grow_tree(&p, &rows, &shallow, &mut seed::rng(5)).depth() <= 1);
    }

    #[test]
    fn ties_pick_the_first_feature_name() {
        // both features separate the labels perfectly
        let p = panel_from(&[
            ("a", true, vec![("b", 0.0), ("a", 0.0)]),
            ("b", true, vec![("b", 1.0), ("a", 1.0)]),
            ("c", false, vec![("b", 2.0), ("a", 2.0)]),
            ("d", false, vec![("b", 3.0), ("a", 3.0)]),
        ]);
        assert_eq!(p.feature_names(), &["a".to_string(), "b".to_string()]);
        let cfg = ForestConfig { mtry: Some(2), ..small_cfg() };
        let t = grow_tree(&p, &[0, 1, 2, 3], &cfg, &mut seed::rng(6));
        assert!(matches!(t.nodes[0], Node::Split { feature: 0, .. }));
    }

    #[test]
    fn single_tree_falls_back_when_subject_is_in_bag() {
        let p = one_feature(&[0.0, 1.0], &[true, false]);
        let cfg = ForestConfig { n_trees: 1, min_node_size: 1, ..ForestConfig::default() };
        let f = fit_forest(&p, &cfg, Execution::Sequential).unwrap();
        let w = oob_predict(&f, &p, Execution::Sequential);
        for s in 0..2 {
            let row = s;
            assert_eq!(w.fallback[row], f.in_bag[0][s]);
        }
        assert!(w.fallback.iter().any(|f| *f));
    }

    #[test]
    fn separable_panel_is_recovered() {
        let n = 500;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let ys: Vec<bool> = xs.iter().map(|&x| x > 0.5).collect();
        let p = one_feature(&xs, &ys);
        let cfg = ForestConfig { n_trees: 200, seed: 7, ..ForestConfig::default() };
        let f = fit_forest(&p, &cfg, Execution::Parallel).unwrap();
        let w = oob_predict(&f, &p, Execution::Parallel);
        let close = w
            .pi_hat
            .iter()
            .zip(&ys)
            .filter(|(p, y)| (**p - if **y { 1.0 } else { 0.0 }).abs() < 0.1)
            .count();
        assert!(close as f64 >= 0.95 * n as f64, "{close}");
    }

    #[test]
    fn noise_labels_are_calibrated() {
        let n = 500;
        let mut rng = seed::rng(8);
        let xs: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let ys: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
        let p = one_feature(&xs, &ys);
        let cfg = ForestConfig { n_trees: 200, seed: 9, ..ForestConfig::default() };
        let w = oob_predict(&fit_forest(&p, &cfg, Execution::Parallel).unwrap(), &p, Execution::Parallel);
        let mean = w.pi_hat.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.05, "{mean}");
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut k = 0;
        while k < idx.len() {
            let mut e = k;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[k]] {
                e += 1;
            }
            for &i in &idx[k..=e] {
                r[i] = (k + e) as f64 / 2.0;
            }
            k = e + 1;
        }
        r
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn monotone_signal_gives_positive_rank_correlation() {
        let n = 500;
        let mut rng = seed::rng(10);
        let xs: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let ys: Vec<bool> = xs.iter().map(|&x| rng.random::<f64>() < x).collect();
        let p = one_feature(&xs, &ys);
        let cfg = ForestConfig { n_trees: 200, seed: 11, ..ForestConfig::default() };
        let w = oob_predict(&fit_forest(&p, &cfg, Execution::Parallel).unwrap(), &p, Execution::Parallel);
        let rho = pearson(&ranks(&w.pi_hat), &ranks(&xs));
        assert!(rho >= 0.5, "{rho}");
    }

    #[test]
    fn bit_identical_across_execution_strategies() {
        let n = 200;
        let mut rng = seed::rng(12);
        let rows: Vec<(String, bool, BTreeMap<String, f64>)> = (0..n)
            .flat_map(|i| {
                let feats: Vec<(bool, BTreeMap<String, f64>)> = (0..3)
                    .map(|t| {
                        let m = BTreeMap::from([
                            ("t".to_string(), t as f64),
                            ("u".to_string(), rng.random::<f64>()),
                            ("v".to_string(), rng.random::<f64>()),
                        ]);
                        (rng.random::<f64>() < 0.3 + 0.4 * m["u"], m)
                    })
                    .collect();
                feats.into_iter().map(move |(y, m)| (format!("s{i}"), y, m))
            })
            .collect();
        let p = TrainingPanel::new(rows.iter().map(|(id, y, m)| (id.as_str(), *y, m))).unwrap();
        let cfg = ForestConfig { n_trees: 40, seed: 13, ..ForestConfig::default() };
        let a = oob_predict(&fit_forest(&p, &cfg, Execution::Sequential).unwrap(), &p, Execution::Sequential);
        let b = oob_predict(&fit_forest(&p, &cfg, Execution::Parallel).unwrap(), &p, Execution::Parallel);
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_feature_sets_are_rejected() {
        let a = BTreeMap::from([("x".to_string(), 1.0)]);
        let b = BTreeMap::from([("y".to_string(), 1.0)]);
        assert!(TrainingPanel::new([("a", true, &a), ("b", false, &b)]).is_err());
        let c = BTreeMap::from([("x".to_string(), f64::INFINITY)]);
        assert!(TrainingPanel::new([("a", true, &c)]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn predictions_are_clipped_oob_averages(seed in any::<u64>(), n in 5usize..40, order in any::<bool>()) {
            let mut rng = seed::rng(seed);
            let rows: Vec<(String, bool, Vec<(String, f64)>)> = (0..n)
                .map(|i| {
                    let mut f = vec![("w".to_string(), rng.random::<f64>()), ("z".to_string(), rng.random::<f64>())];
                    if order { f.reverse(); }
                    (format!("s{}", i % (n / 2 + 1)), rng.random::<f64>() < 0.5, f)
                })
                .collect();
            let maps: Vec<BTreeMap<String, f64>> = rows.iter().map(|r| r.2.iter().cloned().collect()).collect();
            let p = TrainingPanel::new(rows.iter().zip(&maps).map(|(r, m)| (r.0.as_str(), r.1, m))).unwrap();
            let cfg = ForestConfig { n_trees: 15, min_node_size: 2, seed, ..ForestConfig::default() };
            let f = fit_forest(&p, &cfg, Execution::Sequential).unwrap();
            let w = oob_predict(&f, &p, Execution::Sequential);
            for row in 0..p.n_rows() {
                let s = p.subject_of_row(row);
                prop_assert!(w.pi_hat[row] >= 0.01 && w.pi_hat[row] <= 0.99);
                let oob: Vec<f64> = f.trees.iter().zip(&f.in_bag)
                    .filter(|(_, bag)| !bag[s])
                    .map(|(t, _)| t.predict_row(&p, row))
                    .collect();
                prop_assert_eq!(oob.len(), w.n_oob_trees[row]);
                if !oob.is_empty() {
                    let mean = oob.iter().sum::<f64>() / oob.len() as f64;
                    prop_assert_eq!(w.pi_hat[row], mean.clamp(0.01, 0.99));
                }
            }
        }

        #[test]
        fn feature_order_does_not_change_predictions(seed in any::<u64>()) {
            let mut rng = seed::rng(seed);
            let raw: Vec<(bool, f64, f64, f64)> = (0..30)
                .map(|_| (rng.random::<f64>() < 0.5, rng.random(), rng.random(), rng.random()))
                .collect();
            let build = |rev: bool| {
                let maps: Vec<BTreeMap<String, f64>> = raw.iter().map(|&(_, a, b, c)| {
                    let mut v = vec![("a".to_string(), a), ("b".to_string(), b), ("c".to_string(), c)];
                    if rev { v.reverse(); }
                    v.into_iter().collect()
                }).collect();
                let ids: Vec<String> = (0..raw.len()).map(|i| format!("s{i}")).collect();
                let p = TrainingPanel::new(ids.iter().zip(&raw).zip(&maps).map(|((id, r), m)| (id.as_str(), r.0, m))).unwrap();
                let cfg = ForestConfig { n_trees: 10, min_node_size: 2, seed, ..ForestConfig::default() };
                oob_predict(&fit_forest(&p, &cfg, Execution::Sequential).unwrap(), &p, Execution::Sequential)
            };
            prop_assert_eq!(build(false), build(true));
        }
    }
}
