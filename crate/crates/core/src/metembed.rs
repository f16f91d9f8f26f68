//! Unsupervised extremely-randomized-forest embedding of meteorology.
//!
//! Trees are trained to tell observed met rows from synthetic rows whose
//! columns are resampled independently from their empirical marginals. Each
//! row is then encoded by the leaves it reaches, one per tree.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{MetVector, MET_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestSpec {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Candidate features drawn per node; the best by Gini gain is kept.
    pub max_features: usize,
    pub seed: u64,
}

impl ForestSpec {
    pub fn new(seed: u64) -> Self {
        ForestSpec {
            n_trees: 256,
            max_depth: 3,
            max_features: 2,
            seed,
        }
    }

    pub fn max_dimension(&self) -> usize {
        self.n_trees << self.max_depth
    }

    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_features == 0 || self.max_features > MET_DIM {
            return Err(Error::Config(format!("invalid forest spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        leaf: usize,
    },
}

/// Nodes in depth-first order; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Global leaf index reached by `x`. Values below the threshold go left.
    pub fn route(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { leaf } => return leaf,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] < threshold { left } else { right },
            }
        }
    }

    fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { leaf } => Some(*leaf),
            Node::Split { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub spec: ForestSpec,
    pub trees: Vec<Tree>,
    pub n_leaves: usize,
}

/// Sparse binary leaf indicator; `ones` holds the set components in tree order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafEncoding {
    pub dim: usize,
    pub ones: Vec<usize>,
}

impl LeafEncoding {
    pub fn to_dense(&self) -> Vec<f32> {
        let mut v = vec![0.0; self.dim];
        for &i in &self.ones {
            v[i] = 1.0;
        }
        v
    }
}

fn gini_gain(labels: &[bool], x: &[f64], threshold: f64) -> f64 {
    let (mut nl, mut pl, mut nr, mut pr) = (0.0, 0.0, 0.0, 0.0);
    for (&y, &v) in labels.iter().zip(x) {
        if v < threshold {
            nl += 1.0;
            pl += y as u8 as f64;
        } else {
            nr += 1.0;
            pr += y as u8 as f64;
        }
    }
    let impurity = |n: f64, p: f64| if n == 0.0 { 0.0 } else { 2.0 * (p / n) * (1.0 - p / n) };
    let n = nl + nr;
    impurity(n, pl + pr) - (nl / n) * impurity(nl, pl) - (nr / n) * impurity(nr, pr)
}

struct Builder<'a> {
    rows: &'a [[f64; MET_DIM]],
    labels: &'a [bool],
    spec: &'a ForestSpec,
    nodes: Vec<Node>,
    next_leaf: usize,
}

impl Builder<'_> {
    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { leaf: 0 });
        let positives = idx.iter().filter(|&&i| self.labels[i]).count();
        let pure = positives == 0 || positives == idx.len();
        let split = if depth >= self.spec.max_depth || pure || idx.len() < 2 {
            None
        } else {
            self.choose_split(&idx, rng)
        };
        match split {
            None => {
                self.nodes[id] = Node::Leaf {
                    leaf: self.next_leaf,
                };
                self.next_leaf += 1;
            }
            Some((feature, threshold)) => {
                let (l, r): (Vec<usize>, Vec<usize>) = idx
                    .into_iter()
                    .partition(|&i| self.rows[i][feature] < threshold);
                let left = self.grow(l, depth + 1, rng);
                let right = self.grow(r, depth + 1, rng);
                self.nodes[id] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                };
            }
        }
        id
    }

    /// Draws up to `max_features` non-constant features, a uniform threshold
    /// in (min, max) for each, and keeps the best by Gini gain.
    fn choose_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let ranges: Vec<(usize, f64, f64)> = (0..MET_DIM)
            .filter_map(|f| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(self.rows[i][f]), hi.max(self.rows[i][f]))
                });
                (hi > lo).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return None;
        }
        let k = self.spec.max_features.min(ranges.len());
        let labels: Vec<bool> = idx.iter().map(|&i| self.labels[i]).collect();
        let mut best: Option<(f64, usize, f64)> = None;
        for pick in sample(rng, ranges.len(), k) {
            let (f, lo, hi) = ranges[pick];
            let mut t = rng.gen_range(lo..hi);
            if t <= lo {
                t = (lo + hi) / 2.0;
            }
            let x: Vec<f64> = idx.iter().map(|&i| self.rows[i][f]).collect();
            let gain = gini_gain(&labels, &x, t);
            if best.map_or(true, |(g, _, _)| gain > g) {
                best = Some((gain, f, t));
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Fits the forest on training-split met rows.
pub fn fit_embedding(met: &[[f64; MET_DIM]], spec: &ForestSpec) -> Result<Forest> {
    spec.validate()?;
    if met.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "met embedding needs at least 2 rows, got {}",
            met.len()
        )));
    }
    if met.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite met value".into()));
    }
    let n = met.len();
    let mut labels = vec![true; n];
    labels.extend(std::iter::repeat(false).take(n));
    let mut rows: Vec<[f64; MET_DIM]> = met.to_vec();
    rows.resize(2 * n, [0.0; MET_DIM]);

    let mut trees = Vec::with_capacity(spec.n_trees);
    let mut next_leaf = 0;
    for t in 0..spec.n_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(t as u64);
        for row in rows[n..].iter_mut() {
            for (f, v) in row.iter_mut().enumerate() {
                *v = met[rng.gen_range(0..n)][f];
            }
        }
        let mut b = Builder {
            rows: &rows,
            labels: &labels,
            spec,
            nodes: Vec::new(),
            next_leaf,
        };
        b.grow((0..2 * n).collect(), 0, &mut rng);
        next_leaf = b.next_leaf;
        trees.push(Tree { nodes: b.nodes });
    }
    Ok(Forest {
        spec: *spec,
        trees,
        n_leaves: next_leaf,
    })
}

impl Forest {
    /// Builds a forest from explicit trees, checking that leaf indices are
    /// exactly `0..n_leaves` and child pointers are valid.
    pub fn from_trees(spec: ForestSpec, trees: Vec<Tree>) -> Result<Self> {
        let mut seen: Vec<usize> = trees.iter().flat_map(|t| t.leaves()).collect();
        seen.sort_unstable();
        if seen.iter().enumerate().any(|(i, &l)| i != l) {
            return Err(Error::InvalidInput("leaf indices are not 0..n".into()));
        }
        for t in &trees {
            if t.nodes.is_empty() {
                return Err(Error::InvalidInput("empty tree".into()));
            }
            for (i, n) in t.nodes.iter().enumerate() {
                if let Node::Split {
                    feature,
                    left,
                    right,
                    ..
                } = n
                {
                    if *feature >= MET_DIM
                        || *left <= i
                        || *right <= i
                        || *left >= t.nodes.len()
                        || *right >= t.nodes.len()
                    {
                        return Err(Error::InvalidInput(format!("invalid split node {i}")));
                    }
                }
            }
        }
        Ok(Forest {
            spec,
            trees,
            n_leaves: seen.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n_leaves
    }

    pub fn embed(&self, met: &[f64]) -> Result<LeafEncoding> {
        if met.len() != MET_DIM {
            return Err(Error::InvalidInput(format!(
                "met vector has {} components, expected {MET_DIM}",
                met.len()
            )));
        }
        Ok(LeafEncoding {
            dim: self.n_leaves,
            ones: self.trees.iter().map(|t| t.route(met)).collect(),
        })
    }

    pub fn embed_met(&self, met: &MetVector) -> LeafEncoding {
        let x = met.to_array();
        LeafEncoding {
            dim: self.n_leaves,
            ones: self.trees.iter().map(|t| t.route(&x)).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let f: Forest = serde_json::from_slice(&bytes)?;
        Forest::from_trees(f.spec, f.trees)
    }
}
