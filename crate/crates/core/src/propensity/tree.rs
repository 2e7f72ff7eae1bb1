//! Second-order regression trees used as boosting base learners.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

pub(crate) struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub l2: f64,
    /// Multiplier on Newton leaf values (`(K-1)/K` for softmax boosting).
    pub leaf_scale: f64,
}

impl RegressionTree {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Grows a tree on gradients `grad` and hessians `hess` for the rows in
    /// `rows` of the row-major matrix `x` (`n_features` columns).
    pub(crate) fn fit(
        x: &[f64],
        n_features: usize,
        rows: &[usize],
        grad: &[f64],
        hess: &[f64],
        params: &TreeParams,
    ) -> Self {
        let mut tree = RegressionTree { nodes: Vec::new() };
        let mut work = rows.to_vec();
        tree.grow(x, n_features, &mut work, grad, hess, params, 0);
        tree
    }

    #[allow(clippy::too_many_arguments)]
    fn grow(
        &mut self,
        x: &[f64],
        nf: usize,
        rows: &mut [usize],
        grad: &[f64],
        hess: &[f64],
        params: &TreeParams,
        depth: usize,
    ) -> usize {
        let g: f64 = rows.iter().map(|&i| grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| hess[i]).sum();
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: -params.leaf_scale * g / (h + params.l2),
        });
        if depth >= params.max_depth || rows.len() < 2 * params.min_samples_leaf.max(1) {
            return me;
        }

        let parent_score = g * g / (h + params.l2);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order: Vec<(f64, usize)> = Vec::with_capacity(rows.len());
        for f in 0..nf {
            order.clear();
            order.extend(rows.iter().map(|&i| (x[i * nf + f], i)));
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let (mut gl, mut hl) = (0.0, 0.0);
            let min_leaf = params.min_samples_leaf.max(1);
            for p in 0..order.len() - 1 {
                let i = order[p].1;
                gl += grad[i];
                hl += hess[i];
                let nl = p + 1;
                if nl < min_leaf || order.len() - nl < min_leaf {
                    continue;
                }
                if order[p].0 == order[p + 1].0 {
                    continue;
                }
                let gr = g - gl;
                let hr = h - hl;
                let gain = gl * gl / (hl + params.l2) + gr * gr / (hr + params.l2) - parent_score;
                if gain > 1e-12 && best.is_none_or(|(bg, _, _)| gain > bg) {
                    let thr = 0.5 * (order[p].0 + order[p + 1].0);
                    best = Some((gain, f, thr));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return me;
        };
        let mut split = 0;
        for p in 0..rows.len() {
            if x[rows[p] * nf + feature] <= threshold {
                rows.swap(p, split);
                split += 1;
            }
        }
        let (l_rows, r_rows) = rows.split_at_mut(split);
        let left = self.grow(x, nf, l_rows, grad, hess, params, depth + 1);
        let right = self.grow(x, nf, r_rows, grad, hess, params, depth + 1);
        self.nodes[me] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        me
    }

    /// Multiplies every leaf by `factor`.
    pub(crate) fn scale_leaves(&mut self, factor: f64) {
        for n in &mut self.nodes {
            if let Node::Leaf { value } = n {
                *value *= factor;
            }
        }
    }

    pub(crate) fn dump(&self, out: &mut String) {
        let _ = writeln!(out, "tree {}", self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = match n {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => writeln!(out, "node {i} split {feature} {threshold} {left} {right}"),
                Node::Leaf { value } => writeln!(out, "node {i} leaf {value}"),
            };
        }
    }

    pub(crate) fn parse<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>) -> Result<Self> {
        let (ln, head) = lines.next().ok_or_else(|| bad(0, "expected tree header"))?;
        let count: usize = head
            .strip_prefix("tree ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| bad(ln, "expected `tree <count>`"))?;
        let mut nodes = Vec::with_capacity(count);
        for expect in 0..count {
            let (ln, line) = lines.next().ok_or_else(|| bad(ln, "truncated tree"))?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let idx: usize = parts
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(ln, "bad node index"))?;
            if parts.first() != Some(&"node") || idx != expect {
                return Err(bad(ln, "nodes must be listed in order"));
            }
            let num = |k: usize| -> Result<f64> {
                parts
                    .get(k)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(ln, "bad number"))
            };
            let node = match parts.get(2) {
                Some(&"leaf") => Node::Leaf { value: num(3)? },
                Some(&"split") => Node::Split {
                    feature: num(3)? as usize,
                    threshold: num(4)?,
                    left: num(5)? as usize,
                    right: num(6)? as usize,
                },
                _ => return Err(bad(ln, "unknown node kind")),
            };
            nodes.push(node);
        }
        for n in &nodes {
            if let Node::Split { left, right, .. } = n {
                if *left >= count || *right >= count {
                    return Err(bad(ln, "child index out of range"));
                }
            }
        }
        Ok(Self { nodes })
    }
}

fn bad(line: usize, msg: &str) -> Error {
    Error::InvalidData(format!("model dump line {}: {msg}", line + 1))
}
