//! Hierarchy trees, aggregation (`S`) and structure (`A`) matrices.
//!
//! Nodes are indexed in level order, siblings ordered by their first
//! appearance in the edge list. Leaves always occupy the last `m`
//! positions, so every vector `y` splits as `[upper | bottom]` and
//! `y = S b` for coherent `y`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyTree {
    ids: Vec<String>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    index: HashMap<String, usize>,
    m: usize,
}

impl HierarchyTree {
    /// Builds a tree from `(parent, child)` edges.
    ///
    /// Internal nodes are numbered breadth first from the root; leaves follow
    /// in the same breadth-first order. For trees whose leaves all sit at the
    /// same depth this is exactly the level-order traversal.
    pub fn from_edges<P, C>(edges: &[(P, C)]) -> Result<Self>
    where
        P: AsRef<str>,
        C: AsRef<str>,
    {
        if edges.is_empty() {
            return Err(Error::EmptyHierarchy);
        }

        // Nodes in order of first appearance; children in order of first appearance.
        let mut names: Vec<String> = Vec::new();
        let mut local: HashMap<String, usize> = HashMap::new();
        let mut intern = |s: &str, names: &mut Vec<String>| -> usize {
            if let Some(&i) = local.get(s) {
                return i;
            }
            let i = names.len();
            names.push(s.to_string());
            local.insert(s.to_string(), i);
            i
        };

        let mut parent_of: Vec<Option<usize>> = Vec::new();
        let mut kids: Vec<Vec<usize>> = Vec::new();
        for (p, c) in edges {
            let p = intern(p.as_ref().trim(), &mut names);
            let c = intern(c.as_ref().trim(), &mut names);
            parent_of.resize(names.len(), None);
            kids.resize(names.len(), Vec::new());
            if p == c {
                return Err(Error::Cycle(names[p].clone()));
            }
            if let Some(prev) = parent_of[c] {
                return Err(Error::DuplicateChild {
                    child: names[c].clone(),
                    first: names[prev].clone(),
                    second: names[p].clone(),
                });
            }
            parent_of[c] = Some(p);
            kids[p].push(c);
        }

        let roots: Vec<usize> = (0..names.len()).filter(|&i| parent_of[i].is_none()).collect();
        if roots.is_empty() {
            return Err(Error::Cycle(names[0].clone()));
        }
        if roots.len() > 1 {
            return Err(Error::MultipleRoots(
                roots.iter().map(|&i| names[i].clone()).collect(),
            ));
        }
        let root = roots[0];

        // Breadth-first walk from the root.
        let mut depth = vec![usize::MAX; names.len()];
        let mut bfs = Vec::with_capacity(names.len());
        let mut queue = VecDeque::from([root]);
        depth[root] = 0;
        while let Some(u) = queue.pop_front() {
            bfs.push(u);
            for &v in &kids[u] {
                depth[v] = depth[u] + 1;
                queue.push_back(v);
            }
        }
        if bfs.len() != names.len() {
            let missing = (0..names.len()).find(|&i| depth[i] == usize::MAX).unwrap();
            // An unreachable node in a single-root parent forest must sit on a cycle.
            let mut seen = HashSet::new();
            let mut cur = missing;
            while let Some(p) = parent_of[cur] {
                if !seen.insert(cur) {
                    return Err(Error::Cycle(names[cur].clone()));
                }
                cur = p;
            }
            return Err(Error::Disconnected(names[missing].clone()));
        }

        let (internal, leaves): (Vec<usize>, Vec<usize>) =
            bfs.into_iter().partition(|&u| !kids[u].is_empty());
        let order: Vec<usize> = internal.into_iter().chain(leaves).collect();
        Ok(Self::from_order(&names, &parent_of, &kids, &depth, &order))
    }

    /// A one-node hierarchy (`n = m = 1`, no constraints).
    pub fn single(id: impl Into<String>) -> Self {
        let id = id.into();
        Self {
            index: HashMap::from([(id.clone(), 0)]),
            ids: vec![id],
            parent: vec![None],
            children: vec![Vec::new()],
            depth: vec![0],
            m: 1,
        }
    }

    fn from_order(
        names: &[String],
        parent_of: &[Option<usize>],
        kids: &[Vec<usize>],
        depth: &[usize],
        order: &[usize],
    ) -> Self {
        let mut pos = vec![0usize; names.len()];
        for (new, &old) in order.iter().enumerate() {
            pos[old] = new;
        }
        let ids: Vec<String> = order.iter().map(|&o| names[o].clone()).collect();
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        let m = order.iter().filter(|&&o| kids[o].is_empty()).count();
        Self {
            parent: order.iter().map(|&o| parent_of[o].map(|p| pos[p])).collect(),
            children: order
                .iter()
                .map(|&o| kids[o].iter().map(|&c| pos[c]).collect())
                .collect(),
            depth: order.iter().map(|&o| depth[o]).collect(),
            ids,
            index,
            m,
        }
    }

    /// Total number of nodes.
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    /// Number of leaves (bottom-level series).
    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of internal (upper-level) nodes.
    pub fn r(&self) -> usize {
        self.ids.len() - self.m
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn depth(&self, i: usize) -> usize {
        self.depth[i]
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.children[i].is_empty()
    }

    /// Number of distinct depths.
    pub fn levels(&self) -> usize {
        self.depth.iter().max().map_or(0, |d| d + 1)
    }

    /// Edges as `(parent, child)` id pairs in node order of the child.
    pub fn edges(&self) -> Vec<(String, String)> {
        (0..self.n())
            .filter_map(|c| self.parent[c].map(|p| (self.ids[p].clone(), self.ids[c].clone())))
            .collect()
    }

    /// Leaf positions (columns of `S`) below node `i`, ascending.
    pub fn leaves_under(&self, i: usize) -> Vec<usize> {
        let r = self.r();
        let mut out = Vec::new();
        let mut stack = vec![i];
        while let Some(u) = stack.pop() {
            if self.is_leaf(u) {
                out.push(u - r);
            } else {
                stack.extend(self.children[u].iter().copied());
            }
        }
        out.sort_unstable();
        out
    }

    /// The `n × m` aggregation matrix `S`.
    pub fn aggregation_matrix(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.n(), self.m);
        for i in 0..self.n() {
            for j in self.leaves_under(i) {
                s[(i, j)] = 1.0;
            }
        }
        s
    }

    /// The `r × n` structure matrix `A = [I_r | -S_upper]`, with `A S = 0`.
    pub fn structure_matrix(&self) -> DMatrix<f64> {
        let (r, n) = (self.r(), self.n());
        let s = self.aggregation_matrix();
        let mut a = DMatrix::zeros(r, n);
        for k in 0..r {
            a[(k, k)] = 1.0;
            for j in 0..self.m {
                a[(k, r + j)] = -s[(k, j)];
            }
        }
        a
    }

    /// `y = S b`, computed by summing leaves directly.
    pub fn aggregate(&self, bottom: &[f64]) -> Result<Vec<f64>> {
        if bottom.len() != self.m {
            return Err(Error::dim("aggregate", self.m, bottom.len()));
        }
        let r = self.r();
        let mut y = vec![0.0; self.n()];
        y[r..].copy_from_slice(bottom);
        // Children always have larger indices than parents.
        for i in (0..r).rev() {
            y[i] = self.children[i].iter().map(|&c| y[c]).sum();
        }
        Ok(y)
    }

    /// Max-norm of `A y`; zero iff `y` is coherent.
    pub fn coherency_error(&self, y: &[f64]) -> Result<f64> {
        if y.len() != self.n() {
            return Err(Error::dim("coherency_error", self.n(), y.len()));
        }
        let r = self.r();
        let expected = self.aggregate(&y[r..])?;
        Ok((0..r).map(|k| (y[k] - expected[k]).abs()).fold(0.0, f64::max))
    }
}

/// Aligned all-level observations plus covariates on a regular time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelSeries {
    /// `T × n`, columns in tree node order.
    pub values: DMatrix<f64>,
    /// `T × c`.
    pub covariates: DMatrix<f64>,
    pub timestamps: Vec<i64>,
    /// Original timestamp strings, written back verbatim on output.
    pub labels: Vec<String>,
    pub hierarchy: Arc<HierarchyTree>,
}

impl PanelSeries {
    pub fn new(
        values: DMatrix<f64>,
        covariates: DMatrix<f64>,
        timestamps: Vec<i64>,
        labels: Vec<String>,
        hierarchy: Arc<HierarchyTree>,
    ) -> Result<Self> {
        let t = values.nrows();
        if values.ncols() != hierarchy.n() {
            return Err(Error::dim("panel columns", hierarchy.n(), values.ncols()));
        }
        if covariates.nrows() != t {
            return Err(Error::dim("covariate rows", t, covariates.nrows()));
        }
        if timestamps.len() != t || labels.len() != t {
            return Err(Error::dim("timestamps", t, timestamps.len()));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            let (row, col) = (k % t, k / t);
            return Err(Error::Data(format!(
                "non-finite value at ({}, {})",
                labels[row],
                hierarchy.id(col)
            )));
        }
        if t >= 2 {
            let step = timestamps[1] - timestamps[0];
            if step <= 0 {
                return Err(Error::Data("timestamps must be strictly increasing".into()));
            }
            if let Some(w) = timestamps.windows(2).position(|w| w[1] - w[0] != step) {
                return Err(Error::Data(format!(
                    "irregular timestamp step at '{}'",
                    labels[w + 1]
                )));
            }
        }
        Ok(Self {
            values,
            covariates,
            timestamps,
            labels,
            hierarchy,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn row(&self, t: usize) -> Vec<f64> {
        self.values.row(t).iter().copied().collect()
    }

    pub fn covariate_row(&self, t: usize) -> Vec<f64> {
        self.covariates.row(t).iter().copied().collect()
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let len = end - start;
        Self {
            values: self.values.rows(start, len).into_owned(),
            covariates: self.covariates.rows(start, len).into_owned(),
            timestamps: self.timestamps[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            hierarchy: Arc::clone(&self.hierarchy),
        }
    }

    /// Largest per-step coherency error over the whole panel.
    pub fn max_coherency_error(&self) -> f64 {
        (0..self.len())
            .map(|t| self.hierarchy.coherency_error(&self.row(t)).unwrap())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn figure2() -> HierarchyTree {
        HierarchyTree::from_edges(&[
            ("A", "B"),
            ("A", "C"),
            ("B", "D"),
            ("B", "E"),
            ("C", "F"),
            ("C", "G"),
        ])
        .unwrap()
    }

    #[test]
    fn figure2_shape_and_order() {
        let t = figure2();
        assert_eq!((t.n(), t.m(), t.r()), (7, 4, 3));
        assert_eq!(t.ids(), ["A", "B", "C", "D", "E", "F", "G"]);
        assert_eq!(t.levels(), 3);
    }

    #[test]
    fn edge_order_does_not_matter_for_depth() {
        let t = HierarchyTree::from_edges(&[
            ("C", "F"),
            ("A", "B"),
            ("B", "D"),
            ("A", "C"),
            ("C", "G"),
            ("B", "E"),
        ])
        .unwrap();
        // siblings by first appearance: under A, B precedes C
        assert_eq!(t.ids(), ["A", "B", "C", "D", "E", "F", "G"]);
    }

    #[test]
    fn minimal_tree() {
        let t = HierarchyTree::from_edges(&[("root", "leaf")]).unwrap();
        assert_eq!((t.n(), t.m(), t.r()), (2, 1, 1));
        assert_eq!(t.aggregation_matrix(), DMatrix::from_row_slice(2, 1, &[1.0, 1.0]));
        assert_eq!(t.structure_matrix(), DMatrix::from_row_slice(1, 2, &[1.0, -1.0]));
    }

    #[test]
    fn malformed_edges() {
        assert!(matches!(
            HierarchyTree::from_edges(&[("X", "Y"), ("Y", "X")]),
            Err(Error::Cycle(_))
        ));
        assert!(matches!(
            HierarchyTree::from_edges(&[("X", "X")]),
            Err(Error::Cycle(_))
        ));
        assert!(matches!(
            HierarchyTree::from_edges(&[("A", "B"), ("C", "B")]),
            Err(Error::DuplicateChild { .. })
        ));
        assert!(matches!(
            HierarchyTree::from_edges(&[("A", "B"), ("C", "D")]),
            Err(Error::MultipleRoots(_))
        ));
        // a detached cycle next to a valid tree
        assert!(matches!(
            HierarchyTree::from_edges(&[("A", "B"), ("X", "Y"), ("Y", "X")]),
            Err(Error::Cycle(_))
        ));
        let empty: [(&str, &str); 0] = [];
        assert!(matches!(HierarchyTree::from_edges(&empty), Err(Error::EmptyHierarchy)));
    }

    #[test]
    fn figure2_aggregation_matrix() {
        let s = figure2().aggregation_matrix();
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(7, 4, &[
            1., 1., 1., 1.,
            1., 1., 0., 0.,
            0., 0., 1., 1.,
            1., 0., 0., 0.,
            0., 1., 0., 0.,
            0., 0., 1., 0.,
            0., 0., 0., 1.,
        ]);
        assert_eq!(s, expected);
    }

    #[test]
    fn figure2_structure_matrix_annihilates_s() {
        let t = figure2();
        let a = t.structure_matrix();
        let s = t.aggregation_matrix();
        assert_eq!(a.shape(), (3, 7));
        let prod = &a * &s;
        assert!(prod.iter().all(|&v| v == 0.0));
        assert_eq!(a.rank(1e-12), 3);
    }

    #[test]
    fn aggregate_and_coherency() {
        let t = figure2();
        let y = t.aggregate(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(y, vec![10.0, 3.0, 7.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.coherency_error(&y).unwrap(), 0.0);
        assert_eq!(
            t.coherency_error(&[11.0, 3.0, 7.0, 1.0, 2.0, 3.0, 4.0]).unwrap(),
            1.0
        );
        assert!(t.coherency_error(&[1.0; 6]).is_err());
        assert!(t.aggregate(&[1.0; 3]).is_err());
    }

    #[test]
    fn unbalanced_tree_puts_leaves_last() {
        // root has one leaf child and one internal child
        let t = HierarchyTree::from_edges(&[("R", "L"), ("R", "I"), ("I", "a"), ("I", "b")])
            .unwrap();
        assert_eq!(t.ids(), ["R", "I", "L", "a", "b"]);
        assert_eq!(t.m(), 3);
        for c in 0..t.n() {
            if let Some(p) = t.parent(c) {
                assert!(p < c);
            }
        }
        let s = t.aggregation_matrix();
        assert_eq!(s.rows(2, 3).into_owned(), DMatrix::identity(3, 3));
    }

    #[test]
    fn panel_rejects_irregular_steps() {
        let t = Arc::new(HierarchyTree::from_edges(&[("r", "l")]).unwrap());
        let vals = DMatrix::from_row_slice(3, 2, &[1., 1., 2., 2., 3., 3.]);
        let cov = DMatrix::zeros(3, 0);
        let labels = vec!["0".into(), "1".into(), "3".into()];
        let err = PanelSeries::new(vals, cov, vec![0, 1, 3], labels, t).unwrap_err();
        assert!(err.to_string().contains("irregular"));
    }
}

#[cfg(test)]
pub(crate) use tests::figure2;
