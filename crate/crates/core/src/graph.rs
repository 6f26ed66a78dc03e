//! Skeleton adjacency and its self-looped symmetric normalization.

use crate::error::{Result, StamError};
use crate::pose_io::JointLayout;

/// Dense square matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(StamError::shape(format!("{} entries for {n}x{n}", data.len())));
        }
        Ok(Self { n, data })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn count_edges(&self) -> usize {
        (0..self.n)
            .map(|i| (0..i).filter(|&j| self.get(i, j) != 0.0).count())
            .sum()
    }
}

/// Binary symmetric adjacency from an undirected edge list.
pub fn adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> Result<SquareMatrix> {
    let mut a = SquareMatrix::zeros(n);
    for &(i, j) in edges {
        if i >= n || j >= n || i == j {
            return Err(StamError::shape(format!("edge ({i}, {j}) invalid for {n} nodes")));
        }
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    }
    Ok(a)
}

pub fn build_adjacency(layout: &JointLayout) -> SquareMatrix {
    adjacency_from_edges(layout.num_joints(), layout.edges())
        .expect("layout edges are validated on construction")
}

/// `D^-1/2 (A + I) D^-1/2` with `D_ii = sum_j (A + I)_ij`.
pub fn normalize_adjacency(a: &SquareMatrix) -> Result<SquareMatrix> {
    let n = a.size();
    if let Some(v) = a.data().iter().find(|v| **v < 0.0 || !v.is_finite()) {
        return Err(StamError::shape(format!("adjacency entry {v} is not non-negative")));
    }
    let mut looped = a.clone();
    for i in 0..n {
        looped.set(i, i, a.get(i, i) + 1.0);
    }
    let mut inv_sqrt = vec![0.0; n];
    for (i, d) in inv_sqrt.iter_mut().enumerate() {
        let deg: f64 = (0..n).map(|j| looped.get(i, j)).sum();
        if deg <= 0.0 {
            return Err(StamError::SingularDegree(i));
        }
        *d = 1.0 / deg.sqrt();
    }
    let mut out = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, inv_sqrt[i] * looped.get(i, j) * inv_sqrt[j]);
        }
    }
    Ok(out)
}

/// The normalized skeleton graph shared by every graph convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub adjacency: SquareMatrix,
    pub normalized: SquareMatrix,
}

impl PoseGraph {
    pub fn new(layout: &JointLayout) -> Self {
        let adjacency = build_adjacency(layout);
        let normalized = normalize_adjacency(&adjacency).expect("self loops keep degrees positive");
        Self {
            adjacency,
            normalized,
        }
    }

    pub fn from_adjacency(adjacency: SquareMatrix) -> Result<Self> {
        let normalized = normalize_adjacency(&adjacency)?;
        Ok(Self {
            adjacency,
            normalized,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.size()
    }
}

impl Default for PoseGraph {
    fn default() -> Self {
        Self::new(&JointLayout::default())
    }
}
