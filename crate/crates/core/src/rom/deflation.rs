use nalgebra::{DVector, Matrix6, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::fem::{DofSplit, VoxelModel};

use super::Clustering;

pub type RigidBlock = SMatrix<f64, 3, 6>;

/// Displacement of a point at relative position `r` under the rigid motion
/// `(t, θ)` of a cluster centroid.
pub fn rigid_block(r: &Vector3<f64>) -> RigidBlock {
    let (x, y, z) = (r.x, r.y, r.z);
    RigidBlock::from_row_slice(&[
        1.0, 0.0, 0.0, 0.0, z, -y, //
        0.0, 1.0, 0.0, -z, 0.0, x, //
        0.0, 0.0, 1.0, y, -x, 0.0,
    ])
}

/// Cluster of every node: the nearest centroid among the clusters of the
/// elements sharing the node.
pub fn node_clusters(model: &VoxelModel, clustering: &Clustering) -> Vec<usize> {
    let mut best = vec![(f64::INFINITY, usize::MAX); model.n_nodes()];
    for (e, nodes) in model.connectivity.iter().enumerate() {
        let c = clustering.assignment[e];
        for &a in nodes {
            let d = (model.coords[a] - clustering.centroids[c]).norm_squared();
            if d < best[a].0 || (d == best[a].0 && c < best[a].1) {
                best[a] = (d, c);
            }
        }
    }
    best.into_iter().map(|(_, c)| c).collect()
}

/// Prolongation `W` from per-cluster rigid modes to the free fine-scale dofs.
#[derive(Debug, Clone)]
pub struct DeflationBasis {
    pub k: usize,
    /// Cluster owning each node.
    pub node_cluster: Vec<usize>,
    /// Node position relative to its cluster centroid.
    pub node_offset: Vec<Vector3<f64>>,
    /// Nodes whose dofs are free and thus carry a row block of `W`.
    pub node_free: Vec<bool>,
}

impl DeflationBasis {
    pub fn n_columns(&self) -> usize {
        6 * self.k
    }

    /// Row block of node `a`, `None` for prescribed nodes.
    pub fn block(&self, a: usize) -> Option<(usize, RigidBlock)> {
        self.node_free[a].then(|| (self.node_cluster[a], rigid_block(&self.node_offset[a])))
    }

    /// Full-length displacement `W λ` (zero on prescribed dofs).
    pub fn prolong(&self, lambda: &DVector<f64>) -> Vec<f64> {
        let mut u = vec![0.0; 3 * self.node_cluster.len()];
        for a in 0..self.node_cluster.len() {
            if let Some((c, w)) = self.block(a) {
                let v = w * lambda.fixed_rows::<6>(6 * c);
                u[3 * a..3 * a + 3].copy_from_slice(v.as_slice());
            }
        }
        u
    }

    /// `Wᵀ f` for a full-length vector `f`.
    pub fn restrict(&self, f: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_columns());
        for a in 0..self.node_cluster.len() {
            if let Some((c, w)) = self.block(a) {
                let fa = Vector3::new(f[3 * a], f[3 * a + 1], f[3 * a + 2]);
                let mut seg = out.fixed_rows_mut::<6>(6 * c);
                seg += w.transpose() * fa;
            }
        }
        out
    }
}

pub fn build_deflation(
    model: &VoxelModel,
    clustering: &Clustering,
    split: &DofSplit,
) -> Result<DeflationBasis> {
    if clustering.assignment.len() != model.n_elements() {
        return Err(Error::Config(format!(
            "clustering covers {} elements, model has {}",
            clustering.assignment.len(),
            model.n_elements()
        )));
    }
    let node_cluster = node_clusters(model, clustering);
    let node_offset: Vec<Vector3<f64>> = node_cluster
        .iter()
        .zip(&model.coords)
        .map(|(&c, x)| x - clustering.centroids[c])
        .collect();
    let node_free: Vec<bool> = (0..model.n_nodes())
        .map(|a| {
            let free = (0..3).filter(|i| split.free_index[3 * a + i] != usize::MAX).count();
            assert!(free == 0 || free == 3, "mixed node constraints are not supported");
            free == 3
        })
        .collect();
    let basis = DeflationBasis {
        k: clustering.k,
        node_cluster,
        node_offset,
        node_free,
    };

    let mut gram = vec![Matrix6::<f64>::zeros(); clustering.k];
    for a in 0..model.n_nodes() {
        if let Some((c, w)) = basis.block(a) {
            gram[c] += w.transpose() * w;
        }
    }
    for (c, g) in gram.iter().enumerate() {
        let eig = g.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(hi > 0.0) || lo <= 1e-10 * hi {
            return Err(Error::DeflationRank { cluster: c });
        }
    }
    Ok(basis)
}
