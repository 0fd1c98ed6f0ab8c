//! Trilinear hexahedral discretization of a voxel mesh: node numbering,
//! strain-displacement operators, dof partitioning and assembly of the
//! free-free stiffness block.

use nalgebra::{Matrix3, SMatrix, Vector3};

use crate::error::{Error, Result};
use crate::material::{Tangent, Voigt};
use crate::microstructure::VoxelMesh;
use crate::sparse::{SparseCholesky, SymPattern};

pub type BMatrix = SMatrix<f64, 6, 24>;
pub type ElementMatrix = SMatrix<f64, 24, 24>;
pub type ElementVector = SMatrix<f64, 24, 1>;

pub const GAUSS_POINTS: usize = 8;

/// Local node offsets in the reference cube, counter-clockwise bottom face
/// then top face.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Symmetric part of a displacement gradient in Voigt form (engineering shear).
pub fn strain_from_gradient(g: &Matrix3<f64>) -> Voigt {
    Voigt::new(
        g[(0, 0)],
        g[(1, 1)],
        g[(2, 2)],
        g[(0, 1)] + g[(1, 0)],
        g[(0, 2)] + g[(2, 0)],
        g[(1, 2)] + g[(2, 1)],
    )
}

/// Displacement gradient whose symmetric part is the given Voigt strain.
pub fn gradient_from_strain(e: &Voigt) -> Matrix3<f64> {
    Matrix3::new(
        e[0],
        0.5 * e[3],
        0.5 * e[4],
        0.5 * e[3],
        e[1],
        0.5 * e[5],
        0.5 * e[4],
        0.5 * e[5],
        e[2],
    )
}

/// B matrices of a cubic hexahedron of edge `h` at its 2×2×2 Gauss points.
fn hex_b_matrices(h: f64) -> [BMatrix; GAUSS_POINTS] {
    let g = 1.0 / 3f64.sqrt();
    std::array::from_fn(|q| {
        let c = CORNERS[q];
        let xi = [c[0], c[1], c[2]].map(|v| if v == 0 { -g } else { g });
        let mut b = BMatrix::zeros();
        for (a, ca) in CORNERS.iter().enumerate() {
            let s = ca.map(|v| if v == 0 { -1.0 } else { 1.0 });
            let f = [
                1.0 + xi[0] * s[0],
                1.0 + xi[1] * s[1],
                1.0 + xi[2] * s[2],
            ];
            let dn = [
                s[0] * f[1] * f[2] / 8.0 * 2.0 / h,
                f[0] * s[1] * f[2] / 8.0 * 2.0 / h,
                f[0] * f[1] * s[2] / 8.0 * 2.0 / h,
            ];
            let col = 3 * a;
            b[(0, col)] = dn[0];
            b[(1, col + 1)] = dn[1];
            b[(2, col + 2)] = dn[2];
            b[(3, col)] = dn[1];
            b[(3, col + 1)] = dn[0];
            b[(4, col)] = dn[2];
            b[(4, col + 2)] = dn[0];
            b[(5, col + 1)] = dn[2];
            b[(5, col + 2)] = dn[1];
        }
        b
    })
}

/// Finite element model over the matrix voxels of a mesh. Nodes not touched
/// by any matrix voxel are dropped; pores are void.
#[derive(Debug, Clone)]
pub struct VoxelModel {
    pub resolution: usize,
    pub side_length: f64,
    pub h: f64,
    /// Voxel index of every element.
    pub elements: Vec<usize>,
    pub connectivity: Vec<[usize; 8]>,
    /// Grid index `(k (n+1) + j) (n+1) + i` of every node.
    pub node_grid: Vec<usize>,
    pub coords: Vec<Vector3<f64>>,
    pub on_boundary: Vec<bool>,
    pub b: [BMatrix; GAUSS_POINTS],
    /// Quadrature weight times Jacobian determinant.
    pub gp_weight: f64,
}

impl VoxelModel {
    pub fn new(mesh: &VoxelMesh) -> Result<Self> {
        let n = mesh.resolution;
        let np1 = n + 1;
        let h = mesh.voxel_size();
        let elements: Vec<usize> = mesh.matrix_voxels().collect();
        if elements.is_empty() {
            return Err(Error::Config("mesh has no matrix voxels".into()));
        }
        let mut compact = vec![usize::MAX; np1 * np1 * np1];
        let mut node_grid = Vec::new();
        let mut connectivity = Vec::with_capacity(elements.len());
        for &v in &elements {
            let (i, j, k) = mesh.coords(v);
            let nodes = CORNERS.map(|c| {
                let g = ((k + c[2]) * np1 + j + c[1]) * np1 + i + c[0];
                if compact[g] == usize::MAX {
                    compact[g] = node_grid.len();
                    node_grid.push(g);
                }
                compact[g]
            });
            connectivity.push(nodes);
        }
        let grid_ijk = |g: usize| (g % np1, (g / np1) % np1, g / (np1 * np1));
        let coords = node_grid
            .iter()
            .map(|&g| {
                let (i, j, k) = grid_ijk(g);
                Vector3::new(i as f64, j as f64, k as f64) * h
            })
            .collect();
        let on_boundary = node_grid
            .iter()
            .map(|&g| {
                let (i, j, k) = grid_ijk(g);
                [i, j, k].iter().any(|&x| x == 0 || x == n)
            })
            .collect();
        Ok(VoxelModel {
            resolution: n,
            side_length: mesh.side_length,
            h,
            elements,
            connectivity,
            node_grid,
            coords,
            on_boundary,
            b: hex_b_matrices(h),
            gp_weight: h * h * h / 8.0,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_grid.len()
    }

    pub fn n_dofs(&self) -> usize {
        3 * self.n_nodes()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    /// Total RVE volume |Ω| = L³, pores included.
    pub fn volume(&self) -> f64 {
        self.side_length.powi(3)
    }

    pub fn element_volume(&self) -> f64 {
        self.h.powi(3)
    }

    pub fn element_dofs(&self, e: usize) -> [usize; 24] {
        let c = &self.connectivity[e];
        std::array::from_fn(|i| 3 * c[i / 3] + i % 3)
    }

    pub fn gather(&self, e: usize, u: &[f64]) -> ElementVector {
        let dofs = self.element_dofs(e);
        ElementVector::from_fn(|i, _| u[dofs[i]])
    }

    pub fn scatter_add(&self, e: usize, fe: &ElementVector, f: &mut [f64]) {
        for (i, &d) in self.element_dofs(e).iter().enumerate() {
            f[d] += fe[i];
        }
    }

    pub fn element_center(&self, e: usize) -> Vector3<f64> {
        let x0 = self.coords[self.connectivity[e][0]];
        x0 + Vector3::repeat(0.5 * self.h)
    }

    /// Elastic element stiffness, identical for every voxel.
    pub fn element_stiffness(&self, c: &Tangent) -> ElementMatrix {
        self.b
            .iter()
            .fold(ElementMatrix::zeros(), |k, b| k + b.transpose() * c * b * self.gp_weight)
    }

    /// u = g X at every node, X measured from the origin corner.
    pub fn affine_displacement(&self, g: &Matrix3<f64>) -> Vec<f64> {
        let mut u = vec![0.0; self.n_dofs()];
        for (a, x) in self.coords.iter().enumerate() {
            let v = g * x;
            u[3 * a..3 * a + 3].copy_from_slice(v.as_slice());
        }
        u
    }

    /// Node ids in nested-dissection order on the structured grid.
    pub fn nested_dissection(&self) -> Vec<usize> {
        let np1 = self.resolution + 1;
        let mut compact = vec![usize::MAX; np1 * np1 * np1];
        for (a, &g) in self.node_grid.iter().enumerate() {
            compact[g] = a;
        }
        let mut grid_order = Vec::with_capacity(np1 * np1 * np1);
        dissect(&mut grid_order, [0; 3], [np1; 3], np1);
        grid_order
            .into_iter()
            .map(|g| compact[g])
            .filter(|&a| a != usize::MAX)
            .collect()
    }
}

/// Recursive bisection of a box of grid nodes along its longest side; the
/// separating plane is numbered after both halves.
fn dissect(out: &mut Vec<usize>, lo: [usize; 3], hi: [usize; 3], np1: usize) {
    let ext = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let vol = ext[0] * ext[1] * ext[2];
    if vol == 0 {
        return;
    }
    let push_box = |out: &mut Vec<usize>, lo: [usize; 3], hi: [usize; 3]| {
        for k in lo[2]..hi[2] {
            for j in lo[1]..hi[1] {
                for i in lo[0]..hi[0] {
                    out.push((k * np1 + j) * np1 + i);
                }
            }
        }
    };
    let d = (0..3).max_by_key(|&d| ext[d]).unwrap();
    if ext[d] <= 2 || vol <= 8 {
        push_box(out, lo, hi);
        return;
    }
    let mid = lo[d] + ext[d] / 2;
    let (mut h1, mut l2) = (hi, lo);
    h1[d] = mid;
    l2[d] = mid + 1;
    dissect(out, lo, h1, np1);
    dissect(out, l2, hi, np1);
    let (mut ls, mut hs) = (lo, hi);
    ls[d] = mid;
    hs[d] = mid + 1;
    push_box(out, ls, hs);
}

/// Partition of the dofs into free (interior) and prescribed (boundary).
#[derive(Debug, Clone)]
pub struct DofSplit {
    /// Free index of each dof, `usize::MAX` for prescribed dofs.
    pub free_index: Vec<usize>,
    pub free: Vec<usize>,
    pub prescribed: Vec<usize>,
}

impl DofSplit {
    pub fn boundary(model: &VoxelModel) -> Self {
        Self::from_mask(model, |a| model.on_boundary[a])
    }

    /// Prescribe all dofs of the nodes for which `fixed` holds.
    pub fn from_mask(model: &VoxelModel, fixed: impl Fn(usize) -> bool) -> Self {
        let mut free_index = vec![usize::MAX; model.n_dofs()];
        let (mut free, mut prescribed) = (Vec::new(), Vec::new());
        for a in 0..model.n_nodes() {
            for c in 0..3 {
                let d = 3 * a + c;
                if fixed(a) {
                    prescribed.push(d);
                } else {
                    free_index[d] = free.len();
                    free.push(d);
                }
            }
        }
        DofSplit {
            free_index,
            free,
            prescribed,
        }
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }
}

/// Assembler and factorization for the free-free stiffness block with a
/// precomputed element-to-storage map.
pub struct FreeSystem {
    pub pattern: SymPattern,
    /// For each element, the storage slot of every local (row, col) pair with
    /// both dofs free and row ≥ col in free numbering; `u32::MAX` otherwise.
    scatter: Vec<u32>,
    pub chol: SparseCholesky,
}

impl FreeSystem {
    pub fn new(model: &VoxelModel, split: &DofSplit) -> Result<Self> {
        let nf = split.n_free();
        let mut columns: Vec<Vec<usize>> = vec![Vec::new(); nf];
        for e in 0..model.n_elements() {
            let dofs = model.element_dofs(e).map(|d| split.free_index[d]);
            for &r in dofs.iter().filter(|&&r| r != usize::MAX) {
                for &c in dofs.iter().filter(|&&c| c != usize::MAX && c <= r) {
                    columns[c].push(r);
                }
            }
        }
        let pattern = SymPattern::from_columns(columns);
        if pattern.nnz() >= u32::MAX as usize {
            return Err(Error::Singular("stiffness pattern too large".into()));
        }
        let mut scatter = Vec::with_capacity(model.n_elements() * 576);
        for e in 0..model.n_elements() {
            let dofs = model.element_dofs(e).map(|d| split.free_index[d]);
            for i in 0..24 {
                for j in 0..24 {
                    let (r, c) = (dofs[i], dofs[j]);
                    let slot = if r != usize::MAX && c != usize::MAX && r >= c {
                        pattern.position(r, c).expect("pattern covers element") as u32
                    } else {
                        u32::MAX
                    };
                    scatter.push(slot);
                }
            }
        }
        let order: Vec<usize> = model
            .nested_dissection()
            .into_iter()
            .flat_map(|a| (0..3).map(move |c| split.free_index[3 * a + c]))
            .filter(|&f| f != usize::MAX)
            .collect();
        let chol = SparseCholesky::analyze(&pattern, Some(&order))?;
        Ok(FreeSystem {
            pattern,
            scatter,
            chol,
        })
    }

    pub fn zero_values(&self) -> Vec<f64> {
        vec![0.0; self.pattern.nnz()]
    }

    pub fn add_element(&self, values: &mut [f64], e: usize, ke: &ElementMatrix) {
        let map = &self.scatter[e * 576..(e + 1) * 576];
        for i in 0..24 {
            for j in 0..24 {
                let slot = map[i * 24 + j];
                if slot != u32::MAX {
                    values[slot as usize] += ke[(i, j)];
                }
            }
        }
    }

    pub fn factorize(&mut self, values: &[f64]) -> Result<()> {
        self.chol.factorize(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{elastic_tangent, MaterialProps};

    #[test]
    fn b_matrices_reproduce_affine_strain() {
        let mesh = VoxelMesh::solid(8, 1.0);
        let model = VoxelModel::new(&mesh).unwrap();
        let g = Matrix3::new(0.1, 0.02, -0.03, 0.04, -0.05, 0.06, 0.01, 0.07, -0.05);
        let u = model.affine_displacement(&g);
        let want = strain_from_gradient(&g);
        for e in [0, 100, model.n_elements() - 1] {
            let ue = model.gather(e, &u);
            for b in &model.b {
                assert!((b * ue - want).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn element_stiffness_has_six_rigid_modes() {
        let model = VoxelModel::new(&VoxelMesh::solid(8, 2.0)).unwrap();
        let k = model.element_stiffness(&elastic_tangent(&MaterialProps::default()).unwrap());
        assert!((k - k.transpose()).abs().max() < 1e-9 * k.abs().max());
        let eig = k.symmetric_eigenvalues();
        let tiny = eig.iter().filter(|v| v.abs() < 1e-8 * eig.amax()).count();
        assert_eq!(tiny, 6);
        assert!(eig.iter().all(|&v| v > -1e-8 * eig.amax()));
    }

    #[test]
    fn model_counts_and_boundary() {
        let model = VoxelModel::new(&VoxelMesh::solid(4, 1.0)).unwrap();
        assert_eq!(model.n_nodes(), 125);
        assert_eq!(model.on_boundary.iter().filter(|&&b| !b).count(), 27);
        assert_eq!(model.nested_dissection().len(), 125);
        let mut nd = model.nested_dissection();
        nd.sort_unstable();
        assert_eq!(nd, (0..125).collect::<Vec<_>>());
    }

    #[test]
    fn pore_voxels_are_dropped() {
        let mut mesh = VoxelMesh::solid(4, 1.0);
        let idx = mesh.index(1, 1, 1);
        mesh.indicator[idx] = 1;
        let model = VoxelModel::new(&mesh).unwrap();
        assert_eq!(model.n_elements(), 63);
        assert!(!model.elements.contains(&idx));
        // the pore's corner nodes are still shared with neighbors
        assert_eq!(model.n_nodes(), 125);
    }

    #[test]
    fn free_system_solves_affine_patch_test() {
        let mut mesh = VoxelMesh::solid(6, 1.0);
        let idx = mesh.index(2, 3, 2);
        mesh.indicator[idx] = 1;
        let model = VoxelModel::new(&mesh).unwrap();
        let split = DofSplit::boundary(&model);
        let mut sys = FreeSystem::new(&model, &split).unwrap();
        let c = elastic_tangent(&MaterialProps::default()).unwrap();
        let ke = model.element_stiffness(&c);
        let mut vals = sys.zero_values();
        for e in 0..model.n_elements() {
            sys.add_element(&mut vals, e, &ke);
        }
        sys.factorize(&vals).unwrap();
        // pore-free mesh: affine field already in equilibrium
        let solid = VoxelModel::new(&VoxelMesh::solid(6, 1.0)).unwrap();
        let g = Matrix3::new(0.01, 0.0, 0.0, 0.0, -0.005, 0.0, 0.0, 0.0, 0.002);
        let u = solid.affine_displacement(&g);
        let mut f = vec![0.0; solid.n_dofs()];
        for e in 0..solid.n_elements() {
            let fe = ke * solid.gather(e, &u);
            solid.scatter_add(e, &fe, &mut f);
        }
        let split_s = DofSplit::boundary(&solid);
        let interior_max = split_s.free.iter().map(|&d| f[d].abs()).fold(0.0, f64::max);
        assert!(interior_max < 1e-9, "{interior_max}");
    }
}
