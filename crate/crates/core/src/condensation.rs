//! Static condensation of the RVE stiffness onto its boundary dofs and the
//! homogenized elastic tangent.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{gradient_from_strain, DofSplit, FreeSystem, VoxelModel};
use crate::material::{elastic_tangent, MaterialProps, Tangent, Voigt};
use crate::microstructure::{RveDescriptors, VoxelMesh};
use crate::sparse::{SparseCholesky, SymPattern, SymSparse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTangent {
    pub c_el: Tangent,
    pub mu: f64,
    pub lambda: f64,
    pub iso_residual: f64,
}

/// `K_pp − K_pf K_ff⁻¹ K_fp`, rows and columns ordered as `prescribed`.
pub fn schur_reduce(k: &SymSparse, prescribed: &[usize]) -> Result<DMatrix<f64>> {
    let n = k.dim();
    let np = prescribed.len();
    let mut p_index = vec![usize::MAX; n];
    for (i, &d) in prescribed.iter().enumerate() {
        if d >= n || p_index[d] != usize::MAX {
            return Err(Error::Config(format!("invalid prescribed dof {d}")));
        }
        p_index[d] = i;
    }
    let mut f_index = vec![usize::MAX; n];
    let mut nf = 0;
    for d in 0..n {
        if p_index[d] == usize::MAX {
            f_index[d] = nf;
            nf += 1;
        }
    }

    let mut k_pp = DMatrix::zeros(np, np);
    // coupling entries (free row, prescribed col, value)
    let mut k_fp = Vec::new();
    let mut ff_cols: Vec<Vec<usize>> = vec![Vec::new(); nf];
    let mut ff_entries = Vec::new();
    for (r, c, v) in k.entries() {
        match (p_index[r], p_index[c]) {
            (usize::MAX, usize::MAX) => {
                let (fr, fc) = (f_index[r], f_index[c]);
                let (hi, lo) = if fr >= fc { (fr, fc) } else { (fc, fr) };
                ff_cols[lo].push(hi);
                ff_entries.push((hi, lo, v));
            }
            (usize::MAX, pc) => k_fp.push((f_index[r], pc, v)),
            (pr, usize::MAX) => k_fp.push((f_index[c], pr, v)),
            (pr, pc) => {
                k_pp[(pr, pc)] += v;
                if pr != pc {
                    k_pp[(pc, pr)] += v;
                }
            }
        }
    }
    if nf == 0 {
        return Ok(k_pp);
    }

    let pattern = SymPattern::from_columns(ff_cols);
    let mut vals = vec![0.0; pattern.nnz()];
    for (r, c, v) in ff_entries {
        vals[pattern.position(r, c).expect("entry in pattern")] += v;
    }
    let mut chol = SparseCholesky::analyze(&pattern, None)?;
    chol.factorize(&vals).map_err(|_| {
        Error::Singular("free-free block is singular (mechanism or rigid mode)".into())
    })?;

    // X = K_ff⁻¹ K_fp, column-major nf × np
    let mut x = vec![0.0; nf * np];
    for &(f, p, v) in &k_fp {
        x[p * nf + f] += v;
    }
    chol.solve_many(&mut x, np);

    let mut k_r = k_pp;
    for &(f, p, v) in &k_fp {
        for q in 0..np {
            k_r[(p, q)] -= v * x[q * nf + f];
        }
    }
    let sym = (&k_r + k_r.transpose()) * 0.5;
    Ok(sym)
}

/// Elastic stiffness of the whole voxel model (all dofs).
pub fn assemble_elastic(model: &VoxelModel, c: &Tangent) -> SymSparse {
    let ke = model.element_stiffness(c);
    let mut triplets = Vec::with_capacity(model.n_elements() * 300);
    for e in 0..model.n_elements() {
        let dofs = model.element_dofs(e);
        for i in 0..24 {
            for j in 0..24 {
                if dofs[i] >= dofs[j] {
                    triplets.push((dofs[i], dofs[j], ke[(i, j)]));
                }
            }
        }
    }
    SymSparse::from_triplets(model.n_dofs(), &triplets)
}

/// Boundary-condensed stiffness of a voxel model. `nodes[a]` owns rows
/// `3a..3a+3` of `k_r`.
#[derive(Debug, Clone)]
pub struct Condensed {
    pub k_r: DMatrix<f64>,
    pub nodes: Vec<usize>,
}

pub fn condense_boundary(model: &VoxelModel, props: &MaterialProps) -> Result<Condensed> {
    let c = elastic_tangent(props)?;
    let k = assemble_elastic(model, &c);
    let nodes: Vec<usize> = (0..model.n_nodes()).filter(|&a| model.on_boundary[a]).collect();
    let prescribed: Vec<usize> = nodes.iter().flat_map(|&a| (0..3).map(move |i| 3 * a + i)).collect();
    Ok(Condensed {
        k_r: schur_reduce(&k, &prescribed)?,
        nodes,
    })
}

/// Fourth-order contraction `(1/|Ω|) Σ_ab X_a ⊗ K_r[a,b] ⊗ X_b` about the
/// RVE centroid, minor-symmetrized into Voigt form.
pub fn homogenized_tangent(model: &VoxelModel, condensed: &Condensed) -> Result<Tangent> {
    let x0 = Vector3::repeat(0.5 * model.side_length);
    let xs: Vec<Vector3<f64>> = condensed.nodes.iter().map(|&a| model.coords[a] - x0).collect();
    let mut c4 = [[[[0.0f64; 3]; 3]; 3]; 3];
    for (a, xa) in xs.iter().enumerate() {
        for (b, xb) in xs.iter().enumerate() {
            let block = condensed.k_r.fixed_view::<3, 3>(3 * a, 3 * b);
            if block.iter().all(|&v| v == 0.0) {
                continue;
            }
            for i in 0..3 {
                for k in 0..3 {
                    let kik = block[(i, k)];
                    if kik == 0.0 {
                        continue;
                    }
                    for j in 0..3 {
                        for l in 0..3 {
                            c4[i][j][k][l] += xa[j] * kik * xb[l];
                        }
                    }
                }
            }
        }
    }
    let vol = model.volume();
    let pair = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];
    let c = Tangent::from_fn(|p, q| {
        let ((i, j), (k, l)) = (pair[p], pair[q]);
        0.25 * (c4[i][j][k][l] + c4[j][i][k][l] + c4[i][j][l][k] + c4[j][i][l][k]) / vol
    });
    check_spd(&c)
}

fn check_spd(c: &Tangent) -> Result<Tangent> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    if eig.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::NonSpdTangent(eig.iter().copied().collect()));
    }
    Ok(sym)
}

/// Elastic homogenized tangent from six affine load cases: solve the interior
/// equilibrium and average the boundary reaction moments. Equivalent to
/// condensation followed by [`homogenized_tangent`], without forming `K_r`.
pub fn effective_tangent_matrix(model: &VoxelModel, props: &MaterialProps) -> Result<Tangent> {
    let c = elastic_tangent(props)?;
    let ke = model.element_stiffness(&c);
    let split = DofSplit::boundary(model);
    let mut system = FreeSystem::new(model, &split)?;
    let mut vals = system.zero_values();
    for e in 0..model.n_elements() {
        system.add_element(&mut vals, e, &ke);
    }
    system.factorize(&vals)?;
    let nf = split.n_free();

    let cases: Vec<Vec<f64>> = (0..6)
        .map(|j| {
            let mut e = Voigt::zeros();
            e[j] = 1.0;
            model.affine_displacement(&gradient_from_strain(&e))
        })
        .collect();
    // interior response to each affine boundary field: K_ff u_f = −K_fp u_p
    let mut rhs = vec![0.0; nf * 6];
    for (j, u) in cases.iter().enumerate() {
        let mut up = u.clone();
        for &d in &split.free {
            up[d] = 0.0;
        }
        let f = apply_element_matrix(model, &ke, &up);
        for (i, &d) in split.free.iter().enumerate() {
            rhs[j * nf + i] = -f[d];
        }
    }
    system.chol.solve_many(&mut rhs, 6);

    let x0 = Vector3::repeat(0.5 * model.side_length);
    let mut out = Tangent::zeros();
    for (j, u) in cases.iter().enumerate() {
        let mut full = u.clone();
        for (i, &d) in split.free.iter().enumerate() {
            full[d] = rhs[j * nf + i];
        }
        let f = apply_element_matrix(model, &ke, &full);
        let mut sigma = Matrix3::zeros();
        for &d in &split.prescribed {
            let (a, i) = (d / 3, d % 3);
            let x = model.coords[a] - x0;
            for jj in 0..3 {
                sigma[(i, jj)] += f[d] * x[jj];
            }
        }
        let s = (sigma + sigma.transpose()) * (0.5 / model.volume());
        out.set_column(
            j,
            &Voigt::new(s[(0, 0)], s[(1, 1)], s[(2, 2)], s[(0, 1)], s[(0, 2)], s[(1, 2)]),
        );
    }
    check_spd(&out)
}

fn apply_element_matrix(
    model: &VoxelModel,
    ke: &crate::fem::ElementMatrix,
    u: &[f64],
) -> Vec<f64> {
    let mut f = vec![0.0; model.n_dofs()];
    for e in 0..model.n_elements() {
        let fe = ke * model.gather(e, u);
        model.scatter_add(e, &fe, &mut f);
    }
    f
}

/// Least-squares fit `C ≈ λ m mᵀ + μ diag(2,2,2,1,1,1)` in Voigt form.
/// Returns `(mu, lambda, iso_residual)`.
pub fn lame_from_tangent(c: &Tangent) -> (f64, f64, f64) {
    let mut a = Tangent::zeros();
    let mut b = Tangent::zeros();
    for i in 0..3 {
        for j in 0..3 {
            a[(i, j)] = 1.0;
        }
        b[(i, i)] = 2.0;
        b[(i + 3, i + 3)] = 1.0;
    }
    let (aa, ab, bb) = (a.dot(&a), a.dot(&b), b.dot(&b));
    let (ca, cb) = (c.dot(&a), c.dot(&b));
    let det = aa * bb - ab * ab;
    let lambda = (ca * bb - cb * ab) / det;
    let mu = (aa * cb - ab * ca) / det;
    let fit = a * lambda + b * mu;
    let res = (c - fit).norm() / c.norm();
    (mu, lambda, res)
}

pub fn effective_tangent(mesh: &VoxelMesh, props: &MaterialProps) -> Result<EffectiveTangent> {
    mesh.check_connected()?;
    let model = VoxelModel::new(mesh)?;
    let c_el = effective_tangent_matrix(&model, props)?;
    let (mu, lambda, iso_residual) = lame_from_tangent(&c_el);
    Ok(EffectiveTangent {
        c_el,
        mu,
        lambda,
        iso_residual,
    })
}

pub const TANGENT_CSV_HEADER: &str = "vf,np,ar,rd,mu,lambda,iso_residual";

pub fn write_tangent_csv<W: std::io::Write>(
    mut w: W,
    rows: &[(RveDescriptors, EffectiveTangent)],
) -> Result<()> {
    writeln!(w, "{TANGENT_CSV_HEADER}")?;
    for (d, t) in rows {
        writeln!(
            w,
            "{:?},{},{:?},{:?},{:?},{:?},{:?}",
            d.vf, d.np, d.ar, d.rd, t.mu, t.lambda, t.iso_residual
        )?;
    }
    Ok(())
}

/// Rows of `(descriptors, mu, lambda, iso_residual)`.
pub fn read_tangent_csv(text: &str) -> Result<Vec<(RveDescriptors, f64, f64, f64)>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(TANGENT_CSV_HEADER) {
        return Err(Error::Format("tangent table header mismatch".into()));
    }
    lines
        .map(|line| {
            let bad = || Error::Format(format!("tangent row {line:?}"));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok((
                RveDescriptors {
                    vf: num(f[0])?,
                    np: f[1].parse().map_err(|_| bad())?,
                    ar: num(f[2])?,
                    rd: num(f[3])?,
                },
                num(f[4])?,
                num(f[5])?,
                num(f[6])?,
            ))
        })
        .collect()
}
