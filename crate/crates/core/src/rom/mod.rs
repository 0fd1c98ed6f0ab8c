//! Clustering-based reduced-order model: k-means agglomeration of elements,
//! per-cluster rigid-body deflation space, reduced Newton solve with one
//! constitutive state per cluster, and RPIM recovery of centroid motion.

mod deflation;
mod kmeans;
mod rpim;

pub use deflation::{build_deflation, node_clusters, rigid_block, DeflationBasis, RigidBlock};
pub use kmeans::{kmeans, kmeans_traced, Clustering, MAX_LLOYD_ITERATIONS};
pub use rpim::{rpim_centroid_displacement, RpimConfig};

use nalgebra::{DMatrix, Matrix6, Vector3};

use crate::error::{Error, Result};
use crate::fem::{BMatrix, DofSplit, ElementMatrix, ElementVector, VoxelModel, GAUSS_POINTS};
use crate::material::{
    elastic_tangent, j2_return_map, DamageParams, MaterialProps, PointState, Tangent, Voigt,
};
use crate::microstructure::VoxelMesh;
use crate::rve_solver::{
    extract_responses, stabilized_damage_post, MacroLoad, ResponseCurve, ResponseRecord,
    SolverOptions, StepFields,
};

/// k-means on the element centers of a model.
pub fn cluster_elements(model: &VoxelModel, k: usize, seed: u64) -> Result<Clustering> {
    let pts: Vec<Vector3<f64>> = (0..model.n_elements()).map(|e| model.element_center(e)).collect();
    kmeans(&pts, k, seed)
}

/// Reduced operators for one model and clustering.
pub struct RomSystem<'a> {
    pub model: &'a VoxelModel,
    pub clustering: &'a Clustering,
    pub basis: DeflationBasis,
    members: Vec<Vec<usize>>,
    volumes: Vec<f64>,
    b_mean: BMatrix,
    c_el: Tangent,
    k_el: ElementMatrix,
    /// Cluster strain operator `G_c W` as 6×6 blocks per touched cluster.
    strain_ops: Vec<Vec<(usize, Matrix6<f64>)>>,
    /// Elastic projection `Wᵀ K W`.
    k0: DMatrix<f64>,
}

impl<'a> RomSystem<'a> {
    pub fn new(model: &'a VoxelModel, clustering: &'a Clustering, props: &MaterialProps) -> Result<Self> {
        let split = DofSplit::boundary(model);
        let basis = build_deflation(model, clustering, &split)?;
        let c_el = elastic_tangent(props)?;
        let k_el = model.element_stiffness(&c_el);
        let b_mean = model.b.iter().sum::<BMatrix>() / GAUSS_POINTS as f64;
        let members = clustering.members();
        let volumes: Vec<f64> = members
            .iter()
            .map(|m| m.len() as f64 * model.element_volume())
            .collect();

        let mut strain_ops: Vec<Vec<(usize, Matrix6<f64>)>> = vec![Vec::new(); clustering.k];
        let n6 = basis.n_columns();
        let mut k0 = DMatrix::zeros(n6, n6);
        for (e, nodes) in model.connectivity.iter().enumerate() {
            let c = clustering.assignment[e];
            let inv_n = 1.0 / members[c].len() as f64;
            let blocks: Vec<(usize, usize, _)> = nodes
                .iter()
                .enumerate()
                .filter_map(|(la, &a)| basis.block(a).map(|(j, w)| (la, j, w)))
                .collect();
            for &(la, j, w) in &blocks {
                let h = b_mean.fixed_columns::<3>(3 * la) * w * inv_n;
                match strain_ops[c].iter_mut().find(|(jj, _)| *jj == j) {
                    Some((_, m)) => *m += h,
                    None => strain_ops[c].push((j, h)),
                }
                for &(lb, jb, wb) in &blocks {
                    let kab = k_el.fixed_view::<3, 3>(3 * la, 3 * lb);
                    let blk = w.transpose() * kab * wb;
                    let mut dst = k0.fixed_view_mut::<6, 6>(6 * j, 6 * jb);
                    dst += blk;
                }
            }
        }
        Ok(RomSystem {
            model,
            clustering,
            basis,
            members,
            volumes,
            b_mean,
            c_el,
            k_el,
            strain_ops,
            k0,
        })
    }

    /// Volume-averaged strain of every cluster.
    pub fn cluster_strains(&self, u: &[f64]) -> Vec<Voigt> {
        self.members
            .iter()
            .map(|m| {
                let sum = m.iter().fold(ElementVector::zeros(), |acc, &e| acc + self.model.gather(e, u));
                self.b_mean * sum / m.len() as f64
            })
            .collect()
    }

    /// Internal force for a displacement field whose stress in cluster `c`
    /// is `σ_c + C_el (ε − ε̄_c)`.
    fn internal_force(&self, u: &[f64], strains: &[Voigt], stresses: &[Voigt]) -> Vec<f64> {
        let vol_e = self.model.element_volume();
        let corr: Vec<ElementVector> = strains
            .iter()
            .zip(stresses)
            .map(|(e, s)| self.b_mean.transpose() * (s - self.c_el * e) * vol_e)
            .collect();
        let mut f = vec![0.0; self.model.n_dofs()];
        for e in 0..self.model.n_elements() {
            let fe = self.k_el * self.model.gather(e, u) + corr[self.clustering.assignment[e]];
            self.model.scatter_add(e, &fe, &mut f);
        }
        f
    }

    fn reduced_tangent(&self, tangents: &[Option<Tangent>]) -> DMatrix<f64> {
        let mut k = self.k0.clone();
        for (c, t) in tangents.iter().enumerate() {
            let Some(t) = t else { continue };
            let d = (t - self.c_el) * self.volumes[c];
            for (i, hi) in &self.strain_ops[c] {
                let left = hi.transpose() * d;
                for (j, hj) in &self.strain_ops[c] {
                    let mut dst = k.fixed_view_mut::<6, 6>(6 * i, 6 * j);
                    dst += left * hj;
                }
            }
        }
        k
    }

    pub fn elastic_reduced_tangent(&self) -> &DMatrix<f64> {
        &self.k0
    }
}

/// Converged cluster-level fields after one load step.
#[derive(Debug, Clone)]
pub struct RomStep {
    pub cluster_strain: Vec<Voigt>,
    pub cluster_stress: Vec<Voigt>,
    pub cluster_states: Vec<PointState>,
    /// Fine-scale view with every integration point carrying its cluster's
    /// stress and state.
    pub fields: StepFields,
}

struct Evaluated {
    strains: Vec<Voigt>,
    stresses: Vec<Voigt>,
    states: Vec<PointState>,
    tangents: Vec<Option<Tangent>>,
}

impl RomSystem<'_> {
    fn evaluate(&self, u: &[f64], committed: &[PointState], props: &MaterialProps) -> Result<Evaluated> {
        let strains = self.cluster_strains(u);
        let mut ev = Evaluated {
            stresses: Vec::with_capacity(strains.len()),
            states: Vec::with_capacity(strains.len()),
            tangents: Vec::with_capacity(strains.len()),
            strains,
        };
        for (old, eps) in committed.iter().zip(&ev.strains) {
            let (s, st, c) = j2_return_map(old, eps, props)?;
            let plastic = st.eq_pl > old.eq_pl;
            ev.stresses.push(s);
            ev.states.push(st);
            ev.tangents.push(plastic.then_some(c));
        }
        Ok(ev)
    }

    fn solve_increment(
        &self,
        u: &mut [f64],
        committed: &[PointState],
        props: &MaterialProps,
        opts: &SolverOptions,
    ) -> Result<(Evaluated, Vec<f64>)> {
        let mut history = Vec::new();
        let mut r0 = None;
        for _ in 0..=opts.max_iterations {
            let ev = self.evaluate(u, committed, props)?;
            let f = self.internal_force(u, &ev.strains, &ev.stresses);
            let r = -self.basis.restrict(&f);
            let norm = r.norm();
            history.push(norm);
            if !norm.is_finite() {
                break;
            }
            let r_init = *r0.get_or_insert(norm);
            if norm <= opts.abs_tol || norm <= opts.rel_tol * r_init {
                return Ok((ev, history));
            }
            if history.len() > 3 && norm > 1e3 * r_init {
                break;
            }
            let chol = self
                .reduced_tangent(&ev.tangents)
                .cholesky()
                .ok_or_else(|| Error::Singular("reduced tangent is not positive definite".into()))?;
            let du = self.basis.prolong(&chol.solve(&r));
            u.iter_mut().zip(&du).for_each(|(a, b)| *a += b);
        }
        Err(Error::Divergence {
            step: 0,
            residuals: history,
        })
    }

    fn expand(&self, step: usize, t: f64, load: &MacroLoad, u: &[f64], ev: Evaluated, residuals: Vec<f64>) -> RomStep {
        let n_ip = self.model.n_elements() * GAUSS_POINTS;
        let mut states = Vec::with_capacity(n_ip);
        let mut stress = Vec::with_capacity(n_ip);
        for &c in &self.clustering.assignment {
            for _ in 0..GAUSS_POINTS {
                states.push(ev.states[c]);
                stress.push(ev.stresses[c]);
            }
        }
        RomStep {
            fields: StepFields {
                step,
                t,
                macro_strain: load.strain_at(t),
                displacement: u.to_vec(),
                states,
                stress,
                residuals,
            },
            cluster_strain: ev.strains,
            cluster_stress: ev.stresses,
            cluster_states: ev.states,
        }
    }

    /// Incremental reduced Newton solve of the undamaged problem; `observer`
    /// receives every converged load step.
    pub fn solve_with(
        &self,
        props: &MaterialProps,
        load: &MacroLoad,
        opts: &SolverOptions,
        mut observer: impl FnMut(&RomStep) -> Result<()>,
    ) -> Result<()> {
        load.validate()?;
        let mut states = vec![PointState::default(); self.clustering.k];
        let mut u = vec![0.0; self.model.n_dofs()];
        let dt_full = 1.0 / load.n_steps as f64;
        let mut t = 0.0;
        for step in 1..=load.n_steps {
            let t_end = step as f64 * dt_full;
            let mut dt = dt_full;
            let mut halvings = 0;
            let mut last = None;
            while t < t_end - 1e-12 * dt_full {
                let t_next = (t + dt).min(t_end);
                let mut u_try = u.clone();
                let dg = load.gradient_at(t_next) - load.gradient_at(t);
                for (a, x) in self.model.coords.iter().enumerate() {
                    let du = dg * x;
                    for c in 0..3 {
                        u_try[3 * a + c] += du[c];
                    }
                }
                match self.solve_increment(&mut u_try, &states, props, opts) {
                    Ok((ev, history)) => {
                        u = u_try;
                        states = ev.states.clone();
                        t = t_next;
                        last = Some((ev, history));
                    }
                    Err(
                        err @ (Error::Divergence { .. } | Error::Constitutive(_) | Error::Singular(_)),
                    ) => {
                        if halvings >= opts.max_halvings {
                            return Err(match err {
                                Error::Divergence { residuals, .. } => {
                                    Error::Divergence { step, residuals }
                                }
                                other => other,
                            });
                        }
                        halvings += 1;
                        dt *= 0.5;
                    }
                    Err(e) => return Err(e),
                }
            }
            t = t_end;
            let (ev, history) = last.expect("at least one increment per step");
            observer(&self.expand(step, t, load, &u, ev, history))?;
        }
        Ok(())
    }

    /// RPIM estimate of each cluster centroid's displacement from the
    /// cluster's nodes nearest to the centroid.
    pub fn centroid_displacements(&self, u: &[f64], config: &RpimConfig) -> Result<Vec<Vector3<f64>>> {
        let mut nodes: Vec<Vec<usize>> = vec![Vec::new(); self.clustering.k];
        for (a, &c) in self.basis.node_cluster.iter().enumerate() {
            nodes[c].push(a);
        }
        nodes
            .iter_mut()
            .enumerate()
            .map(|(c, list)| {
                let x0 = self.clustering.centroids[c];
                let coords = &self.model.coords;
                list.sort_by(|&a, &b| {
                    (coords[a] - x0).norm_squared().total_cmp(&(coords[b] - x0).norm_squared())
                });
                let cloud: Vec<_> = list
                    .iter()
                    .take(config.max_nodes.max(4))
                    .map(|&a| (coords[a], Vector3::new(u[3 * a], u[3 * a + 1], u[3 * a + 2])))
                    .collect();
                rpim_centroid_displacement(&cloud, &x0, config)
            })
            .collect()
    }
}

/// Response curves of one reduced solve post-processed for several damage
/// parameter sets.
pub fn run_rom_multi(
    model: &VoxelModel,
    clustering: &Clustering,
    props: &MaterialProps,
    damage: &[DamageParams],
    load: &MacroLoad,
    opts: &SolverOptions,
) -> Result<Vec<ResponseCurve>> {
    for d in damage {
        d.validate()?;
    }
    let system = RomSystem::new(model, clustering, props)?;
    let mut records = vec![vec![ResponseRecord::ORIGIN]; damage.len()];
    system.solve_with(props, load, opts, |step| {
        for (d, rec) in damage.iter().zip(records.iter_mut()) {
            let (_, m) = stabilized_damage_post(model, &step.fields, d)?;
            rec.push(ResponseRecord::from_state(&m));
        }
        Ok(())
    })?;
    records.iter().map(|r| extract_responses(r)).collect()
}

/// Reduced-order counterpart of [`crate::rve_solver::run_dns`].
pub fn solve_rom_damage(
    mesh: &VoxelMesh,
    clustering: &Clustering,
    props: &MaterialProps,
    damage: &DamageParams,
    load: &MacroLoad,
) -> Result<ResponseCurve> {
    mesh.check_connected()?;
    let model = VoxelModel::new(mesh)?;
    let mut curves = run_rom_multi(&model, clustering, props, &[*damage], load, &SolverOptions::default())?;
    Ok(curves.remove(0))
}
