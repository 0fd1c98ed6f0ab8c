//! Direct numerical simulation of a voxel RVE under affine boundary
//! displacements, with the stabilized damage post-processing and response
//! extraction.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{strain_from_gradient, DofSplit, FreeSystem, VoxelModel, GAUSS_POINTS};
use crate::material::{
    damage_value, elastic_tangent, j2_return_map, DamageParams, MaterialProps, PointState, Tangent,
    Voigt,
};
use crate::microstructure::VoxelMesh;
use crate::util::trapezoid;

/// Proportional loading `F(t) = I + t (F − I)` in `n_steps` equal increments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroLoad {
    pub f_target: Matrix3<f64>,
    pub n_steps: usize,
}

impl MacroLoad {
    pub fn new(f_target: Matrix3<f64>, n_steps: usize) -> Result<Self> {
        let load = MacroLoad { f_target, n_steps };
        load.validate()?;
        Ok(load)
    }

    /// 10% axial stretch with 5% lateral contraction.
    pub fn uniaxial_stretch(n_steps: usize) -> Self {
        MacroLoad {
            f_target: Matrix3::from_diagonal(&nalgebra::Vector3::new(1.1, 0.95, 0.95)),
            n_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_target.determinant() > 0.0) {
            return Err(Error::Config(format!(
                "deformation gradient must have positive determinant, got {}",
                self.f_target.determinant()
            )));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("load needs at least one step".into()));
        }
        Ok(())
    }

    /// Displacement gradient F(t) − I.
    pub fn gradient_at(&self, t: f64) -> Matrix3<f64> {
        (self.f_target - Matrix3::identity()) * t
    }

    pub fn strain_at(&self, t: f64) -> Voigt {
        strain_from_gradient(&self.gradient_at(t))
    }
}

impl Default for MacroLoad {
    fn default() -> Self {
        Self::uniaxial_stretch(50)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            rel_tol: 1e-8,
            abs_tol: 1e-12,
            max_iterations: 25,
            max_halvings: 5,
        }
    }
}

/// Prescribed displacement `(F − I) X` for every dof of every boundary node.
pub fn apply_macro_bc(model: &VoxelModel, f: &Matrix3<f64>) -> Result<Vec<(usize, f64)>> {
    if !(f.determinant() > 0.0) {
        return Err(Error::Config(
            "deformation gradient must have positive determinant".into(),
        ));
    }
    let g = f - Matrix3::identity();
    Ok((0..model.n_nodes())
        .filter(|&a| model.on_boundary[a])
        .flat_map(|a| {
            let u = g * model.coords[a];
            (0..3).map(move |c| (3 * a + c, u[c]))
        })
        .collect())
}

/// Converged fields of the first reference RVE at one load step. Integration
/// point `g` of element `e` is stored at `e * 8 + g`.
#[derive(Debug, Clone)]
pub struct StepFields {
    pub step: usize,
    pub t: f64,
    pub macro_strain: Voigt,
    pub displacement: Vec<f64>,
    pub states: Vec<PointState>,
    pub stress: Vec<Voigt>,
    pub residuals: Vec<f64>,
}

/// Homogenized state at one load step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroState {
    pub s1: Voigt,
    pub sd: Voigt,
    pub e_m: Voigt,
    pub d_macro: f64,
}

/// Double contraction of two stress-like Voigt vectors.
pub fn contract(a: &Voigt, b: &Voigt) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + 2.0 * (a[3] * b[3] + a[4] * b[4] + a[5] * b[5])
}

/// Macro damage from the homogenized damaged and undamaged stresses.
pub fn macro_damage(sd: &Voigt, s1: &Voigt) -> Option<f64> {
    let den = contract(s1, s1);
    if den == 0.0 {
        return None;
    }
    Some((1.0 - contract(sd, s1).abs() / den).clamp(0.0, 1.0))
}

struct Newton<'a> {
    model: &'a VoxelModel,
    props: &'a MaterialProps,
    c_el: Tangent,
    k_el: crate::fem::ElementMatrix,
    split: DofSplit,
    system: FreeSystem,
    opts: SolverOptions,
}

struct Trial {
    states: Vec<PointState>,
    stress: Vec<Voigt>,
    tangents: Vec<Option<Tangent>>,
}

impl Newton<'_> {
    /// Constitutive update at every integration point from the committed
    /// states; `None` tangent marks an elastic point.
    fn evaluate(&self, u: &[f64], committed: &[PointState]) -> Result<Trial> {
        let n_ip = self.model.n_elements() * GAUSS_POINTS;
        let mut trial = Trial {
            states: Vec::with_capacity(n_ip),
            stress: Vec::with_capacity(n_ip),
            tangents: Vec::with_capacity(n_ip),
        };
        for e in 0..self.model.n_elements() {
            let ue = self.model.gather(e, u);
            for (g, b) in self.model.b.iter().enumerate() {
                let old = &committed[e * GAUSS_POINTS + g];
                let (s, st, c) = j2_return_map(old, &(b * ue), self.props)?;
                let plastic = st.eq_pl > old.eq_pl;
                trial.states.push(st);
                trial.stress.push(s);
                trial.tangents.push(plastic.then_some(c));
            }
        }
        Ok(trial)
    }

    fn internal_force(&self, trial: &Trial) -> Vec<f64> {
        let mut f = vec![0.0; self.model.n_dofs()];
        for e in 0..self.model.n_elements() {
            let fe = self.model.b.iter().enumerate().fold(
                crate::fem::ElementVector::zeros(),
                |acc, (g, b)| acc + b.transpose() * trial.stress[e * GAUSS_POINTS + g],
            ) * self.model.gp_weight;
            self.model.scatter_add(e, &fe, &mut f);
        }
        f
    }

    fn assemble_tangent(&self, trial: &Trial) -> Vec<f64> {
        let mut vals = self.system.zero_values();
        for e in 0..self.model.n_elements() {
            let ts = &trial.tangents[e * GAUSS_POINTS..(e + 1) * GAUSS_POINTS];
            if ts.iter().all(Option::is_none) {
                self.system.add_element(&mut vals, e, &self.k_el);
                continue;
            }
            let ke = self.model.b.iter().zip(ts).fold(
                crate::fem::ElementMatrix::zeros(),
                |k, (b, c)| k + b.transpose() * c.as_ref().unwrap_or(&self.c_el) * b,
            ) * self.model.gp_weight;
            self.system.add_element(&mut vals, e, &ke);
        }
        vals
    }

    /// Newton iterations from `u` (already carrying the new boundary values).
    fn solve_increment(
        &mut self,
        u: &mut [f64],
        committed: &[PointState],
    ) -> Result<(Trial, Vec<f64>)> {
        let mut history = Vec::new();
        let mut r0 = None;
        for _ in 0..=self.opts.max_iterations {
            let trial = self.evaluate(u, committed)?;
            let f = self.internal_force(&trial);
            let mut r: Vec<f64> = self.split.free.iter().map(|&d| -f[d]).collect();
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            history.push(norm);
            if !norm.is_finite() {
                break;
            }
            let r_init = *r0.get_or_insert(norm);
            if norm <= self.opts.abs_tol || norm <= self.opts.rel_tol * r_init {
                return Ok((trial, history));
            }
            if history.len() > 3 && norm > 1e3 * r_init {
                break;
            }
            let vals = self.assemble_tangent(&trial);
            self.system.factorize(&vals)?;
            self.system.chol.solve(&mut r);
            for (i, &d) in self.split.free.iter().enumerate() {
                u[d] += r[i];
            }
        }
        Err(Error::Divergence {
            step: 0,
            residuals: history,
        })
    }
}

/// Incremental Newton solve of the undamaged elasto-plastic RVE. `observer`
/// receives the converged fields after every full load step.
pub fn solve_reference_rve_with(
    model: &VoxelModel,
    props: &MaterialProps,
    load: &MacroLoad,
    opts: &SolverOptions,
    mut observer: impl FnMut(&StepFields) -> Result<()>,
) -> Result<()> {
    load.validate()?;
    let c_el = elastic_tangent(props)?;
    let split = DofSplit::boundary(model);
    let system = FreeSystem::new(model, &split)?;
    let mut newton = Newton {
        model,
        props,
        c_el,
        k_el: model.element_stiffness(&c_el),
        split,
        system,
        opts: *opts,
    };
    let n_ip = model.n_elements() * GAUSS_POINTS;
    let mut states = vec![PointState::default(); n_ip];
    let mut u = vec![0.0; model.n_dofs()];
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
            // affine predictor on every node; boundary values become exact
            let dg = load.gradient_at(t_next) - load.gradient_at(t);
            for (a, x) in model.coords.iter().enumerate() {
                let du = dg * x;
                for c in 0..3 {
                    u_try[3 * a + c] += du[c];
                }
            }
            match newton.solve_increment(&mut u_try, &states) {
                Ok((trial, history)) => {
                    u = u_try;
                    states = trial.states;
                    t = t_next;
                    last = Some((trial.stress, history));
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
        let (stress, residuals) = last.expect("at least one increment per step");
        observer(&StepFields {
            step,
            t,
            macro_strain: load.strain_at(t),
            displacement: u.clone(),
            states: states.clone(),
            stress,
            residuals,
        })?;
    }
    Ok(())
}

/// Collecting variant of [`solve_reference_rve_with`]; keeps every step in
/// memory, intended for small meshes.
pub fn solve_reference_rve(
    model: &VoxelModel,
    props: &MaterialProps,
    load: &MacroLoad,
) -> Result<Vec<StepFields>> {
    let mut out = Vec::with_capacity(load.n_steps);
    solve_reference_rve_with(model, props, load, &SolverOptions::default(), |f| {
        out.push(f.clone());
        Ok(())
    })?;
    Ok(out)
}

/// Volume average over |Ω| of an integration-point field.
pub fn volume_average(model: &VoxelModel, field: &[Voigt]) -> Voigt {
    field.iter().fold(Voigt::zeros(), |acc, s| acc + s) * (model.gp_weight / model.volume())
}

/// Pointwise damaged stress `(1 − D_m) S¹` and the homogenized state.
pub fn stabilized_damage_post(
    model: &VoxelModel,
    fields: &StepFields,
    params: &DamageParams,
) -> Result<(Vec<Voigt>, MacroState)> {
    let s3: Vec<Voigt> = fields
        .stress
        .iter()
        .zip(&fields.states)
        .map(|(s, st)| s * (1.0 - damage_value(st.eq_pl, params)))
        .collect();
    let s1 = volume_average(model, &fields.stress);
    let sd = volume_average(model, &s3);
    let d_macro = match macro_damage(&sd, &s1) {
        Some(d) => d,
        None if fields.macro_strain.norm() == 0.0 => 0.0,
        None => {
            return Err(Error::DegenerateState(format!(
                "homogenized undamaged stress vanishes at step {} under nonzero load",
                fields.step
            )))
        }
    };
    Ok((
        s3,
        MacroState {
            s1,
            sd,
            e_m: fields.macro_strain,
            d_macro,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub strain: f64,
    pub stress_undamaged: f64,
    pub stress_damaged: f64,
    pub d_macro: f64,
}

impl ResponseRecord {
    pub const ORIGIN: ResponseRecord = ResponseRecord {
        strain: 0.0,
        stress_undamaged: 0.0,
        stress_damaged: 0.0,
        d_macro: 0.0,
    };

    /// Axial (1,1) components of a macro state.
    pub fn from_state(m: &MacroState) -> Self {
        ResponseRecord {
            strain: m.e_m[0],
            stress_undamaged: m.s1[0],
            stress_damaged: m.sd[0],
            d_macro: m.d_macro,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub records: Vec<ResponseRecord>,
    pub uts: f64,
    pub toughness: f64,
}

impl ResponseCurve {
    pub fn responses(&self) -> [f64; 2] {
        [self.uts, self.toughness]
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,strain,stress_undamaged,stress_damaged,d_macro")?;
        for (i, r) in self.records.iter().enumerate() {
            writeln!(
                w,
                "{i},{:?},{:?},{:?},{:?}",
                r.strain, r.stress_undamaged, r.stress_damaged, r.d_macro
            )?;
        }
        writeln!(w, "uts,toughness")?;
        writeln!(w, "{:?},{:?}", self.uts, self.toughness)?;
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("response curve: {m}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("step,strain,stress_undamaged,stress_damaged,d_macro")
        {
            return Err(bad("header mismatch"));
        }
        let mut records = Vec::new();
        for line in lines.by_ref() {
            if line.trim() == "uts,toughness" {
                break;
            }
            let f: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(line))?;
            if f.len() != 5 {
                return Err(bad(line));
            }
            records.push(ResponseRecord {
                strain: f[1],
                stress_undamaged: f[2],
                stress_damaged: f[3],
                d_macro: f[4],
            });
        }
        let summary = lines.next().ok_or_else(|| bad("missing summary"))?;
        let s: Vec<f64> = summary
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(summary))?;
        if s.len() != 2 {
            return Err(bad(summary));
        }
        Ok(ResponseCurve {
            records,
            uts: s[0],
            toughness: s[1],
        })
    }
}

/// UTS as the maximum damaged stress and toughness as its trapezoidal
/// integral over strain.
pub fn extract_responses(records: &[ResponseRecord]) -> Result<ResponseCurve> {
    if records.len() < 2 {
        return Err(Error::InsufficientHistory(records.len()));
    }
    if records.windows(2).any(|w| !(w[1].strain > w[0].strain)) {
        return Err(Error::DegenerateState(
            "effective strain must increase strictly along the curve".into(),
        ));
    }
    let strain: Vec<f64> = records.iter().map(|r| r.strain).collect();
    let stress: Vec<f64> = records.iter().map(|r| r.stress_damaged).collect();
    let uts = stress.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ResponseCurve {
        records: records.to_vec(),
        uts,
        toughness: trapezoid(&strain, &stress),
    })
}

/// Full DNS for several damage parameter sets sharing one elasto-plastic
/// solve (damage never feeds back into equilibrium).
pub fn run_dns_multi(
    model: &VoxelModel,
    props: &MaterialProps,
    damage: &[DamageParams],
    load: &MacroLoad,
    opts: &SolverOptions,
) -> Result<Vec<ResponseCurve>> {
    for d in damage {
        d.validate()?;
    }
    let mut records = vec![vec![ResponseRecord::ORIGIN]; damage.len()];
    solve_reference_rve_with(model, props, load, opts, |fields| {
        for (d, rec) in damage.iter().zip(records.iter_mut()) {
            let (_, m) = stabilized_damage_post(model, fields, d)?;
            rec.push(ResponseRecord::from_state(&m));
        }
        Ok(())
    })?;
    records.iter().map(|r| extract_responses(r)).collect()
}

pub fn run_dns(
    mesh: &VoxelMesh,
    props: &MaterialProps,
    damage: &DamageParams,
    load: &MacroLoad,
) -> Result<ResponseCurve> {
    mesh.check_connected()?;
    let model = VoxelModel::new(mesh)?;
    let mut curves = run_dns_multi(&model, props, &[*damage], load, &SolverOptions::default())?;
    Ok(curves.remove(0))
}
