//! Isotropic elasticity, J2 plasticity with piecewise-linear isotropic
//! hardening, and the scalar damage law.
//!
//! Voigt order is (11, 22, 33, 12, 13, 23). Strain vectors carry engineering
//! shear (γ = 2ε); stress vectors carry tensor components.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Voigt = Vector6<f64>;
pub type Tangent = Matrix6<f64>;

const MAX_RETURN_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialProps {
    pub young: f64,
    pub poisson: f64,
    /// (equivalent plastic strain, yield stress) pairs.
    pub hardening: Vec<(f64, f64)>,
}

impl Default for MaterialProps {
    fn default() -> Self {
        MaterialProps {
            young: 5.7e4,
            poisson: 0.33,
            hardening: vec![(0.0, 170.0), (0.02, 230.0), (0.10, 280.0)],
        }
    }
}

impl MaterialProps {
    pub fn validate(&self) -> Result<()> {
        if !(self.young > 0.0 && self.young.is_finite()) {
            return Err(Error::InvalidMaterial(format!(
                "young must be positive, got {}",
                self.young
            )));
        }
        if (self.poisson - 0.5).abs() < 1e-6 {
            return Err(Error::Incompressible(self.poisson));
        }
        if !(0.0..0.5).contains(&self.poisson) {
            return Err(Error::InvalidMaterial(format!(
                "poisson must lie in [0, 0.5), got {}",
                self.poisson
            )));
        }
        let h = &self.hardening;
        match h.first() {
            Some(&(e0, s0)) if e0 == 0.0 && s0 > 0.0 => {}
            _ => {
                return Err(Error::InvalidMaterial(
                    "hardening table must start at strain 0 with positive stress".into(),
                ))
            }
        }
        for w in h.windows(2) {
            if !(w[1].0 > w[0].0) || w[1].1 < w[0].1 {
                return Err(Error::InvalidMaterial(format!(
                    "hardening table not monotone at {:?} -> {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    /// Lamé constants (λ, μ).
    pub fn lame(&self) -> (f64, f64) {
        let (y, nu) = (self.young, self.poisson);
        (y * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), y / (2.0 * (1.0 + nu)))
    }

    pub fn bulk(&self) -> f64 {
        let (l, m) = self.lame();
        l + 2.0 * m / 3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DamageParams {
    pub e_cr: f64,
    pub alpha: f64,
}

impl Default for DamageParams {
    fn default() -> Self {
        DamageParams {
            e_cr: 0.03,
            alpha: 100.0,
        }
    }
}

impl DamageParams {
    pub fn new(e_cr: f64, alpha: f64) -> Self {
        DamageParams { e_cr, alpha }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e_cr > 0.0 && self.alpha > 0.0) {
            return Err(Error::InvalidMaterial(format!(
                "damage parameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PointState {
    /// Plastic strain, engineering shear.
    pub eps_pl: Voigt,
    pub eq_pl: f64,
    pub damage: f64,
}

/// Volumetric projector m mᵀ and deviatoric projector in strain-to-stress form.
fn projectors() -> (Tangent, Tangent) {
    let mut vol = Tangent::zeros();
    let mut dev = Tangent::zeros();
    for i in 0..3 {
        for j in 0..3 {
            vol[(i, j)] = 1.0;
            dev[(i, j)] = if i == j { 2.0 / 3.0 } else { -1.0 / 3.0 };
        }
        dev[(i + 3, i + 3)] = 0.5;
    }
    (vol, dev)
}

pub fn elastic_tangent(props: &MaterialProps) -> Result<Tangent> {
    props.validate()?;
    let (_, mu) = props.lame();
    let (vol, dev) = projectors();
    Ok(vol * props.bulk() + dev * (2.0 * mu))
}

/// Linear interpolation of the hardening table, clamped beyond its end.
pub fn yield_stress(eq_pl: f64, props: &MaterialProps) -> f64 {
    hardening_at(eq_pl, &props.hardening).0
}

/// (yield stress, slope) at `eq_pl`. The slope is the right derivative, zero
/// beyond the table.
fn hardening_at(eq_pl: f64, table: &[(f64, f64)]) -> (f64, f64) {
    for w in table.windows(2) {
        let ((e0, s0), (e1, s1)) = (w[0], w[1]);
        if eq_pl < e1 {
            let slope = (s1 - s0) / (e1 - e0);
            return (s0 + slope * (eq_pl.max(e0) - e0), slope);
        }
    }
    (table.last().map_or(0.0, |p| p.1), 0.0)
}

pub fn mises(stress: &Voigt) -> f64 {
    let s = stress;
    (0.5 * ((s[0] - s[1]).powi(2) + (s[1] - s[2]).powi(2) + (s[2] - s[0]).powi(2))
        + 3.0 * (s[3] * s[3] + s[4] * s[4] + s[5] * s[5]))
        .sqrt()
}

pub fn deviator(stress: &Voigt) -> Voigt {
    let p = (stress[0] + stress[1] + stress[2]) / 3.0;
    let mut s = *stress;
    for i in 0..3 {
        s[i] -= p;
    }
    s
}

/// Tensor norm √(s:s) of a stress-like Voigt vector.
fn stress_norm(s: &Voigt) -> f64 {
    (s[0] * s[0] + s[1] * s[1] + s[2] * s[2] + 2.0 * (s[3] * s[3] + s[4] * s[4] + s[5] * s[5]))
        .sqrt()
}

/// Radial return for J2 plasticity with isotropic hardening.
///
/// Returns the stress, the updated state (damage untouched) and the
/// algorithmic tangent.
pub fn j2_return_map(
    state: &PointState,
    strain: &Voigt,
    props: &MaterialProps,
) -> Result<(Voigt, PointState, Tangent)> {
    let c_el = elastic_tangent(props)?;
    let (_, mu) = props.lame();
    let trial = c_el * (strain - state.eps_pl);
    let s_tr = deviator(&trial);
    let q_tr = mises(&trial);
    let (sy0, _) = hardening_at(state.eq_pl, &props.hardening);
    if q_tr <= sy0 {
        return Ok((trial, *state, c_el));
    }

    // f(Δγ) = q_tr − 3μΔγ − S_Y(ē + Δγ) is strictly decreasing; safeguarded
    // Newton inside the bracket [0, q_tr / 3μ].
    let f = |dg: f64| {
        let (sy, h) = hardening_at(state.eq_pl + dg, &props.hardening);
        (q_tr - 3.0 * mu * dg - sy, 3.0 * mu + h)
    };
    let (mut lo, mut hi) = (0.0, q_tr / (3.0 * mu));
    let mut dg = 0.0;
    let tol = 1e-13 * q_tr;
    let mut converged = false;
    for _ in 0..MAX_RETURN_ITERATIONS {
        let (r, slope) = f(dg);
        if r.abs() <= tol {
            converged = true;
            break;
        }
        if r > 0.0 {
            lo = dg;
        } else {
            hi = dg;
        }
        let next = dg + r / slope;
        dg = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
    }
    if !converged {
        return Err(Error::Constitutive(format!(
            "radial return did not converge in {MAX_RETURN_ITERATIONS} iterations (trial mises {q_tr})"
        )));
    }

    let (_, h) = hardening_at(state.eq_pl + dg, &props.hardening);
    let s_norm = stress_norm(&s_tr);
    let n = s_tr / s_norm;
    let scale = 1.0 - 3.0 * mu * dg / q_tr;
    let p = (trial[0] + trial[1] + trial[2]) / 3.0;
    let mut stress = s_tr * scale;
    for i in 0..3 {
        stress[i] += p;
    }

    // Δε_pl = Δγ (3/2) s/q = Δγ √(3/2) n, shear entries doubled for Voigt
    let mut d_pl = n * (dg * 1.5f64.sqrt());
    for i in 3..6 {
        d_pl[i] *= 2.0;
    }
    let new_state = PointState {
        eps_pl: state.eps_pl + d_pl,
        eq_pl: state.eq_pl + dg,
        damage: state.damage,
    };

    let (vol, dev) = projectors();
    let theta_bar = 1.0 / (1.0 + h / (3.0 * mu)) - (1.0 - scale);
    let tangent = vol * props.bulk() + dev * (2.0 * mu * scale)
        - (n * n.transpose()) * (2.0 * mu * theta_bar);
    Ok((stress, new_state, tangent))
}

/// Damage from equivalent plastic strain, zero up to the critical strain and
/// clamped to [0, 1].
pub fn damage_value(eq_pl: f64, params: &DamageParams) -> f64 {
    if eq_pl <= params.e_cr {
        return 0.0;
    }
    let d = 1.0 - (params.e_cr / eq_pl) * (-params.alpha * (eq_pl - params.e_cr)).exp();
    d.clamp(0.0, 1.0)
}
