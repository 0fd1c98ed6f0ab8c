//! Porous RVE geometry: descriptor sampling, ellipsoid-based reconstruction,
//! voxelization and descriptor measurement.

mod reconstruct;
mod voxel;

pub use reconstruct::{lattice_spacing, reconstruct, ReconstructionConfig};
pub use voxel::{voxelize, VoxelMesh};

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sobol::SobolSequence;

/// The four pore morphology descriptors. `rd` is a fraction of the RVE side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RveDescriptors {
    pub vf: f64,
    pub np: usize,
    pub ar: f64,
    pub rd: f64,
}

impl RveDescriptors {
    pub fn new(vf: f64, np: usize, ar: f64, rd: f64) -> Self {
        RveDescriptors { vf, np, ar, rd }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.vf, self.np as f64, self.ar, self.rd]
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn scale(&self, u: f64) -> f64 {
        self.lo + u * (self.hi - self.lo)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) {
            return Err(Error::Config(format!(
                "bounds for {name}: lower {} must be below upper {}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorBounds {
    pub vf: Range,
    pub np: Range,
    pub ar: Range,
    pub rd: Range,
}

impl Default for DescriptorBounds {
    fn default() -> Self {
        DescriptorBounds {
            vf: Range::new(0.01, 0.20),
            np: Range::new(10.0, 100.0),
            ar: Range::new(1.0, 5.0),
            rd: Range::new(0.1, 0.5),
        }
    }
}

impl DescriptorBounds {
    pub fn validate(&self) -> Result<()> {
        self.vf.validate("vf")?;
        self.np.validate("np")?;
        self.ar.validate("ar")?;
        self.rd.validate("rd")?;
        if self.vf.lo < 0.0 || self.vf.hi >= 1.0 || self.np.lo < 1.0 || self.ar.lo < 1.0 {
            return Err(Error::Config(
                "descriptor bounds outside the physical domain".into(),
            ));
        }
        Ok(())
    }

    pub fn ranges(&self) -> [Range; 4] {
        [self.vf, self.np, self.ar, self.rd]
    }

    pub fn contains(&self, d: &RveDescriptors) -> bool {
        self.vf.contains(d.vf)
            && self.np.contains(d.np as f64)
            && self.ar.contains(d.ar)
            && self.rd.contains(d.rd)
    }

    /// Map a point of the unit hypercube onto the bounds; `np` is rounded.
    pub fn scale_unit(&self, u: &[f64]) -> RveDescriptors {
        RveDescriptors {
            vf: self.vf.scale(u[0]),
            np: self.np.scale(u[1]).round() as usize,
            ar: self.ar.scale(u[2]),
            rd: self.rd.scale(u[3]),
        }
    }
}

/// Sobol design over the descriptor box.
pub fn sample_descriptors(
    n: usize,
    bounds: &DescriptorBounds,
    seed: u64,
) -> Result<Vec<RveDescriptors>> {
    bounds.validate()?;
    let mut seq = SobolSequence::new(4, seed);
    Ok((0..n)
        .map(|_| bounds.scale_unit(&seq.next_point()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vector3<f64>,
    /// Body-frame semiaxes `[major, minor, minor]`.
    pub semiaxes: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Ellipsoid {
    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        Ellipsoid {
            center,
            semiaxes: Vector3::repeat(radius),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let local = self.orientation.inverse_transform_vector(&(p - self.center));
        let q = local.component_div(&self.semiaxes);
        q.norm_squared() <= 1.0
    }

    /// Half-extents of the axis-aligned bounding box.
    pub fn half_extents(&self) -> Vector3<f64> {
        let r = self.orientation.to_rotation_matrix();
        let m = r.matrix();
        Vector3::from_fn(|i, _| {
            (0..3)
                .map(|j| (m[(i, j)] * self.semiaxes[j]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.semiaxes.max() / self.semiaxes.min()
    }

    pub fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semiaxes.product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoreSet {
    pub ellipsoids: Vec<Ellipsoid>,
    pub rve_side: f64,
}

impl PoreSet {
    pub fn empty(rve_side: f64) -> Self {
        PoreSet {
            ellipsoids: Vec::new(),
            rve_side,
        }
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.ellipsoids.iter().map(|e| e.center).collect()
    }
}

/// Mean distance from each center to its nearest other center.
pub fn mean_nearest_distance(centers: &[Vector3<f64>]) -> Option<f64> {
    if centers.len() < 2 {
        return None;
    }
    let total: f64 = centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            centers
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, o)| (c - o).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Some(total / centers.len() as f64)
}

/// Measured descriptors of a voxelized pore set; `rd` is reported as a
/// fraction of the side length.
pub fn measure_descriptors(mesh: &VoxelMesh, pores: &PoreSet) -> Result<RveDescriptors> {
    let np = pores.ellipsoids.len();
    let vf = mesh.pore_fraction();
    if np == 0 {
        return Ok(RveDescriptors {
            vf,
            np: 0,
            ar: 1.0,
            rd: 0.0,
        });
    }
    if np < 2 {
        return Err(Error::UndefinedDescriptor(format!(
            "mean nearest-neighbor distance needs at least 2 pores, got {np}"
        )));
    }
    let ar = pores.ellipsoids.iter().map(Ellipsoid::aspect_ratio).sum::<f64>() / np as f64;
    let rd = mean_nearest_distance(&pores.centers()).unwrap_or(0.0) / pores.rve_side;
    Ok(RveDescriptors { vf, np, ar, rd })
}

/// Descriptor file rows: `vf,np,ar,rd,seed`.
pub fn write_descriptor_csv<W: std::io::Write>(
    mut w: W,
    rows: &[(RveDescriptors, u64)],
) -> Result<()> {
    writeln!(w, "vf,np,ar,rd,seed")?;
    for (d, seed) in rows {
        writeln!(w, "{},{},{},{},{}", d.vf, d.np, d.ar, d.rd, seed)?;
    }
    Ok(())
}

pub fn read_descriptor_csv(text: &str) -> Result<Vec<(RveDescriptors, u64)>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "vf,np,ar,rd,seed" => {}
        other => {
            return Err(Error::Format(format!(
                "descriptor header mismatch: {other:?}"
            )))
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Format(format!("descriptor row {}: {line:?}", i + 1));
            if f.len() != 5 {
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
                f[4].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_request_gives_empty_list() {
        let v = sample_descriptors(0, &DescriptorBounds::default(), 0).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn first_point_is_box_center() {
        let v = sample_descriptors(1, &DescriptorBounds::default(), 0).unwrap();
        let d = v[0];
        assert!((d.vf - 0.105).abs() < 1e-15);
        assert_eq!(d.np, 55);
        assert!((d.ar - 3.0).abs() < 1e-15);
        assert!((d.rd - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let b = DescriptorBounds::default();
        let a = sample_descriptors(64, &b, 3).unwrap();
        assert_eq!(a, sample_descriptors(64, &b, 3).unwrap());
        assert!(a.iter().all(|d| b.contains(d)));
    }

    #[test]
    fn invalid_bounds_rejected() {
        let mut b = DescriptorBounds::default();
        b.ar = Range::new(3.0, 2.0);
        assert!(matches!(sample_descriptors(4, &b, 0), Err(Error::Config(_))));
    }

    #[test]
    fn two_pores_rd_is_their_distance() {
        let pores = PoreSet {
            ellipsoids: vec![
                Ellipsoid::sphere(Vector3::new(0.2, 0.5, 0.5), 0.05),
                Ellipsoid::sphere(Vector3::new(0.7, 0.5, 0.5), 0.05),
            ],
            rve_side: 1.0,
        };
        let mesh = voxelize(&pores, 16).unwrap();
        let d = measure_descriptors(&mesh, &pores).unwrap();
        assert_eq!(d.np, 2);
        assert!((d.rd - 0.5).abs() < 1e-12);
        assert!((d.ar - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_pore_set_measures_zero() {
        let pores = PoreSet::empty(1.0);
        let mesh = voxelize(&pores, 8).unwrap();
        let d = measure_descriptors(&mesh, &pores).unwrap();
        assert_eq!(d.vf, 0.0);
        assert_eq!(d.np, 0);
    }

    #[test]
    fn single_pore_rd_undefined() {
        let pores = PoreSet {
            ellipsoids: vec![Ellipsoid::sphere(Vector3::repeat(0.5), 0.1)],
            rve_side: 1.0,
        };
        let mesh = voxelize(&pores, 8).unwrap();
        assert!(matches!(
            measure_descriptors(&mesh, &pores),
            Err(Error::UndefinedDescriptor(_))
        ));
    }

    #[test]
    fn descriptor_csv_round_trip() {
        let rows = vec![(RveDescriptors::new(0.0656, 26, 1.31, 0.233), 11u64)];
        let mut buf = Vec::new();
        write_descriptor_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("vf,np,ar,rd,seed\n"));
        assert_eq!(read_descriptor_csv(&text).unwrap(), rows);
    }
}
