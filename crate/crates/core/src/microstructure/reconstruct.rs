use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::voxel::voxelize_unchecked;
use super::{mean_nearest_distance, Ellipsoid, PoreSet, RveDescriptors};
use crate::error::{Error, Result};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructionConfig {
    /// Absolute tolerance on the voxelized volume fraction.
    pub tol_vf: f64,
    /// Tolerance on the mean nearest-neighbor distance, as a fraction of L.
    pub tol_rd: f64,
    pub max_attempts: usize,
    /// Voxel resolution used to measure the volume fraction.
    pub resolution: usize,
    pub side_length: f64,
    pub relax_iterations: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        ReconstructionConfig {
            tol_vf: 0.02,
            tol_rd: 0.1,
            max_attempts: 50,
            resolution: 24,
            side_length: 1.0,
            relax_iterations: 400,
        }
    }
}

/// Build `np` prolate ellipsoids matching the target descriptors.
///
/// Centers are relaxed toward the target mean nearest-neighbor distance, then
/// the common size is bisected until the voxelized volume fraction matches.
/// Attempts whose matrix phase is disconnected are discarded.
pub fn reconstruct(
    desc: &RveDescriptors,
    seed: u64,
    cfg: &ReconstructionConfig,
) -> Result<PoreSet> {
    if desc.np == 0 || desc.ar < 1.0 || !(0.0..1.0).contains(&desc.vf) || desc.rd <= 0.0 {
        return Err(Error::Config(format!("descriptors out of domain: {desc:?}")));
    }
    let side = cfg.side_length;
    let target_rd = desc.rd * side;
    let mut best: Option<(f64, RveDescriptors)> = None;
    let mut record = |score: f64, got: RveDescriptors| {
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, got));
        }
    };

    for attempt in 0..cfg.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, attempt as u64));
        // alternate uniform random starts with jittered lattice subsets, which
        // reach the wide spacings random starts jam below
        let mut centers: Vec<Vector3<f64>> = if attempt % 2 == 1 && desc.np >= 2 {
            lattice_start(desc.np, side, &mut rng)
        } else {
            (0..desc.np)
                .map(|_| Vector3::from_fn(|_, _| rng.random::<f64>() * side))
                .collect()
        };
        let rd_got = if desc.np >= 2 {
            relax_centers(&mut centers, target_rd, side, cfg, &mut rng) / side
        } else {
            desc.rd
        };
        let rd_err = (rd_got - desc.rd).abs();
        if rd_err > cfg.tol_rd {
            record(
                rd_err / cfg.tol_rd + 1.0,
                RveDescriptors { vf: f64::NAN, rd: rd_got, ..*desc },
            );
            continue;
        }

        let orientations: Vec<UnitQuaternion<f64>> =
            (0..desc.np).map(|_| random_rotation(&mut rng)).collect();
        let build = |minor: f64| PoreSet {
            ellipsoids: centers
                .iter()
                .zip(&orientations)
                .map(|(c, q)| Ellipsoid {
                    center: *c,
                    semiaxes: Vector3::new(desc.ar * minor, minor, minor),
                    orientation: *q,
                })
                .collect(),
            rve_side: side,
        };
        let (minor, vf_got) = fit_size(desc, cfg, &build)?;
        let pores = build(minor);
        let mesh = voxelize_unchecked(&pores, cfg.resolution)?;
        let vf_err = (vf_got - desc.vf).abs();
        let got = RveDescriptors { vf: vf_got, rd: rd_got, ..*desc };
        if vf_err > cfg.tol_vf {
            record(vf_err / cfg.tol_vf + rd_err / cfg.tol_rd, got);
            continue;
        }
        if mesh.check_connected().is_err() {
            record(1.0 + vf_err / cfg.tol_vf, got);
            continue;
        }
        return Ok(pores);
    }
    let best = best.map(|(_, d)| d).unwrap_or(*desc);
    Err(Error::ReconstructionInfeasible {
        attempts: cfg.max_attempts,
        reason: format!("target {desc:?} not met within tolerances"),
        best,
    })
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let q = Quaternion::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    );
    UnitQuaternion::from_quaternion(q)
}

/// Move every center along the line to its nearest neighbor so that its
/// nearest distance approaches the target; returns the best achieved mean
/// and leaves `centers` at that configuration.
fn relax_centers(
    centers: &mut [Vector3<f64>],
    target: f64,
    side: f64,
    cfg: &ReconstructionConfig,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let n = centers.len();
    let mut best = centers.to_vec();
    let mut best_mean = mean_nearest_distance(centers).unwrap_or(0.0);
    let goal = 0.25 * cfg.tol_rd * side;
    for it in 0..cfg.relax_iterations {
        if (best_mean - target).abs() <= goal {
            break;
        }
        let step = 0.5 * (1.0 - it as f64 / cfg.relax_iterations as f64).max(0.1);
        let snapshot = centers.to_vec();
        for i in 0..n {
            let (j, d) = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, (snapshot[i] - snapshot[j]).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            let dir = if d > 1e-12 * side {
                (snapshot[i] - snapshot[j]) / d
            } else {
                Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize()
            };
            let moved = snapshot[i] + dir * (step * 0.5 * (target - d));
            centers[i] = moved.map(|x| x.clamp(0.0, side));
        }
        let mean = mean_nearest_distance(centers).unwrap_or(0.0);
        if (mean - target).abs() < (best_mean - target).abs() {
            best_mean = mean;
            best.copy_from_slice(centers);
        }
    }
    centers.copy_from_slice(&best);
    best_mean
}

/// Sites of a face-centered or body-centered cubic lattice filling the cube,
/// the densest regular arrangement with at least `n` sites being preferred.
fn lattice_sites(n: usize, side: f64) -> (f64, Vec<Vector3<f64>>) {
    let mut best: Option<(f64, Vec<Vector3<f64>>)> = None;
    for m in 1..=6usize {
        let h = side / m as f64;
        let corners: Vec<Vector3<f64>> = (0..=m)
            .flat_map(|k| (0..=m).flat_map(move |j| (0..=m).map(move |i| (i, j, k))))
            .map(|(i, j, k)| Vector3::new(i as f64, j as f64, k as f64) * h)
            .collect();
        let body: Vec<Vector3<f64>> = (0..m)
            .flat_map(|k| (0..m).flat_map(move |j| (0..m).map(move |i| (i, j, k))))
            .map(|(i, j, k)| (Vector3::new(i as f64, j as f64, k as f64) + Vector3::repeat(0.5)) * h)
            .collect();
        let mut faces = Vec::new();
        for a in 0..=m {
            for b in 0..m {
                for c in 0..m {
                    let (x, y, z) = (a as f64, b as f64 + 0.5, c as f64 + 0.5);
                    faces.push(Vector3::new(x, y, z) * h);
                    faces.push(Vector3::new(z, x, y) * h);
                    faces.push(Vector3::new(y, z, x) * h);
                }
            }
        }
        let bcc = ([corners.clone(), body].concat(), 0.5 * 3f64.sqrt() * h);
        let fcc = ([corners, faces].concat(), h / 2f64.sqrt());
        for (sites, spacing) in [bcc, fcc] {
            if sites.len() >= n && best.as_ref().is_none_or(|(s, _)| spacing > *s) {
                best = Some((spacing, sites));
            }
        }
    }
    best.unwrap_or((0.0, Vec::new()))
}

/// Nearest-neighbor spacing of the lattice used for wide-spacing starts;
/// targets much beyond it are not reachable with `n` centers.
pub fn lattice_spacing(n: usize, side: f64) -> f64 {
    lattice_sites(n, side).0
}

/// Random subset of lattice sites with a small jitter.
fn lattice_start(n: usize, side: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    let (_, mut sites) = lattice_sites(n, side);
    for i in 0..n {
        let j = rng.random_range(i..sites.len());
        sites.swap(i, j);
    }
    sites.truncate(n);
    let jitter = 1e-3 * side;
    sites
        .into_iter()
        .map(|p| {
            p.map(|x| (x + jitter * (rng.random::<f64>() - 0.5)).clamp(0.0, side))
        })
        .collect()
}

/// Bisect the minor semiaxis so the voxelized pore fraction meets the target.
fn fit_size(
    desc: &RveDescriptors,
    cfg: &ReconstructionConfig,
    build: &dyn Fn(f64) -> PoreSet,
) -> Result<(f64, f64)> {
    let side = cfg.side_length;
    let vf_of = |minor: f64| -> Result<f64> {
        Ok(voxelize_unchecked(&build(minor), cfg.resolution)?.pore_fraction())
    };
    let single = desc.vf * side.powi(3) / (desc.np as f64 * 4.0 / 3.0 * std::f64::consts::PI * desc.ar);
    let mut hi = single.cbrt();
    let mut vf_hi = vf_of(hi)?;
    while vf_hi < desc.vf && hi < side {
        hi *= 1.5;
        vf_hi = vf_of(hi)?;
    }
    let mut lo = 0.0;
    let mut vf_lo = 0.0;
    let goal = 0.1 * cfg.tol_vf;
    for _ in 0..40 {
        if (vf_hi - desc.vf).abs() <= goal || hi - lo < 1e-9 * side {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let v = vf_of(mid)?;
        if v < desc.vf {
            lo = mid;
            vf_lo = v;
        } else {
            hi = mid;
            vf_hi = v;
        }
    }
    Ok(if (vf_lo - desc.vf).abs() < (vf_hi - desc.vf).abs() {
        (lo, vf_lo)
    } else {
        (hi, vf_hi)
    })
}
