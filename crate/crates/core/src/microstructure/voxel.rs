use std::collections::VecDeque;
use std::io::{BufRead, Write};

use nalgebra::Vector3;

use super::PoreSet;
use crate::error::{Error, Result};

const FILE_MAGIC: &str = "fracal-voxel";
const FILE_VERSION: u32 = 1;

/// Structured voxel discretization of a cube. Voxel `(i, j, k)` lives at
/// linear index `(k * n + j) * n + i` (x fastest). Indicator 0 = matrix,
/// 1 = pore.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMesh {
    pub resolution: usize,
    pub side_length: f64,
    pub indicator: Vec<u8>,
}

impl VoxelMesh {
    pub fn solid(resolution: usize, side_length: f64) -> Self {
        VoxelMesh {
            resolution,
            side_length,
            indicator: vec![0; resolution.pow(3)],
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.side_length / self.resolution as f64
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution + j) * self.resolution + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let n = self.resolution;
        (idx % n, (idx / n) % n, idx / (n * n))
    }

    pub fn center(&self, idx: usize) -> Vector3<f64> {
        let (i, j, k) = self.coords(idx);
        let h = self.voxel_size();
        Vector3::new(
            (i as f64 + 0.5) * h,
            (j as f64 + 0.5) * h,
            (k as f64 + 0.5) * h,
        )
    }

    #[inline]
    pub fn is_pore(&self, idx: usize) -> bool {
        self.indicator[idx] != 0
    }

    pub fn pore_count(&self) -> usize {
        self.indicator.iter().filter(|&&v| v != 0).count()
    }

    pub fn pore_fraction(&self) -> f64 {
        self.pore_count() as f64 / self.indicator.len() as f64
    }

    pub fn matrix_voxels(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.indicator.len()).filter(move |&i| !self.is_pore(i))
    }

    /// Sizes of the face-connected matrix components, largest first.
    pub fn matrix_components(&self) -> Vec<usize> {
        let n = self.resolution;
        let mut seen = vec![false; self.indicator.len()];
        let mut sizes = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..self.indicator.len() {
            if seen[start] || self.is_pore(start) {
                continue;
            }
            seen[start] = true;
            queue.push_back(start);
            let mut size = 0;
            while let Some(v) = queue.pop_front() {
                size += 1;
                let (i, j, k) = self.coords(v);
                let mut visit = |w: usize| {
                    if !seen[w] && !self.is_pore(w) {
                        seen[w] = true;
                        queue.push_back(w);
                    }
                };
                if i > 0 {
                    visit(v - 1);
                }
                if i + 1 < n {
                    visit(v + 1);
                }
                if j > 0 {
                    visit(v - n);
                }
                if j + 1 < n {
                    visit(v + n);
                }
                if k > 0 {
                    visit(v - n * n);
                }
                if k + 1 < n {
                    visit(v + n * n);
                }
            }
            sizes.push(size);
        }
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes
    }

    pub fn check_connected(&self) -> Result<()> {
        let sizes = self.matrix_components();
        if sizes.len() == 1 {
            Ok(())
        } else {
            Err(Error::Disconnected {
                component_sizes: sizes,
            })
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{FILE_MAGIC}")?;
        writeln!(w, "version={FILE_VERSION}")?;
        writeln!(w, "resolution={}", self.resolution)?;
        writeln!(w, "side_length={:?}", self.side_length)?;
        writeln!(w, "end_header")?;
        w.write_all(&self.indicator)?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            r.read_line(&mut line)?;
            Ok(line.trim_end().to_string())
        };
        if next_line(&mut r)? != FILE_MAGIC {
            return Err(Error::Format("not a voxel mesh file".into()));
        }
        let (mut version, mut resolution, mut side) = (None, None, None);
        loop {
            let l = next_line(&mut r)?;
            if l == "end_header" {
                break;
            }
            if l.is_empty() {
                return Err(Error::Format("truncated voxel header".into()));
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header record {l:?}")))?;
            let bad = || Error::Format(format!("bad value for {k}: {v:?}"));
            match k {
                "version" => version = Some(v.parse::<u32>().map_err(|_| bad())?),
                "resolution" => resolution = Some(v.parse::<usize>().map_err(|_| bad())?),
                "side_length" => side = Some(v.parse::<f64>().map_err(|_| bad())?),
                _ => return Err(Error::Format(format!("unknown header key {k}"))),
            }
        }
        if version != Some(FILE_VERSION) {
            return Err(Error::Format(format!("unsupported version {version:?}")));
        }
        let resolution = resolution.ok_or_else(|| Error::Format("missing resolution".into()))?;
        let side_length = side.ok_or_else(|| Error::Format("missing side_length".into()))?;
        let mut indicator = vec![0u8; resolution.pow(3)];
        r.read_exact(&mut indicator)?;
        if indicator.iter().any(|&b| b > 1) {
            return Err(Error::Format("indicator bytes must be 0 or 1".into()));
        }
        Ok(VoxelMesh {
            resolution,
            side_length,
            indicator,
        })
    }
}

/// Voxel marked pore iff its center lies inside any ellipsoid; the matrix
/// phase must remain face-connected.
pub fn voxelize(pores: &PoreSet, resolution: usize) -> Result<VoxelMesh> {
    let mesh = voxelize_unchecked(pores, resolution)?;
    mesh.check_connected()?;
    Ok(mesh)
}

pub(crate) fn voxelize_unchecked(pores: &PoreSet, resolution: usize) -> Result<VoxelMesh> {
    if resolution < 8 {
        return Err(Error::Config(format!(
            "voxel resolution must be at least 8, got {resolution}"
        )));
    }
    let mut mesh = VoxelMesh::solid(resolution, pores.rve_side);
    let h = mesh.voxel_size();
    let n = resolution as isize;
    // voxel index range whose centers may fall in [lo, hi]
    let span = |lo: f64, hi: f64| {
        let a = ((lo / h - 0.5).ceil() as isize).clamp(0, n);
        let b = ((hi / h - 0.5).floor() as isize + 1).clamp(0, n);
        a as usize..b as usize
    };
    for e in &pores.ellipsoids {
        let ext = e.half_extents();
        let lo = e.center - ext;
        let hi = e.center + ext;
        for k in span(lo.z, hi.z) {
            for j in span(lo.y, hi.y) {
                for i in span(lo.x, hi.x) {
                    let idx = mesh.index(i, j, k);
                    if mesh.indicator[idx] == 0 && e.contains(&mesh.center(idx)) {
                        mesh.indicator[idx] = 1;
                    }
                }
            }
        }
    }
    Ok(mesh)
}
