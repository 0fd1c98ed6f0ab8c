use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian radial basis `exp(−(r / (shape · d))²)` with `d` the bounding-box
/// diagonal of the node cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpimConfig {
    pub shape: f64,
    /// Nodes nearest to the query point used when recovering from a cluster.
    pub max_nodes: usize,
}

impl Default for RpimConfig {
    fn default() -> Self {
        RpimConfig {
            shape: 1.0,
            max_nodes: 16,
        }
    }
}

/// Radial point interpolation with linear polynomial augmentation, evaluated
/// at `query`. `nodes` pairs coordinates with displacements.
pub fn rpim_centroid_displacement(
    nodes: &[(Vector3<f64>, Vector3<f64>)],
    query: &Vector3<f64>,
    config: &RpimConfig,
) -> Result<Vector3<f64>> {
    let n = nodes.len();
    if n < 4 {
        return Err(Error::Interpolation(format!("{n} nodes, need at least 4")));
    }
    if !(config.shape > 0.0) {
        return Err(Error::Config("rpim shape parameter must be positive".into()));
    }
    let (lo, hi) = nodes.iter().fold(
        (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), (x, _)| (lo.inf(x), hi.sup(x)),
    );
    let diag = (hi - lo).norm();
    if diag == 0.0 {
        return Err(Error::Interpolation("coincident nodes".into()));
    }
    // center and scale so the polynomial block is O(1)
    let mid = (lo + hi) * 0.5;
    let local = |x: &Vector3<f64>| (x - mid) / diag;
    let c = config.shape;
    let rbf = |a: &Vector3<f64>, b: &Vector3<f64>| (-(a - b).norm_squared() / (c * c)).exp();

    let xs: Vec<Vector3<f64>> = nodes.iter().map(|(x, _)| local(x)).collect();
    let m = n + 4;
    let mut g = DMatrix::zeros(m, m);
    for i in 0..n {
        for j in 0..n {
            g[(i, j)] = rbf(&xs[i], &xs[j]);
        }
        let p = [1.0, xs[i].x, xs[i].y, xs[i].z];
        for (k, v) in p.into_iter().enumerate() {
            g[(i, n + k)] = v;
            g[(n + k, i)] = v;
        }
    }
    let mut rhs = DMatrix::zeros(m, 3);
    for (i, (_, u)) in nodes.iter().enumerate() {
        for d in 0..3 {
            rhs[(i, d)] = u[d];
        }
    }
    let lu = g.lu();
    let coef = lu
        .solve(&rhs)
        .filter(|c| c.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Interpolation("singular augmented system (coplanar nodes?)".into()))?;
    let q = local(query);
    let mut phi = DVector::zeros(m);
    for i in 0..n {
        phi[i] = rbf(&q, &xs[i]);
    }
    phi[n] = 1.0;
    phi[n + 1] = q.x;
    phi[n + 2] = q.y;
    phi[n + 3] = q.z;
    let out = coef.transpose() * phi;
    Ok(Vector3::new(out[0], out[1], out[2]))
}
