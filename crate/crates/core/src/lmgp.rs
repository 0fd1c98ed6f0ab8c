//! Latent-map Gaussian process: categorical inputs are one-hot encoded and
//! projected to a low-dimensional latent space that enters a Gaussian kernel
//! alongside the quantitative inputs.

use std::f64::consts::LN_10;
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{
    factor_with_jitter, gauss_corr, gradient_weights, pair_sq_diffs, profile, roughness_starts,
    GpConfig, InputScaling, MeanBasis, MAX_NUGGET,
};
use crate::optim::{multistart, OptimOptions};
use crate::util::derive_seed;

/// Categorical variables with levels numbered `1..=m_i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalSpec {
    pub names: Vec<String>,
    pub levels: Vec<usize>,
}

impl CategoricalSpec {
    pub fn new(vars: &[(&str, usize)]) -> Result<Self> {
        if vars.is_empty() || vars.iter().any(|&(_, m)| m == 0) {
            return Err(Error::Config("categorical variables need at least one level".into()));
        }
        Ok(CategoricalSpec {
            names: vars.iter().map(|(n, _)| n.to_string()).collect(),
            levels: vars.iter().map(|&(_, m)| m).collect(),
        })
    }

    pub fn n_vars(&self) -> usize {
        self.levels.len()
    }

    /// Length of the concatenated one-hot encoding.
    pub fn encoding_len(&self) -> usize {
        self.levels.iter().sum()
    }

    /// Positions of the ones in the encoding of `t`.
    pub fn hot(&self, t: &[usize]) -> Result<Vec<usize>> {
        if t.len() != self.levels.len() {
            return Err(Error::UnknownLevel(format!("expected {} categorical values, got {t:?}", self.levels.len())));
        }
        let mut offset = 0;
        let mut out = Vec::with_capacity(t.len());
        for ((&v, &m), name) in t.iter().zip(&self.levels).zip(&self.names) {
            if v == 0 || v > m {
                return Err(Error::UnknownLevel(format!("{name} = {v} (levels 1..={m})")));
            }
            out.push(offset + v - 1);
            offset += m;
        }
        Ok(out)
    }

    /// One-hot encoding `τ(t)`.
    pub fn encode(&self, t: &[usize]) -> Result<Vec<f64>> {
        let mut tau = vec![0.0; self.encoding_len()];
        for i in self.hot(t)? {
            tau[i] = 1.0;
        }
        Ok(tau)
    }
}

/// `exp(−‖Δz‖²)`, the latent factor of the mixed kernel.
pub fn latent_corr(dz: &[f64]) -> f64 {
    (-dz.iter().map(|v| v * v).sum::<f64>()).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedSample {
    pub x: Vec<f64>,
    pub t: Vec<usize>,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmgpConfig {
    pub starts: usize,
    pub seed: u64,
    pub nugget: f64,
    pub w_bounds: (f64, f64),
    pub latent_dim: usize,
    pub a_bounds: (f64, f64),
    pub a_init_std: f64,
    /// Categorical variable whose levels are min–max scaled separately.
    pub scale_by: Option<usize>,
    pub optim: OptimOptions,
}

impl Default for LmgpConfig {
    fn default() -> Self {
        LmgpConfig {
            starts: 8,
            seed: 0,
            nugget: 1e-8,
            w_bounds: (-6.0, 4.0),
            latent_dim: 2,
            a_bounds: (-4.0, 4.0),
            a_init_std: 0.3,
            scale_by: None,
            optim: OptimOptions::default(),
        }
    }
}

impl LmgpConfig {
    fn gp_config(&self) -> GpConfig {
        GpConfig {
            starts: self.starts,
            seed: self.seed,
            nugget: self.nugget,
            estimate_nugget: false,
            mean: MeanBasis::Constant,
            w_bounds: self.w_bounds,
            optim: self.optim,
        }
    }

    pub fn validate(&self, spec: &CategoricalSpec) -> Result<()> {
        self.gp_config().validate()?;
        if self.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        if !(self.a_bounds.0 < self.a_bounds.1) || !(self.a_init_std >= 0.0) {
            return Err(Error::Config("invalid latent parameter bounds".into()));
        }
        if self.scale_by.is_some_and(|v| v >= spec.n_vars()) {
            return Err(Error::Config("scale_by names a missing categorical variable".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Cache {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmgpModel {
    pub spec: CategoricalSpec,
    pub latent_dim: usize,
    /// Projection matrix, one row per one-hot position.
    pub a: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    pub beta: f64,
    pub sigma2: f64,
    pub nugget: f64,
    pub scaling: InputScaling,
    pub scale_by: Option<usize>,
    /// Output `(lo, hi)` per level of `scale_by`, or a single global pair.
    pub y_ranges: Vec<(f64, f64)>,
    /// Observed categorical combinations.
    pub combos: Vec<Vec<usize>>,
    pub x: Vec<Vec<f64>>,
    pub t: Vec<Vec<usize>>,
    /// Outputs in the [0, 1]-scaled space.
    pub y: Vec<f64>,
    pub nll: f64,
    #[serde(skip)]
    cache: OnceLock<Cache>,
}

/// Training data in model coordinates.
struct Prepared {
    spec: CategoricalSpec,
    scaling: InputScaling,
    scale_by: Option<usize>,
    y_ranges: Vec<(f64, f64)>,
    combos: Vec<Vec<usize>>,
    x: Vec<Vec<f64>>,
    t: Vec<Vec<usize>>,
    hot: Vec<Vec<usize>>,
    y: Vec<f64>,
}

fn range_index(scale_by: Option<usize>, t: &[usize]) -> usize {
    scale_by.map_or(0, |v| t[v] - 1)
}

fn prepare(samples: &[MixedSample], spec: &CategoricalSpec, scale_by: Option<usize>) -> Result<Prepared> {
    if samples.len() < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {}", samples.len())));
    }
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let scaling = InputScaling::fit(&xs)?;
    let hot = samples.iter().map(|s| spec.hot(&s.t)).collect::<Result<Vec<_>>>()?;
    let n_ranges = scale_by.map_or(1, |v| spec.levels[v]);
    let mut y_ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); n_ranges];
    for s in samples {
        if !s.y.is_finite() {
            return Err(Error::Config("non-finite output".into()));
        }
        let r = &mut y_ranges[range_index(scale_by, &s.t)];
        r.0 = r.0.min(s.y);
        r.1 = r.1.max(s.y);
    }
    for (i, r) in y_ranges.iter().enumerate() {
        if !(r.1 > r.0) {
            return Err(Error::Config(format!("output range {i} is empty or constant")));
        }
    }
    let mut combos: Vec<Vec<usize>> = samples.iter().map(|s| s.t.clone()).collect();
    combos.sort();
    combos.dedup();
    Ok(Prepared {
        spec: spec.clone(),
        scaling: scaling.clone(),
        scale_by,
        combos,
        x: xs.iter().map(|x| scaling.apply(x)).collect(),
        t: samples.iter().map(|s| s.t.clone()).collect(),
        hot,
        y: samples
            .iter()
            .map(|s| {
                let (lo, hi) = y_ranges[range_index(scale_by, &s.t)];
                (s.y - lo) / (hi - lo)
            })
            .collect(),
        y_ranges,
    })
}

fn latent_of(hot: &[usize], a: &DMatrix<f64>) -> DVector<f64> {
    hot.iter().fold(DVector::zeros(a.ncols()), |z, &r| z + a.row(r).transpose())
}

/// Correlation matrix, its quantitative part's squared distances and the
/// latent positions of every sample.
fn mixed_corr(p: &Prepared, w: &[f64], a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = p.x.len();
    let z: DMatrix<f64> = DMatrix::from_fn(n, a.ncols(), |i, k| p.hot[i].iter().map(|&r| a[(r, k)]).sum());
    let r = DMatrix::from_fn(n, n, |i, j| {
        let dz2: f64 = (0..a.ncols()).map(|k| (z[(i, k)] - z[(j, k)]).powi(2)).sum();
        gauss_corr(&p.x[i], &p.x[j], w) * (-dz2).exp()
    });
    (r, z)
}

fn unpack(params: &[f64], d: usize, rows: usize, dz: usize) -> (&[f64], DMatrix<f64>) {
    (&params[..d], DMatrix::from_row_slice(rows, dz, &params[d..d + rows * dz]))
}

/// Negative log-likelihood and gradient in `(w, vec(A))`.
fn nll_and_grad(p: &Prepared, params: &[f64], latent_dim: usize, nugget: f64) -> Result<(f64, Vec<f64>)> {
    let d = p.x[0].len();
    let rows = p.spec.encoding_len();
    let (w, a) = unpack(params, d, rows, latent_dim);
    let (r, z) = mixed_corr(p, w, &a);
    let n = p.x.len();
    let f = DMatrix::from_element(n, 1, 1.0);
    let prof = profile(&r, &f, &DVector::from_column_slice(&p.y), nugget)?;
    let m = gradient_weights(&prof).component_mul(&r);
    let diffs = pair_sq_diffs(&p.x);
    let mut grad = Vec::with_capacity(params.len());
    for k in 0..d {
        let s = m.iter().zip(diffs[k].iter()).map(|(a, b)| a * b).sum::<f64>();
        grad.push(-0.5 * LN_10 * 10f64.powf(w[k]) * s);
    }
    // ∂/∂A = −2 Tᵀ (diag(M 1) − M) Z
    let row_sums = DVector::from_fn(n, |i, _| m.row(i).sum());
    let mz = &m * &z;
    let mut inner = -mz;
    for i in 0..n {
        for k in 0..latent_dim {
            inner[(i, k)] += row_sums[i] * z[(i, k)];
        }
    }
    let mut ga = DMatrix::<f64>::zeros(rows, latent_dim);
    for (i, hot) in p.hot.iter().enumerate() {
        for &rr in hot {
            for k in 0..latent_dim {
                ga[(rr, k)] -= 2.0 * inner[(i, k)];
            }
        }
    }
    for rr in 0..rows {
        for k in 0..latent_dim {
            grad.push(ga[(rr, k)]);
        }
    }
    Ok((prof.nll, grad))
}

/// Translate the observed combinations' latent points to zero mean and
/// rotate them onto their principal axes; signs make the first nonzero
/// coordinate along each axis positive.
fn canonicalize(a: &mut DMatrix<f64>, spec: &CategoricalSpec, combos: &[Vec<usize>]) {
    let hots: Vec<Vec<usize>> = combos.iter().map(|c| spec.hot(c).expect("observed combination")).collect();
    let zs: Vec<DVector<f64>> = hots.iter().map(|h| latent_of(h, a)).collect();
    let mean = zs.iter().fold(DVector::zeros(a.ncols()), |s, z| s + z) / zs.len() as f64;
    for r in 0..spec.levels[0] {
        let mut row = a.row_mut(r);
        row -= mean.transpose();
    }
    let dz = a.ncols();
    let centered: Vec<DVector<f64>> = zs.iter().map(|z| z - &mean).collect();
    let cov = centered.iter().fold(DMatrix::zeros(dz, dz), |c, z| c + z * z.transpose());
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dz).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let mut rot = DMatrix::zeros(dz, dz);
    for (c, &k) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = centered.iter().map(|z| z.dot(&v)).find(|p| p.abs() > 1e-12);
        if lead.is_some_and(|p| p < 0.0) {
            v = -v;
        }
        rot.set_column(c, &v);
    }
    *a = &*a * rot;
}

impl LmgpModel {
    fn from_prepared(p: Prepared, w: Vec<f64>, a: DMatrix<f64>, nugget: f64) -> Result<Self> {
        let (r, _) = mixed_corr(&p, &w, &a);
        let n = p.x.len();
        let prof = profile(&r, &DMatrix::from_element(n, 1, 1.0), &DVector::from_column_slice(&p.y), nugget)?;
        let cache = OnceLock::new();
        let _ = cache.set(Cache {
            chol: prof.chol,
            alpha: prof.alpha,
        });
        Ok(LmgpModel {
            latent_dim: a.ncols(),
            a: a.row_iter().map(|r| r.iter().copied().collect()).collect(),
            spec: p.spec,
            w,
            beta: prof.beta[0],
            sigma2: prof.sigma2,
            nugget: prof.nugget,
            scaling: p.scaling,
            scale_by: p.scale_by,
            y_ranges: p.y_ranges,
            combos: p.combos,
            x: p.x,
            t: p.t,
            y: p.y,
            nll: prof.nll,
            cache,
        })
    }

    /// Model at given hyperparameters (no optimization, no canonical frame).
    pub fn with_params(
        samples: &[MixedSample],
        spec: &CategoricalSpec,
        w: &[f64],
        a: &DMatrix<f64>,
        nugget: f64,
        scale_by: Option<usize>,
    ) -> Result<Self> {
        let p = prepare(samples, spec, scale_by)?;
        if w.len() != p.x[0].len() || a.nrows() != spec.encoding_len() || a.ncols() == 0 {
            return Err(Error::Config("hyperparameter shapes do not match the data".into()));
        }
        Self::from_prepared(p, w.to_vec(), a.clone(), nugget)
    }

    fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.a.len(), self.latent_dim, |i, k| self.a[i][k])
    }

    /// `z(t) = τ(t) A`.
    pub fn latent_map(&self, t: &[usize]) -> Result<Vec<f64>> {
        let hot = self.spec.hot(t)?;
        Ok(latent_of(&hot, &self.a_matrix()).iter().copied().collect())
    }

    /// Mixed-kernel correlation between `(x, t)` and `(x2, t2)` in input
    /// units.
    pub fn corr(&self, x: &[f64], t: &[usize], x2: &[f64], t2: &[usize]) -> Result<f64> {
        let z1 = self.latent_map(t)?;
        let z2 = self.latent_map(t2)?;
        let dz: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a - b).collect();
        Ok(gauss_corr(&self.scaling.apply(x), &self.scaling.apply(x2), &self.w) * latent_corr(&dz))
    }

    /// Latent point of every observed combination.
    pub fn latent_positions(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        self.combos
            .iter()
            .map(|c| (c.clone(), self.latent_map(c).expect("observed combination")))
            .collect()
    }

    /// Correlation between two combinations at equal quantitative inputs.
    pub fn source_correlation(&self, t: &[usize], t2: &[usize]) -> Result<f64> {
        let z1 = self.latent_map(t)?;
        let z2 = self.latent_map(t2)?;
        let dz: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a - b).collect();
        Ok(latent_corr(&dz))
    }

    fn cache(&self) -> &Cache {
        self.cache.get_or_init(|| {
            let a = self.a_matrix();
            let hot: Vec<Vec<usize>> = self.t.iter().map(|t| self.spec.hot(t).expect("training level")).collect();
            let n = self.x.len();
            let zs: Vec<DVector<f64>> = hot.iter().map(|h| latent_of(h, &a)).collect();
            let r = DMatrix::from_fn(n, n, |i, j| {
                gauss_corr(&self.x[i], &self.x[j], &self.w) * (-(&zs[i] - &zs[j]).norm_squared()).exp()
            });
            let (chol, _) = factor_with_jitter(&r, self.nugget).expect("stored model factorizes");
            let e = DVector::from_iterator(n, self.y.iter().map(|y| y - self.beta));
            let alpha = chol.solve(&e);
            Cache { chol, alpha }
        })
    }

    /// Posterior mean and variance in the [0, 1]-scaled output space.
    pub fn predict_scaled(&self, x: &[f64], t: &[usize]) -> Result<(f64, f64)> {
        if !self.combos.iter().any(|c| c == t) {
            return Err(Error::UnknownLevel(format!("combination {t:?} not present in training data")));
        }
        let c = self.cache();
        let a = self.a_matrix();
        let zq = latent_of(&self.spec.hot(t)?, &a);
        let s = self.scaling.apply(x);
        let r = DVector::from_iterator(
            self.x.len(),
            self.x.iter().zip(&self.t).map(|(xi, ti)| {
                let zi = latent_of(&self.spec.hot(ti).expect("training level"), &a);
                gauss_corr(&s, xi, &self.w) * (-(&zq - zi).norm_squared()).exp()
            }),
        );
        let mean = self.beta + r.dot(&c.alpha);
        let var = self.sigma2 * (1.0 - r.dot(&c.chol.solve(&r))).max(0.0);
        Ok((mean, var))
    }

    /// Posterior mean and variance in output units.
    pub fn predict(&self, x: &[f64], t: &[usize]) -> Result<(f64, f64)> {
        let (m, v) = self.predict_scaled(x, t)?;
        let (lo, hi) = self.y_ranges[range_index(self.scale_by, t)];
        Ok((lo + (hi - lo) * m, v * (hi - lo) * (hi - lo)))
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            format: &'a str,
            version: u32,
            model: &'a LmgpModel,
        }
        serde_json::to_string_pretty(&Doc {
            format: LMGP_FORMAT,
            version: 1,
            model: self,
        })
        .map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            format: String,
            version: u32,
            model: LmgpModel,
        }
        let doc: Doc = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if doc.format != LMGP_FORMAT || doc.version != 1 {
            return Err(Error::Format(format!("unsupported model document {} v{}", doc.format, doc.version)));
        }
        Ok(doc.model)
    }

    /// CSV of latent positions: one column per categorical variable, then
    /// `z1..zd`.
    pub fn write_latent_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let z_cols: Vec<String> = (1..=self.latent_dim).map(|k| format!("z{k}")).collect();
        writeln!(w, "{},{}", self.spec.names.join(","), z_cols.join(","))?;
        for (t, z) in self.latent_positions() {
            let ts: Vec<String> = t.iter().map(usize::to_string).collect();
            let zs: Vec<String> = z.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{},{}", ts.join(","), zs.join(","))?;
        }
        Ok(())
    }
}

const LMGP_FORMAT: &str = "fracal-lmgp";

/// Joint maximum-likelihood fit of roughness and latent projection.
pub fn fit_lmgp(samples: &[MixedSample], spec: &CategoricalSpec, config: &LmgpConfig) -> Result<LmgpModel> {
    config.validate(spec)?;
    let p = prepare(samples, spec, config.scale_by)?;
    let d = p.x[0].len();
    let rows = spec.encoding_len();
    let dz = config.latent_dim;
    let mut lo = vec![config.w_bounds.0; d];
    let mut hi = vec![config.w_bounds.1; d];
    lo.extend(std::iter::repeat_n(config.a_bounds.0, rows * dz));
    hi.extend(std::iter::repeat_n(config.a_bounds.1, rows * dz));

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let normal = Normal::new(0.0, config.a_init_std).map_err(|e| Error::Config(e.to_string()))?;
    let starts: Vec<Vec<f64>> = roughness_starts(d, &config.gp_config(), false)
        .into_iter()
        .map(|mut s| {
            s.extend((0..rows * dz).map(|_| {
                normal
                    .sample(&mut rng)
                    .clamp(config.a_bounds.0, config.a_bounds.1)
            }));
            s
        })
        .collect();
    let (best, log) = multistart(
        |params: &[f64]| nll_and_grad(&p, params, dz, config.nugget),
        &starts,
        &lo,
        &hi,
        &config.optim,
    );
    let Some((_, best)) = best else {
        let reasons: Vec<String> = log.into_iter().filter_map(|s| s.result.err()).collect();
        return Err(Error::Fit(format!("every start failed: {reasons:?}")));
    };
    let (w, a) = unpack(&best.x, d, rows, dz);
    let w = w.to_vec();
    let mut a = a;
    canonicalize(&mut a, spec, &p.combos);
    LmgpModel::from_prepared(p, w, a, config.nugget.min(MAX_NUGGET))
}

/// Mixed-input training rows in the layout `x1..xd,<categoricals>,y`.
pub fn write_samples_csv<W: std::io::Write>(
    mut w: W,
    samples: &[MixedSample],
    spec: &CategoricalSpec,
) -> Result<()> {
    let d = samples.first().map_or(0, |s| s.x.len());
    let xs: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    writeln!(w, "{},{},y", xs.join(","), spec.names.join(","))?;
    for s in samples {
        let xv: Vec<String> = s.x.iter().map(|v| format!("{v:?}")).collect();
        let tv: Vec<String> = s.t.iter().map(usize::to_string).collect();
        writeln!(w, "{},{},{:?}", xv.join(","), tv.join(","), s.y)?;
    }
    Ok(())
}

pub fn read_samples_csv(text: &str, spec: &CategoricalSpec) -> Result<Vec<MixedSample>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format("empty sample table".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let nt = spec.n_vars();
    if header.len() < nt + 2 || header.last() != Some(&"y") || header[header.len() - 1 - nt..header.len() - 1] != spec.names.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        return Err(Error::Format(format!("unexpected sample header {header:?}")));
    }
    let d = header.len() - nt - 1;
    lines
        .map(|l| {
            let bad = || Error::Format(format!("sample row {l:?}"));
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != header.len() {
                return Err(bad());
            }
            let x = f[..d].iter().map(|v| v.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
            let t = f[d..d + nt].iter().map(|v| v.parse::<usize>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
            spec.hot(&t)?;
            let y = f[d + nt].parse().map_err(|_| bad())?;
            Ok(MixedSample { x, t, y })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{fit_gp, GpModel};

    fn spec2() -> CategoricalSpec {
        CategoricalSpec::new(&[("t1", 4), ("t2", 2)]).unwrap()
    }

    #[test]
    fn paper_correlation_anchors() {
        assert_eq!(format!("{:.4}", latent_corr(&[0.06, 0.0])), "0.9964");
        assert_eq!(format!("{:.4}", latent_corr(&[0.0, 0.6])), "0.6977");
        assert_eq!(latent_corr(&[0.3, 0.4]), (-0.25f64).exp());
    }

    #[test]
    fn one_hot_layout() {
        let s = spec2();
        assert_eq!(s.encode(&[3, 2]).unwrap(), vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(s.hot(&[5, 1]), Err(Error::UnknownLevel(_))));
        assert!(matches!(s.hot(&[0, 1]), Err(Error::UnknownLevel(_))));
    }

    fn toy(n: usize, bias: &[f64], seed: u64) -> Vec<MixedSample> {
        let pts = crate::sobol::SobolSequence::new(2, seed).take_points(n);
        pts.iter()
            .enumerate()
            .map(|(i, p)| {
                let src = i % bias.len();
                let y = (3.0 * p[0]).sin() + p[1] * p[1] + bias[src] * (1.0 + p[0]);
                MixedSample {
                    x: p.clone(),
                    t: vec![src + 1],
                    y,
                }
            })
            .collect()
    }

    #[test]
    fn latent_map_selects_rows() {
        let samples: Vec<MixedSample> = (0..8)
            .map(|i| MixedSample {
                x: vec![i as f64],
                t: vec![i % 4 + 1, i / 4 + 1],
                y: (i as f64).sin(),
            })
            .collect();
        let a = DMatrix::from_row_slice(6, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 1.0, 2.0, 3.0, 4.0]);
        let m = LmgpModel::with_params(&samples, &spec2(), &[0.0], &a, 1e-8, None).unwrap();
        assert_eq!(m.latent_map(&[2, 2]).unwrap(), vec![0.3 + 3.0, 0.4 + 4.0]);
        let zero = LmgpModel::with_params(&samples, &spec2(), &[0.0], &DMatrix::zeros(6, 2), 1e-8, None).unwrap();
        assert_eq!(zero.latent_map(&[4, 1]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(m.latent_positions().len(), 8);
        let x = [3.0];
        assert_eq!(
            m.corr(&x, &[1, 1], &x, &[1, 1]).unwrap(),
            1.0
        );
        // equal categories reduce to the quantitative kernel
        let q = gauss_corr(&m.scaling.apply(&[1.0]), &m.scaling.apply(&[5.0]), &m.w);
        assert_eq!(m.corr(&[1.0], &[2, 1], &[5.0], &[2, 1]).unwrap(), q);
    }

    #[test]
    fn likelihood_gradient_matches_finite_differences() {
        let samples = toy(24, &[0.0, 0.3, -0.5], 2);
        let spec = CategoricalSpec::new(&[("src", 3)]).unwrap();
        let p = prepare(&samples, &spec, None).unwrap();
        let params = vec![0.4, -0.3, 0.2, -0.1, 0.5, 0.3, -0.4, 0.05];
        let (_, g) = nll_and_grad(&p, &params, 2, 1e-8).unwrap();
        for k in 0..params.len() {
            let h = 1e-6;
            let (mut a, mut b) = (params.clone(), params.clone());
            a[k] += h;
            b[k] -= h;
            let fd = (nll_and_grad(&p, &a, 2, 1e-8).unwrap().0 - nll_and_grad(&p, &b, 2, 1e-8).unwrap().0) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-5 * g[k].abs().max(1e-2), "param {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn collapse_to_pooled_gp() {
        let samples = toy(20, &[0.0, 0.2], 3);
        let spec = CategoricalSpec::new(&[("src", 2)]).unwrap();
        let w = [0.3, -0.2];
        let m = LmgpModel::with_params(&samples, &spec, &w, &DMatrix::zeros(2, 2), 1e-8, None).unwrap();
        let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
        let ys: Vec<f64> = samples.iter().map(|s| s.y).collect();
        let g = GpModel::with_params(&xs, &ys, &w, 1e-8, MeanBasis::Constant).unwrap();
        for q in [[0.1, 0.9], [0.55, 0.2]] {
            let a = m.predict(&q, &[1]).unwrap().0;
            let b = m.predict(&q, &[2]).unwrap().0;
            let c = g.predict(&q).0;
            assert!((a - c).abs() <= 1e-8 && (b - c).abs() <= 1e-8, "{a} {b} {c}");
        }
    }

    #[test]
    fn single_source_matches_plain_gp() {
        let samples = toy(16, &[0.0], 5);
        let spec = CategoricalSpec::new(&[("src", 1)]).unwrap();
        let cfg = LmgpConfig {
            starts: 3,
            ..Default::default()
        };
        let m = fit_lmgp(&samples, &spec, &cfg).unwrap();
        let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
        let ys: Vec<f64> = samples.iter().map(|s| s.y).collect();
        let g = fit_gp(&xs, &ys, &GpConfig { starts: 3, ..Default::default() }).unwrap();
        let range = m.y_ranges[0].1 - m.y_ranges[0].0;
        for q in [[0.2, 0.3], [0.7, 0.95], [0.5, 0.5]] {
            let a = m.predict(&q, &[1]).unwrap().0;
            let b = g.predict(&q).0;
            assert!((a - b).abs() <= 1e-6 * range, "{a} vs {b}");
        }
    }

    #[test]
    fn identical_sources_collapse_in_latent_space() {
        let spec = CategoricalSpec::new(&[("src", 2)]).unwrap();
        let cfg = LmgpConfig {
            starts: 4,
            ..Default::default()
        };
        let samples = toy(30, &[0.0, 0.0], 7);
        let m = fit_lmgp(&samples, &spec, &cfg).unwrap();
        let z1 = m.latent_map(&[1]).unwrap();
        let z2 = m.latent_map(&[2]).unwrap();
        let dist = ((z1[0] - z2[0]).powi(2) + (z1[1] - z2[1]).powi(2)).sqrt();
        assert!(dist < 0.05, "{dist}");
    }

    #[test]
    fn deterministic_with_canonical_frame() {
        let spec = CategoricalSpec::new(&[("src", 3)]).unwrap();
        let samples = toy(24, &[0.0, 0.4, 1.0], 11);
        let cfg = LmgpConfig {
            starts: 3,
            ..Default::default()
        };
        let a = fit_lmgp(&samples, &spec, &cfg).unwrap();
        let b = fit_lmgp(&samples, &spec, &cfg).unwrap();
        assert_eq!(a.a, b.a);
        let pos = a.latent_positions();
        let mean: f64 = pos.iter().map(|(_, z)| z[0]).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        let back = LmgpModel::from_json(&a.to_json().unwrap()).unwrap();
        let q = [0.3, 0.6];
        assert!((back.predict(&q, &[2]).unwrap().0 - a.predict(&q, &[2]).unwrap().0).abs() < 1e-12);
        assert!(matches!(a.predict(&q, &[4]), Err(Error::UnknownLevel(_))));
    }

    #[test]
    fn training_rows_are_interpolated() {
        // replay of a mixed-input table row
        let spec = spec2();
        let mut samples = Vec::new();
        let pts = crate::sobol::SobolSequence::new(6, 1).take_points(24);
        for (i, p) in pts.iter().enumerate() {
            let t = vec![i % 4 + 1, (i / 4) % 2 + 1];
            let y = if t[1] == 1 { 1.0e8 * (1.0 + 0.2 * p[0] - 0.1 * p[4]) } else { 3.0e6 * (1.0 + p[1]) };
            samples.push(MixedSample { x: p.clone(), t, y });
        }
        samples.push(MixedSample {
            x: vec![0.021, 13.0, 1.14, 28.1, 54.7, 0.015],
            t: vec![4, 1],
            y: 1.12e8,
        });
        let cfg = LmgpConfig {
            starts: 2,
            nugget: 0.0,
            scale_by: Some(1),
            ..Default::default()
        };
        let m = fit_lmgp(&samples, &spec, &cfg).unwrap();
        let (mu, _) = m.predict(&[0.021, 13.0, 1.14, 28.1, 54.7, 0.015], &[4, 1]).unwrap();
        assert!((mu / 1.12e8 - 1.0).abs() < 1e-6, "{mu}");
    }

    #[test]
    fn sample_csv_round_trip() {
        let spec = spec2();
        let samples = vec![
            MixedSample { x: vec![0.1, 2.0], t: vec![4, 1], y: 1.0e8 },
            MixedSample { x: vec![0.3, 5.0], t: vec![1, 2], y: 3.5e6 },
        ];
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, &samples, &spec).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x1,x2,t1,t2,y\n"));
        assert_eq!(read_samples_csv(&text, &spec).unwrap(), samples);
    }

    #[test]
    fn mixed_kernel_is_psd_for_random_projection() {
        let spec = spec2();
        let samples: Vec<MixedSample> = (0..30)
            .map(|i| MixedSample {
                x: vec![(i as f64 * 0.37).fract(), (i as f64 * 0.11).fract()],
                t: vec![i % 4 + 1, i % 2 + 1],
                y: i as f64,
            })
            .collect();
        let p = prepare(&samples, &spec, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 1.5).unwrap();
        for _ in 0..5 {
            let a = DMatrix::from_fn(6, 2, |_, _| normal.sample(&mut rng));
            let (r, _) = mixed_corr(&p, &[0.5, 1.0], &a);
            assert!(r.symmetric_eigenvalues().min() > -1e-10);
        }
    }
}
