//! Gaussian-process regression with a Gaussian kernel, profiled
//! maximum-likelihood hyperparameters and kriging prediction.

use std::f64::consts::LN_10;
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{multistart, OptimOptions};
use crate::util::derive_seed;

pub const MAX_NUGGET: f64 = 1e-4;

/// `exp(−Σ 10^{w_i} (s_i − s'_i)²)`.
pub fn gauss_corr(s: &[f64], t: &[f64], w: &[f64]) -> f64 {
    assert_eq!(s.len(), t.len());
    assert_eq!(s.len(), w.len());
    let q: f64 = s
        .iter()
        .zip(t)
        .zip(w)
        .map(|((a, b), wi)| 10f64.powf(*wi) * (a - b) * (a - b))
        .sum();
    (-q).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanBasis {
    #[default]
    Constant,
    Linear,
}

impl MeanBasis {
    pub fn row(&self, x: &[f64]) -> Vec<f64> {
        match self {
            MeanBasis::Constant => vec![1.0],
            MeanBasis::Linear => std::iter::once(1.0).chain(x.iter().copied()).collect(),
        }
    }

    pub fn matrix(&self, xs: &[Vec<f64>]) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = xs.iter().map(|x| self.row(x)).collect();
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }
}

/// Closed-form β and σ² at a fixed correlation matrix.
#[derive(Debug, Clone)]
pub(crate) struct Profiled {
    pub nll: f64,
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub nugget: f64,
    pub chol: Cholesky<f64, Dyn>,
    /// `R⁻¹ (y − F β)`.
    pub alpha: DVector<f64>,
}

/// Cholesky of `R + nugget I`, escalating the nugget tenfold up to
/// [`MAX_NUGGET`] on failure.
pub(crate) fn factor_with_jitter(r: &DMatrix<f64>, nugget: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = r.nrows();
    let mut nug = nugget;
    loop {
        let mut m = r.clone();
        for i in 0..n {
            m[(i, i)] += nug;
        }
        if let Some(c) = m.cholesky() {
            return Ok((c, nug));
        }
        nug *= 10.0;
        if nug == 0.0 || nug > MAX_NUGGET * (1.0 + 1e-12) {
            return Err(Error::Conditioning(format!(
                "correlation matrix of size {n} not positive definite with nugget up to {:e}",
                nugget.max(MAX_NUGGET)
            )));
        }
    }
}

pub(crate) fn profile(r: &DMatrix<f64>, f: &DMatrix<f64>, y: &DVector<f64>, nugget: f64) -> Result<Profiled> {
    let n = y.len();
    let (chol, nugget) = factor_with_jitter(r, nugget)?;
    let rinv_f = chol.solve(f);
    let rinv_y = chol.solve(y);
    let ftf = f.transpose() * &rinv_f;
    let beta = ftf
        .cholesky()
        .ok_or_else(|| Error::Conditioning("generalized least squares system is singular".into()))?
        .solve(&(f.transpose() * &rinv_y));
    let e = y - f * &beta;
    let alpha = chol.solve(&e);
    let sigma2 = e.dot(&alpha) / n as f64;
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::Conditioning(format!("profiled process variance {sigma2}")));
    }
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let nll = 0.5 * n as f64 * sigma2.ln() + 0.5 * logdet + 0.5 * n as f64;
    if !nll.is_finite() {
        return Err(Error::Conditioning("non-finite likelihood".into()));
    }
    Ok(Profiled {
        nll,
        beta,
        sigma2,
        nugget,
        chol,
        alpha,
    })
}

/// Matrix `Q` with `∂NLL/∂θ = ½ Σ_ij Q_ij ∂R_ij/∂θ`.
pub(crate) fn gradient_weights(p: &Profiled) -> DMatrix<f64> {
    let n = p.alpha.len();
    let rinv = p.chol.inverse();
    let mut q = rinv;
    for j in 0..n {
        for i in 0..n {
            q[(i, j)] -= p.alpha[i] * p.alpha[j] / p.sigma2;
        }
    }
    q
}

/// Squared differences of every input pair along each dimension.
pub(crate) fn pair_sq_diffs(xs: &[Vec<f64>]) -> Vec<DMatrix<f64>> {
    let n = xs.len();
    let d = xs.first().map_or(0, Vec::len);
    (0..d)
        .map(|k| DMatrix::from_fn(n, n, |i, j| (xs[i][k] - xs[j][k]).powi(2)))
        .collect()
}

/// Min–max scaling of inputs to the unit box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputScaling {
    pub fn fit(xs: &[Vec<f64>]) -> Result<Self> {
        let d = xs[0].len();
        if xs.iter().any(|x| x.len() != d) {
            return Err(Error::Config("inputs have inconsistent dimension".into()));
        }
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for x in xs {
            for k in 0..d {
                if !x[k].is_finite() {
                    return Err(Error::Config("non-finite input".into()));
                }
                lo[k] = lo[k].min(x[k]);
                hi[k] = hi[k].max(x[k]);
            }
        }
        if let Some(k) = (0..d).find(|&k| !(hi[k] > lo[k])) {
            return Err(Error::Config(format!("input {k} is constant")));
        }
        Ok(InputScaling { lo, hi })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (l, h))| (v - l) / (h - l))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub starts: usize,
    pub seed: u64,
    pub nugget: f64,
    pub estimate_nugget: bool,
    pub mean: MeanBasis,
    pub w_bounds: (f64, f64),
    pub optim: OptimOptions,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            starts: 8,
            seed: 0,
            nugget: 1e-8,
            estimate_nugget: false,
            mean: MeanBasis::Constant,
            w_bounds: (-6.0, 4.0),
            optim: OptimOptions::default(),
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.starts == 0 {
            return Err(Error::Config("at least one optimizer start required".into()));
        }
        if !(self.nugget >= 0.0) || self.nugget > MAX_NUGGET {
            return Err(Error::Config(format!("nugget {} outside [0, {MAX_NUGGET}]", self.nugget)));
        }
        if !(self.w_bounds.0 < self.w_bounds.1) {
            return Err(Error::Config("empty roughness bounds".into()));
        }
        Ok(())
    }
}

/// Bounds of log10 nugget when it is estimated.
const LOG_NUGGET_BOUNDS: (f64, f64) = (-12.0, -4.0);

#[derive(Debug, Clone)]
struct Cache {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModel {
    pub w: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub nugget: f64,
    pub mean: MeanBasis,
    pub scaling: InputScaling,
    pub y_mean: f64,
    pub y_std: f64,
    /// Scaled training inputs.
    pub x: Vec<Vec<f64>>,
    /// Standardized training outputs.
    pub y: Vec<f64>,
    /// Negative log-likelihood at the fitted hyperparameters.
    pub nll: f64,
    #[serde(skip)]
    cache: OnceLock<Cache>,
}

#[derive(Serialize, Deserialize)]
struct GpDocument {
    format: String,
    version: u32,
    model: GpModel,
}

const GP_FORMAT: &str = "fracal-gp";

impl GpModel {
    /// Model with given hyperparameters; β and σ² are profiled.
    pub fn with_params(x: &[Vec<f64>], y: &[f64], w: &[f64], nugget: f64, mean: MeanBasis) -> Result<Self> {
        let (scaling, xs, y_mean, y_std, ys) = prepare(x, y)?;
        if w.len() != xs[0].len() {
            return Err(Error::Config("roughness vector has wrong length".into()));
        }
        let r = corr_matrix(&xs, w);
        let p = profile(&r, &mean.matrix(&xs), &DVector::from_vec(ys.clone()), nugget)?;
        Ok(Self::assemble(w.to_vec(), p, mean, scaling, y_mean, y_std, xs, ys))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        w: Vec<f64>,
        p: Profiled,
        mean: MeanBasis,
        scaling: InputScaling,
        y_mean: f64,
        y_std: f64,
        x: Vec<Vec<f64>>,
        y: Vec<f64>,
    ) -> Self {
        let cache = OnceLock::new();
        let _ = cache.set(Cache {
            chol: p.chol,
            alpha: p.alpha,
        });
        GpModel {
            w,
            beta: p.beta.iter().copied().collect(),
            sigma2: p.sigma2,
            nugget: p.nugget,
            mean,
            scaling,
            y_mean,
            y_std,
            x,
            y,
            nll: p.nll,
            cache,
        }
    }

    fn cache(&self) -> &Cache {
        self.cache.get_or_init(|| {
            let r = corr_matrix(&self.x, &self.w);
            let (chol, _) = factor_with_jitter(&r, self.nugget).expect("stored model factorizes");
            let f = self.mean.matrix(&self.x);
            let e = DVector::from_vec(self.y.clone()) - f * DVector::from_vec(self.beta.clone());
            let alpha = chol.solve(&e);
            Cache { chol, alpha }
        })
    }

    pub fn n_train(&self) -> usize {
        self.x.len()
    }

    /// Posterior mean and variance at `x` in output units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let c = self.cache();
        let s = self.scaling.apply(x);
        let r = DVector::from_iterator(self.x.len(), self.x.iter().map(|xi| gauss_corr(&s, xi, &self.w)));
        let f: f64 = self.mean.row(&s).iter().zip(&self.beta).map(|(a, b)| a * b).sum();
        let mean = f + r.dot(&c.alpha);
        let var = self.sigma2 * (1.0 - r.dot(&c.chol.solve(&r))).max(0.0);
        (mean * self.y_std + self.y_mean, var * self.y_std * self.y_std)
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Vec<(f64, f64)> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = GpDocument {
            format: GP_FORMAT.into(),
            version: 1,
            model: self.clone(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GpDocument = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if doc.format != GP_FORMAT || doc.version != 1 {
            return Err(Error::Format(format!("unsupported model document {} v{}", doc.format, doc.version)));
        }
        Ok(doc.model)
    }
}

fn corr_matrix(xs: &[Vec<f64>], w: &[f64]) -> DMatrix<f64> {
    let n = xs.len();
    DMatrix::from_fn(n, n, |i, j| gauss_corr(&xs[i], &xs[j], w))
}

type Prepared = (InputScaling, Vec<Vec<f64>>, f64, f64, Vec<f64>);

fn prepare(x: &[Vec<f64>], y: &[f64]) -> Result<Prepared> {
    if x.len() != y.len() {
        return Err(Error::Config(format!("{} inputs but {} outputs", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Config(format!("need at least 2 training points, got {}", x.len())));
    }
    let scaling = InputScaling::fit(x)?;
    let xs: Vec<Vec<f64>> = x.iter().map(|v| scaling.apply(v)).collect();
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::Config("outputs are constant or non-finite".into()));
    }
    let ys = y.iter().map(|v| (v - mean) / std).collect();
    Ok((scaling, xs, mean, std, ys))
}

/// Negative log-likelihood and its gradient in `(w, [log10 nugget])`, with
/// β and σ² profiled, on already scaled and standardized data.
pub fn neg_log_likelihood(
    xs: &[Vec<f64>],
    ys: &[f64],
    w: &[f64],
    log_nugget: Option<f64>,
    nugget: f64,
    mean: MeanBasis,
) -> Result<(f64, Vec<f64>)> {
    if xs.len() < 2 {
        return Err(Error::Config("likelihood needs at least 2 points".into()));
    }
    let d = w.len();
    let nug = log_nugget.map_or(nugget, |l| 10f64.powf(l));
    let r = corr_matrix(xs, w);
    let p = profile(&r, &mean.matrix(xs), &DVector::from_column_slice(ys), nug)?;
    let q = gradient_weights(&p);
    let diffs = pair_sq_diffs(xs);
    let mut grad = Vec::with_capacity(d + 1);
    for k in 0..d {
        let scale = -LN_10 * 10f64.powf(w[k]);
        let s: f64 = q
            .iter()
            .zip(r.iter())
            .zip(diffs[k].iter())
            .map(|((qv, rv), dv)| qv * rv * dv)
            .sum();
        grad.push(0.5 * scale * s);
    }
    if log_nugget.is_some() {
        grad.push(0.5 * LN_10 * p.nugget * q.trace());
    }
    Ok((p.nll, grad))
}

/// Multi-start maximum-likelihood fit.
pub fn fit_gp(x: &[Vec<f64>], y: &[f64], config: &GpConfig) -> Result<GpModel> {
    config.validate()?;
    let (scaling, xs, y_mean, y_std, ys) = prepare(x, y)?;
    let d = xs[0].len();
    let (wl, wh) = config.w_bounds;
    let mut lo = vec![wl; d];
    let mut hi = vec![wh; d];
    if config.estimate_nugget {
        lo.push(LOG_NUGGET_BOUNDS.0);
        hi.push(LOG_NUGGET_BOUNDS.1);
    }
    let starts = roughness_starts(d, config, config.estimate_nugget);
    let objective = |p: &[f64]| {
        let ln = config.estimate_nugget.then(|| p[d]);
        neg_log_likelihood(&xs, &ys, &p[..d], ln, config.nugget, config.mean)
    };
    let (best, log) = multistart(objective, &starts, &lo, &hi, &config.optim);
    let Some((_, best)) = best else {
        let reasons: Vec<String> = log.into_iter().filter_map(|s| s.result.err()).collect();
        return Err(Error::Fit(format!("every start failed: {reasons:?}")));
    };
    let w = best.x[..d].to_vec();
    let nugget = if config.estimate_nugget {
        10f64.powf(best.x[d])
    } else {
        config.nugget
    };
    let r = corr_matrix(&xs, &w);
    let p = profile(&r, &config.mean.matrix(&xs), &DVector::from_vec(ys.clone()), nugget)?;
    Ok(GpModel::assemble(w, p, config.mean, scaling, y_mean, y_std, xs, ys))
}

/// Start points for the roughness search: the first at `w = 0`, the rest
/// drawn uniformly from the central part of the box.
pub(crate) fn roughness_starts(d: usize, config: &GpConfig, with_nugget: bool) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0));
    let (wl, wh) = config.w_bounds;
    let (a, b) = (wl.max(-2.0), wh.min(2.0));
    (0..config.starts)
        .map(|s| {
            let mut p: Vec<f64> = if s == 0 {
                vec![0.0f64.clamp(wl, wh); d]
            } else {
                (0..d).map(|_| rng.random_range(a..=b)).collect()
            };
            if with_nugget {
                p.push(-8.0);
            }
            p
        })
        .collect()
}

/// Mean relative prediction error `(1/N) Σ ‖ŷ_i − y_i‖ / ‖y_i‖`.
pub fn relative_error(preds: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<f64> {
    if preds.len() != truths.len() || preds.is_empty() {
        return Err(Error::Config("prediction and truth sets differ in size or are empty".into()));
    }
    let mut sum = 0.0;
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        if p.len() != t.len() {
            return Err(Error::Config("prediction and truth dimensions differ".into()));
        }
        let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if tn == 0.0 {
            return Err(Error::ZeroNorm(i));
        }
        let dn = p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        sum += dn / tn;
    }
    Ok(sum / preds.len() as f64)
}

/// Draw from the zero-mean unit-variance prior with roughness `w` at `xs`.
pub fn sample_prior(xs: &[Vec<f64>], w: &[f64], seed: u64) -> Result<Vec<f64>> {
    let r = corr_matrix(xs, w);
    let (chol, _) = factor_with_jitter(&r, 1e-10)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_iterator(xs.len(), (0..xs.len()).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
    Ok((chol.l() * z).iter().copied().collect())
}
