//! Nested-error linear mixed model with sampling weights, fitted by REML.
//!
//! For area `d` the model is `y_d = X_d β + Z_d u_d + e_d` with
//! `u_d ~ N(0, Σ_u)`, `Σ_u = diag(τ_1, …, τ_q)` and `e_d ~ N(0, σ² W_d⁻¹)`, so
//! `V_d = Z_d Σ_u Z_d' + σ² W_d⁻¹`.
//!
//! Writing `V_d = σ² H_d` with `H_d = Z_d Γ Z_d' + W_d⁻¹` and `Γ = Σ_u / σ²`,
//! every quantity the restricted likelihood needs reduces to per-area
//! cross-products (`X'WX`, `X'WZ`, `Z'WZ`, …) and the `q × q` matrix
//! `M_d = I + Γ^½ Z_d'W_d Z_d Γ^½`:
//!
//! * `H_d⁻¹ = W_d − W_d Z_d Γ^½ M_d⁻¹ Γ^½ Z_d' W_d`
//! * `log|H_d| = log|M_d| − Σ_i log w_di`
//!
//! σ² is profiled out, and the remaining variance ratios are optimized on a
//! log scale with a Newton scheme (analytic gradient, differenced Hessian).
//! Ratios whose optimum sits on the boundary are reported as exactly zero.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{AreaBlock, CellMeans, DesignMatrices, Gender};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::seed;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LOG_RATIO_MIN: f64 = -23.025_850_929_940_457; // ln 1e-10
const LOG_RATIO_MAX: f64 = 13.815_510_557_964_274; // ln 1e6

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Relative change in the restricted log-likelihood that ends the search.
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 200,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents {
    /// Diagonal `q × q` random-effect covariance.
    pub sigma_u: DMatrix<f64>,
    pub sigma_e2: f64,
}

impl VarianceComponents {
    pub fn tau(&self) -> DVector<f64> {
        self.sigma_u.diagonal()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedLmm {
    pub spec: ModelSpec,
    pub gender: Gender,
    pub x_names: Vec<String>,
    pub z_names: Vec<String>,
    pub beta: DVector<f64>,
    /// One row per dataset area; areas without data keep zero rows.
    pub u_hat: DMatrix<f64>,
    pub vc: VarianceComponents,
    pub areas: Vec<String>,
    pub area_seen: Vec<bool>,
    pub loglik_restricted: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Per-area cross-products that do not depend on the response.
#[derive(Debug, Clone)]
struct BlockStats {
    area: usize,
    xtwx: DMatrix<f64>,
    xtwz: DMatrix<f64>,
    ztwz: DMatrix<f64>,
    sum_log_w: f64,
}

/// Per-area cross-products involving the response.
#[derive(Debug, Clone)]
struct ResponseStats {
    xtwy: DVector<f64>,
    ztwy: DVector<f64>,
    ytwy: f64,
}

/// Static part of a REML problem: the design without the response. Reused
/// across bootstrap replicates that only redraw `y`.
#[derive(Debug, Clone)]
pub struct RemlProblem<'a> {
    design: &'a DesignMatrices,
    blocks: Vec<BlockStats>,
    /// mean of z_k² per random column; zero marks an empty column
    z_scale: Vec<f64>,
    n: usize,
    p: usize,
    q: usize,
    options: FitOptions,
}

struct Evaluation {
    loglik: f64,
    beta: DVector<f64>,
    sigma2: f64,
    /// ∂ℓ/∂γ_k, present when requested
    gradient: Option<DVector<f64>>,
}

fn weighted_rows(m: &nalgebra::DMatrixView<f64>, w: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| w[i] * m[(i, j)])
}

fn ln_det_chol(c: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    let l = c.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

/// Columns of `x` that are linear combinations of earlier columns under the
/// weighted inner product `x'Wx`.
fn collinear_columns(xtwx: &DMatrix<f64>) -> Vec<usize> {
    let p = xtwx.nrows();
    let scale: Vec<f64> = (0..p).map(|j| xtwx[(j, j)].max(0.0).sqrt()).collect();
    let a = DMatrix::from_fn(p, p, |i, j| {
        if scale[i] > 0.0 && scale[j] > 0.0 {
            xtwx[(i, j)] / (scale[i] * scale[j])
        } else {
            0.0
        }
    });
    let mut bad = Vec::new();
    // Cholesky without pivoting, skipping columns with a vanishing pivot.
    let mut l = DMatrix::<f64>::zeros(p, p);
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..p {
        let mut d = a[(j, j)];
        for &k in &kept {
            d -= l[(j, k)] * l[(j, k)];
        }
        if scale[j] == 0.0 || d <= 1e-10 {
            bad.push(j);
            continue;
        }
        let root = d.sqrt();
        l[(j, j)] = root;
        for i in j + 1..p {
            let mut s = a[(i, j)];
            for &k in &kept {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / root;
        }
        kept.push(j);
    }
    bad
}

impl<'a> RemlProblem<'a> {
    pub fn new(design: &'a DesignMatrices) -> Result<Self> {
        Self::with_options(design, FitOptions::default())
    }

    pub fn with_options(design: &'a DesignMatrices, options: FitOptions) -> Result<Self> {
        let (n, p, q) = (design.n(), design.p(), design.q());
        if design.y.len() != n || design.w.len() != n || design.z.nrows() != n {
            return Err(Error::DimensionMismatch("design components disagree on row count".into()));
        }
        if n <= p {
            return Err(Error::TooFewObservations { n, p });
        }
        let w = design.w.as_slice();
        let mut blocks = Vec::with_capacity(design.blocks.len());
        let mut total_xtwx = DMatrix::zeros(p, p);
        for b in &design.blocks {
            let xs = design.x.rows(b.start, b.len);
            let zs = design.z.rows(b.start, b.len);
            let wb = &w[b.range()];
            let xw = weighted_rows(&xs, wb);
            let zw = weighted_rows(&zs, wb);
            let xtwx = xs.tr_mul(&xw);
            total_xtwx += &xtwx;
            blocks.push(BlockStats {
                area: b.area,
                xtwx,
                xtwz: xs.tr_mul(&zw),
                ztwz: zs.tr_mul(&zw),
                sum_log_w: wb.iter().map(|v| v.ln()).sum(),
            });
        }
        let bad = collinear_columns(&total_xtwx);
        if !bad.is_empty() {
            return Err(Error::RankDeficient {
                columns: bad.into_iter().map(|j| design.x_names[j].clone()).collect(),
            });
        }
        let z_scale = (0..q)
            .map(|k| design.z.column(k).iter().map(|v| v * v).sum::<f64>() / n as f64)
            .collect();
        Ok(RemlProblem {
            design,
            blocks,
            z_scale,
            n,
            p,
            q,
            options,
        })
    }

    fn response_stats(&self, y: &DVector<f64>) -> Vec<ResponseStats> {
        let d = self.design;
        let w = d.w.as_slice();
        d.blocks
            .iter()
            .map(|b| {
                let yw = DVector::from_iterator(b.len, b.range().map(|i| w[i] * y[i]));
                ResponseStats {
                    xtwy: d.x.rows(b.start, b.len).tr_mul(&yw),
                    ztwy: d.z.rows(b.start, b.len).tr_mul(&yw),
                    ytwy: b.range().map(|i| w[i] * y[i] * y[i]).sum(),
                }
            })
            .collect()
    }

    /// Profiled restricted log-likelihood at variance ratios `gamma`.
    fn evaluate(&self, gamma: &[f64], rs: &[ResponseStats], want_gradient: bool) -> Option<Evaluation> {
        let (n, p, q) = (self.n, self.p, self.q);
        let s = DVector::from_iterator(q, gamma.iter().map(|g| g.max(0.0).sqrt()));
        let mut c = DMatrix::<f64>::zeros(p, p);
        let mut cy = DVector::<f64>::zeros(p);
        let mut yhy = 0.0;
        let mut ln_det_h = 0.0;
        // S K S per block, kept for the gradient pass
        let mut sks: Vec<DMatrix<f64>> = Vec::with_capacity(self.blocks.len());
        for (b, r) in self.blocks.iter().zip(rs) {
            if q == 0 {
                c += &b.xtwx;
                cy += &r.xtwy;
                yhy += r.ytwy;
                ln_det_h -= b.sum_log_w;
                continue;
            }
            let mut m = DMatrix::from_fn(q, q, |i, j| s[i] * b.ztwz[(i, j)] * s[j]);
            for i in 0..q {
                m[(i, i)] += 1.0;
            }
            let chol = m.cholesky()?;
            ln_det_h += ln_det_chol(&chol) - b.sum_log_w;
            let mut k = chol.inverse();
            for i in 0..q {
                for j in 0..q {
                    k[(i, j)] *= s[i] * s[j];
                }
            }
            // k now holds S M⁻¹ S
            let bk = &b.xtwz * &k;
            c += &b.xtwx - &bk * b.xtwz.transpose();
            cy += &r.xtwy - &bk * &r.ztwy;
            yhy += r.ytwy - r.ztwy.dot(&(&k * &r.ztwy));
            sks.push(k);
        }
        let chol_c = c.cholesky()?;
        let beta = chol_c.solve(&cy);
        let rhr = (yhy - beta.dot(&cy)).max(0.0);
        let dof = (n - p) as f64;
        let sigma2 = rhr / dof;
        // residual indistinguishable from rounding: treat as an exact fit
        if !(rhr > 1e-12 * yhy.abs()) {
            return None;
        }
        let loglik = -0.5 * (dof * (LN_2PI + sigma2.ln() + 1.0) + ln_det_h + ln_det_chol(&chol_c));

        let gradient = (want_gradient && q > 0).then(|| {
            let mut grad = DVector::<f64>::zeros(q);
            for ((b, r), k) in self.blocks.iter().zip(rs).zip(&sks) {
                let gk = &b.ztwz * k;
                // Z'H⁻¹Z, X'H⁻¹Z and Z'H⁻¹r for this area
                let zhz = &b.ztwz - &gk * &b.ztwz;
                let xhz = &b.xtwz - &b.xtwz * k * &b.ztwz;
                let t = &r.ztwy - b.xtwz.tr_mul(&beta);
                let zhr = &t - &gk * &t;
                let cinv_xhz = chol_c.solve(&xhz);
                for j in 0..q {
                    let trace = zhz[(j, j)] - xhz.column(j).dot(&cinv_xhz.column(j));
                    grad[j] += -0.5 * trace + 0.5 * zhr[j] * zhr[j] / sigma2;
                }
            }
            grad
        });
        Some(Evaluation {
            loglik,
            beta,
            sigma2,
            gradient,
        })
    }

    fn gamma_of(&self, eta: &[f64], active: &[bool]) -> Vec<f64> {
        (0..self.q)
            .map(|k| {
                if active[k] {
                    eta[k].exp() / self.z_scale[k]
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// ∂ℓ/∂η on the active coordinates (zero elsewhere).
    fn eta_gradient(&self, eta: &[f64], active: &[bool], rs: &[ResponseStats]) -> Option<(f64, DVector<f64>)> {
        let gamma = self.gamma_of(eta, active);
        let e = self.evaluate(&gamma, rs, true)?;
        let g = e.gradient.unwrap();
        let out = DVector::from_iterator(
            self.q,
            (0..self.q).map(|k| if active[k] { gamma[k] * g[k] } else { 0.0 }),
        );
        Some((e.loglik, out))
    }

    pub fn fit(&self) -> Result<FittedLmm> {
        self.fit_response(&self.design.y)
    }

    /// Fits the model to an alternative response on the same design.
    pub fn fit_response(&self, y: &DVector<f64>) -> Result<FittedLmm> {
        if y.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "response has {} entries, design has {} rows",
                y.len(),
                self.n
            )));
        }
        // Work with a centred response: the intercept column absorbs the
        // shift exactly, and the sufficient statistics no longer depend on
        // the response's location (wage currency, price level).
        let shift = if self.n > 0 { y.mean() } else { 0.0 };
        let yc = y.add_scalar(-shift);
        let mut fit = self.fit_centred(&yc)?;
        fit.beta[0] += shift;
        Ok(fit)
    }

    fn fit_centred(&self, y: &DVector<f64>) -> Result<FittedLmm> {
        let rs = self.response_stats(y);
        let zeros = vec![0.0; self.q];
        let Some(at_zero) = self.evaluate(&zeros, &rs, self.q > 0) else {
            return Ok(self.exact_fit(&rs));
        };
        if self.q == 0 || self.z_scale.iter().all(|&s| s == 0.0) {
            return Ok(self.finish(y, &rs, &zeros, at_zero, true, 0));
        }

        let q = self.q;
        let opts = self.options;
        let mut active: Vec<bool> = self.z_scale.iter().map(|&s| s > 0.0).collect();
        let mut eta = vec![0.1f64.ln(); q];
        let mut iterations = 0;
        let mut converged = false;
        // ℓ differences below this are rounding, not signal
        let noise = |ll: f64| 1e-12 * ll.abs().max(1.0);

        'rounds: for _round in 0..5 {
            let Some((mut ll, mut g)) = self.eta_gradient(&eta, &active, &rs) else {
                break;
            };
            let mut close = false;
            while iterations < opts.max_iterations {
                iterations += 1;
                // Coordinates pinned at the lower bound that still push down leave the active set.
                for k in 0..q {
                    if active[k] && eta[k] <= LOG_RATIO_MIN + 1e-9 && g[k] <= 0.0 {
                        active[k] = false;
                    }
                }
                if !active.iter().any(|&a| a) {
                    // every ratio sits at zero: a boundary optimum
                    converged = true;
                    break;
                }
                let idx: Vec<usize> = (0..q).filter(|&k| active[k]).collect();
                let m = idx.len();
                let h = 1e-4;
                let mut hess = DMatrix::<f64>::zeros(m, m);
                for (c, &k) in idx.iter().enumerate() {
                    let mut up = eta.clone();
                    up[k] += h;
                    let mut dn = eta.clone();
                    dn[k] -= h;
                    let (Some((_, gu)), Some((_, gd))) =
                        (self.eta_gradient(&up, &active, &rs), self.eta_gradient(&dn, &active, &rs))
                    else {
                        break 'rounds;
                    };
                    for (r, &j) in idx.iter().enumerate() {
                        hess[(r, c)] = (gu[j] - gd[j]) / (2.0 * h);
                    }
                }
                let hess = (&hess + hess.transpose()) * 0.5;
                let eig = SymmetricEigen::new(hess);
                let floor = 1e-8 * (1.0 + eig.eigenvalues.amax());
                let gsub = DVector::from_iterator(m, idx.iter().map(|&k| g[k]));
                let proj = eig.eigenvectors.tr_mul(&gsub);
                let scaled = DVector::from_iterator(
                    m,
                    proj.iter().zip(eig.eigenvalues.iter()).map(|(p, l)| p / l.abs().max(floor)),
                );
                let mut step = &eig.eigenvectors * scaled;
                let longest = step.amax();
                if longest > 3.0 {
                    step *= 3.0 / longest;
                }

                let mut t = 1.0;
                let mut accepted = None;
                for _ in 0..40 {
                    let mut trial = eta.clone();
                    for (c, &k) in idx.iter().enumerate() {
                        trial[k] = (eta[k] + t * step[c]).clamp(LOG_RATIO_MIN, LOG_RATIO_MAX);
                    }
                    if let Some((ll_t, g_t)) = self.eta_gradient(&trial, &active, &rs) {
                        if ll_t >= ll - noise(ll) {
                            accepted = Some((trial, ll_t, g_t));
                            break;
                        }
                    }
                    t *= 0.5;
                }
                let gmax = idx.iter().map(|&k| g[k].abs()).fold(0.0, f64::max);
                let Some((trial, ll_t, g_t)) = accepted else {
                    // No ascent possible from here: a numerical optimum.
                    converged = gmax < 1e-4;
                    break;
                };
                let change = (ll_t - ll).abs();
                eta = trial;
                ll = ll_t;
                g = g_t;
                let gmax = (0..q).filter(|&k| active[k]).map(|k| g[k].abs()).fold(0.0, f64::max);
                let pinned = (0..q)
                    .filter(|&k| active[k])
                    .all(|k| eta[k] <= LOG_RATIO_MIN + 1e-9 || eta[k] >= LOG_RATIO_MAX - 1e-9 || g[k].abs() < 1e-6);
                // Stop one Newton step after the test first passes, so the
                // result does not hinge on which side of the threshold
                // rounding put the previous iterate.
                if change <= opts.tolerance * ll.abs().max(1.0) && (gmax < 1e-6 || pinned) {
                    if close {
                        converged = true;
                        break;
                    }
                    close = true;
                } else {
                    close = false;
                }
            }

            // Boundary check: a ratio goes to zero when that does not lower ℓ.
            let mut changed = false;
            for k in 0..q {
                if !active[k] {
                    continue;
                }
                let mut trial = active.clone();
                trial[k] = false;
                let e = self.evaluate(&self.gamma_of(&eta, &trial), &rs, false);
                if let Some(e) = e {
                    if e.loglik >= ll - 1e-10 * ll.abs().max(1.0) {
                        active = trial;
                        ll = e.loglik;
                        changed = true;
                    }
                }
            }
            // A zeroed ratio whose one-sided derivative is positive comes back.
            let gamma = self.gamma_of(&eta, &active);
            if let Some(e) = self.evaluate(&gamma, &rs, true) {
                let grad = e.gradient.unwrap();
                for k in 0..q {
                    if !active[k] && self.z_scale[k] > 0.0 && grad[k] * self.z_scale[k] > 1e-6 {
                        active[k] = true;
                        eta[k] = LOG_RATIO_MIN + 2.0;
                        changed = true;
                    }
                }
            }
            if !changed || iterations >= opts.max_iterations {
                break;
            }
            converged = false;
        }

        let gamma = self.gamma_of(&eta, &active);
        match self.evaluate(&gamma, &rs, false) {
            Some(e) => Ok(self.finish(y, &rs, &gamma, e, converged, iterations)),
            None => Ok(self.finish(y, &rs, &zeros, at_zero, false, iterations)),
        }
    }

    /// Response reproduced exactly by the fixed part: no residual variance.
    fn exact_fit(&self, rs: &[ResponseStats]) -> FittedLmm {
        let mut c = DMatrix::<f64>::zeros(self.p, self.p);
        let mut cy = DVector::<f64>::zeros(self.p);
        for (b, r) in self.blocks.iter().zip(rs) {
            c += &b.xtwx;
            cy += &r.xtwy;
        }
        let beta = c.cholesky().map(|ch| ch.solve(&cy)).unwrap_or(cy);
        let d = self.design;
        FittedLmm {
            spec: d.spec.clone(),
            gender: d.gender,
            x_names: d.x_names.clone(),
            z_names: d.z_names.clone(),
            beta,
            u_hat: DMatrix::zeros(d.n_areas(), self.q),
            vc: VarianceComponents {
                sigma_u: DMatrix::zeros(self.q, self.q),
                sigma_e2: 0.0,
            },
            areas: d.areas.clone(),
            area_seen: seen(d),
            loglik_restricted: f64::INFINITY,
            converged: true,
            iterations: 0,
        }
    }

    fn finish(
        &self,
        _y: &DVector<f64>,
        rs: &[ResponseStats],
        gamma: &[f64],
        e: Evaluation,
        converged: bool,
        iterations: usize,
    ) -> FittedLmm {
        let d = self.design;
        let q = self.q;
        let s = DVector::from_iterator(q, gamma.iter().map(|g| g.sqrt()));
        let mut u_hat = DMatrix::zeros(d.n_areas(), q);
        if q > 0 {
            for (b, r) in self.blocks.iter().zip(rs) {
                let t = &r.ztwy - b.xtwz.tr_mul(&e.beta);
                let u = s_minv_s(&b.ztwz, &s) * t;
                u_hat.row_mut(b.area).copy_from(&u.transpose());
            }
        }
        let tau: Vec<f64> = gamma.iter().map(|g| g * e.sigma2).collect();
        FittedLmm {
            spec: d.spec.clone(),
            gender: d.gender,
            x_names: d.x_names.clone(),
            z_names: d.z_names.clone(),
            beta: e.beta,
            u_hat,
            vc: VarianceComponents {
                sigma_u: DMatrix::from_diagonal(&DVector::from_vec(tau)),
                sigma_e2: e.sigma2,
            },
            areas: d.areas.clone(),
            area_seen: seen(d),
            loglik_restricted: e.loglik,
            converged,
            iterations,
        }
    }

    /// Restricted log-likelihood at explicit variance components.
    pub fn restricted_loglik(&self, sigma_u2: &[f64], sigma_e2: f64) -> Option<f64> {
        let rs = self.response_stats(&self.design.y);
        let gamma: Vec<f64> = sigma_u2.iter().map(|t| t / sigma_e2).collect();
        let e = self.evaluate(&gamma, &rs, false)?;
        // ℓ(θ) from the profiled value: swap σ̂² for the requested σ².
        let dof = (self.n - self.p) as f64;
        let rhr = e.sigma2 * dof;
        Some(e.loglik + 0.5 * dof * (e.sigma2.ln() + 1.0) - 0.5 * (dof * sigma_e2.ln() + rhr / sigma_e2))
    }
}

fn seen(d: &DesignMatrices) -> Vec<bool> {
    let mut out = vec![false; d.n_areas()];
    for b in &d.blocks {
        out[b.area] = true;
    }
    out
}

/// `S (I + S G S)⁻¹ S` for diagonal `S`.
fn s_minv_s(g: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    let q = s.len();
    let mut m = DMatrix::from_fn(q, q, |i, j| s[i] * g[(i, j)] * s[j]);
    for i in 0..q {
        m[(i, i)] += 1.0;
    }
    let mut k = m.cholesky().expect("I + SGS is positive definite").inverse();
    for i in 0..q {
        for j in 0..q {
            k[(i, j)] *= s[i] * s[j];
        }
    }
    k
}

/// Fits the design's model by REML with default options.
pub fn fit_reml(design: &DesignMatrices) -> Result<FittedLmm> {
    RemlProblem::new(design)?.fit()
}

/// Inverse and log-determinant of one area's `V_d`, in Woodbury form.
#[derive(Debug, Clone)]
pub struct BlockInverse {
    sigma2: f64,
    /// `Γ^½ M⁻¹ Γ^½`
    sks: DMatrix<f64>,
    pub ln_det: f64,
}

impl FittedLmm {
    pub fn p(&self) -> usize {
        self.beta.len()
    }

    pub fn q(&self) -> usize {
        self.u_hat.ncols()
    }

    pub fn label(&self) -> &str {
        &self.spec.label
    }

    pub fn n_parameters(&self) -> usize {
        self.p() + self.q()
    }

    pub fn area_index(&self, code: &str) -> Option<usize> {
        self.areas.iter().position(|a| a == code)
    }

    pub fn random_effect(&self, area: usize) -> DVector<f64> {
        self.u_hat.row(area).transpose()
    }

    /// `x̄β̂ + z̄û_d` for the named area.
    pub fn conditional_mean(&self, xbar: &DVector<f64>, zbar: &DVector<f64>, area: &str) -> Result<f64> {
        let d = self.area_index(area).ok_or_else(|| Error::UnknownArea(area.to_string()))?;
        self.conditional_mean_at(xbar, zbar, d)
    }

    pub(crate) fn conditional_mean_at(&self, xbar: &DVector<f64>, zbar: &DVector<f64>, area: usize) -> Result<f64> {
        if xbar.len() != self.p() || zbar.len() != self.q() {
            return Err(Error::DimensionMismatch(format!(
                "means have ({}, {}) entries, fit expects ({}, {})",
                xbar.len(),
                zbar.len(),
                self.p(),
                self.q()
            )));
        }
        let mut value = xbar.dot(&self.beta);
        if self.q() > 0 {
            value += zbar.dot(&self.u_hat.row(area).transpose());
        }
        Ok(value)
    }

    pub fn cell_mean(&self, cell: &CellMeans, area: usize) -> Result<f64> {
        self.conditional_mean_at(&cell.xbar, &cell.zbar, area)
    }

    fn check_design(&self, design: &DesignMatrices) -> Result<()> {
        if design.p() != self.p() || design.q() != self.q() {
            return Err(Error::DimensionMismatch(format!(
                "design has (p, q) = ({}, {}), fit has ({}, {})",
                design.p(),
                design.q(),
                self.p(),
                self.q()
            )));
        }
        Ok(())
    }

    /// Maps each design area to the fit's random-effect row, if any.
    fn area_map(&self, design: &DesignMatrices) -> Vec<Option<usize>> {
        if design.areas == self.areas {
            (0..self.areas.len()).map(Some).collect()
        } else {
            design.areas.iter().map(|a| self.area_index(a)).collect()
        }
    }

    /// Unit-level fitted values `X_i β̂ + Z_i û_d`; unknown areas use `û = 0`.
    pub fn predict_units(&self, design: &DesignMatrices) -> Result<DVector<f64>> {
        self.check_design(design)?;
        let mut out = &design.x * &self.beta;
        if self.q() > 0 {
            let map = self.area_map(design);
            for b in &design.blocks {
                if let Some(a) = map[b.area] {
                    let u = self.u_hat.row(a).transpose();
                    let zu = design.z.rows(b.start, b.len) * u;
                    let mut seg = out.rows_mut(b.start, b.len);
                    seg += &zu;
                }
            }
        }
        Ok(out)
    }

    /// Draws `Xβ̂ + Zu* + e*` with `u* ~ N(0, Σ̂_u)` per area and
    /// `e*_i ~ N(0, σ̂²/w_i)`.
    pub fn simulate_response(&self, design: &DesignMatrices, seed: u64) -> Result<DVector<f64>> {
        self.check_design(design)?;
        let mut rng = seed::rng(seed);
        let sd_u: Vec<f64> = self.vc.tau().iter().map(|t| t.max(0.0).sqrt()).collect();
        let mut y = &design.x * &self.beta;
        for b in &design.blocks {
            let u = DVector::from_iterator(
                sd_u.len(),
                sd_u.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)),
            );
            if !u.is_empty() {
                let zu = design.z.rows(b.start, b.len) * u;
                let mut seg = y.rows_mut(b.start, b.len);
                seg += &zu;
            }
        }
        let sd_e = self.vc.sigma_e2.max(0.0).sqrt();
        for i in 0..design.n() {
            let z: f64 = rng.sample(StandardNormal);
            y[i] += sd_e / design.w[i].sqrt() * z;
        }
        Ok(y)
    }

    /// `V_d = Z_d Σ̂_u Z_d' + σ̂² W_d⁻¹` for one area block.
    pub fn covariance_block(&self, design: &DesignMatrices, block: &AreaBlock) -> DMatrix<f64> {
        let zs = design.z.rows(block.start, block.len);
        let mut v = zs * &self.vc.sigma_u * zs.transpose();
        for i in 0..block.len {
            v[(i, i)] += self.vc.sigma_e2 / design.w[block.start + i];
        }
        v
    }

    pub fn block_inverse(&self, design: &DesignMatrices, block: &AreaBlock) -> Result<BlockInverse> {
        let sigma2 = self.vc.sigma_e2;
        if !(sigma2 > 0.0) {
            return Err(Error::SingularCovariance(design.areas[block.area].clone()));
        }
        let q = self.q();
        let s = DVector::from_iterator(q, self.vc.tau().iter().map(|t| (t / sigma2).max(0.0).sqrt()));
        let zs = design.z.rows(block.start, block.len);
        let wb = &design.w.as_slice()[block.range()];
        let ztwz = zs.tr_mul(&weighted_rows(&zs, wb));
        let mut m = DMatrix::from_fn(q, q, |i, j| s[i] * ztwz[(i, j)] * s[j]);
        for i in 0..q {
            m[(i, i)] += 1.0;
        }
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::SingularCovariance(design.areas[block.area].clone()))?;
        let ln_det_m = ln_det_chol(&chol);
        let mut sks = chol.inverse();
        for i in 0..q {
            for j in 0..q {
                sks[(i, j)] *= s[i] * s[j];
            }
        }
        let ln_w: f64 = wb.iter().map(|w| w.ln()).sum();
        Ok(BlockInverse {
            sigma2,
            sks,
            ln_det: block.len as f64 * sigma2.ln() + ln_det_m - ln_w,
        })
    }
}

impl BlockInverse {
    /// `V_d⁻¹ v` for a vector over the block's rows.
    pub fn apply(&self, design: &DesignMatrices, block: &AreaBlock, v: &[f64]) -> DVector<f64> {
        let wb = &design.w.as_slice()[block.range()];
        let wv = DVector::from_iterator(block.len, wb.iter().zip(v).map(|(w, x)| w * x));
        let mut out = wv.clone();
        if self.sks.nrows() > 0 {
            let zs = design.z.rows(block.start, block.len);
            let inner = &self.sks * zs.tr_mul(&wv);
            let back = zs * inner;
            for i in 0..block.len {
                out[i] -= wb[i] * back[i];
            }
        }
        out / self.sigma2
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AreaEffects {
    pub area: String,
    pub values: Vec<f64>,
}

/// JSON form of a fitted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub label: String,
    pub gender: Gender,
    pub beta: Vec<NamedValue>,
    pub sigma_e2: f64,
    pub sigma_u2: Vec<NamedValue>,
    pub random_effects: Vec<AreaEffects>,
    pub loglik_restricted: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl From<&FittedLmm> for FitSummary {
    fn from(f: &FittedLmm) -> Self {
        FitSummary {
            label: f.spec.label.clone(),
            gender: f.gender,
            beta: f
                .x_names
                .iter()
                .zip(f.beta.iter())
                .map(|(n, v)| NamedValue {
                    name: n.clone(),
                    value: *v,
                })
                .collect(),
            sigma_e2: f.vc.sigma_e2,
            sigma_u2: f
                .z_names
                .iter()
                .zip(f.vc.tau().iter())
                .map(|(n, v)| NamedValue {
                    name: n.clone(),
                    value: *v,
                })
                .collect(),
            random_effects: (0..f.areas.len())
                .filter(|&d| f.area_seen[d] && f.q() > 0)
                .map(|d| AreaEffects {
                    area: f.areas[d].clone(),
                    values: f.u_hat.row(d).iter().copied().collect(),
                })
                .collect(),
            loglik_restricted: f.loglik_restricted.is_finite().then_some(f.loglik_restricted),
            converged: f.converged,
            iterations: f.iterations,
        }
    }
}

#[cfg(test)]
mod tests;
