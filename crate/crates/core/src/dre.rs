//! Density-ratio estimation under Bregman divergences.
//!
//! A convex `h` on `r > 0` induces
//! `B_h(r* ‖ r) = h(r*) − h(r) − h′(r)(r* − r)`, and averaging it under the
//! reference distribution gives an objective whose minimizer is the true
//! ratio `π_chosen / π_ref`. Dropping the `r*`-only term leaves
//! `E_ref[h′(r) r − h(r)] − E_chosen[h′(r)]`, which needs samples only.
//! [`HKind`] carries the three instances used throughout the crate together
//! with their per-example losses `ℓ₁` (chosen side) and `ℓ₋₁` (reference
//! side) written as functions of the log-ratio `f = ln r`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_versioned, write_versioned};
use crate::linalg::solve_spd;
use crate::numeric::{sigmoid, softplus};
use crate::scalar::Real;
use crate::tabular::{Rows, TabularDomain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HKind {
    /// `h(r) = (r − 1)² / 2`
    Lsif,
    /// `h(r) = r ln r − r`
    Ukl,
    /// `h(r) = r ln r − (r + 1) ln(r + 1)`
    Bce,
}

impl HKind {
    pub const ALL: [HKind; 3] = [HKind::Lsif, HKind::Ukl, HKind::Bce];

    pub fn name(self) -> &'static str {
        match self {
            HKind::Lsif => "lsif",
            HKind::Ukl => "ukl",
            HKind::Bce => "bce",
        }
    }

    fn check_ratio<T: Real>(r: T) -> Result<()> {
        if r > T::zero() && r.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("density ratio must be positive and finite, got {r}")))
        }
    }

    pub fn h<T: Real>(self, r: T) -> Result<T> {
        Self::check_ratio(r)?;
        Ok(self.h_unchecked(r))
    }

    pub fn h_prime<T: Real>(self, r: T) -> Result<T> {
        Self::check_ratio(r)?;
        Ok(self.h_prime_unchecked(r))
    }

    pub fn h_second<T: Real>(self, r: T) -> Result<T> {
        Self::check_ratio(r)?;
        Ok(self.h_second_unchecked(r))
    }

    pub(crate) fn h_unchecked<T: Real>(self, r: T) -> T {
        match self {
            HKind::Lsif => T::half() * (r - T::one()).powi(2),
            HKind::Ukl => r * r.ln() - r,
            HKind::Bce => r * r.ln() - (r + T::one()) * r.ln_1p(),
        }
    }

    pub(crate) fn h_prime_unchecked<T: Real>(self, r: T) -> T {
        match self {
            HKind::Lsif => r - T::one(),
            HKind::Ukl => r.ln(),
            // ln(r/(r+1)) = −softplus(−ln r)
            HKind::Bce => -softplus(-r.ln()),
        }
    }

    pub(crate) fn h_second_unchecked<T: Real>(self, r: T) -> T {
        match self {
            HKind::Lsif => T::one(),
            HKind::Ukl => r.recip(),
            HKind::Bce => (r * (r + T::one())).recip(),
        }
    }

    /// Chosen-side per-example loss `ℓ₁(f)`.
    pub fn ell1<T: Real>(self, f: T) -> T {
        match self {
            HKind::Lsif => -f.exp(),
            HKind::Ukl => -f,
            HKind::Bce => softplus(-f),
        }
    }

    /// Reference-side per-example loss `ℓ₋₁(f)`.
    pub fn ell_neg1<T: Real>(self, f: T) -> T {
        match self {
            HKind::Lsif => T::half() * (T::two() * f).exp(),
            HKind::Ukl => f.exp(),
            HKind::Bce => softplus(f),
        }
    }

    /// `dℓ₁/df`.
    pub fn ell1_grad<T: Real>(self, f: T) -> T {
        match self {
            HKind::Lsif => -f.exp(),
            HKind::Ukl => -T::one(),
            HKind::Bce => -sigmoid(-f),
        }
    }

    /// `dℓ₋₁/df`.
    pub fn ell_neg1_grad<T: Real>(self, f: T) -> T {
        match self {
            HKind::Lsif => (T::two() * f).exp(),
            HKind::Ukl => f.exp(),
            HKind::Bce => sigmoid(f),
        }
    }

    /// `h′(r) r − h(r)`, the reference-side Bregman term.
    pub(crate) fn conjugate_term<T: Real>(self, r: T) -> T {
        self.h_prime_unchecked(r) * r - self.h_unchecked(r)
    }
}

impl fmt::Display for HKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lsif" => Ok(HKind::Lsif),
            "ukl" | "kliep" => Ok(HKind::Ukl),
            "bce" => Ok(HKind::Bce),
            other => Err(Error::invalid(format!("unknown h-function `{other}` (expected lsif, ukl, bce)"))),
        }
    }
}

/// Tabular ratio model `r(x, y) = exp(g(x, y))`; positive by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioModel<T> {
    pub log_ratio: Rows<T>,
}

impl<T: Real> RatioModel<T> {
    pub fn constant(domain: &TabularDomain<T>, log_ratio: T) -> Self {
        Self {
            log_ratio: (0..domain.num_prompts())
                .map(|x| vec![log_ratio; domain.num_responses(x)])
                .collect(),
        }
    }

    /// The exact ratio `π_chosen / π_ref` of a domain.
    pub fn oracle(domain: &TabularDomain<T>) -> Result<Self> {
        Ok(Self {
            log_ratio: domain.log_density_ratio()?,
        })
    }

    pub fn ratio(&self, x: usize, y: usize) -> T {
        self.log_ratio[x][y].exp()
    }

    pub fn ratios(&self) -> Rows<T> {
        self.log_ratio
            .iter()
            .map(|row| row.iter().map(|g| g.exp()).collect())
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_versioned(path, "ratio-model", self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_versioned(path, "ratio-model")
    }
}

/// `(prompt, chosen, rejected)` as indices into a [`TabularDomain`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndexedPair {
    pub prompt: usize,
    pub chosen: usize,
    pub rejected: usize,
}

/// Which responses stand in for samples from the reference distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceSample {
    /// Rejected responses only.
    #[default]
    Rejected,
    /// Chosen and rejected responses, equally weighted.
    Mixed,
}

/// Exact `Σ_x w(x) Σ_y π_ref(y|x) B_h(r*(x,y) ‖ r(x,y))` with uniform `w`.
pub fn bregman_divergence<T: Real>(
    h: HKind,
    r_star: &RatioModel<T>,
    r_model: &RatioModel<T>,
    domain: &TabularDomain<T>,
) -> Result<T> {
    domain.check_shape(&r_star.log_ratio, "target ratio")?;
    domain.check_shape(&r_model.log_ratio, "model ratio")?;
    let mut total = T::zero();
    for x in 0..domain.num_prompts() {
        for (y, p) in domain.pi_ref(x).iter().enumerate() {
            let a = r_star.ratio(x, y);
            let b = r_model.ratio(x, y);
            if !(a > T::zero() && b > T::zero() && a.is_finite() && b.is_finite()) {
                return Err(Error::Support(format!("prompt {x}, response {y}: ratio {a} vs {b}")));
            }
            let term = h.h_unchecked(a) - h.h_unchecked(b) - h.h_prime_unchecked(b) * (a - b);
            total += p * term;
        }
    }
    Ok((total / T::from_usize_lossy(domain.num_prompts())).max(T::zero()))
}

fn check_batch<T: Real>(model: &RatioModel<T>, batch: &[IndexedPair]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for p in batch {
        let row = model
            .log_ratio
            .get(p.prompt)
            .ok_or_else(|| Error::invalid(format!("prompt {} out of range", p.prompt)))?;
        if p.chosen >= row.len() || p.rejected >= row.len() {
            return Err(Error::invalid(format!("response index out of range for prompt {}", p.prompt)));
        }
    }
    Ok(())
}

/// Sample-based density-ratio loss in per-example form:
/// mean of `ℓ₁(g_w) + ℓ₋₁(g_l)` (or `ℓ₁(g_w) + ½(ℓ₋₁(g_w) + ℓ₋₁(g_l))`
/// when the reference expectation uses both responses).
///
/// For LSIF this is `½ r_l² − r_w`; for UKL it is `r_l − ln r_w`.
pub fn empirical_dre_loss<T: Real>(
    h: HKind,
    model: &RatioModel<T>,
    batch: &[IndexedPair],
    reference: ReferenceSample,
) -> Result<T> {
    check_batch(model, batch)?;
    let total: T = batch
        .iter()
        .map(|p| {
            let gw = model.log_ratio[p.prompt][p.chosen];
            let gl = model.log_ratio[p.prompt][p.rejected];
            let ref_term = match reference {
                ReferenceSample::Rejected => h.ell_neg1(gl),
                ReferenceSample::Mixed => T::half() * (h.ell_neg1(gw) + h.ell_neg1(gl)),
            };
            h.ell1(gw) + ref_term
        })
        .sum();
    Ok(total / T::from_usize_lossy(batch.len()))
}

/// The same loss written directly from `h`:
/// mean of `−h′(r_w) + h′(r_l) r_l − h(r_l)`. Differs from
/// [`empirical_dre_loss`] by an `h`-dependent constant (½ for LSIF, 0 for
/// UKL and BCE).
pub fn bregman_empirical_loss<T: Real>(h: HKind, model: &RatioModel<T>, batch: &[IndexedPair]) -> Result<T> {
    check_batch(model, batch)?;
    let total: T = batch
        .iter()
        .map(|p| {
            let rw = model.ratio(p.prompt, p.chosen);
            let rl = model.ratio(p.prompt, p.rejected);
            -h.h_prime_unchecked(rw) + h.conjugate_term(rl)
        })
        .sum();
    Ok(total / T::from_usize_lossy(batch.len()))
}

/// Exact-expectation objective
/// `mean_x [ Σ_y π_ref h′(r) r − h(r) − π_chosen h′(r) ]`.
pub fn exact_dre_objective<T: Real>(h: HKind, model: &RatioModel<T>, domain: &TabularDomain<T>) -> Result<T> {
    domain.check_shape(&model.log_ratio, "ratio model")?;
    let mut total = T::zero();
    for x in 0..domain.num_prompts() {
        for y in 0..domain.num_responses(x) {
            total += coordinate_objective(h, model.log_ratio[x][y], domain.pi_ref(x).get(y), domain.pi_chosen(x).get(y));
        }
    }
    Ok(total / T::from_usize_lossy(domain.num_prompts()))
}

fn coordinate_objective<T: Real>(h: HKind, g: T, p_ref: T, p_chosen: T) -> T {
    let r = g.exp();
    p_ref * h.conjugate_term(r) - p_chosen * h.h_prime_unchecked(r)
}

fn coordinate_gradient<T: Real>(h: HKind, g: T, p_ref: T, p_chosen: T) -> T {
    let r = g.exp();
    h.h_second_unchecked(r) * r * (p_ref * r - p_chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    /// Initial per-coordinate step size.
    pub lr: f64,
    /// Write a log row every `log_every` steps (and at the last step).
    pub log_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1.0,
            log_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitLogRow {
    pub step: usize,
    pub objective: f64,
    pub max_ratio_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioFit<T> {
    pub model: RatioModel<T>,
    pub log: Vec<FitLogRow>,
}

impl FitLogRow {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log row serializes")
    }
}

/// Fits a tabular log-ratio by gradient descent on
/// [`exact_dre_objective`], starting from `r ≡ 1`.
///
/// The objective is a sum of independent one-dimensional terms, so each
/// coordinate keeps its own step size: grown by 1.5× after an accepted step
/// and halved until the sufficient-decrease test
/// `φ(g − sφ′) ≤ φ(g) − ½ s φ′²` holds.
pub fn fit_tabular_ratio<T: Real>(h: HKind, domain: &TabularDomain<T>, cfg: &FitConfig) -> Result<RatioFit<T>> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::invalid("lr must be positive"));
    }
    let oracle = domain.density_ratio();
    let mut model = RatioModel::constant(domain, T::zero());
    let mut steps: Rows<T> = model.log_ratio.iter().map(|r| vec![T::lit(cfg.lr); r.len()]).collect();
    let weight = T::one() / T::from_usize_lossy(domain.num_prompts());
    let log_every = cfg.log_every.max(1);
    let mut log = Vec::new();

    let record = |step: usize, model: &RatioModel<T>, log: &mut Vec<FitLogRow>| -> Result<()> {
        let objective = exact_dre_objective(h, model, domain)?;
        if !objective.is_finite() {
            return Err(Error::Diverged {
                step,
                message: format!("objective became {objective}"),
            });
        }
        let err = max_abs_error(&model.ratios(), &oracle);
        log.push(FitLogRow {
            step,
            objective: objective.to_f64_lossy(),
            max_ratio_error: Some(err.to_f64_lossy()),
        });
        Ok(())
    };

    record(0, &model, &mut log)?;
    for step in 1..=cfg.steps {
        for x in 0..domain.num_prompts() {
            let pr = domain.pi_ref(x);
            let pc = domain.pi_chosen(x);
            for y in 0..domain.num_responses(x) {
                let (a, b) = (weight * pr.get(y), weight * pc.get(y));
                let g = model.log_ratio[x][y];
                let phi = coordinate_objective(h, g, a, b);
                let d = coordinate_gradient(h, g, a, b);
                if !d.is_finite() || !phi.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        message: format!("prompt {x}, response {y}: gradient {d}"),
                    });
                }
                if d == T::zero() {
                    continue;
                }
                let s = &mut steps[x][y];
                for _ in 0..60 {
                    let cand = g - *s * d;
                    let next = coordinate_objective(h, cand, a, b);
                    if next.is_finite() && next <= phi - T::half() * *s * d * d {
                        model.log_ratio[x][y] = cand;
                        *s *= T::lit(1.5);
                        break;
                    }
                    *s *= T::half();
                }
                if *s < T::lit(1e-300) {
                    *s = T::lit(cfg.lr);
                }
            }
        }
        if step % log_every == 0 || step == cfg.steps {
            record(step, &model, &mut log)?;
        }
    }
    Ok(RatioFit { model, log })
}

fn max_abs_error<T: Real>(a: &[Vec<T>], b: &[Vec<T>]) -> T {
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(&u, &v)| (u - v).abs()))
        .fold(T::zero(), T::max)
}

/// Largest elementwise `|r_fit − π_chosen/π_ref|`.
pub fn max_ratio_error<T: Real>(model: &RatioModel<T>, domain: &TabularDomain<T>) -> T {
    max_abs_error(&model.ratios(), &domain.density_ratio())
}

/// `E_ref[r]` per prompt; equals 1 at the normalized (KLIEP) solution.
pub fn kliep_normalization<T: Real>(model: &RatioModel<T>, domain: &TabularDomain<T>) -> Result<Vec<T>> {
    domain.check_shape(&model.log_ratio, "ratio model")?;
    Ok((0..domain.num_prompts())
        .map(|x| {
            domain
                .pi_ref(x)
                .iter()
                .enumerate()
                .map(|(y, p)| p * model.ratio(x, y))
                .sum()
        })
        .collect())
}

/// Contrastive loss with one negative:
/// `−ln[e^{f_w/β} / (e^{f_w/β} + e^{f_l/β})] = softplus((f_l − f_w)/β)`.
pub fn cpc_loss<T: Real>(beta: T, f_w: T, f_l: T) -> T {
    softplus((f_l - f_w) / beta)
}

/// Tabular contrastive critic `f(x, y)` with temperature `β`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpcCritic<T> {
    pub scores: Rows<T>,
    pub beta: T,
}

impl<T: Real> CpcCritic<T> {
    pub fn new(scores: Rows<T>, beta: T) -> Result<Self> {
        if !(beta > T::zero() && beta.is_finite()) {
            return Err(Error::invalid("critic beta must be positive"));
        }
        if scores.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("critic score".into()));
        }
        Ok(Self { scores, beta })
    }

    pub fn pair_loss(&self, pair: IndexedPair) -> T {
        let row = &self.scores[pair.prompt];
        cpc_loss(self.beta, row[pair.chosen], row[pair.rejected])
    }
}

/// Exact CPC risk with `y_w ~ π_chosen`, `y_l ~ π_ref`, mean over prompts.
pub fn exact_cpc_objective<T: Real>(critic: &CpcCritic<T>, domain: &TabularDomain<T>) -> Result<T> {
    domain.check_shape(&critic.scores, "critic")?;
    let mut total = T::zero();
    for x in 0..domain.num_prompts() {
        let s = &critic.scores[x];
        for (a, pc) in domain.pi_chosen(x).iter().enumerate() {
            for (b, pr) in domain.pi_ref(x).iter().enumerate() {
                total += pc * pr * cpc_loss(critic.beta, s[a], s[b]);
            }
        }
    }
    Ok(total / T::from_usize_lossy(domain.num_prompts()))
}

/// Minimizes the exact CPC risk of one prompt over `u = f/β`, holding `u_0`
/// fixed (the risk is invariant to shifting every score). Newton's method on
/// the remaining coordinates with a backtracking line search; the Hessian is
/// a weighted graph Laplacian, positive definite once one node is pinned.
fn fit_cpc_prompt<T: Real>(pc: &[T], pr: &[T], max_iter: usize) -> Result<Vec<T>> {
    let n = pc.len();
    let risk = |u: &[T]| -> T {
        let mut s = T::zero();
        for a in 0..n {
            for b in 0..n {
                s += pc[a] * pr[b] * softplus(u[b] - u[a]);
            }
        }
        s
    };
    let mut u = vec![T::zero(); n];
    for iter in 0..max_iter {
        let mut grad = vec![T::zero(); n];
        let mut hess = vec![T::zero(); n * n];
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let c = pc[a] * pr[b];
                let z = sigmoid(u[b] - u[a]);
                grad[b] += c * z;
                grad[a] -= c * z;
                let w = c * z * (T::one() - z);
                hess[a * n + a] += w;
                hess[b * n + b] += w;
                hess[a * n + b] -= w;
                hess[b * n + a] -= w;
            }
        }
        let gmax = grad[1..].iter().fold(T::zero(), |m, g| m.max(g.abs()));
        if !gmax.is_finite() {
            return Err(Error::Diverged {
                step: iter,
                message: "critic gradient is not finite".into(),
            });
        }
        if gmax < T::lit(1e-15) {
            break;
        }
        let m = n - 1;
        let reduced: Vec<T> = (1..n).flat_map(|i| (1..n).map(move |j| (i, j))).map(|(i, j)| hess[i * n + j]).collect();
        debug_assert_eq!(reduced.len(), m * m);
        let dir = solve_spd(&reduced, &grad[1..])?;
        let current = risk(&u);
        let slope: T = dir.iter().zip(&grad[1..]).map(|(d, g)| *d * *g).sum();
        let mut t = T::one();
        let mut moved = false;
        for _ in 0..50 {
            let mut cand = u.clone();
            for i in 1..n {
                cand[i] -= t * dir[i - 1];
            }
            if risk(&cand) <= current - T::lit(1e-4) * t * slope {
                u = cand;
                moved = true;
                break;
            }
            t *= T::half();
        }
        if !moved {
            break;
        }
    }
    Ok(u)
}

/// Fits a tabular critic by exact CPC minimization at temperature `β`.
pub fn fit_cpc_critic<T: Real>(domain: &TabularDomain<T>, beta: T) -> Result<CpcCritic<T>> {
    if !(beta > T::zero()) {
        return Err(Error::invalid("beta must be positive"));
    }
    let scores = (0..domain.num_prompts())
        .map(|x| {
            let u = fit_cpc_prompt(domain.pi_chosen(x).as_slice(), domain.pi_ref(x).as_slice(), 100)?;
            Ok(u.into_iter().map(|v| v * beta).collect())
        })
        .collect::<Result<Rows<T>>>()?;
    CpcCritic::new(scores, beta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CpcReport<T> {
    /// Max over prompts and response pairs of
    /// `|(f(y) − f(y′))/β − (ln r*(y) − ln r*(y′))|`.
    pub max_pair_error: T,
    /// Per-prompt `mean_y(ln r* − f/β)`, the additive offset left free by CPC.
    pub offsets: Vec<T>,
    pub max_abs_offset: T,
    pub pass: bool,
}

/// Compares a critic against the log density ratio up to per-prompt shifts.
pub fn critic_report<T: Real>(critic: &CpcCritic<T>, domain: &TabularDomain<T>, tol: T) -> Result<CpcReport<T>> {
    domain.check_shape(&critic.scores, "critic")?;
    let log_r = domain.log_density_ratio()?;
    let mut max_pair_error = T::zero();
    let mut offsets = Vec::with_capacity(domain.num_prompts());
    for (x, lr) in log_r.iter().enumerate() {
        let u: Vec<T> = critic.scores[x].iter().map(|&f| f / critic.beta).collect();
        for a in 0..u.len() {
            for b in a + 1..u.len() {
                let err = ((u[a] - u[b]) - (lr[a] - lr[b])).abs();
                max_pair_error = max_pair_error.max(err);
            }
        }
        let off = lr.iter().zip(&u).map(|(&l, &v)| l - v).sum::<T>() / T::from_usize_lossy(u.len());
        offsets.push(off);
    }
    let max_abs_offset = offsets.iter().fold(T::zero(), |m, o| m.max(o.abs()));
    Ok(CpcReport {
        pass: max_pair_error < tol,
        max_pair_error,
        offsets,
        max_abs_offset,
    })
}

/// Fits the critic and checks that `f/β` equals `ln r*` up to `c(x)`.
pub fn cpc_optimal_critic_check<T: Real>(domain: &TabularDomain<T>, beta: T, tol: T) -> Result<CpcReport<T>> {
    let critic = fit_cpc_critic(domain, beta)?;
    critic_report(&critic, domain, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::tests::random_domain;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn table_values_at_identity_point() {
        assert_eq!(HKind::Lsif.h(1.0_f64).unwrap(), 0.0);
        assert_eq!(HKind::Lsif.ell1(0.0_f64), -1.0);
        assert_eq!(HKind::Lsif.ell_neg1(0.0_f64), 0.5);

        assert_eq!(HKind::Ukl.h(1.0_f64).unwrap(), -1.0);
        assert_eq!(HKind::Ukl.ell1(0.0_f64), 0.0);
        assert_eq!(HKind::Ukl.ell_neg1(0.0_f64), 1.0);

        assert_abs_diff_eq!(HKind::Bce.h(1.0_f64).unwrap(), -2.0 * LN2, epsilon = 1e-15);
        assert_abs_diff_eq!(HKind::Bce.h(1.0_f64).unwrap(), -1.386_294_361_119_890_6, epsilon = 1e-15);
        assert_abs_diff_eq!(HKind::Bce.ell1(0.0_f64), LN2, epsilon = 1e-15);
        assert_abs_diff_eq!(HKind::Bce.ell_neg1(0.0_f64), LN2, epsilon = 1e-15);
    }

    #[test]
    fn non_positive_ratio_is_rejected() {
        for h in HKind::ALL {
            assert!(h.h(0.0_f64).is_err());
            assert!(h.h_prime(-1.0_f64).is_err());
            assert!(h.h(f64::NAN).is_err());
        }
    }

    #[test]
    fn bce_softplus_forms_do_not_overflow() {
        for f in [-700.0_f64, 700.0] {
            assert!(HKind::Bce.ell1(f).is_finite());
            assert!(HKind::Bce.ell_neg1(f).is_finite());
        }
        assert!(HKind::Bce.h_prime(1e300_f64).unwrap().is_finite());
    }

    #[test]
    fn ell_derivatives_match_central_differences() {
        let eps = 1e-6;
        for h in HKind::ALL {
            for f in [-2.0_f64, -0.3, 0.0, 0.8, 2.5] {
                let n1 = (h.ell1(f + eps) - h.ell1(f - eps)) / (2.0 * eps);
                let n2 = (h.ell_neg1(f + eps) - h.ell_neg1(f - eps)) / (2.0 * eps);
                assert_abs_diff_eq!(h.ell1_grad(f), n1, epsilon = 1e-7);
                assert_abs_diff_eq!(h.ell_neg1_grad(f), n2, epsilon = 1e-7);
                let r = f.exp();
                let nh = (h.h_prime(r + eps).unwrap() - h.h_prime(r - eps).unwrap()) / (2.0 * eps);
                assert_abs_diff_eq!(h.h_second(r).unwrap(), nh, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn h_is_convex_on_positive_reals() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for h in HKind::ALL {
            for _ in 0..1000 {
                let a: f64 = rng.gen_range(1e-3..50.0);
                let b: f64 = rng.gen_range(1e-3..50.0);
                let mid = h.h((a + b) / 2.0).unwrap();
                let chord = (h.h(a).unwrap() + h.h(b).unwrap()) / 2.0;
                assert!(mid <= chord + 1e-12);
            }
        }
    }

    #[test]
    fn ell_forms_match_bregman_terms_up_to_constants() {
        let rs = [0.05_f64, 0.3, 1.0, 2.7, 9.0];
        for h in HKind::ALL {
            let c1: Vec<f64> = rs.iter().map(|&r| h.ell1(r.ln()) + h.h_prime(r).unwrap()).collect();
            let c2: Vec<f64> = rs.iter().map(|&r| h.ell_neg1(r.ln()) - h.conjugate_term(r)).collect();
            for w in c1.windows(2).chain(c2.windows(2)) {
                assert_abs_diff_eq!(w[0], w[1], epsilon = 1e-10);
            }
        }
    }

    fn two_by_two() -> TabularDomain<f64> {
        TabularDomain::from_tables(vec![vec![0.3, 0.7]], vec![vec![0.0, 0.0]], 1.0, vec![vec![0.6, 0.4]]).unwrap()
    }

    #[test]
    fn bregman_divergence_examples() {
        let d = two_by_two();
        let oracle = RatioModel::oracle(&d).unwrap();
        for h in HKind::ALL {
            assert_eq!(bregman_divergence(h, &oracle, &oracle, &d).unwrap(), 0.0);
        }

        let one = RatioModel::constant(&d, 0.0);
        let tiny = RatioModel::constant(&d, 1e-4_f64.ln());
        let rp = 1e-4_f64;
        let term = 0.0 - (rp - 1.0).powi(2) / 2.0 - (rp - 1.0) * (1.0 - rp);
        let expected = 0.3 * term + 0.7 * term;
        assert_abs_diff_eq!(
            bregman_divergence(HKind::Lsif, &one, &tiny, &d).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn bregman_divergence_non_negative_and_zero_only_on_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = random_domain(&mut rng, 2, 4);
        for h in HKind::ALL {
            for _ in 0..1000 {
                let mk = |rng: &mut ChaCha8Rng| RatioModel {
                    log_ratio: (0..2).map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect(),
                };
                let a = mk(&mut rng);
                let b = mk(&mut rng);
                let v = bregman_divergence(h, &a, &b, &d).unwrap();
                assert!(v >= 0.0);
                assert!(v > 1e-9, "{h}: distinct models gave {v}");
                assert!(bregman_divergence(h, &a, &a, &d).unwrap() <= 1e-9);
            }
        }
    }

    #[test]
    fn empirical_loss_examples() {
        let d = two_by_two();
        let one = RatioModel::constant(&d, 0.0);
        let batch = [IndexedPair { prompt: 0, chosen: 0, rejected: 1 }];
        assert_abs_diff_eq!(
            empirical_dre_loss(HKind::Lsif, &one, &batch, ReferenceSample::Rejected).unwrap(),
            -0.5,
            epsilon = 1e-15
        );
        // E_ref[r] − E_chosen[ln r] at r ≡ 1
        let kliep = 1.0 - 0.0;
        assert_abs_diff_eq!(
            empirical_dre_loss(HKind::Ukl, &one, &batch, ReferenceSample::Rejected).unwrap(),
            kliep,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(bregman_empirical_loss(HKind::Ukl, &one, &batch).unwrap(), kliep, epsilon = 1e-15);
        assert!(empirical_dre_loss(HKind::Lsif, &one, &[], ReferenceSample::Rejected).is_err());
    }

    #[test]
    fn lsif_generic_and_reduced_forms_differ_by_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let model: RatioModel<f64> = RatioModel {
                log_ratio: (0..3).map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect(),
            };
            let batch: Vec<IndexedPair> = (0..rng.gen_range(1..10))
                .map(|_| IndexedPair {
                    prompt: rng.gen_range(0..3),
                    chosen: rng.gen_range(0..6),
                    rejected: rng.gen_range(0..6),
                })
                .collect();
            let reduced: f64 = batch
                .iter()
                .map(|p| 0.5 * model.ratio(p.prompt, p.rejected).powi(2) - model.ratio(p.prompt, p.chosen))
                .sum::<f64>()
                / batch.len() as f64;
            let table = empirical_dre_loss(HKind::Lsif, &model, &batch, ReferenceSample::Rejected).unwrap();
            let generic = bregman_empirical_loss(HKind::Lsif, &model, &batch).unwrap();
            assert_abs_diff_eq!(table, reduced, epsilon = 1e-12);
            assert_abs_diff_eq!(generic - reduced, 0.5, epsilon = 1e-12);
            for h in [HKind::Ukl, HKind::Bce] {
                let a = empirical_dre_loss(h, &model, &batch, ReferenceSample::Rejected).unwrap();
                let b = bregman_empirical_loss(h, &model, &batch).unwrap();
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn mixed_reference_sample_averages_both_responses() {
        let model = RatioModel { log_ratio: vec![vec![0.4, -0.2]] };
        let batch = [IndexedPair { prompt: 0, chosen: 0, rejected: 1 }];
        let v = empirical_dre_loss(HKind::Lsif, &model, &batch, ReferenceSample::Mixed).unwrap();
        let (rw, rl) = (0.4_f64.exp(), (-0.2_f64).exp());
        assert_abs_diff_eq!(v, -rw + 0.25 * (rw * rw + rl * rl), epsilon = 1e-15);
    }

    #[test]
    fn fit_recovers_identity_ratio() {
        let d = TabularDomain::from_tables(
            vec![vec![0.2, 0.3, 0.5]],
            vec![vec![0.0; 3]],
            1.0,
            vec![vec![0.2, 0.3, 0.5]],
        )
        .unwrap();
        for h in HKind::ALL {
            let fit = fit_tabular_ratio(h, &d, &FitConfig::default()).unwrap();
            for r in fit.model.ratios().iter().flatten() {
                assert!((r - 1.0_f64).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn fit_recovers_random_ratio_for_each_h() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let d = random_domain(&mut rng, 4, 8);
        for h in HKind::ALL {
            let fit = fit_tabular_ratio(h, &d, &FitConfig::default()).unwrap();
            let err = max_ratio_error(&fit.model, &d);
            assert!(err < 1e-3, "{h}: {err}");
            let last = fit.log.last().unwrap();
            assert_eq!(last.step, FitConfig::default().steps);
            assert!(last.max_ratio_error.unwrap() < 1e-3);
        }
    }

    #[test]
    fn fit_reports_divergence_via_bad_lr() {
        let d = two_by_two();
        let cfg = FitConfig { lr: -1.0, ..FitConfig::default() };
        assert!(fit_tabular_ratio(HKind::Lsif, &d, &cfg).is_err());
    }

    #[test]
    fn ukl_fit_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = random_domain(&mut rng, 3, 5);
        let fit = fit_tabular_ratio(HKind::Ukl, &d, &FitConfig::default()).unwrap();
        for z in kliep_normalization(&fit.model, &d).unwrap() {
            assert!((z - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cpc_loss_examples() {
        assert_abs_diff_eq!(cpc_loss(0.7, 1.3_f64, 1.3), LN2, epsilon = 1e-15);
        let base = cpc_loss(0.4, 2.0_f64, -1.0);
        assert_abs_diff_eq!(cpc_loss(0.4, 2.0 + 7.3, -1.0 + 7.3), base, epsilon = 1e-14);
        let beta = 0.25_f64;
        assert_abs_diff_eq!(cpc_loss(beta, beta * 3.0_f64.ln(), 0.0), -(0.75_f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(cpc_loss(beta, beta * 3.0_f64.ln(), 0.0), 0.287_682_072_451_780_9, epsilon = 1e-15);
    }

    #[test]
    fn critic_recovers_log_ratio_up_to_offset() {
        let same = TabularDomain::from_tables(
            vec![vec![0.1, 0.4, 0.5]],
            vec![vec![0.0; 3]],
            1.0,
            vec![vec![0.1, 0.4, 0.5]],
        )
        .unwrap();
        let rep = cpc_optimal_critic_check(&same, 0.5, 1e-3).unwrap();
        assert!(rep.pass);
        assert!(rep.max_pair_error < 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let d = random_domain(&mut rng, 4, 8);
        let rep = cpc_optimal_critic_check(&d, 0.1, 1e-3).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.max_abs_offset > 0.1, "offsets {:?}", rep.offsets);
    }

    #[test]
    fn fitted_critic_minimizes_exact_risk() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_domain(&mut rng, 2, 5);
        let critic = fit_cpc_critic(&d, 0.3).unwrap();
        let best = exact_cpc_objective(&critic, &d).unwrap();
        for _ in 0..50 {
            let mut other = critic.clone();
            for s in other.scores.iter_mut().flatten() {
                *s += rng.gen_range(-0.05..0.05);
            }
            assert!(exact_cpc_objective(&other, &d).unwrap() >= best - 1e-15);
        }
        let mut shifted = critic.clone();
        for s in shifted.scores[1].iter_mut() {
            *s += 3.0;
        }
        assert_abs_diff_eq!(exact_cpc_objective(&shifted, &d).unwrap(), best, epsilon = 1e-14);
    }

    #[test]
    fn ratio_model_file_round_trip() {
        let d = two_by_two();
        let m = RatioModel::oracle(&d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ratio.json");
        m.save(&p).unwrap();
        assert_eq!(RatioModel::<f64>::load(&p).unwrap(), m);
    }
}
