//! Exact computations over small enumerated prompt/response worlds.
//!
//! Every expectation here is a finite sum over at most
//! [`MAX_RESPONSES`] responses per prompt, so the identities linking reward
//! learning, reverse-KL distillation and density ratios can be checked to
//! machine precision. Prompts are weighted uniformly.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenSeq;
use crate::error::{Error, Result};
use crate::io::{read_versioned, write_versioned};
use crate::numeric::{log_sigmoid, log_softmax, log_sum_exp, total_variation, ProbTable};
use crate::scalar::Real;

pub const MIN_RESPONSES: usize = 2;
pub const MAX_RESPONSES: usize = 64;
/// Floor on every reference probability; keeps `π_chosen / π_ref` finite.
pub const MIN_REF_PROB: f64 = 1e-6;

/// Per-prompt rows of per-response values (rewards, log-ratios, logits).
pub type Rows<T> = Vec<Vec<T>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDomain<T> {
    vocab_size: u32,
    prompts: Vec<TokenSeq>,
    responses: Vec<Vec<TokenSeq>>,
    pi_ref: Vec<ProbTable<T>>,
    reward: Rows<T>,
    beta: T,
    pi_chosen: Vec<ProbTable<T>>,
}

/// Raw parts of a domain prior to validation.
#[derive(Debug, Clone)]
pub struct DomainParts<T> {
    pub vocab_size: u32,
    pub prompts: Vec<TokenSeq>,
    pub responses: Vec<Vec<TokenSeq>>,
    pub pi_ref: Rows<T>,
    pub reward: Rows<T>,
    pub beta: T,
    pub pi_chosen: Rows<T>,
}

impl<T: Real> TabularDomain<T> {
    pub fn new(parts: DomainParts<T>) -> Result<Self> {
        let DomainParts {
            vocab_size,
            prompts,
            responses,
            pi_ref,
            reward,
            beta,
            pi_chosen,
        } = parts;
        let n = prompts.len();
        if n == 0 {
            return Err(Error::invalid("domain has no prompts"));
        }
        if responses.len() != n || pi_ref.len() != n || reward.len() != n || pi_chosen.len() != n {
            return Err(Error::invalid("per-prompt tables disagree on prompt count"));
        }
        if !(beta > T::zero() && beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {beta}")));
        }
        let floor = T::lit(MIN_REF_PROB * (1.0 - 1e-9));
        for x in 0..n {
            let k = responses[x].len();
            if !(MIN_RESPONSES..=MAX_RESPONSES).contains(&k) {
                return Err(Error::invalid(format!(
                    "prompt {x} has {k} responses (allowed {MIN_RESPONSES}..={MAX_RESPONSES})"
                )));
            }
            if pi_ref[x].len() != k || reward[x].len() != k || pi_chosen[x].len() != k {
                return Err(Error::invalid(format!("prompt {x}: table widths differ")));
            }
            if let Some(r) = reward[x].iter().find(|r| !r.is_finite()) {
                return Err(Error::NonFinite(format!("prompt {x}: reward {r}")));
            }
            if let Some(y) = pi_ref[x].iter().position(|&p| p < floor) {
                return Err(Error::Support(format!(
                    "prompt {x}, response {y}: reference probability {} below floor {MIN_REF_PROB}",
                    pi_ref[x][y]
                )));
            }
            for (i, a) in responses[x].iter().enumerate() {
                if responses[x][i + 1..].contains(a) {
                    return Err(Error::invalid(format!("prompt {x}: duplicate response {i}")));
                }
            }
        }
        let all_seqs = prompts.iter().chain(responses.iter().flatten());
        if all_seqs.into_iter().any(|s| s.vocab_size() != vocab_size) {
            return Err(Error::invalid("token sequences disagree on vocab_size"));
        }
        let pi_ref = pi_ref.into_iter().map(ProbTable::new).collect::<Result<_>>()?;
        let pi_chosen = pi_chosen.into_iter().map(ProbTable::new).collect::<Result<_>>()?;
        Ok(Self {
            vocab_size,
            prompts,
            responses,
            pi_ref,
            reward,
            beta,
            pi_chosen,
        })
    }

    /// Builds a domain from bare tables. Prompt `x` is the one-token
    /// sequence `[x]` and response `y` is `[y]`.
    pub fn from_tables(pi_ref: Rows<T>, reward: Rows<T>, beta: T, pi_chosen: Rows<T>) -> Result<Self> {
        let widest = pi_ref.iter().map(Vec::len).max().unwrap_or(0);
        let vocab_size = widest.max(pi_ref.len()).max(1) as u32;
        let prompts = (0..pi_ref.len())
            .map(|x| TokenSeq::new(vec![x as u32], vocab_size))
            .collect::<Result<_>>()?;
        let responses = pi_ref
            .iter()
            .map(|row| {
                (0..row.len())
                    .map(|y| TokenSeq::new(vec![y as u32], vocab_size))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Self::new(DomainParts {
            vocab_size,
            prompts,
            responses,
            pi_ref,
            reward,
            beta,
            pi_chosen,
        })
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn num_responses(&self, x: usize) -> usize {
        self.responses[x].len()
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn prompt(&self, x: usize) -> &TokenSeq {
        &self.prompts[x]
    }

    pub fn prompts(&self) -> &[TokenSeq] {
        &self.prompts
    }

    pub fn response(&self, x: usize, y: usize) -> &TokenSeq {
        &self.responses[x][y]
    }

    pub fn responses(&self, x: usize) -> &[TokenSeq] {
        &self.responses[x]
    }

    pub fn pi_ref(&self, x: usize) -> &ProbTable<T> {
        &self.pi_ref[x]
    }

    pub fn pi_chosen(&self, x: usize) -> &ProbTable<T> {
        &self.pi_chosen[x]
    }

    pub fn reward(&self, x: usize) -> &[T] {
        &self.reward[x]
    }

    pub fn rewards(&self) -> &Rows<T> {
        &self.reward
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn chosen_policy(&self) -> PolicyTable<T> {
        PolicyTable {
            probs: self.pi_chosen.clone(),
        }
    }

    pub fn reference_policy(&self) -> PolicyTable<T> {
        PolicyTable {
            probs: self.pi_ref.clone(),
        }
    }

    /// Replaces `π_chosen`, keeping everything else.
    pub fn with_chosen(&self, pi_chosen: Vec<ProbTable<T>>) -> Result<Self> {
        if pi_chosen.len() != self.num_prompts()
            || pi_chosen.iter().zip(&self.pi_ref).any(|(c, r)| c.len() != r.len())
        {
            return Err(Error::invalid("chosen table shape does not match domain"));
        }
        Ok(Self {
            pi_chosen,
            ..self.clone()
        })
    }

    pub fn with_beta(&self, beta: T) -> Result<Self> {
        if !(beta > T::zero() && beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {beta}")));
        }
        Ok(Self {
            beta,
            ..self.clone()
        })
    }

    /// Exact `ln r*(x, y) = ln π_chosen − ln π_ref`.
    pub fn log_density_ratio(&self) -> Result<Rows<T>> {
        (0..self.num_prompts())
            .map(|x| {
                self.pi_chosen[x]
                    .iter()
                    .zip(self.pi_ref[x].iter())
                    .enumerate()
                    .map(|(y, (c, r))| {
                        if c <= T::zero() {
                            Err(Error::Support(format!(
                                "prompt {x}, response {y}: chosen probability is zero"
                            )))
                        } else {
                            Ok(c.ln() - r.ln())
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Elementwise `π_chosen / π_ref`, the density-ratio oracle.
    pub fn density_ratio(&self) -> Rows<T> {
        (0..self.num_prompts())
            .map(|x| {
                self.pi_chosen[x]
                    .iter()
                    .zip(self.pi_ref[x].iter())
                    .map(|(c, r)| c / r)
                    .collect()
            })
            .collect()
    }

    pub fn check_shape(&self, rows: &[Vec<T>], what: &str) -> Result<()> {
        if rows.len() != self.num_prompts()
            || rows.iter().enumerate().any(|(x, r)| r.len() != self.num_responses(x))
        {
            return Err(Error::invalid(format!("{what} does not match domain shape")));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_versioned(path, "tabular-domain", self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let d: Self = read_versioned(path, "tabular-domain")?;
        // re-run validation on whatever was on disk
        Self::new(DomainParts {
            vocab_size: d.vocab_size,
            prompts: d.prompts,
            responses: d.responses,
            pi_ref: d.pi_ref.into_iter().map(ProbTable::into_vec).collect(),
            reward: d.reward,
            beta: d.beta,
            pi_chosen: d.pi_chosen.into_iter().map(ProbTable::into_vec).collect(),
        })
    }
}

/// A conditional distribution stored explicitly, one row per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable<T> {
    pub probs: Vec<ProbTable<T>>,
}

impl<T: Real> PolicyTable<T> {
    pub fn from_log_probs(rows: &[Vec<T>]) -> Result<Self> {
        let probs = rows
            .iter()
            .map(|r| ProbTable::from_log_probs(r))
            .collect::<Result<_>>()?;
        Ok(Self { probs })
    }

    pub fn row(&self, x: usize) -> &ProbTable<T> {
        &self.probs[x]
    }

    /// Largest per-prompt total-variation distance.
    pub fn max_tv(&self, other: &Self) -> T {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| total_variation(a.as_slice(), b.as_slice()))
            .fold(T::zero(), T::max)
    }
}

fn check_rewards<T: Real>(domain: &TabularDomain<T>, reward_fn: &[Vec<T>]) -> Result<()> {
    domain.check_shape(reward_fn, "reward function")?;
    for (x, row) in reward_fn.iter().enumerate() {
        if let Some(r) = row.iter().find(|r| !r.is_finite()) {
            return Err(Error::NonFinite(format!("prompt {x}: reward {r}")));
        }
    }
    Ok(())
}

fn tilted_log_weights<T: Real>(pi_ref: &ProbTable<T>, reward: &[T], beta: T) -> Vec<T> {
    pi_ref
        .iter()
        .zip(reward)
        .map(|(p, &r)| p.ln() + r / beta)
        .collect()
}

/// `ln Z(x) = ln Σ_y π_ref(y|x) exp(r(y)/β)`.
pub fn log_partition<T: Real>(domain: &TabularDomain<T>, x: usize, reward: &[T], beta: T) -> Result<T> {
    if x >= domain.num_prompts() {
        return Err(Error::invalid(format!("prompt {x} out of range")));
    }
    if reward.len() != domain.num_responses(x) {
        return Err(Error::invalid("reward width does not match responses"));
    }
    if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reward {r}")));
    }
    if !(beta > T::zero()) {
        return Err(Error::invalid("beta must be positive"));
    }
    Ok(log_sum_exp(&tilted_log_weights(domain.pi_ref(x), reward, beta)))
}

/// Partition function `Z(x)`; computed through [`log_partition`].
pub fn partition<T: Real>(domain: &TabularDomain<T>, x: usize, reward: &[T], beta: T) -> Result<T> {
    log_partition(domain, x, reward, beta).map(T::exp)
}

/// The energy-based reweighting `π_ref · exp(r/β) / Z`.
pub fn ebm_policy<T: Real>(domain: &TabularDomain<T>, reward_fn: &[Vec<T>], beta: T) -> Result<PolicyTable<T>> {
    check_rewards(domain, reward_fn)?;
    if !(beta > T::zero()) {
        return Err(Error::invalid("beta must be positive"));
    }
    let rows: Rows<T> = (0..domain.num_prompts())
        .map(|x| log_softmax(&tilted_log_weights(domain.pi_ref(x), &reward_fn[x], beta)))
        .collect();
    PolicyTable::from_log_probs(&rows)
}

/// Closed-form minimizer of the KL-regularized reward objective; the same
/// table as [`ebm_policy`].
pub fn rlhf_optimum<T: Real>(domain: &TabularDomain<T>, reward_fn: &[Vec<T>], beta: T) -> Result<PolicyTable<T>> {
    ebm_policy(domain, reward_fn, beta)
}

/// `KL(p ‖ q) = Σ p ln(p/q)`, with `p` the target distribution.
pub fn forward_kl<T: Real>(p: &ProbTable<T>, q: &ProbTable<T>) -> Result<T> {
    kl_sum(p.as_slice(), q.as_slice())
}

/// `KL(q ‖ p)` for target `p` and model `q`: the mode-seeking direction.
pub fn reverse_kl<T: Real>(p: &ProbTable<T>, q: &ProbTable<T>) -> Result<T> {
    kl_sum(q.as_slice(), p.as_slice())
}

fn kl_sum<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::invalid("distributions have different support sizes"));
    }
    let mut total = T::zero();
    for (i, (&pa, &pb)) in a.iter().zip(b).enumerate() {
        if pa <= T::zero() {
            continue;
        }
        if pb <= T::zero() {
            return Err(Error::Support(format!("entry {i}: {pa} > 0 against zero mass")));
        }
        total += pa * (pa.ln() - pb.ln());
    }
    // rounding can leave a tiny negative when a == b
    Ok(total.max(T::zero()))
}

/// Prompt-averaged KL over two policy tables, `KL(a ‖ b)`.
pub fn mean_kl<T: Real>(a: &PolicyTable<T>, b: &PolicyTable<T>) -> Result<T> {
    let n = a.probs.len();
    if n == 0 || b.probs.len() != n {
        return Err(Error::invalid("policy tables disagree on prompt count"));
    }
    let mut s = T::zero();
    for (pa, pb) in a.probs.iter().zip(&b.probs) {
        s += forward_kl(pa, pb)?;
    }
    Ok(s / T::from_usize_lossy(n))
}

/// Exact forward-KL reward-learning objective over an energy-based policy:
/// mean over prompts of `−E_chosen[r] + ln Σ_y π_ref e^{r}`.
pub fn ebm_imitation_objective<T: Real>(domain: &TabularDomain<T>, reward_fn: &[Vec<T>]) -> Result<T> {
    check_rewards(domain, reward_fn)?;
    let mut total = T::zero();
    for x in 0..domain.num_prompts() {
        let r = &reward_fn[x];
        let fit: T = domain.pi_chosen(x).iter().zip(r).map(|(c, &v)| c * v).sum();
        total += log_sum_exp(&tilted_log_weights(domain.pi_ref(x), r, T::one())) - fit;
    }
    Ok(total / T::from_usize_lossy(domain.num_prompts()))
}

/// Distillation objective `−E_π[r] + β KL(π ‖ π_ref)`, averaged over prompts.
pub fn distillation_objective<T: Real>(
    domain: &TabularDomain<T>,
    policy: &PolicyTable<T>,
    reward_fn: &[Vec<T>],
    beta: T,
) -> Result<T> {
    check_rewards(domain, reward_fn)?;
    let mut total = T::zero();
    for x in 0..domain.num_prompts() {
        let pi = policy.row(x);
        if pi.len() != domain.num_responses(x) {
            return Err(Error::invalid("policy table does not match domain"));
        }
        let reward: T = pi.iter().zip(&reward_fn[x]).map(|(p, &r)| p * r).sum();
        total += beta * forward_kl(pi, domain.pi_ref(x))? - reward;
    }
    Ok(total / T::from_usize_lossy(domain.num_prompts()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BilevelReport<T> {
    /// Smallest increase of the reward-learning objective over all perturbations.
    pub lower_level_gap: T,
    /// Max per-prompt TV between the distilled policy and `π_chosen`.
    pub upper_level_tv: T,
    pub perturbations: usize,
    pub pass: bool,
}

/// Checks both levels of the bilevel imitation view of KL-regularized RLHF.
///
/// Lower level: `ln(π_chosen/π_ref)` must beat every random perturbation of
/// itself on [`ebm_imitation_objective`]. Upper level: distilling that reward
/// at `β = 1` must reproduce `π_chosen` within `tol` total variation.
pub fn check_bilevel_equivalence<T: Real, R: Rng + ?Sized>(
    domain: &TabularDomain<T>,
    tol: T,
    perturbations: usize,
    rng: &mut R,
) -> Result<BilevelReport<T>> {
    let r_star = domain.log_density_ratio()?;
    let base = ebm_imitation_objective(domain, &r_star)?;
    let mut gap = T::infinity();
    for _ in 0..perturbations {
        let scale = rng.gen_range(0.01..0.5);
        let perturbed: Rows<T> = r_star
            .iter()
            .map(|row| {
                let noise: Vec<f64> = row.iter().map(|_| rng.gen_range(-scale..scale)).collect();
                // centring removes the pure per-prompt shift, which leaves the objective unchanged
                let mean = noise.iter().sum::<f64>() / noise.len() as f64;
                row.iter().zip(&noise).map(|(&r, &e)| r + T::lit(e - mean)).collect()
            })
            .collect();
        let value = ebm_imitation_objective(domain, &perturbed)?;
        gap = gap.min(value - base);
    }
    let distilled = rlhf_optimum(domain, &r_star, T::one())?;
    let tv = distilled.max_tv(&domain.chosen_policy());
    let lower_ok = perturbations == 0 || gap > T::zero();
    Ok(BilevelReport {
        lower_level_gap: gap,
        upper_level_tv: tv,
        perturbations,
        pass: lower_ok && tv < tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfNormReport<T> {
    pub z: Vec<T>,
    pub max_deviation: T,
    pub pass: bool,
}

/// `Z(x) = Σ_y π_ref · ratio` per prompt, compared against 1.
pub fn self_normalization<T: Real>(pi_ref: &[Vec<T>], ratio: &[Vec<T>], tol: T) -> Result<SelfNormReport<T>> {
    if pi_ref.len() != ratio.len() {
        return Err(Error::invalid("tables disagree on prompt count"));
    }
    let mut z = Vec::with_capacity(pi_ref.len());
    for (x, (p, r)) in pi_ref.iter().zip(ratio).enumerate() {
        if p.len() != r.len() {
            return Err(Error::invalid(format!("prompt {x}: widths differ")));
        }
        if p.iter().any(|&v| v <= T::zero()) {
            return Err(Error::Support(format!("prompt {x}: reference has zero mass")));
        }
        z.push(p.iter().zip(r).map(|(&a, &b)| a * b).sum::<T>());
    }
    let max_deviation = z.iter().map(|&v| (v - T::one()).abs()).fold(T::zero(), T::max);
    Ok(SelfNormReport {
        pass: max_deviation <= tol,
        z,
        max_deviation,
    })
}

/// Self-normalization of the density-ratio reward on a domain (tol `1e-12`).
pub fn self_normalization_check<T: Real>(domain: &TabularDomain<T>) -> Result<SelfNormReport<T>> {
    let pi_ref: Rows<T> = (0..domain.num_prompts())
        .map(|x| domain.pi_ref(x).as_slice().to_vec())
        .collect();
    self_normalization(&pi_ref, &domain.density_ratio(), T::lit(1e-12))
}

/// The two-response reward loss written two ways:
/// `−r_w + ln(e^{r_w} + e^{r_l})` and `−ln σ(r_w − r_l)`.
pub fn il_reward_loss_equivalence<T: Real>(r_w: T, r_l: T) -> (T, T) {
    let lhs = -r_w + log_sum_exp(&[r_w, r_l]);
    let rhs = -log_sigmoid(r_w - r_l);
    (lhs, rhs)
}
