//! Differentiable conditional policies over token sequences.
//!
//! Two implementations share the [`Policy`] surface:
//!
//! * [`TabularSoftmaxPolicy`]: one logit per enumerated `(prompt, response)`,
//!   `π(y|x) = softmax_y(logits[x])`. Exact and convex in its parameters.
//! * [`TinySeqPolicy`]: an autoregressive scorer. Each next-token
//!   distribution is a softmax of an output projection applied to a
//!   position-weighted average of the embeddings in a fixed context window,
//!   and `ln π(y|x) = Σ_t ln p(y_t | x, y_<t)`.
//!
//! Gradients are derived by hand for both.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TokenSeq;
use crate::error::{Error, Result};
use crate::io::{read_versioned, write_versioned};
use crate::numeric::{log_softmax, log_sum_exp, softmax};
use crate::scalar::Real;
use crate::tabular::{PolicyTable, Rows, TabularDomain};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl LayoutEntry {
    pub fn new(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered description of how named tensors pack into a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Layout(pub Vec<LayoutEntry>);

impl Layout {
    pub fn numel(&self) -> usize {
        self.0.iter().map(LayoutEntry::numel).sum()
    }

    /// `(name, offset, len)` for each entry.
    pub fn spans(&self) -> Vec<(&str, usize, usize)> {
        let mut off = 0;
        self.0
            .iter()
            .map(|e| {
                let s = (e.name.as_str(), off, e.numel());
                off += e.numel();
                s
            })
            .collect()
    }
}

/// Flat parameter (or gradient) vector tagged with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector<T> {
    pub layout: Layout,
    pub values: Vec<T>,
}

impl<T: Real> ParamVector<T> {
    pub fn zeros(layout: Layout) -> Self {
        let n = layout.numel();
        Self {
            layout,
            values: vec![T::zero(); n],
        }
    }

    pub fn flatten(layout: Layout, parts: &[Vec<T>]) -> Result<Self> {
        if parts.len() != layout.0.len() {
            return Err(Error::invalid("part count does not match layout"));
        }
        let mut values = Vec::with_capacity(layout.numel());
        for (e, p) in layout.0.iter().zip(parts) {
            if p.len() != e.numel() {
                return Err(Error::invalid(format!("part `{}` has {} values, expected {}", e.name, p.len(), e.numel())));
            }
            values.extend_from_slice(p);
        }
        Ok(Self { layout, values })
    }

    pub fn unflatten(&self) -> Vec<Vec<T>> {
        self.layout
            .spans()
            .into_iter()
            .map(|(_, off, len)| self.values[off..off + len].to_vec())
            .collect()
    }

    pub fn norm(&self) -> T {
        self.values.iter().map(|v| *v * *v).sum::<T>().sqrt()
    }
}

/// Architecture-specific part of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum Architecture {
    Tabular {
        vocab_size: u32,
        prompts: Vec<Vec<u32>>,
        responses: Vec<Vec<Vec<u32>>>,
    },
    TinySeq {
        vocab_size: u32,
        embed_dim: usize,
        window: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub architecture: Architecture,
    pub init_seed: Option<u64>,
    pub params: ParamVector<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_versioned(path, "checkpoint", self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_versioned(path, "checkpoint")
    }
}

/// A conditional distribution `π(y|x)` with parameter gradients.
pub trait Policy<T: Real>: Send + Sync {
    fn layout(&self) -> Layout;
    fn params(&self) -> &[T];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn log_prob(&self, x: &TokenSeq, y: &TokenSeq) -> Result<T>;

    /// Adds `scale · ∇ ln π(y|x)` into `grad` and returns `ln π(y|x)`.
    fn accumulate_grad_log_prob(&self, x: &TokenSeq, y: &TokenSeq, scale: T, grad: &mut [T]) -> Result<T>;

    fn grad_log_prob(&self, x: &TokenSeq, y: &TokenSeq) -> Result<ParamVector<T>> {
        let mut g = ParamVector::zeros(self.layout());
        self.accumulate_grad_log_prob(x, y, T::one(), &mut g.values)?;
        Ok(g)
    }

    fn checkpoint(&self) -> Checkpoint<T>;

    /// Explicit table over the domain's responses, renormalized over the
    /// enumerated set.
    fn policy_table(&self, domain: &TabularDomain<T>) -> Result<PolicyTable<T>> {
        let rows: Rows<T> = (0..domain.num_prompts())
            .map(|x| {
                let lp = domain
                    .responses(x)
                    .iter()
                    .map(|y| self.log_prob(domain.prompt(x), y))
                    .collect::<Result<Vec<T>>>()?;
                Ok(log_softmax(&lp))
            })
            .collect::<Result<_>>()?;
        PolicyTable::from_log_probs(&rows)
    }
}

/// A policy whose parameters can be updated in place.
pub trait TrainablePolicy<T: Real>: Policy<T> + Clone {
    fn params_mut(&mut self) -> &mut [T];
}

/// Immutable shared snapshot, used as the reference policy.
#[derive(Debug)]
pub struct Frozen<P>(Arc<P>);

impl<P> Clone for Frozen<P> {
    fn clone(&self) -> Self {
        Frozen(Arc::clone(&self.0))
    }
}

impl<P> Frozen<P> {
    pub fn inner(&self) -> &P {
        &self.0
    }
}

impl<T: Real, P: Policy<T>> Policy<T> for Frozen<P> {
    fn layout(&self) -> Layout {
        self.0.layout()
    }

    fn params(&self) -> &[T] {
        self.0.params()
    }

    fn log_prob(&self, x: &TokenSeq, y: &TokenSeq) -> Result<T> {
        self.0.log_prob(x, y)
    }

    fn accumulate_grad_log_prob(&self, x: &TokenSeq, y: &TokenSeq, scale: T, grad: &mut [T]) -> Result<T> {
        self.0.accumulate_grad_log_prob(x, y, scale, grad)
    }

    fn checkpoint(&self) -> Checkpoint<T> {
        self.0.checkpoint()
    }
}

/// Deep copy of `policy` that later training of the source cannot touch.
pub fn clone_frozen<T: Real, P: TrainablePolicy<T>>(policy: &P) -> Frozen<P> {
    Frozen(Arc::new(policy.clone()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularSoftmaxPolicy<T> {
    vocab_size: u32,
    prompts: Vec<TokenSeq>,
    responses: Vec<Vec<TokenSeq>>,
    prompt_index: HashMap<Vec<u32>, usize>,
    response_index: Vec<HashMap<Vec<u32>, usize>>,
    offsets: Vec<usize>,
    logits: Vec<T>,
}

impl<T: Real> TabularSoftmaxPolicy<T> {
    fn build(vocab_size: u32, prompts: Vec<TokenSeq>, responses: Vec<Vec<TokenSeq>>, logits: Rows<T>) -> Result<Self> {
        if prompts.len() != responses.len() || logits.len() != prompts.len() {
            return Err(Error::invalid("tabular policy: prompt count mismatch"));
        }
        let mut prompt_index = HashMap::new();
        for (x, p) in prompts.iter().enumerate() {
            if prompt_index.insert(p.tokens().to_vec(), x).is_some() {
                return Err(Error::invalid(format!("tabular policy: duplicate prompt {x}")));
            }
        }
        let mut response_index = Vec::with_capacity(responses.len());
        let mut offsets = Vec::with_capacity(responses.len() + 1);
        let mut flat = Vec::new();
        offsets.push(0);
        for (x, (rs, row)) in responses.iter().zip(&logits).enumerate() {
            if rs.len() != row.len() || rs.is_empty() {
                return Err(Error::invalid(format!("tabular policy: prompt {x} logit width mismatch")));
            }
            let map: HashMap<Vec<u32>, usize> = rs.iter().enumerate().map(|(y, s)| (s.tokens().to_vec(), y)).collect();
            response_index.push(map);
            flat.extend_from_slice(row);
            offsets.push(flat.len());
        }
        Ok(Self {
            vocab_size,
            prompts,
            responses,
            prompt_index,
            response_index,
            offsets,
            logits: flat,
        })
    }

    pub fn from_logits(domain: &TabularDomain<T>, logits: Rows<T>) -> Result<Self> {
        domain.check_shape(&logits, "logits")?;
        Self::build(
            domain.vocab_size(),
            domain.prompts().to_vec(),
            (0..domain.num_prompts()).map(|x| domain.responses(x).to_vec()).collect(),
            logits,
        )
    }

    /// Logits `ln π_ref`, so the policy starts at the reference.
    pub fn from_reference(domain: &TabularDomain<T>) -> Result<Self> {
        let logits = (0..domain.num_prompts())
            .map(|x| domain.pi_ref(x).iter().map(T::ln).collect())
            .collect();
        Self::from_logits(domain, logits)
    }

    pub fn uniform(domain: &TabularDomain<T>) -> Result<Self> {
        let logits = (0..domain.num_prompts()).map(|x| vec![T::zero(); domain.num_responses(x)]).collect();
        Self::from_logits(domain, logits)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let Architecture::Tabular {
            vocab_size,
            prompts,
            responses,
        } = &ck.architecture
        else {
            return Err(Error::invalid("checkpoint is not a tabular policy"));
        };
        let prompts = prompts
            .iter()
            .map(|p| TokenSeq::new(p.clone(), *vocab_size))
            .collect::<Result<Vec<_>>>()?;
        let responses = responses
            .iter()
            .map(|rs| rs.iter().map(|r| TokenSeq::new(r.clone(), *vocab_size)).collect())
            .collect::<Result<Vec<Vec<_>>>>()?;
        let mut logits = Vec::new();
        let mut off = 0;
        for rs in &responses {
            let end = off + rs.len();
            let row = ck
                .params
                .values
                .get(off..end)
                .ok_or_else(|| Error::invalid("checkpoint parameter count too small"))?;
            logits.push(row.to_vec());
            off = end;
        }
        if off != ck.params.values.len() {
            return Err(Error::invalid("checkpoint parameter count mismatch"));
        }
        Self::build(*vocab_size, prompts, responses, logits)
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn row_logits(&self, x: usize) -> &[T] {
        &self.logits[self.offsets[x]..self.offsets[x + 1]]
    }

    pub fn row_probs(&self, x: usize) -> Vec<T> {
        softmax(self.row_logits(x))
    }

    pub fn log_prob_ids(&self, x: usize, y: usize) -> Result<T> {
        let row = self
            .offsets
            .get(x + 1)
            .map(|_| self.row_logits(x))
            .ok_or_else(|| Error::invalid(format!("prompt id {x} out of range")))?;
        if y >= row.len() {
            return Err(Error::invalid(format!("response id {y} out of range for prompt {x}")));
        }
        Ok(row[y] - log_sum_exp(row))
    }

    /// Adds `scale · (e_y − softmax)` to the logit block of prompt `x`.
    pub fn accumulate_grad_ids(&self, x: usize, y: usize, scale: T, grad: &mut [T]) -> Result<T> {
        let lp = self.log_prob_ids(x, y)?;
        let off = self.offsets[x];
        for (k, p) in self.row_probs(x).into_iter().enumerate() {
            grad[off + k] -= scale * p;
        }
        grad[off + y] += scale;
        Ok(lp)
    }

    /// `(prompt id, response id)` for a token-level pair.
    pub fn ids(&self, x: &TokenSeq, y: &TokenSeq) -> Result<(usize, usize)> {
        let xi = *self
            .prompt_index
            .get(x.tokens())
            .ok_or_else(|| Error::invalid(format!("prompt {:?} not in tabular policy", x.tokens())))?;
        let yi = *self.response_index[xi]
            .get(y.tokens())
            .ok_or_else(|| Error::invalid(format!("response {:?} not enumerated for prompt {xi}", y.tokens())))?;
        Ok((xi, yi))
    }
}

impl<T: Real> Policy<T> for TabularSoftmaxPolicy<T> {
    fn layout(&self) -> Layout {
        Layout(
            (0..self.num_prompts())
                .map(|x| LayoutEntry::new(&format!("logits.{x}"), &[self.offsets[x + 1] - self.offsets[x]]))
                .collect(),
        )
    }

    fn params(&self) -> &[T] {
        &self.logits
    }

    fn log_prob(&self, x: &TokenSeq, y: &TokenSeq) -> Result<T> {
        let (xi, yi) = self.ids(x, y)?;
        self.log_prob_ids(xi, yi)
    }

    fn accumulate_grad_log_prob(&self, x: &TokenSeq, y: &TokenSeq, scale: T, grad: &mut [T]) -> Result<T> {
        let (xi, yi) = self.ids(x, y)?;
        self.accumulate_grad_ids(xi, yi, scale, grad)
    }

    fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            architecture: Architecture::Tabular {
                vocab_size: self.vocab_size,
                prompts: self.prompts.iter().map(|p| p.tokens().to_vec()).collect(),
                responses: self
                    .responses
                    .iter()
                    .map(|rs| rs.iter().map(|r| r.tokens().to_vec()).collect())
                    .collect(),
            },
            init_seed: None,
            params: ParamVector {
                layout: self.layout(),
                values: self.logits.clone(),
            },
        }
    }
}

impl<T: Real> TrainablePolicy<T> for TabularSoftmaxPolicy<T> {
    fn params_mut(&mut self) -> &mut [T] {
        &mut self.logits
    }
}

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_WINDOW: usize = 8;

/// Autoregressive window-average scorer.
///
/// Parameters, in layout order:
/// `embed [V×d]`, `mix [W]`, `out [d×V]`, `bias [V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TinySeqPolicy<T> {
    vocab_size: usize,
    embed_dim: usize,
    window: usize,
    seed: u64,
    params: Vec<T>,
}

impl<T: Real> TinySeqPolicy<T> {
    pub fn new(vocab_size: u32, embed_dim: usize, window: usize, seed: u64) -> Result<Self> {
        if vocab_size < 2 || embed_dim == 0 || window == 0 {
            return Err(Error::invalid("tiny policy needs vocab_size ≥ 2 and positive dims"));
        }
        let (v, d, w) = (vocab_size as usize, embed_dim, window);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed_dist = Normal::new(0.0, 1.0).expect("valid normal");
        let out_dist = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid normal");
        let mut params = Vec::with_capacity(v * d + w + d * v + v);
        params.extend((0..v * d).map(|_| T::lit(embed_dist.sample(&mut rng))));
        params.extend((0..w).map(|_| T::one()));
        params.extend((0..d * v).map(|_| T::lit(out_dist.sample(&mut rng))));
        params.extend((0..v).map(|_| T::zero()));
        Ok(Self {
            vocab_size: v,
            embed_dim: d,
            window: w,
            seed,
            params,
        })
    }

    pub fn with_defaults(vocab_size: u32, seed: u64) -> Result<Self> {
        Self::new(vocab_size, DEFAULT_EMBED_DIM, DEFAULT_WINDOW, seed)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let Architecture::TinySeq {
            vocab_size,
            embed_dim,
            window,
        } = ck.architecture
        else {
            return Err(Error::invalid("checkpoint is not a tiny-seq policy"));
        };
        let mut p = Self::new(vocab_size, embed_dim, window, ck.init_seed.unwrap_or(0))?;
        if ck.params.values.len() != p.params.len() || ck.params.layout != p.layout() {
            return Err(Error::invalid("checkpoint layout does not match architecture"));
        }
        p.params.copy_from_slice(&ck.params.values);
        Ok(p)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let (v, d, w) = (self.vocab_size, self.embed_dim, self.window);
        let mix = v * d;
        let out = mix + w;
        let bias = out + d * v;
        (mix, out, bias)
    }

    fn check(&self, x: &TokenSeq, y: &TokenSeq) -> Result<()> {
        if x.vocab_size() as usize != self.vocab_size || y.vocab_size() as usize != self.vocab_size {
            return Err(Error::invalid(format!(
                "sequence vocab size {} does not match policy vocab size {}",
                x.vocab_size(),
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Context tokens for predicting `y[t]`, most recent first.
    fn context<'a>(&self, x: &'a TokenSeq, y: &'a TokenSeq, t: usize) -> impl Iterator<Item = u32> + 'a {
        let n = self.window.min(x.len() + t);
        x.tokens()
            .iter()
            .chain(&y.tokens()[..t])
            .rev()
            .take(n)
            .copied()
    }

    /// Hidden state and next-token log-probabilities at position `t`.
    fn step(&self, x: &TokenSeq, y: &TokenSeq, t: usize) -> (Vec<T>, Vec<T>) {
        let (v, d) = (self.vocab_size, self.embed_dim);
        let (mix, out, bias) = self.offsets();
        let ctx: Vec<u32> = self.context(x, y, t).collect();
        let inv_n = T::one() / T::from_usize_lossy(ctx.len());
        let mut h = vec![T::zero(); d];
        for (j, &tok) in ctx.iter().enumerate() {
            let m = self.params[mix + j] * inv_n;
            let e = &self.params[tok as usize * d..(tok as usize + 1) * d];
            for k in 0..d {
                h[k] += m * e[k];
            }
        }
        let mut logits = self.params[bias..bias + v].to_vec();
        for k in 0..d {
            let row = &self.params[out + k * v..out + (k + 1) * v];
            for (l, &o) in logits.iter_mut().zip(row) {
                *l += h[k] * o;
            }
        }
        (h, log_softmax(&logits))
    }

    /// Next-token distribution after `x ++ y[..t]`; used by tests and sampling.
    pub fn next_token_probs(&self, x: &TokenSeq, y: &TokenSeq, t: usize) -> Result<Vec<T>> {
        self.check(x, y)?;
        if t > y.len() {
            return Err(Error::invalid("position beyond response"));
        }
        Ok(self.step(x, y, t).1.into_iter().map(T::exp).collect())
    }
}

impl<T: Real> Policy<T> for TinySeqPolicy<T> {
    fn layout(&self) -> Layout {
        let (v, d, w) = (self.vocab_size, self.embed_dim, self.window);
        Layout(vec![
            LayoutEntry::new("embed", &[v, d]),
            LayoutEntry::new("mix", &[w]),
            LayoutEntry::new("out", &[d, v]),
            LayoutEntry::new("bias", &[v]),
        ])
    }

    fn params(&self) -> &[T] {
        &self.params
    }

    fn log_prob(&self, x: &TokenSeq, y: &TokenSeq) -> Result<T> {
        self.check(x, y)?;
        Ok((0..y.len())
            .map(|t| self.step(x, y, t).1[y.tokens()[t] as usize])
            .sum())
    }

    fn accumulate_grad_log_prob(&self, x: &TokenSeq, y: &TokenSeq, scale: T, grad: &mut [T]) -> Result<T> {
        self.check(x, y)?;
        let (v, d) = (self.vocab_size, self.embed_dim);
        let (mix, out, bias) = self.offsets();
        let mut total = T::zero();
        for t in 0..y.len() {
            let (h, logp) = self.step(x, y, t);
            let target = y.tokens()[t] as usize;
            total += logp[target];
            // d ln p(target) / d logits = onehot − softmax
            let delta: Vec<T> = logp
                .iter()
                .enumerate()
                .map(|(i, lp)| {
                    let ind = if i == target { T::one() } else { T::zero() };
                    scale * (ind - lp.exp())
                })
                .collect();
            for (gb, &dl) in grad[bias..bias + v].iter_mut().zip(&delta) {
                *gb += dl;
            }
            let mut dh = vec![T::zero(); d];
            for k in 0..d {
                let row = out + k * v;
                let mut acc = T::zero();
                for i in 0..v {
                    grad[row + i] += h[k] * delta[i];
                    acc += self.params[row + i] * delta[i];
                }
                dh[k] = acc;
            }
            let ctx: Vec<u32> = self.context(x, y, t).collect();
            let inv_n = T::one() / T::from_usize_lossy(ctx.len());
            for (j, &tok) in ctx.iter().enumerate() {
                let e0 = tok as usize * d;
                let m = self.params[mix + j] * inv_n;
                let mut dm = T::zero();
                for k in 0..d {
                    dm += self.params[e0 + k] * dh[k];
                    grad[e0 + k] += m * dh[k];
                }
                grad[mix + j] += dm * inv_n;
            }
        }
        Ok(total)
    }

    fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            architecture: Architecture::TinySeq {
                vocab_size: self.vocab_size as u32,
                embed_dim: self.embed_dim,
                window: self.window,
            },
            init_seed: Some(self.seed),
            params: ParamVector {
                layout: self.layout(),
                values: self.params.clone(),
            },
        }
    }
}

impl<T: Real> TrainablePolicy<T> for TinySeqPolicy<T> {
    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport<T> {
    pub max_rel_error: T,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
}

/// Absolute level below which an analytic and a numeric derivative both
/// count as zero.
pub const FD_ZERO_TOL: f64 = 1e-9;

/// Compares an analytic gradient against central differences
/// `(L(p + εe_i) − L(p − εe_i)) / 2ε` at `coords`. Relative error uses the
/// denominator `max(|analytic|, 1e-8)`; a coordinate where both derivatives
/// are within [`FD_ZERO_TOL`] of zero contributes no error.
pub fn finite_diff_check<T, F>(params: &[T], analytic: &[T], coords: &[usize], eps: T, mut loss: F) -> Result<FdReport<T>>
where
    T: Real,
    F: FnMut(&[T]) -> Result<T>,
{
    if params.len() != analytic.len() {
        return Err(Error::invalid("gradient length does not match parameters"));
    }
    let mut work = params.to_vec();
    let mut report = FdReport {
        max_rel_error: T::zero(),
        worst_coordinate: None,
        checked: 0,
    };
    for &i in coords {
        let orig = work[i];
        work[i] = orig + eps;
        let up = loss(&work)?;
        work[i] = orig - eps;
        let down = loss(&work)?;
        work[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        let numeric = (up - down) / (T::two() * eps);
        let zero = T::lit(FD_ZERO_TOL);
        let rel = if analytic[i].abs() <= zero && numeric.abs() <= zero {
            T::zero()
        } else {
            (numeric - analytic[i]).abs() / analytic[i].abs().max(T::lit(1e-8))
        };
        if report.worst_coordinate.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = Some(i);
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Runs [`finite_diff_check`] on `points` random coordinates of `policy`,
/// where `loss` returns `(value, gradient)` for a policy instance.
pub fn check_policy_gradient<T, P, F, R>(policy: &P, eps: T, points: usize, rng: &mut R, mut loss: F) -> Result<FdReport<T>>
where
    T: Real,
    P: TrainablePolicy<T>,
    F: FnMut(&P) -> Result<(T, Vec<T>)>,
    R: Rng + ?Sized,
{
    let (_, analytic) = loss(policy)?;
    let n = policy.num_params();
    let coords: Vec<usize> = if points >= n {
        (0..n).collect()
    } else {
        let mut c = sample(rng, n, points).into_vec();
        c.sort_unstable();
        c
    };
    let mut probe = policy.clone();
    finite_diff_check(policy.params(), &analytic, &coords, eps, |p| {
        probe.params_mut().copy_from_slice(p);
        loss(&probe).map(|(v, _)| v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn domain() -> TabularDomain<f64> {
        TabularDomain::from_tables(
            vec![vec![0.25; 4], vec![0.25; 4]],
            vec![vec![0.0; 4], vec![0.0; 4]],
            1.0,
            vec![vec![0.25; 4], vec![0.1, 0.2, 0.3, 0.4]],
        )
        .unwrap()
    }

    fn seq(t: &[u32], v: u32) -> TokenSeq {
        TokenSeq::new(t.to_vec(), v).unwrap()
    }

    #[test]
    fn tabular_log_prob_examples() {
        let d = domain();
        let p = TabularSoftmaxPolicy::uniform(&d).unwrap();
        assert_abs_diff_eq!(p.log_prob_ids(0, 2).unwrap(), (0.25_f64).ln(), epsilon = 1e-15);

        let two = TabularDomain::from_tables(vec![vec![0.5, 0.5]], vec![vec![0.0; 2]], 1.0, vec![vec![0.5, 0.5]]).unwrap();
        let p = TabularSoftmaxPolicy::from_logits(&two, vec![vec![1.0, 0.0]]).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p.log_prob_ids(0, 0).unwrap(), (e / (e + 1.0)).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(p.log_prob_ids(0, 0).unwrap(), -0.313_261_687_518_222_8, epsilon = 1e-15);
        assert!(p.log_prob_ids(0, 2).is_err());
        assert!(p.log_prob_ids(1, 0).is_err());
        assert!(p.log_prob(&seq(&[1], 2), &seq(&[0], 2)).is_err());
    }

    #[test]
    fn tabular_gradient_examples() {
        let two = TabularDomain::from_tables(vec![vec![0.5, 0.5]], vec![vec![0.0; 2]], 1.0, vec![vec![0.5, 0.5]]).unwrap();
        let p = TabularSoftmaxPolicy::uniform(&two).unwrap();
        let g = p.grad_log_prob(two.prompt(0), two.response(0, 0)).unwrap();
        assert_abs_diff_eq!(g.values[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g.values[1], -0.5, epsilon = 1e-15);

        let d = domain();
        let p = TabularSoftmaxPolicy::from_logits(&d, vec![vec![0.3, -1.0, 2.0, 0.1], vec![1.0, 1.5, -0.4, 0.0]]).unwrap();
        for x in 0..2 {
            for y in 0..4 {
                let g = p.grad_log_prob(d.prompt(x), d.response(x, y)).unwrap();
                let s: f64 = g.values.iter().sum();
                assert!(s.abs() < 1e-12);
                let other = 1 - x;
                assert!(g.values[other * 4..other * 4 + 4].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn tabular_rows_normalize() {
        let d = domain();
        let p = TabularSoftmaxPolicy::from_logits(&d, vec![vec![30.0, -20.0, 2.0, 0.1], vec![1.0, 1.5, -0.4, 0.0]]).unwrap();
        for x in 0..2 {
            let s: f64 = p.row_probs(x).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let table = p.policy_table(&d).unwrap();
        assert_abs_diff_eq!(table.row(1).get(1), p.row_probs(1)[1], epsilon = 1e-15);
    }

    #[test]
    fn tiny_policy_normalizes_over_single_tokens() {
        let v = 6;
        let p = TinySeqPolicy::<f64>::with_defaults(v, 42).unwrap();
        let x = seq(&[1, 4, 2], v);
        let total: f64 = (0..v).map(|t| p.log_prob(&x, &seq(&[t], v)).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
        let y = seq(&[3, 0, 5, 5, 1, 2, 2, 4, 0, 1], v);
        for t in 0..=y.len() {
            let s: f64 = p.next_token_probs(&x, &y, t).unwrap().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tiny_policy_factorizes_autoregressively() {
        let v = 5;
        let p = TinySeqPolicy::<f64>::new(v, 4, 3, 7).unwrap();
        let x = seq(&[0, 1], v);
        let y = seq(&[2, 3, 4, 0], v);
        let by_steps: f64 = (0..y.len())
            .map(|t| p.next_token_probs(&x, &y, t).unwrap()[y.tokens()[t] as usize].ln())
            .sum();
        assert_abs_diff_eq!(p.log_prob(&x, &y).unwrap(), by_steps, epsilon = 1e-12);
        assert!(p.log_prob(&x, &seq(&[1], 6)).is_err());
    }

    #[test]
    fn tiny_policy_is_deterministic_in_seed() {
        let a = TinySeqPolicy::<f64>::with_defaults(8, 3).unwrap();
        let b = TinySeqPolicy::<f64>::with_defaults(8, 3).unwrap();
        let c = TinySeqPolicy::<f64>::with_defaults(8, 4).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn tiny_gradient_matches_central_differences() {
        let v = 7;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = seq(&[1, 5], v);
        let y = seq(&[2, 6, 0, 3], v);
        for point in 0..5 {
            let mut p = TinySeqPolicy::<f64>::new(v, 6, 4, point).unwrap();
            for w in p.params_mut() {
                *w += rng.gen_range(-0.3..0.3);
            }
            let rep = check_policy_gradient(&p, 1e-4, 40, &mut rng, |q| {
                let g = q.grad_log_prob(&x, &y)?;
                Ok((q.log_prob(&x, &y)?, g.values))
            })
            .unwrap();
            assert!(rep.max_rel_error < 1e-4, "point {point}: {rep:?}");
        }
    }

    #[test]
    fn frozen_clone_is_isolated() {
        let d = domain();
        let mut p = TabularSoftmaxPolicy::from_reference(&d).unwrap();
        let frozen = clone_frozen(&p);
        let before: Vec<f64> = (0..4).map(|y| frozen.log_prob(d.prompt(1), d.response(1, y)).unwrap()).collect();
        for _ in 0..100 {
            let g = p.grad_log_prob(d.prompt(1), d.response(1, 2)).unwrap();
            for (w, gi) in p.params_mut().iter_mut().zip(&g.values) {
                *w += 0.1 * gi;
            }
        }
        let after: Vec<f64> = (0..4).map(|y| frozen.log_prob(d.prompt(1), d.response(1, y)).unwrap()).collect();
        assert_eq!(before, after);
        assert_ne!(p.params(), frozen.params());
        let again = frozen.clone();
        assert_eq!(again.params(), frozen.params());
        assert_eq!(again.checkpoint(), frozen.checkpoint());
    }

    #[test]
    fn finite_diff_sees_unused_parameters_as_zero() {
        let d = domain();
        let p = TabularSoftmaxPolicy::from_reference(&d).unwrap();
        let (x, y) = (d.prompt(0).clone(), d.response(0, 1).clone());
        let rep = finite_diff_check(p.params(), &p.grad_log_prob(&x, &y).unwrap().values, &[4, 5, 6, 7], 1e-5, |w| {
            let mut q = p.clone();
            q.params_mut().copy_from_slice(w);
            q.log_prob(&x, &y)
        })
        .unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
        assert_eq!(rep.checked, 4);
    }

    #[test]
    fn layout_round_trip() {
        let p = TinySeqPolicy::<f64>::new(5, 3, 2, 1).unwrap();
        let pv = ParamVector {
            layout: p.layout(),
            values: p.params().to_vec(),
        };
        let parts = pv.unflatten();
        assert_eq!(parts.len(), 4);
        assert_eq!(parts[1], vec![1.0, 1.0]);
        let back = ParamVector::flatten(pv.layout.clone(), &parts).unwrap();
        assert_eq!(back, pv);
        assert!(ParamVector::flatten(pv.layout.clone(), &parts[..3]).is_err());
    }

    #[test]
    fn checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tiny = TinySeqPolicy::<f64>::with_defaults(9, 11).unwrap();
        let path = dir.path().join("tiny.json");
        tiny.checkpoint().save(&path).unwrap();
        let back = TinySeqPolicy::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back, tiny);

        let d = domain();
        let tab = TabularSoftmaxPolicy::from_logits(&d, vec![vec![0.1, 0.2, 0.3, 0.4], vec![-1.0, 0.0, 1.0, 2.0]]).unwrap();
        let path = dir.path().join("tab.json");
        tab.checkpoint().save(&path).unwrap();
        let back = TabularSoftmaxPolicy::<f64>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back.params(), tab.params());
        assert_eq!(back.log_prob(d.prompt(1), d.response(1, 3)).unwrap(), tab.log_prob(d.prompt(1), d.response(1, 3)).unwrap());
        assert!(TinySeqPolicy::from_checkpoint(&tab.checkpoint()).is_err());
    }
}
