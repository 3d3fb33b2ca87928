//! Synthetic ground-truth worlds and Bradley-Terry preference sampling.
//!
//! A generated world fixes `π_ref`, a true reward and the exact marginal
//! `π_chosen` of the labeling process below, so every downstream estimate
//! can be compared against a known answer.
//!
//! Labeling process for prompt `x`: draw `y_a, y_b ~ π_ref(·|x)` i.i.d.,
//! redrawing the pair until `y_a ≠ y_b`, then emit `y_a` as chosen with
//! probability `σ(r(x,y_a) − r(x,y_b))`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::{write_triples, PreferenceTriple, TokenSeq};
use crate::error::{Error, Result};
use crate::io::{read_versioned, write_versioned};
use crate::numeric::{sigmoid, softmax, ProbTable};
use crate::scalar::Real;
use crate::tabular::{DomainParts, Rows, TabularDomain, MAX_RESPONSES, MIN_REF_PROB, MIN_RESPONSES};

/// Redraws allowed when generating distinct sequences or distinct pairs.
pub const MAX_RETRIES: usize = 1000;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const DOMAIN_FILE: &str = "domain.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RewardSpec {
    /// `r(x,y) ~ N(0, scale²)` independently per pair.
    Gaussian { scale: f64 },
    /// `r(x,y) = weight · Σ_t y_t`.
    LinearTokenSum { weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_prompts: usize,
    pub responses_per_prompt: usize,
    pub vocab_size: u32,
    pub prompt_length: usize,
    pub response_length: usize,
    pub reward: RewardSpec,
    pub ref_concentration: f64,
    pub pairs_per_prompt: usize,
    pub seed: u64,
    pub beta: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_prompts: 4,
            responses_per_prompt: 8,
            vocab_size: 16,
            prompt_length: 2,
            response_length: 3,
            reward: RewardSpec::Gaussian { scale: 1.0 },
            ref_concentration: 1.0,
            pairs_per_prompt: 64,
            seed: 0,
            beta: 1.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.responses_per_prompt;
        if !(MIN_RESPONSES..=MAX_RESPONSES).contains(&k) {
            return Err(Error::invalid(format!(
                "responses_per_prompt = {k}, allowed {MIN_RESPONSES}..={MAX_RESPONSES}"
            )));
        }
        if self.num_prompts == 0 || self.prompt_length == 0 || self.response_length == 0 {
            return Err(Error::invalid("num_prompts, prompt_length and response_length must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(Error::invalid("vocab_size must be at least 2"));
        }
        if !(self.ref_concentration > 0.0 && self.ref_concentration.is_finite()) {
            return Err(Error::invalid(format!("ref_concentration must be positive, got {}", self.ref_concentration)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        let param = match self.reward {
            RewardSpec::Gaussian { scale } => scale,
            RewardSpec::LinearTokenSum { weight } => weight,
        };
        if !param.is_finite() {
            return Err(Error::invalid("reward parameter must be finite"));
        }
        Ok(())
    }
}

/// A generated world together with the configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth<T> {
    pub domain: TabularDomain<T>,
    pub config: GenConfig,
}

fn prompt_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_seq(rng: &mut ChaCha8Rng, len: usize, vocab_size: u32) -> Result<TokenSeq> {
    TokenSeq::new((0..len).map(|_| rng.gen_range(0..vocab_size)).collect(), vocab_size)
}

fn distinct_seqs(rng: &mut ChaCha8Rng, count: usize, len: usize, vocab_size: u32, what: &str) -> Result<Vec<TokenSeq>> {
    let mut out: Vec<TokenSeq> = Vec::with_capacity(count);
    let mut retries = 0;
    while out.len() < count {
        let s = random_seq(rng, len, vocab_size)?;
        if out.contains(&s) {
            retries += 1;
            if retries > MAX_RETRIES {
                return Err(Error::invalid(format!(
                    "could not draw {count} distinct {what} of length {len} over {vocab_size} tokens"
                )));
            }
        } else {
            out.push(s);
        }
    }
    Ok(out)
}

/// Mixes `p` with a uniform floor so that every entry is at least `floor`.
fn apply_floor(p: &[f64], floor: f64) -> Vec<f64> {
    let keep = 1.0 - floor * p.len() as f64;
    p.iter().map(|&q| keep * q + floor).collect()
}

/// Generates a world deterministically from `cfg.seed`. Prompt `x` draws its
/// responses, reference scores and rewards from its own ChaCha stream.
pub fn build_domain<T: Real>(cfg: &GenConfig) -> Result<GroundTruth<T>> {
    cfg.validate()?;
    let v = cfg.vocab_size;
    let k = cfg.responses_per_prompt;
    let mut head = prompt_rng(cfg.seed, u64::MAX);
    let prompts = distinct_seqs(&mut head, cfg.num_prompts, cfg.prompt_length, v, "prompts")?;

    let mut responses = Vec::with_capacity(cfg.num_prompts);
    let mut pi_ref: Rows<T> = Vec::with_capacity(cfg.num_prompts);
    let mut reward: Rows<T> = Vec::with_capacity(cfg.num_prompts);
    for x in 0..cfg.num_prompts {
        let mut rng = prompt_rng(cfg.seed, x as u64);
        let rs = distinct_seqs(&mut rng, k, cfg.response_length, v, "responses")?;
        let scores: Vec<f64> = (0..k)
            .map(|_| cfg.ref_concentration * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let p = apply_floor(&softmax(&scores), MIN_REF_PROB);
        let r: Vec<f64> = match cfg.reward {
            RewardSpec::Gaussian { scale } => (0..k).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect(),
            RewardSpec::LinearTokenSum { weight } => rs
                .iter()
                .map(|s| weight * s.tokens().iter().map(|&t| f64::from(t)).sum::<f64>())
                .collect(),
        };
        pi_ref.push(p.into_iter().map(T::lit).collect());
        reward.push(r.into_iter().map(T::lit).collect());
        responses.push(rs);
    }
    let pi_chosen = chosen_rows(&pi_ref, &reward, true);
    let domain = TabularDomain::new(DomainParts {
        vocab_size: v,
        prompts,
        responses,
        pi_ref,
        reward,
        beta: T::lit(cfg.beta),
        pi_chosen,
    })?;
    Ok(GroundTruth {
        domain,
        config: cfg.clone(),
    })
}

fn chosen_rows<T: Real>(pi_ref: &[Vec<T>], reward: &[Vec<T>], distinct: bool) -> Rows<T> {
    pi_ref
        .iter()
        .zip(reward)
        .map(|(p, r)| {
            let k = p.len();
            let mut row: Vec<T> = (0..k)
                .map(|y| {
                    let s: T = (0..k)
                        .filter(|&z| !distinct || z != y)
                        .map(|z| p[z] * sigmoid(r[y] - r[z]))
                        .sum();
                    T::two() * p[y] * s
                })
                .collect();
            if distinct {
                let mass: T = row.iter().copied().sum();
                for v in &mut row {
                    *v /= mass;
                }
            }
            row
        })
        .collect()
}

/// Exact chosen marginal of the distinct-pair labeling process:
/// `π_chosen(y|x) = 2 π_ref(y) Σ_{y'≠y} π_ref(y') σ(r_y − r_y') / (1 − Σ π_ref²)`.
pub fn derive_chosen_distribution<T: Real>(domain: &TabularDomain<T>) -> Result<Vec<ProbTable<T>>> {
    let pi_ref: Rows<T> = (0..domain.num_prompts()).map(|x| domain.pi_ref(x).as_slice().to_vec()).collect();
    chosen_rows(&pi_ref, domain.rewards(), true)
        .into_iter()
        .map(ProbTable::new)
        .collect()
}

/// Chosen marginal when pairs are drawn i.i.d. without the distinctness
/// redraw: `2 π_ref(y) Σ_{y'} π_ref(y') σ(r_y − r_y')`.
pub fn iid_pair_chosen_marginal<T: Real>(domain: &TabularDomain<T>) -> Result<Vec<ProbTable<T>>> {
    let pi_ref: Rows<T> = (0..domain.num_prompts()).map(|x| domain.pi_ref(x).as_slice().to_vec()).collect();
    chosen_rows(&pi_ref, domain.rewards(), false)
        .into_iter()
        .map(ProbTable::new)
        .collect()
}

/// Draws labeled pairs from a fixed domain.
#[derive(Debug, Clone)]
pub struct PairSampler<'a, T> {
    domain: &'a TabularDomain<T>,
    ref_dists: Vec<WeightedIndex<f64>>,
}

impl<'a, T: Real> PairSampler<'a, T> {
    pub fn new(domain: &'a TabularDomain<T>) -> Result<Self> {
        let ref_dists = (0..domain.num_prompts())
            .map(|x| {
                WeightedIndex::new(domain.pi_ref(x).iter().map(T::to_f64_lossy))
                    .map_err(|e| Error::Support(format!("prompt {x}: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { domain, ref_dists })
    }

    /// `(chosen id, rejected id)` for prompt `x`.
    pub fn sample_ids<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> Result<(usize, usize)> {
        let dist = self
            .ref_dists
            .get(x)
            .ok_or_else(|| Error::invalid(format!("prompt id {x} out of range")))?;
        for _ in 0..=MAX_RETRIES {
            let a = dist.sample(rng);
            let b = dist.sample(rng);
            if a == b {
                continue;
            }
            let r = self.domain.reward(x);
            let p_a = sigmoid(r[a] - r[b]).to_f64_lossy();
            return Ok(if rng.gen::<f64>() < p_a { (a, b) } else { (b, a) });
        }
        Err(Error::Support(format!(
            "prompt {x}: no distinct pair after {MAX_RETRIES} redraws (degenerate reference)"
        )))
    }

    pub fn sample<R: Rng + ?Sized>(&self, x: usize, rng: &mut R) -> Result<PreferenceTriple> {
        let (w, l) = self.sample_ids(x, rng)?;
        let mut meta = Map::new();
        meta.insert("prompt_id".into(), Value::from(x));
        meta.insert("chosen_id".into(), Value::from(w));
        meta.insert("rejected_id".into(), Value::from(l));
        Ok(PreferenceTriple::new(
            self.domain.prompt(x).clone(),
            self.domain.response(x, w).clone(),
            self.domain.response(x, l).clone(),
        )?
        .with_meta(meta))
    }

    /// Chosen-response counts over `n` draws for prompt `x`.
    pub fn chosen_counts<R: Rng + ?Sized>(&self, x: usize, n: usize, rng: &mut R) -> Result<Vec<u64>> {
        let mut counts = vec![0_u64; self.domain.num_responses(x)];
        for _ in 0..n {
            counts[self.sample_ids(x, rng)?.0] += 1;
        }
        Ok(counts)
    }
}

/// One labeled pair for prompt `x`.
pub fn bt_sample_pair<T: Real, R: Rng + ?Sized>(domain: &TabularDomain<T>, x: usize, rng: &mut R) -> Result<PreferenceTriple> {
    PairSampler::new(domain)?.sample(x, rng)
}

/// Record written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: GenConfig,
    pub sample_seed: u64,
    pub pairs_per_prompt: usize,
    pub num_triples: usize,
    pub vocab_size: u32,
    pub dataset_file: String,
    pub domain_file: String,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_versioned(path, "dataset-manifest")
    }
}

/// Paths of the three artifacts written by [`write_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub dataset: PathBuf,
    pub domain: PathBuf,
    pub manifest: PathBuf,
}

/// Samples `pairs_per_prompt` triples per prompt (prompt-major order) and
/// writes the dataset, the domain and a manifest into `dir`.
pub fn write_dataset<T: Real>(truth: &GroundTruth<T>, pairs_per_prompt: usize, dir: impl AsRef<Path>, seed: u64) -> Result<(DatasetManifest, DatasetPaths)> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths {
        dataset: dir.join(DATASET_FILE),
        domain: dir.join(DOMAIN_FILE),
        manifest: dir.join(MANIFEST_FILE),
    };
    let domain = &truth.domain;
    let sampler = PairSampler::new(domain)?;
    let mut triples = Vec::with_capacity(pairs_per_prompt * domain.num_prompts());
    for x in 0..domain.num_prompts() {
        let mut rng = prompt_rng(seed, x as u64);
        for _ in 0..pairs_per_prompt {
            triples.push(sampler.sample(x, &mut rng)?);
        }
    }
    let file = File::create(&paths.dataset).map_err(|e| Error::io(&paths.dataset, e))?;
    let mut out = BufWriter::new(file);
    write_triples(&mut out, &triples)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(&paths.dataset, e))?;
    domain.save(&paths.domain)?;
    let manifest = DatasetManifest {
        config: truth.config.clone(),
        sample_seed: seed,
        pairs_per_prompt,
        num_triples: triples.len(),
        vocab_size: domain.vocab_size(),
        dataset_file: DATASET_FILE.into(),
        domain_file: DOMAIN_FILE.into(),
    };
    write_versioned(&paths.manifest, "dataset-manifest", &manifest)?;
    Ok((manifest, paths))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChiSquareReport {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub bins: usize,
}

impl ChiSquareReport {
    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value >= alpha
    }
}

/// Pearson goodness-of-fit of `observed` counts against `probs`. Bins with
/// expected count below 5 are pooled, smallest first, into one tail bin.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> Result<ChiSquareReport> {
    if observed.len() != probs.len() || observed.is_empty() {
        return Err(Error::invalid("observed and expected bins differ in length"));
    }
    let n: u64 = observed.iter().sum();
    if n == 0 {
        return Err(Error::invalid("no observations"));
    }
    let n = n as f64;
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut pool = (0.0, 0.0);
    for &i in &order {
        let e = probs[i] * n;
        if pool.1 > 0.0 || e < 5.0 {
            pool.0 += observed[i] as f64;
            pool.1 += e;
            if pool.1 >= 5.0 {
                bins.push(pool);
                pool = (0.0, 0.0);
            }
        } else {
            bins.push((observed[i] as f64, e));
        }
    }
    if pool.1 > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += pool.0;
                last.1 += pool.1;
            }
            None => bins.push(pool),
        }
    }
    if bins.len() < 2 {
        return Err(Error::invalid("fewer than two bins after pooling"));
    }
    let statistic: f64 = bins.iter().map(|&(o, e)| (o - e) * (o - e) / e).sum();
    let dof = bins.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(ChiSquareReport {
        statistic,
        dof,
        p_value: dist.sf(statistic),
        bins: bins.len(),
    })
}

/// Standard score of an observed frequency against a Bernoulli rate.
pub fn binomial_z(successes: u64, n: u64, p: f64) -> f64 {
    let n = n as f64;
    (successes as f64 - n * p) / (n * p * (1.0 - p)).sqrt()
}
