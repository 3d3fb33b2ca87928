//! One training run: load a generated dataset, train, write artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use dilab::data::load_dataset;
use dilab::datagen::DatasetManifest;
use dilab::datagen::MANIFEST_FILE;
use dilab::io::write_versioned;
use dilab::policy::clone_frozen;
use dilab::trainer::{summarize, train, write_metrics, TrainData, TrainError};
use dilab::{Domain, LossSpec, MetricsRow, OptimConfig, PreferenceTriple, RunSummary, SeqPolicy, TabularPolicy, TrainablePolicy};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{PolicyName, PolicySettings};
use crate::Failure;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const RUN_MANIFEST_FILE: &str = "run-manifest.json";

#[derive(Debug, Clone)]
pub struct TrainRequest {
    pub loss: LossSpec,
    pub optim: OptimConfig,
    pub model: PolicySettings,
    pub data_dir: PathBuf,
    /// Compute KL and true-reward metrics against the domain.
    pub oracle: bool,
    /// Domain file; defaults to the one named in the dataset manifest.
    pub domain: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub name: String,
    pub metrics: Vec<MetricsRow>,
    pub summary: RunSummary,
}

impl RunReport {
    pub fn summary_line(&self, status: &str, loss: &LossSpec) -> String {
        let s = &self.summary;
        let last = self.metrics.last().map_or(0, |r| r.step);
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
        format!(
            "status={status} run={} loss={loss} steps={last} final_loss={} initial_margin={} final_margin={} chosen_decline={} final_reverse_kl={}",
            self.name,
            self.metrics.last().map_or(f64::NAN, |r| r.loss),
            s.initial_margin,
            s.final_margin,
            s.chosen_decline,
            opt(s.final_reverse_kl),
        )
    }
}

#[derive(Serialize)]
struct InputHash {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    name: &'a str,
    status: &'a str,
    loss: &'a LossSpec,
    optim: &'a OptimConfig,
    model: &'a PolicySettings,
    oracle_metrics: bool,
    diverged_at: Option<usize>,
    inputs: Vec<InputHash>,
    outputs: [&'a str; 2],
}

/// Runs one training job. On a numerical abort the last finite parameters
/// and the metrics so far are still written, then an exit-3 failure carrying
/// the summary line is returned.
pub fn run_training(req: &TrainRequest) -> Result<RunReport, Failure> {
    let manifest_path = req.data_dir.join(MANIFEST_FILE);
    let manifest = DatasetManifest::load(&manifest_path).map_err(|e| Failure::config(format!("dataset manifest: {e}")))?;
    let dataset_path = req.data_dir.join(&manifest.dataset_file);
    let dataset = load_dataset(&dataset_path, manifest.vocab_size, false).map_err(|e| Failure::config(format!("dataset: {e}")))?;

    let needs_domain = req.oracle || req.model.policy == PolicyName::Tabular;
    let domain_path = needs_domain.then(|| req.domain.clone().unwrap_or_else(|| req.data_dir.join(&manifest.domain_file)));
    let domain = match &domain_path {
        Some(p) => Some(Domain::load(p).map_err(|e| Failure::config(format!("domain: {e}")))?),
        None => None,
    };

    let mut inputs = vec![hash_file(&manifest_path)?, hash_file(&dataset_path)?];
    if let Some(p) = &domain_path {
        inputs.push(hash_file(p)?);
    }
    let name = req
        .out_dir
        .file_name()
        .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());
    let triples = &dataset.triples;
    let data = Job {
        req,
        name: &name,
        triples,
        domain: domain.as_ref().filter(|_| req.oracle),
        inputs,
    };
    match req.model.policy {
        PolicyName::Tabular => {
            let domain = domain.as_ref().expect("tabular runs always load a domain");
            let policy = TabularPolicy::from_reference(domain).map_err(|e| Failure::config(e.to_string()))?;
            data.fit(policy)
        }
        PolicyName::TinySeq => {
            let m = &req.model;
            let policy = SeqPolicy::new(manifest.vocab_size, m.embed_dim, m.window, m.init_seed).map_err(|e| Failure::config(e.to_string()))?;
            data.fit(policy)
        }
    }
}

struct Job<'a> {
    req: &'a TrainRequest,
    name: &'a str,
    triples: &'a [PreferenceTriple],
    domain: Option<&'a Domain>,
    inputs: Vec<InputHash>,
}

impl Job<'_> {
    fn fit<P: TrainablePolicy<f64>>(self, policy: P) -> Result<RunReport, Failure> {
        let req = self.req;
        let reference = clone_frozen(&policy);
        let data = TrainData {
            triples: self.triples,
            domain: self.domain,
        };
        fs::create_dir_all(&req.out_dir).map_err(|e| Failure::config(format!("cannot create {}: {e}", req.out_dir.display())))?;
        let (checkpoint, metrics, diverged) = match train(policy, &reference, data, &req.loss, &req.optim) {
            Ok(out) => (out.checkpoint, out.metrics, None),
            Err(TrainError::Diverged {
                step,
                message,
                last_good,
                metrics,
            }) => (*last_good, metrics, Some((step, message))),
            Err(TrainError::Setup(e)) => return Err(Failure::from(e)),
        };
        checkpoint.save(req.out_dir.join(CHECKPOINT_FILE))?;
        write_metrics(req.out_dir.join(METRICS_FILE), &metrics)?;
        let status = if diverged.is_some() { "diverged" } else { "ok" };
        let manifest = RunManifest {
            name: self.name,
            status,
            loss: &req.loss,
            optim: &req.optim,
            model: &req.model,
            oracle_metrics: self.domain.is_some(),
            diverged_at: diverged.as_ref().map(|(s, _)| *s),
            inputs: self.inputs,
            outputs: [CHECKPOINT_FILE, METRICS_FILE],
        };
        write_versioned(req.out_dir.join(RUN_MANIFEST_FILE), "run-manifest", &manifest)?;

        let summary = summarize(self.name, &metrics)?;
        let report = RunReport {
            name: self.name.to_string(),
            metrics,
            summary,
        };
        match diverged {
            None => Ok(report),
            Some((step, message)) => Err(Failure {
                summary: Some(report.summary_line(status, &req.loss)),
                ..Failure::numeric(format!("training diverged at step {step}: {message}"))
            }),
        }
    }
}

fn hash_file(path: &Path) -> Result<InputHash, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(InputHash {
        file: path
            .file_name()
            .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}
