//! Grid sweeps over loss × learning rate × seed.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use dilab::trainer::{compare_runs, summaries_to_tsv};
use dilab::LossSpec;

use crate::run::{run_training, RunReport, TrainRequest};
use crate::{Failure, EXIT_NUMERIC};

pub const SUMMARY_FILE: &str = "summary.tsv";
pub const FAILURES_FILE: &str = "failures.tsv";

/// Axis values; an empty axis falls back to the config value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grid {
    pub loss: Vec<String>,
    pub lr: Vec<f64>,
    pub seed: Vec<u64>,
}

impl Grid {
    /// Parses `loss=dil-lsif,dpo;lr=0.01,0.1;seed=0,1,2`.
    pub fn parse(spec: &str) -> Result<Self, Failure> {
        let mut grid = Grid::default();
        let mut seen = Vec::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| Failure::config(format!("grid entry `{part}` is not key=values")))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Failure::config(format!("grid key `{key}` given twice")));
            }
            seen.push(key);
            let values: Vec<&str> = values.split(',').map(str::trim).collect();
            if values.iter().any(|v| v.is_empty()) {
                return Err(Failure::config(format!("grid key `{key}` has an empty value")));
            }
            match key {
                "loss" => grid.loss = values.iter().map(|v| v.to_string()).collect(),
                "lr" => grid.lr = parse_all(key, &values)?,
                "seed" => grid.seed = parse_all(key, &values)?,
                other => return Err(Failure::config(format!("unknown grid key `{other}`; valid: loss, lr, seed"))),
            }
        }
        if seen.is_empty() {
            return Err(Failure::config("grid spec is empty"));
        }
        Ok(grid)
    }
}

fn parse_all<V: std::str::FromStr>(key: &str, values: &[&str]) -> Result<Vec<V>, Failure> {
    values
        .iter()
        .map(|v| v.parse().map_err(|_| Failure::config(format!("grid key `{key}`: cannot parse `{v}`"))))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub name: String,
    pub request: TrainRequest,
}

/// Expands the grid in loss-major, then lr, then seed order.
pub fn cells(
    grid: &Grid,
    base: &TrainRequest,
    loss_of: impl Fn(Option<&str>) -> Result<LossSpec, Failure>,
    out: &Path,
) -> Result<Vec<Cell>, Failure> {
    let losses: Vec<Option<&str>> = if grid.loss.is_empty() {
        vec![None]
    } else {
        grid.loss.iter().map(|s| Some(s.as_str())).collect()
    };
    let lrs = if grid.lr.is_empty() { vec![base.optim.lr] } else { grid.lr.clone() };
    let seeds = if grid.seed.is_empty() { vec![base.optim.seed] } else { grid.seed.clone() };
    let mut out_cells = Vec::new();
    for loss in &losses {
        let spec = loss_of(*loss)?;
        for &lr in &lrs {
            for &seed in &seeds {
                let name = format!("{}-lr{lr:?}-seed{seed}", spec.name());
                let mut request = base.clone();
                request.loss = spec;
                request.optim.lr = lr;
                request.optim.seed = seed;
                request.optim.validate().map_err(|e| Failure::config(format!("cell {name}: {e}")))?;
                request.out_dir = out.join(&name);
                out_cells.push(Cell { name, request });
            }
        }
    }
    let mut names: Vec<&str> = out_cells.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Failure::config("grid produces duplicate cells"));
    }
    Ok(out_cells)
}

/// Runs every cell on up to `jobs` threads; results come back in cell order.
pub fn run_cells(cells: &[Cell], jobs: usize) -> Vec<Result<RunReport, Failure>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunReport, Failure>>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let result = run_training(&cell.request);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers have finished")
        .into_iter()
        .map(|r| r.expect("every cell is visited"))
        .collect()
}

/// Writes the comparison table (and a failure list when needed) and returns
/// the process outcome.
pub fn finish(cells: &[Cell], results: Vec<Result<RunReport, Failure>>, out: &Path) -> Result<String, Failure> {
    fs::create_dir_all(out).map_err(|e| Failure::config(format!("cannot create {}: {e}", out.display())))?;
    let mut logs = Vec::new();
    let mut failures = Vec::new();
    for (cell, result) in cells.iter().zip(results) {
        match result {
            Ok(report) => logs.push((cell.name.clone(), report.metrics)),
            Err(f) => failures.push((cell.name.clone(), f)),
        }
    }
    let failure_path = out.join(FAILURES_FILE);
    if failures.is_empty() {
        if failure_path.exists() {
            fs::remove_file(&failure_path).map_err(|e| Failure::config(format!("{}: {e}", failure_path.display())))?;
        }
    } else {
        let mut text = String::from("run\texit_code\tmessage\n");
        for (name, f) in &failures {
            text.push_str(&format!("{name}\t{}\t{}\n", f.code, f.message.replace(['\t', '\n'], " ")));
        }
        fs::write(&failure_path, text).map_err(|e| Failure::config(format!("{}: {e}", failure_path.display())))?;
    }
    if logs.is_empty() {
        let code = if failures.iter().any(|(_, f)| f.code == EXIT_NUMERIC) { EXIT_NUMERIC } else { failures[0].1.code };
        let detail: Vec<String> = failures.iter().map(|(n, f)| format!("{n}: {}", f.message)).collect();
        return Err(Failure {
            code,
            message: format!("every sweep cell failed\n{}", detail.join("\n")),
            summary: None,
        });
    }
    let table = summaries_to_tsv(&compare_runs(&logs)?);
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, &table).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let mut text = table;
    for (name, f) in &failures {
        text.push_str(&format!("status=failed run={name} exit_code={} message={}\n", f.code, f.message.replace('\n', " ")));
    }
    text.push_str(&format!(
        "status=ok cells={} succeeded={} failed={} table={}",
        cells.len(),
        logs.len(),
        failures.len(),
        path.display()
    ));
    Ok(text)
}
