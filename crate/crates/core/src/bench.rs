//! Datasets, benchmark runs and result files.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csp::{self, CspInstance, ProblemKind};
use crate::error::{Error, Result};
use crate::io::{self, Graph};
use crate::lns::{lns_run, LnsConfig, RunRecord};
use crate::model::RepairModel;

pub const MANIFEST: &str = "dataset.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Sudoku4,
    Sudoku9,
    Graph,
    Maxcut,
}

impl DatasetKind {
    pub fn problem_kind(self) -> ProblemKind {
        match self {
            DatasetKind::Sudoku4 | DatasetKind::Sudoku9 => ProblemKind::Sudoku,
            DatasetKind::Graph => ProblemKind::GraphColoring,
            DatasetKind::Maxcut => ProblemKind::MaxCut,
        }
    }
}

/// Generator parameters. Fields irrelevant to `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub p: f64,
    pub k: usize,
    pub givens: usize,
    pub count: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DatasetKind::Sudoku4 | DatasetKind::Sudoku9 => {
                let cells = self.side() * self.side();
                if self.givens > cells {
                    return Err(Error::Config(format!("{} givens exceed {cells} cells", self.givens)));
                }
            }
            DatasetKind::Graph | DatasetKind::Maxcut => {
                if !(0.0..=1.0).contains(&self.p) {
                    return Err(Error::Config(format!("edge probability {} outside [0, 1]", self.p)));
                }
                if self.kind == DatasetKind::Graph && self.k < 2 {
                    return Err(Error::Config(format!("need k >= 2 colors, got {}", self.k)));
                }
            }
        }
        Ok(())
    }

    fn side(&self) -> usize {
        if self.kind == DatasetKind::Sudoku9 {
            9
        } else {
            4
        }
    }

    pub fn domain_size(&self) -> usize {
        match self.kind {
            DatasetKind::Sudoku4 | DatasetKind::Sudoku9 => self.side(),
            DatasetKind::Graph => self.k,
            DatasetKind::Maxcut => 2,
        }
    }

    /// Deterministic in `seed`.
    pub fn generate(&self) -> Result<Vec<CspInstance>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.count)
            .map(|i| {
                let inst = match self.kind {
                    DatasetKind::Sudoku4 | DatasetKind::Sudoku9 => io::gen_sudoku(self.side(), self.givens, &mut rng)?,
                    DatasetKind::Graph | DatasetKind::Maxcut => {
                        let g = io::gen_random_graph(self.n, self.p, &mut rng)?;
                        io::build_instance(&g, self.kind.problem_kind(), self.domain_size())?
                    }
                };
                Ok(inst.with_name(format!("{}-{i:04}", self.prefix())))
            })
            .collect()
    }

    fn prefix(&self) -> &'static str {
        match self.kind {
            DatasetKind::Sudoku4 | DatasetKind::Sudoku9 => "puzzle",
            DatasetKind::Graph => "graph",
            DatasetKind::Maxcut => "cut",
        }
    }
}

/// Contents of `dataset.json`. Sudoku datasets keep all puzzles in one
/// line-per-instance file; graph datasets have one file per instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ProblemKind,
    pub domain_size: usize,
    pub files: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<DatasetSpec>,
}

fn graph_extension(kind: ProblemKind) -> &'static str {
    if kind == ProblemKind::MaxCut {
        "gset"
    } else {
        "col"
    }
}

/// Writes instances and a manifest into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, instances: &[CspInstance], generator: Option<&DatasetSpec>) -> Result<Manifest> {
    let first = instances
        .first()
        .ok_or_else(|| Error::Config("refusing to write an empty dataset".into()))?;
    let (kind, domain_size) = (first.kind, first.domain_size());
    if instances.iter().any(|i| i.kind != kind || i.domain_size() != domain_size) {
        return Err(Error::Config("dataset mixes problem kinds or domain sizes".into()));
    }
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    if kind == ProblemKind::Sudoku {
        let mut text = String::new();
        for inst in instances {
            text.push_str(&io::serialize_sudoku(inst)?);
            text.push('\n');
        }
        fs::write(dir.join("puzzles.txt"), text)?;
        files.push("puzzles.txt".to_string());
    } else {
        for (i, inst) in instances.iter().enumerate() {
            let stem = if inst.name.is_empty() { format!("instance-{i:04}") } else { inst.name.clone() };
            let file = format!("{stem}.{}", graph_extension(kind));
            let g = Graph::from_instance(inst)?;
            let text = if kind == ProblemKind::MaxCut { io::serialize_gset(&g) } else { io::serialize_dimacs_col(&g) };
            fs::write(dir.join(&file), text)?;
            files.push(file);
        }
    }
    let manifest = Manifest { kind, domain_size, files, generator: generator.cloned() };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join(MANIFEST), json + "\n")?;
    Ok(manifest)
}

fn file_stem(file: &str) -> &str {
    Path::new(file).file_stem().and_then(|s| s.to_str()).unwrap_or(file)
}

fn located(file: &str, e: Error) -> Error {
    match e {
        Error::Parse { location, message } => Error::Parse { location: format!("{file}: {location}"), message },
        other => other,
    }
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<CspInstance>)> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(MANIFEST, e.to_string()))?;
    let mut out = Vec::new();
    for file in &manifest.files {
        let text = fs::read_to_string(dir.join(file))?;
        match manifest.kind {
            ProblemKind::Sudoku => {
                let stem = file_stem(file);
                let batch = io::parse_sudoku_file(&text).map_err(|e| located(file, e))?;
                let base = out.len();
                for (j, inst) in batch.into_iter().enumerate() {
                    if inst.domain_size() != manifest.domain_size {
                        return Err(Error::Config(format!("{file}: grid size differs from the manifest")));
                    }
                    let name = if stem == "puzzles" { format!("puzzle-{:04}", base + j) } else { format!("{stem}-{j:04}") };
                    out.push(inst.with_name(name));
                }
            }
            kind => {
                let g = if file.ends_with(".col") { io::parse_dimacs_col(&text) } else { io::parse_gset(&text) }
                    .map_err(|e| located(file, e))?;
                out.push(io::build_instance(&g, kind, manifest.domain_size)?.with_name(file_stem(file)));
            }
        }
    }
    Ok((manifest, out))
}

/// Reads a single instance, choosing the parser by extension: `.col`
/// (coloring with `k` colors), `.gset` (max-cut), anything else is a Sudoku
/// line file whose first puzzle is used.
pub fn load_instance(path: &Path, k: usize) -> Result<CspInstance> {
    let text = fs::read_to_string(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("instance").to_string();
    let shown = path.display().to_string();
    let inst = match path.extension().and_then(|e| e.to_str()) {
        Some("col") => io::build_instance(&io::parse_dimacs_col(&text).map_err(|e| located(&shown, e))?, ProblemKind::GraphColoring, k)?,
        Some("gset") => io::build_instance(&io::parse_gset(&text).map_err(|e| located(&shown, e))?, ProblemKind::MaxCut, 2)?,
        _ => io::parse_sudoku_file(&text)
            .map_err(|e| located(&shown, e))?
            .into_iter()
            .next()
            .ok_or_else(|| Error::parse(shown, "no puzzle in file"))?,
    };
    Ok(inst.with_name(name))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub destroy: String,
    pub repair: String,
    pub rho: f64,
    pub tau: f64,
    pub max_iterations: Option<usize>,
    pub time_limit_s: Option<f64>,
    pub seed: u64,
    pub stop_on_feasible: bool,
}

impl From<&LnsConfig> for ConfigEcho {
    fn from(cfg: &LnsConfig) -> Self {
        ConfigEcho {
            destroy: cfg.destroy.to_string(),
            repair: cfg.repair.to_string(),
            rho: cfg.rho,
            tau: cfg.tau,
            max_iterations: cfg.max_iterations,
            time_limit_s: cfg.time_limit.map(|d| d.as_secs_f64()),
            seed: cfg.seed,
            stop_on_feasible: cfg.stop_on_feasible,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceSummary {
    pub instance_id: String,
    pub seed: u64,
    pub iterations: usize,
    pub initial_cost: usize,
    pub best_cost: usize,
    pub final_cost: usize,
    pub solved: bool,
    /// All cells of the final assignment against the ground truth.
    pub cell_accuracy: Option<f64>,
    pub best_cut: Option<usize>,
    pub reference_cut: Option<usize>,
    /// `reference_cut - best_cut`.
    pub gap: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    pub instances: usize,
    pub solved_fraction: f64,
    pub mean_best_cost: Option<f64>,
    pub median_best_cost: Option<f64>,
    pub mean_cell_accuracy: Option<f64>,
    pub mean_gap: Option<f64>,
    pub cell_accuracy_scope: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkResult {
    pub config: ConfigEcho,
    pub summaries: Vec<InstanceSummary>,
    pub aggregates: Aggregates,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Per-instance summaries plus aggregates. `seeds[i]` is the seed used for
/// run `i`. Every reference must name a max-cut instance in the batch.
pub fn compute_metrics(
    runs: &[(&CspInstance, &RunRecord)],
    seeds: &[u64],
    references: Option<&[(String, usize)]>,
) -> Result<(Vec<InstanceSummary>, Aggregates)> {
    if seeds.len() != runs.len() {
        return Err(Error::Structural("one seed per run is required".into()));
    }
    let refs: HashMap<&str, usize> = references
        .unwrap_or_default()
        .iter()
        .map(|(n, c)| (n.as_str(), *c))
        .collect();
    for name in refs.keys() {
        match runs.iter().find(|(inst, _)| inst.name == *name) {
            None => return Err(Error::Config(format!("reference for unknown instance `{name}`"))),
            Some((inst, _)) if inst.kind != ProblemKind::MaxCut => {
                return Err(Error::Config(format!("reference for non-max-cut instance `{name}`")))
            }
            _ => {}
        }
    }
    let summaries: Vec<InstanceSummary> = runs
        .iter()
        .zip(seeds)
        .map(|((inst, rec), &seed)| {
            let cell_accuracy = inst.ground_truth().map(|truth| {
                let hits = truth.iter().zip(rec.final_assignment.values()).filter(|(a, b)| a == b).count();
                hits as f64 / truth.len().max(1) as f64
            });
            let best_cut = (inst.kind == ProblemKind::MaxCut).then(|| csp::cut_size(inst, &rec.best_assignment));
            let reference_cut = refs.get(inst.name.as_str()).copied();
            let gap = best_cut.zip(reference_cut).map(|(b, r)| r as i64 - b as i64);
            InstanceSummary {
                instance_id: inst.name.clone(),
                seed,
                iterations: rec.iterations,
                initial_cost: rec.initial_cost(),
                best_cost: rec.best_cost(),
                final_cost: *rec.costs.last().expect("record has the initial entry"),
                solved: rec.best_cost() == 0,
                cell_accuracy,
                best_cut,
                reference_cut,
                gap,
            }
        })
        .collect();
    let best: Vec<f64> = summaries.iter().map(|s| s.best_cost as f64).collect();
    let acc: Vec<f64> = summaries.iter().filter_map(|s| s.cell_accuracy).collect();
    let gaps: Vec<f64> = summaries.iter().filter_map(|s| s.gap.map(|g| g as f64)).collect();
    let solved = summaries.iter().filter(|s| s.solved).count();
    let aggregates = Aggregates {
        instances: summaries.len(),
        solved_fraction: if summaries.is_empty() { 0.0 } else { solved as f64 / summaries.len() as f64 },
        mean_best_cost: mean(&best),
        median_best_cost: median(&best),
        mean_cell_accuracy: mean(&acc),
        mean_gap: mean(&gaps),
        cell_accuracy_scope: "all-cells",
    };
    Ok((summaries, aggregates))
}

/// Seed of run `index` under top-level seed `seed`.
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

pub struct BenchmarkRun {
    pub result: BenchmarkResult,
    pub records: Vec<RunRecord>,
}

/// Runs every instance in parallel with seed `instance_seed(cfg.seed, i)`.
pub fn run_benchmark(
    instances: &[CspInstance],
    model: &RepairModel,
    cfg: &LnsConfig,
    references: Option<&[(String, usize)]>,
) -> Result<BenchmarkRun> {
    cfg.validate()?;
    if instances.is_empty() {
        log::warn!("benchmark dataset is empty");
    }
    for inst in instances {
        model.check_compatible(inst)?;
    }
    let seeds: Vec<u64> = (0..instances.len()).map(|i| instance_seed(cfg.seed, i)).collect();
    let records = instances
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(inst, &seed)| lns_run(inst, model, &LnsConfig { seed, ..cfg.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&CspInstance, &RunRecord)> = instances.iter().zip(&records).collect();
    let (summaries, aggregates) = compute_metrics(&pairs, &seeds, references)?;
    Ok(BenchmarkRun {
        result: BenchmarkResult { config: cfg.into(), summaries, aggregates },
        records,
    })
}

#[derive(Serialize)]
struct TraceRow<'a> {
    instance_id: &'a str,
    iter: usize,
    cost: usize,
    best_cost: usize,
    cell_accuracy: Option<f64>,
    cut_size: Option<usize>,
    elapsed_ms: f64,
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

/// One row per iteration of every run, initial state included as iter 0.
pub fn write_trace_csv<W: Write>(sink: W, runs: &[(&str, &RunRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    for (id, rec) in runs {
        for t in 0..rec.costs.len() {
            w.serialize(TraceRow {
                instance_id: id,
                iter: t,
                cost: rec.costs[t],
                best_cost: rec.best_costs[t],
                cell_accuracy: rec.cell_accuracy.as_ref().map(|a| a[t]),
                cut_size: rec.cut_sizes.as_ref().map(|c| c[t]),
                elapsed_ms: rec.elapsed_ms[t],
            })
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct AggregateRow<'a> {
    instance_id: &'a str,
    destroy: &'a str,
    repair: &'a str,
    rho: f64,
    tau: f64,
    seed: u64,
    iterations: usize,
    initial_cost: usize,
    best_cost: usize,
    final_cost: usize,
    solved: bool,
    cell_accuracy: Option<f64>,
    best_cut: Option<usize>,
    reference_cut: Option<usize>,
    gap: Option<i64>,
}

/// One row per (instance, config). Contains no timings, so reruns with the
/// same configuration are byte-identical.
pub fn write_aggregate_csv<W: Write>(sink: W, result: &BenchmarkResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let c = &result.config;
    for s in &result.summaries {
        w.serialize(AggregateRow {
            instance_id: &s.instance_id,
            destroy: &c.destroy,
            repair: &c.repair,
            rho: c.rho,
            tau: c.tau,
            seed: s.seed,
            iterations: s.iterations,
            initial_cost: s.initial_cost,
            best_cost: s.best_cost,
            final_cost: s.final_cost,
            solved: s.solved,
            cell_accuracy: s.cell_accuracy,
            best_cut: s.best_cut,
            reference_cut: s.reference_cut,
            gap: s.gap,
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(mut sink: W, result: &BenchmarkResult) -> Result<()> {
    serde_json::to_writer_pretty(&mut sink, result).map_err(|e| Error::Config(e.to_string()))?;
    sink.write_all(b"\n")?;
    Ok(())
}
