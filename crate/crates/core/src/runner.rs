//! Orchestration of checks, sweeps and weight tables over a configuration.
//!
//! Jobs run on a bounded pool of scoped threads that share one spectrum
//! cache. Results are stored by job index, so outputs do not depend on the
//! schedule.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Format, RunConfig};
use crate::ensemble::{weight_from_full, weight_from_integral, zero_mode_grid, FullEnsemble, WeightField};
use crate::error::{Error, Result};
use crate::model::{EnsembleParams, SymbolKind, TruncatedModel};
use crate::report::{self, COLUMNS_VERSION};
use crate::spectrum::{CacheStats, SpectrumCache};
use crate::verify::{self, inputs_hash, Lab, Point, Verdict, VerificationReport};

/// Environment variable overriding the spectrum cache directory.
pub const CACHE_DIR_ENV: &str = "BOSESUB_CACHE_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobTiming {
    pub job: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub artifact_version: String,
    pub columns_version: u32,
    /// Emitted files keyed by kind, relative to the output directory.
    pub files: BTreeMap<String, String>,
    pub verdicts: BTreeMap<String, usize>,
    pub wall_times: Vec<JobTiming>,
    pub cache: CacheStats,
}

impl RunManifest {
    pub fn failed(&self) -> bool {
        self.verdicts.get("FAIL").copied().unwrap_or(0) > 0
    }
}

/// Cache directory: the environment override, else `<out>/.cache`.
pub fn cache_dir(out: &Path) -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join(".cache"))
}

/// Runs `work` on every item with at most `jobs` threads; results keep the
/// order of `items`.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, work: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let workers = jobs.max(1).min(items.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = work(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[derive(Clone, Debug)]
enum Job {
    Point { check: String, model: usize, params: EnsembleParams },
    Collapse { params: EnsembleParams },
    CollapseFree { params: EnsembleParams },
    Condensate { params: EnsembleParams },
    Concentration { params: EnsembleParams },
}

impl Job {
    fn label(&self, family: &[TruncatedModel]) -> String {
        let p = |x: &EnsembleParams| format!("beta={} mu={} lambda={}", x.beta, x.mu, x.lambda);
        match self {
            Job::Point { check, model, params } => {
                format!("{check} V={} {}", family[*model].volume(), p(params))
            }
            Job::Collapse { params } => format!("collapse {}", p(params)),
            Job::CollapseFree { params } => format!("collapse-free {}", p(params)),
            Job::Condensate { params } => format!("condensate {}", p(params)),
            Job::Concentration { params } => format!("concentration {}", p(params)),
        }
    }
}

fn distinct(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Expands the suite into jobs, rejecting checks whose preconditions the
/// configuration cannot meet.
fn plan_jobs(cfg: &RunConfig, family: &[TruncatedModel]) -> Result<Vec<Job>> {
    let points = cfg.points()?;
    let e = &cfg.ensemble;
    let mut jobs = Vec::new();
    for check in &cfg.suite.checks {
        match check.as_str() {
            "sandwich" | "shift" | "maxz" | "peak" | "multimode" => {
                for model in 0..family.len() {
                    for params in &points {
                        jobs.push(Job::Point {
                            check: check.clone(),
                            model,
                            params: *params,
                        });
                    }
                }
            }
            "collapse" => {
                if family.len() < 3 {
                    return Err(Error::Precondition(format!(
                        "collapse needs at least 3 volumes, the configuration has {}",
                        family.len()
                    )));
                }
                for params in &points {
                    jobs.push(Job::Collapse { params: *params });
                    if cfg.suite.free_family && params.mu < 0.0 && params.lambda == 0.0 {
                        jobs.push(Job::CollapseFree { params: *params });
                    }
                }
            }
            "condensate" => {
                let lambdas: Vec<f64> = e.lambda.iter().copied().filter(|&l| l > 0.0).collect();
                if lambdas.len() < 4 {
                    return Err(Error::Precondition(format!(
                        "condensate needs a λ grid of at least 4 positive values, got {:?}",
                        e.lambda
                    )));
                }
                if family.len() < 2 {
                    return Err(Error::Precondition("condensate needs a volume family".into()));
                }
                for &b in &distinct(e.beta.iter().copied()) {
                    for &mu in &distinct(e.mu.iter().copied()) {
                        jobs.push(Job::Condensate {
                            params: EnsembleParams::new(b, mu, lambdas[0])?,
                        });
                    }
                }
            }
            "concentration" => {
                if family.len() < 2 {
                    return Err(Error::Precondition("concentration needs a volume family".into()));
                }
                let nonzero: Vec<&EnsembleParams> = points.iter().filter(|p| p.lambda != 0.0).collect();
                if nonzero.is_empty() {
                    return Err(Error::Precondition(
                        "concentration needs λ ≠ 0; at λ = 0 the weight is spread over a ring".into(),
                    ));
                }
                jobs.extend(nonzero.into_iter().map(|p| Job::Concentration { params: *p }));
            }
            other => return Err(Error::Config(format!("unknown check `{other}`"))),
        }
    }
    Ok(jobs)
}

fn run_job(lab: &Lab, cfg: &RunConfig, family: &[TruncatedModel], job: &Job) -> Result<VerificationReport> {
    match job {
        Job::Point { check, model, params } => {
            let m = &family[*model];
            match check.as_str() {
                "sandwich" => verify::check_sandwich(lab, m, params),
                "shift" => verify::check_shift(lab, m, params),
                "maxz" => verify::check_maxz(lab, m, params),
                "peak" => verify::check_peak(lab, m, params),
                _ => {
                    let modes = cfg.multimode_modes(&m.spec)?;
                    verify::check_multimode(lab, m, params, &modes)
                }
            }
        }
        Job::Collapse { params } => verify::check_pressure_collapse(lab, family, params),
        Job::CollapseFree { params } => verify::check_pressure_collapse_free(&cfg.free_family()?, params),
        Job::Condensate { params } => {
            let lambdas: Vec<f64> = cfg.ensemble.lambda.iter().copied().filter(|&l| l > 0.0).collect();
            verify::check_condensate(lab, family, params, &lambdas)
        }
        Job::Concentration { params } => verify::check_concentration(lab, family, params),
    }
}

fn job_point(job: &Job, family: &[TruncatedModel]) -> (String, Point) {
    let last = family.last().map(TruncatedModel::volume).unwrap_or(0.0);
    match job {
        Job::Point { check, model, params } => (check.clone(), Point::new(params, family[*model].volume())),
        Job::Collapse { params } => ("collapse".into(), Point::new(params, last)),
        Job::CollapseFree { params } => ("collapse-free".into(), Point::new(params, last)),
        Job::Condensate { params } => ("condensate".into(), Point::new(params, last)),
        Job::Concentration { params } => ("concentration".into(), Point::new(params, last)),
    }
}

fn open_cache(out: &Path) -> Result<SpectrumCache> {
    SpectrumCache::with_dir(cache_dir(out))
}

/// Output of [`run_suite`] before anything is written.
pub struct SuiteOutcome {
    pub reports: Vec<VerificationReport>,
    pub timings: Vec<JobTiming>,
    pub cache: CacheStats,
}

/// Runs the configured checks with `cache`; failing jobs become
/// INCOMPLETE reports.
pub fn execute_suite(cfg: &RunConfig, cache: SpectrumCache, jobs: usize) -> Result<SuiteOutcome> {
    let family = cfg.family()?;
    let plan = plan_jobs(cfg, &family)?;
    let lab = Lab::with_cache(cache, cfg.numerics.numerics());
    let results = parallel_map(&plan, jobs, |job| {
        let t = Instant::now();
        let r = run_job(&lab, cfg, &family, job).unwrap_or_else(|e| {
            let (check, point) = job_point(job, &family);
            VerificationReport::incomplete(&check, inputs_hash(&(check.as_str(), job.label(&family))), point, &e)
        });
        (r, t.elapsed().as_secs_f64())
    });
    let timings = plan
        .iter()
        .zip(&results)
        .map(|(j, (_, s))| JobTiming {
            job: j.label(&family),
            seconds: *s,
        })
        .collect();
    let mut reports: Vec<VerificationReport> = results.into_iter().map(|(r, _)| r).collect();
    report::sort_reports(&mut reports);
    Ok(SuiteOutcome {
        reports,
        timings,
        cache: lab.cache.stats(),
    })
}

fn config_hash(cfg: &RunConfig) -> String {
    inputs_hash(cfg)
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Numerical(e.to_string()))?;
    text.push('\n');
    report::write_file(&out.join("manifest.json"), &text)
}

/// Runs the suite and writes the reports in the requested formats plus a
/// manifest into `out`.
pub fn run_suite(cfg: &RunConfig, out: &Path, jobs: usize, formats: &[Format]) -> Result<RunManifest> {
    let cache = open_cache(out)?;
    let outcome = execute_suite(cfg, cache, jobs)?;
    let mut files = BTreeMap::new();
    for f in formats {
        let (name, text) = match f {
            Format::Rows => ("reports.csv", report::to_rows(&outcome.reports)?),
            Format::Document => ("reports.json", report::to_document(&outcome.reports)?),
        };
        report::write_file(&out.join(name), &text)?;
        files.insert(format!("{f:?}").to_lowercase(), name.to_string());
    }
    let mut verdicts = BTreeMap::new();
    for v in [Verdict::Pass, Verdict::Fail, Verdict::Incomplete] {
        verdicts.insert(v.to_string(), outcome.reports.iter().filter(|r| r.verdict == v).count());
    }
    let manifest = RunManifest {
        config_hash: config_hash(cfg),
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        columns_version: COLUMNS_VERSION,
        files,
        verdicts,
        wall_times: outcome.timings,
        cache: outcome.cache,
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

/// Log partition values and pressures of one model at one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub volume: f64,
    pub beta: f64,
    pub mu: f64,
    pub lambda: f64,
    pub pressure: f64,
    pub pressure_lower: f64,
    pub pressure_upper: f64,
    pub pressure_max: f64,
    pub error: f64,
    pub message: String,
}

/// Pressures over every model and parameter point, without verdicts.
pub fn sweep(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<SweepRow>> {
    let family = cfg.family()?;
    let lab = Lab::with_cache(open_cache(out)?, cfg.numerics.numerics());
    let items: Vec<(usize, EnsembleParams)> = (0..family.len())
        .flat_map(|m| cfg.points().unwrap_or_default().into_iter().map(move |p| (m, p)))
        .collect();
    let rows = parallel_map(&items, jobs, |(m, p)| {
        let model = &family[*m];
        let blank = |message: String| SweepRow {
            volume: model.volume(),
            beta: p.beta,
            mu: p.mu,
            lambda: p.lambda,
            pressure: 0.0,
            pressure_lower: 0.0,
            pressure_upper: 0.0,
            pressure_max: 0.0,
            error: 0.0,
            message,
        };
        match verify::pressure_point(&lab, model, p) {
            Ok(pt) => SweepRow {
                pressure: pt.full,
                pressure_lower: pt.lower,
                pressure_upper: pt.upper,
                pressure_max: pt.max,
                error: pt.error,
                ..blank(String::new())
            },
            Err(e) => blank(e.to_string()),
        }
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Numerical(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
    report::write_file(&out.join("sweep.csv"), &String::from_utf8(bytes).expect("utf-8"))?;
    Ok(rows)
}

/// One grid node of a weight table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub volume: f64,
    pub beta: f64,
    pub mu: f64,
    pub lambda: f64,
    pub source: String,
    pub re: f64,
    pub im: f64,
    pub quad_weight: f64,
    pub weight: f64,
}

fn weight_fields(lab: &Lab, model: &TruncatedModel, p: &EnsembleParams) -> Result<Vec<WeightField>> {
    let grid = zero_mode_grid(&lab.cache, model, p, &lab.numerics, &lab.numerics.grid)?;
    let full = FullEnsemble::new(&lab.cache, model, p)?;
    let upper = crate::ensemble::covered(crate::ensemble::substituted_integral(
        &lab.cache,
        model,
        p,
        &[model.spec.zero_mode().clone()],
        std::slice::from_ref(&grid),
        SymbolKind::Upper,
    )?)?;
    Ok(vec![weight_from_full(&full, &grid)?, weight_from_integral(&upper, model.volume())?])
}

/// Weight tables `W` and `W″` on the zero-mode grid of every model and point.
pub fn weights(cfg: &RunConfig, out: &Path, jobs: usize) -> Result<usize> {
    let family = cfg.family()?;
    let lab = Lab::with_cache(open_cache(out)?, cfg.numerics.numerics());
    let points = cfg.points()?;
    let items: Vec<(usize, EnsembleParams)> = (0..family.len())
        .flat_map(|m| points.iter().map(move |p| (m, *p)))
        .collect();
    let fields = parallel_map(&items, jobs, |(m, p)| weight_fields(&lab, &family[*m], p));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut count = 0;
    for ((m, p), f) in items.iter().zip(fields) {
        for field in f? {
            let source = format!("{:?}", field.source).to_lowercase();
            for (i, (z, qw)) in field.grid.nodes().enumerate() {
                w.serialize(WeightRow {
                    volume: family[*m].volume(),
                    beta: p.beta,
                    mu: p.mu,
                    lambda: p.lambda,
                    source: source.clone(),
                    re: z.re,
                    im: z.im,
                    quad_weight: qw,
                    weight: field.values[i],
                })
                .map_err(|e| Error::Numerical(e.to_string()))?;
                count += 1;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(e.to_string()))?;
    report::write_file(&out.join("weights.csv"), &String::from_utf8(bytes).expect("utf-8"))?;
    Ok(count)
}
