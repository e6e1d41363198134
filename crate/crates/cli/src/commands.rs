//! Subcommand implementations over a run directory:
//!
//! ```text
//! <out>/config.toml            effective configuration
//! <out>/manifest.json          last command, per-series status
//! <out>/checkpoints/<id>.ckpt
//! <out>/logs/<id>.csv
//! <out>/reports/<id>.json
//! <out>/eval/                  eval.json, eval_table.csv, eval_series.csv
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use tsvae::config::RunConfig;
use tsvae::detect::{detect as run_detect, DetectionReport};
use tsvae::evaluate::{subset_of, EvalReport, SeriesResult};
use tsvae::hvae::checkpoint::{Checkpoint, CheckpointModel};
use tsvae::ingest::{LabelSet, TimeSeries};
use tsvae::pipeline::prepare_values;
use tsvae::synth::{generate, spike_series, write_corpus};
use tsvae::train::fit_with;
use tsvae::{Error, Interval};

use crate::dataset::{discover, file_stem, Entry};
use crate::manifest::{Manifest, SeriesEntry, Status};
use crate::{RunArgs, StubKind, SynthArgs};

pub const USAGE: i32 = 1;
pub const DATA: i32 = 2;
pub const NUMERIC: i32 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(e: impl std::fmt::Display) -> Self {
        Failure { code: USAGE, message: e.to_string() }
    }

    fn kind(&self) -> &'static str {
        match self.code {
            USAGE => "usage",
            NUMERIC => "numeric",
            _ => "data",
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => USAGE,
            Error::NonFinite { .. } => NUMERIC,
            _ => DATA,
        };
        Failure { code, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: DATA, message: format!("{}: {e}", path.display()) }
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn create(cfg: &RunConfig) -> Result<Self, Failure> {
        let root = cfg.output.dir.clone();
        for sub in ["checkpoints", "logs", "reports"] {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| io_failure(&p, e))?;
        }
        let cfg_path = root.join("config.toml");
        std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| io_failure(&cfg_path, e))?;
        Ok(RunDir { root })
    }

    fn checkpoint(&self, id: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", file_stem(id)))
    }

    fn log(&self, id: &str) -> PathBuf {
        self.root.join("logs").join(format!("{}.csv", file_stem(id)))
    }

    fn report(&self, id: &str) -> PathBuf {
        self.root.join("reports").join(format!("{}.json", file_stem(id)))
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }

    fn finish(&self, manifest: &mut Manifest) -> Result<(), Failure> {
        let first = manifest.failures().next().map(|s| {
            let code = match s.error_kind.as_deref() {
                Some("usage") => USAGE,
                Some("numeric") => NUMERIC,
                _ => DATA,
            };
            (code, s.id.clone(), s.error.clone().unwrap_or_default())
        });
        let failed = manifest.failures().count();
        let code = first.as_ref().map_or(0, |f| f.0);
        manifest.write(&self.root, code).map_err(|e| io_failure(&self.root, e))?;
        match first {
            None => Ok(()),
            Some((code, id, msg)) => Err(Failure {
                code,
                message: format!("{failed} of {} series failed; first: {id}: {msg}", manifest.series.len()),
            }),
        }
    }
}

fn entries(cfg: &RunConfig) -> Result<Vec<Entry>, Failure> {
    let path = cfg.data.path.as_ref().ok_or_else(|| Failure::usage("no data path; pass --data or set data.path"))?;
    Ok(discover(path, cfg.data.format)?)
}

fn load_labels(cfg: &RunConfig) -> Result<LabelSet, Failure> {
    let path = cfg.data.labels.as_ref().ok_or_else(|| Failure::usage("no label file; pass --labels or set data.labels"))?;
    Ok(LabelSet::load(path, cfg.data.format)?)
}

fn ok(id: &str, outputs: Vec<String>) -> SeriesEntry {
    SeriesEntry { id: id.into(), status: Status::Ok, error: None, error_kind: None, outputs }
}

fn skipped(id: &str) -> SeriesEntry {
    SeriesEntry { id: id.into(), status: Status::Skipped, error: None, error_kind: None, outputs: Vec::new() }
}

fn failed(id: &str, f: Failure) -> SeriesEntry {
    eprintln!("{id}: {}", f.message);
    SeriesEntry { id: id.into(), status: Status::Failed, error_kind: Some(f.kind().into()), error: Some(f.message), outputs: Vec::new() }
}

/// A checkpoint that finished all configured epochs.
fn complete_checkpoint(path: &Path, cfg: &RunConfig) -> Option<Checkpoint> {
    let ck = Checkpoint::load(path).ok()?;
    (ck.epoch >= cfg.train.epoch && ck.model.window() == cfg.window.size).then_some(ck)
}

fn train_one(entry: &Entry, cfg: &RunConfig, stub: Option<StubKind>, dir: &RunDir) -> Result<(Checkpoint, TimeSeries), Failure> {
    let series = entry.load(None)?;
    let (_, standardization) = prepare_values(&series, None)?;
    let path = dir.checkpoint(&entry.id);
    let window = cfg.window.size;
    let model = match stub {
        Some(StubKind::Identity) => CheckpointModel::IdentityStub { window },
        Some(StubKind::Zero) => CheckpointModel::ZeroStub { window },
        None => {
            let arch = cfg.arch()?;
            let every = cfg.train.checkpoint_every;
            let total = cfg.train.epoch;
            let started = Instant::now();
            let mut observer = |r: &tsvae::train::EpochRecord, m: &tsvae::hvae::ModelParams<f32>| {
                if every > 0 && r.epoch % every == 0 && r.epoch < total {
                    let ck = Checkpoint {
                        series_id: entry.id.clone(),
                        model: CheckpointModel::Hvae(m.clone()),
                        standardization,
                        epoch: r.epoch,
                    };
                    ck.save(&path)?;
                }
                Ok(())
            };
            let fitted = fit_with(&series, &cfg.train, &arch, cfg.window.step, &mut observer)?;
            fitted.log.write(&dir.log(&entry.id))?;
            eprintln!("{}: trained {} epochs in {:.0}s", entry.id, total, started.elapsed().as_secs_f64());
            CheckpointModel::Hvae(fitted.model)
        }
    };
    let ck = Checkpoint { series_id: entry.id.clone(), model, standardization, epoch: cfg.train.epoch };
    ck.save(&path)?;
    Ok((ck, series))
}

pub fn train(run: &RunArgs, stub: Option<StubKind>) -> Result<(), Failure> {
    let cfg = run.resolve()?;
    let list = entries(&cfg)?;
    let dir = RunDir::create(&cfg)?;
    let mut manifest = Manifest::new("train");
    for e in &list {
        let ckpt = dir.checkpoint(&e.id);
        if run.resume() && complete_checkpoint(&ckpt, &cfg).is_some() {
            manifest.series.push(skipped(&e.id));
            continue;
        }
        manifest.series.push(match train_one(e, &cfg, stub, &dir) {
            Ok(_) => {
                let mut outs = vec![dir.rel(&ckpt)];
                if stub.is_none() {
                    outs.push(dir.rel(&dir.log(&e.id)));
                }
                ok(&e.id, outs)
            }
            Err(f) => failed(&e.id, f),
        });
    }
    dir.finish(&mut manifest)
}

fn detect_one(entry: &Entry, cfg: &RunConfig, ck: &Checkpoint, series: Option<TimeSeries>, dir: &RunDir) -> Result<DetectionReport, Failure> {
    if ck.model.window() != cfg.window.size {
        return Err(Failure {
            code: DATA,
            message: format!("checkpoint window {} does not match configured window {}", ck.model.window(), cfg.window.size),
        });
    }
    let series = match series {
        Some(s) => s,
        None => entry.load(None)?,
    };
    let report = run_detect(&ck.model, &series, ck.standardization, &cfg.detect)?;
    report.write(&dir.report(&entry.id))?;
    Ok(report)
}

pub fn detect(run: &RunArgs, checkpoints: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = run.resolve()?;
    let list = entries(&cfg)?;
    let dir = RunDir::create(&cfg)?;
    let ck_dir = checkpoints.unwrap_or_else(|| dir.root.join("checkpoints"));
    let mut manifest = Manifest::new("detect");
    for e in &list {
        let out = dir.report(&e.id);
        if run.resume() && DetectionReport::load(&out).is_ok() {
            manifest.series.push(skipped(&e.id));
            continue;
        }
        let ck_path = ck_dir.join(format!("{}.ckpt", file_stem(&e.id)));
        let result = Checkpoint::load(&ck_path).map_err(Failure::from).and_then(|ck| detect_one(e, &cfg, &ck, None, &dir));
        manifest.series.push(match result {
            Ok(r) => {
                println!("{}: {} sequences", e.id, r.sequences.len());
                ok(&e.id, vec![dir.rel(&out)])
            }
            Err(f) => failed(&e.id, f),
        });
    }
    dir.finish(&mut manifest)
}

fn predicted(report: &DetectionReport) -> Vec<Interval> {
    report.sequences.iter().map(|s| Interval { start: s.start, end: s.end }).collect()
}

fn load_reports(dir: &Path) -> Result<BTreeMap<String, DetectionReport>, Failure> {
    let mut out = BTreeMap::new();
    let rd = std::fs::read_dir(dir).map_err(|e| io_failure(dir, e))?;
    for entry in rd {
        let p = entry.map_err(|e| io_failure(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "json") {
            let r = DetectionReport::load(&p)?;
            out.insert(r.series_id.clone(), r);
        }
    }
    Ok(out)
}

fn write_eval(dir: &RunDir, results: Vec<SeriesResult>, model_name: &str) -> Result<(), Failure> {
    let report = EvalReport::build(results)?;
    report.write_all(&dir.root.join("eval"), model_name)?;
    print!("{}", report.table_csv(model_name));
    Ok(())
}

pub fn evaluate(run: &RunArgs, reports: Option<PathBuf>, model_name: &str) -> Result<(), Failure> {
    let cfg = run.resolve()?;
    let labels = load_labels(&cfg)?;
    let list = entries(&cfg)?;
    let dir = RunDir::create(&cfg)?;
    let reports = load_reports(&reports.unwrap_or_else(|| dir.root.join("reports")))?;

    let known: BTreeSet<&str> = list.iter().map(|e| e.id.as_str()).collect();
    let mut missing: Vec<String> = list
        .iter()
        .filter(|e| labels.contains(&e.id) && !reports.contains_key(&e.id))
        .map(|e| format!("{} (no report)", e.id))
        .collect();
    missing.extend(reports.keys().filter(|id| !known.contains(id.as_str())).map(|id| format!("{id} (no series)")));
    if !missing.is_empty() {
        return Err(Failure { code: DATA, message: format!("series ids do not match: {}", missing.join(", ")) });
    }

    let mut results = Vec::new();
    for e in list.iter().filter(|e| reports.contains_key(&e.id)) {
        let series = e.load(Some(&labels))?;
        let truth = series.label_ranges.unwrap_or_default();
        results.push(SeriesResult::new(&e.id, &subset_of(&e.id), &predicted(&reports[&e.id]), &truth)?);
    }
    let mut manifest = Manifest::new("evaluate");
    manifest.series = results.iter().map(|r| ok(&r.series_id, vec!["eval/eval.json".into()])).collect();
    write_eval(&dir, results, model_name)?;
    dir.finish(&mut manifest)
}

pub fn benchmark(run: &RunArgs, model_name: &str) -> Result<(), Failure> {
    let cfg = run.resolve()?;
    let labels = load_labels(&cfg)?;
    let list = entries(&cfg)?;
    let dir = RunDir::create(&cfg)?;
    let mut manifest = Manifest::new("benchmark");
    let mut results = Vec::new();
    for (i, e) in list.iter().enumerate() {
        eprintln!("[{}/{}] {}", i + 1, list.len(), e.id);
        let ckpt = dir.checkpoint(&e.id);
        let out = dir.report(&e.id);
        let step = || -> Result<(Vec<String>, DetectionReport, TimeSeries), Failure> {
            let labelled = e.load(Some(&labels))?;
            if run.resume() {
                if let (Some(_), Ok(r)) = (complete_checkpoint(&ckpt, &cfg), DetectionReport::load(&out)) {
                    return Ok((Vec::new(), r, labelled));
                }
            }
            let ck = match complete_checkpoint(&ckpt, &cfg).filter(|_| run.resume()) {
                Some(ck) => ck,
                None => train_one(e, &cfg, None, &dir)?.0,
            };
            let report = detect_one(e, &cfg, &ck, Some(labelled.clone()), &dir)?;
            Ok((vec![dir.rel(&ckpt), dir.rel(&dir.log(&e.id)), dir.rel(&out)], report, labelled))
        };
        match step() {
            Ok((outs, report, series)) => {
                let truth = series.label_ranges.clone().unwrap_or_default();
                match SeriesResult::new(&e.id, &subset_of(&e.id), &predicted(&report), &truth) {
                    Ok(r) => {
                        eprintln!("{}: f1 {:.3}", e.id, r.f1);
                        results.push(r);
                        manifest.series.push(if outs.is_empty() { skipped(&e.id) } else { ok(&e.id, outs) });
                    }
                    Err(err) => manifest.series.push(failed(&e.id, err.into())),
                }
            }
            Err(f) => manifest.series.push(failed(&e.id, f)),
        }
    }
    if !results.is_empty() {
        write_eval(&dir, results, model_name)?;
    }
    dir.finish(&mut manifest)
}

pub fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let series = (0..args.count)
        .map(|i| {
            let spec = spike_series(&format!("synth_{i:02}"), args.length, args.period, args.noise_std, args.anomalies, args.seed + i as u64);
            generate(&spec)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let paths = write_corpus(&args.out, &series)?;
    println!("wrote {} series to {}", paths.len(), args.out.display());
    Ok(())
}
