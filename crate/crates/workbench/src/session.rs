use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use pipnet::datasets::{load_spec, ArtifactSpec, Dataset, DatasetItem, Split};
use pipnet::debugger::{
    counterfactual_eval, detect_shortcuts_from, Action, CounterfactualReport, InterventionLog, LogEntry,
    ShortcutReport, Thresholds,
};
use pipnet::explainer::{metrics_from_scan, MetricsReport, Scan};
use pipnet::protomodel::{load_checkpoint, ProtoModel};
use pipnet::{Error, Result};
use serde::Serialize;

/// Mutable part of a session, guarded by one lock so that every mutation
/// is serialized with its log entry and version bump.
struct Live {
    model: Arc<ProtoModel>,
    version: u64,
    log: InterventionLog,
    metrics: HashMap<(u64, Split), Arc<MetricsReport>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct Job {
    pub id: u64,
    pub subset: Split,
    pub version: u64,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<Arc<MetricsReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Default)]
struct Jobs {
    next: u64,
    jobs: HashMap<u64, Job>,
}

/// Outcome of a disable or enable request.
#[derive(Clone, Debug, Serialize)]
pub struct Mutation {
    pub prototype: usize,
    pub action: Action,
    pub changed: bool,
    pub version: u64,
}

/// A loaded model plus its dataset; one per service.
pub struct Session {
    dataset: Dataset,
    artifact: ArtifactSpec,
    positive_class: usize,
    live: RwLock<Live>,
    scans: Mutex<HashMap<Split, Arc<Scan>>>,
    jobs: Mutex<Jobs>,
}

impl Session {
    pub fn new(model: ProtoModel, dataset: Dataset, log: InterventionLog, positive_class: usize) -> Self {
        Session {
            dataset,
            artifact: ArtifactSpec::default(),
            positive_class,
            live: RwLock::new(Live {
                model: Arc::new(model),
                version: 0,
                log,
                metrics: HashMap::new(),
            }),
            scans: Mutex::new(HashMap::new()),
            jobs: Mutex::new(Jobs::default()),
        }
    }

    /// Loads checkpoint and dataset, with the artifact descriptor taken
    /// from the dataset's generation spec when present.
    pub fn load(checkpoint: &Path, dataset: &Path, log_path: Option<&PathBuf>, positive_class: usize) -> Result<Self> {
        let model = load_checkpoint(checkpoint)?;
        let ds = Dataset::load(dataset)?;
        let log = match log_path {
            Some(p) => InterventionLog::open(p)?,
            None => InterventionLog::in_memory(),
        };
        let mut session = Session::new(model, ds, log, positive_class);
        if let Some(spec) = load_spec(dataset)? {
            session.artifact = spec.artifact;
        }
        Ok(session)
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn positive_class(&self) -> usize {
        self.positive_class
    }

    /// Current model and its version.
    pub fn snapshot(&self) -> (Arc<ProtoModel>, u64) {
        let live = self.live.read().expect("session lock");
        (live.model.clone(), live.version)
    }

    pub fn items(&self, split: Split) -> Vec<&DatasetItem> {
        self.dataset.split(split)
    }

    /// Presence for a split; computed once, since it does not depend on
    /// the scoring sheet.
    pub fn scan(&self, split: Split) -> Result<Arc<Scan>> {
        let mut scans = self.scans.lock().expect("scan lock");
        if let Some(s) = scans.get(&split) {
            return Ok(s.clone());
        }
        let (model, _) = self.snapshot();
        let items = self.items(split);
        if items.is_empty() {
            return Err(Error::invalid(format!("the dataset has no {} images", split.dir())));
        }
        let scan = Arc::new(Scan::new(&model, &items)?);
        scans.insert(split, scan.clone());
        Ok(scan)
    }

    /// Metrics for `split` at the current version, cached per version.
    pub fn metrics(&self, split: Split) -> Result<(u64, Arc<MetricsReport>)> {
        let (model, version) = self.snapshot();
        if let Some(m) = self.live.read().expect("session lock").metrics.get(&(version, split)) {
            return Ok((version, m.clone()));
        }
        let scan = self.scan(split)?;
        let report = Arc::new(metrics_from_scan(&model, &scan, self.positive_class)?);
        let mut live = self.live.write().expect("session lock");
        if live.version == version {
            live.metrics.insert((version, split), report.clone());
        }
        Ok((version, report))
    }

    pub fn set_state(&self, id: usize, action: Action, actor: &str) -> Result<Mutation> {
        let mut live = self.live.write().expect("session lock");
        let before = live.version;
        let model = Arc::make_mut(&mut live.model);
        let changed = match action {
            Action::Disable => model.sheet_mut().disable(&[id])?,
            Action::Enable => model.sheet_mut().enable(&[id])?,
        };
        let changed = !changed.is_empty();
        if changed {
            live.version += 1;
            live.metrics.clear();
        }
        let mut entry = LogEntry::now(id, action, actor);
        entry.metrics_before = Some(format!("v{before}"));
        entry.metrics_after = Some(format!("v{}", live.version));
        live.log.append(entry)?;
        Ok(Mutation {
            prototype: id,
            action,
            changed,
            version: live.version,
        })
    }

    pub fn log_entries(&self) -> (u64, Vec<LogEntry>) {
        let live = self.live.read().expect("session lock");
        (live.version, live.log.entries().to_vec())
    }

    pub fn shortcuts(&self, split: Split, thresholds: Thresholds) -> Result<(u64, ShortcutReport)> {
        let (model, version) = self.snapshot();
        let scan = self.scan(split)?;
        let items = self.items(split);
        let masks: Vec<_> = items.iter().map(|i| i.artifact_mask.as_ref()).collect();
        Ok((version, detect_shortcuts_from(&model, &scan, &masks, thresholds)?))
    }

    pub fn counterfactual(
        &self,
        target_class: usize,
        prototypes: Option<Vec<usize>>,
        thresholds: Thresholds,
        seed: u64,
    ) -> Result<(u64, CounterfactualReport)> {
        let (model, version) = self.snapshot();
        let ids = match prototypes {
            Some(ids) => ids,
            None => self.shortcuts(Split::Train, thresholds)?.1.flagged(),
        };
        let test = self.items(Split::Test);
        let report = counterfactual_eval(&model, &test, &self.artifact, target_class, &ids, seed)?;
        Ok((version, report))
    }

    /// Starts an evaluation job unless one for the same subset and version
    /// is still running (then returns its id as the error value).
    pub fn start_job(&self, subset: Split) -> std::result::Result<Job, u64> {
        let (_, version) = self.snapshot();
        let mut jobs = self.jobs.lock().expect("job lock");
        if let Some(j) = jobs
            .jobs
            .values()
            .find(|j| j.subset == subset && j.version == version && j.status == JobStatus::Running)
        {
            return Err(j.id);
        }
        jobs.next += 1;
        let job = Job {
            id: jobs.next,
            subset,
            version,
            status: JobStatus::Running,
            result: None,
            error: None,
        };
        jobs.jobs.insert(job.id, job.clone());
        Ok(job)
    }

    /// Runs a started job to completion (blocking).
    pub fn run_job(&self, id: u64) {
        let subset = match self.job(id) {
            Some(j) => j.subset,
            None => return,
        };
        let outcome = self.metrics(subset);
        let mut jobs = self.jobs.lock().expect("job lock");
        if let Some(job) = jobs.jobs.get_mut(&id) {
            match outcome {
                Ok((version, report)) => {
                    job.version = version;
                    job.result = Some(report);
                    job.status = JobStatus::Done;
                }
                Err(e) => {
                    job.error = Some(e.to_string());
                    job.status = JobStatus::Failed;
                }
            }
        }
    }

    pub fn job(&self, id: u64) -> Option<Job> {
        self.jobs.lock().expect("job lock").jobs.get(&id).cloned()
    }
}
