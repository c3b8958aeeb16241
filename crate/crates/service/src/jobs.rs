//! Job table, worker pool and on-disk re-indexing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;

use inpaint_core::engine::{inpaint_with, read_run_manifest, BundleInfo, InpaintRequest, ResultWriter, RunManifest, MANIFEST_FILE};
use serde::Serialize;

use crate::bundles::ActiveBundle;

pub const ERROR_FILE: &str = "error.txt";
const ID_PREFIX: &str = "job-";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug)]
pub struct JobStatus {
    pub id: String,
    pub state: JobState,
    /// Cycles completed and persisted.
    pub progress: usize,
    pub total_cycles: usize,
    pub bundle: String,
    pub use_discriminator: bool,
    pub refine: bool,
    pub scores: Vec<f32>,
    pub error: Option<String>,
    pub manifest: Option<RunManifest>,
}

impl JobStatus {
    fn from_manifest(id: &str, m: RunManifest) -> Self {
        Self {
            id: id.to_string(),
            state: JobState::Done,
            progress: m.cycles_run,
            total_cycles: m.request.cycles,
            bundle: m.bundle.name.clone(),
            use_discriminator: m.request.use_discriminator,
            refine: m.request.refine,
            scores: m.scores.clone().unwrap_or_default(),
            error: None,
            manifest: Some(m),
        }
    }
}

pub type SharedStatus = Arc<Mutex<JobStatus>>;

pub struct JobTable {
    runs_dir: PathBuf,
    jobs: RwLock<BTreeMap<String, SharedStatus>>,
    next_id: Mutex<u64>,
}

fn parse_id(name: &str) -> Option<u64> {
    let digits = name.strip_prefix(ID_PREFIX)?;
    (!digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
        .then(|| digits.parse().ok())
        .flatten()
}

impl JobTable {
    /// Indexes every job directory under `runs_dir`. Directories with a
    /// manifest are finished jobs; anything else was interrupted or failed.
    pub fn open(runs_dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(runs_dir)?;
        let mut jobs = BTreeMap::new();
        let mut max_id = 0;
        for entry in std::fs::read_dir(runs_dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(n) = parse_id(&name) else { continue };
            if !entry.path().is_dir() {
                continue;
            }
            max_id = max_id.max(n);
            let dir = entry.path();
            let status = if dir.join(MANIFEST_FILE).is_file() {
                match read_run_manifest(&dir) {
                    Ok(m) => JobStatus::from_manifest(&name, m),
                    Err(e) => failed(&name, format!("unreadable manifest: {e}")),
                }
            } else {
                let msg = std::fs::read_to_string(dir.join(ERROR_FILE))
                    .unwrap_or_else(|_| "interrupted before completion".to_string());
                failed(&name, msg.trim().to_string())
            };
            jobs.insert(name, Arc::new(Mutex::new(status)));
        }
        log::info!("indexed {} jobs under {}", jobs.len(), runs_dir.display());
        Ok(Self {
            runs_dir: runs_dir.to_path_buf(),
            jobs: RwLock::new(jobs),
            next_id: Mutex::new(max_id + 1),
        })
    }

    pub fn dir_of(&self, id: &str) -> PathBuf {
        self.runs_dir.join(id)
    }

    pub fn get(&self, id: &str) -> Option<SharedStatus> {
        self.jobs.read().expect("job table lock").get(id).cloned()
    }

    pub fn snapshot(&self, id: &str) -> Option<JobStatus> {
        self.get(id).map(|s| s.lock().expect("job lock").clone())
    }

    pub fn ids(&self) -> Vec<String> {
        self.jobs.read().expect("job table lock").keys().cloned().collect()
    }

    fn allocate(&self) -> String {
        let mut next = self.next_id.lock().expect("id lock");
        let id = format!("{ID_PREFIX}{:06}", *next);
        *next += 1;
        id
    }

    fn insert(&self, status: JobStatus) -> SharedStatus {
        let shared = Arc::new(Mutex::new(status));
        let id = shared.lock().expect("job lock").id.clone();
        self.jobs.write().expect("job table lock").insert(id, shared.clone());
        shared
    }
}

fn failed(id: &str, error: String) -> JobStatus {
    JobStatus {
        id: id.to_string(),
        state: JobState::Failed,
        progress: 0,
        total_cycles: 0,
        bundle: String::new(),
        use_discriminator: false,
        refine: false,
        scores: Vec::new(),
        error: Some(error),
        manifest: None,
    }
}

struct Work {
    status: SharedStatus,
    req: InpaintRequest,
    bundle: ActiveBundle,
    writer: ResultWriter,
}

/// FIFO queue served by a fixed set of worker threads. Dropping the pool
/// closes the queue; workers finish their current job and exit.
pub struct WorkerPool {
    tx: Option<Sender<Work>>,
    handles: Vec<JoinHandle<()>>,
}

impl WorkerPool {
    pub fn start(workers: usize) -> Self {
        let (tx, rx) = channel::<Work>();
        let rx = Arc::new(Mutex::new(rx));
        let handles = (0..workers.max(1))
            .map(|i| {
                let rx = rx.clone();
                std::thread::Builder::new()
                    .name(format!("inpaint-worker-{i}"))
                    .spawn(move || worker_loop(&rx))
                    .expect("spawn worker")
            })
            .collect();
        Self { tx: Some(tx), handles }
    }

    /// Writes the job's inputs, registers it as queued and enqueues it.
    pub fn submit(&self, table: &JobTable, req: InpaintRequest, bundle: ActiveBundle) -> Result<String, String> {
        let id = table.allocate();
        let writer = ResultWriter::begin(&table.dir_of(&id), &req).map_err(|e| e.to_string())?;
        let status = table.insert(JobStatus {
            id: id.clone(),
            state: JobState::Queued,
            progress: 0,
            total_cycles: req.cycles,
            bundle: bundle.name.clone(),
            use_discriminator: req.use_discriminator,
            refine: req.refine,
            scores: Vec::new(),
            error: None,
            manifest: None,
        });
        let work = Work {
            status,
            req,
            bundle,
            writer,
        };
        self.tx
            .as_ref()
            .expect("pool is running")
            .send(work)
            .map_err(|_| "worker pool has stopped".to_string())?;
        Ok(id)
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.tx.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

fn worker_loop(rx: &Mutex<Receiver<Work>>) {
    loop {
        let next = rx.lock().expect("queue lock").recv();
        let Ok(work) = next else { return };
        run(work);
    }
}

fn run(work: Work) {
    let Work {
        status,
        req,
        bundle,
        mut writer,
    } = work;
    let dir = writer.dir().to_path_buf();
    let id = {
        let mut s = status.lock().expect("job lock");
        s.state = JobState::Running;
        s.id.clone()
    };
    log::info!("{id}: running {} cycles on bundle {}", req.cycles, bundle.name);
    let mut write_error = None;
    let result = inpaint_with(bundle.bundle.as_ref(), &req, |i, rec| {
        if write_error.is_some() {
            return;
        }
        if let Err(e) = writer.write_cycle(i, rec) {
            write_error = Some(e);
            return;
        }
        let mut s = status.lock().expect("job lock");
        s.progress = s.progress.max(i + 1);
        if let Some(v) = rec.score {
            s.scores.push(v);
        }
    });
    let outcome = match (result, write_error) {
        (_, Some(e)) | (Err(e), None) => Err(e.to_string()),
        (Ok(res), None) => writer
            .finish(&req, &res, &BundleInfo::of(&bundle.name, &bundle.bundle))
            .map_err(|e| e.to_string()),
    };
    let mut s = status.lock().expect("job lock");
    match outcome {
        Ok(m) => {
            s.progress = s.progress.max(m.cycles_run);
            s.scores = m.scores.clone().unwrap_or_default();
            s.manifest = Some(m);
            s.state = JobState::Done;
            log::info!("{id}: done");
        }
        Err(e) => {
            let _ = std::fs::write(dir.join(ERROR_FILE), &e);
            log::warn!("{id}: failed: {e}");
            s.error = Some(e);
            s.state = JobState::Failed;
        }
    }
}
