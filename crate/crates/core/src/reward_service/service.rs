use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::protocol::{read_message, write_message, Message, Status};
use super::store::{Entry, ResultStore};
use crate::error::{Error, Result};
use crate::tasks::Task;

/// Anything that can score a sample under a condition.
pub trait Scorer: Send + Sync {
    fn dim(&self) -> usize;
    fn conditions(&self) -> usize;
    fn score(&self, x: &[f64], c: usize) -> f64;
}

impl Scorer for Task {
    fn dim(&self) -> usize {
        Task::dim(self)
    }
    fn conditions(&self) -> usize {
        Task::conditions(self)
    }
    fn score(&self, x: &[f64], c: usize) -> f64 {
        self.reward(x, c)
    }
}

#[derive(Clone, Default)]
pub struct Registry {
    scorers: BTreeMap<String, Arc<dyn Scorer>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The three built-in tasks with default parameters.
    pub fn builtin() -> Self {
        let mut r = Self::new();
        for task in Task::builtin() {
            r.insert(task.name(), Arc::new(task));
        }
        r
    }

    pub fn with_task(task: Task) -> Self {
        let mut r = Self::new();
        r.insert(task.name(), Arc::new(task));
        r
    }

    pub fn insert(&mut self, name: &str, scorer: Arc<dyn Scorer>) {
        self.scorers.insert(name.to_string(), scorer);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Scorer>> {
        self.scorers.get(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.scorers.keys().map(String::as_str).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub workers: usize,
    pub batch_window: usize,
    pub queue_capacity: usize,
    pub snapshot: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            workers: 2,
            batch_window: 8,
            queue_capacity: 256,
            snapshot: None,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("service.workers", "must be at least 1"));
        }
        if self.batch_window == 0 {
            return Err(Error::config("service.batch_window", "must be at least 1"));
        }
        if self.queue_capacity == 0 {
            return Err(Error::config("service.queue_capacity", "must be at least 1"));
        }
        Ok(())
    }
}

struct Job {
    uuid: String,
    scorer: Arc<dyn Scorer>,
    samples: Vec<Vec<f64>>,
    conditions: Vec<usize>,
}

/// Queue, scoring workers and result store, independent of any transport.
pub struct ServiceCore {
    registry: Registry,
    store: Arc<ResultStore>,
    sender: Mutex<Option<SyncSender<Job>>>,
    stopping: AtomicBool,
    workers: Mutex<Vec<JoinHandle<()>>>,
    snapshot: Option<PathBuf>,
}

impl ServiceCore {
    pub fn start(registry: Registry, config: &ServiceConfig) -> Result<Arc<Self>> {
        config.validate()?;
        let (tx, rx) = sync_channel::<Job>(config.queue_capacity);
        let rx = Arc::new(Mutex::new(rx));
        let store = Arc::new(ResultStore::new());
        let mut workers = Vec::with_capacity(config.workers);
        for i in 0..config.workers {
            let rx = rx.clone();
            let store = store.clone();
            let window = config.batch_window;
            let handle = std::thread::Builder::new()
                .name(format!("reward-worker-{i}"))
                .spawn(move || worker_loop(&rx, &store, window))?;
            workers.push(handle);
        }
        Ok(Arc::new(Self {
            registry,
            store,
            sender: Mutex::new(Some(tx)),
            stopping: AtomicBool::new(false),
            workers: Mutex::new(workers),
            snapshot: config.snapshot.clone(),
        }))
    }

    pub fn store(&self) -> &ResultStore {
        &self.store
    }

    /// Validates and enqueues a request. Blocks while the queue is full.
    pub fn submit(&self, task: &str, samples: Vec<Vec<f64>>, conditions: Vec<i64>) -> Result<String> {
        if self.stopping.load(Ordering::SeqCst) {
            return Err(Error::Service("service is shutting down".into()));
        }
        let scorer = self
            .registry
            .get(task)
            .ok_or_else(|| Error::Service(format!("unknown task '{task}'")))?
            .clone();
        if samples.is_empty() {
            return Err(Error::Service("empty batch".into()));
        }
        if samples.len() != conditions.len() {
            return Err(Error::Service(format!(
                "{} samples but {} conditions",
                samples.len(),
                conditions.len()
            )));
        }
        if let Some(s) = samples.iter().find(|s| s.len() != scorer.dim()) {
            return Err(Error::Service(format!(
                "sample of dimension {} for task '{task}' of dimension {}",
                s.len(),
                scorer.dim()
            )));
        }
        let conds = conditions
            .iter()
            .map(|&c| {
                usize::try_from(c)
                    .ok()
                    .filter(|c| *c < scorer.conditions())
                    .ok_or_else(|| Error::Service(format!("condition {c} out of range for task '{task}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let tx = self
            .sender
            .lock()
            .expect("sender lock")
            .clone()
            .ok_or_else(|| Error::Service("service is shutting down".into()))?;
        let uuid = loop {
            let id = uuid::Uuid::new_v4().simple().to_string();
            if self.store.insert_pending(&id, samples.len()) {
                break id;
            }
        };
        let job = Job {
            uuid: uuid.clone(),
            scorer,
            samples,
            conditions: conds,
        };
        match tx.try_send(job) {
            Ok(()) => {}
            Err(TrySendError::Full(job)) => {
                if tx.send(job).is_err() {
                    self.store.fail(&uuid, "service stopped before scoring");
                }
            }
            Err(TrySendError::Disconnected(_)) => {
                self.store.fail(&uuid, "service stopped before scoring");
            }
        }
        Ok(uuid)
    }

    pub fn fetch(&self, uuid: &str, wait: Duration) -> Option<Entry> {
        self.store.wait(uuid, wait)
    }

    /// Stops intake, lets workers drain the queue, fails anything left
    /// pending and writes the snapshot if configured. Idempotent.
    pub fn shutdown(&self) -> Result<()> {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        self.sender.lock().expect("sender lock").take();
        let workers: Vec<_> = self.workers.lock().expect("worker lock").drain(..).collect();
        for w in workers {
            let _ = w.join();
        }
        for id in self.store.pending_ids() {
            self.store.fail(&id, "service shut down");
        }
        if let Some(path) = &self.snapshot {
            self.store.snapshot(path)?;
        }
        Ok(())
    }
}

impl Drop for ServiceCore {
    fn drop(&mut self) {
        if let Err(e) = self.shutdown() {
            log::warn!("reward service shutdown: {e}");
        }
    }
}

fn worker_loop(rx: &Mutex<Receiver<Job>>, store: &ResultStore, window: usize) {
    loop {
        let batch = {
            let rx = rx.lock().expect("queue lock");
            let first = match rx.recv() {
                Ok(job) => job,
                Err(_) => return,
            };
            let mut batch = vec![first];
            while batch.len() < window {
                match rx.try_recv() {
                    Ok(job) => batch.push(job),
                    Err(_) => break,
                }
            }
            batch
        };
        for job in batch {
            let scored = catch_unwind(AssertUnwindSafe(|| {
                job.samples
                    .iter()
                    .zip(&job.conditions)
                    .map(|(x, &c)| job.scorer.score(x, c))
                    .collect::<Vec<f64>>()
            }));
            match scored {
                Ok(r) if r.iter().all(|v| v.is_finite()) => {
                    store.complete(&job.uuid, r);
                }
                Ok(_) => {
                    store.fail(&job.uuid, "non-finite reward");
                }
                Err(_) => {
                    store.fail(&job.uuid, "scoring worker panicked");
                }
            }
        }
    }
}

fn entry_message(uuid: &str, entry: Option<Entry>) -> Message {
    match entry {
        None => Message::Result {
            uuid: uuid.to_string(),
            status: Status::NotFound,
            rewards: None,
            reason: None,
        },
        Some(e) => Message::Result {
            uuid: uuid.to_string(),
            status: e.status,
            rewards: (e.status == Status::Done).then_some(e.rewards),
            reason: e.reason,
        },
    }
}

#[derive(Default)]
struct Signal {
    raised: Mutex<bool>,
    cv: Condvar,
}

impl Signal {
    fn raise(&self) {
        *self.raised.lock().expect("signal lock") = true;
        self.cv.notify_all();
    }

    fn is_raised(&self) -> bool {
        *self.raised.lock().expect("signal lock")
    }

    fn wait(&self) {
        let mut g = self.raised.lock().expect("signal lock");
        while !*g {
            g = self.cv.wait(g).expect("signal lock");
        }
    }
}

/// Cloneable handle that raises a service's shutdown signal from any thread.
#[derive(Clone)]
pub struct ShutdownTrigger(Arc<Signal>);

impl ShutdownTrigger {
    pub fn trigger(&self) {
        self.0.raise();
    }
}

/// A running TCP service.
pub struct ServiceHandle {
    addr: SocketAddr,
    core: Arc<ServiceCore>,
    signal: Arc<Signal>,
    acceptor: Option<JoinHandle<()>>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
}

pub fn serve(addr: impl ToSocketAddrs, registry: Registry, config: &ServiceConfig) -> Result<ServiceHandle> {
    config.validate()?;
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let core = ServiceCore::start(registry, config)?;
    let signal = Arc::new(Signal::default());
    let connections = Arc::new(Mutex::new(Vec::new()));
    let acceptor = {
        let core = core.clone();
        let signal = signal.clone();
        let connections = connections.clone();
        std::thread::Builder::new()
            .name("reward-acceptor".into())
            .spawn(move || accept_loop(listener, core, signal, connections))?
    };
    Ok(ServiceHandle {
        addr,
        core,
        signal,
        acceptor: Some(acceptor),
        connections,
    })
}

fn accept_loop(
    listener: TcpListener,
    core: Arc<ServiceCore>,
    signal: Arc<Signal>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
) {
    for stream in listener.incoming() {
        if signal.is_raised() {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        if let Ok(clone) = stream.try_clone() {
            connections.lock().expect("connection lock").push(clone);
        }
        let core = core.clone();
        let signal = signal.clone();
        let spawned = std::thread::Builder::new().name("reward-conn".into()).spawn(move || {
            if let Err(e) = handle_connection(stream, &core, &signal) {
                log::debug!("connection closed: {e}");
            }
        });
        if let Err(e) = spawned {
            log::warn!("could not spawn connection handler: {e}");
        }
    }
}

fn handle_connection(mut stream: TcpStream, core: &ServiceCore, signal: &Signal) -> Result<()> {
    while let Some(msg) = read_message(&mut stream)? {
        let reply = match msg {
            Message::Submit {
                task,
                samples,
                conditions,
            } => match core.submit(&task, samples, conditions) {
                Ok(uuid) => Message::Ack { uuid },
                Err(e) => Message::Error { reason: e.to_string() },
            },
            Message::Fetch { uuid, wait_ms } => {
                let entry = core.fetch(&uuid, Duration::from_millis(wait_ms));
                entry_message(&uuid, entry)
            }
            Message::Shutdown => {
                write_message(&mut stream, &Message::Shutdown)?;
                signal.raise();
                return Ok(());
            }
            other => Message::Error {
                reason: format!("unexpected message {:?}", message_type(&other)),
            },
        };
        write_message(&mut stream, &reply)?;
    }
    Ok(())
}

fn message_type(m: &Message) -> &'static str {
    match m {
        Message::Submit { .. } => "submit",
        Message::Ack { .. } => "ack",
        Message::Fetch { .. } => "fetch",
        Message::Result { .. } => "result",
        Message::Error { .. } => "error",
        Message::Shutdown => "shutdown",
    }
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn core(&self) -> &Arc<ServiceCore> {
        &self.core
    }

    /// Raises the shutdown signal without draining; `shutdown` finishes it.
    pub fn request_shutdown(&self) {
        self.signal.raise();
    }

    pub fn shutdown_trigger(&self) -> ShutdownTrigger {
        ShutdownTrigger(self.signal.clone())
    }

    /// Blocks until a client sends `shutdown` or `request_shutdown` is called.
    pub fn wait_for_shutdown(&self) {
        self.signal.wait();
    }

    /// Stops accepting, closes client connections, drains the queue.
    pub fn shutdown(mut self) -> Result<()> {
        self.stop()
    }

    fn stop(&mut self) -> Result<()> {
        self.signal.raise();
        if let Some(acceptor) = self.acceptor.take() {
            // wake the blocking accept
            let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
            let _ = acceptor.join();
        }
        for c in self.connections.lock().expect("connection lock").drain(..) {
            let _ = c.shutdown(std::net::Shutdown::Both);
        }
        self.core.shutdown()
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        if let Err(e) = self.stop() {
            log::warn!("reward service shutdown: {e}");
        }
    }
}
