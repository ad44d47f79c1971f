use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::protocol::{read_message, write_message, Message, Status};
use super::service::{Registry, ServiceConfig, ServiceCore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Fetched {
    Pending,
    Done(Vec<f64>),
    Failed(String),
    NotFound,
}

/// Submit/fetch interface shared by the TCP and in-process clients.
pub trait RewardClient: Send {
    fn submit(&mut self, task: &str, samples: &[Vec<f64>], conditions: &[usize]) -> Result<String>;
    fn fetch(&mut self, uuid: &str, wait: Duration) -> Result<Fetched>;

    /// Polls until done, failing with `Error::Timeout` after `timeout`.
    fn wait_rewards(&mut self, uuid: &str, timeout: Duration) -> Result<Vec<f64>> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.fetch(uuid, left.min(Duration::from_millis(500)))? {
                Fetched::Done(r) => return Ok(r),
                Fetched::Failed(reason) => return Err(Error::Service(format!("request {uuid} failed: {reason}"))),
                Fetched::NotFound => return Err(Error::Service(format!("request {uuid} not found"))),
                Fetched::Pending if left.is_zero() => {
                    return Err(Error::Timeout(format!("rewards for {uuid} after {timeout:?}")))
                }
                Fetched::Pending => {}
            }
        }
    }
}

fn to_fetched(status: Status, rewards: Option<Vec<f64>>, reason: Option<String>) -> Fetched {
    match status {
        Status::Pending => Fetched::Pending,
        Status::Done => Fetched::Done(rewards.unwrap_or_default()),
        Status::Failed => Fetched::Failed(reason.unwrap_or_default()),
        Status::NotFound => Fetched::NotFound,
    }
}

pub struct TcpClient {
    stream: TcpStream,
}

impl TcpClient {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let mut last = None;
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    return Ok(Self { stream });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last
            .map(Error::from)
            .unwrap_or_else(|| Error::Service("no address to connect to".into())))
    }

    fn call(&mut self, msg: &Message) -> Result<Message> {
        write_message(&mut self.stream, msg)?;
        read_message(&mut self.stream)?.ok_or_else(|| Error::Protocol("connection closed by service".into()))
    }

    /// Asks the service to shut down.
    pub fn shutdown_service(mut self) -> Result<()> {
        match self.call(&Message::Shutdown)? {
            Message::Shutdown => Ok(()),
            other => Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        }
    }
}

impl RewardClient for TcpClient {
    fn submit(&mut self, task: &str, samples: &[Vec<f64>], conditions: &[usize]) -> Result<String> {
        let msg = Message::Submit {
            task: task.to_string(),
            samples: samples.to_vec(),
            conditions: conditions.iter().map(|&c| c as i64).collect(),
        };
        match self.call(&msg)? {
            Message::Ack { uuid } => Ok(uuid),
            Message::Error { reason } => Err(Error::Service(reason)),
            other => Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        }
    }

    fn fetch(&mut self, uuid: &str, wait: Duration) -> Result<Fetched> {
        let msg = Message::Fetch {
            uuid: uuid.to_string(),
            wait_ms: wait.as_millis() as u64,
        };
        match self.call(&msg)? {
            Message::Result {
                status,
                rewards,
                reason,
                ..
            } => Ok(to_fetched(status, rewards, reason)),
            Message::Error { reason } => Err(Error::Service(reason)),
            other => Err(Error::Protocol(format!("unexpected reply {other:?}"))),
        }
    }
}

/// Runs the queue and workers in this process; no sockets.
pub struct InProcessClient {
    core: Arc<ServiceCore>,
}

impl InProcessClient {
    pub fn start(registry: Registry, config: &ServiceConfig) -> Result<Self> {
        Ok(Self {
            core: ServiceCore::start(registry, config)?,
        })
    }

    pub fn from_core(core: Arc<ServiceCore>) -> Self {
        Self { core }
    }

    pub fn core(&self) -> &Arc<ServiceCore> {
        &self.core
    }
}

impl RewardClient for InProcessClient {
    fn submit(&mut self, task: &str, samples: &[Vec<f64>], conditions: &[usize]) -> Result<String> {
        self.core
            .submit(task, samples.to_vec(), conditions.iter().map(|&c| c as i64).collect())
    }

    fn fetch(&mut self, uuid: &str, wait: Duration) -> Result<Fetched> {
        Ok(match self.core.fetch(uuid, wait) {
            None => Fetched::NotFound,
            Some(e) => {
                let done = e.status == Status::Done;
                to_fetched(e.status, done.then_some(e.rewards), e.reason)
            }
        })
    }
}
