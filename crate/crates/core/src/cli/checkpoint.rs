use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{AdamState, Architecture, EpsNet};
use crate::rl::{Learner, TrainState};
use crate::schedule::ScheduleConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Single JSON document holding a network and, optionally, its training
/// state. Numbers are written in shortest round-trip decimal form, so
/// save → load → save reproduces the file byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    /// `init`, `sft`, `rl` or `rl_ema`.
    pub stage: String,
    /// Iterations completed in `stage`.
    pub iteration: usize,
    pub config_hash: String,
    pub architecture: Architecture,
    pub schedule: ScheduleConfig,
    pub params: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ema: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_holdout: Option<f64>,
}

impl Checkpoint {
    pub fn from_net(stage: &str, net: &EpsNet, schedule: &ScheduleConfig, config_hash: &str) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            stage: stage.to_string(),
            iteration: 0,
            config_hash: config_hash.to_string(),
            architecture: net.architecture().clone(),
            schedule: schedule.clone(),
            params: net.params().to_vec(),
            optimizer: None,
            ema: None,
            baseline_holdout: None,
        }
    }

    pub fn from_learner(
        stage: &str,
        learner: &Learner,
        iteration: usize,
        schedule: &ScheduleConfig,
        config_hash: &str,
    ) -> Self {
        Self {
            iteration,
            optimizer: Some(learner.adam.clone()),
            ema: Some(learner.ema.clone()),
            ..Self::from_net(stage, &learner.net, schedule, config_hash)
        }
    }

    pub fn from_state(stage: &str, state: &TrainState, schedule: &ScheduleConfig, config_hash: &str) -> Self {
        Self {
            baseline_holdout: state.baseline_holdout,
            ..Self::from_learner(stage, &state.learner, state.iteration, schedule, config_hash)
        }
    }

    /// Same network with the EMA parameters promoted to `params`.
    pub fn ema_only(&self, stage: &str) -> Option<Self> {
        self.ema.as_ref().map(|ema| Self {
            stage: stage.to_string(),
            params: ema.clone(),
            optimizer: None,
            ema: None,
            ..self.clone()
        })
    }

    pub fn to_json(&self) -> Result<String> {
        if let Some(bad) = self
            .params
            .iter()
            .chain(self.ema.iter().flatten())
            .find(|v| !v.is_finite())
        {
            return Err(Error::NonFinite(format!("checkpoint parameter {bad}")));
        }
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::argument(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::argument(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.net()?;
        Ok(ck)
    }

    pub fn net(&self) -> Result<EpsNet> {
        EpsNet::from_params(self.architecture.clone(), self.params.clone())
    }

    /// The EMA network if present and `prefer_ema`, else the raw one.
    pub fn eval_net(&self, prefer_ema: bool) -> Result<EpsNet> {
        match (&self.ema, prefer_ema) {
            (Some(ema), true) => EpsNet::from_params(self.architecture.clone(), ema.clone()),
            _ => self.net(),
        }
    }

    /// Rebuilds the learner; missing optimizer or EMA state starts fresh.
    pub fn learner(&self, lr: f64) -> Result<Learner> {
        let net = self.net()?;
        let mut learner = Learner::new(net, lr);
        if let Some(adam) = &self.optimizer {
            if adam.m.len() != self.params.len() || adam.v.len() != self.params.len() {
                return Err(Error::argument(
                    "checkpoint optimizer state does not match the parameters",
                ));
            }
            learner.adam = adam.clone();
        }
        if let Some(ema) = &self.ema {
            if ema.len() != self.params.len() {
                return Err(Error::argument("checkpoint EMA does not match the parameters"));
            }
            learner.ema = ema.clone();
        }
        Ok(learner)
    }

    pub fn train_state(&self, lr: f64) -> Result<TrainState> {
        Ok(TrainState {
            iteration: self.iteration,
            learner: self.learner(lr)?,
            baseline_holdout: self.baseline_holdout,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Architecture;

    #[test]
    fn save_load_save_identical() {
        let net = EpsNet::init(Architecture::new(2, 2, 10), 5).unwrap();
        let mut learner = Learner::new(net, 1e-3);
        let g: Vec<f64> = (0..learner.net.params().len())
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        learner.adam.step(learner.net.params_mut(), &g).unwrap();
        crate::net::ema_update(&mut learner.ema, learner.net.params(), 0.9).unwrap();
        let sched = ScheduleConfig {
            steps: 10,
            ..ScheduleConfig::default()
        };
        let ck = Checkpoint::from_learner("rl", &learner, 3, &sched, "abc");
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        ck.save(&a).unwrap();
        let loaded = Checkpoint::load(&a).unwrap();
        assert_eq!(loaded, ck);
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(loaded.learner(1e-3).unwrap(), learner);
        let ema = ck.ema_only("rl_ema").unwrap();
        assert_eq!(ema.params, learner.ema);
        assert!(ema.optimizer.is_none());
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.json");
        std::fs::write(&p, "{}").unwrap();
        assert!(Checkpoint::load(&p).is_err());
        assert!(Checkpoint::load(&dir.path().join("missing.json")).is_err());
        let net = EpsNet::init(Architecture::new(1, 1, 4), 0).unwrap();
        let mut ck = Checkpoint::from_net("init", &net, &ScheduleConfig::default(), "h");
        ck.params.pop();
        std::fs::write(&p, ck.to_json().unwrap()).unwrap();
        assert!(Checkpoint::load(&p).is_err());
        ck.params.push(f64::NAN);
        assert!(ck.to_json().is_err());
    }
}
