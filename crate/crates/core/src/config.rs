//! Everything a run can be configured with, as one JSON document.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::evaluation::{EvalConfig, ProbeConfig};
use crate::modnet::ModularNetConfig;
use crate::training::TrainConfig;
use crate::trunk::TrunkConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewshotConfig {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub probe: ProbeConfig,
}

impl Default for FewshotConfig {
    fn default() -> Self {
        FewshotConfig {
            shots: vec![1, 2, 5],
            seeds: vec![0, 1, 2],
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub trunk: TrunkConfig,
    /// Replaces the architecture of `train.preset` when set.
    pub modnet: Option<ModularNetConfig>,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub fewshot: FewshotConfig,
    /// Worker threads; `1` keeps every stage sequential, `0` uses all cores.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            trunk: TrunkConfig::default(),
            modnet: None,
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
            fewshot: FewshotConfig::default(),
            threads: 1,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn modnet(&self) -> ModularNetConfig {
        self.modnet.clone().unwrap_or_else(|| self.train.preset.config())
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        self.modnet().validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if !(self.eval.threshold >= 0.0) || self.eval.pairs_per_task == 0 {
            return Err(Error::Config("evaluation needs a nonnegative threshold and at least one pair".into()));
        }
        if self.fewshot.shots.contains(&0) {
            return Err(Error::Config("shot counts must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::parse(&c.to_json()).unwrap(), c);
        assert_eq!(RunConfig::parse("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_path() {
        match RunConfig::parse(r#"{"train": {"lr": 0.1, "learning_rate": 2}}"#) {
            Err(Error::Config(m)) => assert!(m.contains("train"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::parse(r#"{"train": {"steps": 7}, "synth": {"instances": 3}}"#).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.synth.instances, 3);
        assert_eq!(c.synth.canvas, 64);
    }
}
