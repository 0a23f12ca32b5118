use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bbt_core::model::{TaskParams, ToyConfig};
use bbt_core::optimizer::RunConfig;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// One prompt at the input layer.
    Bbt,
    /// One prompt per layer, tuned in alternation.
    Bbtv2,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bbt" => Ok(Method::Bbt),
            "bbtv2" => Ok(Method::Bbtv2),
            other => Err(format!("unknown method `{other}` (expected bbt or bbtv2)")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Bbt => "bbt",
            Method::Bbtv2 => "bbtv2",
        })
    }
}

/// Where inference happens. Written `in-process` or `remote:HOST:PORT`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Transport {
    InProcess,
    Remote(String),
}

impl FromStr for Transport {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in-process" | "inprocess" | "local" => Ok(Transport::InProcess),
            _ => match s.strip_prefix("remote:") {
                Some(addr) if !addr.is_empty() => Ok(Transport::Remote(addr.to_string())),
                _ => Err(format!("unknown transport `{s}` (expected in-process or remote:ADDR)")),
            },
        }
    }
}

impl TryFrom<String> for Transport {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Transport> for String {
    fn from(t: Transport) -> Self {
        t.to_string()
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transport::InProcess => f.write_str("in-process"),
            Transport::Remote(addr) => write!(f, "remote:{addr}"),
        }
    }
}

/// Everything needed to reproduce one experiment. Config files mirror this
/// struct field for field.
///
/// Each seed picks both the data split and the optimizer seed; `task.seed`
/// and `run.seed` are overwritten per run. The task always adopts the
/// vocabulary layout of the model it runs against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub transport: Transport,
    pub out: PathBuf,
    /// Checkpoint for in-process runs; without one the model is built from
    /// `model`.
    pub checkpoint: Option<PathBuf>,
    pub model: ToyConfig,
    pub task: TaskParams,
    pub run: RunConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            method: Method::Bbtv2,
            seeds: vec![0, 1, 2],
            transport: Transport::InProcess,
            out: PathBuf::from("runs"),
            checkpoint: None,
            model: ToyConfig::default(),
            task: TaskParams::default(),
            run: RunConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Spec(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::Spec(e.to_string()))
    }

    /// Directory holding this experiment's per-seed outputs and summary.
    pub fn dir(&self) -> PathBuf {
        self.out.join(&self.name)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Spec(m));
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return bad("seed list has duplicates".into());
        }
        let mut parts = Path::new(&self.name).components();
        if self.name.is_empty()
            || !matches!(
                (parts.next(), parts.next()),
                (Some(std::path::Component::Normal(_)), None)
            )
        {
            return bad(format!(
                "experiment name `{}` must be a single path component",
                self.name
            ));
        }
        self.run.validate().map_err(|e| HarnessError::Spec(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transport_strings() {
        assert_eq!("in-process".parse(), Ok(Transport::InProcess));
        assert_eq!(
            "remote:127.0.0.1:9".parse(),
            Ok(Transport::Remote("127.0.0.1:9".into()))
        );
        assert!("remote:".parse::<Transport>().is_err());
        assert!("carrier-pigeon".parse::<Transport>().is_err());
        assert_eq!(Transport::Remote("h:1".into()).to_string(), "remote:h:1");
    }

    #[test]
    fn toml_round_trip() {
        let mut spec = ExperimentSpec::default();
        spec.run.patience = None;
        spec.run.population = None;
        spec.transport = Transport::Remote("localhost:7878".into());
        spec.checkpoint = Some("model.bin".into());
        let text = spec.to_toml().unwrap();
        assert_eq!(ExperimentSpec::from_toml(&text).unwrap(), spec);
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let spec = ExperimentSpec::from_toml(
            r#"
            name = "topic"
            method = "bbt"
            seeds = [4]
            [task]
            kind = "topic"
            classes = 14
            [run]
            budget = 400
            patience = "none"
            "#,
        )
        .unwrap();
        assert_eq!(spec.method, Method::Bbt);
        assert_eq!((spec.task.classes, spec.task.shots), (14, 16));
        assert_eq!((spec.run.budget, spec.run.patience), (400, None));
        assert_eq!(spec.run.subspace_dim, RunConfig::default().subspace_dim);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(ExperimentSpec::from_toml("budget = 3").is_err());
    }

    #[test]
    fn validation() {
        let ok = ExperimentSpec::default();
        assert!(ok.validate().is_ok());
        for broken in [
            ExperimentSpec {
                seeds: vec![],
                ..ok.clone()
            },
            ExperimentSpec {
                seeds: vec![1, 1],
                ..ok.clone()
            },
            ExperimentSpec {
                name: "a/b".into(),
                ..ok.clone()
            },
            ExperimentSpec {
                name: "..".into(),
                ..ok.clone()
            },
        ] {
            assert!(broken.validate().is_err(), "{broken:?}");
        }
        let mut zero = ok.clone();
        zero.run.budget = 0;
        assert!(zero.validate().is_err());
    }
}
