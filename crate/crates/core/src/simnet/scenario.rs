//! Scenario files: sites and RTTs, controller placement, agents and
//! experiment parameters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ChurnModel, LatencyMatrix, MatrixError};
use crate::agent::MissMode;
use crate::model::{EndpointId, NodeRole, UnderlayAddr};

const POC_AWS: &str = include_str!("../../scenarios/poc-aws.json");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub site: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceSpec {
    pub label: String,
    /// Allocated by the deployment when absent.
    #[serde(default)]
    pub underlay: Option<UnderlayAddr>,
    /// Defaults to the agent's site.
    #[serde(default)]
    pub site: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub name: String,
    pub site: String,
    #[serde(default)]
    pub eid: Option<EndpointId>,
    /// Group whose prefix the controller assigns an EID from when `eid` is absent.
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default = "default_role")]
    pub role: NodeRole,
    pub interfaces: Vec<InterfaceSpec>,
    /// Provisioned controllers, by site name, in preference order.
    pub controllers: Vec<String>,
    #[serde(default)]
    pub miss_mode: MissMode,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

fn default_role() -> NodeRole {
    NodeRole::EndNode
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentParams {
    pub probe_site: String,
    pub pinned_controller: String,
    pub flow_interval_ms: f64,
    pub nib_size: usize,
    pub groups: usize,
    pub retrieval_iters: usize,
    pub update_iters: usize,
    pub bootstrap_iters: usize,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            probe_site: "Barcelona".into(),
            pinned_controller: "Ireland".into(),
            flow_interval_ms: 100.0,
            nib_size: 400_000,
            groups: 400,
            retrieval_iters: 15_000,
            update_iters: 15_000,
            bootstrap_iters: 7_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(flatten)]
    pub matrix: LatencyMatrix,
    #[serde(default)]
    pub loss: f64,
    #[serde(default = "default_proc")]
    pub proc_ms: f64,
    #[serde(default)]
    pub seed: u64,
    pub controllers: Vec<ControllerSpec>,
    #[serde(default = "default_true")]
    pub spawn_on_failure: bool,
    /// Policy document, relative to the scenario file.
    #[serde(default)]
    pub policy_file: Option<String>,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub churn: Option<ChurnModel>,
    #[serde(default)]
    pub duration_s: Option<f64>,
    #[serde(default)]
    pub experiment: ExperimentParams,
}

fn default_proc() -> f64 {
    2.0
}

fn default_true() -> bool {
    true
}

impl Scenario {
    /// The bundled six-site AWS deployment.
    pub fn poc_aws() -> Scenario {
        Self::from_json(POC_AWS).expect("bundled scenario is valid")
    }

    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.matrix.validate()?;
        if self.controllers.is_empty() {
            return Err(ScenarioError::Invalid("at least one controller is required".into()));
        }
        if !(0.0..=1.0).contains(&self.loss) {
            return Err(ScenarioError::Invalid(format!("loss {} outside [0, 1]", self.loss)));
        }
        if !(self.proc_ms >= 0.0 && self.proc_ms.is_finite()) {
            return Err(ScenarioError::Invalid("proc_ms must be non-negative".into()));
        }
        if self.matrix.jitter_ms < 0.0 {
            return Err(ScenarioError::Invalid("jitter_ms must be non-negative".into()));
        }
        for c in &self.controllers {
            self.matrix.site(&c.site)?;
        }
        for a in &self.agents {
            self.matrix.site(&a.site)?;
            if a.interfaces.is_empty() {
                return Err(ScenarioError::Invalid(format!("agent {} has no interfaces", a.name)));
            }
            for i in &a.interfaces {
                if let Some(s) = &i.site {
                    self.matrix.site(s)?;
                }
            }
            if a.controllers.is_empty() {
                return Err(ScenarioError::Invalid(format!("agent {} has no provisioned controller", a.name)));
            }
            for c in &a.controllers {
                if !self.controllers.iter().any(|x| x.site.eq_ignore_ascii_case(c)) {
                    return Err(ScenarioError::Invalid(format!(
                        "agent {} names controller site {c} that hosts no controller",
                        a.name
                    )));
                }
            }
        }
        let p = &self.experiment;
        self.matrix.site(&p.probe_site)?;
        if !self
            .controllers
            .iter()
            .any(|c| c.site.eq_ignore_ascii_case(&p.pinned_controller))
        {
            return Err(ScenarioError::Invalid(format!(
                "pinned controller site {} hosts no controller",
                p.pinned_controller
            )));
        }
        if p.groups == 0 || p.nib_size < p.groups {
            return Err(ScenarioError::Invalid("experiment needs groups >= 1 and nib_size >= groups".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_matrix_matches_the_measured_rtts() {
        let s = Scenario::poc_aws();
        let m = &s.matrix;
        let rtt = |a: &str, b: &str| m.rtt_ms[m.site(a).unwrap().index()][m.site(b).unwrap().index()];
        assert_eq!(rtt("Barcelona", "Ireland"), 53.0);
        assert_eq!(rtt("Barcelona", "Frankfurt"), 47.0);
        assert_eq!(rtt("Barcelona", "Virginia"), 108.0);
        assert_eq!(rtt("Barcelona", "California"), 181.0);
        assert_eq!(rtt("Barcelona", "Oregon"), 177.0);
        assert_eq!(rtt("Ireland", "Frankfurt"), 20.0);
        assert_eq!(rtt("Ireland", "Virginia"), 81.0);
        assert_eq!(rtt("Ireland", "California"), 155.0);
        assert_eq!(rtt("Ireland", "Oregon"), 138.0);
        assert_eq!(rtt("Frankfurt", "Virginia"), 89.0);
        assert_eq!(rtt("Frankfurt", "California"), 166.0);
        assert_eq!(rtt("Frankfurt", "Oregon"), 165.0);
        assert_eq!(rtt("Virginia", "California"), 81.0);
        assert_eq!(rtt("Virginia", "Oregon"), 80.0);
        assert_eq!(rtt("California", "Oregon"), 20.0);
        assert_eq!(m.jitter_ms, 2.0);
        assert_eq!(s.controllers.len(), 5);
    }

    #[test]
    fn rejects_unknown_sites() {
        let mut s = Scenario::poc_aws();
        s.controllers.push(ControllerSpec { site: "Mars".into() });
        assert!(matches!(s.validate(), Err(ScenarioError::Matrix(MatrixError::UnknownSite(_)))));
    }

    #[test]
    fn json_round_trip() {
        let s = Scenario::poc_aws();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(Scenario::from_json(&text).unwrap(), s);
    }
}
