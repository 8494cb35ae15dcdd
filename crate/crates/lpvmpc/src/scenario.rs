//! JSON scenario format.

use std::path::Path;

use lpvmpc_core::gaslift::{GasLiftParams, BAR};
use lpvmpc_core::mpc::{TerminalMode, WeightSpace};
use lpvmpc_core::schedule::Predictor;
use lpvmpc_core::terminal::LogDetSense;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub plant: PlantSpec,
    pub controller: ControllerSpec,
    /// Piecewise-constant output references in display units.
    pub references: Vec<ReferenceStep>,
    pub initial: InitialCondition,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of additive Gaussian noise on the measured state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement_noise: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<TerminalSource>,
    /// Arms for `compare`, e.g. `"taylor"` or `"frozen:cost-and-set"`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub arms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PlantSpec {
    GasLift {
        #[serde(default)]
        params: GasLiftConfig,
        /// Euler sub-steps per sample for the simulated plant.
        #[serde(default = "one")]
        substeps: usize,
    },
    Demo,
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<Vec<f64>>,
        d: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        state_box: Option<BoxSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        input_box: Option<BoxSpec>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        output_box: Option<BoxSpec>,
    },
}

fn one() -> usize {
    1
}

/// Box with `null` for an unbounded side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
}

/// Gas-lift parameters; pressures in bar, everything else SI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GasLiftConfig {
    pub k_cgl: f64,
    pub k_inj: f64,
    pub k_cp: f64,
    pub i_p: f64,
    pub p_fg_bar: f64,
    pub p_r_bar: f64,
    pub p_s_bar: f64,
    pub g_go: f64,
    pub t_a: f64,
    pub t_t: f64,
    pub r: f64,
    pub m_g: f64,
    pub v_a: f64,
    pub v_t: f64,
    pub h_a: f64,
    pub h_t: f64,
    pub h_fp: f64,
    pub a_t: f64,
    pub mu_o: f64,
    pub g: f64,
    pub ts: f64,
}

impl Default for GasLiftConfig {
    fn default() -> Self {
        GasLiftParams::default().into()
    }
}

impl From<GasLiftParams> for GasLiftConfig {
    fn from(p: GasLiftParams) -> Self {
        Self {
            k_cgl: p.k_cgl,
            k_inj: p.k_inj,
            k_cp: p.k_cp,
            i_p: p.i_p,
            p_fg_bar: p.p_fg / BAR,
            p_r_bar: p.p_r / BAR,
            p_s_bar: p.p_s / BAR,
            g_go: p.g_go,
            t_a: p.t_a,
            t_t: p.t_t,
            r: p.r,
            m_g: p.m_g,
            v_a: p.v_a,
            v_t: p.v_t,
            h_a: p.h_a,
            h_t: p.h_t,
            h_fp: p.h_fp,
            a_t: p.a_t,
            mu_o: p.mu_o,
            g: p.g,
            ts: p.ts,
        }
    }
}

impl From<GasLiftConfig> for GasLiftParams {
    fn from(c: GasLiftConfig) -> Self {
        Self {
            k_cgl: c.k_cgl,
            k_inj: c.k_inj,
            k_cp: c.k_cp,
            i_p: c.i_p,
            p_fg: c.p_fg_bar * BAR,
            p_r: c.p_r_bar * BAR,
            p_s: c.p_s_bar * BAR,
            g_go: c.g_go,
            t_a: c.t_a,
            t_t: c.t_t,
            r: c.r,
            m_g: c.m_g,
            v_a: c.v_a,
            v_t: c.v_t,
            h_a: c.h_a,
            h_t: c.h_t,
            h_fp: c.h_fp,
            a_t: c.a_t,
            mu_o: c.mu_o,
            g: c.g,
            ts: c.ts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorName {
    Frozen,
    #[default]
    Taylor,
    TaylorCarry,
}

impl From<PredictorName> for Predictor {
    fn from(p: PredictorName) -> Self {
        match p {
            PredictorName::Frozen => Predictor::Frozen,
            PredictorName::Taylor => Predictor::Taylor,
            PredictorName::TaylorCarry => Predictor::TaylorCarry,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalModeName {
    #[default]
    None,
    CostOnly,
    CostAndSet,
}

impl From<TerminalModeName> for TerminalMode {
    fn from(t: TerminalModeName) -> Self {
        match t {
            TerminalModeName::None => TerminalMode::None,
            TerminalModeName::CostOnly => TerminalMode::CostOnly,
            TerminalModeName::CostAndSet => TerminalMode::CostAndSet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSpaceName {
    #[default]
    State,
    Output,
}

impl From<WeightSpaceName> for WeightSpace {
    fn from(w: WeightSpaceName) -> Self {
        match w {
            WeightSpaceName::State => WeightSpace::State,
            WeightSpaceName::Output => WeightSpace::Output,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SenseName {
    #[default]
    MaxVolume,
    MinLogdet,
}

impl From<SenseName> for LogDetSense {
    fn from(s: SenseName) -> Self {
        match s {
            SenseName::MaxVolume => LogDetSense::MaximizeVolume,
            SenseName::MinLogdet => LogDetSense::MinimizeLogDet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSpec {
    pub horizon: usize,
    /// Diagonal of `Q`; length `n_x` or `n_y` depending on `weight_space`.
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    #[serde(default)]
    pub weight_space: WeightSpaceName,
    #[serde(default)]
    pub predictor: PredictorName,
    #[serde(default)]
    pub relinearize: bool,
    #[serde(default)]
    pub terminal_mode: TerminalModeName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_weight: Option<f64>,
    #[serde(default)]
    pub qp: QpSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QpSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceStep {
    pub start: usize,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialCondition {
    State(Vec<f64>),
    /// Equilibrium of the plant under this constant input.
    SteadyInput(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerminalSource {
    Synthesize(TerminalSpec),
    /// Path to an ingredients artifact, relative to the scenario file.
    File(String),
}

/// Where and how to synthesize terminal ingredients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalSpec {
    pub trim: Trim,
    /// Half-widths of the state region around the trim state.
    pub x_bar: Vec<f64>,
    /// Input magnitude bounds; defaults to the distance of the trim input to the input box.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_bar: Option<Vec<f64>>,
    #[serde(default = "three")]
    pub points_per_dim: usize,
    #[serde(default)]
    pub sense: SenseName,
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trim {
    /// Trim state; when absent the plant equilibrium under `input` is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<Vec<f64>>,
    pub input: Vec<f64>,
}

impl Scenario {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read { path: path.into(), source })?;
        let s: Self = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
        s.validate()?;
        Ok(s)
    }

    /// Checks that do not need the model.
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("run length must be at least one sample".into()));
        }
        if self.controller.horizon < 2 {
            return Err(Error::Config(format!("horizon must be at least 2, got {}", self.controller.horizon)));
        }
        if self.references.is_empty() {
            return Err(Error::Config("at least one reference step is required".into()));
        }
        if self.references[0].start != 0 {
            return Err(Error::Config("the first reference step must start at sample 0".into()));
        }
        if self.references.windows(2).any(|w| w[1].start <= w[0].start) {
            return Err(Error::Config("reference steps must have increasing start samples".into()));
        }
        Ok(())
    }
}
