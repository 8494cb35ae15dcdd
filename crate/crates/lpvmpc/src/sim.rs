//! Closed-loop simulation: measure, schedule, extrapolate, solve, apply.

use std::path::Path;
use std::time::Instant;

use lpvmpc_core::mpc::{
    control_step, steady_state_pair, ControllerState, Fallback, MpcConfig, MpcError, SteadyStatePair, TerminalMode,
};
use lpvmpc_core::qp::QpSettings;
use lpvmpc_core::schedule::Predictor;
use lpvmpc_core::terminal::{synthesize, SynthesisSettings, TerminalIngredients};
use lpvmpc_core::{Clock, Qlpv};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::log::{ChannelInfo, ClosedLoopLog, LogMeta, LogRow};
use crate::plant::{Channel, Plant};
use crate::scenario::{InitialCondition, PredictorName, Scenario, TerminalModeName, TerminalSource};
use crate::terminal_io::{self, TerminalArtifact};

/// Consecutive shifted-sequence fallbacks after which a run is aborted.
pub const MAX_SHIFTED: usize = 10;

/// Wall clock measured from its creation.
#[derive(Debug, Clone, Copy)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// A predictor and optionally a terminal mode overriding the scenario's.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arm {
    pub predictor: PredictorName,
    pub terminal_mode: Option<TerminalModeName>,
}

impl Arm {
    /// Parses `predictor[:terminal-mode]`, e.g. `taylor` or `frozen:cost-and-set`.
    pub fn parse(s: &str) -> Result<Self> {
        let (p, t) = match s.split_once(':') {
            Some((p, t)) => (p, Some(t)),
            None => (s, None),
        };
        let predictor = match Predictor::parse(p.trim()) {
            Some(Predictor::Frozen) => PredictorName::Frozen,
            Some(Predictor::Taylor) => PredictorName::Taylor,
            Some(Predictor::TaylorCarry) => PredictorName::TaylorCarry,
            None => return Err(Error::Config(format!("unknown predictor '{p}' in arm '{s}'"))),
        };
        let terminal_mode = match t.map(|t| TerminalMode::parse(t.trim())) {
            None => None,
            Some(Some(TerminalMode::None)) => Some(TerminalModeName::None),
            Some(Some(TerminalMode::CostOnly)) => Some(TerminalModeName::CostOnly),
            Some(Some(TerminalMode::CostAndSet)) => Some(TerminalModeName::CostAndSet),
            Some(None) => return Err(Error::Config(format!("unknown terminal mode in arm '{s}'"))),
        };
        Ok(Self { predictor, terminal_mode })
    }

    pub fn of(scenario: &Scenario) -> Self {
        Self { predictor: scenario.controller.predictor, terminal_mode: Some(scenario.controller.terminal_mode) }
    }

    pub fn label(&self) -> String {
        let p = Predictor::from(self.predictor).name();
        match self.terminal_mode {
            Some(t) => format!("{p}:{}", TerminalMode::from(t).name()),
            None => p.to_string(),
        }
    }
}

/// A scenario with its plant, controller settings and terminal ingredients resolved.
#[derive(Debug, Clone)]
pub struct Setup {
    pub scenario: Scenario,
    pub plant: Plant,
    pub config: MpcConfig,
    pub terminal: Option<TerminalIngredients>,
    pub x0: DVector<f64>,
    /// `(start, physical output target)`.
    pub references: Vec<(usize, DVector<f64>)>,
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

impl Setup {
    /// Resolves a scenario; relative terminal files are looked up in `base_dir`.
    pub fn new(scenario: &Scenario, base_dir: Option<&Path>) -> Result<Self> {
        scenario.validate()?;
        let plant = Plant::from_spec(&scenario.plant)?;
        let model = plant.model();
        let d = model.dims();
        let c = &scenario.controller;

        let mut config = MpcConfig::new(c.horizon, diag(&c.q_diag), diag(&c.r_diag));
        config.weight_space = c.weight_space.into();
        config.predictor = c.predictor.into();
        config.relinearize = c.relinearize;
        config.terminal_mode = c.terminal_mode.into();
        if let Some(w) = c.soft_weight {
            config.soft_weight = w;
        }
        let defaults = QpSettings::default();
        config.qp.eps = c.qp.eps.unwrap_or(defaults.eps);
        config.qp.eps_infeasible = config.qp.eps;
        config.qp.max_iter = c.qp.max_iter.unwrap_or(defaults.max_iter);
        config.validate(model)?;

        let x0 = match &scenario.initial {
            InitialCondition::State(x) => {
                if x.len() != d.n_x {
                    return Err(Error::Config(format!("initial state must have {} entries", d.n_x)));
                }
                DVector::from_column_slice(x)
            }
            InitialCondition::SteadyInput(u) => {
                if u.len() != d.n_u {
                    return Err(Error::Config(format!("initial input must have {} entries", d.n_u)));
                }
                plant.equilibrium(&DVector::from_column_slice(u), &plant.nominal_state())?
            }
        };
        if !model.sets().state.contains(&x0) {
            return Err(Error::Config("initial state outside the admissible state box".into()));
        }

        let offset = model.output_offset();
        let mut references = Vec::with_capacity(scenario.references.len());
        for r in &scenario.references {
            if r.y.len() != d.n_y {
                return Err(Error::Config(format!("reference at sample {} must have {} entries", r.start, d.n_y)));
            }
            let y = plant.from_display(&r.y);
            if !model.sets().output.contains(&(&y - &offset)) {
                return Err(Error::Config(format!("reference at sample {} is outside the output set", r.start)));
            }
            references.push((r.start, y));
        }

        let terminal = match &scenario.terminal {
            None => None,
            Some(TerminalSource::File(f)) => {
                let path = base_dir.map_or_else(|| Path::new(f).to_path_buf(), |b| b.join(f));
                Some(TerminalArtifact::load(&path)?.ingredients()?)
            }
            Some(TerminalSource::Synthesize(spec)) => {
                let s = terminal_io::setup(&plant, spec)?;
                let (q, r) = terminal_io::state_weights(model, &c.q_diag, &c.r_diag, c.weight_space, &s.x_r)?;
                let settings = SynthesisSettings { sense: spec.sense.into(), ..SynthesisSettings::default() };
                Some(synthesize(&s.vertices, &q, &r, &s.bounds, &settings)?.ingredients)
            }
        };
        Ok(Self { scenario: scenario.clone(), plant, config, terminal, x0, references })
    }

    fn reference_at(&self, k: usize) -> &DVector<f64> {
        &self.references.iter().rev().find(|(s, _)| *s <= k).expect("first reference starts at 0").1
    }

    fn meta(&self, arm: &Arm, cfg: &MpcConfig, seed: u64) -> LogMeta {
        let info = |c: Vec<Channel>| c.into_iter().map(|c| ChannelInfo { name: c.name, unit: c.unit }).collect();
        LogMeta {
            scenario: self.scenario.name.clone(),
            arm: arm.label(),
            predictor: cfg.predictor.name().to_string(),
            terminal_mode: cfg.terminal_mode.name().to_string(),
            horizon: cfg.n_p,
            sample_time: self.plant.model().sample_time(),
            seed,
            states: info(self.plant.states()),
            inputs: info(self.plant.inputs()),
            outputs: info(self.plant.outputs()),
            n_rho: self.plant.model().dims().n_rho,
            references: self.scenario.references.iter().map(|r| (r.start, r.y.clone())).collect(),
        }
    }
}

/// A run that stopped early, with everything logged up to that point.
#[derive(Debug)]
pub struct RunError {
    pub log: ClosedLoopLog,
    pub error: Error,
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({} samples logged)", self.error, self.log.rows.len())
    }
}

impl std::error::Error for RunError {}

/// Runs the scenario's own configuration.
pub fn run(setup: &Setup, seed: Option<u64>) -> std::result::Result<ClosedLoopLog, RunError> {
    run_arm(setup, &Arm::of(&setup.scenario), seed, &WallClock::new())
}

fn target_for(
    model: &dyn Qlpv,
    y_r: &DVector<f64>,
    prev: Option<&SteadyStatePair>,
    x_k: &DVector<f64>,
    u_guess: &DVector<f64>,
) -> Result<SteadyStatePair> {
    let (xg, ug) = match prev {
        Some(t) => (t.x_r.clone(), t.u_r.clone()),
        None => (x_k.clone(), u_guess.clone()),
    };
    let t = steady_state_pair(model, y_r, &xg, &ug)?;
    if !model.sets().state.contains(&t.x_r) || !model.sets().input.contains(&t.u_r) {
        return Err(MpcError::InfeasibleTarget("steady-state pair outside the admissible boxes".into()).into());
    }
    Ok(t)
}

/// Runs one arm. The seed (default: the scenario's) drives measurement noise only.
pub fn run_arm<C: Clock + ?Sized>(
    setup: &Setup,
    arm: &Arm,
    seed: Option<u64>,
    clock: &C,
) -> std::result::Result<ClosedLoopLog, RunError> {
    let seed = seed.unwrap_or(setup.scenario.seed);
    let mut cfg = setup.config.clone();
    cfg.predictor = arm.predictor.into();
    if let Some(t) = arm.terminal_mode {
        cfg.terminal_mode = t.into();
    }
    let mut log = ClosedLoopLog::new(setup.meta(arm, &cfg, seed));
    macro_rules! bail {
        ($k:expr, $e:expr) => {
            return Err(RunError { log, error: Error::Aborted { k: $k, reason: $e.to_string() } })
        };
    }
    if cfg.terminal_mode.needs_ingredients() && setup.terminal.is_none() {
        return Err(RunError { log, error: MpcError::MissingTerminal.into() });
    }
    let terminal = if cfg.terminal_mode == TerminalMode::None { None } else { setup.terminal.as_ref() };

    let plant = &setup.plant;
    let model = plant.model();
    let noise: Option<Vec<Normal<f64>>> = match &setup.scenario.measurement_noise {
        Some(sd) if sd.len() != model.dims().n_x => {
            bail!(0, format!("measurement noise must have {} entries", model.dims().n_x))
        }
        Some(sd) => match sd.iter().map(|s| Normal::new(0.0, *s)).collect() {
            Ok(v) => Some(v),
            Err(e) => bail!(0, format!("measurement noise: {e}")),
        },
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut ctrl = ControllerState::new();
    let mut target: Option<SteadyStatePair> = None;
    let mut x = setup.x0.clone();
    let mut u_prev = model.sets().input.midpoint();
    if u_prev.iter().any(|v| !v.is_finite()) {
        u_prev = DVector::zeros(model.dims().n_u);
    }
    let mut shifted_run = 0usize;

    for k in 0..setup.scenario.samples {
        let y_r = setup.reference_at(k);
        if target.as_ref().is_none_or(|t| &t.y_r != y_r) {
            match target_for(model, y_r, target.as_ref(), &x, &u_prev) {
                Ok(t) => target = Some(t),
                Err(e) => bail!(k, format!("steady-state target: {e}")),
            }
        }
        let tgt = target.as_ref().expect("target set above");

        let measured = match &noise {
            Some(n) => DVector::from_iterator(x.len(), x.iter().zip(n).map(|(v, d)| v + d.sample(&mut rng))),
            None => x.clone(),
        };
        let out = match control_step(&mut ctrl, &cfg, model, &measured, tgt, terminal, clock) {
            Ok(o) => o,
            Err(e) => bail!(k, e),
        };
        let d = &out.diagnostics;
        let y = match plant.output(&x, &out.u) {
            Ok(y) => plant.to_display(&y),
            Err(e) => bail!(k, e),
        };
        log.rows.push(LogRow {
            k,
            x: x.iter().copied().collect(),
            u: out.u.iter().copied().collect(),
            y: y.iter().copied().collect(),
            rho: d.rho.iter().copied().collect(),
            rho_hat: d.trajectory.entries.iter().flat_map(|r| r.iter().copied()).collect(),
            status: d.status.name().to_string(),
            qp_iterations: d.iterations,
            solve_time: d.compute_time.max(0.0),
            cost: d.cost,
            softened: d.softened(),
        });
        if d.fallback != Fallback::None {
            log.event(k, d.fallback.name(), format!("nominal QP status {}", d.status.name()));
        }
        if d.candidate_feasible == Some(false) {
            let v = d.candidate_violation.unwrap_or(f64::NAN);
            log.event(k, "candidate-infeasible", format!("shifted candidate violates constraints by {v:e}"));
        }
        if d.scheduling_clamped {
            log.event(k, "scheduling-clamped", "measured scheduling variable clamped to its set");
        }
        shifted_run = if d.fallback == Fallback::Shifted { shifted_run + 1 } else { 0 };
        if shifted_run >= MAX_SHIFTED {
            bail!(k, format!("{MAX_SHIFTED} consecutive samples without a QP solution"));
        }
        x = match plant.step(&x, &out.u) {
            Ok(next) if next.iter().all(|v| v.is_finite()) => next,
            Ok(_) => bail!(k, "plant state is not finite"),
            Err(e) => bail!(k, format!("plant: {e}")),
        };
        u_prev = out.u;
    }
    Ok(log)
}
