//! Meta-Backward: federated meta-learning by walking backward from local
//! optima.
//!
//! Every agent first trains its own task to a near-optimal model `phi_i^K` and
//! uploads it. The server averages the uploads into `Phi^K`. Then, for
//! `k = K-1 .. 0`, each agent takes one stochastic gradient *ascent* step from
//! `phi_i^{k+1}` on its own data and projects the result onto the ball of
//! squared radius `delta_k` around `Phi^{k+1}`; the server averages the
//! projected models into `Phi^k` and broadcasts it. Because `delta_k` shrinks
//! as `k` approaches 0 the agents are forced together, and the final average
//! `Phi^0` is the meta-model.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cost::{CostLedger, CostModel, RoundUsage};
use crate::data::TaskDataset;
use crate::nn::{Batch, MiniBatcher, Model, NnError, ParamVector};
use crate::projection::{project, BallConstraint, ProjectionError};
use crate::{stream_id, stream_rng};

const LOCAL_STREAM: u16 = 1;
const ASCENT_STREAM: u16 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error("local training of task {task} diverged")]
    Divergence { task: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Offline solver producing each agent's near-optimal model. Stationarity
/// (full-batch gradient norm at most `grad_tol`) stands in for distance to
/// the true optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSolverConfig {
    pub max_steps: usize,
    pub lr: f64,
    pub grad_tol: f64,
    pub batch_size: usize,
    /// Steps between full-batch gradient norm checks.
    pub check_every: usize,
}

impl Default for LocalSolverConfig {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            lr: 0.01,
            grad_tol: 1e-3,
            batch_size: 100,
            check_every: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradTolerance,
    StepBudget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub params: ParamVector,
    pub steps: usize,
    pub stop: StopReason,
    /// Full-batch gradient norm at the last check.
    pub grad_norm: f64,
    pub grad_evals: u64,
    pub sample_grads: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeltaSchedule {
    /// `delta_0 ..= delta_{K-1}`.
    Explicit(Vec<f64>),
    /// `delta_k = scale * gamma^(K-1-k)`. Without an explicit scale, the
    /// scale is a quarter of the squared largest pairwise distance between
    /// the uploaded local models.
    Geometric { gamma: f64, scale: Option<f64> },
}

impl Default for DeltaSchedule {
    fn default() -> Self {
        DeltaSchedule::Geometric {
            gamma: 0.85,
            scale: None,
        }
    }
}

/// Smallest automatic scale; only reached when all local models coincide.
const MIN_AUTO_SCALE: f64 = 1e-12;

impl DeltaSchedule {
    pub fn resolve(&self, steps: usize, spread_sq: f64) -> Result<Vec<f64>, EngineError> {
        let deltas = match self {
            DeltaSchedule::Explicit(d) => {
                if d.len() != steps {
                    return Err(EngineError::InvalidConfig(format!(
                        "{} deltas for {steps} backward steps",
                        d.len()
                    )));
                }
                d.clone()
            }
            &DeltaSchedule::Geometric { gamma, scale } => {
                if !(gamma > 0.0 && gamma <= 1.0) {
                    return Err(EngineError::InvalidConfig(format!("gamma {gamma} outside (0, 1]")));
                }
                let scale = scale.unwrap_or((spread_sq / 4.0).max(MIN_AUTO_SCALE));
                (0..steps)
                    .map(|k| scale * gamma.powi((steps - 1 - k) as i32))
                    .collect()
            }
        };
        if deltas.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
            return Err(EngineError::InvalidConfig("deltas must be positive".into()));
        }
        if deltas.windows(2).any(|w| w[0] > w[1]) {
            return Err(EngineError::InvalidConfig("deltas must be non-decreasing in k".into()));
        }
        Ok(deltas)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AscentMode {
    /// One mini-batch of `batch_size` samples per step.
    Stochastic,
    /// Whole training set every step.
    FullBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardConfig {
    /// Number of backward rounds `K`.
    pub steps: usize,
    /// Ascent step size.
    pub alpha: f64,
    pub delta: DeltaSchedule,
    pub batch_size: usize,
    pub ascent: AscentMode,
    pub local: LocalSolverConfig,
    pub seed: u64,
}

impl Default for BackwardConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            alpha: 0.01,
            delta: DeltaSchedule::default(),
            batch_size: 100,
            ascent: AscentMode::Stochastic,
            local: LocalSolverConfig::default(),
            seed: 0,
        }
    }
}

impl BackwardConfig {
    fn validate(&self) -> Result<(), EngineError> {
        if self.steps == 0 {
            return Err(EngineError::InvalidConfig("need at least one backward step".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(EngineError::InvalidConfig(format!("alpha {} must be positive", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(EngineError::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Trains one task from `init` with mini-batch SGD until the full-batch
/// gradient norm drops to `grad_tol` or the step budget runs out. The norm is
/// checked before the first step and every `check_every` steps.
pub fn train_local_optimum<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &M,
    init: &ParamVector,
    data: &Batch,
    solver: &LocalSolverConfig,
    rng: &mut R,
) -> Result<LocalOutcome, EngineError> {
    if solver.max_steps == 0 || solver.check_every == 0 {
        return Err(EngineError::InvalidConfig("local solver needs a positive step budget".into()));
    }
    if !(solver.lr > 0.0) {
        return Err(EngineError::InvalidConfig("local learning rate must be positive".into()));
    }
    let mut batcher = MiniBatcher::new(data.len(), solver.batch_size)?;
    let mut params = init.clone();
    let (mut grad_evals, mut sample_grads) = (0u64, 0u64);
    let mut step = 0;
    loop {
        if step % solver.check_every == 0 || step == solver.max_steps {
            let (loss, full) = model.loss_and_grad(&params, data)?;
            grad_evals += 1;
            sample_grads += data.len() as u64;
            if !loss.is_finite() {
                return Err(EngineError::Divergence { task: 0 });
            }
            let grad_norm = full.norm();
            let stop = if grad_norm <= solver.grad_tol {
                Some(StopReason::GradTolerance)
            } else if step == solver.max_steps {
                Some(StopReason::StepBudget)
            } else {
                None
            };
            if let Some(stop) = stop {
                return Ok(LocalOutcome {
                    params,
                    steps: step,
                    stop,
                    grad_norm,
                    grad_evals,
                    sample_grads,
                });
            }
        }
        let batch = batcher.next_batch(data, rng);
        let grad = model.grad(&params, &batch)?;
        grad_evals += 1;
        sample_grads += batch.len() as u64;
        params.axpy(-solver.lr, &grad);
        if !params.is_finite() {
            return Err(EngineError::Divergence { task: 0 });
        }
        step += 1;
    }
}

/// `phi + alpha * grad L(phi, batch)`: one step up the loss surface, i.e.
/// backward along the path a descent run would have taken.
pub fn ascent_step<M: Model + ?Sized>(
    model: &M,
    phi: &ParamVector,
    alpha: f64,
    batch: &Batch,
) -> Result<ParamVector, NnError> {
    let mut out = phi.clone();
    out.axpy(alpha, &model.grad(phi, batch)?);
    Ok(out)
}

/// What an agent sends back after a backward step.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentReport {
    pub task_id: usize,
    pub phi: ParamVector,
    pub multiplier: f64,
    pub active: bool,
    pub sample_grads: u64,
}

/// One federated participant. Its data never leaves this struct: the only
/// inbound message is the ball `(Phi^{k+1}, delta_k)` and the only outbound
/// one is the new `phi_i^k`.
#[derive(Debug, Clone)]
pub struct Agent {
    task_id: usize,
    phi: ParamVector,
    data: Batch,
    batcher: MiniBatcher,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(task_id: usize, data: Batch, phi: ParamVector, batch_size: usize, rng: ChaCha8Rng) -> Result<Self, EngineError> {
        let batcher = MiniBatcher::new(data.len(), batch_size)?;
        Ok(Self {
            task_id,
            phi,
            data,
            batcher,
            rng,
        })
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn phi(&self) -> &ParamVector {
        &self.phi
    }

    pub fn train_loss<M: Model + ?Sized>(&self, model: &M) -> Result<f64, NnError> {
        model.loss(&self.phi, &self.data)
    }

    /// Projected ascent: ascend from the current model, then project onto
    /// `ball`.
    pub fn backward_step<M: Model + ?Sized>(
        &mut self,
        model: &M,
        ball: &BallConstraint,
        alpha: f64,
        mode: AscentMode,
    ) -> Result<AgentReport, EngineError> {
        let batch = match mode {
            AscentMode::Stochastic => self.batcher.next_batch(&self.data, &mut self.rng),
            AscentMode::FullBatch => std::borrow::Cow::Borrowed(&self.data),
        };
        let sample_grads = batch.len() as u64;
        let raised = ascent_step(model, &self.phi, alpha, &batch)?;
        let projected = project(&raised, ball)?;
        self.phi = projected.point;
        Ok(AgentReport {
            task_id: self.task_id,
            phi: self.phi.clone(),
            multiplier: projected.multiplier,
            active: projected.active,
            sample_grads,
        })
    }
}

/// Parameter server: holds the running average `Phi^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub phi_avg: ParamVector,
    /// Backward index of `phi_avg`.
    pub round: usize,
}

impl ServerState {
    /// Averages uploads in the order given (ascending task id).
    pub fn aggregate(&mut self, uploads: &[ParamVector], round: usize) {
        self.phi_avg = ParamVector::mean(uploads);
        self.round = round;
    }
}

/// Per-agent state after one backward round.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub round: usize,
    pub agent: usize,
    pub delta: f64,
    pub multiplier: f64,
    /// `|phi_i^k - Phi^{k+1}|^2`, the constrained quantity.
    pub dist_sq_to_previous_avg: f64,
    /// `|phi_i^k - Phi^k|`.
    pub distance_to_average: f64,
    /// Full training loss of the agent at `phi_i^k`.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub reports: Vec<AgentReport>,
    pub delta: f64,
}

/// Backward round `k`: every agent projects its ascent step onto the ball
/// around the current server average, then the server averages the results.
pub fn backward_round<M: Model + ?Sized>(
    model: &M,
    agents: &mut [Agent],
    server: &mut ServerState,
    k: usize,
    delta: f64,
    cfg: &BackwardConfig,
) -> Result<RoundOutcome, EngineError> {
    let ball = BallConstraint::new(server.phi_avg.clone(), delta)?;
    let reports = agents
        .par_iter_mut()
        .map(|agent| agent.backward_step(model, &ball, cfg.alpha, cfg.ascent))
        .collect::<Result<Vec<_>, _>>()?;
    let uploads: Vec<ParamVector> = reports.iter().map(|r| r.phi.clone()).collect();
    server.aggregate(&uploads, k);
    Ok(RoundOutcome { reports, delta })
}

#[derive(Debug, Clone)]
pub struct MetaBackwardRun {
    /// The meta-model `Phi^0`.
    pub theta: ParamVector,
    /// `Phi^K`, the plain average of the local models.
    pub local_average: ParamVector,
    pub local: Vec<LocalOutcome>,
    /// `delta_0 ..= delta_{K-1}`.
    pub deltas: Vec<f64>,
    pub trajectory: Vec<TrajectoryRow>,
    /// Agents' `phi_i^0`.
    pub final_phis: Vec<ParamVector>,
    pub ledger: CostLedger,
}

/// Offline phase: every task trains from `init` on its own training split.
pub fn train_local_optima<M: Model + ?Sized>(
    model: &M,
    tasks: &[TaskDataset],
    init: &ParamVector,
    solver: &LocalSolverConfig,
    seed: u64,
) -> Result<Vec<LocalOutcome>, EngineError> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let mut rng = stream_rng(seed, stream_id(LOCAL_STREAM, i as u32, 0));
            train_local_optimum(model, init, &task.train, solver, &mut rng).map_err(|e| match e {
                EngineError::Divergence { .. } => EngineError::Divergence { task: i },
                other => other,
            })
        })
        .collect()
}

fn max_pairwise_dist_sq(points: &[ParamVector]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max(a.dist_sq(b));
        }
    }
    best
}

/// Backward phase from already trained local models.
pub fn run_backward_from<M: Model + ?Sized>(
    model: &M,
    tasks: &[TaskDataset],
    local: Vec<LocalOutcome>,
    cfg: &BackwardConfig,
    cost: CostModel,
) -> Result<MetaBackwardRun, EngineError> {
    cfg.validate()?;
    if tasks.is_empty() || tasks.len() != local.len() {
        return Err(EngineError::InvalidConfig("need one local model per task, at least one task".into()));
    }
    let n = tasks.len() as u64;
    let mut ledger = CostLedger::new(cost);

    let optima: Vec<ParamVector> = local.iter().map(|l| l.params.clone()).collect();
    let mut server = ServerState {
        phi_avg: ParamVector::mean(&optima),
        round: cfg.steps,
    };
    ledger.record_round(RoundUsage {
        uplinks: n,
        ..Default::default()
    });
    let local_average = server.phi_avg.clone();
    let deltas = cfg.delta.resolve(cfg.steps, max_pairwise_dist_sq(&optima))?;

    let mut agents = tasks
        .iter()
        .zip(optima)
        .enumerate()
        .map(|(i, (task, phi))| {
            let rng = stream_rng(cfg.seed, stream_id(ASCENT_STREAM, i as u32, 0));
            Agent::new(i, task.train.clone(), phi, cfg.batch_size, rng)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut trajectory = Vec::with_capacity(cfg.steps * tasks.len());
    for k in (0..cfg.steps).rev() {
        let started = Instant::now();
        let previous = server.phi_avg.clone();
        let outcome = backward_round(model, &mut agents, &mut server, k, deltas[k], cfg)?;
        let wall_time_s = started.elapsed().as_secs_f64();
        ledger.record_round(RoundUsage {
            uplinks: n,
            broadcast_receivers: n,
            grad_evals: n,
            sample_grads: outcome.reports.iter().map(|r| r.sample_grads).sum(),
            wall_time_s,
        });
        let losses = agents
            .par_iter()
            .map(|a| a.train_loss(model))
            .collect::<Result<Vec<_>, _>>()?;
        for (report, loss) in outcome.reports.iter().zip(losses) {
            trajectory.push(TrajectoryRow {
                round: k,
                agent: report.task_id,
                delta: outcome.delta,
                multiplier: report.multiplier,
                dist_sq_to_previous_avg: report.phi.dist_sq(&previous),
                distance_to_average: report.phi.dist_sq(&server.phi_avg).sqrt(),
                loss,
            });
        }
    }

    Ok(MetaBackwardRun {
        theta: server.phi_avg.clone(),
        local_average,
        local,
        deltas,
        trajectory,
        final_phis: agents.iter().map(|a| a.phi().clone()).collect(),
        ledger,
    })
}

/// The whole protocol: offline local training from `init`, upload, `K`
/// backward rounds, and the final average as meta-model.
pub fn run_meta_backward<M: Model + ?Sized>(
    model: &M,
    tasks: &[TaskDataset],
    init: &ParamVector,
    cfg: &BackwardConfig,
    cost: CostModel,
) -> Result<MetaBackwardRun, EngineError> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(EngineError::InvalidConfig("need at least one task".into()));
    }
    let local = train_local_optima(model, tasks, init, &cfg.local, cfg.seed)?;
    run_backward_from(model, tasks, local, cfg, cost)
}

/// `round,agent,loss,distance_to_average`, in execution order.
pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from("round,agent,loss,distance_to_average\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.round, r.agent, r.loss, r.distance_to_average);
    }
    out
}
