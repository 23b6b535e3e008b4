//! iMAML baseline: proximal inner problem, implicit meta-gradient by
//! conjugate gradient, and a federated outer SGD loop.
//!
//! Per outer round every agent
//! 1. runs `Y` SGD steps on `L(phi, D_tr) + lambda/2 |phi - theta|^2` from `theta`,
//! 2. solves `(I + H / lambda) x = grad L(phi, D_test)` with a few CG steps,
//!    where `H` is the training-loss Hessian at `phi` (applied through
//!    finite-difference Hessian-vector products), and
//! 3. uploads `x`.
//!
//! The server averages the uploads and takes an outer step `theta -= eta * avg`.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::cost::{CostLedger, CostModel, RoundRecord, RoundUsage};
use crate::data::TaskDataset;
use crate::nn::{hvp, Batch, MiniBatcher, Model, NnError, ParamVector, HVP_EPS};
use crate::{stream_id, stream_rng};

const IMAML_STREAM: u16 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImamlError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("inner problem diverged")]
    Divergence,
    #[error("conjugate gradient produced a non-finite iterate after {iterations} iterations")]
    BreakdownNonFinite { iterations: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImamlConfig {
    /// Outer (communication) rounds `X`.
    pub outer_steps: usize,
    /// Inner SGD steps `Y` per round.
    pub inner_steps: usize,
    pub cg_steps: usize,
    /// Proximal regularization strength.
    pub lambda: f64,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub batch_size: usize,
    pub hvp_eps: f64,
    pub seed: u64,
}

impl Default for ImamlConfig {
    fn default() -> Self {
        Self {
            outer_steps: 50,
            inner_steps: 50,
            cg_steps: 5,
            lambda: 2.0,
            inner_lr: 0.01,
            outer_lr: 0.01,
            batch_size: 100,
            hvp_eps: HVP_EPS,
            seed: 0,
        }
    }
}

impl ImamlConfig {
    pub fn validate(&self) -> Result<(), ImamlError> {
        let positive = [
            ("lambda", self.lambda),
            ("inner_lr", self.inner_lr),
            ("outer_lr", self.outer_lr),
            ("hvp_eps", self.hvp_eps),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(ImamlError::InvalidConfig(format!("{name} = {v} must be positive")));
        }
        if self.cg_steps == 0 || self.batch_size == 0 {
            return Err(ImamlError::InvalidConfig("cg_steps and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Gradient evaluations charged per agent per outer round: inner steps,
    /// two per Hessian-vector product of the CG budget, one test gradient.
    pub fn grad_evals_per_round(&self) -> u64 {
        (self.inner_steps + 2 * self.cg_steps + 1) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Work<T> {
    pub value: T,
    pub grad_evals: u64,
    pub sample_grads: u64,
}

/// Approximate minimizer of the proximal inner problem after `inner_steps`
/// SGD steps from `theta`.
pub fn inner_solve<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &M,
    theta: &ParamVector,
    train: &Batch,
    cfg: &ImamlConfig,
    rng: &mut R,
) -> Result<Work<ParamVector>, ImamlError> {
    let mut batcher = MiniBatcher::new(train.len(), cfg.batch_size)?;
    let mut phi = theta.clone();
    let mut sample_grads = 0;
    for _ in 0..cfg.inner_steps {
        let batch = batcher.next_batch(train, rng);
        let mut grad = model.grad(&phi, &batch)?;
        sample_grads += batch.len() as u64;
        // Proximal term.
        grad.axpy(cfg.lambda, &phi);
        grad.axpy(-cfg.lambda, theta);
        phi.axpy(-cfg.inner_lr, &grad);
        if !phi.is_finite() {
            return Err(ImamlError::Divergence);
        }
    }
    Ok(Work {
        value: phi,
        grad_evals: cfg.inner_steps as u64,
        sample_grads,
    })
}

/// Proximal inner objective `L(phi, batch) + lambda/2 |phi - theta|^2`.
pub fn inner_objective<M: Model + ?Sized>(
    model: &M,
    phi: &ParamVector,
    theta: &ParamVector,
    batch: &Batch,
    lambda: f64,
) -> Result<f64, NnError> {
    Ok(model.loss(phi, batch)? + 0.5 * lambda * phi.dist_sq(theta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgOutcome {
    pub x: ParamVector,
    /// Operator applications performed.
    pub iterations: usize,
    pub residual_norm: f64,
    /// Stopped on a direction whose curvature fell to the floor.
    pub negative_curvature: bool,
}

/// Relative residual at which CG stops early.
pub const CG_TOL: f64 = 1e-10;

/// Smallest Rayleigh quotient `p^T A p / p^T p` CG accepts for the
/// meta-gradient system. `I + H / lambda` stays at or above 1 when `H` is
/// positive semidefinite, so anything this low means the sampled Hessian is
/// indefinite and the solve would blow up.
pub const META_CURVATURE_FLOOR: f64 = 0.05;

/// Conjugate gradient on `A x = b` from `x = 0`, for at most `steps`
/// iterations. `A` must be symmetric; it is only touched through `apply`.
/// A direction of non-positive curvature ends the solve early.
pub fn cg_solve<F>(apply: F, b: &ParamVector, steps: usize) -> Result<CgOutcome, ImamlError>
where
    F: FnMut(&ParamVector) -> Result<ParamVector, ImamlError>,
{
    cg_solve_floored(apply, b, steps, 0.0)
}

/// [`cg_solve`], truncating on any direction with
/// `p^T A p <= floor * p^T p`.
pub fn cg_solve_floored<F>(mut apply: F, b: &ParamVector, steps: usize, floor: f64) -> Result<CgOutcome, ImamlError>
where
    F: FnMut(&ParamVector) -> Result<ParamVector, ImamlError>,
{
    if steps == 0 {
        return Err(ImamlError::InvalidConfig("CG needs at least one step".into()));
    }
    let tol = CG_TOL * b.norm();
    let mut x = ParamVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.norm_sq();
    let mut iterations = 0;
    let mut negative_curvature = false;
    while iterations < steps && rs.sqrt() > tol {
        let ap = apply(&p)?;
        let curvature = p.dot(&ap);
        if !(curvature > floor * p.norm_sq()) {
            // Truncate on a flat or negative direction; with nothing accepted yet,
            // fall back to the right-hand side itself.
            negative_curvature = true;
            iterations += 1;
            if x.norm_sq() == 0.0 {
                x = b.clone();
            }
            break;
        }
        let alpha = rs / curvature;
        x.axpy(alpha, &p);
        r.axpy(-alpha, &ap);
        iterations += 1;
        if !x.is_finite() || !r.is_finite() {
            return Err(ImamlError::BreakdownNonFinite { iterations });
        }
        let rs_next = r.norm_sq();
        let beta = rs_next / rs;
        rs = rs_next;
        p.scale(beta);
        p.axpy(1.0, &r);
    }
    Ok(CgOutcome {
        x,
        iterations,
        residual_norm: rs.sqrt(),
        negative_curvature,
    })
}

/// Implicit meta-gradient of one task: `(I + H / lambda)^{-1} grad L(phi, D_test)`
/// with `H` the Hessian of the training loss at `phi`, estimated on one
/// mini-batch of training data that stays fixed during the CG solve.
pub fn meta_gradient<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &M,
    phi: &ParamVector,
    task: &TaskDataset,
    cfg: &ImamlConfig,
    rng: &mut R,
) -> Result<Work<ParamVector>, ImamlError> {
    let test_grad = model.grad(phi, &task.test)?;
    let mut sample_grads = task.test.len() as u64;
    let mut batcher = MiniBatcher::new(task.train.len(), cfg.batch_size)?;
    let hessian_batch = batcher.next_batch(&task.train, rng);
    let mut hvps = 0u64;
    let outcome = cg_solve_floored(
        |v| {
            hvps += 1;
            let mut out = hvp(model, phi, &hessian_batch, v, cfg.hvp_eps)?;
            out.scale(1.0 / cfg.lambda);
            out.axpy(1.0, v);
            Ok(out)
        },
        &test_grad,
        cfg.cg_steps,
        META_CURVATURE_FLOOR,
    )?;
    sample_grads += 2 * hvps * hessian_batch.len() as u64;
    // Charged at the CG budget so every round costs the same; an early
    // stop only shows in `sample_grads`.
    Ok(Work {
        value: outcome.x,
        grad_evals: 1 + 2 * cfg.cg_steps as u64,
        sample_grads,
    })
}

/// Outer loop driven one round at a time, so a long run can be inspected at
/// intermediate round counts.
pub struct ImamlRunner<'a, M: Model + ?Sized> {
    model: &'a M,
    tasks: &'a [TaskDataset],
    cfg: ImamlConfig,
    theta: ParamVector,
    ledger: CostLedger,
    round: usize,
}

impl<'a, M: Model + ?Sized> ImamlRunner<'a, M> {
    pub fn new(
        model: &'a M,
        tasks: &'a [TaskDataset],
        init: ParamVector,
        cfg: ImamlConfig,
        cost: CostModel,
    ) -> Result<Self, ImamlError> {
        cfg.validate()?;
        if tasks.is_empty() {
            return Err(ImamlError::InvalidConfig("need at least one task".into()));
        }
        if init.len() != model.dim() {
            return Err(NnError::ShapeMismatch(format!(
                "initializer has {} entries, model has {}",
                init.len(),
                model.dim()
            ))
            .into());
        }
        Ok(Self {
            model,
            tasks,
            cfg,
            theta: init,
            ledger: CostLedger::new(cost),
            round: 0,
        })
    }

    /// Charges one upload per agent before the first outer round, for runs
    /// whose `init` is assembled from the agents' own models. Only allowed
    /// before any round has run.
    pub fn charge_initial_upload(&mut self) -> Result<(), ImamlError> {
        if self.round > 0 || !self.ledger.rounds().is_empty() {
            return Err(ImamlError::InvalidConfig("initial upload after the first round".into()));
        }
        self.ledger.record_round(RoundUsage {
            uplinks: self.tasks.len() as u64,
            ..RoundUsage::default()
        });
        Ok(())
    }

    pub fn theta(&self) -> &ParamVector {
        &self.theta
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    /// Per-task meta-gradients for the current `theta`, in task order,
    /// without updating anything.
    pub fn task_meta_gradients(&self) -> Result<Vec<Work<ParamVector>>, ImamlError> {
        let round = self.round;
        self.tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| {
                let mut rng = stream_rng(self.cfg.seed, stream_id(IMAML_STREAM, round as u32, i as u16));
                let inner = inner_solve(self.model, &self.theta, &task.train, &self.cfg, &mut rng)?;
                let meta = meta_gradient(self.model, &inner.value, task, &self.cfg, &mut rng)?;
                Ok(Work {
                    value: meta.value,
                    grad_evals: inner.grad_evals + meta.grad_evals,
                    sample_grads: inner.sample_grads + meta.sample_grads,
                })
            })
            .collect()
    }

    /// One outer round: broadcast, local work, upload, averaged outer step.
    pub fn step(&mut self) -> Result<&RoundRecord, ImamlError> {
        let started = Instant::now();
        let work = self.task_meta_gradients()?;
        let grads: Vec<ParamVector> = work.iter().map(|w| w.value.clone()).collect();
        let avg = ParamVector::mean(&grads);
        self.theta.axpy(-self.cfg.outer_lr, &avg);
        if !self.theta.is_finite() {
            return Err(ImamlError::Divergence);
        }
        let n = self.tasks.len() as u64;
        self.round += 1;
        Ok(self.ledger.record_round(RoundUsage {
            uplinks: n,
            broadcast_receivers: n,
            grad_evals: work.iter().map(|w| w.grad_evals).sum(),
            sample_grads: work.iter().map(|w| w.sample_grads).sum(),
            wall_time_s: started.elapsed().as_secs_f64(),
        }))
    }

    pub fn finish(self) -> ImamlRun {
        ImamlRun {
            theta: self.theta,
            ledger: self.ledger,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ImamlRun {
    pub theta: ParamVector,
    pub ledger: CostLedger,
}

/// `X` outer rounds from `init`.
pub fn run_imaml<M: Model + ?Sized>(
    model: &M,
    tasks: &[TaskDataset],
    init: ParamVector,
    cfg: &ImamlConfig,
    cost: CostModel,
) -> Result<ImamlRun, ImamlError> {
    let mut runner = ImamlRunner::new(model, tasks, init, cfg.clone(), cost)?;
    for _ in 0..cfg.outer_steps {
        runner.step()?;
    }
    Ok(runner.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskDescriptor;
    use crate::nn::{Head, MlpSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar `a/2 (phi - b)^2`.
    struct Parabola {
        a: f64,
        b: f64,
    }

    impl Model for Parabola {
        fn dim(&self) -> usize {
            1
        }
        fn loss(&self, p: &ParamVector, _: &Batch) -> Result<f64, NnError> {
            Ok(0.5 * self.a * (p.as_slice()[0] - self.b).powi(2))
        }
        fn loss_and_grad(&self, p: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector), NnError> {
            let g = self.a * (p.as_slice()[0] - self.b);
            Ok((self.loss(p, batch)?, ParamVector::from_vec(vec![g])))
        }
    }

    fn dummy(n: usize) -> Batch {
        Batch::regression(Array2::zeros((n, 1)), Array2::zeros((n, 1))).unwrap()
    }

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    #[test]
    fn inner_solve_limits() {
        let model = Parabola { a: 3.0, b: 2.0 };
        let theta = pv(&[-1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = ImamlConfig {
            inner_steps: 0,
            ..Default::default()
        };
        assert_eq!(inner_solve(&model, &theta, &dummy(4), &none, &mut rng).unwrap().value, theta);

        let many = ImamlConfig {
            inner_steps: 5000,
            inner_lr: 0.05,
            ..Default::default()
        };
        let got = inner_solve(&model, &theta, &dummy(4), &many, &mut rng).unwrap().value;
        let exact = (3.0 * 2.0 - 2.0) / (3.0 + 2.0);
        assert_abs_diff_eq!(got.as_slice()[0], exact, epsilon = 1e-4);

        let stiff = ImamlConfig {
            inner_steps: 5000,
            lambda: 1e6,
            inner_lr: 1e-7,
            ..Default::default()
        };
        let pinned = inner_solve(&model, &theta, &dummy(4), &stiff, &mut rng).unwrap().value;
        assert_abs_diff_eq!(pinned.as_slice()[0], -1.0, epsilon = 1e-4);
    }

    #[test]
    fn inner_objective_decreases_full_batch() {
        let spec = MlpSpec::new(vec![1, 6, 1], Head::Regression).unwrap();
        let data = Batch::regression(
            Array2::from_shape_fn((16, 1), |(i, _)| i as f64 / 4.0 - 2.0),
            Array2::from_shape_fn((16, 1), |(i, _)| 3.0 * (i as f64 / 4.0 - 2.0).sin()),
        )
        .unwrap();
        let theta = spec.init_params(&mut ChaCha8Rng::seed_from_u64(4));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut previous = inner_objective(&spec, &theta, &theta, &data, 2.0).unwrap();
        let mut phi = theta.clone();
        let one = ImamlConfig {
            inner_steps: 1,
            batch_size: 16,
            ..Default::default()
        };
        for _ in 0..30 {
            // Continue from phi while keeping the proximal anchor at theta.
            let mut grad = spec.grad(&phi, &data).unwrap();
            grad.axpy(one.lambda, &phi);
            grad.axpy(-one.lambda, &theta);
            phi.axpy(-one.inner_lr, &grad);
            let now = inner_objective(&spec, &phi, &theta, &data, 2.0).unwrap();
            assert!(now <= previous + 1e-12);
            previous = now;
        }
        // The library routine takes the same path.
        let thirty = ImamlConfig {
            inner_steps: 30,
            ..one
        };
        let got = inner_solve(&spec, &theta, &data, &thirty, &mut rng).unwrap().value;
        assert_eq!(got, phi);
    }

    #[test]
    fn cg_identity_zero_and_diagonal() {
        let b = pv(&[1.0, -2.0, 3.0]);
        let out = cg_solve(|v| Ok(v.clone()), &b, 1).unwrap();
        assert_eq!(out.x, b);
        assert_eq!(out.iterations, 1);

        let zero = cg_solve(|v| Ok(v.clone()), &ParamVector::zeros(3), 5).unwrap();
        assert_eq!(zero.x, ParamVector::zeros(3));
        assert_eq!(zero.iterations, 0);

        let diag = [1.0, 2.0, 4.0];
        let apply = |v: &ParamVector| {
            Ok(ParamVector::from_vec(v.as_slice().iter().zip(diag).map(|(x, d)| x * d).collect()))
        };
        let out = cg_solve(apply, &pv(&[1.0, 1.0, 1.0]), 3).unwrap();
        for (got, want) in out.x.as_slice().iter().zip([1.0, 0.5, 0.25]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-8);
        }
    }

    #[test]
    fn cg_truncates_on_non_positive_curvature() {
        let b = pv(&[1.0, 1.0]);
        let out = cg_solve(|v| Ok(ParamVector::zeros(v.len())), &b, 3).unwrap();
        assert!(out.negative_curvature);
        assert_eq!((out.x, out.iterations), (b.clone(), 1));

        // diag(2, -1): the first direction has curvature 1, the second is negative.
        let apply = |v: &ParamVector| Ok(pv(&[2.0 * v.as_slice()[0], -v.as_slice()[1]]));
        let out = cg_solve(apply, &b, 5).unwrap();
        assert!(out.negative_curvature);
        assert_eq!(out.iterations, 2);
        assert_eq!(out.x, pv(&[2.0, 2.0]));
    }

    #[test]
    fn cg_floor_truncates_flat_directions() {
        let b = pv(&[1.0, 1.0]);
        let flat = |v: &ParamVector| {
            let mut out = v.clone();
            out.scale(1e-3);
            Ok(out)
        };
        let plain = cg_solve(flat, &b, 3).unwrap();
        assert!(!plain.negative_curvature);
        assert!((plain.x.as_slice()[0] - 1e3).abs() < 1e-9);
        let floored = cg_solve_floored(flat, &b, 3, META_CURVATURE_FLOOR).unwrap();
        assert!(floored.negative_curvature);
        assert_eq!(floored.x, b);
    }

    #[test]
    fn cg_breakdown_on_non_finite_operator() {
        let err = cg_solve(|v| Ok(pv(&[f64::INFINITY, v.as_slice()[1]])), &pv(&[1.0, 1.0]), 3).unwrap_err();
        assert_eq!(err, ImamlError::BreakdownNonFinite { iterations: 1 });
    }

    fn task_from(train: Batch, test: Batch) -> TaskDataset {
        TaskDataset {
            train,
            test,
            descriptor: TaskDescriptor::Digits(vec![]),
            indices: None,
        }
    }

    #[test]
    fn meta_gradient_zero_test_gradient() {
        let model = Parabola { a: 2.0, b: 1.0 };
        let task = task_from(dummy(3), dummy(3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = meta_gradient(&model, &pv(&[1.0]), &task, &ImamlConfig::default(), &mut rng).unwrap();
        assert_eq!(g.value, pv(&[0.0]));
    }

    #[test]
    fn meta_gradient_large_lambda_is_test_gradient() {
        let spec = MlpSpec::new(vec![1, 3, 1], Head::Regression).unwrap();
        let batch = Batch::regression(
            Array2::from_shape_fn((8, 1), |(i, _)| i as f64 / 3.0 - 1.0),
            Array2::from_shape_fn((8, 1), |(i, _)| (i as f64).cos()),
        )
        .unwrap();
        let phi = spec.init_params(&mut ChaCha8Rng::seed_from_u64(8));
        let task = task_from(batch.clone(), batch.clone());
        let cfg = ImamlConfig {
            lambda: 1e8,
            ..Default::default()
        };
        let g = meta_gradient(&spec, &phi, &task, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let plain = spec.grad(&phi, &batch).unwrap();
        assert!(g.value.dist_sq(&plain).sqrt() <= 1e-6 * plain.norm());
    }

    #[test]
    fn runner_zero_rounds_and_symmetry() {
        let spec = MlpSpec::new(vec![1, 3, 1], Head::Regression).unwrap();
        let batch = Batch::regression(
            Array2::from_shape_fn((10, 1), |(i, _)| i as f64 / 3.0 - 1.0),
            Array2::from_shape_fn((10, 1), |(i, _)| (i as f64).sin()),
        )
        .unwrap();
        let init = spec.init_params(&mut ChaCha8Rng::seed_from_u64(2));
        let task = task_from(batch.clone(), batch);
        let cfg = ImamlConfig {
            outer_steps: 0,
            inner_steps: 3,
            batch_size: 10,
            ..Default::default()
        };
        let cost = CostModel::new(spec.param_count());
        let run = run_imaml(&spec, std::slice::from_ref(&task), init.clone(), &cfg, cost).unwrap();
        assert_eq!(run.theta, init);

        // With full batches every agent of identical tasks computes the same
        // meta-gradient, so N copies move theta exactly like one.
        let cfg = ImamlConfig {
            outer_steps: 3,
            ..cfg
        };
        let tasks = vec![task.clone(), task.clone(), task.clone()];
        let runner = ImamlRunner::new(&spec, &tasks, init.clone(), cfg.clone(), cost).unwrap();
        let grads = runner.task_meta_gradients().unwrap();
        assert!(grads.windows(2).all(|w| w[0].value == w[1].value));
        let one = run_imaml(&spec, std::slice::from_ref(&task), init.clone(), &cfg, cost).unwrap();
        let three = run_imaml(&spec, &tasks, init, &cfg, cost).unwrap();
        for (a, b) in one.theta.as_slice().iter().zip(three.theta.as_slice()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
        assert_eq!(three.ledger.totals().uplinks, 9);
        assert_eq!(three.ledger.totals().grad_evals, 9 * cfg.grad_evals_per_round());
    }

    #[test]
    fn rejects_invalid_config() {
        for cfg in [
            ImamlConfig { lambda: 0.0, ..Default::default() },
            ImamlConfig { cg_steps: 0, ..Default::default() },
            ImamlConfig { outer_lr: -1.0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
