//! Classical feasibility-restoration baselines: projected gradient, penalty,
//! augmented Lagrangian, and a log-barrier interior-point method. All four
//! act on black-box sets through the sampled distance field.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::geometry::{ConstraintSet, GeometryError};
use crate::kvconfig::{KvError, KvFile};
use crate::problems::ProblemInstance;
use crate::spatial::KdTree;
use crate::subseed;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Softmin neighborhood size and temperature for the smoothed proximity
/// score behind the barrier method.
const SOFTMIN_K: usize = 32;
const SOFTMIN_TEMP: f64 = 0.05;
/// Gradient-norm clip keeping the large-penalty methods from stepping out
/// of floating-point range.
const GRAD_CLIP: f64 = 10.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub step: f64,
    pub penalty_mu: f64,
    pub al_rho: f64,
    pub barrier_mu0: f64,
    pub barrier_decay: f64,
    pub barrier_outer: usize,
    pub fd_spacing: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 500,
            step: 1e-2,
            penalty_mu: 1e3,
            al_rho: 10.0,
            barrier_mu0: 1.0,
            barrier_decay: 0.8,
            barrier_outer: 10,
            fd_spacing: 1e-2,
            restarts: 1,
            seed: 0,
        }
    }
}

impl SolverConfig {
    /// Per-method defaults. Projected gradient needs a coarser step than
    /// the others: the cloud projection quantizes tangential motion, so
    /// steps below the cloud spacing stall on curved boundaries.
    pub fn for_method(method: &str) -> SolverConfig {
        let mut cfg = SolverConfig::default();
        if method == "projected_gradient" {
            cfg.step = 0.1;
        }
        cfg
    }

    /// Override fields from `<prefix>.<key>` entries of a config file.
    pub fn apply_kv(&mut self, kv: &KvFile, prefix: &str) -> Result<(), KvError> {
        let key = |name: &str| format!("{prefix}.{name}");
        if let Some(v) = kv.usize(&key("max_iters"))? {
            self.max_iters = v;
        }
        if let Some(v) = kv.f64(&key("step"))? {
            self.step = v;
        }
        if let Some(v) = kv.f64(&key("penalty_mu"))? {
            self.penalty_mu = v;
        }
        if let Some(v) = kv.f64(&key("al_rho"))? {
            self.al_rho = v;
        }
        if let Some(v) = kv.f64(&key("barrier_mu0"))? {
            self.barrier_mu0 = v;
        }
        if let Some(v) = kv.f64(&key("barrier_decay"))? {
            self.barrier_decay = v;
        }
        if let Some(v) = kv.usize(&key("barrier_outer"))? {
            self.barrier_outer = v;
        }
        if let Some(v) = kv.f64(&key("fd_spacing"))? {
            self.fd_spacing = v;
        }
        if let Some(v) = kv.usize(&key("restarts"))? {
            self.restarts = v;
        }
        if let Some(v) = kv.u64(&key("seed"))? {
            self.seed = v;
        }
        Ok(())
    }
}

/// Shared sampled geometry for one constraint set.
pub struct ClassicContext {
    set: ConstraintSet,
    feasible: Arc<KdTree>,
    infeasible: Arc<KdTree>,
}

impl ClassicContext {
    pub fn new(set: &ConstraintSet) -> ClassicContext {
        ClassicContext {
            set: set.clone(),
            feasible: set.feasible_cloud(),
            infeasible: set.infeasible_cloud(),
        }
    }

    pub fn set(&self) -> &ConstraintSet {
        &self.set
    }

    fn distance(&self, y: &[f64]) -> f64 {
        if self.set.contains(y) {
            0.0
        } else {
            self.feasible.nearest_distance(y)
        }
    }

    /// Central finite differences of the squared sampled distance.
    fn grad_distance_sq(&self, y: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; y.len()];
        let mut probe = y.to_vec();
        for i in 0..y.len() {
            probe[i] = y[i] + h;
            let fp = self.distance(&probe).powi(2);
            probe[i] = y[i] - h;
            let fm = self.distance(&probe).powi(2);
            probe[i] = y[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// Scalar constraint functional c(y) = sampled distance (0 iff feasible).
    fn constraint_value(&self, y: &[f64]) -> f64 {
        self.distance(y)
    }

    fn grad_constraint(&self, y: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; y.len()];
        let mut probe = y.to_vec();
        for i in 0..y.len() {
            probe[i] = y[i] + h;
            let fp = self.distance(&probe);
            probe[i] = y[i] - h;
            let fm = self.distance(&probe);
            probe[i] = y[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// Smoothed proximity to the infeasible region: Boltzmann softmin over
    /// the 32 nearest infeasible-cloud points. Positive and differentiable.
    fn proximity(&self, y: &[f64]) -> f64 {
        let nn = self.infeasible.knn(y, SOFTMIN_K);
        let mut wsum = 0.0;
        let mut dsum = 0.0;
        let d0 = nn[0].0.sqrt();
        for (sq, _) in &nn {
            let d = sq.sqrt();
            let w = (-(d - d0) / SOFTMIN_TEMP).exp();
            wsum += w;
            dsum += w * d;
        }
        (dsum / wsum).max(1e-12)
    }

    fn grad_log_proximity(&self, y: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; y.len()];
        let mut probe = y.to_vec();
        for i in 0..y.len() {
            probe[i] = y[i] + h;
            let fp = self.proximity(&probe).ln();
            probe[i] = y[i] - h;
            let fm = self.proximity(&probe).ln();
            probe[i] = y[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    /// Deterministic feasible start for restart `r` of instance `index`.
    pub fn feasible_start(
        &self,
        cfg: &SolverConfig,
        index: usize,
        r: usize,
    ) -> Result<Vec<f64>, GeometryError> {
        let seed = subseed(cfg.seed, &format!("start|{}|{index}|{r}", self.set.id()));
        Ok(self.set.sample_feasible(1, seed)?.pop().unwrap())
    }

    /// Deterministic bounding-box start for restart `r` of instance `index`.
    pub fn box_start(&self, cfg: &SolverConfig, index: usize, r: usize) -> Vec<f64> {
        let seed = subseed(cfg.seed, &format!("box|{}|{index}|{r}", self.set.id()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = self.set.bounding_box();
        (0..self.set.ambient_dim())
            .map(|_| rng.random_range(lo..hi))
            .collect()
    }
}

fn clip(g: &mut [f64]) {
    let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > GRAD_CLIP {
        let s = GRAD_CLIP / n;
        for v in g.iter_mut() {
            *v *= s;
        }
    }
}

struct BestTracker {
    point: Option<Vec<f64>>,
    value: f64,
}

impl BestTracker {
    fn new() -> BestTracker {
        BestTracker {
            point: None,
            value: f64::INFINITY,
        }
    }

    fn offer(&mut self, feasible: bool, value: f64, y: &[f64]) {
        if feasible && value < self.value {
            self.value = value;
            self.point = Some(y.to_vec());
        }
    }
}

/// Gradient step then projection: infeasible iterates snap to the nearest
/// feasible-cloud point. Returns the best feasible iterate seen.
pub fn projected_gradient(
    ctx: &ClassicContext,
    instance: &ProblemInstance,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, f64), GeometryError> {
    let t0 = Instant::now();
    let f = &instance.objective;
    let mut best = BestTracker::new();
    for r in 0..cfg.restarts.max(1) {
        let mut y = ctx.feasible_start(cfg, instance.index, r)?;
        best.offer(true, f.eval(&y), &y);
        for _ in 0..cfg.max_iters {
            let mut g = f.grad(&y);
            clip(&mut g);
            for (yi, gi) in y.iter_mut().zip(&g) {
                *yi -= cfg.step * gi;
            }
            if !ctx.set.contains(&y) {
                let (idx, _) = ctx.feasible.nearest(&y);
                y = ctx.feasible.point(idx).to_vec();
            }
            best.offer(true, f.eval(&y), &y);
        }
    }
    // Feasible by construction; the tracker only ever saw members.
    let out = best.point.expect("projected gradient visits feasible points");
    debug_assert!(ctx.set.contains(&out));
    Ok((out, t0.elapsed().as_secs_f64() * 1e3))
}

/// Unconstrained descent on f + mu * distance², distance gradient by
/// central finite differences on the sampled field.
pub fn penalty_solve(
    ctx: &ClassicContext,
    instance: &ProblemInstance,
    cfg: &SolverConfig,
) -> (Vec<f64>, f64) {
    let t0 = Instant::now();
    let f = &instance.objective;
    let mut best = BestTracker::new();
    let mut last = Vec::new();
    for r in 0..cfg.restarts.max(1) {
        let mut y = ctx.box_start(cfg, instance.index, r);
        for _ in 0..cfg.max_iters {
            let mut g = f.grad(&y);
            if cfg.penalty_mu != 0.0 {
                let gp = ctx.grad_distance_sq(&y, cfg.fd_spacing);
                for (gi, pi) in g.iter_mut().zip(&gp) {
                    *gi += cfg.penalty_mu * pi;
                }
            }
            clip(&mut g);
            for (yi, gi) in y.iter_mut().zip(&g) {
                *yi -= cfg.step * gi;
            }
            best.offer(ctx.set.contains(&y), f.eval(&y), &y);
        }
        last = y;
    }
    let out = best.point.unwrap_or(last);
    (out, t0.elapsed().as_secs_f64() * 1e3)
}

/// Outcome details exposed for the dual-update contract.
pub struct AlOutcome {
    pub y: Vec<f64>,
    pub elapsed_ms: f64,
    pub lambda: f64,
    pub lambda_history: Vec<f64>,
}

/// Alternate inner descent on f + lambda c + (rho/2) c² with dual updates
/// lambda += rho * c(y); c is the sampled distance.
pub fn augmented_lagrangian_detailed(
    ctx: &ClassicContext,
    instance: &ProblemInstance,
    cfg: &SolverConfig,
) -> AlOutcome {
    let t0 = Instant::now();
    let f = &instance.objective;
    let outer = cfg.barrier_outer.max(1);
    let inner = (cfg.max_iters / outer).max(1);
    let mut best = BestTracker::new();
    let mut last = Vec::new();
    let mut lambda_final = 0.0;
    let mut lambda_history = Vec::new();
    for r in 0..cfg.restarts.max(1) {
        let mut y = ctx.box_start(cfg, instance.index, r);
        let mut lambda = 0.0f64;
        for _ in 0..outer {
            for _ in 0..inner {
                let c = ctx.constraint_value(&y);
                let mut g = f.grad(&y);
                if lambda != 0.0 || cfg.al_rho != 0.0 {
                    let gc = ctx.grad_constraint(&y, cfg.fd_spacing);
                    let w = lambda + cfg.al_rho * c;
                    for (gi, ci) in g.iter_mut().zip(&gc) {
                        *gi += w * ci;
                    }
                }
                clip(&mut g);
                for (yi, gi) in y.iter_mut().zip(&g) {
                    *yi -= cfg.step * gi;
                }
                best.offer(ctx.set.contains(&y), f.eval(&y), &y);
            }
            lambda += cfg.al_rho * ctx.constraint_value(&y);
            lambda_history.push(lambda);
        }
        lambda_final = lambda;
        last = y;
    }
    AlOutcome {
        y: best.point.unwrap_or(last),
        elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
        lambda: lambda_final,
        lambda_history,
    }
}

pub fn augmented_lagrangian(
    ctx: &ClassicContext,
    instance: &ProblemInstance,
    cfg: &SolverConfig,
) -> (Vec<f64>, f64) {
    let out = augmented_lagrangian_detailed(ctx, instance, cfg);
    (out.y, out.elapsed_ms)
}

/// Log-barrier method on the smoothed proximity score, annealing the
/// barrier coefficient each outer iteration. Iterates that exit the set are
/// rejected by step halving, so the method stays feasible throughout.
pub fn interior_point(
    ctx: &ClassicContext,
    instance: &ProblemInstance,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, f64), GeometryError> {
    let t0 = Instant::now();
    let f = &instance.objective;
    let outer = cfg.barrier_outer.max(1);
    let inner = (cfg.max_iters / outer).max(1);
    let mut best = BestTracker::new();
    for r in 0..cfg.restarts.max(1) {
        let mut y = ctx.feasible_start(cfg, instance.index, r)?;
        best.offer(true, f.eval(&y), &y);
        let mut mu = cfg.barrier_mu0;
        for _ in 0..outer {
            for _ in 0..inner {
                let mut g = f.grad(&y);
                if mu != 0.0 {
                    let gb = ctx.grad_log_proximity(&y, cfg.fd_spacing);
                    for (gi, bi) in g.iter_mut().zip(&gb) {
                        *gi -= mu * bi;
                    }
                }
                clip(&mut g);
                let mut step = cfg.step;
                for _ in 0..30 {
                    let trial: Vec<f64> =
                        y.iter().zip(&g).map(|(yi, gi)| yi - step * gi).collect();
                    if ctx.set.contains(&trial) {
                        y = trial;
                        break;
                    }
                    step *= 0.5;
                }
                best.offer(true, f.eval(&y), &y);
            }
            mu *= cfg.barrier_decay;
        }
    }
    let out = best.point.expect("interior point never leaves the set");
    debug_assert!(ctx.set.contains(&out));
    Ok((out, t0.elapsed().as_secs_f64() * 1e3))
}
