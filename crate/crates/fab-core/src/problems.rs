//! Parametric optimization instances (linear, quadratic, distance
//! minimization) over the constraint families, and the dense-search oracle
//! that grounds optimality gaps.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{flatten, ConstraintSet, GeometryError};
use crate::subseed;
use crate::tensor::dot;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("instance has no oracle solution attached")]
    MissingOracle,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveFamily {
    Linear,
    Quadratic,
    DistMin,
}

impl ObjectiveFamily {
    pub const ALL: [ObjectiveFamily; 3] = [
        ObjectiveFamily::Quadratic,
        ObjectiveFamily::Linear,
        ObjectiveFamily::DistMin,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            ObjectiveFamily::Linear => "linear",
            ObjectiveFamily::Quadratic => "quadratic",
            ObjectiveFamily::DistMin => "distmin",
        }
    }

    pub fn from_id(s: &str) -> Option<ObjectiveFamily> {
        match s {
            "linear" => Some(ObjectiveFamily::Linear),
            "quadratic" => Some(ObjectiveFamily::Quadratic),
            "distmin" | "dist_min" => Some(ObjectiveFamily::DistMin),
            _ => None,
        }
    }
}

/// One objective: a'y, y'Qy + a'y, or ‖y - t‖².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    Linear {
        a: Vec<f64>,
    },
    /// `q` is row-major d×d, symmetric positive definite by construction.
    Quadratic {
        q: Vec<f64>,
        a: Vec<f64>,
    },
    DistMin {
        t: Vec<f64>,
    },
}

impl Objective {
    pub fn family(&self) -> ObjectiveFamily {
        match self {
            Objective::Linear { .. } => ObjectiveFamily::Linear,
            Objective::Quadratic { .. } => ObjectiveFamily::Quadratic,
            Objective::DistMin { .. } => ObjectiveFamily::DistMin,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Objective::Linear { a } => a.len(),
            Objective::Quadratic { a, .. } => a.len(),
            Objective::DistMin { t } => t.len(),
        }
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            Objective::Linear { a } => dot(a, y),
            Objective::Quadratic { q, a } => {
                let d = a.len();
                let mut quad = 0.0;
                for i in 0..d {
                    let mut row = 0.0;
                    for j in 0..d {
                        row += q[i * d + j] * y[j];
                    }
                    quad += y[i] * row;
                }
                quad + dot(a, y)
            }
            Objective::DistMin { t } => y
                .iter()
                .zip(t)
                .map(|(yi, ti)| (yi - ti) * (yi - ti))
                .sum(),
        }
    }

    pub fn grad(&self, y: &[f64]) -> Vec<f64> {
        match self {
            Objective::Linear { a } => a.clone(),
            Objective::Quadratic { q, a } => {
                let d = a.len();
                let mut g = vec![0.0; d];
                for i in 0..d {
                    let mut s = 0.0;
                    for j in 0..d {
                        // Q symmetric: gradient is 2 Q y + a.
                        s += q[i * d + j] * y[j];
                    }
                    g[i] = 2.0 * s + a[i];
                }
                g
            }
            Objective::DistMin { t } => y.iter().zip(t).map(|(yi, ti)| 2.0 * (yi - ti)).collect(),
        }
    }

    /// Flattened parameters; the amortized solvers' input vector.
    pub fn solver_input(&self) -> Vec<f64> {
        match self {
            Objective::Linear { a } => a.clone(),
            Objective::Quadratic { q, a } => {
                let mut v = q.clone();
                v.extend_from_slice(a);
                v
            }
            Objective::DistMin { t } => t.clone(),
        }
    }

    pub fn solver_input_dim(family: ObjectiveFamily, d: usize) -> usize {
        match family {
            ObjectiveFamily::Linear => d,
            ObjectiveFamily::Quadratic => d * d + d,
            ObjectiveFamily::DistMin => d,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub objective: Objective,
    pub constraint_id: String,
    pub seed: u64,
    pub index: usize,
    pub oracle_point: Option<Vec<f64>>,
    pub oracle_value: Option<f64>,
}

impl ProblemInstance {
    pub fn oracle_value(&self) -> Result<f64, ProblemError> {
        self.oracle_value.ok_or(ProblemError::MissingOracle)
    }
}

/// Per-instance outcome: feasibility flag, wall time, objective value, and
/// gap against the oracle (reported for infeasible predictions too).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRecord {
    pub feasible: bool,
    pub time_ms: f64,
    pub value: f64,
    pub gap: f64,
}

/// Draw i.i.d. instances: a ~ N(0, I); Q = M'M + 1e-3 I with M entries
/// N(0,1)/sqrt(d); t ~ Uniform(bounding box).
pub fn generate_instances(
    set: &ConstraintSet,
    family: ObjectiveFamily,
    n: usize,
    seed: u64,
) -> Vec<ProblemInstance> {
    assert!(n >= 1);
    let d = set.ambient_dim();
    let tag = format!("instances|{}|{}", set.id(), family.id());
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(seed, &tag));
    let (lo, hi) = set.bounding_box();
    (0..n)
        .map(|index| {
            let objective = match family {
                ObjectiveFamily::Linear => Objective::Linear {
                    a: normal_vec(&mut rng, d, 1.0),
                },
                ObjectiveFamily::Quadratic => {
                    let m = normal_vec(&mut rng, d * d, 1.0 / (d as f64).sqrt());
                    let mut q = vec![0.0; d * d];
                    for i in 0..d {
                        for j in 0..d {
                            let mut s = 0.0;
                            for k in 0..d {
                                s += m[k * d + i] * m[k * d + j];
                            }
                            q[i * d + j] = s;
                        }
                    }
                    for i in 0..d {
                        q[i * d + i] += 1e-3;
                    }
                    Objective::Quadratic {
                        q,
                        a: normal_vec(&mut rng, d, 1.0),
                    }
                }
                ObjectiveFamily::DistMin => Objective::DistMin {
                    t: (0..d).map(|_| rng.random_range(lo..hi)).collect(),
                },
            };
            ProblemInstance {
                objective,
                constraint_id: set.id(),
                seed,
                index,
                oracle_point: None,
                oracle_value: None,
            }
        })
        .collect()
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let s: f64 = StandardNormal.sample(rng);
            s * scale
        })
        .collect()
}

const ORACLE_SAMPLES_2D: usize = 200_000;
const ORACLE_SAMPLES_HIGHD: usize = 500_000;
const ORACLE_GRID: usize = 200;
const ORACLE_REFINE_STEPS: usize = 200;
const ORACLE_SEED: u64 = 0x0AC1_E5EE;

/// Shared dense-search state for one constraint set: a feasible sample
/// cloud plus (in 2D) a feasible grid, reused across all instances.
pub struct SuiteContext {
    set: ConstraintSet,
    candidates: Vec<f64>,
    dim: usize,
}

impl SuiteContext {
    pub fn new(set: &ConstraintSet) -> Result<SuiteContext, ProblemError> {
        let d = set.ambient_dim();
        let n = if d == 2 {
            ORACLE_SAMPLES_2D
        } else {
            ORACLE_SAMPLES_HIGHD
        };
        let seed = subseed(ORACLE_SEED, &set.id());
        let mut candidates = flatten(&set.sample_feasible(n, seed)?);
        if d == 2 {
            let (lo, hi) = set.bounding_box();
            let step = (hi - lo) / (ORACLE_GRID - 1) as f64;
            for i in 0..ORACLE_GRID {
                for j in 0..ORACLE_GRID {
                    let p = [lo + i as f64 * step, lo + j as f64 * step];
                    if set.contains(&p) {
                        candidates.extend_from_slice(&p);
                    }
                }
            }
        }
        Ok(SuiteContext {
            set: set.clone(),
            candidates,
            dim: d,
        })
    }

    pub fn set(&self) -> &ConstraintSet {
        &self.set
    }

    /// Dense search over the candidate cloud followed by projected-gradient
    /// refinement with boundary rejection (infeasible or ascending steps are
    /// rejected by halving).
    pub fn oracle_solve(&self, instance: &ProblemInstance) -> (Vec<f64>, f64) {
        let d = self.dim;
        let f = &instance.objective;
        let mut best = self.candidates[0..d].to_vec();
        let mut best_val = f.eval(&best);
        for idx in 1..self.candidates.len() / d {
            let p = &self.candidates[idx * d..(idx + 1) * d];
            let v = f.eval(p);
            if v < best_val {
                best_val = v;
                best = p.to_vec();
            }
        }
        let (lo, hi) = self.set.bounding_box();
        let eta = 0.02 * (hi - lo);
        let mut y = best;
        let mut fy = best_val;
        for _ in 0..ORACLE_REFINE_STEPS {
            let g = f.grad(&y);
            let mut step = eta;
            for _ in 0..25 {
                let trial: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - step * gi).collect();
                if self.set.contains(&trial) {
                    let ft = f.eval(&trial);
                    if ft < fy {
                        y = trial;
                        fy = ft;
                        break;
                    }
                }
                step *= 0.5;
            }
        }
        (y, fy)
    }

    /// Instance with the oracle solution attached.
    pub fn with_oracle(&self, mut instance: ProblemInstance) -> ProblemInstance {
        let (p, v) = self.oracle_solve(&instance);
        instance.oracle_point = Some(p);
        instance.oracle_value = Some(v);
        instance
    }

    /// Membership + gap + timing for one prediction.
    pub fn evaluate(
        &self,
        instance: &ProblemInstance,
        y_pred: &[f64],
        elapsed_ms: f64,
    ) -> Result<BenchRecord, ProblemError> {
        let oracle = instance.oracle_value()?;
        let value = instance.objective.eval(y_pred);
        Ok(BenchRecord {
            feasible: self.set.contains(y_pred),
            time_ms: elapsed_ms,
            value,
            gap: value - oracle,
        })
    }
}

pub fn save_instances(path: &Path, instances: &[ProblemInstance]) -> Result<(), ProblemError> {
    let text = serde_json::to_string_pretty(instances)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_instances(path: &Path) -> Result<Vec<ProblemInstance>, ProblemError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
