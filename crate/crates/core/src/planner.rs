//! Cross-entropy-method planning over a forward model, the receding-horizon
//! control loop, and the greedy analytic pusher.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::correction::{closed_loop_update, template, CorrectionModel};
use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::repr::{ObjectDescriptor, Patch};
use crate::sim::{object_locations, render, step_push, PushAction, RasterMeta, Rect, SimConfig, Vec2, WorldState};

/// `Σ_n ||b_n − b_n^g||² + λ ||f_n − f_n^g||²` with `b` divided by the
/// raster size.
pub fn cost(state: &[ObjectDescriptor], goal: &[ObjectDescriptor], lambda: f64, grid: usize) -> Result<f64> {
    if state.len() != goal.len() {
        return Err(Error::ObjectCount {
            state: state.len(),
            goal: goal.len(),
        });
    }
    let g = grid as f64;
    let mut c = 0.0;
    for (x, y) in state.iter().zip(goal) {
        let db = (x.b - y.b) * (1.0 / g);
        let df: f64 = x.f.iter().zip(&y.f).map(|(a, b)| (a - b) * (a - b)).sum();
        c += db.dot(db) + lambda * df;
    }
    Ok(c)
}

/// Batched one-step dynamics over descriptor sets.
pub trait Dynamics: Sync {
    fn step_batch(&self, states: &[Vec<ObjectDescriptor>], actions: &[PushAction]) -> Result<Vec<Vec<ObjectDescriptor>>>;
}

impl Dynamics for ForwardModel {
    fn step_batch(&self, states: &[Vec<ObjectDescriptor>], actions: &[PushAction]) -> Result<Vec<Vec<ObjectDescriptor>>> {
        self.net.predict_batch(&self.params, states, actions)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CemConfig {
    pub samples: usize,
    pub elites: usize,
    pub horizon: usize,
    pub iterations: usize,
    pub lambda: f64,
    /// Displacement bound per step (world units).
    pub v_max: f64,
    pub sigma_start: f64,
    pub sigma_disp: f64,
    pub sigma_floor: f64,
    /// Evaluate rollouts on the rayon pool in fixed-size chunks.
    pub parallel: bool,
    pub chunk: usize,
    /// Minimum distance (world units) between a push start and the
    /// predicted object centers; 0 disables the projection.
    pub start_clearance: f64,
    /// Starts farther than this from every object are pulled in to this
    /// distance of the nearest one; 0 = off.
    pub start_reach: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            samples: 200,
            elites: 10,
            horizon: 5,
            iterations: 3,
            lambda: 1.0,
            v_max: 0.05,
            sigma_start: 0.2,
            sigma_disp: 0.03,
            sigma_floor: 1e-4,
            parallel: false,
            chunk: 50,
            start_clearance: 0.08,
            start_reach: 0.13,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.elites == 0 || self.elites > self.samples || self.horizon == 0 || self.iterations == 0 {
            return Err(Error::Invalid(format!(
                "CEM needs 0 < K ≤ S and positive H, τ (S={}, K={}, H={}, τ={})",
                self.samples, self.elites, self.horizon, self.iterations
            )));
        }
        Ok(())
    }
}

/// Diagonal Gaussian over `H × [start.x, start.y, Δx, Δy]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn initial(cfg: &CemConfig, start: Vec2) -> Self {
        let mut mean = Vec::with_capacity(cfg.horizon * 4);
        let mut std = Vec::with_capacity(cfg.horizon * 4);
        for _ in 0..cfg.horizon {
            mean.extend_from_slice(&[start.x, start.y, 0.0, 0.0]);
            std.extend_from_slice(&[cfg.sigma_start, cfg.sigma_start, cfg.sigma_disp, cfg.sigma_disp]);
        }
        GaussianPolicy { mean, std }
    }

    /// Drops the first step and repeats the last one's mean; stds reset.
    pub fn shifted(&self, cfg: &CemConfig) -> Self {
        let h = self.mean.len() / 4;
        let mut mean = self.mean[4.min(self.mean.len())..].to_vec();
        if h > 0 {
            mean.extend_from_slice(&self.mean[(h - 1) * 4..h * 4]);
        }
        let mut out = GaussianPolicy::initial(cfg, Vec2::ZERO);
        out.mean = mean;
        out
    }
}

/// Geometry the planner needs to keep actions valid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanContext {
    pub meta: RasterMeta,
    pub bounds: Rect,
}

impl PlanContext {
    pub fn from_sim(sim: &SimConfig) -> Self {
        PlanContext {
            meta: sim.raster_meta(),
            bounds: sim.bounds,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlanResult {
    pub actions: Vec<PushAction>,
    pub best_cost: f64,
    /// Costs of every sample, per iteration.
    pub iteration_costs: Vec<Vec<f64>>,
    /// Best cost seen up to and including each iteration.
    pub best_so_far: Vec<f64>,
    pub policy: GaussianPolicy,
}

fn action_from_params(p: &[f64], cfg: &CemConfig, bounds: Rect) -> PushAction {
    PushAction::clipped(Vec2::new(p[0], p[1]), Vec2::new(p[2], p[3]), cfg.v_max, bounds)
}

/// Moves `a` so its start lies within `start_reach` of the nearest object
/// center and keeps `start_clearance` from every one, preserving its
/// displacement (re-clipped to bounds).
fn clear_start(a: PushAction, centers: &[Vec2], cfg: &CemConfig, bounds: Rect) -> PushAction {
    let (clearance, reach) = (cfg.start_clearance, cfg.start_reach);
    if clearance <= 0.0 && reach <= 0.0 {
        return a;
    }
    let mut s = a.start;
    let nearest = centers.iter().copied().min_by(|p, q| p.dist(s).total_cmp(&q.dist(s)));
    if let Some(c) = nearest {
        let d = s.dist(c);
        if reach > 0.0 && d > reach {
            s = c + (s - c) * (reach / d);
        }
    }
    for &c in centers {
        let d = s - c;
        let n = d.norm();
        if n < clearance {
            let dir = if n > 1e-12 { d * (1.0 / n) } else { a.delta() * (-1.0 / a.length().max(1e-12)) };
            let dir = if dir.norm() > 0.5 { dir } else { Vec2::new(-1.0, 0.0) };
            s = c + dir * clearance;
        }
    }
    action_from_params(&[s.x, s.y, a.delta().x, a.delta().y], cfg, bounds)
}

/// Rolls every plan out through `model`, returning the final states. Plans
/// are rewritten in place when the start projection moves an action.
pub fn rollout_plans<D: Dynamics + ?Sized>(
    model: &D,
    current: &[ObjectDescriptor],
    plans: &mut [Vec<PushAction>],
    cfg: &CemConfig,
    ctx: &PlanContext,
) -> Result<Vec<Vec<ObjectDescriptor>>> {
    let run = |plans: &mut [Vec<PushAction>]| -> Result<Vec<Vec<ObjectDescriptor>>> {
        let mut states: Vec<Vec<ObjectDescriptor>> = vec![current.to_vec(); plans.len()];
        let h = plans.first().map_or(0, |p| p.len());
        for k in 0..h {
            let mut acts = Vec::with_capacity(plans.len());
            for (plan, st) in plans.iter_mut().zip(&states) {
                let centers: Vec<Vec2> = st.iter().map(|x| ctx.meta.pixel_to_world(x.b)).collect();
                plan[k] = clear_start(plan[k], &centers, cfg, ctx.bounds);
                acts.push(plan[k]);
            }
            states = model.step_batch(&states, &acts)?;
        }
        Ok(states)
    };
    if cfg.parallel && plans.len() > cfg.chunk {
        let parts: Vec<Result<Vec<Vec<ObjectDescriptor>>>> = plans.par_chunks_mut(cfg.chunk.max(1)).map(run).collect();
        let mut out = Vec::with_capacity(plans.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    } else {
        run(plans)
    }
}

/// CEM over action sequences. The returned sequence is the best one ever
/// evaluated.
pub fn cem_plan<D: Dynamics + ?Sized, R: Rng + ?Sized>(
    model: &D,
    current: &[ObjectDescriptor],
    goal: &[ObjectDescriptor],
    init: GaussianPolicy,
    cfg: &CemConfig,
    ctx: &PlanContext,
    rng: &mut R,
) -> Result<PlanResult> {
    cfg.validate()?;
    if current.len() != goal.len() {
        return Err(Error::ObjectCount {
            state: current.len(),
            goal: goal.len(),
        });
    }
    let dim = cfg.horizon * 4;
    let mut policy = init;
    let mut best: Option<(f64, Vec<PushAction>)> = None;
    let mut iteration_costs = Vec::with_capacity(cfg.iterations);
    let mut best_so_far = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut plans: Vec<Vec<PushAction>> = (0..cfg.samples)
            .map(|_| {
                (0..cfg.horizon)
                    .map(|k| {
                        let p: Vec<f64> = (0..4)
                            .map(|i| {
                                let z: f64 = rng.sample(StandardNormal);
                                policy.mean[k * 4 + i] + policy.std[k * 4 + i] * z
                            })
                            .collect();
                        action_from_params(&p, cfg, ctx.bounds)
                    })
                    .collect()
            })
            .collect();
        let finals = rollout_plans(model, current, &mut plans, cfg, ctx)?;
        let costs = finals
            .iter()
            .map(|s| cost(s, goal, cfg.lambda, ctx.meta.size))
            .collect::<Result<Vec<f64>>>()?;
        let mut order: Vec<usize> = (0..costs.len()).collect();
        order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
        let top = order[0];
        if best.as_ref().is_none_or(|(c, _)| costs[top] < *c) {
            best = Some((costs[top], plans[top].clone()));
        }
        best_so_far.push(best.as_ref().unwrap().0);

        let elites = &order[..cfg.elites];
        let params = |i: usize| -> Vec<f64> {
            plans[i]
                .iter()
                .flat_map(|a| [a.start.x, a.start.y, a.delta().x, a.delta().y])
                .collect()
        };
        let ep: Vec<Vec<f64>> = elites.iter().map(|&i| params(i)).collect();
        let k = ep.len() as f64;
        for d in 0..dim {
            let mean = ep.iter().map(|p| p[d]).sum::<f64>() / k;
            let var = ep.iter().map(|p| (p[d] - mean) * (p[d] - mean)).sum::<f64>() / k;
            policy.mean[d] = mean;
            policy.std[d] = var.sqrt().max(cfg.sigma_floor);
        }
        iteration_costs.push(costs);
    }
    let (best_cost, actions) = best.expect("at least one iteration");
    Ok(PlanResult {
        actions,
        best_cost,
        iteration_costs,
        best_so_far,
        policy,
    })
}

/// Greedy push of the object farthest from its goal, straight toward it.
/// Locations are in world units. Returns the push and the locations it
/// predicts (the pushed object moves with the gripper).
pub fn analytic_step(current: &[Vec2], goals: &[Vec2], sim: &SimConfig) -> (PushAction, Vec<Vec2>) {
    let far = (0..current.len()).max_by(|&a, &b| {
        current[a]
            .dist(goals[a])
            .total_cmp(&current[b].dist(goals[b]))
            .then(b.cmp(&a))
    });
    let Some(n) = far else {
        let c = sim.bounds.center();
        return (PushAction::new(c, c), Vec::new());
    };
    let c = current[n];
    let to_goal = goals[n] - c;
    let dist = to_goal.norm();
    if dist < 1e-12 {
        let s = sim.bounds.clamp(c);
        return (PushAction::new(s, s), current.to_vec());
    }
    let dir = to_goal * (1.0 / dist);
    let len = dist.min(sim.max_push);
    let start = sim.bounds.clamp(c - dir * (sim.object_radius + sim.gripper_radius));
    let action = PushAction::clipped(start, dir * len, sim.max_push, sim.bounds);
    let mut next = current.to_vec();
    next[n] = c + action.delta();
    (action, next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Learned interaction model with correction.
    Full,
    NoInteraction,
    NoCorrection,
    /// Ceiling run: the analytic pusher fed simulator locations every step.
    Oracle,
    /// Greedy analytic pusher tracking its own open-loop predictions.
    Analytic,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Full, Mode::NoInteraction, Mode::NoCorrection, Mode::Oracle, Mode::Analytic];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoInteraction => "no-interaction",
            Mode::NoCorrection => "no-correction",
            Mode::Oracle => "oracle",
            Mode::Analytic => "analytic",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?} (expected one of full, no-interaction, no-correction, oracle, analytic)"))
    }
}

/// Largest estimated object motion (pixels) that still counts as a missed
/// push, after which the next step plans from scratch.
const STALL_PIXELS: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct MpcConfig {
    pub steps: usize,
    pub cem: CemConfig,
    /// Replace location estimates with simulator ground truth each step.
    pub oracle: bool,
    pub warm_start: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            steps: 60,
            cem: CemConfig::default(),
            oracle: false,
            warm_start: true,
        }
    }
}

/// Models available to an episode; which ones are needed depends on the mode.
#[derive(Clone, Copy, Default)]
pub struct Models<'a> {
    pub full: Option<&'a ForwardModel>,
    pub no_interaction: Option<&'a ForwardModel>,
    pub correction: Option<&'a CorrectionModel>,
}

#[derive(Clone, Debug)]
pub struct StepLog {
    pub action: PushAction,
    /// World distance of each object to its goal after the push.
    pub distances: Vec<f64>,
    /// Estimated world locations the controller holds after the update.
    pub estimates: Vec<Vec2>,
    pub best_so_far: Vec<f64>,
    pub iteration_costs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub initial_distances: Vec<f64>,
    pub steps: Vec<StepLog>,
    pub final_world: WorldState,
}

impl EpisodeResult {
    /// Mean object distance before any push, then after each push.
    pub fn mean_curve(&self) -> Vec<f64> {
        let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len().max(1) as f64;
        std::iter::once(mean(&self.initial_distances))
            .chain(self.steps.iter().map(|s| mean(&s.distances)))
            .collect()
    }
}

fn distances(world: &WorldState, goal: &WorldState) -> Vec<f64> {
    world
        .objects
        .iter()
        .zip(&goal.objects)
        .map(|(a, b)| a.center.dist(b.center))
        .collect()
}

fn required<'a, T>(m: Option<&'a T>, what: &str) -> Result<&'a T> {
    m.ok_or_else(|| Error::Invalid(format!("mode needs a {what} model")))
}

/// Runs `cfg.steps` plan–execute–observe cycles from `world` toward
/// `goal`. Only the initial and goal locations are given to the controller.
pub fn mpc_episode(
    world: &WorldState,
    goal: &WorldState,
    mode: Mode,
    models: Models<'_>,
    sim: &SimConfig,
    cfg: &MpcConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    if world.n_objects() != goal.n_objects() {
        return Err(Error::ObjectCount {
            state: world.n_objects(),
            goal: goal.n_objects(),
        });
    }
    let meta = sim.raster_meta();
    let ctx = PlanContext::from_sim(sim);
    let oracle = cfg.oracle || mode == Mode::Oracle;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut world = world.clone();
    let goal_centers = goal.centers();
    let mut result = EpisodeResult {
        initial_distances: distances(&world, goal),
        steps: Vec::with_capacity(cfg.steps),
        final_world: world.clone(),
    };

    if matches!(mode, Mode::Analytic | Mode::Oracle) {
        let mut est = world.centers();
        for _ in 0..cfg.steps {
            let (action, predicted) = analytic_step(&est, &goal_centers, sim);
            world = step_push(&world, &action, sim);
            est = if oracle { world.centers() } else { predicted };
            result.steps.push(StepLog {
                action,
                distances: distances(&world, goal),
                estimates: est.clone(),
                best_so_far: Vec::new(),
                iteration_costs: Vec::new(),
            });
        }
        result.final_world = world;
        return Ok(result);
    }

    let forward = match mode {
        Mode::NoInteraction => required(models.no_interaction, "no-interaction forward")?,
        _ => required(models.full, "forward")?,
    };
    let correction = match mode {
        Mode::NoCorrection => None,
        _ if oracle => None,
        _ => Some(required(models.correction, "correction")?),
    };

    let goal_raster = render(goal, meta);
    let goal_desc = forward.describe(&goal_raster, &object_locations(goal, &meta))?;
    let obs = render(&world, meta);
    let locs0 = object_locations(&world, &meta);
    let w = forward.net.cfg.repr.window;
    let initial_patches: Vec<Patch> = locs0.iter().map(|&b| template(&obs, b, w)).collect();
    let mut descs = forward.describe(&obs, &locs0)?;

    let centroid = |d: &[ObjectDescriptor]| -> Vec2 {
        let s = d.iter().fold(Vec2::ZERO, |acc, x| acc + meta.pixel_to_world(x.b));
        s * (1.0 / d.len().max(1) as f64)
    };
    let mut policy = GaussianPolicy::initial(&cfg.cem, centroid(&descs));
    for _ in 0..cfg.steps {
        let plan = cem_plan(forward, &descs, &goal_desc, policy.clone(), &cfg.cem, &ctx, &mut rng)?;
        let before: Vec<Vec2> = descs.iter().map(|x| x.b).collect();
        let action = plan.actions[0];
        world = step_push(&world, &action, sim);
        let obs = render(&world, meta);
        descs = if oracle {
            forward.describe(&obs, &object_locations(&world, &meta))?
        } else {
            closed_loop_update(&descs, &action, &obs, &initial_patches, forward, correction)?
        };
        // a push that moved nothing means the plan missed; replan from scratch
        let moved = descs.iter().zip(&before).any(|(x, b)| x.b.dist(*b) > STALL_PIXELS);
        policy = if cfg.warm_start && moved {
            GaussianPolicy {
                mean: plan.actions.iter().flat_map(|a| [a.start.x, a.start.y, a.delta().x, a.delta().y]).collect(),
                std: Vec::new(),
            }
            .shifted(&cfg.cem)
        } else {
            GaussianPolicy::initial(&cfg.cem, centroid(&descs))
        };
        result.steps.push(StepLog {
            action,
            distances: distances(&world, goal),
            estimates: descs.iter().map(|x| meta.pixel_to_world(x.b)).collect(),
            best_so_far: plan.best_so_far,
            iteration_costs: plan.iteration_costs,
        });
    }
    result.final_world = world;
    Ok(result)
}
