//! Evaluation scenes, multi-seed experiment runs, forward-model quality
//! metrics and CSV emission.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::correction::{closed_loop_update, template, CorrectionModel};
use crate::dataset::{episode_seed, PushRecord};
use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::planner::{mpc_episode, EpisodeResult, Mode, Models, MpcConfig};
use crate::repr::Patch;
use crate::sim::{Object, SimConfig, Vec2, WorldState, PALETTE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    /// One object, goal far away, nothing in between.
    Free,
    /// A second object sits on the straight path to the goal and should
    /// stay where it is.
    Hard,
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Free => "free-1obj",
            SceneKind::Hard => "hard-2obj",
        }
    }
}

impl std::fmt::Display for SceneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SceneKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "free-1obj" | "free" => Ok(SceneKind::Free),
            "hard-2obj" | "hard" => Ok(SceneKind::Hard),
            other => Err(format!("unknown scene {other:?} (expected free-1obj or hard-2obj)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub start: WorldState,
    pub goal: WorldState,
}

fn disc(center: Vec2, sim: &SimConfig, color: usize) -> Object {
    Object {
        center,
        radius: sim.object_radius,
        color,
    }
}

/// Start/goal pair for the pushed object, `distance` apart, both inside the
/// table shrunk by `margin`.
fn start_goal<R: Rng + ?Sized>(rng: &mut R, sim: &SimConfig, distance: f64, margin: f64) -> Result<(Vec2, Vec2)> {
    let inner = sim.bounds.shrink(margin);
    for _ in 0..1000 {
        let s = Vec2::new(
            rng.random_range(inner.min.x..inner.max.x),
            rng.random_range(inner.min.y..inner.max.y),
        );
        let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let g = s + Vec2::new(th.cos(), th.sin()) * distance;
        if inner.contains(g) {
            return Ok((s, g));
        }
    }
    Err(Error::Placement {
        n_objects: 1,
        tries: 1000,
    })
}

/// Builds the evaluation scene for `seed`. `distance` is the start–goal
/// distance of the pushed object.
pub fn make_scene(kind: SceneKind, seed: u64, distance: f64, sim: &SimConfig) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, kind as u64 + 17));
    let color = rng.random_range(0..PALETTE.len());
    let (s, g) = start_goal(&mut rng, sim, distance, sim.object_radius + 0.02)?;
    let (start, goal) = match kind {
        SceneKind::Free => (vec![disc(s, sim, color)], vec![disc(g, sim, color)]),
        SceneKind::Hard => {
            let t: f64 = rng.random_range(0.4..0.6);
            let dir = (g - s) * (1.0 / distance);
            let normal = Vec2::new(-dir.y, dir.x);
            let off: f64 = rng.random_range(-0.25..0.25) * sim.object_radius;
            let blocker = s + (g - s) * t + normal * off;
            let other = (color + 1 + rng.random_range(0..PALETTE.len() - 1)) % PALETTE.len();
            (
                vec![disc(s, sim, color), disc(blocker, sim, other)],
                vec![disc(g, sim, color), disc(blocker, sim, other)],
            )
        }
    };
    let scene = Scene {
        start: WorldState {
            objects: start,
            bounds: sim.bounds,
        },
        goal: WorldState {
            objects: goal,
            bounds: sim.bounds,
        },
    };
    scene.start.validate().map_err(Error::Invalid)?;
    scene.goal.validate().map_err(Error::Invalid)?;
    Ok(scene)
}

/// One evaluated episode.
#[derive(Clone, Debug)]
pub struct EpisodeRun {
    pub mode: Mode,
    pub seed: u64,
    pub result: EpisodeResult,
}

/// Runs `mode` on the scenes of every seed, fanning seeds out over the
/// rayon pool when `parallel` is set. Output follows `seeds` order.
pub fn run_episodes(
    kind: SceneKind,
    mode: Mode,
    seeds: &[u64],
    models: Models<'_>,
    sim: &SimConfig,
    mpc: &MpcConfig,
    distance: f64,
    parallel: bool,
) -> Result<Vec<EpisodeRun>> {
    let one = |&seed: &u64| -> Result<EpisodeRun> {
        let scene = make_scene(kind, seed, distance, sim)?;
        let result = mpc_episode(&scene.start, &scene.goal, mode, models, sim, mpc, seed)?;
        Ok(EpisodeRun { mode, seed, result })
    };
    if parallel {
        seeds.par_iter().map(one).collect()
    } else {
        seeds.iter().map(one).collect()
    }
}

/// Mean over episodes of the per-step mean distance.
pub fn mean_curve(runs: &[EpisodeRun]) -> Vec<f64> {
    let curves: Vec<Vec<f64>> = runs.iter().map(|r| r.result.mean_curve()).collect();
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|t| curves.iter().map(|c| c[t]).sum::<f64>() / curves.len() as f64)
        .collect()
}

/// Least-squares slope of `ys` against their index.
pub fn trend_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        num += dx * (y - my);
        den += dx * dx;
    }
    num / den
}

pub const DISTANCE_CSV_HEADER: &str = "episode,step,object,distance,mode,seed";

/// Per-step, per-object distance rows. Step 0 is the state before any push.
pub fn distance_rows(runs: &[EpisodeRun], out: &mut String) {
    for (e, run) in runs.iter().enumerate() {
        let mut emit = |step: usize, ds: &[f64]| {
            for (n, d) in ds.iter().enumerate() {
                writeln!(out, "{e},{step},{n},{d},{},{}", run.mode, run.seed).unwrap();
            }
        };
        emit(0, &run.result.initial_distances);
        for (t, s) in run.result.steps.iter().enumerate() {
            emit(t + 1, &s.distances);
        }
    }
}

pub const CURVE_CSV_HEADER: &str = "mode,step,mean_distance,episodes";

pub fn curve_rows(mode: Mode, runs: &[EpisodeRun], out: &mut String) {
    for (t, d) in mean_curve(runs).iter().enumerate() {
        writeln!(out, "{mode},{t},{d},{}", runs.len()).unwrap();
    }
}

pub const CEM_CSV_HEADER: &str = "episode,step,iteration,sample,cost,best_so_far";

pub fn cem_rows(runs: &[EpisodeRun], out: &mut String) {
    for (e, run) in runs.iter().enumerate() {
        for (t, s) in run.result.steps.iter().enumerate() {
            for (i, costs) in s.iteration_costs.iter().enumerate() {
                for (k, c) in costs.iter().enumerate() {
                    writeln!(out, "{e},{t},{i},{k},{c},{}", s.best_so_far[i]).unwrap();
                }
            }
        }
    }
}

/// Groups records into episodes in step order. Episode ids are only unique
/// within one dataset file.
pub fn episodes(records: &[PushRecord]) -> Vec<Vec<&PushRecord>> {
    let mut map: std::collections::BTreeMap<u32, Vec<&PushRecord>> = Default::default();
    for r in records {
        map.entry(r.episode_id).or_default().push(r);
    }
    map.into_values()
        .map(|mut v| {
            v.sort_by_key(|r| r.step_id);
            v
        })
        .collect()
}

/// Mean pixel error of pure model rollouts after `h` recorded pushes, over
/// every window start `t0` of every episode that fits.
pub fn open_loop_error(model: &ForwardModel, episodes: &[Vec<&PushRecord>], h: usize, stride: usize) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for ep in episodes {
        let mut t0 = 0;
        while t0 + h <= ep.len() {
            let r0 = ep[t0];
            let descs = model.describe(&r0.raster_before, &r0.locs_before)?;
            let actions: Vec<_> = ep[t0..t0 + h].iter().map(|r| r.action).collect();
            let out = model.rollout(&descs, &actions)?;
            for (x, &gt) in out.iter().zip(&ep[t0 + h - 1].locs_after) {
                sum += x.b.dist(gt);
                n += 1;
            }
            t0 += stride.max(1);
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Mean pixel location error over the first `steps` pushes of each episode
/// when tracking with `closed_loop_update`, with or without correction.
pub fn tracking_error(
    model: &ForwardModel,
    correction: Option<&CorrectionModel>,
    episodes: &[Vec<&PushRecord>],
    steps: usize,
) -> Result<f64> {
    let w = model.net.cfg.repr.window;
    let (mut sum, mut n) = (0.0, 0usize);
    for ep in episodes {
        let r0 = ep[0];
        let init: Vec<Patch> = r0.locs_before.iter().map(|&b| template(&r0.raster_before, b, w)).collect();
        let mut descs = model.describe(&r0.raster_before, &r0.locs_before)?;
        for r in ep.iter().take(steps) {
            descs = closed_loop_update(&descs, &r.action, &r.raster_after, &init, model, correction)?;
            for (x, &gt) in descs.iter().zip(&r.locs_after) {
                sum += x.b.dist(gt);
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
