//! Experiment configuration: every tunable in one struct, read from
//! `section.key = value` lines and overridable from the command line.
//!
//! ```text
//! # comments start with '#'
//! cem.samples = 200
//! eval.modes = full,analytic
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::correction::{CorrectionConfig, CorrectionTrainConfig};
use crate::dataset::CollectConfig;
use crate::error::{Error, Result};
use crate::eval::SceneKind;
use crate::forward::{ForwardConfig, TrainConfig};
use crate::planner::{Mode, MpcConfig};
use crate::sim::SimConfig;

pub const CONFIG_ENV: &str = "PUSHPLAN_CONFIG";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub mode: Mode,
    pub modes: Vec<Mode>,
    pub scene: SceneKind,
    /// Seeds `seed_base .. seed_base + seeds`.
    pub seeds: usize,
    pub seed_base: u64,
    /// Start-to-goal distance of the pushed object, world units.
    pub distance: f64,
    /// Episodes fan out over the thread pool.
    pub parallel: bool,
    pub success_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: Mode::Full,
            modes: vec![Mode::Full, Mode::Analytic, Mode::NoInteraction, Mode::NoCorrection],
            scene: SceneKind::Free,
            seeds: 20,
            seed_base: 0,
            distance: 0.75,
            parallel: false,
            success_threshold: 0.05,
        }
    }
}

impl EvalConfig {
    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.seed_base + i).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub forward: PathBuf,
    pub no_interaction: PathBuf,
    pub correction: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            forward: "runs/forward.ckpt".into(),
            no_interaction: "runs/forward-nointer.ckpt".into(),
            correction: "runs/correction.ckpt".into(),
            out: "runs/out".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub data: CollectConfig,
    pub forward: ForwardConfig,
    pub train: TrainConfig,
    pub correction: CorrectionConfig,
    pub correction_train: CorrectionTrainConfig,
    pub mpc: MpcConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

type Getter = fn(&ExperimentConfig) -> String;
type Setter = fn(&mut ExperimentConfig, &str) -> std::result::Result<(), String>;

pub struct Field {
    pub key: &'static str,
    pub doc: &'static str,
    get: Getter,
    set: Setter,
}

fn parse<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse::<T>().map_err(|e| format!("bad value {v:?}: {e}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(format!("bad boolean {other:?}")),
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    let items: Vec<T> = v
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(parse)
        .collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

macro_rules! field {
    ($key:literal, $doc:literal, $($p:ident).+) => {
        Field {
            key: $key,
            doc: $doc,
            get: |c| c.$($p).+.to_string(),
            set: |c, v| {
                c.$($p).+ = parse(v)?;
                Ok(())
            },
        }
    };
    ($key:literal, $doc:literal, bool $($p:ident).+) => {
        Field {
            key: $key,
            doc: $doc,
            get: |c| c.$($p).+.to_string(),
            set: |c, v| {
                c.$($p).+ = parse_bool(v)?;
                Ok(())
            },
        }
    };
    ($key:literal, $doc:literal, list $($p:ident).+) => {
        Field {
            key: $key,
            doc: $doc,
            get: |c| join(&c.$($p).+),
            set: |c, v| {
                c.$($p).+ = parse_list(v)?;
                Ok(())
            },
        }
    };
    ($key:literal, $doc:literal, path $($p:ident).+) => {
        Field {
            key: $key,
            doc: $doc,
            get: |c| c.$($p).+.display().to_string(),
            set: |c, v| {
                c.$($p).+ = PathBuf::from(v.trim());
                Ok(())
            },
        }
    };
}

/// Every configurable key, in file order.
pub fn fields() -> Vec<Field> {
    vec![
        field!("sim.grid", "raster side G in pixels", sim.grid),
        field!("sim.object_radius", "disc radius r, world units (table is the unit square)", sim.object_radius),
        field!("sim.gripper_radius", "gripper radius r_g", sim.gripper_radius),
        field!("sim.max_push", "push length bound L_max", sim.max_push),
        field!("sim.substeps", "gripper sweep substeps M", sim.substeps),
        field!("sim.separation_iters", "object-object separation passes per substep", sim.separation_iters),
        field!("sim.mid_noise", "std-dev of random push mid-points around the object center", sim.mid_noise),
        field!("sim.ring_inner", "inner half-size of the square ring push starts are drawn from", sim.ring_inner),
        field!("sim.ring_outer", "outer half-size of that ring", sim.ring_outer),
        field!("data.episodes", "collected episodes (before the train/val split)", data.episodes),
        field!("data.steps", "pushes per episode", data.steps),
        field!("data.n_objects", "object counts cycled over episodes", list data.n_objects),
        field!("data.seed", "collection seed", data.seed),
        field!("data.train_ratio", "fraction of episodes kept for training", data.train_ratio),
        field!("data.test_episodes", "episodes in each held-out test set", data.test_episodes),
        field!("data.scatter", "side of the square initial objects are scattered in", data.scatter),
        field!("data.free_push_prob", "fraction of untargeted pushes of random length", data.free_push_prob),
        field!("repr.window", "crop window W in pixels", forward.repr.window),
        field!("repr.feature_dim", "feature dimension d", forward.repr.feature_dim),
        field!("repr.hidden", "encoder/decoder hidden width", forward.repr.hidden),
        field!("forward.hidden", "interaction net hidden width", forward.hidden),
        field!("forward.rounds", "message-passing rounds R", forward.rounds),
        field!("forward.rel_scale", "scale on relative edge geometry", forward.rel_scale),
        field!("forward.interaction", "object-object messages; false trains the ablation model", bool forward.interaction),
        field!("train.lr", "Adam learning rate", train.lr),
        field!("train.batch_size", "records per batch", train.batch_size),
        field!("train.epochs", "training epochs", train.epochs),
        field!("train.seed", "init and shuffle seed", train.seed),
        field!("train.w_recon", "weight of the reconstruction loss", train.weights.recon),
        field!("train.w_pred_pixel", "weight of the predicted-image loss", train.weights.pred_pixel),
        field!("train.w_pred_state", "weight of the predicted-state loss", train.weights.pred_state),
        field!("train.w_location", "multiplier on location residuals inside the state loss", train.weights.location),
        field!("train.chunk_records", "records per streamed chunk", train.chunk_records),
        field!("train.val_limit", "validation records scored per epoch, 0 = all", train.val_limit),
        field!("correction.window", "correction window side", correction.window),
        field!("correction.hidden", "correction hidden width", correction.hidden),
        field!("correction.jitter", "training jitter half-width j, pixels", correction.jitter),
        field!("correction.lr", "Adam learning rate", correction_train.lr),
        field!("correction.batch_size", "samples per batch", correction_train.batch_size),
        field!("correction.epochs", "training epochs", correction_train.epochs),
        field!("correction.seed", "init, jitter and shuffle seed", correction_train.seed),
        field!("correction.chunk_episodes", "episodes per streamed chunk", correction_train.chunk_episodes),
        field!("cem.samples", "samples per iteration S", mpc.cem.samples),
        field!("cem.elites", "elites K", mpc.cem.elites),
        field!("cem.horizon", "planning horizon H", mpc.cem.horizon),
        field!("cem.iterations", "iterations per plan", mpc.cem.iterations),
        field!("cem.lambda", "feature-cost weight", mpc.cem.lambda),
        field!("cem.v_max", "displacement bound per step", mpc.cem.v_max),
        field!("cem.sigma_start", "initial std of push starts", mpc.cem.sigma_start),
        field!("cem.sigma_disp", "initial std of displacements", mpc.cem.sigma_disp),
        field!("cem.sigma_floor", "lower bound on refit stds", mpc.cem.sigma_floor),
        field!("cem.parallel", "evaluate rollouts on the thread pool", bool mpc.cem.parallel),
        field!("cem.chunk", "rollouts per parallel chunk", mpc.cem.chunk),
        field!("cem.start_clearance", "minimum start-to-object distance inside rollouts, 0 = off", mpc.cem.start_clearance),
        field!("cem.start_reach", "pull rollout starts within this distance of the nearest object, 0 = off", mpc.cem.start_reach),
        field!("mpc.steps", "pushes per episode T", mpc.steps),
        field!("mpc.oracle", "re-describe at simulator locations each step", bool mpc.oracle),
        field!("mpc.warm_start", "seed each plan with the previous one, shifted", bool mpc.warm_start),
        field!("eval.mode", "mode for plan", eval.mode),
        field!("eval.modes", "modes compared by evaluate and ablate", list eval.modes),
        field!("eval.scene", "free-1obj or hard-2obj", eval.scene),
        field!("eval.seeds", "number of evaluation seeds", eval.seeds),
        field!("eval.seed_base", "first evaluation seed", eval.seed_base),
        field!("eval.distance", "start-to-goal distance of the pushed object", eval.distance),
        field!("eval.parallel", "run episodes on the thread pool", bool eval.parallel),
        field!("eval.success_threshold", "distance counted as success", eval.success_threshold),
        field!("paths.data_dir", "dataset directory", path paths.data_dir),
        field!("paths.forward", "forward checkpoint", path paths.forward),
        field!("paths.no_interaction", "no-interaction forward checkpoint", path paths.no_interaction),
        field!("paths.correction", "correction checkpoint", path paths.correction),
        field!("paths.out", "output directory", path paths.out),
    ]
}

impl ExperimentConfig {
    /// Sets one key. `line` is reported in errors (0 for command-line
    /// overrides).
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let f = fields().into_iter().find(|f| f.key == key).ok_or_else(|| Error::Config {
            line,
            msg: format!("unknown key {key:?}"),
        })?;
        (f.set)(self, value).map_err(|msg| Error::Config {
            line,
            msg: format!("{key}: {msg}"),
        })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        fields().into_iter().find(|f| f.key == key).map(|f| (f.get)(self))
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim(), i + 1)?;
        }
        self.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing { path: path.into() }
            } else {
                Error::io(path, e)
            }
        })?;
        Self::parse_str(&text)
    }

    /// `--section.key=value` overrides, applied in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let body = o.strip_prefix("--").unwrap_or(o);
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Config {
                line: 0,
                msg: format!("override {o:?} is not --section.key=value"),
            })?;
            self.set(k, v, 0)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config { line: 0, msg });
        self.mpc.cem.validate()?;
        if self.sim.grid == 0 || self.forward.repr.window == 0 || self.correction.window == 0 {
            return bad("grid and windows must be positive".into());
        }
        if self.sim.object_radius <= 0.0 || self.sim.gripper_radius <= 0.0 || self.sim.max_push <= 0.0 {
            return bad("radii and max_push must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.data.train_ratio) {
            return bad(format!("data.train_ratio {} outside [0, 1]", self.data.train_ratio));
        }
        if self.train.batch_size == 0 || self.correction_train.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.correction.jitter <= 0.0 {
            return bad("correction.jitter must be positive".into());
        }
        Ok(())
    }

    /// Full `key = value` listing, loadable by [`ExperimentConfig::parse_str`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for f in fields() {
            writeln!(out, "# {}", f.doc).unwrap();
            writeln!(out, "{} = {}", f.key, (f.get)(self)).unwrap();
        }
        out
    }

    /// Writes `config.txt` into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::io::write_atomic(&dir.join("config.txt"), self.to_text().as_bytes())
    }
}
