//! Location correction: given the object's appearance in the first frame
//! and a window of the new observation around a predicted location, regress
//! the offset that re-centers the window on the object.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check, Activation, Adam, AdamConfig, GradCheckReport, Linear, Mlp, ParamStore, Tape, Tensor, Var};
use crate::dataset::{shuffled_chunks, PushRecord, RecordSource};
use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::repr::{crop_subpixel, ObjectDescriptor, Patch};
use crate::sim::{PushAction, Raster, Vec2};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectionConfig {
    pub window: usize,
    pub hidden: usize,
    /// Training jitter half-width `j` in pixels; also the output scale.
    pub jitter: f64,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            window: 16,
            hidden: 64,
            jitter: 4.0,
        }
    }
}

/// Regression target for a location displaced by `jitter`.
pub fn jitter_target(jitter: Vec2) -> Vec2 {
    jitter * -1.0
}

#[derive(Clone, Debug)]
pub struct CorrectionNet {
    pub cfg: CorrectionConfig,
    hidden: Mlp,
    out: Linear,
}

impl CorrectionNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: CorrectionConfig, rng: &mut R) -> Self {
        let w = cfg.window;
        CorrectionNet {
            cfg,
            hidden: Mlp::new(store, "corr", &[2 * w * w * 3, cfg.hidden], Activation::Relu, rng),
            out: Linear::zeros(store, "corr.out", cfg.hidden, 2),
        }
    }

    /// `[M, 2·W²·3]` (initial patch, current patch) → `[M, 2]` offsets in
    /// units of `jitter` pixels.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        self.out.forward(tape, store, h)
    }
}

fn pair_row(initial: &Patch, current: &Patch, out: &mut Vec<f64>) {
    out.extend(initial.pixels.iter().map(|&v| v as f64));
    out.extend(current.pixels.iter().map(|&v| v as f64));
}

#[derive(Clone, Debug)]
pub struct CorrectionModel {
    pub net: CorrectionNet,
    pub params: ParamStore,
}

impl CorrectionModel {
    pub fn new(cfg: CorrectionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = CorrectionNet::new(&mut params, cfg, &mut rng);
        CorrectionModel { net, params }
    }

    /// Offsets for a batch of (initial patch, observed raster, predicted
    /// location) triples. Initial patches come from [`template`].
    pub fn offsets(&self, items: &[(&Patch, &Raster, Vec2)]) -> Result<Vec<Vec2>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let w = self.net.cfg.window;
        let mut data = Vec::with_capacity(items.len() * 2 * w * w * 3);
        for (init, obs, b) in items {
            pair_row(init, &crop_subpixel(obs, *b, w), &mut data);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(items.len(), 2 * w * w * 3, data));
        let y = self.net.forward(&mut tape, &self.params, x)?;
        let y = tape.value(y);
        let j = self.net.cfg.jitter;
        Ok((0..items.len()).map(|i| Vec2::new(y.row(i)[0] * j, y.row(i)[1] * j)).collect())
    }

    /// `predicted_b + Δb`, clamped to the raster.
    pub fn correct(&self, initial: &Patch, observed: &Raster, predicted_b: Vec2) -> Result<Vec2> {
        let db = self.offsets(&[(initial, observed, predicted_b)])?[0];
        Ok(clamp_to_raster(predicted_b + db, observed.size()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.net.cfg;
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "correction".to_string());
        meta.insert("window".to_string(), c.window.to_string());
        meta.insert("hidden".to_string(), c.hidden.to_string());
        meta.insert("jitter".to_string(), c.jitter.to_string());
        self.params.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (stored, meta) = ParamStore::load(path)?;
        let bad = |msg: &str| Error::Checkpoint {
            path: path.into(),
            msg: msg.to_string(),
        };
        if meta.get("kind").map(String::as_str) != Some("correction") {
            return Err(bad("not a correction checkpoint"));
        }
        let num = |k: &str| -> Result<f64> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(&format!("missing or bad meta {k}")))
        };
        let cfg = CorrectionConfig {
            window: num("window")? as usize,
            hidden: num("hidden")? as usize,
            jitter: num("jitter")?,
        };
        let mut m = CorrectionModel::new(cfg, 0);
        m.params.load_values_from(&stored)?;
        Ok(m)
    }
}

/// Appearance template of an object at its known location.
pub fn template(raster: &Raster, b: Vec2, w: usize) -> Patch {
    crop_subpixel(raster, b, w)
}

pub fn clamp_to_raster(b: Vec2, size: usize) -> Vec2 {
    let g = size as f64;
    Vec2::new(b.x.clamp(0.0, g), b.y.clamp(0.0, g))
}

/// One training example: template, observation, jittered location, target.
#[derive(Clone, Debug)]
struct Sample {
    row: Vec<f64>,
    target: Vec2,
}

/// Builds jittered examples from records, using the first frame of each
/// episode present in `recs` as the template source.
fn samples<R: Rng + ?Sized>(recs: &[PushRecord], cfg: &CorrectionConfig, rng: &mut R) -> Vec<Sample> {
    let mut first: BTreeMap<u32, &PushRecord> = BTreeMap::new();
    for r in recs {
        let e = first.entry(r.episode_id).or_insert(r);
        if r.step_id < e.step_id {
            *e = r;
        }
    }
    let w = cfg.window;
    let j = cfg.jitter;
    let mut out = Vec::new();
    for r in recs {
        let f = first[&r.episode_id];
        for (n, &gt) in r.locs_after.iter().enumerate() {
            let init = crop_subpixel(&f.raster_before, f.locs_before[n], w);
            let jitter = Vec2::new(rng.random_range(-j..=j), rng.random_range(-j..=j));
            let cur = crop_subpixel(&r.raster_after, gt + jitter, w);
            let mut row = Vec::with_capacity(2 * w * w * 3);
            pair_row(&init, &cur, &mut row);
            out.push(Sample {
                row,
                target: jitter_target(jitter) * (1.0 / j),
            });
        }
    }
    out
}

fn batch_loss(net: &CorrectionNet, tape: &mut Tape, store: &ParamStore, batch: &[&Sample]) -> Result<Var> {
    let w = net.cfg.window;
    let x = tape.constant(Tensor::matrix(
        batch.len(),
        2 * w * w * 3,
        batch.iter().flat_map(|s| s.row.iter().copied()).collect(),
    ));
    let y = tape.constant(Tensor::matrix(
        batch.len(),
        2,
        batch.iter().flat_map(|s| [s.target.x, s.target.y]).collect(),
    ));
    let p = net.forward(tape, store, x)?;
    tape.mse(p, y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrectionTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Chunk size when streaming; rounded to whole episodes of this length.
    pub episode_len: u64,
    pub chunk_episodes: u64,
}

impl Default for CorrectionTrainConfig {
    fn default() -> Self {
        CorrectionTrainConfig {
            lr: 1e-3,
            batch_size: 64,
            epochs: 4,
            seed: 0,
            episode_len: 60,
            chunk_episodes: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrectionLog {
    pub epoch: usize,
    /// Per-axis mean squared error in pixels².
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Per-axis validation MSE in pixels² on a fixed jittered draw.
pub fn validation_mse(model: &CorrectionModel, val: &[PushRecord], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = samples(val, &model.net.cfg, &mut rng);
    if s.is_empty() {
        return Ok(0.0);
    }
    let j = model.net.cfg.jitter;
    let mut total = 0.0;
    for chunk in s.chunks(256) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let l = batch_loss(&model.net, &mut tape, &model.params, &refs)?;
        total += tape.value(l).item() * chunk.len() as f64;
    }
    Ok(total / s.len() as f64 * j * j)
}

pub fn train_correction(
    model: &mut CorrectionModel,
    train: &mut dyn RecordSource,
    val: &[PushRecord],
    cfg: &CorrectionTrainConfig,
    mut on_epoch: impl FnMut(&CorrectionLog),
) -> Result<Vec<CorrectionLog>> {
    if train.n_records() == 0 {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_seed = cfg.seed ^ 0x5EED;
    let net = model.net.clone();
    let j2 = net.cfg.jitter * net.cfg.jitter;
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut logs = Vec::new();
    let v0 = validation_mse(model, val, val_seed)?;
    logs.push(CorrectionLog {
        epoch: 0,
        train_mse: v0,
        val_mse: v0,
    });
    on_epoch(&logs[0]);
    let mut best = (v0, model.params.clone());
    let chunk = cfg.episode_len.max(1) * cfg.chunk_episodes.max(1);
    for epoch in 1..=cfg.epochs {
        let (mut sum, mut count, mut batch_idx) = (0.0, 0usize, 0usize);
        for (start, end) in shuffled_chunks(train.n_records(), chunk, &mut rng) {
            let store = &mut model.params;
            let rng = &mut rng;
            train.visit(start, end, &mut |recs| {
                let mut s = samples(recs, &net.cfg, rng);
                s.shuffle(rng);
                for b in s.chunks(cfg.batch_size.max(1)) {
                    let refs: Vec<&Sample> = b.iter().collect();
                    let mut tape = Tape::new();
                    let l = batch_loss(&net, &mut tape, store, &refs)?;
                    let lv = tape.value(l).item();
                    if !lv.is_finite() {
                        return Err(Error::NonFinite {
                            epoch,
                            batch: batch_idx,
                            terms: format!("correction mse {lv}"),
                        });
                    }
                    let g = tape.backward(l);
                    store.zero_grad();
                    store.accumulate(&tape, &g);
                    adam.step(store);
                    sum += lv * b.len() as f64;
                    count += b.len();
                    batch_idx += 1;
                }
                Ok(())
            })?;
        }
        let val_mse = if val.is_empty() {
            sum / count.max(1) as f64 * j2
        } else {
            validation_mse(model, val, val_seed)?
        };
        let log = CorrectionLog {
            epoch,
            train_mse: sum / count.max(1) as f64 * j2,
            val_mse,
        };
        on_epoch(&log);
        logs.push(log);
        if val_mse < best.0 {
            best = (val_mse, model.params.clone());
        }
    }
    model.params = best.1;
    Ok(logs)
}

/// Predicts through `action`, then re-anchors each object on the new
/// observation (when a correction model is given) and re-extracts its
/// feature there.
pub fn closed_loop_update(
    prev: &[ObjectDescriptor],
    action: &PushAction,
    observed_after: &Raster,
    initial_patches: &[Patch],
    forward: &ForwardModel,
    correction: Option<&CorrectionModel>,
) -> Result<Vec<ObjectDescriptor>> {
    let pred = forward.predict_step(prev, action)?;
    let predicted: Vec<Vec2> = pred.iter().map(|x| x.b).collect();
    let locs = match correction {
        Some(c) => {
            let items: Vec<(&Patch, &Raster, Vec2)> = initial_patches
                .iter()
                .zip(&predicted)
                .map(|(p, &b)| (p, observed_after, b))
                .collect();
            c.offsets(&items)?
                .into_iter()
                .zip(&predicted)
                .map(|(d, &b)| clamp_to_raster(b + d, observed_after.size()))
                .collect()
        }
        None => predicted,
    };
    forward.describe(observed_after, &locs)
}

/// Finite-difference check of every correction weight on random patch
/// pairs and targets.
pub fn check_gradients(seed: u64) -> Result<GradCheckReport> {
    let cfg = CorrectionConfig {
        window: 4,
        hidden: 6,
        jitter: 2.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = CorrectionNet::new(&mut store, cfg, &mut rng);
    // the output layer starts at zero, which would mask the hidden layer
    for p in store.iter_mut() {
        for v in p.value_mut().data_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    let s: Vec<Sample> = (0..3)
        .map(|_| Sample {
            row: (0..96).map(|_| rng.random_range(0.0..1.0)).collect(),
            target: Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
        })
        .collect();
    gradient_check(&mut store, usize::MAX, 1e-5, &mut rng, |t, st| {
        let refs: Vec<&Sample> = s.iter().collect();
        batch_loss(&net, t, st, &refs)
    })
}
