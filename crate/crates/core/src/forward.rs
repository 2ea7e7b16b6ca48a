//! Interaction-network forward model over object descriptors.
//!
//! Every object is a node with input `[b / G, f]`; the push is one extra
//! node embedded from its normalized endpoints. Messages flow along every
//! directed object→object edge (unless interaction is disabled) and along
//! action→object edges. Each edge also sees its relative geometry: the
//! source anchor(s) minus the destination location, scaled by `rel_scale`.
//! After `rounds` residual updates the heads predict `Δb` (normalized) and
//! `Δf`; both heads start at zero so an untrained model predicts no change.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check, Activation, Adam, AdamConfig, GradCheckReport, Linear, Mlp, ParamStore, Tape, Tensor, Var};
use crate::dataset::{shuffled_chunks, PushRecord, RecordSource};
use crate::error::{Error, Result};
use crate::repr::{crop, patch_matrix, raster_row, ObjectDescriptor, Patch, Repr, ReprConfig};
use crate::sim::{PushAction, RasterMeta, Vec2};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardConfig {
    pub repr: ReprConfig,
    pub hidden: usize,
    pub rounds: usize,
    /// Object→object messages; off for the no-interaction ablation.
    pub interaction: bool,
    pub rel_scale: f64,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            repr: ReprConfig::default(),
            hidden: 64,
            rounds: 2,
            interaction: true,
            rel_scale: 10.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InteractionNet {
    pub cfg: ForwardConfig,
    pub meta: RasterMeta,
    pub repr: Repr,
    node_in: Mlp,
    action_in: Mlp,
    edge: Mlp,
    update: Mlp,
    head_b: Linear,
    head_f: Linear,
}

/// Message-passing layout for a batch of scenes. Node rows `0..n_obj` are
/// objects; row `n_obj + s` is the action node of scene `s`.
#[derive(Clone, Debug)]
struct Graph {
    n_obj: usize,
    src: Arc<Vec<usize>>,
    dst: Arc<Vec<usize>>,
    rel: Tensor,
}

fn build_graph(b_norm: &[Vec2], scene_of: &[usize], actions: &[[f64; 4]], interaction: bool, rel_scale: f64) -> Graph {
    let n_obj = b_norm.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); actions.len()];
    for (i, &s) in scene_of.iter().enumerate() {
        members[s].push(i);
    }
    let (mut src, mut dst, mut rel) = (Vec::new(), Vec::new(), Vec::new());
    for (s, objs) in members.iter().enumerate() {
        let a = actions[s];
        for &d in objs {
            let bd = b_norm[d];
            src.push(n_obj + s);
            dst.push(d);
            rel.extend_from_slice(&[
                (a[0] - bd.x) * rel_scale,
                (a[1] - bd.y) * rel_scale,
                (a[2] - bd.x) * rel_scale,
                (a[3] - bd.y) * rel_scale,
            ]);
            if !interaction {
                continue;
            }
            for &o in objs {
                if o == d {
                    continue;
                }
                let r = (b_norm[o] - bd) * rel_scale;
                src.push(o);
                dst.push(d);
                rel.extend_from_slice(&[r.x, r.y, r.x, r.y]);
            }
        }
    }
    let e = dst.len();
    Graph {
        n_obj,
        src: Arc::new(src),
        dst: Arc::new(dst),
        rel: Tensor::matrix(e, 4, rel),
    }
}

/// Push endpoints in normalized raster coordinates.
pub fn normalized_action(meta: &RasterMeta, a: &PushAction) -> [f64; 4] {
    let g = meta.size as f64;
    let s = meta.world_to_pixel(a.start) * (1.0 / g);
    let e = meta.world_to_pixel(a.end) * (1.0 / g);
    [s.x, s.y, e.x, e.y]
}

impl InteractionNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: ForwardConfig, meta: RasterMeta, rng: &mut R) -> Self {
        let (h, d) = (cfg.hidden, cfg.repr.feature_dim);
        let repr = Repr::new(store, cfg.repr, meta.size, rng);
        InteractionNet {
            cfg,
            meta,
            repr,
            node_in: Mlp::new(store, "node_in", &[2 + d, h, h], Activation::Relu, rng),
            action_in: Mlp::new(store, "action_in", &[4, h, h], Activation::Relu, rng),
            edge: Mlp::new(store, "edge", &[2 * h + 4, h, h], Activation::Relu, rng),
            update: Mlp::new(store, "update", &[2 * h, h, h], Activation::None, rng),
            head_b: Linear::zeros(store, "head_b", h, 2),
            head_f: Linear::zeros(store, "head_f", h, d),
        }
    }

    pub fn grid(&self) -> usize {
        self.meta.size
    }

    /// One prediction on the tape. `b_norm: [M,2]`, `f: [M,d]`,
    /// `actions: [B,4]`; returns `(b' normalized, f')`.
    fn step_vars(&self, tape: &mut Tape, store: &ParamStore, b_norm: Var, f: Var, actions: Var, graph: &Graph) -> Result<(Var, Var)> {
        let x = tape.concat_cols(&[b_norm, f])?;
        let mut h = self.node_in.forward(tape, store, x)?;
        let ha = self.action_in.forward(tape, store, actions)?;
        let rel = tape.constant(graph.rel.clone());
        for _ in 0..self.cfg.rounds {
            let nodes = tape.concat_rows(&[h, ha])?;
            let hs = tape.gather_rows(nodes, graph.src.clone())?;
            let hd = tape.gather_rows(h, graph.dst.clone())?;
            let e_in = tape.concat_cols(&[hs, hd, rel])?;
            let msg = self.edge.forward(tape, store, e_in)?;
            let agg = tape.scatter_add_rows(msg, graph.dst.clone(), graph.n_obj)?;
            let u_in = tape.concat_cols(&[h, agg])?;
            let du = self.update.forward(tape, store, u_in)?;
            h = tape.add(h, du)?;
        }
        let db = self.head_b.forward(tape, store, h)?;
        let df = self.head_f.forward(tape, store, h)?;
        Ok((tape.add(b_norm, db)?, tape.add(f, df)?))
    }

    /// Batched one-step prediction: scene `s` is pushed by `actions[s]`.
    pub fn predict_batch(
        &self,
        store: &ParamStore,
        scenes: &[Vec<ObjectDescriptor>],
        actions: &[PushAction],
    ) -> Result<Vec<Vec<ObjectDescriptor>>> {
        assert_eq!(scenes.len(), actions.len(), "one action per scene");
        let d = self.cfg.repr.feature_dim;
        let g = self.grid() as f64;
        let mut b = Vec::new();
        let mut f = Vec::new();
        let mut scene_of = Vec::new();
        for (s, descs) in scenes.iter().enumerate() {
            for x in descs {
                if x.f.len() != d {
                    return Err(Error::Shape {
                        op: "predict",
                        left: vec![d],
                        right: vec![x.f.len()],
                    });
                }
                b.push(x.b * (1.0 / g));
                f.extend_from_slice(&x.f);
                scene_of.push(s);
            }
        }
        if b.is_empty() {
            return Ok(scenes.iter().map(|_| Vec::new()).collect());
        }
        let acts: Vec<[f64; 4]> = actions.iter().map(|a| normalized_action(&self.meta, a)).collect();
        let graph = build_graph(&b, &scene_of, &acts, self.cfg.interaction, self.cfg.rel_scale);
        let m = b.len();
        let mut tape = Tape::new();
        let bv = tape.constant(Tensor::matrix(m, 2, b.iter().flat_map(|v| [v.x, v.y]).collect()));
        let fv = tape.constant(Tensor::matrix(m, d, f));
        let av = tape.constant(Tensor::matrix(acts.len(), 4, acts.concat()));
        let (b2, f2) = self.step_vars(&mut tape, store, bv, fv, av, &graph)?;
        let (b2, f2) = (tape.value(b2), tape.value(f2));
        let mut out: Vec<Vec<ObjectDescriptor>> = scenes.iter().map(|s| Vec::with_capacity(s.len())).collect();
        for (k, &s) in scene_of.iter().enumerate() {
            let r = b2.row(k);
            out[s].push(ObjectDescriptor {
                b: Vec2::new(r[0] * g, r[1] * g),
                f: f2.row(k).to_vec(),
            });
        }
        Ok(out)
    }

    pub fn predict_step(&self, store: &ParamStore, descs: &[ObjectDescriptor], action: &PushAction) -> Result<Vec<ObjectDescriptor>> {
        Ok(self
            .predict_batch(store, &[descs.to_vec()], std::slice::from_ref(action))?
            .pop()
            .unwrap())
    }

    /// Applies `predict_step` once per action.
    pub fn rollout(&self, store: &ParamStore, descs: &[ObjectDescriptor], actions: &[PushAction]) -> Result<Vec<ObjectDescriptor>> {
        let mut cur = descs.to_vec();
        for a in actions {
            cur = self.predict_step(store, &cur, a)?;
        }
        Ok(cur)
    }

    /// Total loss and its three terms on a prepared batch.
    pub fn loss_vars(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, w: &LossWeights) -> Result<(Var, [Var; 3])> {
        let g = self.grid() as f64;
        let m = batch.scene_of.len();
        let p_t = tape.constant(batch.patches_t.clone());
        let f_t = self.repr.encode(tape, store, p_t)?;
        let b_t = tape.constant(batch.b_t.clone());
        let b_t_px = tape.scale(b_t, g);
        let img_t = tape.constant(batch.img_t.clone());
        let img_t1 = tape.constant(batch.img_t1.clone());
        let recon_img = self.repr.decode(tape, store, f_t, b_t_px, batch.scene_of.clone(), batch.scenes)?;
        let recon = tape.l1(recon_img, img_t)?;

        let acts = tape.constant(batch.actions.clone());
        let (b1, f1) = self.step_vars(tape, store, b_t, f_t, acts, &batch.graph)?;
        let b1_px = tape.scale(b1, g);
        let pred_img = self.repr.decode(tape, store, f1, b1_px, batch.scene_of.clone(), batch.scenes)?;
        let pred_pixel = tape.l1(pred_img, img_t1)?;

        let p_t1 = tape.constant(batch.patches_t1.clone());
        let f_t1 = self.repr.encode(tape, store, p_t1)?;
        let b_t1 = tape.constant(batch.b_t1.clone());
        let db = tape.sub(b1, b_t1)?;
        let db = tape.scale(db, w.location);
        let df = tape.sub(f1, f_t1)?;
        let diff = tape.concat_cols(&[db, df])?;
        let sq = tape.sum_squares(diff);
        let state = tape.scale(sq, 1.0 / m.max(1) as f64);

        let r = tape.scale(recon, w.recon);
        let pp = tape.scale(pred_pixel, w.pred_pixel);
        let ps = tape.scale(state, w.pred_state);
        let t = tape.add(r, pp)?;
        let total = tape.add(t, ps)?;
        Ok((total, [recon, pred_pixel, state]))
    }

    pub fn loss_terms(&self, store: &ParamStore, batch: &Batch) -> Result<LossTerms> {
        let mut tape = Tape::new();
        let (_, [r, p, s]) = self.loss_vars(&mut tape, store, batch, &LossWeights::default())?;
        Ok(LossTerms {
            recon: tape.value(r).item(),
            pred_pixel: tape.value(p).item(),
            pred_state: tape.value(s).item(),
        })
    }

    /// `(L_recon, L_pred)` for one record.
    pub fn compute_losses(&self, store: &ParamStore, record: &PushRecord) -> Result<(f64, f64)> {
        let t = self.loss_terms(store, &Batch::new(self, &[record]))?;
        Ok((t.recon, t.pred_pixel + t.pred_state))
    }

    pub fn checkpoint_meta(&self) -> BTreeMap<String, String> {
        let c = &self.cfg;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("kind", "forward".into());
        put("window", c.repr.window.to_string());
        put("feature_dim", c.repr.feature_dim.to_string());
        put("repr_hidden", c.repr.hidden.to_string());
        put("hidden", c.hidden.to_string());
        put("rounds", c.rounds.to_string());
        put("interaction", c.interaction.to_string());
        put("rel_scale", c.rel_scale.to_string());
        put("grid", self.meta.size.to_string());
        put("origin_x", self.meta.origin.x.to_string());
        put("origin_y", self.meta.origin.y.to_string());
        put("scale", self.meta.scale.to_string());
        m
    }
}

/// Interaction net plus its parameters.
#[derive(Clone, Debug)]
pub struct ForwardModel {
    pub net: InteractionNet,
    pub params: ParamStore,
}

impl ForwardModel {
    pub fn new(cfg: ForwardConfig, meta: RasterMeta, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = InteractionNet::new(&mut params, cfg, meta, &mut rng);
        ForwardModel { net, params }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path, &self.net.checkpoint_meta())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (stored, meta) = ParamStore::load(path)?;
        let bad = |msg: String| Error::Checkpoint {
            path: path.into(),
            msg,
        };
        if meta.get("kind").map(String::as_str) != Some("forward") {
            return Err(bad("not a forward-model checkpoint".into()));
        }
        fn get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, k: &str) -> std::result::Result<T, String> {
            meta.get(k)
                .ok_or_else(|| format!("missing meta {k}"))?
                .parse()
                .map_err(|_| format!("bad meta {k}"))
        }
        let parse = || -> std::result::Result<(ForwardConfig, RasterMeta), String> {
            Ok((
                ForwardConfig {
                    repr: ReprConfig {
                        window: get(&meta, "window")?,
                        feature_dim: get(&meta, "feature_dim")?,
                        hidden: get(&meta, "repr_hidden")?,
                    },
                    hidden: get(&meta, "hidden")?,
                    rounds: get(&meta, "rounds")?,
                    interaction: get(&meta, "interaction")?,
                    rel_scale: get(&meta, "rel_scale")?,
                },
                RasterMeta {
                    size: get(&meta, "grid")?,
                    origin: Vec2::new(get(&meta, "origin_x")?, get(&meta, "origin_y")?),
                    scale: get(&meta, "scale")?,
                },
            ))
        };
        let (cfg, rmeta) = parse().map_err(bad)?;
        let mut model = ForwardModel::new(cfg, rmeta, 0);
        model.params.load_values_from(&stored)?;
        Ok(model)
    }

    pub fn predict_step(&self, descs: &[ObjectDescriptor], action: &PushAction) -> Result<Vec<ObjectDescriptor>> {
        self.net.predict_step(&self.params, descs, action)
    }

    pub fn rollout(&self, descs: &[ObjectDescriptor], actions: &[PushAction]) -> Result<Vec<ObjectDescriptor>> {
        self.net.rollout(&self.params, descs, actions)
    }

    pub fn describe(&self, raster: &crate::sim::Raster, locs: &[Vec2]) -> Result<Vec<ObjectDescriptor>> {
        self.net.repr.describe(&self.params, raster, locs)
    }
}

/// Tensors for a minibatch of records.
#[derive(Clone, Debug)]
pub struct Batch {
    pub scenes: usize,
    pub scene_of: Vec<usize>,
    pub b_t: Tensor,
    pub b_t1: Tensor,
    pub patches_t: Tensor,
    pub patches_t1: Tensor,
    pub img_t: Tensor,
    pub img_t1: Tensor,
    pub actions: Tensor,
    graph: Graph,
}

impl Batch {
    pub fn new(net: &InteractionNet, records: &[&PushRecord]) -> Self {
        let w = net.cfg.repr.window;
        let g = net.grid() as f64;
        let mut scene_of = Vec::new();
        let (mut b_t, mut b_t1) = (Vec::new(), Vec::new());
        let (mut p_t, mut p_t1): (Vec<Patch>, Vec<Patch>) = (Vec::new(), Vec::new());
        let (mut img_t, mut img_t1) = (Vec::new(), Vec::new());
        let mut acts = Vec::new();
        for (s, r) in records.iter().enumerate() {
            for (&lb, &la) in r.locs_before.iter().zip(&r.locs_after) {
                scene_of.push(s);
                b_t.push(lb * (1.0 / g));
                b_t1.push(la * (1.0 / g));
                p_t.push(crop(&r.raster_before, lb, w));
                p_t1.push(crop(&r.raster_after, la, w));
            }
            img_t.extend(raster_row(&r.raster_before));
            img_t1.extend(raster_row(&r.raster_after));
            acts.push(normalized_action(&net.meta, &r.action));
        }
        let m = scene_of.len();
        let n = records.len();
        let cols = net.grid() * net.grid() * 3;
        let graph = build_graph(&b_t, &scene_of, &acts, net.cfg.interaction, net.cfg.rel_scale);
        let flat = |v: &[Vec2]| v.iter().flat_map(|p| [p.x, p.y]).collect::<Vec<_>>();
        Batch {
            scenes: n,
            b_t: Tensor::matrix(m, 2, flat(&b_t)),
            b_t1: Tensor::matrix(m, 2, flat(&b_t1)),
            patches_t: patch_matrix(&p_t, w),
            patches_t1: patch_matrix(&p_t1, w),
            img_t: Tensor::matrix(n, cols, img_t),
            img_t1: Tensor::matrix(n, cols, img_t1),
            actions: Tensor::matrix(n, 4, acts.concat()),
            scene_of,
            graph,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub recon: f64,
    pub pred_pixel: f64,
    pub pred_state: f64,
    /// Multiplier on the normalized location residual inside the state
    /// term; a one-pixel error is otherwise only `1/G` in size.
    pub location: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            pred_pixel: 1.0,
            pred_state: 1.0,
            location: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub recon: f64,
    pub pred_pixel: f64,
    pub pred_state: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.recon + self.pred_pixel + self.pred_state
    }

    fn add_scaled(&mut self, o: &LossTerms, w: f64) {
        self.recon += o.recon * w;
        self.pred_pixel += o.pred_pixel * w;
        self.pred_state += o.pred_state * w;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Records per sequential read when streaming from disk.
    pub chunk_records: u64,
    /// Cap on validation records scored per epoch (0 = all).
    pub val_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 8,
            seed: 0,
            weights: LossWeights::default(),
            chunk_records: 4096,
            val_limit: 2000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossTerms,
    pub val: LossTerms,
}

/// Mean loss terms over `records`, evaluated in batches.
pub fn evaluate_losses(net: &InteractionNet, store: &ParamStore, records: &[PushRecord], batch_size: usize) -> Result<LossTerms> {
    let mut acc = LossTerms::default();
    if records.is_empty() {
        return Ok(acc);
    }
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&PushRecord> = chunk.iter().collect();
        let t = net.loss_terms(store, &Batch::new(net, &refs))?;
        acc.add_scaled(&t, chunk.len() as f64 / records.len() as f64);
    }
    Ok(acc)
}

/// Minimizes `L_recon + L_pred` with Adam. Epoch 0 in the log is the
/// untrained model; the returned parameters are those with the best
/// validation total.
pub fn train_forward(
    net: &InteractionNet,
    store: &mut ParamStore,
    train: &mut dyn RecordSource,
    val: &[PushRecord],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if train.n_records() == 0 {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let val = if cfg.val_limit > 0 && val.len() > cfg.val_limit {
        &val[..cfg.val_limit]
    } else {
        val
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        store,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let v0 = evaluate_losses(net, store, val, cfg.batch_size)?;
    let mut logs = vec![EpochLog {
        epoch: 0,
        train: v0,
        val: v0,
    }];
    on_epoch(&logs[0]);
    let mut best = (v0.total(), store.clone());
    let n = train.n_records();
    for epoch in 1..=cfg.epochs {
        let mut sum = LossTerms::default();
        let mut seen = 0usize;
        let mut batch_idx = 0usize;
        for (start, end) in shuffled_chunks(n, cfg.chunk_records, &mut rng) {
            let mut order: Vec<usize> = (0..(end - start) as usize).collect();
            order.shuffle(&mut rng);
            train.visit(start, end, &mut |recs| {
                for idx in order.chunks(cfg.batch_size.max(1)) {
                    let refs: Vec<&PushRecord> = idx.iter().map(|&i| &recs[i]).collect();
                    let batch = Batch::new(net, &refs);
                    let mut tape = Tape::new();
                    let (total, [r, p, s]) = net.loss_vars(&mut tape, store, &batch, &cfg.weights)?;
                    let terms = LossTerms {
                        recon: tape.value(r).item(),
                        pred_pixel: tape.value(p).item(),
                        pred_state: tape.value(s).item(),
                    };
                    if !tape.value(total).item().is_finite() {
                        return Err(Error::NonFinite {
                            epoch,
                            batch: batch_idx,
                            terms: format!("{terms:?}"),
                        });
                    }
                    let grads = tape.backward(total);
                    store.zero_grad();
                    store.accumulate(&tape, &grads);
                    adam.step(store);
                    if !store.all_finite() {
                        return Err(Error::NonFinite {
                            epoch,
                            batch: batch_idx,
                            terms: format!("parameters after update; {terms:?}"),
                        });
                    }
                    sum.add_scaled(&terms, idx.len() as f64);
                    seen += idx.len();
                    batch_idx += 1;
                }
                Ok(())
            })?;
        }
        let mut train_mean = LossTerms::default();
        train_mean.add_scaled(&sum, 1.0 / seen.max(1) as f64);
        let val_terms = if val.is_empty() {
            train_mean
        } else {
            evaluate_losses(net, store, val, cfg.batch_size)?
        };
        let log = EpochLog {
            epoch,
            train: train_mean,
            val: val_terms,
        };
        on_epoch(&log);
        logs.push(log);
        if val_terms.total() < best.0 {
            best = (val_terms.total(), store.clone());
        }
    }
    *store = best.1;
    Ok(logs)
}

/// Location error statistics of a one-step predictor on `records`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepError {
    pub model_mse: f64,
    pub persistence_mse: f64,
    pub count: usize,
}

/// Mean squared one-step location error (pixels²) of the model and of the
/// no-change predictor, over every object of every record passed.
pub fn one_step_location_error(model: &ForwardModel, records: &[&PushRecord]) -> Result<StepError> {
    let mut e = StepError::default();
    for chunk in records.chunks(64) {
        let scenes = chunk
            .iter()
            .map(|r| model.describe(&r.raster_before, &r.locs_before))
            .collect::<Result<Vec<_>>>()?;
        let actions: Vec<PushAction> = chunk.iter().map(|r| r.action).collect();
        let pred = model.net.predict_batch(&model.params, &scenes, &actions)?;
        for (r, p) in chunk.iter().zip(pred) {
            for ((x, &before), &after) in p.iter().zip(&r.locs_before).zip(&r.locs_after) {
                let d = x.b - after;
                e.model_mse += d.dot(d);
                let d0 = before - after;
                e.persistence_mse += d0.dot(d0);
                e.count += 1;
            }
        }
    }
    if e.count > 0 {
        e.model_mse /= e.count as f64;
        e.persistence_mse /= e.count as f64;
    }
    Ok(e)
}

/// Finite-difference check of the full training loss (reconstruction,
/// predicted image and predicted state) on a small random model and two
/// two-object records.
pub fn check_gradients(seed: u64, interaction: bool) -> Result<GradCheckReport> {
    let cfg = ForwardConfig {
        repr: ReprConfig {
            window: 6,
            feature_dim: 3,
            hidden: 8,
        },
        hidden: 8,
        rounds: 2,
        interaction,
        rel_scale: 10.0,
    };
    let sim = crate::sim::SimConfig {
        grid: 16,
        ..Default::default()
    };
    let spec = crate::dataset::EpisodeSpec {
        id: 0,
        n_objects: 2,
        seed: 11 + seed,
        scatter: 0.25,
        free_push_prob: 0.0,
    };
    let recs = crate::dataset::generate_episode(&sim, &spec, 2)?;
    let mut m = ForwardModel::new(cfg, sim.raster_meta(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    // zero-initialized heads would hide the message-passing weights
    for p in m.params.iter_mut() {
        for v in p.value_mut().data_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let refs: Vec<&PushRecord> = recs.iter().collect();
    let batch = Batch::new(&m.net, &refs);
    let net = m.net.clone();
    // the location-weighted state loss is large, so smaller steps drown in roundoff
    gradient_check(&mut m.params, 400, 1e-4, &mut rng, |t, s| {
        Ok(net.loss_vars(t, s, &batch, &LossWeights::default())?.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_episode, EpisodeSpec};
    use crate::sim::{Rect, SimConfig};

    fn tiny_cfg(interaction: bool) -> ForwardConfig {
        ForwardConfig {
            repr: ReprConfig {
                window: 6,
                feature_dim: 3,
                hidden: 8,
            },
            hidden: 8,
            rounds: 2,
            interaction,
            rel_scale: 10.0,
        }
    }

    fn desc(x: f64, y: f64, f: &[f64]) -> ObjectDescriptor {
        ObjectDescriptor {
            b: Vec2::new(x, y),
            f: f.to_vec(),
        }
    }

    fn randomize(model: &mut ForwardModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.params.iter_mut() {
            for v in p.value_mut().data_mut() {
                if *v == 0.0 {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        }
    }

    #[test]
    fn untrained_model_is_persistence() {
        let m = ForwardModel::new(ForwardConfig::default(), RasterMeta::for_table(Rect::UNIT, 64), 1);
        let xs = vec![desc(20.0, 30.0, &[0.5; 8])];
        let a = PushAction::new(Vec2::new(0.3, 0.45), Vec2::new(0.3, 0.5));
        let out = m.predict_step(&xs, &a).unwrap();
        assert_eq!(out, xs);
    }

    #[test]
    fn permuting_objects_permutes_predictions() {
        let mut m = ForwardModel::new(tiny_cfg(true), RasterMeta::for_table(Rect::UNIT, 64), 2);
        randomize(&mut m, 9);
        let a = desc(20.0, 30.0, &[0.1, 0.2, 0.3]);
        let b = desc(28.0, 33.0, &[-0.4, 0.0, 0.9]);
        let act = PushAction::new(Vec2::new(0.25, 0.4), Vec2::new(0.3, 0.45));
        let ab = m.predict_step(&[a.clone(), b.clone()], &act).unwrap();
        let ba = m.predict_step(&[b, a], &act).unwrap();
        assert_eq!(ab[0], ba[1]);
        assert_eq!(ab[1], ba[0]);
    }

    #[test]
    fn rollout_composes_steps() {
        let mut m = ForwardModel::new(tiny_cfg(true), RasterMeta::for_table(Rect::UNIT, 64), 3);
        randomize(&mut m, 4);
        let xs = vec![desc(20.0, 30.0, &[0.1, 0.2, 0.3]), desc(40.0, 12.0, &[0.0, 1.0, -1.0])];
        let a1 = PushAction::new(Vec2::new(0.25, 0.4), Vec2::new(0.3, 0.45));
        let a2 = PushAction::new(Vec2::new(0.6, 0.2), Vec2::new(0.62, 0.17));
        assert_eq!(m.rollout(&xs, &[]).unwrap(), xs);
        let two = m.rollout(&xs, &[a1, a2]).unwrap();
        let manual = m.predict_step(&m.predict_step(&xs, &a1).unwrap(), &a2).unwrap();
        assert_eq!(two, manual);
    }

    #[test]
    fn no_interaction_ignores_other_objects() {
        let mut m = ForwardModel::new(tiny_cfg(false), RasterMeta::for_table(Rect::UNIT, 64), 5);
        randomize(&mut m, 6);
        let a = desc(20.0, 30.0, &[0.1, 0.2, 0.3]);
        let act = PushAction::new(Vec2::new(0.25, 0.4), Vec2::new(0.3, 0.45));
        let one = m.predict_step(&[a.clone(), desc(28.0, 33.0, &[0.0; 3])], &act).unwrap();
        let two = m.predict_step(&[a, desc(50.0, 10.0, &[5.0, -2.0, 1.0])], &act).unwrap();
        assert_eq!(one[0], two[0]);
    }

    #[test]
    fn batched_prediction_matches_single() {
        let mut m = ForwardModel::new(tiny_cfg(true), RasterMeta::for_table(Rect::UNIT, 64), 7);
        randomize(&mut m, 8);
        let s1 = vec![desc(20.0, 30.0, &[0.1, 0.2, 0.3])];
        let s2 = vec![desc(40.0, 12.0, &[0.0, 1.0, -1.0]), desc(44.0, 20.0, &[0.3, 0.3, 0.3])];
        let a1 = PushAction::new(Vec2::new(0.25, 0.4), Vec2::new(0.3, 0.45));
        let a2 = PushAction::new(Vec2::new(0.6, 0.2), Vec2::new(0.62, 0.17));
        let batch = m.net.predict_batch(&m.params, &[s1.clone(), s2.clone()], &[a1, a2]).unwrap();
        assert_eq!(batch[0], m.predict_step(&s1, &a1).unwrap());
        assert_eq!(batch[1], m.predict_step(&s2, &a2).unwrap());
    }

    fn records(n_objects: usize, grid: usize) -> Vec<PushRecord> {
        let sim = SimConfig {
            grid,
            ..SimConfig::default()
        };
        generate_episode(&sim, &EpisodeSpec { id: 0, n_objects, seed: 11, scatter: 0.25, free_push_prob: 0.25 }, 4).unwrap()
    }

    #[test]
    fn losses_are_finite_and_nonnegative() {
        let m = ForwardModel::new(ForwardConfig::default(), RasterMeta::for_table(Rect::UNIT, 64), 1);
        for r in records(2, 64) {
            let (a, b) = m.net.compute_losses(&m.params, &r).unwrap();
            assert!(a.is_finite() && a >= 0.0 && b.is_finite() && b >= 0.0);
        }
    }

    #[test]
    fn interaction_loss_gradients_match_finite_differences() {
        for seed in 0..2 {
            for interaction in [true, false] {
                let report = check_gradients(seed, interaction).unwrap();
                assert!(report.max_rel_error < 1e-3, "{report:?}");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let meta = RasterMeta::for_table(Rect::UNIT, 16);
        let recs: Vec<PushRecord> = records(1, 16).into_iter().chain(records(2, 16)).collect();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 4,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = ForwardModel::new(tiny_cfg(true), meta, 1);
            let mut src = recs.clone();
            let logs = train_forward(&m.net.clone(), &mut m.params, &mut src, &recs, &cfg, |_| {}).unwrap();
            (m, logs)
        };
        let (a, logs) = run();
        let (b, _) = run();
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.value(), y.value());
        }
        assert!(logs.last().unwrap().val.total() < logs[0].val.total());
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.ckpt");
        let mut m = ForwardModel::new(tiny_cfg(false), RasterMeta::for_table(Rect::UNIT, 64), 3);
        randomize(&mut m, 1);
        m.save(&path).unwrap();
        let back = ForwardModel::load(&path).unwrap();
        assert_eq!(back.net.cfg, m.net.cfg);
        let xs = vec![desc(20.0, 30.0, &[0.1, 0.2, 0.3])];
        let a = PushAction::new(Vec2::new(0.25, 0.4), Vec2::new(0.3, 0.45));
        assert_eq!(back.predict_step(&xs, &a).unwrap(), m.predict_step(&xs, &a).unwrap());
    }
}
