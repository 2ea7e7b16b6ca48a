//! End-to-end acceptance gate. One test so the expensive fixture (data and
//! three trained models) is built once and every criterion reports in order.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pushplan::checks;
use pushplan::correction::{train_correction, CorrectionConfig, CorrectionModel, CorrectionTrainConfig};
use pushplan::dataset::{split, CollectConfig, DatasetReader, PushRecord, SplitPaths};
use pushplan::eval::{episodes, mean_curve, open_loop_error, run_episodes, trend_slope, tracking_error, EpisodeRun, SceneKind};
use pushplan::forward::{one_step_location_error, train_forward, ForwardConfig, ForwardModel, TrainConfig};
use pushplan::planner::{cem_plan, CemConfig, Dynamics, GaussianPolicy, Mode, Models, MpcConfig, PlanContext};
use pushplan::repr::ObjectDescriptor;
use pushplan::sim::{sample_scene, sample_scene_within, step_push, PushAction, RasterMeta, Rect, SimConfig, Vec2, WorldState};
use pushplan::Result;

const SEEDS: u64 = 20;
const DISTANCE: f64 = 15.0 * 0.05;

struct Report {
    lines: Vec<(usize, bool, String)>,
}

impl Report {
    fn record(&mut self, n: usize, pass: bool, detail: String) {
        let line = format!("criterion {n}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
        writeln!(std::io::stderr(), "{line}").unwrap();
        self.lines.push((n, pass, line));
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

struct Fixture {
    full: ForwardModel,
    no_interaction: ForwardModel,
    correction: CorrectionModel,
    /// Held-out records, one vector per test file (episode ids restart per file).
    test: Vec<Vec<PushRecord>>,
    train_time: Duration,
}

fn load_all(path: &Path) -> Result<Vec<PushRecord>> {
    let mut r = DatasetReader::open(path)?;
    (0..r.len()).map(|i| r.get(i)).collect()
}

fn build_fixture(dir: &Path, sim: &SimConfig) -> Result<Fixture> {
    let t = Instant::now();
    let data = CollectConfig {
        episodes: 220,
        test_episodes: 10,
        ..CollectConfig::default()
    };
    let paths: SplitPaths = split(sim, &data, dir)?;
    let val = load_all(&paths.val)?;
    let test = vec![load_all(&paths.test_1obj)?, load_all(&paths.test_2obj)?];
    writeln!(std::io::stderr(), "fixture: data in {}", secs(t.elapsed())).unwrap();

    let tc = TrainConfig {
        epochs: 20,
        seed: 1,
        ..TrainConfig::default()
    };
    let train_model = |interaction: bool| -> Result<ForwardModel> {
        let t = Instant::now();
        let mut m = ForwardModel::new(
            ForwardConfig {
                interaction,
                ..ForwardConfig::default()
            },
            sim.raster_meta(),
            1,
        );
        let mut train = DatasetReader::open(&paths.train)?;
        let net = m.net.clone();
        train_forward(&net, &mut m.params, &mut train, &val, &tc, |_| {})?;
        writeln!(
            std::io::stderr(),
            "fixture: forward model (interaction {interaction}) in {}",
            secs(t.elapsed())
        )
        .unwrap();
        Ok(m)
    };
    let t_train = Instant::now();
    let full = train_model(true)?;
    let train_time = t_train.elapsed();
    let no_interaction = train_model(false)?;

    let t = Instant::now();
    let mut correction = CorrectionModel::new(CorrectionConfig::default(), 1);
    let mut train = DatasetReader::open(&paths.train)?;
    let ctc = CorrectionTrainConfig {
        seed: 1,
        episode_len: data.steps as u64,
        ..CorrectionTrainConfig::default()
    };
    train_correction(&mut correction, &mut train, &val, &ctc, |_| {})?;
    writeln!(std::io::stderr(), "fixture: correction model in {}", secs(t.elapsed())).unwrap();
    Ok(Fixture {
        full,
        no_interaction,
        correction,
        test,
        train_time,
    })
}

fn test_episodes(fx: &Fixture) -> Vec<Vec<&PushRecord>> {
    fx.test.iter().flat_map(|file| episodes(file)).collect()
}

fn final_mean(runs: &[EpisodeRun]) -> f64 {
    *mean_curve(runs).last().unwrap()
}

fn criterion_1(rep: &mut Report) -> Result<()> {
    let t = Instant::now();
    let results = checks::run_all(&[0, 1, 2, 3, 4])?;
    let worst = results.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}@{}", r.suite.name(), r.seed))
        .collect();
    let el = t.elapsed();
    let pass = failed.is_empty() && results.len() == 25 && el < Duration::from_secs(60);
    rep.record(
        1,
        pass,
        format!(
            "{} suite runs, worst relative error {worst:.2e} (< {:.0e}), failures {failed:?}, {}",
            results.len(),
            checks::TOLERANCE,
            secs(el)
        ),
    );
    Ok(())
}

fn criterion_2(rep: &mut Report, sim: &SimConfig) -> Result<()> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = 0;
    let mut world = sample_scene(&mut rng, 2, sim)?;
    for i in 0..10_000 {
        if i % 50 == 0 {
            let n = rng.random_range(1..=4);
            world = sample_scene(&mut rng, n, sim)?;
        }
        // half the pushes aim at an object so contacts are common
        let start = if rng.random_bool(0.5) {
            let o = world.objects[rng.random_range(0..world.objects.len())].center;
            o + Vec2::new(rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12))
        } else {
            Vec2::new(rng.random(), rng.random())
        };
        let d = Vec2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        let a = PushAction::clipped(start, d, sim.max_push, sim.bounds);
        world = step_push(&world, &a, sim);
        if world.validate().is_err() {
            violations += 1;
        }
    }

    let mut worst_t: f64 = 0.0;
    let mut worst_m: f64 = 0.0;
    let mut checked = 0;
    let region = Rect {
        min: Vec2::new(0.3, 0.3),
        max: Vec2::new(0.7, 0.7),
    };
    let moved = |w: &WorldState, f: &dyn Fn(Vec2) -> Vec2| -> WorldState {
        let mut w = w.clone();
        for o in w.objects.iter_mut() {
            o.center = f(o.center);
        }
        w
    };
    for _ in 0..2000 {
        let w = sample_scene_within(&mut rng, 2, sim, region)?;
        let s = w.objects[0].center + Vec2::new(rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12));
        let a = PushAction::new(s, s + Vec2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)));
        let out = step_push(&w, &a, sim);
        let tv = Vec2::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
        let shift = |p: Vec2| p + tv;
        let flip = |p: Vec2| Vec2::new(1.0 - p.x, p.y);
        let out_t = step_push(&moved(&w, &shift), &PushAction::new(shift(a.start), shift(a.end)), sim);
        let out_m = step_push(&moved(&w, &flip), &PushAction::new(flip(a.start), flip(a.end)), sim);
        for ((p, q), r) in out.objects.iter().zip(&out_t.objects).zip(&out_m.objects) {
            worst_t = worst_t.max(shift(p.center).dist(q.center));
            worst_m = worst_m.max(flip(p.center).dist(r.center));
        }
        checked += 1;
    }
    let el = t.elapsed();
    let pass = violations == 0 && worst_t < 1e-9 && worst_m < 1e-9 && el < Duration::from_secs(60);
    rep.record(
        2,
        pass,
        format!(
            "10000 fuzzed pushes, {violations} violations; {checked} symmetry cases, translation err {worst_t:.1e}, mirror err {worst_m:.1e}; {}",
            secs(el)
        ),
    );
    Ok(())
}

fn criterion_3(rep: &mut Report, sim: &SimConfig, mpc: &MpcConfig) -> Result<()> {
    let t = Instant::now();
    let seeds: Vec<u64> = (0..SEEDS).collect();
    let runs = run_episodes(SceneKind::Free, Mode::Oracle, &seeds, Models::default(), sim, mpc, DISTANCE, false)?;
    let ok = runs
        .iter()
        .filter(|r| *r.result.mean_curve().last().unwrap() < 0.01)
        .count();
    let el = t.elapsed();
    rep.record(
        3,
        ok >= 19 && el < Duration::from_secs(60),
        format!("oracle analytic reached < 0.01 in {ok}/20 free scenes; {}", secs(el)),
    );
    Ok(())
}

fn criterion_4(rep: &mut Report, fx: &Fixture) -> Result<()> {
    let contact: Vec<&PushRecord> = fx.test.iter().flatten().filter(|r| r.has_contact()).collect();
    let e = one_step_location_error(&fx.full, &contact)?;
    // persistence oracle computed here, independently of the library
    let (mut sum, mut n) = (0.0, 0usize);
    for r in &contact {
        for (a, b) in r.locs_before.iter().zip(&r.locs_after) {
            let d = *a - *b;
            sum += d.dot(d);
            n += 1;
        }
    }
    let persistence = sum / n as f64;
    let eps = test_episodes(fx);
    let open: Vec<f64> = [1, 5, 10]
        .iter()
        .map(|&h| open_loop_error(&fx.full, &eps, h, 5))
        .collect::<Result<_>>()?;
    let monotone = open.windows(2).all(|w| w[1] >= w[0]);
    let pass = e.model_mse < persistence && monotone && fx.train_time < Duration::from_secs(30 * 60);
    rep.record(
        4,
        pass,
        format!(
            "{} contact records: one-step MSE {:.4} px² vs persistence {persistence:.4}; open-loop error H=1,5,10: {:.3} {:.3} {:.3} px; training {}",
            contact.len(),
            e.model_mse,
            open[0],
            open[1],
            open[2],
            secs(fx.train_time)
        ),
    );
    Ok(())
}

fn criterion_5(rep: &mut Report, fx: &Fixture, full_free: &[EpisodeRun], no_corr_free: &[EpisodeRun]) -> Result<()> {
    let eps = test_episodes(fx);
    let with = tracking_error(&fx.full, Some(&fx.correction), &eps, 10)?;
    let without = tracking_error(&fx.full, None, &eps, 10)?;
    let (a, b) = (final_mean(full_free), final_mean(no_corr_free));
    rep.record(
        5,
        with < without && a < b && eps.len() == 20,
        format!(
            "{} held-out episodes, 10-step tracking error {with:.3} px with correction vs {without:.3} without; MPC final distance full {a:.4} vs no-correction {b:.4}",
            eps.len()
        ),
    );
    Ok(())
}

fn criterion_6(rep: &mut Report, full: &[EpisodeRun], ni: &[EpisodeRun], analytic: &[EpisodeRun]) {
    let at60 = |runs: &[EpisodeRun]| mean_curve(runs)[60];
    let (f, n, a) = (at60(full), at60(ni), at60(analytic));
    rep.record(
        6,
        f < n && f < a,
        format!("hard scenes, mean distance at T=60: full {f:.4}, no-interaction {n:.4}, analytic {a:.4}"),
    );
}

/// Only the first push of a plan moves the object; the optimum is the
/// displacement that lands it on the goal.
struct FirstStepToy {
    grid: f64,
}

impl Dynamics for FirstStepToy {
    fn step_batch(&self, states: &[Vec<ObjectDescriptor>], actions: &[PushAction]) -> Result<Vec<Vec<ObjectDescriptor>>> {
        Ok(states
            .iter()
            .zip(actions)
            .map(|(s, a)| {
                s.iter()
                    .map(|x| {
                        let moved = if x.f[0] == 0.0 { a.delta() * self.grid } else { Vec2::ZERO };
                        ObjectDescriptor {
                            b: x.b + moved,
                            f: vec![x.f[0] + 1.0],
                        }
                    })
                    .collect()
            })
            .collect())
    }
}

fn criterion_7(rep: &mut Report, logged: &[&[EpisodeRun]]) -> Result<()> {
    let mut plans = 0;
    let mut bad = 0;
    for runs in logged {
        for run in runs.iter() {
            for s in &run.result.steps {
                if s.best_so_far.is_empty() {
                    continue;
                }
                plans += 1;
                let mut best = f64::INFINITY;
                let mut ok = s.best_so_far.windows(2).all(|w| w[1] <= w[0]);
                for (costs, &b) in s.iteration_costs.iter().zip(&s.best_so_far) {
                    best = costs.iter().copied().fold(best, f64::min);
                    ok &= b == best;
                }
                bad += usize::from(!ok);
            }
        }
    }

    let cfg = CemConfig {
        iterations: 10,
        start_clearance: 0.0,
        start_reach: 0.0,
        ..CemConfig::default()
    };
    let ctx = PlanContext {
        meta: RasterMeta::for_table(Rect::UNIT, 64),
        bounds: Rect::UNIT,
    };
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for seed in 0..5 {
        let opt = Vec2::new(rng.random_range(-0.04..0.04), rng.random_range(-0.03..0.03));
        let cur = [ObjectDescriptor {
            b: Vec2::new(32.0, 32.0),
            f: vec![0.0],
        }];
        let goal = [ObjectDescriptor {
            b: Vec2::new(32.0 + opt.x * 64.0, 32.0 + opt.y * 64.0),
            f: vec![cfg.horizon as f64],
        }];
        let init = GaussianPolicy::initial(&cfg, Vec2::new(0.5, 0.5));
        let r = cem_plan(
            &FirstStepToy { grid: 64.0 },
            &cur,
            &goal,
            init,
            &cfg,
            &ctx,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )?;
        worst = worst.max(Vec2::new(r.policy.mean[2], r.policy.mean[3]).dist(opt));
    }
    rep.record(
        7,
        bad == 0 && plans > 0 && worst < 0.01,
        format!("{plans} logged plans, {bad} bookkeeping violations; toy quadratic worst distance of the CEM mean to the optimum {worst:.4}"),
    );
    Ok(())
}

fn criterion_8(rep: &mut Report, full_free: &[EpisodeRun]) {
    let c = mean_curve(full_free);
    let slope = trend_slope(&c);
    let (first, last) = (c[0], *c.last().unwrap());
    rep.record(
        8,
        slope < 0.0 && last < 0.3 * first,
        format!("free scenes: slope {slope:.2e}, final {last:.4} vs 0.3 x initial {:.4}", 0.3 * first),
    );
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pushplan"))
        .args(args)
        .env_remove("PUSHPLAN_CONFIG")
        .output()
        .expect("spawn pushplan")
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_9(rep: &mut Report, root: &Path) {
    let config = "\
data.episodes = 6
data.steps = 8
data.test_episodes = 2
train.epochs = 1
train.batch_size = 8
correction.epochs = 1
cem.samples = 24
cem.elites = 4
cem.iterations = 2
mpc.steps = 4
eval.seeds = 3
eval.modes = full,no-interaction,no-correction,analytic,oracle
";
    let run_all = |dir: &Path, parallel: bool| -> std::result::Result<Vec<(PathBuf, Vec<u8>)>, String> {
        std::fs::create_dir_all(dir).unwrap();
        let cfg = dir.join("cfg.txt");
        std::fs::write(&cfg, config).unwrap();
        let p = |k: &str, v: &Path| format!("--paths.{k}={}", v.display());
        let par = format!("--eval.parallel={parallel}");
        let cem_par = format!("--cem.parallel={parallel}");
        let common = [
            "--config".to_string(),
            cfg.display().to_string(),
            p("data_dir", &dir.join("data")),
            p("forward", &dir.join("runs/fwd.ckpt")),
            p("no_interaction", &dir.join("runs/ni.ckpt")),
            p("correction", &dir.join("runs/corr.ckpt")),
            p("out", &dir.join("runs/out")),
            par,
            cem_par,
        ];
        let cmds: [&[&str]; 7] = [
            &["generate"],
            &["train-forward"],
            &["train-forward", "--forward.interaction=false"],
            &["train-correction"],
            &["plan", "--eval.scene=hard"],
            &["evaluate"],
            &["ablate", "--eval.scene=hard"],
        ];
        for c in cmds {
            let mut args: Vec<&str> = c.to_vec();
            args.extend(common.iter().map(String::as_str));
            let out = cli(&args);
            if !out.status.success() {
                return Err(format!("{c:?}: {}", String::from_utf8_lossy(&out.stderr)));
            }
        }
        let mut files = tree(dir);
        files.retain(|(p, _)| p != Path::new("cfg.txt"));
        // echoed configs name their own directory
        for (p, bytes) in files.iter_mut() {
            if p.file_name().is_some_and(|n| n == "config.txt") {
                *bytes = String::from_utf8_lossy(bytes).replace(&dir.display().to_string(), "ROOT").into_bytes();
            }
        }
        Ok(files)
    };
    let t = Instant::now();
    let result = (|| {
        let a = run_all(&root.join("a"), false)?;
        let b = run_all(&root.join("b"), false)?;
        let c = run_all(&root.join("c"), true)?;
        let strip = |v: &[(PathBuf, Vec<u8>)]| -> Vec<(PathBuf, Vec<u8>)> {
            v.iter()
                .map(|(p, bytes)| {
                    if p.file_name().is_some_and(|n| n == "config.txt") {
                        let s = String::from_utf8_lossy(bytes).replace("parallel = true", "parallel = false");
                        (p.clone(), s.into_bytes())
                    } else {
                        (p.clone(), bytes.clone())
                    }
                })
                .collect()
        };
        let diff = |x: &[(PathBuf, Vec<u8>)], y: &[(PathBuf, Vec<u8>)]| -> Vec<String> {
            let names = |v: &[(PathBuf, Vec<u8>)]| v.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>();
            if names(x) != names(y) {
                return vec!["file sets differ".into()];
            }
            x.iter()
                .zip(y)
                .filter(|(a, b)| a.1 != b.1)
                .map(|(a, _)| a.0.display().to_string())
                .collect()
        };
        let d1 = diff(&a, &b);
        let d2 = diff(&strip(&a), &strip(&c));
        Ok::<_, String>((a.len(), d1, d2))
    })();
    match result {
        Ok((n, d1, d2)) => rep.record(
            9,
            n > 0 && d1.is_empty() && d2.is_empty(),
            format!(
                "{n} output files across 7 commands; rerun differs in {d1:?}, parallel run differs in {d2:?}; {}",
                secs(t.elapsed())
            ),
        ),
        Err(e) => rep.record(9, false, format!("command failed: {e}")),
    }
}

#[test]
fn acceptance() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let sim = SimConfig::default();
    let mpc = MpcConfig::default();
    let mut rep = Report { lines: Vec::new() };

    criterion_1(&mut rep).unwrap();
    criterion_2(&mut rep, &sim).unwrap();
    criterion_3(&mut rep, &sim, &mpc).unwrap();

    let fx = build_fixture(&root.join("data"), &sim).unwrap();
    criterion_4(&mut rep, &fx).unwrap();

    let models = Models {
        full: Some(&fx.full),
        no_interaction: Some(&fx.no_interaction),
        correction: Some(&fx.correction),
    };
    let seeds: Vec<u64> = (0..SEEDS).collect();
    let run = |kind, mode| {
        let t = Instant::now();
        let r = run_episodes(kind, mode, &seeds, models, &sim, &mpc, DISTANCE, false).unwrap();
        writeln!(std::io::stderr(), "{kind} {mode}: final {:.4} in {}", final_mean(&r), secs(t.elapsed())).unwrap();
        r
    };
    let full_free = run(SceneKind::Free, Mode::Full);
    let no_corr_free = run(SceneKind::Free, Mode::NoCorrection);
    criterion_5(&mut rep, &fx, &full_free, &no_corr_free).unwrap();

    let full_hard = run(SceneKind::Hard, Mode::Full);
    let ni_hard = run(SceneKind::Hard, Mode::NoInteraction);
    let analytic_hard = run(SceneKind::Hard, Mode::Analytic);
    criterion_6(&mut rep, &full_hard, &ni_hard, &analytic_hard);

    criterion_7(&mut rep, &[&full_free, &no_corr_free, &full_hard, &ni_hard]).unwrap();
    criterion_8(&mut rep, &full_free);
    criterion_9(&mut rep, &root.join("cli"));

    let mut err = std::io::stderr();
    writeln!(err, "---- acceptance summary ----").unwrap();
    for (_, _, line) in &rep.lines {
        writeln!(err, "{line}").unwrap();
    }
    let failed: Vec<usize> = rep.lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
