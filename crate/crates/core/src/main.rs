use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pushplan::checks;
use pushplan::config::{ExperimentConfig, CONFIG_ENV};
use pushplan::correction::{train_correction, CorrectionModel};
use pushplan::dataset::{split, DatasetReader, PushRecord, SplitPaths};
use pushplan::eval::{
    cem_rows, curve_rows, distance_rows, make_scene, mean_curve, run_episodes, trend_slope, EpisodeRun,
    CEM_CSV_HEADER, CURVE_CSV_HEADER, DISTANCE_CSV_HEADER,
};
use pushplan::forward::{one_step_location_error, train_forward, ForwardConfig, ForwardModel};
use pushplan::io::write_atomic;
use pushplan::planner::{Mode, Models};
use pushplan::sim::{render, step_push};
use pushplan::{Error, Result};

/// Object-centric pushing: data collection, model training, planning and
/// evaluation. Any config key can be overridden as `--section.key=value`.
#[derive(Parser, Debug)]
#[command(name = "pushplan", version)]
struct Cli {
    /// Config file of `section.key = value` lines (default: $PUSHPLAN_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Collect random-push episodes into train/val/test files.
    Generate,
    /// Train the forward model (`--forward.interaction=false` for the ablation).
    TrainForward,
    /// Train the location-correction model.
    TrainCorrection,
    /// Run one episode and dump per-step state and frames.
    Plan,
    /// Mean distance curves for every configured mode.
    Evaluate,
    /// Paired per-seed comparison of the configured modes.
    Ablate,
    /// Gradient checks of every network against finite differences.
    Gradcheck,
    /// Print the effective configuration.
    Config,
}

/// Splits `--section.key=value` overrides from the arguments clap sees.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    args.into_iter().partition(|a| {
        a.strip_prefix("--")
            .and_then(|b| b.split_once('='))
            .is_some_and(|(k, _)| k.contains('.'))
    })
}

fn main() -> ExitCode {
    let (overrides, args) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli, &overrides) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli, overrides: &[String]) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(&p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, overrides: &[String]) -> Result<u8> {
    let cfg = load_config(cli, overrides)?;
    match cli.cmd {
        Command::Generate => generate(&cfg),
        Command::TrainForward => train_forward_cmd(&cfg),
        Command::TrainCorrection => train_correction_cmd(&cfg),
        Command::Plan => plan(&cfg),
        Command::Evaluate => evaluate(&cfg, false),
        Command::Ablate => evaluate(&cfg, true),
        Command::Gradcheck => gradcheck(&cfg),
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(0)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn out_dir(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.paths.out.join(name);
    cfg.echo_into(&dir)?;
    Ok(dir)
}

fn generate(cfg: &ExperimentConfig) -> Result<u8> {
    let paths = split(&cfg.sim, &cfg.data, &cfg.paths.data_dir)?;
    cfg.echo_into(&cfg.paths.data_dir)?;
    for p in [&paths.train, &paths.val, &paths.test_1obj, &paths.test_2obj] {
        let r = DatasetReader::open(p)?;
        println!("{}: {} records", p.display(), r.len());
    }
    Ok(0)
}

/// First `limit` records of a file (all when `limit` is 0).
fn load_head(path: &Path, limit: usize) -> Result<Vec<PushRecord>> {
    let mut r = DatasetReader::open(path)?;
    let n = if limit == 0 { r.len() } else { r.len().min(limit as u64) };
    (0..n).map(|i| r.get(i)).collect()
}

fn train_forward_cmd(cfg: &ExperimentConfig) -> Result<u8> {
    let paths = SplitPaths::in_dir(&cfg.paths.data_dir);
    let mut train = DatasetReader::open(&paths.train)?;
    let val = load_head(&paths.val, cfg.train.val_limit)?;
    let fcfg: ForwardConfig = cfg.forward;
    let (name, ckpt) = if fcfg.interaction {
        ("train-forward", &cfg.paths.forward)
    } else {
        ("train-forward-nointer", &cfg.paths.no_interaction)
    };
    let dir = out_dir(cfg, name)?;
    let mut model = ForwardModel::new(fcfg, cfg.sim.raster_meta(), cfg.train.seed);
    let mut csv = String::from("epoch,split,recon,pred_pixel,pred_state,total\n");
    let net = model.net.clone();
    train_forward(&net, &mut model.params, &mut train, &val, &cfg.train, |log| {
        for (split, t) in [("train", &log.train), ("val", &log.val)] {
            writeln!(csv, "{},{split},{},{},{},{}", log.epoch, t.recon, t.pred_pixel, t.pred_state, t.total()).unwrap();
        }
        eprintln!("epoch {} val recon {:.6} pred {:.6}", log.epoch, log.val.recon, log.val.pred_pixel + log.val.pred_state);
    })?;
    write_text(&dir.join("loss.csv"), &csv)?;
    if let Some(parent) = ckpt.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.into(),
            source: e,
        })?;
    }
    model.save(ckpt)?;
    let contact: Vec<&PushRecord> = val.iter().filter(|r| r.has_contact()).collect();
    let e = one_step_location_error(&model, &contact)?;
    println!(
        "saved {}; val contact one-step MSE {:.4} px^2 (persistence {:.4})",
        ckpt.display(),
        e.model_mse,
        e.persistence_mse
    );
    Ok(0)
}

fn train_correction_cmd(cfg: &ExperimentConfig) -> Result<u8> {
    let paths = SplitPaths::in_dir(&cfg.paths.data_dir);
    let mut train = DatasetReader::open(&paths.train)?;
    let val = load_head(&paths.val, cfg.train.val_limit)?;
    let dir = out_dir(cfg, "train-correction")?;
    let mut model = CorrectionModel::new(cfg.correction, cfg.correction_train.seed);
    let mut tc = cfg.correction_train.clone();
    tc.episode_len = cfg.data.steps as u64;
    let mut csv = String::from("epoch,train_mse,val_mse\n");
    train_correction(&mut model, &mut train, &val, &tc, |log| {
        writeln!(csv, "{},{},{}", log.epoch, log.train_mse, log.val_mse).unwrap();
        eprintln!("epoch {} val mse {:.4} px^2", log.epoch, log.val_mse);
    })?;
    write_text(&dir.join("loss.csv"), &csv)?;
    if let Some(parent) = cfg.paths.correction.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.into(),
            source: e,
        })?;
    }
    model.save(&cfg.paths.correction)?;
    println!("saved {}", cfg.paths.correction.display());
    Ok(0)
}

struct Loaded {
    full: Option<ForwardModel>,
    no_interaction: Option<ForwardModel>,
    correction: Option<CorrectionModel>,
}

impl Loaded {
    fn for_modes(cfg: &ExperimentConfig, modes: &[Mode]) -> Result<Self> {
        let learned = |m: &Mode| !matches!(m, Mode::Analytic | Mode::Oracle);
        let needs_full = modes.iter().any(|m| learned(m) && *m != Mode::NoInteraction);
        let needs_ni = modes.contains(&Mode::NoInteraction);
        let needs_corr = !cfg.mpc.oracle && modes.iter().any(|m| learned(m) && *m != Mode::NoCorrection);
        Ok(Loaded {
            full: needs_full.then(|| ForwardModel::load(&cfg.paths.forward)).transpose()?,
            no_interaction: needs_ni
                .then(|| ForwardModel::load(&cfg.paths.no_interaction))
                .transpose()?,
            correction: needs_corr
                .then(|| CorrectionModel::load(&cfg.paths.correction))
                .transpose()?,
        })
    }

    fn models(&self) -> Models<'_> {
        Models {
            full: self.full.as_ref(),
            no_interaction: self.no_interaction.as_ref(),
            correction: self.correction.as_ref(),
        }
    }
}

fn plan(cfg: &ExperimentConfig) -> Result<u8> {
    let mode = cfg.eval.mode;
    let seed = cfg.eval.seed_base;
    let loaded = Loaded::for_modes(cfg, &[mode])?;
    let runs = run_episodes(
        cfg.eval.scene,
        mode,
        &[seed],
        loaded.models(),
        &cfg.sim,
        &cfg.mpc,
        cfg.eval.distance,
        false,
    )?;
    let run = &runs[0];
    let dir = out_dir(cfg, &format!("plan-{}-{}-{}", mode, cfg.eval.scene, seed))?;
    let scene = make_scene(cfg.eval.scene, seed, cfg.eval.distance, &cfg.sim)?;
    let meta = cfg.sim.raster_meta();
    let frames = dir.join("frames");
    std::fs::create_dir_all(&frames).map_err(|e| Error::Io {
        path: frames.clone(),
        source: e,
    })?;
    write_atomic(&frames.join("goal.ppm"), &render(&scene.goal, meta).to_ppm())?;

    let mut csv = String::from("step,start_x,start_y,end_x,end_y,object,x,y,est_x,est_y,distance\n");
    let mut world = scene.start.clone();
    write_atomic(&frames.join("frame_000.ppm"), &render(&world, meta).to_ppm())?;
    for (n, (o, d)) in world.objects.iter().zip(&run.result.initial_distances).enumerate() {
        writeln!(csv, "0,,,,,{n},{},{},{},{},{d}", o.center.x, o.center.y, o.center.x, o.center.y).unwrap();
    }
    for (t, s) in run.result.steps.iter().enumerate() {
        world = step_push(&world, &s.action, &cfg.sim);
        write_atomic(&frames.join(format!("frame_{:03}.ppm", t + 1)), &render(&world, meta).to_ppm())?;
        for (n, o) in world.objects.iter().enumerate() {
            let a = &s.action;
            writeln!(
                csv,
                "{},{},{},{},{},{n},{},{},{},{},{}",
                t + 1,
                a.start.x,
                a.start.y,
                a.end.x,
                a.end.y,
                o.center.x,
                o.center.y,
                s.estimates[n].x,
                s.estimates[n].y,
                s.distances[n]
            )
            .unwrap();
        }
    }
    write_text(&dir.join("steps.csv"), &csv)?;
    let mut cem = format!("{CEM_CSV_HEADER}\n");
    cem_rows(&runs, &mut cem);
    write_text(&dir.join("cem.csv"), &cem)?;
    let last = run.result.mean_curve().last().copied().unwrap_or(f64::NAN);
    println!("{}: final mean distance {last:.5}", dir.display());
    Ok(0)
}

fn evaluate(cfg: &ExperimentConfig, paired: bool) -> Result<u8> {
    let modes = &cfg.eval.modes;
    let seeds = cfg.eval.seed_list();
    let loaded = Loaded::for_modes(cfg, modes)?;
    let name = if paired { "ablate" } else { "evaluate" };
    let dir = out_dir(cfg, &format!("{name}-{}", cfg.eval.scene))?;
    let mut all: Vec<Vec<EpisodeRun>> = Vec::new();
    for &mode in modes {
        let runs = run_episodes(
            cfg.eval.scene,
            mode,
            &seeds,
            loaded.models(),
            &cfg.sim,
            &cfg.mpc,
            cfg.eval.distance,
            cfg.eval.parallel,
        )?;
        all.push(runs);
    }

    let mut curves = format!("{CURVE_CSV_HEADER}\n");
    let mut distances = format!("{DISTANCE_CSV_HEADER}\n");
    let mut summary = String::from("mode,episodes,initial_mean,final_mean,success_rate,slope\n");
    for (&mode, runs) in modes.iter().zip(&all) {
        curve_rows(mode, runs, &mut curves);
        distance_rows(runs, &mut distances);
        let c = mean_curve(runs);
        let finals: Vec<f64> = runs.iter().map(|r| *r.result.mean_curve().last().unwrap()).collect();
        let success = finals.iter().filter(|&&d| d < cfg.eval.success_threshold).count() as f64 / finals.len().max(1) as f64;
        writeln!(
            summary,
            "{mode},{},{},{},{success},{}",
            runs.len(),
            c.first().copied().unwrap_or(f64::NAN),
            c.last().copied().unwrap_or(f64::NAN),
            trend_slope(&c)
        )
        .unwrap();
    }
    write_text(&dir.join("curves.csv"), &curves)?;
    write_text(&dir.join("distances.csv"), &distances)?;
    write_text(&dir.join("summary.csv"), &summary)?;
    if paired {
        let mut csv = String::from("seed");
        for m in modes {
            write!(csv, ",{m}").unwrap();
        }
        csv.push('\n');
        for (i, seed) in seeds.iter().enumerate() {
            write!(csv, "{seed}").unwrap();
            for runs in &all {
                write!(csv, ",{}", runs[i].result.mean_curve().last().unwrap()).unwrap();
            }
            csv.push('\n');
        }
        write_text(&dir.join("paired.csv"), &csv)?;
    }
    print!("{summary}");
    Ok(0)
}

fn gradcheck(cfg: &ExperimentConfig) -> Result<u8> {
    let seeds: Vec<u64> = (0..5).map(|i| cfg.train.seed + i).collect();
    let results = checks::run_all(&seeds)?;
    let mut ok = true;
    for r in &results {
        ok &= r.passed();
        println!(
            "{:<20} seed {} probes {:>5} max rel error {:.3e} {}",
            r.suite.name(),
            r.seed,
            r.report.probes,
            r.report.max_rel_error,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok { 0 } else { 3 })
}
