mod render;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use drivewm::checkpoint::Checkpoint;
use drivewm::config::RunConfig;
use drivewm::eval::{
    config_hash, dump_forecasts, run_suite, score_scenario, ConstantVelocity, Expert, ModelPlanner, Planner,
    ZeroMotion,
};
use drivewm::model::{TrainingClip, WorldModel};
use drivewm::train::{train_stage1, train_stage2, Stage1Losses, Stage1State, Stage2Item, Stage2State, Stage2Stats};
use drivewm::world::{build_scenario, read_scenarios, rollout_controller, write_scenarios, Scenario};
use render::Rollout;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const CONFIG_HELP: &str = "\
Configuration keys (flat TOML, every key optional):
  scenarios   n_rays fov_deg r_max horizon history frame_dt speed_cap templates
              max_retries tracking_tolerance ttc_horizon max_accel max_jerk
              min_expert_progress train_seed train_count eval_seed eval_count
  model       init_seed encoder_seed feature_dim width layers heads max_frames
              planner_hidden head_hidden embed_dim c_max traj_offset_x traj_scale_x
              traj_scale_y
  stage 1     seed stage1_steps lr_stage1 batch_size grad_clip stage1_frames
              flow_draws
              lambda_c depth_target (future|present) use_img use_depth use_sem
  stage 2     stage2_iters lr_stage2 stage2_batch stage2_frames group gamma
              lambda_il noise_level sde_steps il_states
  evaluation  eval_steps eval_frames
`--set key=value` overrides the file. Every command writes the resolved
configuration as config.toml next to its outputs.";

#[derive(Parser)]
#[command(name = "drivewm", version, about = "Driving world model: data, training, evaluation", after_help = CONFIG_HELP)]
struct Cli {
    /// Configuration file (flat TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set width=64`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenarios `seed..seed+count` as JSON Lines.
    GenScenarios {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run stage 1 (world model) or stage 2 (planner policy optimisation).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Training scenarios (default: generated from the configuration).
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint of an interrupted run of the same stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total steps (stage 1) or iterations (stage 2) to reach.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint or a baseline on the held-out suite.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Evaluation scenarios (default: generated from the configuration).
        #[arg(long)]
        scenarios: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Also write per-ray depth and semantic forecasts.
        #[arg(long)]
        dump_forecasts: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop rollout of one scenario with a pose trace.
    Rollout {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        scenarios: Option<PathBuf>,
        /// Line of the scenario file, or offset from `eval_seed`.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Write one SVG per future frame.
        #[arg(long)]
        render: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    ZeroMotion,
    ConstantVelocity,
    Expert,
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<drivewm::Error>() {
            return match e {
                drivewm::Error::Config(_) | drivewm::Error::Input(_) => 2,
                drivewm::Error::Numerical(_) => 4,
                drivewm::Error::Io(_) | drivewm::Error::Serde(_) | drivewm::Error::Checkpoint { .. } => 3,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return usage("--workers must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let Some((k, v)) = o.split_once('=') else {
            return usage(format!("override `{o}` is not KEY=VALUE"));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    match cli.command {
        Command::GenScenarios { seed, count, out } => gen_scenarios(&cfg, seed, count, &out),
        Command::Train { stage: 1, scenarios, init, resume, steps, out } => {
            if init.is_some() {
                return usage("--init only applies to stage 2");
            }
            train1(cfg, scenarios.as_deref(), resume.as_deref(), steps, &out)
        }
        Command::Train { scenarios, init, resume, steps, out, .. } => {
            train2(cfg, scenarios.as_deref(), init.as_deref(), resume.as_deref(), steps, &out)
        }
        Command::Eval { ckpt, scenarios, baseline, dump_forecasts, out } => {
            eval(cfg, ckpt.as_deref(), scenarios.as_deref(), baseline, dump_forecasts, &out)
        }
        Command::Rollout { ckpt, scenarios, index, baseline, render, out } => {
            rollout(cfg, ckpt.as_deref(), scenarios.as_deref(), index, baseline, render, &out)
        }
    }
}

fn generate(cfg: &RunConfig, seed: u64, count: u64) -> Result<Vec<Scenario>> {
    let params = cfg.scenario_params()?;
    Ok((seed..seed + count).map(|s| build_scenario(s, &params)).collect::<drivewm::Result<_>>()?)
}

fn load_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_scenarios(BufReader::new(f))?)
}

fn scenarios_or(cfg: &RunConfig, path: Option<&Path>, seed: u64, count: usize) -> Result<Vec<Scenario>> {
    match path {
        Some(p) => load_scenarios(p),
        None => generate(cfg, seed, count as u64),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

/// Opens a CSV log, appending when resuming into an existing one.
fn open_log(path: &Path, header: &str, append: bool) -> Result<BufWriter<File>> {
    let exists = path.exists();
    let mut f = if append && exists {
        BufWriter::new(OpenOptions::new().append(true).open(path)?)
    } else {
        BufWriter::new(File::create(path)?)
    };
    if !(append && exists) {
        writeln!(f, "{header}")?;
    }
    Ok(f)
}

fn gen_scenarios(cfg: &RunConfig, seed: u64, count: u64, out: &Path) -> Result<()> {
    let scenarios = generate(cfg, seed, count)?;
    let f = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_scenarios(BufWriter::new(f), &scenarios)?;
    Ok(())
}

fn train1(mut cfg: RunConfig, scenarios: Option<&Path>, resume: Option<&Path>, steps: Option<u64>, out: &Path) -> Result<()> {
    if let Some(s) = steps {
        cfg.stage1_steps = s;
    }
    let (mut model, mut state) = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let Some(state) = ck.stage1 else {
                return usage(format!("{} holds no stage-1 optimiser state", p.display()));
            };
            cfg.set_model(&ck.model.config);
            (ck.model, state)
        }
        None => {
            let model = WorldModel::new(cfg.model())?;
            let state = Stage1State::new(&model);
            (model, state)
        }
    };
    cfg.validate()?;
    write_config(&cfg, out)?;
    let tc = cfg.train();
    let scen = scenarios_or(&cfg, scenarios, cfg.train_seed, cfg.train_count)?;
    let clips = scen
        .iter()
        .map(|s| TrainingClip::latest(s, tc.stage1_frames))
        .collect::<drivewm::Result<Vec<_>>>()?;
    let mut log = open_log(&out.join("stage1.csv"), Stage1Losses::csv_header(), resume.is_some())?;
    let mut io = Ok(());
    train_stage1(&mut model, &mut state, &clips, &tc, tc.stage1_steps, |step, l| {
        if io.is_ok() {
            io = writeln!(log, "{}", l.csv_row(step));
        }
        if step % 100 == 0 {
            eprintln!("stage 1 step {step}: loss {:.5}", l.total);
        }
    })?;
    io?;
    log.flush()?;
    let ck = Checkpoint { model, train: tc, stage1: Some(state), stage2: None };
    ck.save(&out.join("checkpoint.bin"))?;
    Ok(())
}

fn train2(
    mut cfg: RunConfig,
    scenarios: Option<&Path>,
    init: Option<&Path>,
    resume: Option<&Path>,
    steps: Option<u64>,
    out: &Path,
) -> Result<()> {
    if let Some(s) = steps {
        cfg.stage2_iters = s;
    }
    let (mut model, mut state) = match (init, resume) {
        (_, Some(p)) => {
            let ck = load_checkpoint(p)?;
            let Some(state) = ck.stage2 else {
                return usage(format!("{} holds no stage-2 optimiser state", p.display()));
            };
            (ck.model, state)
        }
        (Some(p), None) => {
            let ck = load_checkpoint(p)?;
            let state = Stage2State::new(&ck.model);
            (ck.model, state)
        }
        (None, None) => return usage("stage 2 requires --init <stage-1 checkpoint>"),
    };
    cfg.set_model(&model.config);
    cfg.validate()?;
    write_config(&cfg, out)?;
    let tc = cfg.train();
    let scen = scenarios_or(&cfg, scenarios, cfg.train_seed, cfg.train_count)?;
    let items = scen
        .iter()
        .map(|s| Stage2Item::new(&model, s.seed, &TrainingClip::latest(s, tc.stage2_frames)?))
        .collect::<drivewm::Result<Vec<_>>>()?;
    let mut log = open_log(&out.join("stage2.csv"), Stage2Stats::csv_header(), resume.is_some())?;
    let mut io = Ok(());
    train_stage2(&mut model, &mut state, &items, &scen, &tc, tc.stage2_iters, |iter, s| {
        if io.is_ok() {
            io = writeln!(log, "{}", s.csv_row(iter));
        }
        if iter % 10 == 0 {
            eprintln!("stage 2 iter {iter}: mean reward {:.4}", s.mean_reward);
        }
    })?;
    io?;
    log.flush()?;
    let ck = Checkpoint { model, train: tc, stage1: None, stage2: Some(state) };
    ck.save(&out.join("checkpoint.bin"))?;
    Ok(())
}

fn baseline_planner(b: Baseline) -> Box<dyn Planner> {
    match b {
        Baseline::ZeroMotion => Box::new(ZeroMotion),
        Baseline::ConstantVelocity => Box::new(ConstantVelocity),
        Baseline::Expert => Box::new(Expert),
    }
}

/// The checkpoint (if any) and the resolved configuration.
fn planner_model(cfg: &mut RunConfig, ckpt: Option<&Path>, baseline: Option<Baseline>) -> Result<Option<WorldModel>> {
    match (ckpt, baseline) {
        (Some(_), Some(_)) => usage("give either --ckpt or --baseline"),
        (None, None) => usage("one of --ckpt or --baseline is required"),
        (None, Some(_)) => Ok(None),
        (Some(p), None) => {
            let ck = load_checkpoint(p)?;
            cfg.set_model(&ck.model.config);
            cfg.validate()?;
            Ok(Some(ck.model))
        }
    }
}

fn eval(
    mut cfg: RunConfig,
    ckpt: Option<&Path>,
    scenarios: Option<&Path>,
    baseline: Option<Baseline>,
    forecasts: bool,
    out: &Path,
) -> Result<()> {
    let model = planner_model(&mut cfg, ckpt, baseline)?;
    if forecasts && model.is_none() {
        return usage("--dump-forecasts needs --ckpt");
    }
    write_config(&cfg, out)?;
    let scen = scenarios_or(&cfg, scenarios, cfg.eval_seed, cfg.eval_count)?;
    let hash = config_hash(&cfg);
    let th = cfg.thresholds();
    let report = match (&model, baseline) {
        (Some(m), _) => {
            let p = ModelPlanner { model: m, frames: cfg.eval_frames, steps: cfg.eval_steps, seed: cfg.seed };
            run_suite(&p, &scen, &th, &hash)?
        }
        (None, Some(b)) => run_suite(baseline_planner(b).as_ref(), &scen, &th, &hash)?,
        (None, None) => unreachable!(),
    };
    report.write(out)?;
    if let (true, Some(m)) = (forecasts, &model) {
        let f = BufWriter::new(File::create(out.join("forecasts.csv"))?);
        dump_forecasts(m, &scen, cfg.eval_frames, cfg.eval_steps, cfg.seed, f)?;
    }
    println!("{}: mean aggregate {:.4}, mean reward {:.4}", report.planner, report.mean_aggregate, report.mean_reward);
    Ok(())
}

fn rollout(
    mut cfg: RunConfig,
    ckpt: Option<&Path>,
    scenarios: Option<&Path>,
    index: usize,
    baseline: Option<Baseline>,
    render: bool,
    out: &Path,
) -> Result<()> {
    let model = planner_model(&mut cfg, ckpt, baseline)?;
    write_config(&cfg, out)?;
    let scenario = match scenarios {
        Some(p) => {
            let all = load_scenarios(p)?;
            let n = all.len();
            match all.into_iter().nth(index) {
                Some(s) => s,
                None => return usage(format!("--index {index} out of range ({n} scenarios)")),
            }
        }
        None => generate(&cfg, cfg.eval_seed + index as u64, 1)?.remove(0),
    };
    let planner: Box<dyn Planner + '_> = match (&model, baseline) {
        (Some(m), _) => Box::new(ModelPlanner { model: m, frames: cfg.eval_frames, steps: cfg.eval_steps, seed: cfg.seed }),
        (None, Some(b)) => baseline_planner(b),
        (None, None) => unreachable!(),
    };
    let plan = planner.plan(&scenario)?;
    if !plan.is_finite() {
        bail!(drivewm::Error::Numerical("planner produced non-finite waypoints".into()));
    }
    let result = rollout_controller(&scenario, &plan);
    let score = score_scenario(planner.as_ref(), &scenario, &cfg.thresholds())?;
    let r = Rollout { scenario: &scenario, plan: &plan, result: &result };
    fs::write(out.join("trace.csv"), r.trace_csv())?;
    fs::write(out.join("score.csv"), r.score_csv(&score.scores, score.aggregate, score.reward))?;
    if render {
        for k in 1..=result.realized.len() {
            fs::write(out.join(format!("frame_{k:02}.svg")), r.svg(k))?;
        }
    }
    Ok(())
}
