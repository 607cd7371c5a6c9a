use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use teleposture::calib::{estimate_segment_lengths, CalibrationOptions, CalibrationRoutine};
use teleposture::compare::compare;
use teleposture::filter::{validity_from_config, ParticleFilter, PostureEstimate};
use teleposture::ik::{offline_traj_ik, online_ik, IkReport};
use teleposture::io::{self, PipelineConfig, PostureTrajectory};
use teleposture::model::{HumanModel, JointVector};
use teleposture::rula::{max_score, sampled_distribution, score_distribution, score_posture, RulaScore};
use teleposture::synth::{self, benchmark_noise, SyntheticTask, TaskKind};
use teleposture::{Error, Result};

#[derive(Parser)]
#[command(name = "teleposture", version, about = "Teleoperator posture estimation from stylus trajectories")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task (observations + ground truth) or calibration recordings.
    Synth(SynthArgs),
    /// Estimate segment lengths from calibration recordings and write a model file.
    Calibrate(CalibrateArgs),
    /// Run the particle filter on a stylus trajectory.
    Estimate(EstimateArgs),
    /// Run a least-squares IK baseline on a stylus trajectory.
    Ik(IkArgs),
    /// Score postures with RULA.
    Rula(RulaArgs),
    /// Compare two posture trajectories.
    Compare(CompareArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// line_x, line_y, circle, two_blocks, static, or calibration.
    #[arg(long)]
    task: String,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    duration: f64,
    #[arg(long, default_value_t = 50.0)]
    rate: f64,
    /// Position noise std in meters (calibration recordings use only this).
    #[arg(long, default_value_t = 0.002)]
    sigma_pos: f64,
    /// Orientation noise std in radians.
    #[arg(long, default_value_t = 0.01)]
    sigma_ori: f64,
    #[arg(long)]
    noiseless: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct CalibrateArgs {
    /// One CSV per routine.
    #[arg(long, num_args = 1.., required = true)]
    recordings: Vec<PathBuf>,
    /// Model whose limits and base pose are kept; defaults to the bundled one.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON with the circle fits.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EstimateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Estimates as JSON lines.
    #[arg(long)]
    out: PathBuf,
    /// Write the full particle cloud every k steps.
    #[arg(long, requires = "dump")]
    dump_every: Option<usize>,
    #[arg(long)]
    dump: Option<PathBuf>,
    /// RULA score distribution over the particle cloud, one CSV row per step.
    #[arg(long)]
    rula: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum IkMethod {
    Online,
    Offline,
}

#[derive(clap::Args)]
struct IkArgs {
    #[arg(long, value_enum)]
    method: IkMethod,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Posture trajectory CSV.
    #[arg(long)]
    out: PathBuf,
    /// Solver diagnostics JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RulaArgs {
    /// Estimates (.jsonl) or a posture trajectory (.csv).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-step CSV: t, expected, std, grand_map, action_level_map.
    #[arg(long)]
    out: PathBuf,
    /// Maximum-score summary JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Draws per step from the estimate's per-joint mean and std.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct CompareArgs {
    /// Estimated postures (.jsonl estimates use the most probable particle, or a .csv trajectory).
    #[arg(long)]
    input: PathBuf,
    /// Reference postures, e.g. the synthetic ground truth.
    #[arg(long)]
    against: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Ik(a) => ik_cmd(a),
        Command::Rula(a) => rula_cmd(a),
        Command::Compare(a) => compare_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_model(path: &Option<PathBuf>) -> Result<HumanModel> {
    match path {
        Some(p) => io::read_model(p),
        None => Ok(HumanModel::default_seated()),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => io::read_config(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn synth_cmd(a: SynthArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    std::fs::create_dir_all(&a.out_dir)?;
    if a.task == "calibration" {
        let noise = if a.noiseless { 0.0 } else { a.sigma_pos };
        for (k, routine) in CalibrationRoutine::ALL.into_iter().enumerate() {
            let rec = synth::generate_calibration(
                &model,
                routine,
                synth::default_arc_deg(routine),
                noise,
                a.seed.wrapping_add(k as u64),
            )?;
            io::write_calibration(&a.out_dir.join(format!("calib_{}.csv", routine.name())), &rec)?;
        }
        return Ok(());
    }
    let kind = TaskKind::from_name(&a.task)
        .ok_or_else(|| Error::InvalidInput(format!("unknown task {:?}", a.task)))?;
    let noise = (!a.noiseless).then(|| benchmark_noise(a.sigma_pos, a.sigma_ori));
    let task = SyntheticTask::new(kind, a.duration, a.rate, noise, a.seed);
    let run = synth::generate_task(&model, &task)?;
    io::write_trajectory(&a.out_dir.join("observations.csv"), &run.observations)?;
    io::write_postures(
        &a.out_dir.join("truth.csv"),
        &PostureTrajectory {
            times: run.times,
            states: run.truth,
        },
    )?;
    #[derive(Serialize)]
    struct TaskFile<'a> {
        format_version: u32,
        #[serde(flatten)]
        task: &'a SyntheticTask,
    }
    io::write_json(
        &a.out_dir.join("task.json"),
        &TaskFile {
            format_version: io::FORMAT_VERSION,
            task: &task,
        },
    )?;
    Ok(())
}

fn calibrate_cmd(a: CalibrateArgs) -> Result<()> {
    let template = load_model(&a.model)?;
    let recordings = a
        .recordings
        .iter()
        .map(|p| io::read_calibration(p, None))
        .collect::<Result<Vec<_>>>()?;
    let result = estimate_segment_lengths(&recordings, &template, &CalibrationOptions::default())?;
    io::write_model(&a.out, &template.with_lengths(result.lengths)?)?;
    if let Some(p) = &a.report {
        io::write_json(p, &result)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct RulaRow {
    t: f64,
    expected: f64,
    std: f64,
    grand_map: u8,
    action_level_map: u8,
}

fn write_rula_rows(path: &Path, rows: &[RulaRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

fn estimate_cmd(a: EstimateArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let cfg = load_config(&a.config)?;
    let mut fcfg = cfg.filter.clone();
    if let Some(seed) = a.seed {
        fcfg.seed = seed;
    }
    let observations = io::read_trajectory(&a.input)?;
    let validity = validity_from_config(&model, &fcfg);
    let mut pf = ParticleFilter::new(&model, fcfg)?;
    let mut dump = match (&a.dump, a.dump_every) {
        (Some(p), every) => Some((BufWriter::new(File::create(p)?), every.unwrap_or(1).max(1))),
        (None, _) => None,
    };
    let mut estimates: Vec<PostureEstimate> = Vec::with_capacity(observations.len());
    let mut rula_rows = Vec::new();
    for (k, obs) in observations.iter().enumerate() {
        let e = match pf.step(obs, validity.as_ref()) {
            Ok(e) => e,
            Err(Error::DegenerateFilter { last_estimate, step }) => {
                let mut e = *last_estimate.ok_or(Error::DegenerateFilter {
                    step,
                    last_estimate: None,
                })?;
                e.timestamp = obs.t;
                e
            }
            Err(e) => return Err(e),
        };
        if let Some((w, every)) = dump.as_mut() {
            if k % *every == 0 {
                io::write_particle_dump(w, k, obs.t, pf.particles())?;
            }
        }
        if a.rula.is_some() {
            let dist = score_distribution(pf.particles(), &cfg.rula);
            let map = score_posture(&JointVector::from(e.map_q), &cfg.rula);
            rula_rows.push(RulaRow {
                t: obs.t,
                expected: dist.expected,
                std: dist.std,
                grand_map: map.grand,
                action_level_map: map.action_level,
            });
        }
        estimates.push(e);
    }
    if pf.degenerate_events() > 0 {
        log::warn!("filter recovered from {} degenerate steps", pf.degenerate_events());
    }
    if let Some((mut w, _)) = dump {
        w.flush()?;
    }
    io::write_estimates(&a.out, &estimates)?;
    if let Some(p) = &a.rula {
        write_rula_rows(p, &rula_rows)?;
    }
    Ok(())
}

fn median_dt(times: &[f64]) -> Result<f64> {
    let mut d: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    if d.is_empty() {
        return Err(Error::InvalidInput("trajectory needs at least two samples".into()));
    }
    d.sort_by(|a, b| a.total_cmp(b));
    Ok(d[d.len() / 2])
}

fn ik_cmd(a: IkArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let cfg = load_config(&a.config)?;
    let observations = io::read_trajectory(&a.input)?;
    let times: Vec<f64> = observations.iter().map(|o| o.t).collect();
    let ikcfg = cfg.ik.resolve(&cfg.filter.obs_noise, &cfg.filter.motion, median_dt(&times)?)?;
    let online = online_ik(&observations, &model, &ikcfg)?;
    let solution = match a.method {
        IkMethod::Online => online,
        IkMethod::Offline => offline_traj_ik(&observations, &model, &ikcfg, &online.states)?,
    };
    let r = &solution.report;
    if !r.converged {
        let missed = r.steps.iter().filter(|s| !s.converged).count();
        match a.method {
            IkMethod::Online => log::warn!("online IK did not converge at {missed} of {} steps", r.steps.len()),
            IkMethod::Offline => log::warn!("offline IK stopped after {} iterations without converging", r.iterations),
        }
    }
    io::write_postures(
        &a.out,
        &PostureTrajectory {
            times,
            states: solution.states,
        },
    )?;
    if let Some(p) = &a.report {
        io::write_json::<IkReport>(p, &solution.report)?;
    }
    Ok(())
}

/// Timestamps, most-probable postures and per-joint stds of a posture file.
fn read_postures_any(path: &Path) -> Result<(Vec<f64>, Vec<JointVector>, Vec<JointVector>)> {
    let is_jsonl = matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json"));
    if is_jsonl {
        let est = io::read_estimates(path)?;
        Ok((
            est.iter().map(|e| e.timestamp).collect(),
            est.iter().map(|e| JointVector::from(e.map_q)).collect(),
            est.iter().map(|e| JointVector::from(e.std_q)).collect(),
        ))
    } else {
        let traj = io::read_postures(path)?;
        let n = traj.states.len();
        Ok((
            traj.times,
            traj.states.iter().map(|s| s.q).collect(),
            vec![JointVector::zeros(); n],
        ))
    }
}

#[derive(Serialize)]
struct RulaSummary {
    format_version: u32,
    steps: usize,
    max_index: usize,
    max_t: f64,
    max_score: RulaScore,
    mean_expected: f64,
}

fn rula_cmd(a: RulaArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let is_jsonl = matches!(a.input.extension().and_then(|e| e.to_str()), Some("jsonl" | "json"));
    let (times, map_q, std_q) = read_postures_any(&a.input)?;
    let means: Vec<JointVector> = if is_jsonl {
        io::read_estimates(&a.input)?
            .iter()
            .map(|e| JointVector::from(e.mean_q))
            .collect()
    } else {
        map_q.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut rows = Vec::with_capacity(times.len());
    let mut scores = Vec::with_capacity(times.len());
    for k in 0..times.len() {
        let map = score_posture(&map_q[k], &cfg.rula);
        let (expected, std) = if std_q[k].iter().all(|s| *s == 0.0) {
            let g = score_posture(&means[k], &cfg.rula).grand;
            (f64::from(g), 0.0)
        } else {
            let d = sampled_distribution(&means[k], &std_q[k], a.samples, &cfg.rula, &mut rng);
            (d.expected, d.std)
        };
        rows.push(RulaRow {
            t: times[k],
            expected,
            std,
            grand_map: map.grand,
            action_level_map: map.action_level,
        });
        scores.push(map);
    }
    write_rula_rows(&a.out, &rows)?;
    if let Some(p) = &a.summary {
        let (idx, best) = max_score(&scores)?;
        io::write_json(
            p,
            &RulaSummary {
                format_version: io::FORMAT_VERSION,
                steps: rows.len(),
                max_index: idx,
                max_t: times[idx],
                max_score: best,
                mean_expected: rows.iter().map(|r| r.expected).sum::<f64>() / rows.len() as f64,
            },
        )?;
    }
    Ok(())
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let (t_est, est, _) = read_postures_any(&a.input)?;
    let (t_ref, reference, _) = read_postures_any(&a.against)?;
    if t_est.len() != t_ref.len() || t_est.iter().zip(&t_ref).any(|(x, y)| (x - y).abs() > 1e-9) {
        return Err(Error::InvalidInput(format!(
            "{} and {} are not sampled at the same timestamps",
            a.input.display(),
            a.against.display()
        )));
    }
    let report = compare(&reference, &est, &cfg.rula)?;
    io::write_json(&a.out, &report)?;
    Ok(())
}
