//! `irc`: dataset generation, training, evaluation and rollout export.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use irc_core::autoencoder::{gaussian_baseline, AeTrainer, Autoencoder, LogRow};
use irc_core::checkpoint::Checkpoint;
use irc_core::datasets::{
    ljp_dataset, load_cloud, load_ljp, load_shapes, load_trajectory, read_manifest, save_frames,
    save_ljp, save_shapes, toy_dataset,
};
use irc_core::dynamics::{
    center_on_initial, encode_trajectory, sim_loss, SimState, SimTrainer, Simulator,
};
use irc_core::transport::{chamfer, exact_emd, sinkhorn, SinkhornConfig};
use irc_core::PointCloud;

use config::{Overrides, RunConfig};

const AE_CKPT: &str = "ae.ckpt";
const SIM_CKPT: &str = "sim.ckpt";

/// Bad invocation or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(
    name = "irc",
    version,
    about = "Point-cloud auto-encoding and latent simulation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Shapes,
    Ljp,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Emd,
    Sinkhorn,
    Chamfer,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the toy shape set or Lennard-Jones trajectories.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[command(flatten)]
        o: Overrides,
    },
    /// Train the auto-encoder on a shapes dataset.
    TrainAe {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train the latent simulator on encoded Lennard-Jones trajectories.
    TrainSim {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory of a `train-ae` run.
        #[arg(long)]
        ae: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        resume: bool,
    },
    /// Distance between clouds and their reconstructions.
    EvalAe {
        /// Auto-encoder checkpoint; `config.json` must sit beside it.
        #[arg(long, required_unless_present = "baseline")]
        ckpt: Option<PathBuf>,
        /// Shapes dataset directory or a single cloud file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "emd")]
        metric: Metric,
        /// Score the moment-matched Gaussian of this training set instead.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// CSV destination; defaults to `eval_<metric>.csv` in the current directory.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Roll the simulator forward and export the frames.
    Rollout {
        /// Simulator checkpoint; `config.json` must sit beside it.
        #[arg(long)]
        ckpt: PathBuf,
        /// Initial frame.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        export: PathBuf,
        /// Trajectory directory scored step by step into `loss.csv`.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Inputs are physical frames to pass through the run's encoder.
        #[arg(long)]
        encode: bool,
    },
    /// Distance between two cloud files.
    Dist {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value = "emd")]
        metric: Metric,
    },
}

/// Decimal text with six significant digits.
fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.5}");
    }
    let decimals = (5 - x.abs().log10().floor() as i64).max(0) as usize;
    format!("{x:.decimals$}")
}

fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iteration,loss,wall_seconds\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.iteration, r.loss, r.wall_seconds);
    }
    s
}

/// Rows of an existing log that precede `iteration`.
fn read_log(path: &Path, before: u64) -> Result<Vec<LogRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            bail!(UsageError(format!(
                "malformed log line {line:?} in {}",
                path.display()
            )));
        }
        let row = LogRow {
            iteration: f[0].parse()?,
            loss: f[1].parse()?,
            wall_seconds: f[2].parse()?,
        };
        if row.iteration < before {
            rows.push(row);
        }
    }
    Ok(rows)
}

fn distance(metric: Metric, a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(match metric {
        Metric::Emd => exact_emd(a, b)?.0,
        Metric::Sinkhorn => sinkhorn(a, b, &SinkhornConfig::default())?.0,
        Metric::Chamfer => chamfer(a, b)?,
    })
}

/// `(raw, per-point)`; transport metrics are computed per point already.
fn both_conventions(metric: Metric, value: f64, n: usize) -> (f64, f64) {
    match metric {
        Metric::Chamfer => (value, value / n as f64),
        Metric::Emd | Metric::Sinkhorn => (value * n as f64, value),
    }
}

fn gen_data(kind: DataKind, o: &Overrides) -> Result<()> {
    let cfg = RunConfig::resolve(o)?;
    let out = cfg.out_dir()?;
    match kind {
        DataKind::Shapes => save_shapes(&toy_dataset(&cfg.shapes)?, out)?,
        DataKind::Ljp => save_ljp(&ljp_dataset(&cfg.ljp)?, out)?,
    }
    cfg.write(out)
}

fn train_ae(
    o: &Overrides,
    data: Option<PathBuf>,
    iterations: Option<u64>,
    resume: bool,
) -> Result<()> {
    let mut cfg = RunConfig::resolve(o)?;
    if data.is_some() {
        cfg.data = data;
    }
    if let Some(n) = iterations {
        cfg.train_ae.iterations = n;
    }
    cfg.autoencoder
        .encoder
        .validate()
        .map_err(|e| UsageError(e.to_string()))?;
    let out = cfg.out_dir()?.to_path_buf();
    let clouds = load_shapes(cfg.data_dir()?)?;
    cfg.write(&out)?;
    let (ckpt_path, log_path) = (out.join(AE_CKPT), out.join("ae_log.csv"));
    let (mut trainer, mut rows) = if resume {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let t = AeTrainer::resume(&cfg.autoencoder, cfg.train_ae.clone(), &clouds, &ckpt)?;
        let rows = read_log(&log_path, t.iteration)?;
        (t, rows)
    } else {
        let model = Autoencoder::new(&cfg.autoencoder, cfg.seed)?;
        (
            AeTrainer::new(model, cfg.train_ae.clone(), &clouds)?,
            Vec::new(),
        )
    };
    let result = trainer.run(&clouds, |r| rows.push(*r));
    fs::write(&log_path, log_csv(&rows))?;
    result?;
    trainer.to_checkpoint().save(&ckpt_path)?;
    println!(
        "trained {} iterations, final loss {}",
        trainer.iteration,
        rows.last().map_or(f64::NAN, |r| r.loss)
    );
    Ok(())
}

fn load_ae(run: &Path) -> Result<Autoencoder> {
    let cfg = RunConfig::beside(run)?;
    let ckpt = if run.is_dir() {
        run.join(AE_CKPT)
    } else {
        run.to_path_buf()
    };
    Ok(Autoencoder::from_checkpoint(
        &cfg.autoencoder,
        &Checkpoint::load(&ckpt)?,
    )?)
}

fn latent_trajectories(ae: &Autoencoder, data: &Path, center: bool) -> Result<Vec<Vec<SimState>>> {
    load_ljp(data)?
        .iter()
        .map(|t| {
            let frames = encode_trajectory(ae, t)?;
            Ok(if center {
                center_on_initial(&frames)
            } else {
                frames
            })
        })
        .collect()
}

fn train_sim(
    o: &Overrides,
    data: Option<PathBuf>,
    ae: Option<PathBuf>,
    iterations: Option<u64>,
    resume: bool,
) -> Result<()> {
    let mut cfg = RunConfig::resolve(o)?;
    if data.is_some() {
        cfg.data = data;
    }
    if ae.is_some() {
        cfg.ae_dir = ae;
    }
    if let Some(n) = iterations {
        cfg.train_sim.iterations = n;
    }
    let ae_dir = cfg
        .ae_dir
        .clone()
        .ok_or_else(|| UsageError("no encoder; pass --ae or set \"ae_dir\"".into()))?;
    let model = load_ae(&ae_dir)?;
    cfg.autoencoder = model.config().clone();
    cfg.simulator.channels = model.config().encoder.latent_channels;
    let out = cfg.out_dir()?.to_path_buf();
    let trajs = latent_trajectories(&model, cfg.data_dir()?, cfg.simulator.center_initial)?;
    cfg.write(&out)?;
    let (ckpt_path, log_path) = (out.join(SIM_CKPT), out.join("sim_log.csv"));
    let (mut trainer, mut rows) = if resume {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let t = SimTrainer::resume(&cfg.simulator, cfg.train_sim.clone(), &ckpt)?;
        let rows = read_log(&log_path, t.iteration)?;
        (t, rows)
    } else {
        let sim = Simulator::new(&cfg.simulator, cfg.seed)?;
        (SimTrainer::new(sim, cfg.train_sim.clone())?, Vec::new())
    };
    let result = trainer.run(&trajs, |r| rows.push(*r));
    fs::write(&log_path, log_csv(&rows))?;
    result?;
    trainer.to_checkpoint().save(&ckpt_path)?;
    println!(
        "trained {} iterations, final loss {}",
        trainer.iteration,
        rows.last().map_or(f64::NAN, |r| r.loss)
    );
    Ok(())
}

/// Clouds of a dataset directory with their names, or one file.
fn named_clouds(path: &Path) -> Result<Vec<(String, PointCloud)>> {
    if path.is_dir() {
        let names = read_manifest(path)?.items;
        let clouds = load_shapes(path)?;
        Ok(names.into_iter().zip(clouds).collect())
    } else {
        let name = path.file_name().map_or_else(
            || path.display().to_string(),
            |n| n.to_string_lossy().into(),
        );
        Ok(vec![(name, load_cloud(path)?)])
    }
}

fn eval_ae(
    ckpt: Option<&Path>,
    data: &Path,
    metric: Metric,
    baseline: Option<&Path>,
    csv: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let clouds = named_clouds(data)?;
    let train = baseline.map(load_shapes).transpose()?;
    let model = match (&train, ckpt) {
        (None, Some(c)) => Some(load_ae(c)?),
        _ => None,
    };
    let mut out = String::from("index,name,raw,per_point\n");
    let (mut sum_raw, mut sum_pp) = (0.0, 0.0);
    for (i, (name, cloud)) in clouds.iter().enumerate() {
        let noise = seed.wrapping_add(i as u64);
        let pred = match (&train, &model) {
            (Some(t), _) => gaussian_baseline(t, cloud.len(), noise)?,
            (None, Some(m)) => m.reconstruct(cloud, noise)?,
            (None, None) => unreachable!("clap requires --ckpt without --baseline"),
        };
        let (raw, pp) = both_conventions(
            metric,
            distance(metric, &pred, &cloud.without_features())?,
            cloud.len(),
        );
        sum_raw += raw;
        sum_pp += pp;
        println!("{name} {} {}", sig6(raw), sig6(pp));
        let _ = writeln!(out, "{i},{name},{raw},{pp}");
    }
    let n = clouds.len() as f64;
    println!("mean {} {}", sig6(sum_raw / n), sig6(sum_pp / n));
    let name = match metric {
        Metric::Emd => "emd",
        Metric::Sinkhorn => "sinkhorn",
        Metric::Chamfer => "chamfer",
    };
    let default = PathBuf::from(format!("eval_{name}.csv"));
    fs::write(csv.unwrap_or(&default), out)?;
    Ok(())
}

fn rollout(
    ckpt: &Path,
    init: &Path,
    steps: usize,
    export: &Path,
    reference: Option<&Path>,
    encode: bool,
) -> Result<()> {
    let cfg = RunConfig::beside(ckpt)?;
    let sim = Simulator::from_checkpoint(&cfg.simulator, &Checkpoint::load(ckpt)?)?;
    let ae = if encode {
        let dir = cfg
            .ae_dir
            .as_deref()
            .ok_or_else(|| UsageError("--encode needs \"ae_dir\" in the run config".into()))?;
        Some(load_ae(dir)?)
    } else {
        None
    };
    let prepare = |c: PointCloud| -> Result<SimState> {
        match &ae {
            Some(m) => Ok(m.encode(&c)?),
            None => Ok(c),
        }
    };
    let mut frames = vec![prepare(load_cloud(init)?)?];
    if let Some(dir) = reference {
        let traj = load_trajectory(dir)?;
        let count = traj.frames.len();
        if count < steps + 1 {
            bail!(UsageError(format!(
                "reference has {count} frames, {steps} steps need {}",
                steps + 1
            )));
        }
        for f in traj.frames.into_iter().take(steps + 1) {
            frames.push(prepare(f)?);
        }
    }
    let c = sim.config().channels;
    if let Some(bad) = frames
        .iter()
        .find(|f| f.channels() != c || f.len() != frames[0].len())
    {
        bail!(UsageError(format!(
            "frame with {} points and {} channels does not match the simulator ({} points, {c} channels)",
            bad.len(),
            bad.channels(),
            frames[0].len()
        )));
    }
    if cfg.simulator.center_initial {
        frames = center_on_initial(&frames);
    }
    let start = frames.remove(0);
    let run = sim.rollout(&start, steps)?;
    let channels: Vec<String> = (0..c).map(|i| format!("f{i}")).collect();
    save_frames(&run.frames, 1.0, &channels, export)?;
    let summary = serde_json::json!({
        "steps": steps,
        "frames": run.frames.len(),
        "diverged": run.diverged,
    });
    fs::write(
        export.join("rollout.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    if reference.is_some() {
        let sk = &cfg.train_sim.sinkhorn;
        let mut out = String::from("step,loss,static_loss\n");
        for (t, pred) in run.frames.iter().enumerate() {
            let _ = writeln!(
                out,
                "{t},{},{}",
                sim_loss(pred, &frames[t], sk)?,
                sim_loss(&start, &frames[t], sk)?
            );
        }
        fs::write(export.join("loss.csv"), out)?;
    }
    if run.diverged {
        eprintln!("rollout diverged after {} steps", run.frames.len() - 1);
    }
    Ok(())
}

fn dist(a: &Path, b: &Path, metric: Metric) -> Result<()> {
    let (a, b) = (load_cloud(a)?, load_cloud(b)?);
    println!(
        "{}",
        sig6(distance(
            metric,
            &a.without_features(),
            &b.without_features()
        )?)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { kind, o } => gen_data(kind, &o),
        Cmd::TrainAe {
            o,
            data,
            iterations,
            resume,
        } => train_ae(&o, data, iterations, resume),
        Cmd::TrainSim {
            o,
            data,
            ae,
            iterations,
            resume,
        } => train_sim(&o, data, ae, iterations, resume),
        Cmd::EvalAe {
            ckpt,
            data,
            metric,
            baseline,
            csv,
            seed,
        } => eval_ae(
            ckpt.as_deref(),
            &data,
            metric,
            baseline.as_deref(),
            csv.as_deref(),
            seed,
        ),
        Cmd::Rollout {
            ckpt,
            init,
            steps,
            export,
            reference,
            encode,
        } => rollout(&ckpt, &init, steps, &export, reference.as_deref(), encode),
        Cmd::Dist { a, b, metric } => dist(&a, &b, metric),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e.chain().any(|c| {
        c.downcast_ref::<irc_core::Error>()
            .is_some_and(irc_core::Error::is_numerical)
    });
    if numerical {
        3
    } else {
        2
    }
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
