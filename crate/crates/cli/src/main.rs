use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tfdl::config::{RunConfig, Seeds};
use tfdl::net::checkpoint::ModelKind;
use tfdl::pipeline::{self, STUDENT_CKPT, TEACHER_CKPT};
use tfdl::plot::write_scatter;
use tfdl::toydata::{read_points_csv, write_points_csv};
use tfdl::{par, Error, Exec, Result};

#[derive(Parser)]
#[command(name = "tfdl", version, about = "Flow-matching teacher, TrigFlow conversion and few-step distillation on 2D toy data")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON); defaults are used when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, overriding the config's `out_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Base seed; replaces every seed in the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct WithCkpt {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to read; defaults to the usual file in the output directory.
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct WithSteps {
    #[command(flatten)]
    inner: WithCkpt,
    #[arg(long, value_parser = parse_steps)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the flow-matching teacher.
    Pretrain(Common),
    /// Distill the teacher into a few-step student.
    Distill(WithCkpt),
    /// Draw samples from a student (or a teacher checkpoint, via Euler).
    Sample(WithSteps),
    /// Search the few-step sampling schedule on a student.
    SearchSteps(WithCkpt),
    /// Sample and score against a held-out reference set.
    Eval(WithSteps),
    /// Render the training data and any sample CSVs as SVG scatters.
    Plot(Common),
}

fn parse_steps(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(n @ (1 | 2 | 4)) => Ok(n),
        _ => Err(format!("expected 1, 2 or 4, got {s:?}")),
    }
}

fn load_config(c: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seeds = Seeds::from_base(seed);
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn ckpt_path(arg: &Option<PathBuf>, out: &Path, default: &str) -> PathBuf {
    arg.clone().unwrap_or_else(|| out.join(default))
}

/// Samples from whatever the checkpoint holds, with labels from the
/// held-out reference stream so they match an `n`-point reference set.
fn draw_samples(cfg: &RunConfig, ckpt: &Path, steps: usize, n: usize) -> Result<(ndarray::Array2<f64>, Vec<usize>, String)> {
    let (net, meta, sigma_d) = pipeline::load_model(ckpt, None)?;
    let labels = pipeline::reference_data(cfg, n)?.labels;
    let seed = cfg.seeds.sample;
    let scale = cfg.sampling.cfg_scale;
    if meta.kind == ModelKind::Teacher {
        let euler = cfg.sampling.euler_steps;
        let x = pipeline::sample_teacher(&net, sigma_d, euler, &labels, scale, seed, Exec::Parallel)?;
        Ok((x, labels, format!("teacher_euler{euler}")))
    } else {
        let sched = pipeline::schedule_for(cfg, steps, sigma_d)?;
        let x = pipeline::sample_student(&net, sigma_d, &sched, &labels, scale, seed, Exec::Parallel)?;
        Ok((x, labels, format!("{steps}step")))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Pretrain(c) => {
            let (cfg, out) = load_config(&c)?;
            cfg.save(&out.join("config.json"))?;
            let data = pipeline::training_data(&cfg)?;
            let run = pipeline::pretrain(&cfg, &data, Some(&out))?;
            let last = run.curve.last().map_or(f64::NAN, |p| p.1);
            println!("teacher: {} iters, final loss {last:.4}, wrote {}", cfg.teacher.iters, out.join(TEACHER_CKPT).display());
        }
        Command::Distill(a) => {
            let (cfg, out) = load_config(&a.common)?;
            let ckpt = ckpt_path(&a.ckpt, &out, TEACHER_CKPT);
            let (teacher, _, _) = pipeline::load_model(&ckpt, Some(ModelKind::Teacher))?;
            let data = pipeline::training_data(&cfg)?;
            let state = pipeline::distill(&cfg, &cfg.distill, teacher, &data, Some(&out))?;
            println!("student: {} steps, wrote {}", state.steps_done, out.join(STUDENT_CKPT).display());
        }
        Command::Sample(a) => {
            let (cfg, out) = load_config(&a.inner.common)?;
            let ckpt = ckpt_path(&a.inner.ckpt, &out, STUDENT_CKPT);
            let steps = a.steps.unwrap_or(cfg.sampling.steps);
            let (x, labels, tag) = draw_samples(&cfg, &ckpt, steps, cfg.sampling.n_samples)?;
            let csv = out.join(format!("samples_{tag}.csv"));
            write_points_csv(&csv, &x, &labels)?;
            write_scatter(&out.join(format!("samples_{tag}.svg")), x.view(), &labels, &tag)?;
            println!("wrote {}", csv.display());
        }
        Command::SearchSteps(a) => {
            let (cfg, out) = load_config(&a.common)?;
            let ckpt = ckpt_path(&a.ckpt, &out, STUDENT_CKPT);
            let (student, _, sigma_d) = pipeline::load_model(&ckpt, Some(ModelKind::Student))?;
            let res = pipeline::search(&cfg, &student, sigma_d, Some(&out), Exec::Parallel)?;
            println!("schedule {:?}, sliced W2 {:.4}", res.schedule.times(), res.metric);
        }
        Command::Eval(a) => {
            let (cfg, out) = load_config(&a.inner.common)?;
            let ckpt = ckpt_path(&a.inner.ckpt, &out, STUDENT_CKPT);
            let steps = a.steps.unwrap_or(cfg.sampling.steps);
            let n = cfg.eval.n_eval;
            let (x, _, tag) = draw_samples(&cfg, &ckpt, steps, n)?;
            let reference = pipeline::reference_data(&cfg, n)?;
            let report = pipeline::evaluate(&cfg, &x, &reference, Exec::Parallel)?;
            let json = serde_json::to_string_pretty(&report)?;
            fs::write(out.join(format!("metrics_{tag}.json")), &json)?;
            println!("{json}");
        }
        Command::Plot(c) => {
            let (cfg, out) = load_config(&c)?;
            let data = pipeline::training_data(&cfg)?;
            write_scatter(&out.join("data.svg"), data.points_array().view(), &data.labels, "data")?;
            let mut entries: Vec<PathBuf> = fs::read_dir(&out)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.starts_with("samples_") && name.ends_with(".csv")
                })
                .collect();
            entries.sort();
            for path in &entries {
                let (x, labels) = read_points_csv(path)?;
                let title = path.file_stem().and_then(|s| s.to_str()).unwrap_or("samples");
                write_scatter(&path.with_extension("svg"), x.view(), &labels, title)?;
            }
            println!("wrote {} plots to {}", entries.len() + 1, out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 2,
        Error::Config(_) | Error::MissingFile(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    par::init_threads_from_env();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
