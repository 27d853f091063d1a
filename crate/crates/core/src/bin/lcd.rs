use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lcd_core::commands::{self, EMA_CKPT, STUDENT_CKPT, TEACHER_CKPT};
use lcd_core::config::{ExperimentConfig, SamplerKind};
use lcd_core::Error;

/// Latent consistency distillation experiments on synthetic latents.
#[derive(Parser, Debug)]
#[command(name = "lcd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `paths.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the diffusion teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Distill a consistency student from a teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint (default: <out>/teacher.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Draw latents from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint (default: <out>/student.ckpt, or ema.ckpt with --use-ema).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Consistency steps N.
        #[arg(long)]
        steps: Option<usize>,
        /// Use the EMA network instead of the student.
        #[arg(long)]
        use_ema: bool,
        /// `lcm` (default) or `teacher` for the full ancestral chain.
        #[arg(long)]
        sampler: Option<String>,
        /// Number of samples; overrides `inference.samples`.
        #[arg(long)]
        samples: Option<usize>,
        /// Output latent file (default: <out>/samples_<method>.lat).
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Score latent files against the configured distribution.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Latent files written by `sample`.
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Time the samplers.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to benchmark (default: <out>/student.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated sampler list, e.g. teacher-100,lcm-1.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
}

fn load(common: &Common) -> lcd_core::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.out = out.clone();
    }
    cfg.validate()?;
    let out = cfg.paths.out.clone();
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn or_default(p: Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    p.unwrap_or_else(|| out.join(name))
}

fn run(cli: Cli) -> lcd_core::Result<()> {
    match cli.command {
        Command::TrainTeacher { common } => {
            let (cfg, out) = load(&common)?;
            let r = commands::train_teacher(&cfg, &out)?;
            println!("teacher {} hash {}", r.checkpoint.display(), r.hash);
            if let Some(l) = r.final_loss {
                println!("final loss {l:.6e}");
            }
        }
        Command::Distill { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            let teacher = or_default(checkpoint, &out, TEACHER_CKPT);
            let r = commands::distill(&cfg, Some(&teacher), &out)?;
            println!("student {} ema {}", r.student.display(), r.ema.display());
            println!("teacher hash {} final gap {:.6e}", r.teacher_hash, r.final_gap);
        }
        Command::Sample { common, checkpoint, steps, use_ema, sampler, samples, file } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(n) = steps {
                cfg.inference.steps = n;
                cfg.inference.taus = None;
            }
            if let Some(n) = samples {
                cfg.inference.samples = n;
            }
            cfg.inference.use_ema |= use_ema;
            if let Some(s) = sampler {
                cfg.inference.sampler = match s.as_str() {
                    "lcm" => SamplerKind::Lcm,
                    "teacher" => SamplerKind::Teacher,
                    other => return Err(Error::Config(format!("unknown sampler '{other}'"))),
                };
            }
            cfg.validate()?;
            let default_ckpt = match cfg.inference.sampler {
                SamplerKind::Teacher => TEACHER_CKPT,
                SamplerKind::Lcm if cfg.inference.use_ema => EMA_CKPT,
                SamplerKind::Lcm => STUDENT_CKPT,
            };
            let ckpt = or_default(checkpoint, &out, default_ckpt);
            let label = match cfg.inference.sampler {
                SamplerKind::Teacher => format!("teacher-{}", cfg.schedule.steps),
                SamplerKind::Lcm => format!("lcm-{}", commands::inference_taus(&cfg)?.evaluations()),
            };
            let file = or_default(file, &out, &format!("samples_{label}.lat"));
            let meta = commands::sample(&cfg, &ckpt, &file)?;
            println!("wrote {} ({} samples, taus {:?})", file.display(), meta.samples, meta.taus);
        }
        Command::Eval { common, files } => {
            let (cfg, out) = load(&common)?;
            let report = out.join("eval.csv");
            for r in commands::eval(&cfg, &files, &report)? {
                println!(
                    "{} steps={} mean_err={:.4} cov_err={:.4} accuracy={}",
                    r.file,
                    r.steps.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
                    r.mean_error,
                    r.cov_error,
                    r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
                );
            }
            println!("report {}", report.display());
        }
        Command::Bench { common, checkpoint, methods } => {
            let (cfg, out) = load(&common)?;
            let ckpt = or_default(checkpoint, &out, STUDENT_CKPT);
            let methods = methods.unwrap_or_else(|| cfg.bench.methods.clone());
            for r in commands::bench(&cfg, &ckpt, &methods, &out)? {
                println!("{:<12} steps={:<4} median={:.0} ns/sample", r.method, r.steps, r.wall_ns_median);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
