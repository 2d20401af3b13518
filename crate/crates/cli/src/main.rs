use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use overlapreg::io::{cmd_eval, cmd_gen, cmd_register, cmd_train, load_checkpoint, read_cloud, write_cloud, RunConfig};
use overlapreg::matching::{RansacConfig, SamplerKind, SamplerMode};
use overlapreg::Error;

#[derive(Parser)]
#[command(name = "overlapreg", version, about = "Overlap-aware registration of partial point clouds")]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true, env = "OVERLAPREG_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default run configuration as JSON.
    Config,
    /// Generate synthetic pairs with JSON sidecars.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs; defaults to `dataset.eval_pairs`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a model; writes the checkpoint and epoch log into `--out`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Register a source cloud onto a target cloud.
    Register {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
        /// Write the transformed source cloud here.
        #[arg(long)]
        aligned: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a generated pair directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        sampling: Sampling,
    },
}

#[derive(Args)]
struct Sampling {
    /// Interest-point sampler: rand, topk or prob.
    #[arg(long)]
    mode: Option<String>,
    /// Points sampled per cloud; clamped to the cloud size.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// RANSAC inlier threshold in meters.
    #[arg(long)]
    threshold: Option<f64>,
}

impl Sampling {
    fn apply(&self, sampler: &mut SamplerMode, ransac: &mut RansacConfig) -> Result<(), Error> {
        if let Some(m) = &self.mode {
            sampler.kind = m.parse::<SamplerKind>().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(k) = self.k {
            if k == 0 {
                return Err(Error::Config("--k must be positive".into()));
            }
            sampler.k = k;
        }
        if let Some(n) = self.iterations {
            ransac.iterations = n;
        }
        if let Some(t) = self.threshold {
            ransac.inlier_threshold = t;
        }
        Ok(())
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, Error> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFiniteGradient(_)
        | Error::NonFiniteLoss { .. }
        | Error::DegenerateGeometry
        | Error::RegistrationFailed
        | Error::NoPositivePairs => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Config => println!("{}", RunConfig::default().to_json()?),
        Command::Gen { config, out, count } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let n = count.unwrap_or(cfg.dataset.eval_pairs);
            let records = cmd_gen(&cfg, n, &out)?;
            println!("wrote {} pairs to {}", records.len(), out.display());
        }
        Command::Train { config, out, resume } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            let resume = resume.map(|p| load_checkpoint(&p)).transpose()?;
            let (_, reports) = cmd_train(&cfg, &out, resume)?;
            if let Some(r) = reports.last() {
                println!("epoch {}: circle {:.4} overlap {:.4} matchability {:.4}", r.epoch, r.circle, r.overlap, r.matchability);
            }
        }
        Command::Register { ckpt, source, target, sampling, aligned } => {
            let cfg = load_config(None, cli.seed)?;
            let (mut sampler, mut ransac) = (cfg.sampler, cfg.ransac);
            sampling.apply(&mut sampler, &mut ransac)?;
            let ck = load_checkpoint(&ckpt)?;
            let (src, tgt) = (read_cloud(&source)?, read_cloud(&target)?);
            let out = cmd_register(&ck, &src, &tgt, &sampler, &ransac)?;
            let t = out.transform.to_row_major();
            for row in t.chunks(4) {
                println!("{} {} {} {}", row[0], row[1], row[2], row[3]);
            }
            println!("# {} correspondences, {} inliers, k = {}", out.correspondences.len(), out.inliers, out.k);
            if let Some(path) = aligned {
                write_cloud(&out.transform.apply(&src), &path)?;
            }
        }
        Command::Eval { ckpt, pairs, out, config, sampling } => {
            let mut cfg = load_config(config.as_deref(), cli.seed)?;
            sampling.apply(&mut cfg.sampler, &mut cfg.ransac)?;
            let ck = load_checkpoint(&ckpt)?;
            let res = cmd_eval(&ck, &pairs, &cfg, &out)?;
            let s = &res.summary;
            println!(
                "{} pairs: FMR {:.3} RR {:.3} mean IR {:.4} RRE {:.3} RTE {:.4}",
                s.n_pairs, s.fmr, s.rr, s.mean_ir, s.mean_rre, s.mean_rte
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
