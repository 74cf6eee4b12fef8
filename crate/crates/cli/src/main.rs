use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use eqprop::oracles::{self, Budget};
use eqprop::train::{self, GradientMethod, Precision, RunOutput};
use eqprop::{toy, Checkpoint, Connection, Error, LossHead, RunConfig};

mod selftest;

#[derive(Parser, Debug)]
#[command(
    name = "eqprop",
    version,
    about = "Equilibrium propagation for convergent recurrent ConvNets"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Gradient method: one-sided, random-sign, symmetric, vf-sym, kp-vf-sym or bptt.
    #[arg(long, global = true)]
    estimator: Option<String>,
    /// Nudging strength.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Storage precision of the parameters during training.
    #[arg(long, global = true, value_enum)]
    device_precision: Option<DevicePrecision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DevicePrecision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Head {
    SquaredError,
    SoftmaxReadout,
}

impl From<Head> for LossHead {
    fn from(h: Head) -> Self {
        match h {
            Head::SquaredError => LossHead::SquaredError,
            Head::SoftmaxReadout => LossHead::SoftmaxReadout,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network as described by --config.
    Train,
    /// Test error and loss of a checkpoint on the test split of --config.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Estimator error against finite differences over halving nudging
    /// strengths, starting at --beta.
    GradCheck {
        /// Loss head of the built-in problem (ignored with --config).
        #[arg(long, value_enum, default_value = "softmax-readout")]
        head: Head,
        /// Number of nudging strengths in the sweep.
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value_t = 60)]
        free_steps: usize,
        #[arg(long, default_value_t = 15)]
        nudged_steps: usize,
    },
    /// Truncated estimator and BPTT curves over the nudged phase (CSV).
    Gdu {
        #[arg(long, value_enum, default_value = "softmax-readout")]
        head: Head,
        #[arg(long, default_value_t = 60)]
        free_steps: usize,
        #[arg(long, default_value_t = 15)]
        nudged_steps: usize,
    },
    /// Forward/backward weight alignment angles during Kolen-Pollack
    /// training (CSV).
    Align {
        /// Iterations for the built-in task (ignored with --config).
        #[arg(long, default_value_t = 200)]
        iterations: usize,
    },
    /// Runs the invariant checks on toy networks.
    Selftest,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Config(Error),
    Run(Error),
    Io(PathBuf, io::Error),
    Checks(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig { .. } => Failure::Config(e),
            e => Failure::Run(e),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = match f {
                Failure::Usage(_) | Failure::Config(_) => 2,
                _ => 1,
            };
            match f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Config(e) => eprintln!("error: {e}"),
                Failure::Run(e) => eprintln!("error: {e}"),
                Failure::Io(p, e) => eprintln!("error: {}: {e}", p.display()),
                Failure::Checks(n) => eprintln!("{n} self-test check(s) failed"),
            }
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Evaluate { checkpoint } => cmd_evaluate(cli, checkpoint),
        Command::GradCheck {
            head,
            levels,
            free_steps,
            nudged_steps,
        } => cmd_grad_check(cli, (*head).into(), *levels, *free_steps, *nudged_steps),
        Command::Gdu {
            head,
            free_steps,
            nudged_steps,
        } => cmd_gdu(cli, (*head).into(), *free_steps, *nudged_steps),
        Command::Align { iterations } => cmd_align(cli, *iterations),
        Command::Selftest => {
            let failed = selftest::run(&mut io::stdout().lock());
            if failed == 0 {
                Ok(())
            } else {
                Err(Failure::Checks(failed))
            }
        }
    }
}

/// Loads --config and applies the command-line overrides.
fn load_config(cli: &Cli) -> std::result::Result<Option<RunConfig>, Failure> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let mut cfg = RunConfig::load(path)?;
    let hp = &mut cfg.hyperparams;
    if let Some(s) = cli.seed {
        hp.seed = s;
    }
    if let Some(e) = &cli.estimator {
        hp.estimator = e.parse::<GradientMethod>().map_err(|e| {
            Failure::Config(Error::InvalidConfig {
                field: "estimator".into(),
                reason: e.to_string(),
            })
        })?;
    }
    if let Some(b) = cli.beta {
        hp.beta = b;
    }
    if let Some(p) = cli.device_precision {
        hp.precision = match p {
            DevicePrecision::F32 => Precision::F32,
            DevicePrecision::F64 => Precision::F64,
        };
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.clone());
    }
    Ok(Some(cfg))
}

fn require_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    load_config(cli)?.ok_or_else(|| Failure::Usage("this command needs --config <path>".into()))
}

fn out_writer(dir: Option<&Path>, name: &str) -> std::result::Result<Box<dyn Write>, Failure> {
    match dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Failure::Io(d.to_path_buf(), e))?;
            let p = d.join(name);
            let f = File::create(&p).map_err(|e| Failure::Io(p.clone(), e))?;
            eprintln!("writing {}", p.display());
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn cmd_train(cli: &Cli) -> Outcome {
    let cfg = require_config(cli)?;
    let net = cfg.validate()?;
    let (train_set, test_set) = cfg.load_datasets()?;
    let hp = &cfg.hyperparams;
    println!(
        "training a {}-layer network on {} examples ({} held out), {} epochs, estimator {}",
        net.arch().conv.len() + net.arch().fc.len(),
        train_set.len(),
        test_set.len(),
        hp.epochs,
        hp.estimator
    );
    let output = RunOutput {
        dir: cfg.out_dir.clone(),
    };
    let per_epoch = train_set.len().div_ceil(hp.batch_size);
    let report = train::train(&net, hp, &train_set, &test_set, None, &output, |e| {
        if e.iter % per_epoch == 0 {
            println!(
                "epoch {:>4} done, last batch loss {:.4}",
                e.epoch + 1,
                e.train_loss
            );
        }
    })?;
    println!("epoch,train_err,test_err,train_loss,residual_free");
    for h in &report.history {
        println!(
            "{},{:.4},{:.4},{:.4},{:.3e}",
            h.epoch, h.train_err, h.test_err, h.train_loss, h.residual_free
        );
    }
    if report.collapsed {
        println!("warning: test error stayed at chance level; the run collapsed");
    }
    if let Some(p) = output.metrics_path() {
        println!("metrics: {}", p.display());
    }
    Ok(())
}

fn cmd_evaluate(cli: &Cli, checkpoint: &Path) -> Outcome {
    let mut cfg = require_config(cli)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    cfg.architecture = ckpt.architecture.clone();
    cfg.data.normalize = false;
    let net = eqprop::Network::new(ckpt.architecture.clone())?;
    let (_, mut test_set) = cfg.load_datasets()?;
    if let Some(norm) = &ckpt.norm {
        test_set = test_set.normalized(norm)?;
    }
    let (err, loss) = train::evaluate(
        &net,
        &ckpt.params,
        &test_set,
        ckpt.hyperparams.free_steps,
        ckpt.hyperparams.batch_size,
    )?;
    println!(
        "epoch {} examples {} test_err {:.4} test_loss {:.4}",
        ckpt.epoch,
        test_set.len(),
        err,
        loss
    );
    Ok(())
}

fn check_problem(cli: &Cli, head: LossHead) -> std::result::Result<toy::Problem, Failure> {
    let seed = cli.seed.unwrap_or(1);
    match load_config(cli)? {
        Some(cfg) => {
            let mut arch = cfg.architecture;
            arch.connection = Connection::Bidirectional;
            Ok(toy::problem_for(arch, seed)?)
        }
        None => Ok(toy::problem(head, Connection::Bidirectional, seed)),
    }
}

fn cmd_grad_check(
    cli: &Cli,
    head: LossHead,
    levels: usize,
    free_steps: usize,
    nudged_steps: usize,
) -> Outcome {
    if levels < 2 {
        return Err(Failure::Usage("--levels must be at least 2".into()));
    }
    let p = check_problem(cli, head)?;
    let beta = cli.beta.unwrap_or(0.5);
    let betas: Vec<f64> = (0..levels)
        .map(|i| beta / f64::powi(2.0, i as i32))
        .collect();
    let budget = Budget {
        free_steps,
        nudged_steps,
        ..Budget::default()
    };
    let rows = oracles::beta_sweep(&p.net, &p.params, &p.x, &p.y, &betas, budget)?;
    println!(
        "{:>10} {:>16} {:>16} {:>10} {:>10}",
        "beta", "one_sided_err", "symmetric_err", "ratio_1", "ratio_2"
    );
    let ratios = oracles::halving_ratios(&rows);
    for (i, r) in rows.iter().enumerate() {
        let (r1, r2) = if i == 0 {
            ("-".to_string(), "-".to_string())
        } else {
            (
                format!("{:.3}", ratios[i - 1].0),
                format!("{:.3}", ratios[i - 1].1),
            )
        };
        println!(
            "{:>10.5} {:>16.6e} {:>16.6e} {:>10} {:>10}",
            r.beta, r.one_sided_error, r.symmetric_error, r1, r2
        );
    }
    let one: Vec<f64> = rows.iter().map(|r| r.one_sided_error).collect();
    let sym: Vec<f64> = rows.iter().map(|r| r.symmetric_error).collect();
    println!(
        "order slope one-sided: {:.3}",
        oracles::order_slope(&betas, &one)
    );
    println!(
        "order slope symmetric: {:.3}",
        oracles::order_slope(&betas, &sym)
    );
    Ok(())
}

fn cmd_gdu(cli: &Cli, head: LossHead, free_steps: usize, nudged_steps: usize) -> Outcome {
    let p = check_problem(cli, head)?;
    let beta = cli.beta.unwrap_or(0.01);
    let curve = oracles::gdu_curves(
        &p.net,
        &p.params,
        &p.x,
        &p.y,
        free_steps,
        nudged_steps,
        beta,
    )?;
    let dir = cli.out.as_deref();
    let mut w = out_writer(dir, "gdu.csv")?;
    let io_fail = |e| {
        Failure::Io(
            dir.map_or_else(|| PathBuf::from("<stdout>"), |d| d.join("gdu.csv")),
            e,
        )
    };
    curve.write_csv(&mut w).map_err(io_fail)?;
    w.flush().map_err(io_fail)?;
    let t = curve.len() - 1;
    eprintln!(
        "beta {beta}: cosine vs BPTT at t = {t}: symmetric {:?}, one-sided {:?}",
        curve.layer_cosines(t, true),
        curve.layer_cosines(t, false)
    );
    Ok(())
}

fn cmd_align(cli: &Cli, iterations: usize) -> Outcome {
    let (net, hp, train_set, test_set, initial) = match load_config(cli)? {
        Some(cfg) => {
            let net = cfg.validate()?;
            train::require_feedback(&net)?;
            let (tr, te) = cfg.load_datasets()?;
            (net, cfg.hyperparams, tr, te, None)
        }
        None => {
            let net = eqprop::Network::new(toy::architecture(
                LossHead::SoftmaxReadout,
                Connection::Unidirectional,
            ))?;
            let mut hp = toy::alignment_hyperparams(iterations, cli.seed.unwrap_or(0));
            if let Some(b) = cli.beta {
                hp.beta = b;
            }
            let (tr, te) = toy::task();
            let init = toy::lively_params(&net, hp.seed);
            (net, hp, tr, te, Some(init))
        }
    };
    let dir = cli.out.as_deref();
    let mut w = out_writer(dir, "align.csv")?;
    let mut rows: Vec<String> = Vec::new();
    let mut failure: Option<Error> = None;
    train::train(
        &net,
        &hp,
        &train_set,
        &test_set,
        initial,
        &RunOutput::default(),
        |e| match train::alignment_angles(e.params) {
            Ok(angles) => rows.extend(
                angles
                    .iter()
                    .map(|(layer, a)| format!("{},{},{:.9}", e.iter, layer, a)),
            ),
            Err(err) => failure = failure.take().or(Some(err)),
        },
    )?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let path = dir.map_or_else(|| PathBuf::from("<stdout>"), |d| d.join("align.csv"));
    let io_fail = |e| Failure::Io(path.clone(), e);
    writeln!(w, "iter,layer,angle_deg").map_err(io_fail)?;
    for r in &rows {
        writeln!(w, "{r}").map_err(io_fail)?;
    }
    w.flush().map_err(io_fail)?;
    Ok(())
}
