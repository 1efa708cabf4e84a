use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use imitate_autodiff::GradCheck;
use imitate_core::config::{DataConfig, RunConfig};
use imitate_core::eval::{evaluate, Tasks};
use imitate_core::gradcheck::{check_model, tiny_config};
use imitate_core::model::Model;
use imitate_core::run::{self, Grid};
use imitate_core::synth::{self, Split};
use imitate_core::{checkpoint, corpus, Error};

const CODE_VERSION: &str = env!("IMITATE_CODE_VERSION");

#[derive(Parser)]
#[command(name = "imitate", version = CODE_VERSION, about = "Hierarchical image-report contrastive pretraining on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DataConfig::default().seed)]
        seed: u64,
        /// Records per split as train,valid,test.
        #[arg(long, value_delimiter = ',', default_values_t = DataConfig::default().counts)]
        counts: Vec<usize>,
        /// Number of latent conditions.
        #[arg(long, default_value_t = DataConfig::default().k)]
        k: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain from a TOML config into a run directory.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; defaults to <output root>/runs/<config hash>.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate the config and report the parameter count only.
        #[arg(long)]
        dry_run: bool,
        /// Evaluations to run after training.
        #[arg(long, value_enum, value_delimiter = ',')]
        tasks: Vec<Task>,
    },
    /// Evaluate a run's final checkpoint.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Corpus directory; defaults to the run config's corpus.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Task::Zeroshot, Task::Retrieval, Task::Probe])]
        tasks: Vec<Task>,
    },
    /// Run every cell of an ablation grid, resuming completed cells.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Defaults to <output root>/ablations/<grid file stem>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients of the full objective on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
        /// Entries perturbed per parameter tensor (all by default).
        #[arg(long)]
        max_entries: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Zeroshot,
    Retrieval,
    Probe,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.to_possible_value().expect("no skipped variants").get_name())
    }
}

fn tasks(list: &[Task]) -> Tasks {
    let names: Vec<String> = list.iter().map(Task::to_string).collect();
    Tasks::from_names(&names).expect("clap restricts task names")
}

/// Process outcome with the documented exit codes.
enum Failure {
    Validation(String),
    Divergence(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::Divergence(e.to_string()),
            Error::Io { .. } | Error::Csv(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn output_root() -> PathBuf {
    std::env::var_os("IMITATE_OUTPUT_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn is_non_empty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn generate(out: &Path, seed: u64, counts: &[usize], k: usize, image_size: usize, force: bool) -> Result<(), Failure> {
    if is_non_empty_dir(out) {
        if !force {
            return Err(Failure::Validation(format!(
                "{} exists and is not empty (pass --force to replace it)",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    }
    let data = DataConfig {
        seed,
        k,
        counts: [counts[0], counts[1], counts[2]],
        ..DataConfig::default()
    };
    data.validate()?;
    if image_size == 0 || image_size % 16 != 0 {
        return Err(Failure::Validation(format!("--image-size must be a positive multiple of 16, got {image_size}")));
    }
    let c = synth::generate(&data, image_size)?;
    corpus::save(&c, out)?;
    println!("corpus written to {}", out.display());
    println!("  generator version {}, seed {seed}", c.manifest.generator_version);
    println!("  records train/valid/test: {}/{}/{}", counts[0], counts[1], counts[2]);
    println!("  images {image_size}x{image_size}, vocabulary {} tokens", c.vocab.len());
    let train = c.split(Split::Train);
    for (i, name) in c.condition_names().iter().enumerate() {
        let n = train.iter().filter(|r| r.conditions[i]).count();
        println!("  {name:<14} train prevalence {:.3}", n as f64 / train.len() as f64);
    }
    Ok(())
}

fn pretrain(config: &Path, out: Option<PathBuf>, dry_run: bool, task_list: &[Task]) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let model = Model::new(&cfg);
    let params = model.init(cfg.train.seed);
    if dry_run {
        println!("config ok: {}", config.display());
        println!("trainable parameters: {}", params.num_scalars());
        println!("aggregator tokens per image: {} (+1 CLS)", cfg.token_count());
        return Ok(());
    }
    let dir = out
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| output_root().join("runs").join(&cfg.hash()[..12]));
    let corpus = run::corpus_for(&cfg)?;
    match run::execute(&cfg, &corpus, &dir, &tasks(task_list), CODE_VERSION) {
        Ok(s) => {
            println!("run directory: {}", dir.display());
            println!("steps {}, epochs {}{}", s.steps, s.epochs_run, if s.stopped_early { " (stopped early)" } else { "" });
            if let (Some(a), Some(b)) = (s.initial_loss, s.final_loss) {
                println!("training loss {a:.4} -> {b:.4}");
            }
            if s.eval.zero_shot.is_some() || s.eval.retrieval.is_some() || !s.eval.linear_probe.is_empty() {
                println!("{}", serde_json::to_string_pretty(&s.eval).expect("serializable"));
            }
            Ok(())
        }
        Err(e @ Error::NonFinite { .. }) => {
            let path = run::checkpoint_dir(&dir).join(format!("{}.bin", run::LAST_GOOD));
            Err(Failure::Divergence(format!("{e}; last good checkpoint: {}", path.display())))
        }
        Err(e) => Err(e.into()),
    }
}

fn evaluate_run(run_dir: &Path, corpus_dir: Option<PathBuf>, task_list: &[Task]) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(&run_dir.join("config.toml"))?;
    let (params, _) = checkpoint::load(&run::checkpoint_dir(run_dir), run::FINAL, Some(&cfg))?;
    if corpus_dir.is_some() {
        cfg.corpus = corpus_dir;
    }
    let corpus = run::corpus_for(&cfg)?;
    let report = evaluate(&corpus, &cfg, &params, &tasks(task_list))?;
    let text = serde_json::to_string_pretty(&report).expect("serializable");
    let path = run_dir.join("eval.json");
    fs::write(&path, format!("{text}\n")).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    println!("{text}");
    Ok(())
}

fn ablate(grid_path: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let grid = Grid::load(grid_path)?;
    let dir = out.unwrap_or_else(|| {
        let stem = grid_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "grid".into());
        output_root().join("ablations").join(stem)
    });
    let rows = run::ablate(&grid, &dir, CODE_VERSION)?;
    println!("{} cells; results in {}", rows.len(), dir.join("results.csv").display());
    Ok(())
}

fn gradcheck(batch: usize, seed: u64, max_entries: Option<usize>) -> Result<(), Failure> {
    let checker = GradCheck {
        max_entries,
        ..GradCheck::default()
    };
    let check = check_model(&tiny_config(), batch, seed, &checker)?;
    for (r, name) in check.report.inputs.iter().zip(&check.names) {
        println!("{name:<40} entries {:>5}  rel err {:.3e}", r.checked, r.rel_error);
    }
    let worst = check.report.max_rel_error();
    println!("max relative error {worst:.3e} (tolerance {:.0e})", check.report.tolerance);
    if check.report.passed() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("gradient check failed: {worst:.3e}")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate {
            out,
            seed,
            counts,
            k,
            image_size,
            force,
        } => {
            if counts.len() != 3 {
                Cli::command()
                    .error(ErrorKind::WrongNumberOfValues, "--counts takes exactly three values: train,valid,test")
                    .exit();
            }
            generate(&out, seed, &counts, k, image_size, force)
        }
        Command::Pretrain {
            config,
            out,
            dry_run,
            tasks,
        } => pretrain(&config, out, dry_run, &tasks),
        Command::Evaluate { run, corpus, tasks } => evaluate_run(&run, corpus, &tasks),
        Command::Ablate { grid, out } => ablate(&grid, out),
        Command::Gradcheck {
            batch,
            seed,
            max_entries,
        } => gradcheck(batch, seed, max_entries),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Validation(m) => (3, m),
                Failure::Divergence(m) => (4, m),
                Failure::Runtime(m) => (1, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
