use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dia_core::alignment::PdlVariant;
use dia_core::analysis::analyze_bank;
use dia_core::checkpoint::Checkpoint;
use dia_core::config::{ExperimentConfig, Method};
use dia_core::data::generate_synthetic;
use dia_core::metrics;
use dia_core::pipeline::{Experiment, RunLog, RunPlan, TaskStream};
use dia_core::pretrain;
use dia_core::suite::{run_suite, Arm};
use dia_core::tsai::AdapterBank;
use dia_core::vit::BackboneParams;
use dia_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dia", version, about = "Adapter-based class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train and eval sets as raw binary files.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the incremental stream and write logs and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to `output.dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Backbone cache; defaults to `<out>/backbone.ckpt`.
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Continue from a per-task checkpoint of an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-score a checkpoint on the eval samples of every class it has seen.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `config.toml` of the run that wrote the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Factorize every adapter of a checkpoint and check the subspace identities.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare ablations over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Arms of the standard comparison; ignored when ablation flags are given.
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Collect the metric logs under a directory into gnuplot columns.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    no_pdl: bool,
    #[arg(long)]
    no_pfr: bool,
    #[arg(long)]
    gaussian: bool,
    #[arg(long, value_parser = parse_pdl_variant)]
    pdl_variant: Option<PdlVariant>,
    #[arg(long)]
    skip_alignment: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    tasks: Option<usize>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_pdl_variant(s: &str) -> std::result::Result<PdlVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl Overrides {
    /// True when any flag changes the ablation configuration.
    fn touches_ablation(&self) -> bool {
        self.method.is_some()
            || self.lambda.is_some()
            || self.beta.is_some()
            || self.no_pdl
            || self.no_pfr
            || self.gaussian
            || self.pdl_variant.is_some()
            || self.skip_alignment
    }

    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.method {
            cfg.ablation.method = m;
        }
        if let Some(l) = self.lambda {
            cfg.train.lambda = l;
        }
        if let Some(b) = self.beta {
            cfg.train.beta = b;
        }
        if let Some(v) = self.pdl_variant {
            cfg.ablation.pdl_variant = v;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(t) = self.tasks {
            cfg.data.tasks = t;
        }
        cfg.ablation.pdl &= !self.no_pdl;
        cfg.ablation.pfr &= !self.no_pfr;
        cfg.ablation.gaussian |= self.gaussian;
        cfg.ablation.skip_alignment |= self.skip_alignment;
        cfg.validate()
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_logs(out: &Path, logs: &[RunLog]) -> Result<()> {
    for log in logs {
        write(&out.join(format!("log_{}.json", log.variant)), &log.to_json()?)?;
        if let Some(m) = &log.metrics {
            write(&out.join(format!("metrics_{}.csv", log.variant)), &m.to_csv()?)?;
        }
    }
    Ok(())
}

fn print_logs(logs: &[RunLog]) {
    for log in logs {
        for t in &log.tasks {
            println!(
                "{:<14} task {:>2}  accuracy {:6.2}  average {:6.2}",
                log.variant, t.task, t.accuracy, t.average_accuracy
            );
        }
    }
}

fn train(
    config: Option<&Path>,
    out: Option<PathBuf>,
    backbone: Option<PathBuf>,
    resume: Option<PathBuf>,
    overrides: &Overrides,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    overrides.apply(&mut cfg)?;
    let out = out.unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&out)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let backbone = pretrain::load_or_build(&backbone.unwrap_or_else(|| out.join("backbone.ckpt")), &cfg)?;
    let stream = TaskStream::from_config(&cfg)?;
    let plan = RunPlan::from_config(&cfg);
    let mut exp = match resume {
        Some(path) => Experiment::resume(&cfg, plan, &backbone, &stream, &Checkpoint::load(path)?)?,
        None => Experiment::new(&cfg, plan, &backbone, &stream)?,
    };
    let ckpt_dir = out.join("checkpoints");
    let logs = exp.run(cfg.output.checkpoints.then_some(ckpt_dir.as_path()))?;
    write_logs(&out, &logs)?;
    print_logs(&logs);
    Ok(())
}

/// Returns whether every variant reproduces its logged accuracy.
fn eval(checkpoint: &Path, config: Option<PathBuf>) -> Result<bool> {
    let config = config.unwrap_or_else(|| {
        checkpoint
            .parent()
            .and_then(Path::parent)
            .unwrap_or(Path::new("."))
            .join("config.toml")
    });
    let cfg = ExperimentConfig::load(&config)?;
    let c = Checkpoint::load(checkpoint)?;
    let mut backbone = BackboneParams::from_checkpoint(&c.sub("backbone/"))?;
    backbone.frozen = true;
    let stream = TaskStream::from_config(&cfg)?;
    let exp = Experiment::resume(&cfg, RunPlan::from_config(&cfg), &backbone, &stream, &c)?;
    let mut all_match = true;
    for (name, log) in exp.variant_names().iter().zip(exp.logs()) {
        let acc = exp.evaluate(name)?.accuracy();
        let logged = log.tasks.last().map(|t| t.accuracy);
        let matches = logged == Some(acc);
        all_match &= matches;
        println!(
            "{name:<14} task {:>2}  accuracy {acc:6.2}  logged {}  {}",
            exp.completed_tasks(),
            logged.map_or("-".into(), |a| format!("{a:6.2}")),
            if matches { "match" } else { "MISMATCH" }
        );
    }
    Ok(all_match)
}

/// Returns whether every adapter passed.
fn analyze(checkpoint: &Path, out: Option<PathBuf>) -> Result<bool> {
    let c = Checkpoint::load(checkpoint)?;
    let bank = AdapterBank::from_checkpoint(&c.sub("bank/"))?;
    let reports = analyze_bank(&bank)?;
    for r in &reports {
        println!(
            "task {:>2} block {} {:<9} rank {}  identity {:.2e}  subspace {:.2e}  {}",
            r.task + 1,
            r.block,
            format!("{:?}", r.kind),
            r.effective_rank,
            r.identity_residual,
            r.subspace_residual,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    if let Some(path) = out {
        write(&path, &serde_json::to_string_pretty(&reports)?)?;
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn ablate(
    config: Option<&Path>,
    seeds: &[u64],
    arms: Option<Vec<String>>,
    out: &Path,
    backbone: Option<PathBuf>,
    overrides: &Overrides,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    overrides.apply(&mut cfg)?;
    fs::create_dir_all(out)?;
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let backbone = pretrain::load_or_build(&backbone.unwrap_or_else(|| out.join("backbone.ckpt")), &cfg)?;
    if overrides.touches_ablation() {
        let mut rows = String::from("config,seed,final_accuracy,average_accuracy\n");
        let mut finals = Vec::new();
        for &seed in seeds {
            cfg.seed = seed;
            let stream = TaskStream::from_config(&cfg)?;
            let logs = Experiment::new(&cfg, RunPlan::from_config(&cfg), &backbone, &stream)?.run(None)?;
            let dir = out.join(format!("seed{seed}"));
            write_logs(&dir, &logs)?;
            let m = logs[0].metrics.as_ref().expect("completed run");
            rows.push_str(&format!("custom,{seed},{},{}\n", m.final_accuracy, m.average_accuracy));
            finals.push(m.final_accuracy);
        }
        write(&out.join("ablation.csv"), &rows)?;
        print!("{rows}");
        println!("median final accuracy {:.2}", metrics::median(&finals));
        return Ok(());
    }
    let arms = match arms {
        None => Arm::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| {
                Arm::ALL
                    .into_iter()
                    .find(|a| a.name() == n)
                    .ok_or_else(|| Error::Usage(format!("unknown arm `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let report = run_suite(&cfg, &backbone, seeds, &arms)?;
    write(&out.join("suite.csv"), &report.to_csv()?)?;
    write(&out.join("suite.json"), &serde_json::to_string_pretty(&report)?)?;
    let mut medians = String::from("arm,median_final_accuracy,median_average_accuracy\n");
    for (arm, f, a) in report.median_table() {
        medians.push_str(&format!("{},{f},{a}\n", arm.name()));
    }
    write(&out.join("medians.csv"), &medians)?;
    print!("{medians}");
    Ok(())
}

fn find_logs(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            find_logs(&path, found)?;
        } else if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("log_") && n.ends_with(".json")) {
            found.push(path);
        }
    }
    Ok(())
}

/// One row per task, one column per run; `?` marks missing values.
fn report(runs: &Path, out: Option<PathBuf>) -> Result<()> {
    let mut paths = Vec::new();
    find_logs(runs, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::Usage(format!("no log_*.json files under {}", runs.display())));
    }
    let logs = paths
        .iter()
        .map(|p| RunLog::from_json(&fs::read_to_string(p)?))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = paths
        .iter()
        .map(|p| {
            let rel = p.strip_prefix(runs).unwrap_or(p);
            rel.with_extension("").display().to_string().replace(' ', "_")
        })
        .collect();
    let tasks = logs.iter().map(|l| l.tasks.len()).max().unwrap_or(0);
    let mut text = format!("# accuracy over seen classes after each task\n# task {}\n", labels.join(" "));
    for t in 0..tasks {
        let cols: Vec<String> = logs
            .iter()
            .map(|l| l.tasks.get(t).map_or("?".into(), |e| e.accuracy.to_string()))
            .collect();
        text.push_str(&format!("{} {}\n", t + 1, cols.join(" ")));
    }
    match out {
        Some(p) => write(&p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (train, eval) = generate_synthetic(&cfg.data.synthetic, cfg.seed)?;
            fs::create_dir_all(&out)?;
            train.save(out.join("train.bin"))?;
            eval.save(out.join("eval.bin"))?;
            println!("wrote {} train and {} eval images to {}", train.len(), eval.len(), out.display());
            Ok(true)
        }
        Command::Train {
            config,
            out,
            backbone,
            resume,
            overrides,
        } => train(config.as_deref(), out, backbone, resume, &overrides).map(|_| true),
        Command::Eval { checkpoint, config } => eval(&checkpoint, config),
        Command::Analyze { checkpoint, out } => analyze(&checkpoint, out),
        Command::Ablate {
            config,
            seeds,
            arms,
            out,
            backbone,
            overrides,
        } => ablate(config.as_deref(), &seeds, arms, &out, backbone, &overrides).map(|_| true),
        Command::Report { runs, out } => report(&runs, out).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
