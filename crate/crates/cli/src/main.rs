//! `hct`: synthetic data generation, training, evaluation, gradient checks
//! and parameter accounting.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data or I/O
//! error, 4 numerical failure.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hct_core::harness::{
    self, evaluate, gradcheck_cmd, paramcount_cmd, train::check_taxonomy, Checkpoint, Overrides, ParamTable, RunConfig,
};
use hct_core::model::Stage;
use hct_core::objectives::TaxonomySizes;
use hct_core::synthdata::{self as dsio, generate_dataset, GenerateOptions, Split};
use hct_core::{HctError, Result};

#[derive(Parser)]
#[command(name = "hct", version, about = "Hierarchical context transformer on synthetic workflow video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset container and its manifest.
    GenData(GenData),
    /// Train a model from a run configuration, then evaluate it on the test split.
    Train(Train),
    /// Evaluate a checkpoint on a dataset split.
    Eval(Eval),
    /// Finite-difference check of the full model on a tiny variant of a configuration.
    Gradcheck(Gradcheck),
    /// Total and tunable parameter counts under each freeze preset.
    Paramcount(Paramcount),
}

#[derive(Args)]
struct GenData {
    /// Output container path; the manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// TOML file of generation options; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    taxonomy_seed: Option<u64>,
    /// Total clips, split 4:1 between train and test.
    #[arg(long, conflicts_with_all = ["train_clips", "test_clips"])]
    clips: Option<usize>,
    #[arg(long)]
    train_clips: Option<usize>,
    #[arg(long)]
    test_clips: Option<usize>,
    /// Class counts as `phases,steps,actions,instruments`.
    #[arg(long)]
    sizes: Option<TaxonomySizes>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    label_noise: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Ps,
    Ia,
    Joint,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Ps => Stage::Ps,
            StageArg::Ia => Stage::Ia,
            StageArg::Joint => Stage::Joint,
        }
    }
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a checkpoint written with the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Accept a checkpoint whose configuration hash differs.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Check the checkpoint against this configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long)]
    config: PathBuf,
    /// Coordinates sampled per tensor; all when omitted.
    #[arg(long)]
    coords: Option<usize>,
}

#[derive(Args)]
struct Paramcount {
    #[arg(long)]
    config: PathBuf,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Paramcount(a) => paramcount(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn gen_data(a: GenData) -> Result<ExitCode> {
    let mut opts = match &a.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| HctError::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| HctError::Config(format!("{}: {e}", p.display())))?
        }
        None => GenerateOptions::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { opts.$f = v; } )* };
    }
    set!(seed, taxonomy_seed, train_clips, test_clips, noise, label_noise, sizes);
    if let Some(n) = a.clips {
        opts.test_clips = n / 5;
        opts.train_clips = n - opts.test_clips;
    }
    let data = generate_dataset(&opts)?;
    dsio::write_dataset(&a.out, &data, &data.manifest(&opts))?;
    eprintln!(
        "wrote {} clips ({} train, {} test) to {}",
        data.samples.len(),
        opts.train_clips,
        opts.test_clips,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn write_report(dir: &Path, name: &str, report: &hct_core::metrics::MetricsReport, method: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{name}.json")), report.to_json()?)?;
    fs::write(dir.join(format!("{name}.txt")), report.to_table(method))?;
    Ok(())
}

fn method_label(cfg: &RunConfig) -> &'static str {
    match (cfg.model.use_hram, cfg.model.icl.pairs.is_empty()) {
        (false, true) => "Baseline",
        (false, false) => "+ICL",
        (true, true) => "+HRAM",
        (true, false) => "HCT",
    }
}

fn train(a: Train) -> Result<ExitCode> {
    let overrides = Overrides {
        seed: a.seed,
        stage: a.stage.map(Stage::from),
        epochs: a.epochs,
        batch_size: a.batch_size,
        data: a.data,
        out_dir: a.out_dir,
    };
    let cfg = RunConfig::load(&a.config)?.apply(&overrides)?;
    let data_path =
        cfg.data.clone().ok_or_else(|| HctError::Config("no dataset path (set `data` or --data)".into()))?;
    let data = dsio::read_dataset(&data_path)?;
    let train_set = data.train();
    let mut log_file = match &cfg.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(fs::File::create(dir.join("train.log.jsonl"))?))
        }
        None => None,
    };
    let mut tee = Tee { file: log_file.as_mut().map(|f| f as &mut dyn Write), out: io::stdout() };
    let outcome = match &a.resume {
        Some(p) => {
            let mut ck = Checkpoint::load(p, Some(&cfg), a.force)?;
            check_taxonomy(&ck.model, data.taxonomy.sizes)?;
            ck.config = cfg.clone();
            harness::train::resume(ck, &train_set, Some(&mut tee))?
        }
        None => harness::train(&cfg, data.taxonomy.sizes, &train_set, Some(&mut tee))?,
    };
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    let report = evaluate(&outcome.checkpoint.model, &data.test())?;
    let label = method_label(&cfg);
    print!("{}", report.to_table(label));
    if let Some(dir) = &cfg.out_dir {
        write_report(dir, "metrics", &report, label)?;
        for p in &outcome.saved {
            eprintln!("saved {}", p.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Writes log lines to the run's log file and to standard output.
struct Tee<'a> {
    file: Option<&'a mut dyn Write>,
    out: io::Stdout,
}

impl Write for Tee<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if let Some(f) = self.file.as_deref_mut() {
            f.write_all(buf)?;
        }
        self.out.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        if let Some(f) = self.file.as_deref_mut() {
            f.flush()?;
        }
        self.out.flush()
    }
}

fn eval(a: Eval) -> Result<ExitCode> {
    let expected = a.config.as_deref().map(RunConfig::load).transpose()?;
    let ck = Checkpoint::load(&a.ckpt, expected.as_ref(), a.force)?;
    let data = dsio::read_dataset(&a.data)?;
    check_taxonomy(&ck.model, data.taxonomy.sizes)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let clips: Vec<_> = data.split(split).collect();
    let report = evaluate(&ck.model, &clips)?;
    print!("{}", report.to_table(method_label(&ck.config)));
    if let Some(p) = &a.json {
        fs::write(p, report.to_json()?)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: Gradcheck) -> Result<ExitCode> {
    let cfg = RunConfig::load(&a.config)?;
    let s = gradcheck_cmd(&cfg, a.coords)?;
    let r = &s.report;
    println!(
        "{}",
        serde_json::json!({
            "tokens": s.tokens,
            "channels": s.channels,
            "coords_checked": r.coords_checked,
            "max_rel_error": r.max_rel_error,
            "worst_tensor": r.worst_input,
            "worst_coord": r.worst_coord,
            "analytic": r.analytic,
            "numeric": r.numeric,
            "tolerance": harness::GRADCHECK_TOLERANCE,
            "passed": s.passed,
        })
    );
    if !s.passed {
        return Err(HctError::Numerical(format!("gradient check failed: max relative error {:.3e}", r.max_rel_error)));
    }
    Ok(ExitCode::SUCCESS)
}

fn paramcount(a: Paramcount) -> Result<ExitCode> {
    let cfg = RunConfig::load(&a.config)?;
    let rows = paramcount_cmd(&cfg, Default::default())?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        print!("{}", ParamTable(&rows));
    }
    Ok(ExitCode::SUCCESS)
}
