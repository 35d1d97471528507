use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use simseg::cotgen::{
    package_dataset, read_ndjson, run_batch, Assistant, HttpAssistant, MockAssistant, SampleInput,
    SplitRatios, SystemClock, DEFAULT_MAX_ROUNDS,
};
use simseg::harness::{emit_heatmap, run_eval, sweep_tau, sweep_tts, DatasetSource, RunConfig};
use simseg::raster::GrayImage;
use simseg::rvls2m::rvls2m_trace_from_seg;
use simseg::synthdata::{generate, write_dataset};
use simseg::toy::ToyModel;
use simseg::Error;

#[derive(Parser)]
#[command(name = "simseg", version, about = "Similarity-prompted segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Gen {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate the pipeline on a dataset.
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sweep the number of selected cells and the grid size.
    SweepTau {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "12,24,36,48")]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        g: Vec<usize>,
    },
    /// Sweep reasoning paths and prompt perturbations.
    SweepTts {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "m-values", value_delimiter = ',', default_value = "1,2,4,8")]
        m_values: Vec<usize>,
        #[arg(long = "n-values", value_delimiter = ',', default_value = "1,2,4,8")]
        n_values: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Generate and review reasoning chains, then package the approved ones.
    Cot(CotArgs),
    /// Render the similarity map or region matrix of one image as SVG.
    Heatmap {
        #[command(flatten)]
        run: RunArgs,
        /// PGM image; defaults to the first sample of the configured dataset.
        #[arg(long)]
        image: Option<PathBuf>,
        /// `map` or `regions`.
        #[arg(long, default_value = "map")]
        level: String,
        #[arg(long)]
        svg: PathBuf,
    },
}

/// Configuration sources, applied in order: defaults, `--config` file,
/// the dedicated flags, then each `--set`.
#[derive(Args)]
struct RunArgs {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any configuration key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    dataset: Option<String>,
    /// Number of synthetic samples.
    #[arg(long)]
    count: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    grid: Option<String>,
    /// topk:K, fraction:F or threshold:T.
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    m: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    noise: Option<String>,
    /// oracle or reference-free.
    #[arg(long)]
    selection: Option<String>,
    #[arg(long)]
    plant_truth: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("dataset", &self.dataset),
            ("synth.count", &self.count),
            ("out", &self.out),
            ("seed", &self.seed),
            ("threads", &self.threads),
            ("grid", &self.grid),
            ("tau", &self.tau),
            ("tts.m", &self.m),
            ("tts.n", &self.n),
            ("tts.noise", &self.noise),
            ("tts.selection", &self.selection),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if self.plant_truth {
            cfg.set("plant_truth", "true")?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct CotArgs {
    /// Newline-delimited JSON sample inputs.
    #[arg(long)]
    samples: PathBuf,
    /// Newline-delimited JSON replies for a scripted medical assistant.
    #[arg(long, conflicts_with = "medical_url")]
    medical_script: Option<PathBuf>,
    #[arg(long)]
    medical_url: Option<String>,
    #[arg(long, conflicts_with = "critic_url")]
    critic_script: Option<PathBuf>,
    #[arg(long)]
    critic_url: Option<String>,
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
    rounds: usize,
    #[arg(long, default_value_t = 30_000)]
    timeout_ms: u64,
    #[arg(long, default_value_t = 2)]
    retries: usize,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
    split: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn endpoint(
    script: &Option<PathBuf>,
    url: &Option<String>,
    timeout_ms: u64,
    retries: usize,
    role: &str,
) -> Result<Box<dyn Assistant>, Error> {
    match (script, url) {
        (Some(path), _) => Ok(Box::new(MockAssistant::from_ndjson(&std::fs::read_to_string(path)?)?)),
        (None, Some(url)) => Ok(Box::new(HttpAssistant::new(
            url.clone(),
            Duration::from_millis(timeout_ms),
            retries,
        ))),
        (None, None) => Err(Error::Config(format!("{role} assistant needs a script or a URL"))),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn sweep_output(cfg: &RunConfig, name: &str, csv: &str) -> Result<(), Error> {
    if let Some(dir) = &cfg.out_dir {
        write_text(&dir.join(name), csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen { run } => {
            let cfg = run.resolve()?;
            let DatasetSource::Synth { spec, count } = &cfg.dataset else {
                return Err(Error::Config("gen needs a synthetic dataset, not a directory".into()));
            };
            let out = cfg
                .out_dir
                .as_ref()
                .ok_or_else(|| Error::Config("gen needs --out".into()))?;
            let samples = generate(spec, *count)?;
            write_dataset(out, Some(spec), &samples)?;
            println!("{} samples written to {}", samples.len(), out.display());
        }
        Command::Eval { run } => {
            let result = run_eval(&run.resolve()?)?;
            print!("{}", result.report.to_csv());
        }
        Command::SweepTau { run, k, g } => {
            let cfg = run.resolve()?;
            let result = sweep_tau(&cfg, &k, &g)?;
            sweep_output(&cfg, "sweep_tau.csv", &result.to_csv())?;
        }
        Command::SweepTts {
            run,
            m_values,
            n_values,
            trials,
        } => {
            let cfg = run.resolve()?;
            let result = sweep_tts(&cfg, &m_values, &n_values, trials)?;
            sweep_output(&cfg, "sweep_tts.csv", &result.to_csv())?;
        }
        Command::Cot(args) => {
            let [train, val, test] = args.split[..] else {
                return Err(Error::Config("--split needs three fractions".into()));
            };
            let ratios = SplitRatios { train, val, test };
            ratios.validate()?;
            let samples: Vec<SampleInput> = read_ndjson(&std::fs::read_to_string(&args.samples)?)?;
            let mut medical = endpoint(&args.medical_script, &args.medical_url, args.timeout_ms, args.retries, "medical")?;
            let mut critic = endpoint(&args.critic_script, &args.critic_url, args.timeout_ms, args.retries, "critic")?;
            let records = run_batch(&samples, medical.as_mut(), critic.as_mut(), args.rounds, &SystemClock, &args.out)?;
            let manifest = package_dataset(&records, ratios, args.split_seed)?;
            write_text(
                &args.out.join("manifest.json"),
                &(serde_json::to_string_pretty(&manifest)? + "\n"),
            )?;
            println!(
                "{} records, {} approved: {} train / {} val / {} test",
                records.len(),
                manifest.train.len() + manifest.val.len() + manifest.test.len(),
                manifest.train.len(),
                manifest.val.len(),
                manifest.test.len()
            );
        }
        Command::Heatmap { run, image, level, svg } => {
            let cfg = run.resolve()?;
            let image = match image {
                Some(path) => GrayImage::read_pgm(&path)?,
                None => cfg
                    .load_samples()?
                    .into_iter()
                    .next()
                    .ok_or(Error::EmptyDataset)?
                    .image,
            };
            let model = ToyModel::new(cfg.model.clone())?;
            let trace = rvls2m_trace_from_seg(&model.encode(&image)?, model.anchor().clone(), cfg.grid, cfg.tau)?;
            match level.as_str() {
                "map" => emit_heatmap(&trace.map, &svg)?,
                "regions" => emit_heatmap(&trace.regions, &svg)?,
                other => return Err(Error::Config(format!("unknown heatmap level {other:?}"))),
            }
        }
    }
    Ok(())
}

fn error_document(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_document("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_document(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
