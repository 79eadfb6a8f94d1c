//! `dpgen`: differentially private event-log release from the command line.
//!
//! Exit codes: 0 ok, 2 input error, 3 infeasible privacy target, 4 training
//! divergence.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use dpgen::accountant::{calibrate_noise, Calibration, PrivacySpec};
use dpgen::ddpm::{self, DiffusionConfig};
use dpgen::encoding::one_hot_encode;
use dpgen::log::{ingest_csv, log_stats, write_csv, CsvSchema, SimpleEventLog};
use dpgen::metrics;
use dpgen::release::ReleasedModel;
use dpgen::synth::{synthetic_log, SynthConfig};
use dpgen::travag::{self, TravagConfig};
use dpgen::Error;

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(name = "dpgen", version, about = "Differentially private event-log generation")]
struct Cli {
    /// Seed of every random choice; generated and printed to stderr when absent.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// JSON file with a command config, or a manifest of an earlier run.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SchemaArgs {
    #[arg(long, default_value = "case_id")]
    case_column: String,
    #[arg(long, default_value = "activity")]
    activity_column: String,
    #[arg(long, default_value = "timestamp")]
    timestamp_column: String,
}

impl SchemaArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            case_id: self.case_column.clone(),
            activity: self.activity_column.clone(),
            timestamp: self.timestamp_column.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Descriptive statistics of a CSV log.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        schema: SchemaArgs,
    },
    /// Smallest noise multiplier meeting a target budget.
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 0.1)]
        sampling_rate: f64,
        #[arg(long, default_value_t = 1000)]
        iterations: u64,
    },
    /// Trains a private engine on a log and writes a synthetic log.
    Anonymize(AnonymizeArgs),
    /// Draws a synthetic log from a saved model; spends no budget.
    Sample {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to the case count of the training log.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        schema: SchemaArgs,
    },
    /// Utility of an anonymized log against its original.
    Evaluate {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        anonymized: PathBuf,
        #[command(flatten)]
        schema: SchemaArgs,
    },
    /// Writes a seeded synthetic log with Zipf variant frequencies.
    Synth {
        #[arg(long)]
        cases: Option<u64>,
        #[arg(long)]
        variants: Option<usize>,
        #[arg(long)]
        skew: Option<f64>,
        #[arg(long)]
        activities: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Engine {
    Travag,
    Ddpm,
}

/// Case count from which `auto` switches to the library defaults.
const SMALL_LOG_CASES: u64 = 5000;

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// `small` below [`SMALL_LOG_CASES`] cases, `standard` otherwise.
    Auto,
    /// Library defaults.
    Standard,
    /// Tuned for logs of a few hundred cases.
    Small,
}

#[derive(Args)]
struct AnonymizeArgs {
    #[arg(value_enum)]
    engine: Engine,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    delta: f64,
    /// Cases to generate; defaults to the case count of the input.
    #[arg(long)]
    samples: Option<usize>,
    /// DP-SGD iterations of every private component.
    #[arg(long)]
    iterations: Option<u64>,
    /// Diffusion steps (ddpm only).
    #[arg(long)]
    steps: Option<usize>,
    /// Ignored when `--config` is given.
    #[arg(long, value_enum, default_value_t = Preset::Auto)]
    preset: Preset,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model_out: Option<PathBuf>,
    /// Defaults to `<out>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaArgs,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SampleConfig {
    count: Option<usize>,
}

/// Record of one randomized run. Passing it back through `--config`
/// repeats the run.
#[derive(Serialize)]
struct Manifest {
    command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    engine: Option<Engine>,
    seed: u64,
    config: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<String>,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    target: Option<PrivacySpec>,
    /// `null` for non-private runs.
    achieved: Option<PrivacySpec>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    calibration: Vec<Calibration>,
    #[serde(skip_serializing_if = "Option::is_none")]
    samples: Option<usize>,
    wall_clock_seconds: f64,
}

struct Loaded<T> {
    config: T,
    seed: Option<u64>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Infeasible(_) | Error::BudgetExhausted(_) => 3,
        Error::Diverged | Error::NonFiniteGradient | Error::NonFiniteOutput => 4,
        _ => 2,
    }
}

fn with_path(path: &Path, e: io::Error) -> Error {
    Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| with_path(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| with_path(path, e))
}

fn read_log(path: &Path, schema: &CsvSchema) -> Result<SimpleEventLog> {
    ingest_csv(open(path)?, schema).map_err(|e| match e {
        Error::Io(io) => with_path(path, io),
        other => other,
    })
}

fn write_log(log: &SimpleEventLog, path: &Path, schema: &CsvSchema) -> Result<()> {
    write_csv(log, create(path)?, schema)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut sink = create(path)?;
    serde_json::to_writer_pretty(&mut sink, value)?;
    writeln!(sink).and_then(|_| sink.flush()).map_err(|e| with_path(path, e))
}

/// Reads either a bare config or the `config` and `seed` of a manifest.
fn load_config<T: DeserializeOwned>(path: Option<&Path>) -> Result<Option<Loaded<T>>> {
    let Some(path) = path else { return Ok(None) };
    let value: Value = serde_json::from_reader(open(path)?)
        .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
    let (config, seed) = match value {
        Value::Object(mut map) if map.contains_key("config") => {
            let seed = map.get("seed").and_then(Value::as_u64);
            (map.remove("config").unwrap_or(Value::Null), seed)
        }
        other => (other, None),
    };
    let config = serde_json::from_value(config)
        .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
    Ok(Some(Loaded { config, seed }))
}

fn resolve_seed(explicit: Option<u64>, from_config: Option<u64>) -> u64 {
    explicit.or(from_config).unwrap_or_else(|| {
        let seed = rand::random::<u64>();
        eprintln!("seed: {seed}");
        seed
    })
}

fn manifest_path(explicit: Option<PathBuf>, out: &Path) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut name = out.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    })
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn budget(spec: Option<PrivacySpec>) -> String {
    spec.map_or_else(|| "none (noise multiplier 0)".into(), |p| format!("epsilon={} delta={}", p.epsilon, p.delta))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn report_manifest(manifest: &Manifest, json: bool) -> Result<()> {
    if json {
        return print_json(manifest);
    }
    if let Some(engine) = manifest.engine {
        println!("engine    {}", serde_json::to_value(engine)?.as_str().unwrap_or_default());
    }
    println!("seed      {}", manifest.seed);
    if let Some(target) = manifest.target {
        println!("target    {}", budget(Some(target)));
    }
    if manifest.engine.is_some() {
        println!("achieved  {}", budget(manifest.achieved));
    }
    if let Some(n) = manifest.samples {
        println!("samples   {n}");
    }
    println!("time      {:.2}s", manifest.wall_clock_seconds);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let config_path = cli.config.as_deref();
    match cli.command {
        Command::Stats { input, schema } => {
            let stats = log_stats(&read_log(&input, &schema.schema())?)?;
            if cli.json {
                print_json(&stats)?;
            } else {
                println!("{stats}");
            }
        }
        Command::Calibrate { epsilon, delta, sampling_rate, iterations } => {
            let target = PrivacySpec::new(epsilon, delta)?;
            let c = calibrate_noise(target, sampling_rate, iterations)?;
            if cli.json {
                print_json(&c)?;
            } else {
                println!("noise_multiplier  {}", c.noise_multiplier);
                println!("achieved_epsilon  {}", c.achieved_epsilon);
                println!("delta             {}", c.delta);
                println!("optimal_alpha     {}", c.optimal_alpha);
            }
        }
        Command::Evaluate { original, anonymized, schema } => {
            let schema = schema.schema();
            let report = metrics::evaluate(&read_log(&original, &schema)?, &read_log(&anonymized, &schema)?)?;
            if cli.json {
                print_json(&report)?;
            } else {
                println!("relative_log_similarity  {}", report.relative_log_similarity);
                println!("absolute_log_difference  {}", report.absolute_log_difference);
            }
        }
        Command::Synth { cases, variants, skew, activities, out, manifest } => {
            let loaded = load_config::<SynthConfig>(config_path)?;
            let (mut config, seed) = match loaded {
                Some(l) => {
                    let seed = l.seed.or(Some(l.config.seed));
                    (l.config, seed)
                }
                None => (SynthConfig::default(), None),
            };
            config.cases = cases.unwrap_or(config.cases);
            config.variants = variants.unwrap_or(config.variants);
            config.zipf_skew = skew.unwrap_or(config.zipf_skew);
            config.activities = activities.unwrap_or(config.activities);
            config.seed = resolve_seed(cli.seed, seed);
            let log = synthetic_log(&config)?;
            write_log(&log, &out, &CsvSchema::default())?;
            let record = Manifest {
                command: "synth",
                engine: None,
                seed: config.seed,
                config: serde_json::to_value(&config)?,
                input: None,
                outputs: vec![display(&out)],
                target: None,
                achieved: None,
                calibration: vec![],
                samples: Some(log.n_cases() as usize),
                wall_clock_seconds: started.elapsed().as_secs_f64(),
            };
            write_json(&record, &manifest_path(manifest, &out))?;
            report_manifest(&record, cli.json)?;
        }
        Command::Sample { model, count, out, manifest, schema } => {
            let loaded = load_config::<SampleConfig>(config_path)?;
            let (base, seed) = loaded.map_or((SampleConfig::default(), None), |l| (l.config, l.seed));
            let seed = resolve_seed(cli.seed, seed);
            let text = std::fs::read_to_string(&model).map_err(|e| with_path(&model, e))?;
            let released = ReleasedModel::from_json(&text)?;
            let count = count.or(base.count).unwrap_or(released.training_cases() as usize);
            let log = released.sample(count, seed)?;
            write_log(&log, &out, &schema.schema())?;
            let record = Manifest {
                command: "sample",
                engine: Some(if released.kind() == "ddpm" { Engine::Ddpm } else { Engine::Travag }),
                seed,
                config: serde_json::to_value(SampleConfig { count: Some(count) })?,
                input: Some(display(&model)),
                outputs: vec![display(&out)],
                target: None,
                achieved: released.privacy(),
                calibration: vec![],
                samples: Some(count),
                wall_clock_seconds: started.elapsed().as_secs_f64(),
            };
            write_json(&record, &manifest_path(manifest, &out))?;
            report_manifest(&record, cli.json)?;
        }
        Command::Anonymize(args) => anonymize(args, cli.seed, config_path, cli.json, started)?,
    }
    Ok(())
}

fn anonymize(args: AnonymizeArgs, seed: Option<u64>, config_path: Option<&Path>, json: bool, started: Instant) -> Result<()> {
    // Validated before any data is read.
    let target = PrivacySpec::new(args.epsilon, args.delta)?;
    if args.steps.is_some() && args.engine == Engine::Travag {
        return Err(Error::InvalidParameter("--steps applies to ddpm only".into()));
    }
    let schema = args.schema.schema();
    let log = read_log(&args.input, &schema)?;
    let (vocab, matrix) = one_hot_encode(&log)?;
    let small = match args.preset {
        Preset::Auto => log.n_cases() < SMALL_LOG_CASES,
        Preset::Small => true,
        Preset::Standard => false,
    };

    let (seed, config, calibration, model, sample_seed) = match args.engine {
        Engine::Travag => {
            let loaded = load_config::<TravagConfig>(config_path)?;
            let (mut config, from_config) = match loaded {
                Some(l) => (l.config, l.seed),
                None if small => (TravagConfig::small_log(), None),
                None => (TravagConfig::default(), None),
            };
            let seed = resolve_seed(seed, from_config);
            if let Some(t) = args.iterations {
                config.decoder.iterations = t;
                config.discriminator.iterations = t;
            }
            config.decoder.seed = seed;
            config.discriminator.seed = seed.wrapping_add(1);
            let (dec, dis) = config.calibrate(target)?;
            let release = travag::train(&matrix, &vocab, &config)?.release()?;
            (seed, serde_json::to_value(&config)?, vec![dec, dis], ReleasedModel::Travag(release), seed.wrapping_add(2))
        }
        Engine::Ddpm => {
            let loaded = load_config::<DiffusionConfig>(config_path)?;
            let (mut config, from_config) = match loaded {
                Some(l) => (l.config, l.seed),
                None if small => (DiffusionConfig::small_log(), None),
                None => (DiffusionConfig::default(), None),
            };
            let seed = resolve_seed(seed, from_config);
            if let Some(t) = args.iterations {
                config.dp.iterations = t;
            }
            if let Some(t) = args.steps {
                config.steps = t;
            }
            config.dp.seed = seed;
            let c = config.calibrate(target)?;
            let model = ddpm::train(&matrix, &vocab, &config)?;
            (seed, serde_json::to_value(&config)?, vec![c], ReleasedModel::Ddpm(model), seed.wrapping_add(1))
        }
    };

    let achieved = model.privacy();
    match achieved {
        Some(a) if a.epsilon <= target.epsilon && a.delta <= target.delta => {}
        other => {
            return Err(Error::Infeasible(format!("achieved budget {} exceeds the target", budget(other))));
        }
    }
    let count = args.samples.unwrap_or(model.training_cases() as usize);
    let synthetic = model.sample(count, sample_seed)?;
    write_log(&synthetic, &args.out, &schema)?;
    let mut outputs = vec![display(&args.out)];
    if let Some(path) = &args.model_out {
        let text = model.to_json()?;
        std::fs::write(path, text).map_err(|e| with_path(path, e))?;
        outputs.push(display(path));
    }
    let record = Manifest {
        command: "anonymize",
        engine: Some(args.engine),
        seed,
        config,
        input: Some(display(&args.input)),
        outputs,
        target: Some(target),
        achieved,
        calibration,
        samples: Some(count),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&record, &manifest_path(args.manifest, &args.out))?;
    report_manifest(&record, json)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
