//! `dascodec`: simulate FMC data, train the codec, compress and decompress
//! acquisitions, and evaluate image quality.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dascodec::codec;
use dascodec::config::RunConfig;
use dascodec::das::das_forward;
use dascodec::gradcheck::{self, FdSettings};
use dascodec::io::{read_stream, read_tensor, write_atomic, write_pgm, write_stream, write_tensor, Container};
use dascodec::metrics::{mean_std, mse, ssim};
use dascodec::simulate::generate_scenarios;
use dascodec::store::{fingerprint_hex, load_model, load_scenario, save_model, save_scenario};
use dascodec::training::{train, Dataset, EpochMetrics, Variant};
use dascodec::Tensor;

const TRAIN_DIR: &str = "train";
const TEST_DIR: &str = "test";
const SCENARIO_EXT: &str = "udc";
const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Parser)]
#[command(name = "dascodec", version, about = "Learned compression of full-matrix-capture ultrasound data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a train/test set of synthetic point-scatterer scenarios.
    Simulate(SimulateArgs),
    /// Train a model on a simulated dataset.
    Train(TrainArgs),
    /// Encode raw data into a stream of code indices.
    Compress(CompressArgs),
    /// Decode a stream and form its DAS image.
    Decompress(DecompressArgs),
    /// Form the DAS image of raw data.
    Image(ImageArgs),
    /// Report mean/std SSIM over a test set.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML); the desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display())),
            None => Ok(RunConfig::desk()),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory; receives `train/`, `test/` and the resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    DataToImage,
    DataToData,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::DataToImage => Variant::DataToImage,
            VariantArg::DataToData => Variant::DataToData,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration; defaults to the one written by `simulate`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the model, metrics log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the training seed (initialization and shuffling).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw data: a tensor file or a scenario file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also print the rate with bit-packed indices.
    #[arg(long)]
    report_bits: bool,
}

#[derive(Args)]
struct DecompressArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    /// Image tensor file; a `.pgm` preview is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Write the decoded raw data here as well.
    #[arg(long)]
    data_out: Option<PathBuf>,
}

#[derive(Args)]
struct ImageArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Raw data: a tensor file or a scenario file.
    #[arg(long)]
    input: PathBuf,
    /// Image tensor file; a `.pgm` preview is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Model to evaluate on the test split of `--data`.
    #[arg(long, requires = "data", conflicts_with_all = ["reference", "candidate"])]
    model: Option<PathBuf>,
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory of reference image tensor files.
    #[arg(long, requires = "candidate")]
    reference: Option<PathBuf>,
    /// Directory of candidate image tensor files with matching names.
    #[arg(long, requires = "reference")]
    candidate: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train_cmd(a),
        Command::Compress(a) => compress(a),
        Command::Decompress(a) => decompress(a),
        Command::Image(a) => image(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => return gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn scenario_name(i: usize) -> String {
    format!("scenario_{i:05}.{SCENARIO_EXT}")
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_train {
        cfg.dataset.n_train = n;
    }
    if let Some(n) = a.n_test {
        cfg.dataset.n_test = n;
    }
    cfg.validate()?;
    let geom = cfg.geometry()?;
    let grid = cfg.imaging_grid()?;
    let n_train = cfg.dataset.n_train;
    // Test scenarios continue the per-scenario stream numbering, so the two
    // splits never share a scenario.
    for (dir, offset, count) in [(TRAIN_DIR, 0, n_train), (TEST_DIR, n_train, cfg.dataset.n_test)] {
        let dir = a.out.join(dir);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let scenarios = generate_scenarios(cfg.seed, offset as u64, count, &geom, &grid, &cfg.pulse, &cfg.scenario)?;
        for (i, s) in scenarios.iter().enumerate() {
            save_scenario(dir.join(scenario_name(i)), s)?;
        }
    }
    cfg.save(a.out.join(RESOLVED_CONFIG))?;
    println!(
        "wrote {} train and {} test scenarios to {}",
        n_train,
        cfg.dataset.n_test,
        a.out.display()
    );
    Ok(())
}

/// Scenario files of a split, in name order.
fn scenario_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == SCENARIO_EXT));
    files.sort();
    Ok(files)
}

fn load_split(dir: &Path) -> Result<Vec<dascodec::training::Sample>> {
    scenario_files(dir)?
        .iter()
        .map(|p| {
            load_scenario(p)
                .map(|s| s.sample)
                .with_context(|| format!("reading scenario {}", p.display()))
        })
        .collect()
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: load_split(&dir.join(TRAIN_DIR))?,
        test: load_split(&dir.join(TEST_DIR))?,
    })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let config_path = a.config.clone().unwrap_or_else(|| a.data.join(RESOLVED_CONFIG));
    let mut cfg =
        RunConfig::load(&config_path).with_context(|| format!("loading config {}", config_path.display()))?;
    if let Some(v) = a.variant {
        cfg.training.variant = v.into();
    }
    if let Some(e) = a.epochs {
        cfg.training.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.training.seed = s;
    }
    if let Some(lr) = a.learning_rate {
        cfg.training.learning_rate = lr;
    }
    if let Some(c) = a.checkpoint_every {
        cfg.training.checkpoint_every = c;
    }
    cfg.validate()?;
    let dataset = load_dataset(&a.data)?;
    let table = cfg.delay_table()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    cfg.save(a.out.join(RESOLVED_CONFIG))?;

    let log_path = a.out.join("metrics.log");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    writeln!(
        log,
        "# variant={} seed={} ssim {}",
        cfg.training.variant,
        cfg.training.seed,
        cfg.ssim.describe()
    )?;
    let checkpoint_dir = a.out.join("checkpoints");
    let every = cfg.training.checkpoint_every;
    let outcome = train(
        &dataset,
        &cfg.model_config(),
        &cfg.training,
        &table,
        &cfg.ssim,
        |model, m: &EpochMetrics| {
            let record = m.to_record();
            writeln!(log, "{record}")?;
            log.flush()?;
            println!("{record}");
            if every > 0 && m.epoch % every == 0 {
                fs::create_dir_all(&checkpoint_dir)?;
                save_model(checkpoint_dir.join(format!("epoch_{:04}.udm", m.epoch)), model)?;
            }
            Ok(())
        },
    )?;
    let fp = save_model(a.out.join("model.udm"), &outcome.model)?;
    println!(
        "model {} (rate {:.3}, fingerprint {})",
        a.out.join("model.udm").display(),
        outcome.model.compression_rate(),
        fingerprint_hex(&fp)
    );
    Ok(())
}

/// Raw data from a tensor file or from the `f` entry of a scenario file.
fn read_raw(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let t = if bytes.starts_with(&dascodec::io::CONTAINER_MAGIC) {
        let c = Container::from_bytes(&bytes)?;
        dascodec::io::TensorFile::from_bytes(c.require("f")?)?.into_tensor()?
    } else {
        dascodec::io::TensorFile::from_bytes(&bytes)?.into_tensor()?
    };
    Ok(t)
}

fn compress(a: CompressArgs) -> Result<()> {
    let (model, fp) = load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let f = read_raw(&a.input)?;
    let stream = codec::compress(&model, fp, &f)?;
    write_stream(&a.out, &stream)?;
    let [n1, n2, n3] = stream.code_shape();
    let [nt, ns, nr] = model.data_shape();
    println!("code {n1}x{n2}x{n3}, L={}, rate {:.3} (elements)", stream.codebook_size, model.compression_rate());
    if a.report_bits {
        // Raw samples are counted as 16-bit words, the common ADC width.
        let bits = stream.bits_per_index();
        let code_bits = (n1 * n2 * n3) as u64 * bits as u64;
        let raw_bits = (nt * ns * nr) as u64 * 16;
        println!(
            "{bits} bits/index, {code_bits} payload bits, rate {:.3} vs 16-bit samples",
            raw_bits as f64 / code_bits as f64
        );
    }
    Ok(())
}

fn preview_path(out: &Path) -> PathBuf {
    out.with_extension("pgm")
}

fn write_image(out: &Path, image: &Tensor) -> Result<()> {
    write_tensor(out, image).with_context(|| format!("writing {}", out.display()))?;
    write_pgm(preview_path(out), image)?;
    Ok(())
}

fn write_config_next_to(out: &Path, cfg: &RunConfig) -> Result<()> {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    write_atomic(out.with_file_name(name), cfg.to_toml_string()?.as_bytes())?;
    Ok(())
}

fn decompress(a: DecompressArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let (model, fp) = load_model(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let stream = read_stream(&a.stream).with_context(|| format!("reading stream {}", a.stream.display()))?;
    let table = cfg.delay_table()?;
    let data = codec::decompress_data(&model, fp, &stream).map_err(|e| match e {
        dascodec::Error::FingerprintMismatch => anyhow::anyhow!(
            "refusing to decompress: stream fingerprint {} does not match model {} ({})",
            fingerprint_hex(&stream.fingerprint),
            a.model.display(),
            fingerprint_hex(&fp)
        ),
        other => other.into(),
    })?;
    if let Some(p) = &a.data_out {
        write_tensor(p, &data)?;
    }
    write_image(&a.out, &das_forward(&data, &table)?)?;
    write_config_next_to(&a.out, &cfg)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn image(a: ImageArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let f = read_raw(&a.input)?;
    write_image(&a.out, &das_forward(&f, &cfg.delay_table()?)?)?;
    write_config_next_to(&a.out, &cfg)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn report(label: &str, ssims: &[f64], mses: &[f64]) {
    let (m, s) = mean_std(ssims);
    let (mm, _) = mean_std(mses);
    println!("{label}: n={} ssim_mean={m:.6} ssim_std={s:.6} mse_mean={mm:.6e}", ssims.len());
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = a.config.load()?;
    println!("ssim {}", cfg.ssim.describe());
    let (mut ssims, mut mses) = (Vec::new(), Vec::new());
    if let (Some(model_path), Some(data)) = (&a.model, &a.data) {
        let (model, fp) = load_model(model_path).with_context(|| format!("loading model {}", model_path.display()))?;
        let table = cfg.delay_table()?;
        for s in load_split(&data.join(TEST_DIR))? {
            let stream = codec::compress(&model, fp, &s.data)?;
            let u_hat = codec::decompress_image(&model, fp, &stream, &table)?;
            ssims.push(ssim(&s.image, &u_hat, &cfg.ssim)?);
            mses.push(mse(&s.image, &u_hat)?);
        }
        ensure!(!ssims.is_empty(), "no test scenarios in {}", data.display());
        println!("rate {:.3}", model.compression_rate());
        report("test", &ssims, &mses);
    } else if let (Some(reference), Some(candidate)) = (&a.reference, &a.candidate) {
        let mut names: Vec<_> = fs::read_dir(reference)
            .with_context(|| format!("reading {}", reference.display()))?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<std::io::Result<_>>()?;
        names.retain(|n| Path::new(n).extension().is_some_and(|e| e == "udt"));
        names.sort();
        ensure!(!names.is_empty(), "no .udt images in {}", reference.display());
        for n in names {
            let r = read_tensor(reference.join(&n))?;
            let c = read_tensor(candidate.join(&n))
                .with_context(|| format!("reading candidate {}", candidate.join(&n).display()))?;
            ssims.push(ssim(&r, &c, &cfg.ssim)?);
            mses.push(mse(&r, &c)?);
        }
        report("pairs", &ssims, &mses);
    } else {
        bail!("eval needs either --model with --data, or --reference with --candidate");
    }
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> ExitCode {
    let settings = FdSettings {
        step: a.step,
        tolerance: a.tolerance,
    };
    match gradcheck::run_all(a.seed, settings) {
        Ok(results) => {
            results.iter().for_each(|r| println!("{r}"));
            if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                eprintln!("gradient check failed");
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
