mod config;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emnet::bench;
use emnet::checkpoint;
use emnet::gradcheck;
use emnet::infer::{argmax, sliding_window_infer};
use emnet::metrics;
use emnet::network::{count_flops, count_params, param_breakdown, NetworkConfig, Preset};
use emnet::phantom::generate_set;
use emnet::train::{train_loop, MetricsLog};
use emnet::volume::{load_cases, LabelVolume, Volume};
use emnet::{Error, Network, Precision, Scalar};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "emnet", version, about = "Volumetric segmentation with CSRM and EFL blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with [network], [train], [infer] and [phantom] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Floating-point width: 32 or 64.
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a set of synthetic phantoms as <name>_image / <name>_label files.
    GenPhantom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Train on a case directory; writes checkpoint.bin and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<Preset>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Segment one image with overlapping sliding windows.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_triple)]
        window: Option<[usize; 3]>,
        #[arg(long)]
        overlap: Option<f64>,
        /// Run the network once on the whole volume instead of windowing.
        #[arg(long)]
        direct: bool,
    },
    /// Per-class DSC and HD report for predictions against ground truth.
    Eval {
        /// Prediction label file, or a directory of <name>_pred files.
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth label file, or a directory of <name>_label files.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
        /// Report the 95th-percentile Hausdorff distance instead of the maximum.
        #[arg(long)]
        hd95: bool,
    },
    /// Time the Mamba layer and 3D FFT over increasing sizes.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Smaller sizes, for smoke runs.
        #[arg(long)]
        quick: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// Include the end-to-end network check.
        #[arg(long)]
        all: bool,
    },
    /// Parameter and FLOP counts per preset.
    Params {
        #[command(flatten)]
        common: Common,
        #[arg(long = "preset")]
        presets: Vec<Preset>,
        /// Use the 128³ configuration instead of the configured network.
        #[arg(long)]
        full_scale: bool,
        /// Print the per-module breakdown.
        #[arg(long)]
        verbose: bool,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse::<u32>().ok().and_then(Precision::from_bits).ok_or_else(|| format!("expected 32 or 64, got '{s}'"))
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>().map_err(|e| format!("{e}"))?;
    v.try_into().map_err(|_| format!("expected X,Y,Z, got '{s}'"))
}

type CliResult<T = ()> = Result<T, Error>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.network.seed = seed;
        cfg.train.seed = seed;
        cfg.phantom.seed = seed;
    }
    if let Some(p) = common.precision {
        cfg.train.precision = p;
    }
    Ok(cfg)
}

fn gen_phantom(common: &Common, out: &Path, count: usize) -> CliResult {
    let cfg = load_config(common)?;
    fs::create_dir_all(out)?;
    for case in generate_set(&cfg.phantom, count)? {
        case.write(out)?;
    }
    println!("wrote {count} phantoms to {}", out.display());
    Ok(())
}

fn train<T: Scalar>(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult {
    let cases = load_cases(data)?;
    let split = cfg.train.train_cases.min(cases.len());
    let (tr, val) = cases.split_at(split);
    let mut net = Network::<T>::new(cfg.network.clone())?;
    fs::create_dir_all(out)?;
    let mut log = MetricsLog::new(BufWriter::new(File::create(out.join("metrics.csv"))?), cfg.network.classes)?;
    train_loop(&mut net, tr, val, &cfg.train, |rec| {
        let dsc = rec.mean_dsc.map(|d| format!("{d:.2}")).unwrap_or_else(|| "-".into());
        println!("epoch {} loss {:.6} val_dsc {dsc}", rec.epoch, rec.loss);
        log.append(rec)
    })?;
    checkpoint::save(&net, out.join("checkpoint.bin"))?;
    println!("wrote {}", out.join("checkpoint.bin").display());
    Ok(())
}

fn infer<T: Scalar>(cfg: &RunConfig, ck: checkpoint::Checkpoint, image: &Path, out: &Path, direct: bool) -> CliResult {
    let net: Network<T> = ck.into_network()?;
    let vol = Volume::read(image)?;
    let x = vol.normalized::<T>();
    let logits = if direct { net.predict(&x)? } else { sliding_window_infer(&net, &x, &cfg.infer.spec(&net.config)?)? };
    LabelVolume::new(vol.dims, vol.spacing, argmax(&logits))?.write(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn eval(pred: &Path, gt: &Path, classes: usize, out: &Path, hd95: bool) -> CliResult {
    let mut pairs = Vec::new();
    if gt.is_dir() {
        let mut names: Vec<String> = fs::read_dir(gt)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix("_label.json")).map(String::from))
            .collect();
        names.sort();
        for name in names {
            pairs.push((
                name.clone(),
                LabelVolume::read(pred.join(format!("{name}_pred")))?,
                LabelVolume::read(gt.join(format!("{name}_label")))?,
            ));
        }
    } else {
        let name = gt.file_stem().and_then(|s| s.to_str()).unwrap_or("case").to_string();
        pairs.push((name, LabelVolume::read(pred)?, LabelVolume::read(gt)?));
    }
    let mut rows = Vec::new();
    for (name, p, g) in &pairs {
        rows.extend(metrics::evaluate_case(name, p, g, classes, hd95)?);
    }
    metrics::write_report(BufWriter::new(File::create(out)?), &rows)?;
    let undefined = rows.iter().filter(|r| r.hd.is_none()).count();
    let hds: Vec<f64> = rows.iter().filter_map(|r| r.hd).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    let dscs: Vec<f64> = rows.iter().map(|r| r.dsc).collect();
    println!("cases {} mean_dsc {:.2} mean_hd {:.3} hd_undefined {undefined}", pairs.len(), mean(&dscs), mean(&hds));
    Ok(())
}

fn run_bench<T: Scalar>(out: &Path, quick: bool) -> CliResult {
    let (lengths, sides): (&[usize], &[usize]) =
        if quick { (&[64, 128, 256], &[4, 8, 16]) } else { (&[1024, 2048, 4096, 8192], &[8, 16, 32, 64]) };
    let mamba = bench::bench_mamba::<T>(lengths, 16, 3)?;
    let fft = bench::bench_fft::<T>(sides, 3)?;
    let rows: Vec<_> = mamba.iter().chain(&fft).cloned().collect();
    bench::write_rows(BufWriter::new(File::create(out)?), &rows)?;
    println!("mamba_layer slope vs L: {:.3}", bench::linear_slope(&mamba));
    println!("fft3 slope vs n log n: {:.3}", bench::nlogn_slope(&fft));
    Ok(())
}

fn run_gradcheck(all: bool) -> CliResult {
    let reports = gradcheck::suite(all)?;
    let mut worst: f64 = 0.0;
    for r in &reports {
        println!("{:<24} checked {:>5}  worst rel err {:.3e}  at {}", r.name, r.checked, r.worst_rel, r.worst_at);
        worst = worst.max(r.worst_rel);
    }
    println!("worst relative error: {worst:.3e}");
    if worst >= 1e-4 {
        return Err(Error::Config(format!("worst relative error {worst:.3e} exceeds 1e-4")));
    }
    Ok(())
}

fn params(common: &Common, presets: &[Preset], full_scale: bool, verbose: bool) -> CliResult {
    let cfg = load_config(common)?;
    let presets = if presets.is_empty() { Preset::ALL.to_vec() } else { presets.to_vec() };
    let mut out = io::stdout().lock();
    for p in presets {
        let net = if full_scale {
            NetworkConfig::full_scale(p)
        } else {
            NetworkConfig { stages: p.stages(), ..cfg.network.clone() }
        };
        net.validate()?;
        writeln!(out, "{:<10} params {:>12}  flops {:>10.3} G", p.name(), count_params(&net), count_flops(&net) / 1e9)?;
        if verbose {
            for (name, n) in param_breakdown(&net) {
                writeln!(out, "    {name:<18} {n:>12}")?;
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenPhantom { common, out, count } => gen_phantom(&common, &out, count),
        Command::Train { common, preset, data, out, epochs } => {
            let mut cfg = load_config(&common)?;
            if let Some(p) = preset {
                cfg.network.stages = p.stages();
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            match cfg.train.precision {
                Precision::F32 => train::<f32>(&cfg, &data, &out),
                Precision::F64 => train::<f64>(&cfg, &data, &out),
            }
        }
        Command::Infer { common, checkpoint: path, image, out, window, overlap, direct } => {
            let mut cfg = load_config(&common)?;
            if window.is_some() {
                cfg.infer.window = window;
            }
            if let Some(o) = overlap {
                cfg.infer.overlap = o;
            }
            let ck = checkpoint::load(&path)?;
            match common.precision.unwrap_or(ck.precision) {
                Precision::F32 => infer::<f32>(&cfg, ck, &image, &out, direct),
                Precision::F64 => infer::<f64>(&cfg, ck, &image, &out, direct),
            }
        }
        Command::Eval { pred, gt, classes, out, hd95 } => eval(&pred, &gt, classes, &out, hd95),
        Command::Bench { common, out, quick } => match load_config(&common)?.train.precision {
            Precision::F32 => run_bench::<f32>(&out, quick),
            Precision::F64 => run_bench::<f64>(&out, quick),
        },
        Command::Gradcheck { all } => run_gradcheck(all),
        Command::Params { common, presets, full_scale, verbose } => params(&common, &presets, full_scale, verbose),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("error: args: {line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
