//! Command-line entry point: subcommand parsing, config resolution, run
//! directories, and artifact output.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::augment::{self, DonorSampler};
use crate::backbone;
use crate::config::{parse_config, RunConfig};
use crate::data::{self, codec, generate_synthetic, load_image_folder, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::rng::{seed_rng, Prng, TAG_SAMPLE};
use crate::tensor::Tensor;
use crate::trainer;

#[derive(Parser)]
#[command(name = "cecs", version, about = "Compositional embedding and similarity training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config-affecting flags shared by the training-style subcommands. Flags
/// override values from --config, which override the documented defaults.
#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// Config file of `key = value` lines (# starts a comment).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Training mode: baseline, ce, or cecs.
    #[arg(long, value_name = "MODE")]
    mode: Option<String>,
    /// Substitution square side, in grid cells.
    #[arg(long, value_name = "N")]
    q: Option<usize>,
    /// Grid side count.
    #[arg(long, value_name = "N")]
    n: Option<usize>,
    /// Number of training epochs.
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
}

impl ConfigFlags {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                overrides.push((key.to_string(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("mode", self.mode.clone());
        push("q", self.q.map(|v| v.to_string()));
        push("n", self.n.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        parse_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic leaf dataset as an image folder.
    SynthData(SynthDataArgs),
    /// Train a model; writes resolved.cfg, metrics.csv, params.rawt.
    Train(TrainArgs),
    /// Print a trained model's top-1 accuracy on an image folder.
    Eval(EvalArgs),
    /// Run the module and patch-size ablation studies; writes ablation.csv.
    Ablate(AblateArgs),
    /// Write one sample's original/replaced/masked images as PPMs.
    PreviewAugment(PreviewArgs),
    /// Run the gradient-check suites; nonzero exit on failure.
    Gradcheck(GradcheckArgs),
    /// Write class-activation-map heatmaps as PGMs.
    Cam(CamArgs),
}

#[derive(Args)]
struct SynthDataArgs {
    /// Output dataset folder.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Number of categories.
    #[arg(long, value_name = "N")]
    k: Option<usize>,
    /// Samples per category.
    #[arg(long, value_name = "N")]
    m: Option<usize>,
    /// Image side in pixels.
    #[arg(long, value_name = "N")]
    side: Option<usize>,
    /// Per-category vein-angle offset range, radians.
    #[arg(long, value_name = "X")]
    class_delta: Option<f64>,
    /// Per-pixel noise magnitude.
    #[arg(long, value_name = "X")]
    noise: Option<f64>,
    /// Write RAWT tensors instead of PPM images.
    #[arg(long)]
    rawt: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigFlags,
    /// Dataset folder; omitted, a default synthetic set is generated.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Run directory; default runs/<timestamp>-<seed>.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained parameters (params.rawt).
    #[arg(long, value_name = "PATH")]
    params: PathBuf,
    /// Dataset folder to evaluate.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigFlags,
    /// Dataset folder; omitted, a default synthetic set is generated.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Output directory; default runs/<timestamp>-ablate.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, value_name = "LIST", default_value = "0,1,2,3,4")]
    seeds: String,
}

#[derive(Args)]
struct PreviewArgs {
    #[command(flatten)]
    config: ConfigFlags,
    /// Dataset folder; omitted, a default synthetic set is generated.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Output directory; default runs/<timestamp>-preview.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random trials per op.
    #[arg(long, value_name = "N", default_value_t = 100)]
    trials: usize,
    #[arg(long, value_name = "N", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CamArgs {
    /// Trained parameters (params.rawt).
    #[arg(long, value_name = "PATH")]
    params: PathBuf,
    /// An image file or a dataset folder.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Output directory; default runs/<timestamp>-cam.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

/// Parses and dispatches, returning the process exit status: 0 success,
/// 1 usage error, 2 runtime failure.
pub fn run() -> i32 {
    if let Err(message) = init_threads() {
        eprintln!("error: {}", message);
        return 2;
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            2
        }
    }
}

fn init_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var("CECS_THREADS") else { return Ok(()) };
    let threads: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("CECS_THREADS must be a positive integer, got {:?}", raw))?;
    if threads == 0 {
        return Err("CECS_THREADS must be a positive integer, got 0".to_string());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| format!("thread pool: {}", e))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::SynthData(args) => cmd_synth_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::PreviewAugment(args) => cmd_preview(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Cam(args) => cmd_cam(args),
    }
}

fn days_to_civil(days: i64) -> (i64, u32, u32) {
    let z = days + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = (z - era * 146_097) as u64;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = yoe as i64 + era * 400 + i64::from(m <= 2);
    (y, m, d)
}

fn utc_timestamp() -> String {
    let secs =
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let (y, m, d) = days_to_civil((secs / 86_400) as i64);
    let rem = secs % 86_400;
    format!(
        "{:04}{:02}{:02}-{:02}{:02}{:02}",
        y,
        m,
        d,
        rem / 3600,
        rem % 3600 / 60,
        rem % 60
    )
}

fn make_run_dir(out: Option<PathBuf>, suffix: &str) -> Result<PathBuf> {
    let dir = out
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-{}", utc_timestamp(), suffix)));
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    Ok(dir)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Loads the dataset folder, or generates the default synthetic set with the
/// run seed, then makes the 1:1 per-category split.
fn resolve_datasets(data: &Option<PathBuf>, config: &RunConfig) -> Result<(Dataset, Dataset)> {
    let set = match data {
        Some(path) => load_image_folder(path)?,
        None => generate_synthetic(&SynthSpec { seed: config.seed, ..SynthSpec::default() })?,
    };
    data::split_half(&set, config.seed)
}

fn cmd_synth_data(args: SynthDataArgs) -> Result<()> {
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        k: args.k.unwrap_or(defaults.k),
        m: args.m.unwrap_or(defaults.m),
        side: args.side.unwrap_or(defaults.side),
        class_delta: args.class_delta.unwrap_or(defaults.class_delta),
        noise: args.noise.unwrap_or(defaults.noise),
        seed: args.seed,
        ..defaults
    };
    let set = generate_synthetic(&spec)?;
    let format = if args.rawt { data::SaveFormat::Rawt } else { data::SaveFormat::Netpbm };
    data::save_dataset(&set, &args.out, format)?;
    println!(
        "wrote {} images in {} categories to {}",
        set.len(),
        set.category_count(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let (train_set, test_set) = resolve_datasets(&args.data, &config)?;
    let dir = make_run_dir(args.out, &config.seed.to_string())?;
    write_file(&dir.join("resolved.cfg"), config.to_file_string().as_bytes())?;
    let (model, records) = trainer::train(&config, &train_set, &test_set)?;
    write_file(&dir.join("metrics.csv"), trainer::metrics_csv(&records).as_bytes())?;
    write_file(&dir.join("params.rawt"), &trainer::save_model(&model)?)?;
    let last = records.last().expect("at least one epoch");
    println!("run {}", dir.display());
    println!(
        "epoch {} train_top1 {:.4} test_top1 {:.4} total {:.6}",
        last.epoch, last.train_top1, last.test_top1, last.losses.total
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let bytes = std::fs::read(&args.params)
        .map_err(|e| Error::io(format!("reading {}", args.params.display()), e))?;
    let model = trainer::load_model(&bytes)?;
    let dataset = load_image_folder(&args.data)?;
    let top1 = model.evaluate(&dataset)?;
    println!("{:.4}", top1);
    Ok(())
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    let seeds: std::result::Result<Vec<u64>, _> =
        raw.split(',').map(|s| s.trim().parse::<u64>()).collect();
    seeds.map_err(|_| {
        Error::ConfigInvariant(format!("--seeds must be comma-separated integers, got {:?}", raw))
    })
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let seeds = parse_seeds(&args.seeds)?;
    let (train_set, test_set) = resolve_datasets(&args.data, &config)?;
    let dir = make_run_dir(args.out, "ablate")?;
    write_file(&dir.join("resolved.cfg"), config.to_file_string().as_bytes())?;
    let table = trainer::run_ablation(&config, &train_set, &test_set, &seeds)?;
    write_file(&dir.join("ablation.csv"), trainer::ablation_csv(&table).as_bytes())?;
    println!("run {}", dir.display());
    for row in &table.rows {
        println!("{} median {:.4}", row.name, row.median);
    }
    Ok(())
}

struct PreviewDonors<'a> {
    set: &'a Dataset,
    resized: &'a [Tensor],
    flip_prob: f64,
}

impl DonorSampler for PreviewDonors<'_> {
    fn sample_donor(&self, label: usize, rng: &mut Prng) -> Result<(Tensor, usize)> {
        let pool: Vec<usize> = self
            .set
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, (_, l))| *l != label)
            .map(|(i, _)| i)
            .collect();
        if pool.is_empty() {
            return Err(Error::NoDonorAvailable { label });
        }
        let pick = pool[rng.random_range(0..pool.len())];
        let flip = rng.random::<f64>() < self.flip_prob;
        let image =
            if flip { augment::hflip(&self.resized[pick]) } else { self.resized[pick].clone() };
        Ok((image, self.set.samples()[pick].1))
    }
}

fn cmd_preview(args: PreviewArgs) -> Result<()> {
    let config = args.config.resolve()?;
    let set = match &args.data {
        Some(path) => load_image_folder(path)?,
        None => generate_synthetic(&SynthSpec { seed: config.seed, ..SynthSpec::default() })?,
    };
    let resized: Vec<Tensor> = set
        .samples()
        .iter()
        .map(|(img, _)| augment::resize_bilinear(img, config.image_side))
        .collect::<Result<_>>()?;
    let mut rng = seed_rng(&[config.seed, TAG_SAMPLE, 0, 0]);
    let idx = rng.random_range(0..set.len());
    let label = set.samples()[idx].1;
    let flip = rng.random::<f64>() < config.flip_prob;
    let original = if flip { augment::hflip(&resized[idx]) } else { resized[idx].clone() };
    let donors = PreviewDonors { set: &set, resized: &resized, flip_prob: config.flip_prob };
    let triplet = augment::augment_triplet(&original, label, &donors, &config, &mut rng)?;
    let dir = make_run_dir(args.out, "preview")?;
    write_file(&dir.join("original.ppm"), &codec::encode_ppm(&triplet.original)?)?;
    write_file(&dir.join("replaced.ppm"), &codec::encode_ppm(&triplet.replaced)?)?;
    write_file(&dir.join("masked.ppm"), &codec::encode_ppm(&triplet.masked)?)?;
    println!("run {}", dir.display());
    println!(
        "sample {} label {} donor {} region r={} c={} q={}",
        idx,
        set.names()[label],
        set.names()[triplet.donor_label],
        triplet.region.r,
        triplet.region.c,
        triplet.region.q
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut worst: Option<(String, f64)> = None;
    let mut note = |op: &str, max_rel_err: f64, passed: bool| {
        println!(
            "{:<16} max_rel_err {:>12.3e}  {}",
            op,
            max_rel_err,
            if passed { "pass" } else { "FAIL" }
        );
        if !passed && worst.as_ref().is_none_or(|(_, w)| max_rel_err > *w) {
            worst = Some((op.to_string(), max_rel_err));
        }
    };
    for report in gradcheck::check_all_ops(args.trials, 1e-4, 1e-4, args.seed)? {
        note(&report.op, report.max_rel_err, report.passed);
    }
    for q in [1, 2] {
        let report = gradcheck::check_pipeline(q, 1e-5, 1e-3, args.seed)?;
        note(&report.op, report.max_rel_err, report.passed);
    }
    match worst {
        None => {
            println!("suite: pass");
            Ok(())
        }
        Some((op, max_rel_err)) => Err(Error::GradCheckFailed { op, max_rel_err }),
    }
}

fn heat_to_pgm(heat: &Tensor, side: usize) -> Result<Vec<u8>> {
    let (h, w) = (heat.shape()[0], heat.shape()[1]);
    let rank3 = heat.reshaped(vec![h, w, 1])?;
    let upscaled = augment::resize_bilinear(&rank3, side)?;
    codec::encode_pgm(&upscaled)
}

fn cmd_cam(args: CamArgs) -> Result<()> {
    let bytes = std::fs::read(&args.params)
        .map_err(|e| Error::io(format!("reading {}", args.params.display()), e))?;
    let model = trainer::load_model(&bytes)?;
    let dir = make_run_dir(args.out, "cam")?;
    println!("run {}", dir.display());

    let emit = |stem: &str, image: &Tensor| -> Result<usize> {
        let input = model.preprocess(image)?;
        let result = backbone::extract_features(&model.params, &input)?;
        let mut predicted = 0;
        for (i, v) in result.logits.data().iter().enumerate() {
            if *v > result.logits.data()[predicted] {
                predicted = i;
            }
        }
        let heat = backbone::activation_map(&result, &model.params, predicted)?;
        let path = dir.join(format!("{}_cam.pgm", stem));
        write_file(&path, &heat_to_pgm(&heat, model.image_side)?)?;
        Ok(predicted)
    };

    if args.data.is_dir() {
        let set = load_image_folder(&args.data)?;
        let mut counters = vec![0usize; set.category_count()];
        for (image, label) in set.samples() {
            let name = &set.names()[*label];
            let stem = format!("{}_{:04}", name, counters[*label]);
            counters[*label] += 1;
            let predicted = emit(&stem, image)?;
            println!("{} predicted {}", stem, set.names()[predicted]);
        }
    } else {
        let name = args.data.display().to_string();
        let raw = std::fs::read(&args.data).map_err(|e| Error::io(format!("reading {}", name), e))?;
        let ext = args.data.extension().and_then(|e| e.to_str()).unwrap_or("");
        let image = match ext {
            "ppm" => codec::decode_ppm(&raw, &name)?,
            "pgm" => codec::decode_pgm(&raw, &name)?,
            "rawt" => codec::decode_rawt(&raw, &name)?,
            other => {
                return Err(Error::Undecodable {
                    path: name,
                    reason: format!("unsupported image extension {:?}", other),
                })
            }
        };
        let stem = args
            .data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".to_string());
        let predicted = emit(&stem, &image)?;
        println!("{} predicted class {}", stem, predicted);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn civil_dates_are_correct() {
        assert_eq!(days_to_civil(0), (1970, 1, 1));
        assert_eq!(days_to_civil(19_723), (2024, 1, 1));
        assert_eq!(days_to_civil(11_016), (2000, 2, 29));
        assert_eq!(days_to_civil(-1), (1969, 12, 31));
    }

    #[test]
    fn seed_lists_parse_and_reject() {
        assert_eq!(parse_seeds("0,1, 2").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("7").unwrap(), vec![7]);
        assert!(parse_seeds("1,x").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn config_flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "q = 3\nepochs = 9\n").unwrap();
        let flags = ConfigFlags {
            config: Some(path),
            q: Some(1),
            ..ConfigFlags::default()
        };
        let config = flags.resolve().unwrap();
        assert_eq!(config.q, 1);
        assert_eq!(config.epochs, 9);
    }
}
