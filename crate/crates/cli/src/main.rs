use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use swincd::metrics::{MetricsAccumulator, MetricsReport};
use swincd::oracle::{gradient_suite, SuiteConfig};
use swincd::pipeline::data::{load_dataset, load_pair, read_manifest, save_dataset};
use swincd::pipeline::raster::{self, read_mask, read_probability, write_mask, write_probability};
use swincd::pipeline::synth::check_size;
use swincd::pipeline::{synth_dataset, tile, Checkpoint, Raster, RunConfig, Trainer};
use swincd::tensor::gradcheck::DEFAULT_TOL;
use swincd::{Error, Result};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "swincd", version, about = "Bitemporal change detection: data, training, prediction, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of image pairs with change masks.
    Synth {
        /// Output directory (receives t1/, t2/, mask/ and manifest.tsv).
        #[arg(long)]
        out: PathBuf,
        /// Number of pairs.
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Image side in pixels, a multiple of 64.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cut every pair of a dataset into non-overlapping square tiles.
    Tile {
        /// Dataset directory or manifest.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tile side in pixels; remainders are dropped.
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Train a model and write its run directory.
    Train {
        /// Configuration file; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory or manifest.
        #[arg(long)]
        data: PathBuf,
        /// Run directory (config.txt, VERSION, train.log, steps.tsv, model.ckpt).
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a probability map and a binary mask for every pair.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory (receives prob/ and mask/).
        #[arg(long)]
        out: PathBuf,
        /// Override the threshold stored with the checkpoint.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score predictions against the ground-truth masks of a dataset.
    Eval {
        /// Prediction directory: prob/<id>.pgm with sidecars, or mask/<id>.pgm.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory or manifest holding the reference masks.
        #[arg(long)]
        gt: PathBuf,
        /// Report directory (metrics.txt and metrics.json).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = swincd::metrics::DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Configuration file supplying the model and loss settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Largest accepted relative error.
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the documented configuration (defaults, or a file's effective values).
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => Ok(RunConfig::default()),
    }
}

fn synth(out: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    check_size(size)?;
    let pairs = synth_dataset(n, size, seed)?;
    let manifest = save_dataset(out, &pairs)?;
    println!("wrote {n} pairs to {}", manifest.display());
    Ok(())
}

fn tile_cmd(input: &Path, out: &Path, size: usize) -> Result<()> {
    let mut tiles = Vec::new();
    for e in read_manifest(input)? {
        let pair = load_pair(&e)?;
        let (h, w) = pair.size();
        let t = tile(&pair, size)?;
        if t.is_empty() {
            eprintln!("warning: {} is {h}x{w}, smaller than the {size}px tile; skipped", e.id);
        }
        tiles.extend(t);
    }
    let manifest = save_dataset(out, &tiles)?;
    println!("wrote {} tiles to {}", tiles.len(), manifest.display());
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let pairs = load_dataset(data)?;
    raster::write(&out.join("config.txt"), cfg.to_documented_text().as_bytes())?;
    raster::write(&out.join("VERSION"), format!("swincd {VERSION}\n").as_bytes())?;
    let mut trainer = Trainer::new(cfg)?;
    let log = trainer.fit(&pairs, |e| println!("{e}"))?;
    raster::write(&out.join("train.log"), log.to_text().as_bytes())?;
    let mut steps = String::from("step\tepoch\tlr\ttotal\tfused\twbce\tssim\tsiou\n");
    for s in &log.steps {
        steps.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            s.step,
            s.epoch,
            s.lr,
            s.loss.total,
            s.loss.fused.total(),
            s.terms.wbce,
            s.terms.ssim,
            s.terms.siou
        ));
    }
    raster::write(&out.join("steps.tsv"), steps.as_bytes())?;
    trainer.checkpoint().save(&out.join("model.ckpt"))?;
    println!("checkpoint written to {}", out.join("model.ckpt").display());
    Ok(())
}

fn predict(ckpt: &Path, data: &Path, out: &Path, threshold: Option<f64>) -> Result<()> {
    let trainer = Trainer::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let t = threshold.unwrap_or(trainer.cfg.threshold);
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
    }
    let pairs = load_dataset(data)?;
    for p in trainer.predict(&pairs, t)? {
        write_probability(&out.join("prob").join(format!("{}.pgm", p.id)), p.h, p.w, &p.prob)?;
        write_mask(&out.join("mask").join(format!("{}.pgm", p.id)), &Raster::new(p.h, p.w, 1, p.mask)?)?;
    }
    println!("wrote {} predictions to {}", pairs.len(), out.display());
    Ok(())
}

fn prediction_for(dir: &Path, id: &str) -> Result<(usize, usize, Vec<f64>)> {
    let prob = dir.join("prob").join(format!("{id}.pgm"));
    if prob.exists() {
        return read_probability(&prob);
    }
    let m = read_mask(&dir.join("mask").join(format!("{id}.pgm")))?;
    Ok((m.h, m.w, m.data.iter().map(|&v| v as f64).collect()))
}

fn report_text(r: &MetricsReport, threshold: f64) -> String {
    let mut s = format!(
        "threshold={threshold}\nimages={}\ntp={}\nfp={}\ntn={}\nfn={}\nprecision={}\nrecall={}\nf1={}\niou={}\noa={}\nmba={}\n",
        r.images, r.counts.tp, r.counts.fp, r.counts.tn, r.counts.fn_, r.precision, r.recall, r.f1, r.iou, r.oa, r.mba
    );
    for (fpr, tpr) in &r.roc {
        s.push_str(&format!("roc={fpr},{tpr}\n"));
    }
    s
}

fn eval(pred: &Path, gt: &Path, out: &Path, threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut acc = MetricsAccumulator::new(threshold);
    for e in read_manifest(gt)? {
        let mask = read_mask(&e.mask)?;
        let (h, w, prob) = prediction_for(pred, &e.id)?;
        if (h, w) != (mask.h, mask.w) {
            return Err(Error::Data(format!("{}: prediction is {h}x{w}, mask is {}x{}", e.id, mask.h, mask.w)));
        }
        acc.add(&prob, &mask.data, h, w)?;
    }
    let r = acc.report();
    let doc = json!({
        "threshold": threshold,
        "images": r.images,
        "counts": {"tp": r.counts.tp, "fp": r.counts.fp, "tn": r.counts.tn, "fn": r.counts.fn_},
        "precision": r.precision,
        "recall": r.recall,
        "f1": r.f1,
        "iou": r.iou,
        "oa": r.oa,
        "mba": r.mba,
        "roc": r.roc.iter().map(|&(f, t)| json!({"fpr": f, "tpr": t})).collect::<Vec<_>>(),
    });
    let text = report_text(&r, threshold);
    raster::write(&out.join("metrics.txt"), text.as_bytes())?;
    let pretty = serde_json::to_string_pretty(&doc).map_err(|e| Error::Data(e.to_string()))?;
    raster::write(&out.join("metrics.json"), pretty.as_bytes())?;
    print!("{}", text.lines().filter(|l| !l.starts_with("roc=")).map(|l| format!("{l}\n")).collect::<String>());
    Ok(())
}

/// Returns whether every component passed.
fn gradcheck(config: Option<&Path>, tol: f64, seed: u64) -> Result<bool> {
    let cfg = load_config(config)?;
    let suite = SuiteConfig { tol, model: cfg.model, loss: cfg.loss, seed, ..SuiteConfig::default() };
    let reps = gradient_suite(&suite)?;
    let width = reps.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &reps {
        println!(
            "{} {:width$} worst={:.3e} checked={} skipped={} instances={}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.worst,
            r.checked,
            r.skipped_kinks,
            r.instances
        );
    }
    let failed = reps.iter().filter(|r| !r.passed()).count();
    println!("{} of {} components within {tol:e}", reps.len() - failed, reps.len());
    Ok(failed == 0)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let r = match cli.cmd {
        Command::Synth { out, n, size, seed } => synth(&out, n, size, seed),
        Command::Tile { input, out, size } => tile_cmd(&input, &out, size),
        Command::Train { config, data, out } => train(config.as_deref(), &data, &out),
        Command::Predict { ckpt, data, out, threshold } => predict(&ckpt, &data, &out, threshold),
        Command::Eval { pred, gt, out, threshold } => eval(&pred, &gt, &out, threshold),
        Command::Gradcheck { config, tol, seed } => match gradcheck(config.as_deref(), tol, seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(3),
            Err(e) => Err(e),
        },
        Command::Config { config } => load_config(config.as_deref()).map(|c| print!("{}", c.to_documented_text())),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
