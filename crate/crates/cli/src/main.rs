//! `t2f`: command-line front end of the text-to-face pipeline.
//!
//! Exit status is 0 on success, 1 for usage, parse and contract errors, and
//! 2 for I/O failures. `T2F_PRECISION=32|64` selects the numeric precision of
//! commands that build networks; commands that read a checkpoint use the
//! precision recorded in it.

mod manifest;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use t2f_core::caption::{caption_corpus, corpus_to_jsonl, corpus_to_tsv, parse_attr_file, read_corpus};
use t2f_core::checkpoint::{peek_header, MODEL_MAGIC};
use t2f_core::embedding::{embed_caption, EmbeddingConfig};
use t2f_core::engine::Tensor;
use t2f_core::evaluator::{
    class_captions, evaluate_generator, read_class_captions, skew_sweep, write_class_captions, ClassifierConfig,
    ProbeClassifier, SkewConfig,
};
use t2f_core::gradcheck;
use t2f_core::imageio::save_grid;
use t2f_core::synth::{generate_dataset, load_dataset_dir, write_dataset, Split, SynthConfig};
use t2f_core::trainer::{TrainConfig, Trainer};
use t2f_core::{Error, Precision, Result, Scalar};

use manifest::RunManifest;

/// File of test-split captions labelled by identity, written next to a synthetic dataset.
const EVAL_CAPTIONS_FILE: &str = "eval_captions.jsonl";

#[derive(Parser, Debug)]
#[command(name = "t2f", version, about = "Text-to-face GAN laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compile a CelebA attribute file into captions (.tsv or JSONL by extension).
    Caption {
        #[arg(long)]
        attrs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only these image ids, in file order.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
    },
    /// Embed one caption or a caption corpus.
    Embed {
        #[arg(long, conflicts_with = "captions")]
        text: Option<String>,
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = EmbeddingConfig::default().dim)]
        dim: usize,
    },
    /// Render a synthetic attribute-conditioned face dataset.
    Synth {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the GAN-CLS model on a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Report stream destination; defaults to `<out>.reports.jsonl`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render a grid of images for one caption.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        cols: Option<usize>,
    },
    /// Inception score of a generator under a probe classifier.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long, default_value_t = 2048)]
        samples: usize,
        #[arg(long, default_value_t = 5)]
        splits: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the probe classifier on a dataset's identity classes.
    Classifier {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ClassifierConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every primitive and both networks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Skew sweep of the inception score.
    Critique {
        #[arg(long, default_value_t = SkewConfig::default().classes)]
        classes: usize,
        #[arg(long, default_value_t = SkewConfig::default().samples)]
        samples: usize,
        #[arg(long, default_value_t = SkewConfig::default().splits)]
        splits: usize,
        #[arg(long, default_value_t = 1.0)]
        confidence: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Result of a command: the manifest to write (and where), and whether all checks passed.
struct Outcome {
    manifest: Option<(PathBuf, RunManifest)>,
    ok: bool,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    ExitCode::from(run(&argv))
}

fn run(argv: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let display_only = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if display_only { 0 } else { 1 };
        }
    };
    let start = Instant::now();
    match dispatch(cli.command, argv) {
        Ok(outcome) => {
            if let Some((path, mut m)) = outcome.manifest {
                m.duration_secs = start.elapsed().as_secs_f64();
                if let Err(e) = m.write(&path) {
                    eprintln!("error: {e}");
                    return 2;
                }
            }
            if outcome.ok {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn precision() -> Result<Precision> {
    Precision::from_env().map_err(Error::contract)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn dispatch(cmd: Command, argv: &[String]) -> Result<Outcome> {
    let mut m = RunManifest::new(argv);
    let done = |path: PathBuf, m: RunManifest| {
        Ok(Outcome {
            manifest: Some((path, m)),
            ok: true,
        })
    };
    match cmd {
        Command::Caption { attrs, out, ids } => {
            let vectors = parse_attr_file(&attrs)?;
            let mut corpus = caption_corpus(&vectors);
            if !ids.is_empty() {
                if let Some(missing) = ids.iter().find(|id| !corpus.iter().any(|r| &r.image_id == *id)) {
                    return Err(Error::contract(format!("image id {missing} not in {}", attrs.display())));
                }
                corpus.retain(|r| ids.contains(&r.image_id));
            }
            let tsv = out.extension().is_some_and(|e| e == "tsv");
            write_file(&out, if tsv { corpus_to_tsv(&corpus) } else { corpus_to_jsonl(&corpus) })?;
            m.config = json!({ "attrs": attrs, "ids": ids, "format": if tsv { "tsv" } else { "jsonl" } });
            m.add_input(&attrs)?;
            m.add_artifact(&out)?;
            println!("{} captions -> {}", corpus.len(), out.display());
            done(manifest::path_for(&out), m)
        }
        Command::Embed { text, captions, out, dim } => {
            let cfg = EmbeddingConfig::with_dim(dim);
            cfg.validate()?;
            let raw = out.extension().is_some_and(|e| e == "f32");
            let body: Vec<u8> = match (text, &captions) {
                (Some(t), None) if raw => embed_caption(&t, &cfg)
                    .values
                    .iter()
                    .flat_map(|&v| (v as f32).to_le_bytes())
                    .collect(),
                (Some(t), None) => {
                    (serde_json::to_string(&embed_caption(&t, &cfg).values).expect("floats serialize") + "\n").into_bytes()
                }
                (None, Some(_)) if raw => return Err(Error::contract("raw .f32 output takes a single --text")),
                (None, Some(path)) => {
                    m.add_input(path)?;
                    read_corpus(path)?
                        .iter()
                        .map(|r| {
                            let e = embed_caption(&r.caption_text, &cfg);
                            json!({ "image_id": r.image_id, "embedding": e.values }).to_string() + "\n"
                        })
                        .collect::<String>()
                        .into_bytes()
                }
                _ => return Err(Error::contract("embed needs exactly one of --text or --captions")),
            };
            write_file(&out, body)?;
            m.config = serde_json::to_value(&cfg).expect("config serializes");
            m.add_artifact(&out)?;
            done(manifest::path_for(&out), m)
        }
        Command::Synth { n, classes, size, seed, out } => {
            let cfg = SynthConfig {
                n,
                classes,
                seed,
                size,
                ..SynthConfig::default()
            };
            let emb = EmbeddingConfig::default();
            let ds = generate_dataset(&cfg, &emb)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut files = write_dataset(&ds, &out)?;
            let eval = out.join(EVAL_CAPTIONS_FILE);
            write_class_captions(&class_captions(&ds, Split::Test), &eval)?;
            files.push(eval);
            m.config = json!({ "synth": cfg, "embedding": emb });
            m.seeds.insert("synth".into(), seed);
            for f in files.iter().filter(|f| f.parent() == Some(out.as_path())) {
                m.add_artifact(f)?;
            }
            m.add_tree_digest("images", &out.join(t2f_core::synth::IMAGE_DIR), &files)?;
            println!("{} records ({} classes, {size}x{size}) -> {}", ds.len(), ds.class_count, out.display());
            done(out.join(manifest::DIR_MANIFEST), m)
        }
        Command::Train {
            dataset,
            config,
            out,
            resume,
            report,
        } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let cfg = TrainConfig::parse(&text, &config.display().to_string())?;
            let report = report.unwrap_or_else(|| sibling(&out, "reports.jsonl"));
            m.config = serde_json::to_value(&cfg).expect("config serializes");
            m.seeds.insert("train".into(), cfg.seed);
            m.add_input(&config)?;
            let p = match &resume {
                Some(r) => peek_header(r)?.1,
                None => precision()?,
            };
            m.precision = p;
            let iters = match p {
                Precision::F32 => train::<f32>(&dataset, cfg, &out, resume.as_deref(), &report)?,
                Precision::F64 => train::<f64>(&dataset, cfg, &out, resume.as_deref(), &report)?,
            };
            m.config["completed_iterations"] = json!(iters);
            m.add_artifact(&out)?;
            m.add_artifact(&report)?;
            done(manifest::path_for(&out), m)
        }
        Command::Generate {
            ckpt,
            caption,
            n,
            grid,
            seed,
            cols,
        } => {
            if n == 0 {
                return Err(Error::contract("--n must be at least 1"));
            }
            let (magic, p) = peek_header(&ckpt)?;
            if magic != MODEL_MAGIC {
                return Err(Error::contract(format!("{} is not a model checkpoint", ckpt.display())));
            }
            let cols = cols.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize);
            match p {
                Precision::F32 => generate::<f32>(&ckpt, &caption, n, seed, cols, &grid)?,
                Precision::F64 => generate::<f64>(&ckpt, &caption, n, seed, cols, &grid)?,
            }
            m.precision = p;
            m.config = json!({ "caption": caption, "n": n, "cols": cols });
            m.seeds.insert("noise".into(), seed);
            m.add_input(&ckpt)?;
            m.add_artifact(&grid)?;
            done(manifest::path_for(&grid), m)
        }
        Command::Evaluate {
            ckpt,
            captions,
            classifier,
            samples,
            splits,
            seed,
            out,
        } => {
            let (_, p) = peek_header(&ckpt)?;
            let report = match p {
                Precision::F32 => evaluate::<f32>(&ckpt, &captions, &classifier, samples, splits, seed)?,
                Precision::F64 => evaluate::<f64>(&ckpt, &captions, &classifier, samples, splits, seed)?,
            };
            write_file(&out, serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
            println!(
                "inception score {:.4} +- {:.4} (raw mean KL {:.4})",
                report.score_exp, report.score_std, report.score_kl
            );
            m.precision = p;
            m.config = json!({ "samples": samples, "splits": splits });
            m.seeds.insert("noise".into(), seed);
            for input in [&ckpt, &captions, &classifier] {
                m.add_input(input)?;
            }
            m.add_artifact(&out)?;
            done(manifest::path_for(&out), m)
        }
        Command::Classifier {
            dataset,
            out,
            epochs,
            seed,
        } => {
            let cfg = ClassifierConfig {
                epochs,
                seed,
                ..ClassifierConfig::default()
            };
            let size = dataset_image_size(&dataset)?;
            let ds = load_dataset_dir(&dataset, size, &EmbeddingConfig::default())?;
            let p = precision()?;
            let meta = match p {
                Precision::F32 => {
                    let c = ProbeClassifier::<f32>::train(&ds, cfg.clone())?;
                    c.save(&out)?;
                    c.meta
                }
                Precision::F64 => {
                    let c = ProbeClassifier::<f64>::train(&ds, cfg.clone())?;
                    c.save(&out)?;
                    c.meta
                }
            };
            println!(
                "classifier: train accuracy {:.3}, test accuracy {:.3}",
                meta.train_accuracy, meta.test_accuracy
            );
            m.precision = p;
            m.config = serde_json::to_value(&meta).expect("meta serializes");
            m.seeds.insert("classifier".into(), seed);
            m.add_artifact(&out)?;
            done(manifest::path_for(&out), m)
        }
        Command::Gradcheck { seed, out } => {
            let results = gradcheck::run_suite(seed)?;
            let mut all = true;
            for r in &results {
                all &= r.passed;
                println!(
                    "{} {:<28} max rel err {:.3e} over {} partials",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_rel_err,
                    r.checked
                );
            }
            let manifest = match out {
                Some(path) => {
                    write_file(&path, serde_json::to_string_pretty(&results).expect("results serialize") + "\n")?;
                    m.config = json!({ "step": gradcheck::STEP, "floor": gradcheck::FLOOR, "tolerance": gradcheck::TOLERANCE });
                    m.precision = Precision::F64;
                    m.seeds.insert("gradcheck".into(), seed);
                    m.add_artifact(&path)?;
                    Some((manifest::path_for(&path), m))
                }
                None => None,
            };
            Ok(Outcome { manifest, ok: all })
        }
        Command::Critique {
            classes,
            samples,
            splits,
            confidence,
            seed,
            out,
        } => {
            let cfg = SkewConfig {
                classes,
                samples,
                splits,
                confidence,
                seed,
                ..SkewConfig::default()
            };
            let rows = skew_sweep(&cfg)?;
            println!("{:>6} {:>8} {:>10} {:>10} {:>12}", "skew", "overlap", "score", "std", "closed form");
            for r in &rows {
                println!(
                    "{:>6.2} {:>8.2} {:>10.4} {:>10.4} {:>12.4}",
                    r.skew, r.overlap, r.score_mean, r.score_std, r.closed_form
                );
            }
            let manifest = match out {
                Some(path) => {
                    write_file(&path, serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n")?;
                    m.config = serde_json::to_value(&cfg).expect("config serializes");
                    m.seeds.insert("critique".into(), seed);
                    m.add_artifact(&path)?;
                    Some((manifest::path_for(&path), m))
                }
                None => None,
            };
            Ok(Outcome { manifest, ok: true })
        }
    }
}

/// `<path>.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

/// Image size of a dataset directory, read from its first image.
fn dataset_image_size(dir: &Path) -> Result<usize> {
    let images = dir.join(t2f_core::synth::IMAGE_DIR);
    let mut entries: Vec<PathBuf> = fs::read_dir(&images)
        .map_err(|e| Error::io(&images, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let first = entries.first().ok_or_else(|| Error::MissingFiles(vec![images.display().to_string()]))?;
    let (w, h) = image_dims(first)?;
    Ok(w.min(h))
}

fn image_dims(path: &Path) -> Result<(usize, usize)> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let (w, h) = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .into_dimensions()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    Ok((w as usize, h as usize))
}

fn train<S: Scalar>(dataset: &Path, cfg: TrainConfig, out: &Path, resume: Option<&Path>, report: &Path) -> Result<u64> {
    let emb = EmbeddingConfig::default();
    let ds = load_dataset_dir(dataset, cfg.image_size, &emb)?;
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::<S>::load(path)?;
            let extendable = TrainConfig {
                max_iters: t.config.max_iters,
                epochs: t.config.epochs,
                checkpoint_every: t.config.checkpoint_every,
                ..cfg.clone()
            };
            if extendable != t.config {
                return Err(Error::contract(
                    "a resumed run may only change max_iters, epochs and checkpoint_every",
                ));
            }
            t.config = cfg;
            t
        }
        None => Trainer::<S>::new(cfg, &emb)?,
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = if resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(report)
    } else {
        fs::File::create(report)
    };
    let mut sink = std::io::BufWriter::new(file.map_err(|e| Error::io(report, e))?);
    let total = trainer.total_iterations(&ds)?;
    let mut warned = false;
    trainer.run(&ds, Some(out), |r| {
        let line = serde_json::to_string(r).expect("report serializes");
        writeln!(sink, "{line}").map_err(|e| Error::io(report, e))?;
        if r.collapse_warning && !warned {
            eprintln!("warning: discriminator saturated for 50 iterations at iteration {}", r.iter);
            warned = true;
        }
        if r.iter % 100 == 0 || r.iter == total {
            println!(
                "iter {:>6}/{total}  L_D {:.4}  L_G {:.4}  D(real) {:.3}  D(fake) {:.3}",
                r.iter, r.loss_d, r.loss_g, r.d_real, r.d_fake
            );
        }
        Ok(())
    })?;
    sink.flush().map_err(|e| Error::io(report, e))?;
    Ok(trainer.iteration)
}

fn generate<S: Scalar>(ckpt: &Path, caption: &str, n: usize, seed: u64, cols: usize, grid: &Path) -> Result<()> {
    let t = Trainer::<S>::load(ckpt)?;
    let phi = embed_caption(caption, &t.embedding).to_scalar::<S>();
    let phi = Tensor::new(vec![n, phi.len()], phi.repeat(n))?;
    let z = t.model.sample_noise::<S>(n, &mut ChaCha8Rng::seed_from_u64(seed));
    let images = t.generator.generate(&z, &phi)?;
    if let Some(dir) = grid.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_grid(&images, cols, grid)
}

fn evaluate<S: Scalar>(
    ckpt: &Path,
    captions: &Path,
    classifier: &Path,
    samples: usize,
    splits: usize,
    seed: u64,
) -> Result<t2f_core::evaluator::ScoreReport> {
    let t = Trainer::<S>::load(ckpt)?;
    let caps = read_class_captions(captions)?;
    let (_, cp) = peek_header(classifier)?;
    match cp {
        Precision::F32 => {
            let c = ProbeClassifier::<f32>::load(classifier)?;
            evaluate_generator(&t.generator, &t.embedding, &caps, &c, samples, splits, seed)
        }
        Precision::F64 => {
            let c = ProbeClassifier::<f64>::load(classifier)?;
            evaluate_generator(&t.generator, &t.embedding, &caps, &c, samples, splits, seed)
        }
    }
}
