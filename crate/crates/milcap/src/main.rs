//! Command-line front end: corpus and classification-set generation,
//! classifier pre-training, captioner training, captioning, evaluation,
//! geometry and gradient diagnostics, and the scale ablation.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use milcap::corpus::{self, Corpus, Split, CLASS_COUNT};
use milcap::gradcheck;
use milcap::mil;
use milcap::model;
use milcap::net;
use milcap::train::{
    self, CaptionModel, FeatureCache, PretrainConfig, TrainConfig,
};

#[derive(Parser)]
#[command(name = "milcap", version, about = "Multi-scale multiple-instance video captioning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print score-map geometry of a network manifest at chosen input sizes
    Geometry {
        /// Network manifest file
        #[arg(long)]
        spec: PathBuf,
        /// Comma-separated square input sizes, e.g. 227,259,323
        #[arg(long)]
        inputs: String,
    },
    /// Rewrite classifier weights in the fully-convolutional form
    Convert {
        /// Classifier checkpoint to convert
        #[arg(long = "in")]
        input: PathBuf,
        /// Network manifest the checkpoint belongs to
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic video-caption corpus
    GenCorpus {
        #[arg(long)]
        seed: u64,
        /// Corpus directory to create
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 120)]
        train: usize,
        #[arg(long, default_value_t = 10)]
        val: usize,
        #[arg(long, default_value_t = 67)]
        test: usize,
        #[arg(long, default_value_t = 40)]
        frame_size: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
    },
    /// Generate the labeled single-object image set for pre-training
    GenClassif {
        #[arg(long)]
        seed: u64,
        /// Container file to write
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 25)]
        per_class: usize,
        #[arg(long, default_value_t = 35)]
        image_size: usize,
    },
    /// Pre-train the classifier on a generated image set
    Pretrain {
        /// key=value config; must name set=<container>
        #[arg(long)]
        config: PathBuf,
        /// Classifier checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Also write the step log here
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the captioner from a pre-trained classifier
    Train {
        /// key=value config
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory
        #[arg(long)]
        corpus: PathBuf,
        /// Pre-trained classifier checkpoint
        #[arg(long)]
        init: PathBuf,
        /// Model file to write (plus .spec and .vocab sidecars)
        #[arg(long)]
        out: PathBuf,
        /// Also write the step log here
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Caption one video with a trained model
    Caption {
        #[arg(long)]
        model: PathBuf,
        /// Corpus video id, or a path to a video container
        #[arg(long)]
        video: String,
        /// Corpus directory (needed when --video is an id)
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
    },
    /// Greedy-decode a split and report corpus BLEU
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// train, val or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Also print one id<TAB>caption line per video
        #[arg(long)]
        captions: bool,
        #[arg(long, default_value_t = 12)]
        max_len: usize,
    },
    /// Verify analytic gradients against finite differences
    Gradcheck {
        /// all, conv, lstm or mil
        #[arg(long, default_value = "all")]
        ops: String,
    },
    /// Dump one concept's score map at one scale with its winning box
    Heatmap {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Corpus video id
        #[arg(long)]
        video: String,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Concept row of the score map
        #[arg(long)]
        concept: usize,
        /// One of the model's input sizes
        #[arg(long)]
        scale: usize,
        /// Write the dump here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several scale sets across seeds and tabulate test BLEU
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        /// Pre-trained classifier checkpoint
        #[arg(long)]
        init: PathBuf,
        /// Semicolon-separated scale sets, e.g. "35;35,91"
        #[arg(long)]
        scales: String,
        /// Number of seeds per set, used as 0..n
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Write the table here as well
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional base train config
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn read_to_string(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn parse_usize_list(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().with_context(|| format!("bad {what} entry {p:?}")))
        .collect()
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Geometry { spec, inputs } => {
            let spec = net::parse_manifest(&read_to_string(&spec)?)?;
            for size in parse_usize_list(&inputs, "input size")? {
                let g = spec.geometry(size)?;
                println!(
                    "input={} map={} rf={} jump={} center={:.1} ratio={:.1}%",
                    g.input_size,
                    g.map_size,
                    g.receptive_field,
                    g.jump,
                    g.center_offset,
                    100.0 * g.height_ratio(),
                );
            }
        }
        Cmd::Convert { input, spec, out } => {
            let spec = net::parse_manifest(&read_to_string(&spec)?)?;
            let params = train::load_net_params(&input, &spec)?;
            let fcn = model::convert_to_fcn(&spec, &params)?;
            train::save_net_params(&out, &fcn)?;
            println!("wrote {}", out.display());
        }
        Cmd::GenCorpus { seed, out, train, val, test, frame_size, frames } => {
            corpus::generate_corpus(seed, (train, val, test), frame_size, frames, &out)?;
            println!(
                "wrote {} videos ({train} train, {val} val, {test} test) under {}",
                train + val + test,
                out.display()
            );
        }
        Cmd::GenClassif { seed, out, per_class, image_size } => {
            corpus::generate_classification_set(seed, per_class, image_size, &out)?;
            println!("wrote {} images to {}", per_class * CLASS_COUNT, out.display());
        }
        Cmd::Pretrain { config, out, log } => {
            let cfg = PretrainConfig::from_text(&read_to_string(&config)?)?;
            let Some(set) = cfg.set.clone() else {
                bail!("pretrain config must name set=<classification container>");
            };
            let (images, labels) = corpus::load_classification_set(&set)?;
            let outcome = train::pretrain_classifier(&cfg, &images, &labels)?;
            train::save_net_params(&out, &outcome.params)?;
            if let Some(log_path) = log {
                std::fs::write(&log_path, &outcome.log)?;
            }
            println!("holdout_acc={:.4}", outcome.holdout_accuracy);
            println!("wrote {}", out.display());
        }
        Cmd::Train { config, corpus, init, out, log } => {
            let cfg = TrainConfig::from_text(&read_to_string(&config)?)?;
            let corpus = Corpus::load(&corpus)?;
            let classifier = train::load_net_params(&init, &net::mininet(CLASS_COUNT))?;
            let mut cache = FeatureCache::new();
            let outcome = train::train_captioner(&cfg, &corpus, &classifier, &mut cache)?;
            outcome.model.save(&out)?;
            if let Some(log_path) = log {
                std::fs::write(&log_path, &outcome.log)?;
            }
            println!("best_val_bleu={:.4}", outcome.best_val_bleu);
            println!("wrote {}", out.display());
        }
        Cmd::Caption { model, video, corpus, max_len } => {
            let model = CaptionModel::load(&model)?;
            let path = PathBuf::from(&video);
            let frames = if path.is_file() {
                corpus::read_video_frames(&path)?
            } else if let Some(dir) = corpus {
                Corpus::load(&dir)?.load_frames(&video)?
            } else {
                bail!("--video {video:?} is not a file, so --corpus must name its corpus");
            };
            println!("{}", train::caption_frames(&model, &frames, max_len)?);
        }
        Cmd::Eval { model, corpus, split, captions, max_len } => {
            let model = CaptionModel::load(&model)?;
            let corpus = Corpus::load(&corpus)?;
            let split = Split::parse(&split)?;
            let mut cache = FeatureCache::new();
            let (report, decoded) = train::eval_bleu(&model, &corpus, split, &mut cache, max_len)?;
            println!("{report}");
            if captions {
                for (id, text) in decoded {
                    println!("{id}\t{text}");
                }
            }
        }
        Cmd::Gradcheck { ops } => {
            let Some(group) = gradcheck::OpGroup::parse(&ops) else {
                bail!("--ops must be all, conv, lstm or mil");
            };
            let reports = gradcheck::run(group)?;
            let mut failed = false;
            for r in &reports {
                println!("{}", r.line());
                failed |= !r.pass;
            }
            if failed {
                bail!("a gradient check failed");
            }
        }
        Cmd::Heatmap { model, corpus, video, frame, concept, scale, out } => {
            let model = CaptionModel::load(&model)?;
            let corpus = Corpus::load(&corpus)?;
            let frames = corpus.load_frames(&video)?;
            if frame >= frames.len() {
                bail!("video {video:?} has {} frames, frame {frame} does not exist", frames.len());
            }
            let Some(si) = model.scales.iter().position(|&s| s == scale) else {
                bail!("model scales are {:?}, {scale} is not one of them", model.scales);
            };
            let stack = model::forward_multiscale(
                &model.spec,
                &model.shared,
                &model.fc8s,
                &model.scales,
                &frames[frame],
                model.five_crop,
            )?;
            let map = &stack.scales[si].map;
            let n = map.shape()[0];
            if concept >= n {
                bail!("score map has {n} concepts, concept {concept} does not exist");
            }
            let h = map.shape()[1];
            let mut text = String::new();
            writeln!(text, "video={video} frame={frame} concept={concept} scale={scale} map={h}x{h}")?;
            for y in 0..h {
                let row: Vec<String> = (0..h)
                    .map(|x| format!("{:.4}", map.data()[concept * h * h + y * h + x]))
                    .collect();
                writeln!(text, "{}", row.join(" "))?;
            }
            let one = milcap::model::ScoreMapStack { scales: vec![stack.scales[si].clone()] };
            let win = &mil::mil_introspect(&model.spec, &one, corpus.frame_size)?.winners[concept];
            writeln!(
                text,
                "winner value={:.4} cell=({},{}) box=[{:.2},{:.2},{:.2},{:.2}]",
                win.value,
                win.x,
                win.y,
                win.box_frame[0],
                win.box_frame[1],
                win.box_frame[2],
                win.box_frame[3],
            )?;
            match out {
                Some(path) => std::fs::write(&path, text)?,
                None => print!("{text}"),
            }
        }
        Cmd::Ablate { corpus, init, scales, seeds, out, config } => {
            let corpus = Corpus::load(&corpus)?;
            let classifier = train::load_net_params(&init, &net::mininet(CLASS_COUNT))?;
            let base = match config {
                Some(path) => TrainConfig::from_text(&read_to_string(&path)?)?,
                None => TrainConfig::default(),
            };
            let sets: Vec<Vec<usize>> = scales
                .split(';')
                .map(|s| parse_usize_list(s, "scale"))
                .collect::<Result<_>>()?;
            let seed_list: Vec<u64> = (0..seeds as u64).collect();
            let mut cache = FeatureCache::new();
            let (_, table) =
                train::run_ablation(&base, &corpus, &classifier, &sets, &seed_list, &mut cache)?;
            if let Some(path) = &out {
                std::fs::write(path, &table)?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes, like other line-oriented
    // tools, instead of panicking inside println.
    #[cfg(unix)]
    unsafe {
        extern "C" {
            fn signal(signum: i32, handler: usize) -> usize;
        }
        signal(13, 0); // SIGPIPE -> SIG_DFL
    }
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
