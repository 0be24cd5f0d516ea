//! Command-line front end. `main.rs` only parses arguments and maps errors
//! to exit codes; everything else lives here so it can be tested.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::acquisition::{aggregate, bald_map, Aggregation, ImageId};
use crate::al_loop::{run_experiment, ExperimentData};
use crate::config::{keys_help, ConfigFile};
use crate::container::{read_container, write_container, Metadata, Tensor};
use crate::error::{Error, Result};
use crate::model::{init_model, load_checkpoint, save_checkpoint, train, Layer, SegModel};
use crate::report::{run_report, write_curves, write_scores, CurveRow, ReportOptions, ScoreRow};
use crate::synth::{self, Dataset, DatasetManifest, Jitter};
use crate::tensor::{Image, ProbabilityStack};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "segal", version, about = "Active learning for crop/weed segmentation", after_long_help = keys_help())]
pub struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (checkpoint directory for `pretrain`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset and its manifest.
    Generate,
    /// Train from fresh weights on a whole dataset and save a checkpoint.
    Pretrain {
        /// Dataset manifest; defaults to the `pretrain_manifest` key.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run the active-learning experiment and write curves.csv.
    Run,
    /// Score one probability stack, or one image through a checkpoint.
    Score {
        /// ALTS file: a rank-4 probability stack or a rank-2/3 image.
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint directory, required for image input.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        image_id: ImageId,
        /// Monte-Carlo passes for image input (default: config or 20).
        #[arg(long)]
        mc_samples: Option<usize>,
        /// Dropout for image input (default: config or the checkpoint's).
        #[arg(long)]
        dropout: Option<f64>,
        /// mean | topk:K
        #[arg(long, default_value = "mean")]
        aggregation: Aggregation,
        /// Also write the pixel score map as an ALTS container.
        #[arg(long)]
        score_map: Option<PathBuf>,
    },
    /// Summaries, ANOVA, histograms and an optional plot from curves files.
    Report {
        #[arg(required = true)]
        curves: Vec<PathBuf>,
        /// scores.csv files to histogram.
        #[arg(long)]
        scores: Vec<PathBuf>,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Histogram range as `lo,hi` (default: 0 to the largest score).
        #[arg(long, value_parser = parse_range)]
        range: Option<(f64, f64)>,
        /// Write curves.svg.
        #[arg(long)]
        plot: bool,
        /// Full-pool mIoU drawn as a dashed line.
        #[arg(long)]
        benchmark: Option<f64>,
    },
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = a.trim().parse().map_err(|_| format!("bad number {a:?}"))?;
    let hi: f64 = b.trim().parse().map_err(|_| format!("bad number {b:?}"))?;
    Ok((lo, hi))
}

/// Exit code for an error: 2 config, 3 data, 4 runtime.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_)
        | Error::InvalidArgument(_)
        | Error::InvalidArchitecture(_)
        | Error::Unsatisfiable(_) => EXIT_CONFIG,
        Error::Container(_)
        | Error::InvalidStack(_)
        | Error::DimensionMismatch(_)
        | Error::EmptyDataset
        | Error::UnknownImage(_)
        | Error::DuplicateImage(_)
        | Error::File { .. }
        | Error::Csv { .. } => EXIT_DATA,
        _ => EXIT_RUNTIME,
    }
}

impl Cli {
    fn load_config(&self) -> Result<ConfigFile> {
        let mut cfg = match &self.config {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        if let Some(s) = self.seed {
            cfg.set("seed", s.to_string());
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required".into()))
    }

    /// Output directory, refusing a non-empty one without `--force`.
    fn prepare_out(&self) -> Result<PathBuf> {
        let dir = self.out_dir()?;
        if let Ok(mut entries) = std::fs::read_dir(dir) {
            if entries.next().is_some() && !self.force {
                return Err(Error::Config(format!(
                    "{} exists and is not empty (use --force)",
                    dir.display()
                )));
            }
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        Ok(dir.to_path_buf())
    }
}

/// Runs a parsed command; returns what should go to stdout.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Generate => cmd_generate(cli),
        Command::Pretrain { manifest } => cmd_pretrain(cli, manifest.as_deref()),
        Command::Run => cmd_run(cli),
        Command::Score {
            input,
            checkpoint,
            image_id,
            mc_samples,
            dropout,
            aggregation,
            score_map,
        } => cmd_score(
            cli,
            &ScoreArgs {
                input,
                checkpoint: checkpoint.as_deref(),
                image_id: *image_id,
                mc_samples: *mc_samples,
                dropout: *dropout,
                aggregation: *aggregation,
                score_map: score_map.as_deref(),
            },
        ),
        Command::Report {
            curves,
            scores,
            bins,
            range,
            plot,
            benchmark,
        } => {
            let opts = ReportOptions {
                scores: scores.clone(),
                bins: *bins,
                range: *range,
                plot: *plot,
                benchmark: *benchmark,
            };
            let out = run_report(curves, &opts, cli.out_dir()?)?;
            let mut s = format!("{}\n{}\n", out.summary.display(), out.stats.display());
            for h in out.histograms.iter().chain(&out.plot) {
                let _ = writeln!(s, "{}", h.display());
            }
            Ok(s)
        }
    }
}

fn cmd_generate(cli: &Cli) -> Result<String> {
    let cfg = cli.load_config()?;
    let n: usize = cfg.require("n_images")?;
    let scene = cfg.scene()?;
    scene.validate()?;
    let out = cli.prepare_out()?;
    let mut manifest = synth::generate_dataset(&scene, n, &out)?;
    let factor: usize = cfg.get_or("redundancy", 1)?;
    if factor > 1 {
        let jitter = Jitter {
            max_shift: cfg.get_or("jitter_shift", 2)?,
            noise_amplitude: cfg.get_or("jitter_noise", 0.02)?,
        };
        manifest = synth::inject_redundancy(&manifest, factor, jitter, scene.seed)?;
    }
    let f = synth::class_stats(&manifest)?;
    Ok(format!(
        "{} images in {}; class fractions background {:.4} crop {:.4} weed {:.4}\n",
        manifest.entries.len(),
        out.display(),
        f[0],
        f[1],
        f[2]
    ))
}

fn cmd_pretrain(cli: &Cli, manifest: Option<&Path>) -> Result<String> {
    let cfg = cli.load_config()?;
    let manifest_path = match manifest {
        Some(p) => p.to_path_buf(),
        None => cfg.require_path("pretrain_manifest")?,
    };
    let arch = cfg.architecture()?;
    let tc = cfg.train()?;
    let data = Dataset::load(&DatasetManifest::load(&manifest_path)?)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let out = cli.prepare_out()?;
    let init = init_model(&arch, tc.init_seed)?;
    let pairs: Vec<(Image, crate::tensor::ClassMask)> = data
        .samples()
        .iter()
        .map(|s| (s.image.clone(), s.mask.clone()))
        .collect();
    let (model, loss) = if tc.epochs == 0 {
        (init, None)
    } else {
        let (m, rep) = train(&init, &pairs, &tc).map_err(|e| e.context("pretraining"))?;
        (m, Some(rep))
    };
    let model = model.round_to_f32();
    let mut meta = BTreeMap::new();
    meta.insert("seed".into(), tc.init_seed.to_string());
    meta.insert("epochs".into(), tc.epochs.to_string());
    meta.insert("learning_rate".into(), tc.learning_rate.to_string());
    meta.insert("batch_size".into(), tc.batch_size.to_string());
    meta.insert("images".into(), data.len().to_string());
    if let Some(r) = &loss {
        meta.insert("initial_loss".into(), r.initial_loss.to_string());
        meta.insert("final_loss".into(), r.final_loss.to_string());
    }
    save_checkpoint(&model, &out, &meta)?;
    Ok(match loss {
        Some(r) => format!(
            "checkpoint {}: {} images, loss {:.4} -> {:.4}\n",
            out.display(),
            data.len(),
            r.initial_loss,
            r.final_loss
        ),
        None => format!("checkpoint {}: initialisation only\n", out.display()),
    })
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::file(p, e))
}

fn conv_widths(model_arch: &crate::model::Architecture) -> String {
    let widths: Vec<String> = model_arch
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::Conv { out_channels, .. } => Some(out_channels.to_string()),
            _ => None,
        })
        .collect();
    widths[..widths.len() - 1].join(",")
}

fn cmd_run(cli: &Cli) -> Result<String> {
    let mut cfg = cli.load_config()?;
    let pool_path = absolute(&cfg.require_path("pool_manifest")?)?;
    let val_path = absolute(&cfg.require_path("val_manifest")?)?;
    let warm_path = cfg.path("warm_start").map(|p| absolute(&p)).transpose()?;
    let kinds = cfg.acquisitions()?;
    let threads: usize = cfg.get_or("threads", 0)?;
    let histograms: bool = cfg.get_or("histograms", false)?;
    let pool = Dataset::load(&DatasetManifest::load(&pool_path)?).map_err(|e| e.context("pool"))?;
    let val = Dataset::load(&DatasetManifest::load(&val_path)?).map_err(|e| e.context("validation set"))?;
    let first = pool.samples().first().ok_or(Error::EmptyDataset)?;
    let pixels = first.image.height() * first.image.width();
    let experiments = kinds
        .iter()
        .map(|&k| cfg.experiment(k, pixels))
        .collect::<Result<Vec<_>>>()?;
    for e in &experiments {
        e.validate(pool.len())?;
    }
    let warm: Option<SegModel> = match &warm_path {
        Some(p) => Some(load_checkpoint(p).map_err(|e| e.context("warm start"))?.0),
        None => None,
    };
    let out = cli.prepare_out()?;

    // resolved echo, enough to reproduce the run
    let e0 = &experiments[0];
    cfg.set("seed", e0.seed.to_string());
    cfg.set("run_id", e0.run_id.clone());
    cfg.set("acquisitions", kinds.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","));
    cfg.set("iterations", e0.iterations.to_string());
    cfg.set("sample_size", e0.sample_size.to_string());
    cfg.set("initial_size", e0.initial_size.to_string());
    cfg.set("mc_samples", e0.mc_samples.to_string());
    cfg.set("repetitions", e0.repetitions.to_string());
    cfg.set("temperature", e0.acquisition.temperature.to_string());
    match e0.acquisition.aggregation {
        Aggregation::Mean => cfg.set("aggregation", "mean"),
        Aggregation::TopK(k) => {
            cfg.set("aggregation", "topk");
            cfg.set("topk_k", k.to_string());
        }
    }
    cfg.set("retrain_mode", e0.retrain_mode.to_string());
    cfg.set("dropout_probability", e0.dropout_p.to_string());
    cfg.set("in_channels", e0.arch.in_channels().to_string());
    cfg.set("conv_widths", conv_widths(&e0.arch));
    cfg.set("epochs", e0.train.epochs.to_string());
    cfg.set("learning_rate", e0.train.learning_rate.to_string());
    cfg.set("batch_size", e0.train.batch_size.to_string());
    cfg.set("pool_manifest", pool_path.display().to_string());
    cfg.set("val_manifest", val_path.display().to_string());
    if let Some(w) = &warm_path {
        cfg.set("warm_start", w.display().to_string());
    }
    cfg.set("threads", threads.to_string());
    cfg.set("histograms", histograms.to_string());
    let meta_path = out.join("run.meta");
    crate::container::write_atomic(&meta_path, cfg.to_text().as_bytes())
        .map_err(|e| Error::file(&meta_path, e))?;

    let pool_threads = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let data = ExperimentData {
        pool: &pool,
        val: &val,
        warm_start: warm.as_ref(),
    };
    let mut rows = Vec::new();
    let mut scores = Vec::new();
    for e in &experiments {
        let res = pool_threads.install(|| run_experiment(e, &data))?;
        for r in &res.records {
            rows.push(CurveRow::from_record(&e.run_id, r)?);
        }
        for t in &res.traces {
            for (i, round) in t.scores.iter().enumerate() {
                let tag = format!("{}_rep{}_iter{}", e.acquisition.kind, t.repetition, i + 1);
                scores.extend(round.iter().map(|s| ScoreRow {
                    tag: tag.clone(),
                    image_id: s.id,
                    score: s.score,
                }));
            }
        }
    }
    let curves_path = out.join("curves.csv");
    write_curves(&curves_path, &rows)?;
    let mut msg = format!("{} rows -> {}\n", rows.len(), curves_path.display());
    if histograms {
        let p = out.join("scores.csv");
        write_scores(&p, &scores)?;
        let _ = writeln!(msg, "{} scores -> {}", scores.len(), p.display());
    }
    Ok(msg)
}

struct ScoreArgs<'a> {
    input: &'a Path,
    checkpoint: Option<&'a Path>,
    image_id: ImageId,
    mc_samples: Option<usize>,
    dropout: Option<f64>,
    aggregation: Aggregation,
    score_map: Option<&'a Path>,
}

fn cmd_score(cli: &Cli, args: &ScoreArgs<'_>) -> Result<String> {
    let cfg = cli.load_config()?;
    let (tensor, _) = read_container(args.input)
        .map_err(|e| Error::from(e).context(args.input.display().to_string()))?;
    let stack = if tensor.dims().len() == 4 {
        ProbabilityStack::from_tensor(tensor)?
    } else {
        let ck = args.checkpoint.ok_or_else(|| {
            Error::Config("image input needs --checkpoint (or pass a probability stack)".into())
        })?;
        let (model, _) = load_checkpoint(ck)?;
        let image = Image::from_tensor(tensor)?;
        let samples = match args.mc_samples {
            Some(s) => s,
            None => cfg.get_or("mc_samples", 20)?,
        };
        let p = match args.dropout {
            Some(p) => p,
            None => cfg.get_or("dropout_probability", model.arch().dropout_p())?,
        };
        let seed = crate::al_loop::image_mc_seed(cfg.seed()?, args.image_id);
        model.mc_predict(&image, samples, p, seed)?
    };
    let map = bald_map(&stack)?;
    let score = aggregate(args.image_id, &map, args.aggregation)?;
    if let Some(p) = args.score_map {
        let t: Tensor = map.to_tensor();
        let mut meta = Metadata::new();
        meta.insert("image_id".into(), args.image_id.to_string());
        meta.insert("aggregation".into(), args.aggregation.to_string());
        write_container(p, &t, &meta)?;
    }
    Ok(format!("{},{}\n", score.id, score.score))
}
