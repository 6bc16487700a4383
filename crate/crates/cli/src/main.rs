use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use lcmf::bench::{cmd_bench, validate_lengths, write_csv};
use lcmf::config::RunConfig;
use lcmf::data::{gen_synthetic_vqa, GenSettings, Manifest, Record, Split};
use lcmf::metrics::evaluate;
use lcmf::model::{LcmfModel, ModelConfig};
use lcmf::text::RESERVED;
use lcmf::train::{finetune, pretrain, TrainedRun, CONFIG_FILE};

#[derive(Parser)]
#[command(name = "lcmf", version, about = "Linear-complexity multimodal fusion on toy VQA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes corpus and its manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of records.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Every k-th record goes to the validation split (0 = none).
        #[arg(long, default_value_t = 4)]
        val_every: usize,
        /// Write videos of this many frames instead of images.
        #[arg(long)]
        video_frames: Option<usize>,
    },
    /// Masked image and text pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Answer classification, optionally from a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// Pretrained checkpoint; its directory must hold the vocabulary.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Accuracy, per-type accuracy, parameters, FLOPs and latency of a
    /// finetuned run.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory written by `finetune`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
    },
    /// Wall time and FLOPs of one CMM block against one attention block.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048, 4096, 8192])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 128)]
        d_model: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Per-module analytic FLOPs of one forward pass.
    Flops {
        #[command(flatten)]
        common: Common,
        /// Text length (defaults to the configured maximum).
        #[arg(long)]
        text_len: Option<usize>,
        /// Count the masked pretraining pass instead of answering.
        #[arg(long)]
        pretrain: bool,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Remove a component; repeatable.
    #[arg(long, value_enum)]
    ablate: Vec<Ablation>,
    #[arg(long, value_enum)]
    stable_mode: Option<Switch>,
    /// Positive transition exponents and single-token CLS attention, unless
    /// `--stable-mode on` is also given.
    #[arg(long)]
    paper_literal: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    CrossAttention,
    Cmm,
    Sam,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    All,
}

/// Errors split by exit code.
enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<lcmf::Error> for Failure {
    fn from(e: lcmf::Error) -> Self {
        Failure::Run(e.into())
    }
}

impl Common {
    /// Config file, then flags, validated and written to `--out`.
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        for a in &self.ablate {
            match a {
                Ablation::CrossAttention => cfg.ablation.no_cross_attention = true,
                Ablation::Cmm => cfg.ablation.no_cmm = true,
                Ablation::Sam => cfg.ablation.no_sam = true,
            }
        }
        if self.paper_literal {
            cfg.model.literal_cls_attention = true;
            cfg.model.stable_mode = false;
        }
        if let Some(s) = self.stable_mode {
            cfg.model.stable_mode = matches!(s, Switch::On);
        }
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        cfg.save(&self.out.join(CONFIG_FILE))?;
        Ok(cfg)
    }
}

fn load_manifest(path: &Path) -> Result<Manifest, Failure> {
    Manifest::load(path)
        .with_context(|| format!("loading manifest {}", path.display()))
        .map_err(Failure::Run)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            common,
            n,
            val_every,
            video_frames,
        } => {
            let cfg = common.resolve()?;
            let settings = GenSettings {
                seed: cfg.seed,
                n,
                image_side: cfg.model.image_side,
                patch_size: cfg.model.patch_size,
                val_every,
                video_frames,
            };
            let m = gen_synthetic_vqa(&settings, &common.out)?;
            info!("wrote {} records to {}", m.records.len(), common.out.join("manifest.jsonl").display());
        }
        Command::Pretrain {
            common,
            manifest,
            epochs,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            let m = load_manifest(&manifest)?;
            let report = pretrain(&cfg, &m, &common.out)?;
            if let (Some(first), Some(last)) = (report.epoch_img.first(), report.epoch_img.last()) {
                info!("masked-patch loss {first:.5} -> {last:.5}");
            }
            if let (Some(first), Some(last)) = (report.epoch_txt.first(), report.epoch_txt.last()) {
                info!("mlm loss {first:.5} -> {last:.5}");
            }
            info!("checkpoint {}", report.checkpoint.display());
        }
        Command::Finetune {
            common,
            manifest,
            init,
            epochs,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(e) = epochs {
                cfg.finetune.epochs = e;
            }
            let m = load_manifest(&manifest)?;
            let report = finetune(&cfg, &m, &common.out, init.as_deref())?;
            if let Some(acc) = report.epoch_accuracy.last() {
                info!("final epoch train accuracy {acc:.4}");
            }
            info!("checkpoint {}", report.checkpoint.display());
        }
        Command::Eval {
            common,
            run,
            manifest,
            split,
        } => {
            common.resolve()?;
            let m = load_manifest(&manifest)?;
            let records: Vec<&Record> = match split {
                SplitArg::Train => m.split(Split::Train).collect(),
                SplitArg::Val => m.split(Split::Val).collect(),
                SplitArg::All => m.records.iter().collect(),
            };
            if records.is_empty() {
                return Err(Failure::Usage(format!("{} has no records to evaluate", manifest.display())));
            }
            let trained = TrainedRun::load(&run).with_context(|| format!("loading run {}", run.display()))?;
            let report = evaluate(&trained, &m, &records)?;
            write_json(&common.out.join("metrics.json"), &report)?;
            println!(
                "accuracy {:.4} mAA {:.4} over {} records",
                report.accuracy, report.maa, report.records
            );
            for (ty, s) in &report.per_type {
                println!("  {ty:<6} {:.4} ({}/{})", s.accuracy, s.correct, s.total);
            }
            println!(
                "params {} FLOPs/sample {:.4e} latency {:.2} ms",
                report.params, report.flops_per_sample, report.latency_ms
            );
        }
        Command::Bench {
            common,
            lengths,
            d_model,
            repeats,
        } => {
            let cfg = common.resolve()?;
            validate_lengths(&lengths).map_err(|e| Failure::Usage(e.to_string()))?;
            if d_model % cfg.model.heads != 0 {
                return Err(Failure::Usage(format!(
                    "{} heads do not divide d_model {d_model}",
                    cfg.model.heads
                )));
            }
            let report = cmd_bench(&lengths, d_model, cfg.model.heads, repeats, cfg.seed)?;
            write_csv(&report, &common.out.join("bench.csv"))?;
            write_json(&common.out.join("bench.json"), &report)?;
            println!("length      cmm_ns     attn_ns       cmm_flops      attn_flops");
            for r in &report.rows {
                println!(
                    "{:>6} {:>11} {:>11} {:>15} {:>15}",
                    r.length, r.cmm_ns, r.attn_ns, r.cmm_flops, r.attn_flops
                );
            }
            println!(
                "wall-time slope: cmm {:.3}, attention {:.3}; FLOPs crossover at length {}",
                report.cmm_slope, report.attn_slope, report.crossover
            );
        }
        Command::Flops {
            common,
            text_len,
            pretrain,
        } => {
            let cfg = common.resolve()?;
            let mc = ModelConfig::from_run(&cfg, RESERVED.len() + 1)?;
            let (model, _) = LcmfModel::build(mc, cfg.seed)?;
            let tab = model.flops_table(text_len.unwrap_or(cfg.model.max_text_len), pretrain);
            let mut csv = String::from("module,flops\n");
            for (name, n) in &tab.rows {
                println!("{name:<24} {n:>14}");
                csv.push_str(&format!("{name},{n}\n"));
            }
            println!("{:<24} {:>14}", "total", tab.total());
            csv.push_str(&format!("total,{}\n", tab.total()));
            fs::write(common.out.join("flops.csv"), csv).context("writing flops.csv")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on unknown flags by itself.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
