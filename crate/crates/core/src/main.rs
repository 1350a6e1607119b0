use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use distrack::backbone::{count_flops, count_params, mac_breakdown, Arch, FlopConvention};
use distrack::boxfile::{read_boxes, write_boxes};
use distrack::evalkit::{loss_gradcheck_suite, ope_evaluate, write_score_map};
use distrack::harness::{
    build_training_set, frame_name, generate_sequence, load_model, load_sequence, save_model, train_student, train_teacher, LossHistory,
    SceneKind, SyntheticScene, TrainConfig,
};
use distrack::tracker::{Tracker, TrackerConfig};
use distrack::{Error, Result};

#[derive(Parser)]
#[command(name = "distrack", version, about = "Distilled asymmetric ViT tracker: data, training, tracking and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic sequence (PPM frames plus groundtruth.txt).
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "plain")]
        scene: SceneKind,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a teacher with the tracking loss only.
    TrainTeacher {
        /// Preset (full, desk, tiny) or a `key = value` file layered on desk.
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss components as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Train a student distilled from a frozen teacher checkpoint.
    TrainStudent {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        feat_distill: Option<bool>,
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        pred_distill: Option<bool>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(long)]
        lambda3: Option<f64>,
        #[arg(long)]
        lambda4: Option<f64>,
    },
    /// Track a sequence from its first ground-truth box.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Disable the target store and template refresh.
        #[arg(long)]
        no_store: bool,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        refresh_interval: Option<usize>,
        /// Write the penalized score map of every tracked frame as PGM.
        #[arg(long)]
        dump_score_maps: Option<PathBuf>,
    },
    /// Score a result file against ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Precision and success curves as CSV.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Finite-difference check of every training loss.
    Gradcheck {
        #[arg(long, default_value = "desk")]
        config: String,
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter and FLOP counts of a configuration.
    Params {
        #[arg(long, default_value = "full")]
        config: String,
    },
}

fn resolve_config(name: &str) -> Result<TrainConfig> {
    match name {
        "full" => Ok(TrainConfig::full()),
        "desk" => Ok(TrainConfig::desk()),
        "tiny" => Ok(TrainConfig::tiny()),
        path => TrainConfig::from_file(TrainConfig::desk(), Path::new(path)),
    }
}

fn write_history(path: Option<&Path>, h: &LossHistory) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, h.to_csv())?;
    }
    Ok(())
}

fn report_losses(h: &LossHistory) {
    if let Some((first, last)) = h.head_tail_means(10) {
        println!("steps {} | mean loss first 10: {first:.4} | last 10: {last:.4}", h.steps.len());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, scene, frames, out } => {
            let s = SyntheticScene::random(seed, scene, frames);
            generate_sequence(&s, &out)?;
            println!("wrote {frames} frames to {}", out.display());
        }
        Command::TrainTeacher { config, seed, out, history } => {
            let mut cfg = resolve_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = build_training_set(&cfg.model, cfg.train_samples, cfg.seed)?;
            let (net, h) = train_teacher(&cfg, &data)?;
            save_model(&net, &cfg, &out)?;
            write_history(history.as_deref(), &h)?;
            report_losses(&h);
        }
        Command::TrainStudent { teacher, config, seed, out, history, feat_distill, pred_distill, temperature, lambda1, lambda2, lambda3, lambda4 } => {
            let mut cfg = resolve_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(v) = feat_distill {
                cfg.feat_distill = v;
            }
            if let Some(v) = pred_distill {
                cfg.pred_distill = v;
            }
            if let Some(v) = temperature {
                cfg.temperature = v;
            }
            for (slot, v) in [(&mut cfg.weights.l1, lambda1), (&mut cfg.weights.giou, lambda2), (&mut cfg.weights.feat, lambda3), (&mut cfg.weights.pred, lambda4)] {
                if let Some(v) = v {
                    *slot = v;
                }
            }
            cfg.validate()?;
            let (tnet, _) = load_model(&teacher)?;
            let data = build_training_set(&cfg.model, cfg.train_samples, cfg.seed)?;
            let (net, h) = train_student(&tnet, &cfg, &data)?;
            save_model(&net, &cfg, &out)?;
            write_history(history.as_deref(), &h)?;
            report_losses(&h);
        }
        Command::Track { checkpoint, sequence_dir, out, no_store, threshold, refresh_interval, dump_score_maps } => {
            let (net, _) = load_model(&checkpoint)?;
            let mut tc = TrackerConfig { store_enabled: !no_store, ..TrackerConfig::default() };
            if let Some(t) = threshold {
                tc.store.threshold = t;
            }
            if let Some(n) = refresh_interval {
                tc.store.refresh_interval = n;
            }
            let frames = load_sequence(&sequence_dir)?;
            let gt = read_boxes(&sequence_dir.join("groundtruth.txt"))?;
            let init = *gt.first().ok_or_else(|| Error::Format("empty ground truth".into()))?;
            let first = frames.first().ok_or_else(|| Error::Format("sequence has no frames".into()))?;
            let mut tracker = Tracker::new(&net, tc)?;
            tracker.init(first, init)?;
            if let Some(d) = &dump_score_maps {
                std::fs::create_dir_all(d)?;
            }
            let mut boxes = vec![init];
            for (t, f) in frames.iter().enumerate().skip(1) {
                if let Some(d) = &dump_score_maps {
                    write_score_map(&tracker, f, &d.join(frame_name(t)).with_extension("pgm"))?;
                }
                boxes.push(tracker.track_frame(f)?.0);
            }
            write_boxes(&out, &boxes)?;
            println!("tracked {} frames, {} template encodings", boxes.len(), tracker.template_encodings());
        }
        Command::Eval { results, gt, curves } => {
            let r = ope_evaluate(&read_boxes(&results)?, &read_boxes(&gt)?)?;
            println!("precision@20 {:.4}", r.precision_at_20);
            println!("success AUC  {:.4}", r.success_auc);
            if let Some(p) = curves {
                std::fs::write(p, r.curves_csv())?;
            }
        }
        Command::Gradcheck { config, instances, seed } => {
            let cfg = resolve_config(&config)?;
            let reports = loss_gradcheck_suite(&cfg.model, instances, seed)?;
            let mut ok = true;
            for r in &reports {
                let pass = r.max_error < 1e-4;
                ok &= pass;
                println!("{:<20} {:>4} instances  max rel err {:.3e}  {}", r.name, r.instances, r.max_error, if pass { "ok" } else { "FAIL" });
            }
            if !ok {
                return Err(Error::Numeric("gradient check failed".into()));
            }
        }
        Command::Params { config } => {
            let cfg = resolve_config(&config)?;
            for arch in [Arch::Teacher, Arch::Student] {
                let p = count_params(&cfg.model, &cfg.head, arch);
                let macs = count_flops(&cfg.model, &cfg.head, arch, FlopConvention::MultiplyAccumulate);
                let b = mac_breakdown(&cfg.model, &cfg.head, arch);
                println!(
                    "{:<8} params {:>10} ({:.2} M)  per-frame FLOPs {:.3} G (MAC)  template-side {:.3} G",
                    format!("{arch:?}").to_lowercase(),
                    p,
                    p as f64 / 1e6,
                    macs as f64 / 1e9,
                    (b.patch_embed_template + b.stage1_template) as f64 / 1e9
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
