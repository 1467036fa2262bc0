use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use autolabel3d::annotator::{annotate_direct, prior_for, split_candidates};
use autolabel3d::app::{dataset_for, run_to_dir};
use autolabel3d::config::Config;
use autolabel3d::dataset::{list_frames, load_dataset, load_frame, write_synth_dataset};
use autolabel3d::eval::evaluate;
use autolabel3d::kitti_io::{frame_stem, label_to_box3d, parse_labels, write_labels_with, LabelPrecision, LabelRecord};
use autolabel3d::pipeline::RunManifest;
use autolabel3d::synth::generate_corpus;

type CliResult = Result<(), Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "autolabel3d", version, about = "3D box pseudo-labels from 2D boxes and size priors")]
struct Cli {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Output does not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Dotted-key override, e.g. `iteration.trust_iou=0.6`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset root and print a summary.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        /// Write a tab-separated frame index here.
        #[arg(long)]
        out_index: Option<PathBuf>,
    },
    /// Write a synthetic dataset in the on-disk layout.
    SynthDemo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Annotate every weak label of one frame with the direct optimizer.
    Annotate {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        frame: u32,
    },
    /// Run the full iterative pipeline and export labels plus a manifest.
    Run {
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted label files against ground truth.
    Eval {
        /// Directory of prediction files, or a run directory containing `label_2/`.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth files, or a dataset root containing `label_2/`.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        pr: Option<PathBuf>,
    },
    /// Copy a run's labels, optionally keeping only trusted ones.
    ExportPseudo {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trusted_only: bool,
    },
    /// Dump one frame's frustums, depth estimates, cylinder partitions and labels as
    /// tab-separated records, or print the per-stage table of a run manifest.
    Inspect {
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        frame: Option<u32>,
        /// Dataset root; defaults to the configured root, else the synthetic corpus.
        #[arg(long)]
        root: Option<PathBuf>,
        /// Run directory whose labels are included.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<Config, Box<dyn std::error::Error>> {
    let base = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn label_dir(p: &Path) -> PathBuf {
    let nested = p.join("label_2");
    if nested.is_dir() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn read_label_dir(dir: &Path) -> Result<BTreeMap<u32, Vec<LabelRecord>>, Box<dyn std::error::Error>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))? {
        let path = e?.path();
        if path.extension().and_then(|x| x.to_str()) != Some("txt") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u32>().ok()) else { continue };
        let text = fs::read_to_string(&path)?;
        out.insert(id, parse_labels(&text).map_err(|e| format!("{}: {e}", path.display()))?);
    }
    Ok(out)
}

fn write_out(path: &Path, text: &str) -> CliResult {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn ingest(cfg: &Config, root: &Path, out_index: Option<&Path>) -> CliResult {
    let ds = load_dataset(root, cfg.dataset.label_mode)?;
    if let Some(p) = out_index {
        let mut text = String::from("frame\tpoints\tweak_labels\ttruth_labels\n");
        for f in &ds.frames {
            let truth = f.truth.as_ref().map_or(0, |t| t.len());
            text.push_str(&format!("{}\t{}\t{}\t{}\n", frame_stem(f.frame_id), f.cloud.len(), f.weak.len(), truth));
        }
        write_out(p, &text)?;
    }
    let points: usize = ds.frames.iter().map(|f| f.cloud.len()).sum();
    let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
    for f in &ds.frames {
        for w in &f.weak {
            *per_class.entry(w.class_name.as_str()).or_default() += 1;
        }
    }
    println!("frames {}", ds.frames.len());
    println!("points {points}");
    println!("weak_labels {}", ds.num_objects());
    for (c, n) in per_class {
        println!("  {c} {n}");
    }
    Ok(())
}

fn annotate(cfg: &Config, root: &Path, frame_id: u32) -> CliResult {
    if !list_frames(root)?.contains(&frame_id) {
        return Err(format!("frame {frame_id} not found under {}", root.display()).into());
    }
    let frame = load_frame(root, frame_id, cfg.dataset.label_mode)?;
    for (i, w) in frame.weak.iter().enumerate() {
        let sample = frame.target_sample(i, w)?;
        let prior = prior_for(&cfg.priors, &w.class_name);
        let result = prior.and_then(|p| annotate_direct(&sample, &p, &cfg.loss, &cfg.annotator));
        match result {
            Ok(l) => {
                let b = &l.box3d;
                println!(
                    "{i} {} center=({:.3},{:.3},{:.3}) hwl=({:.3},{:.3},{:.3}) heading={:.4} agreement={:.4}",
                    l.class_name, b.center.x, b.center.y, b.center.z, b.size.h, b.size.w, b.size.l, b.heading, l.agreement_iou
                );
            }
            Err(e) => println!("{i} {} failed: {e}", w.class_name),
        }
    }
    Ok(())
}

fn eval_cmd(cfg: &Config, pred: &Path, gt: &Path, csv: Option<&Path>, pr: Option<&Path>) -> CliResult {
    let preds = read_label_dir(&label_dir(pred))?;
    let truth = read_label_dir(&label_dir(gt))?;
    let table = evaluate(&preds, &truth, &cfg.eval);
    print!("{}", table.to_text());
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(p) = csv {
        write_out(p, &table.to_csv())?;
    }
    if let Some(p) = pr {
        write_out(p, &table.pr_dump())?;
    }
    Ok(())
}

fn export_pseudo(run: &Path, out: &Path, trusted_only: bool) -> CliResult {
    let manifest = RunManifest::from_toml(&fs::read_to_string(run.join("manifest.toml"))?)?;
    let labels = read_label_dir(&run.join("label_2"))?;
    let (mut kept, mut dropped) = (0usize, 0usize);
    for (id, records) in labels {
        let keep: Vec<LabelRecord> = records
            .into_iter()
            .filter(|r| {
                let ok = !trusted_only || r.score.is_some_and(|s| s >= manifest.trust_iou);
                if ok {
                    kept += 1;
                } else {
                    dropped += 1;
                }
                ok
            })
            .collect();
        write_out(&out.join("label_2").join(format!("{}.txt", frame_stem(id))), &write_labels_with(&keep, LabelPrecision::default()))?;
    }
    eprintln!("kept {kept} dropped {dropped}");
    Ok(())
}

fn inspect_frame(cfg: &Config, frame_id: u32, root: Option<&Path>, run: Option<&Path>) -> CliResult {
    let frame = match root.or(cfg.dataset.root.as_deref()) {
        Some(r) => load_frame(r, frame_id, cfg.dataset.label_mode)?,
        None => dataset_for(cfg)?
            .frames
            .into_iter()
            .find(|f| f.frame_id == frame_id)
            .ok_or_else(|| format!("frame {frame_id} not in the synthetic corpus"))?,
    };
    println!("# frustum\tindex\tclass\tx1\ty1\tx2\ty2\tconfidence\tpoints");
    println!("# depth\tindex\tdepth\traw_depth\tscale\tout_of_range");
    println!("# point\tindex\tcandidate|background\tx\ty\tz");
    println!("# label\tindex\tclass\tcx\tcy\tcz\th\tw\tl\theading\tscore");
    for (i, w) in frame.weak.iter().enumerate() {
        let sample = frame.target_sample(i, w)?;
        let b = &w.box2d;
        println!(
            "frustum\t{i}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.4}\t{}",
            w.class_name,
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            w.confidence,
            sample.points.len()
        );
        let split = match prior_for(&cfg.priors, &w.class_name)
            .map_err(|e| e.to_string())
            .and_then(|p| split_candidates(&sample, &p).map_err(|e| e.to_string()))
        {
            Ok(s) => s,
            Err(e) => {
                eprintln!("frame {frame_id} object {i}: {e}");
                continue;
            }
        };
        let d = &split.depth;
        println!("depth\t{i}\t{:.6}\t{:.6}\t{:.6}\t{}", d.depth, d.raw_depth, d.scale, d.out_of_range);
        for (tag, cloud) in [("candidate", &split.candidates), ("background", &split.background)] {
            for p in &cloud.points {
                println!("point\t{i}\t{tag}\t{:.4}\t{:.4}\t{:.4}", p.x, p.y, p.z);
            }
        }
    }
    if let Some(run) = run {
        let path = label_dir(run).join(format!("{}.txt", frame_stem(frame_id)));
        let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        for (i, r) in parse_labels(&text).map_err(|e| format!("{}: {e}", path.display()))?.iter().enumerate() {
            let b = label_to_box3d(r)?;
            println!(
                "label\t{i}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.6}\t{}",
                r.class_name,
                b.center.x,
                b.center.y,
                b.center.z,
                b.size.h,
                b.size.w,
                b.size.l,
                b.heading,
                r.score.map(|s| format!("{s:.4}")).unwrap_or_else(|| "none".into())
            );
        }
    }
    Ok(())
}

fn inspect_manifest(path: &Path) -> CliResult {
    let m = RunManifest::from_toml(&fs::read_to_string(path)?)?;
    println!("tool {}  seed {}  annotator {}  config {}", m.tool_version, m.seed, m.annotator, m.config_hash);
    println!("frames {}  objects {}  trust_iou {}", m.frames, m.objects, m.trust_iou);
    println!(
        "{:>5} {:<10} {:>5} {:>7} {:>7} {:>7} {:>7} {:>6} {:>7} {:>8}",
        "stage", "kind", "mix", "targets", "proxies", "pseudo", "trusted", "failed", "catalog", "truth"
    );
    for r in &m.iterations {
        let truth = r.truth_mean_iou.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:>5} {:<10} {:>5.2} {:>7} {:>7} {:>7} {:>7} {:>6} {:>7} {:>8}",
            r.stage,
            r.kind,
            r.pseudo_mix,
            r.training.targets,
            r.training.proxies,
            r.training.pseudo_injected,
            r.trusted,
            r.failed,
            r.catalog,
            truth
        );
        if !r.annotator_note.is_empty() {
            println!("      {}", r.annotator_note);
        }
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult {
    let cfg = load_config(cli)?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global()?;
    }
    match &cli.command {
        Command::Ingest { root, out_index } => ingest(&cfg, root, out_index.as_deref()),
        Command::SynthDemo { out, scenes } => {
            let mut synth = cfg.synth.clone();
            if let Some(n) = scenes {
                synth.n_scenes = *n;
            }
            let corpus = generate_corpus(&synth, &cfg.priors);
            write_synth_dataset(out, &corpus)?;
            eprintln!("wrote {} scenes to {}", corpus.len(), out.display());
            Ok(())
        }
        Command::Annotate { root, frame } => annotate(&cfg, root, *frame),
        Command::Run { out } => {
            let result = run_to_dir(&cfg, out, &mut |r| println!("{}", r.summary_line()))?;
            eprintln!("wrote {} frames to {}", result.manifest.frames, out.display());
            Ok(())
        }
        Command::Eval { pred, gt, csv, pr } => eval_cmd(&cfg, pred, gt, csv.as_deref(), pr.as_deref()),
        Command::ExportPseudo { run, out, trusted_only } => export_pseudo(run, out, *trusted_only),
        Command::Inspect { manifest: Some(m), .. } => inspect_manifest(m),
        Command::Inspect { frame, root, run, .. } => {
            inspect_frame(&cfg, frame.expect("clap enforces --frame"), root.as_deref(), run.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
