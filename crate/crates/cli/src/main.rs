//! `sim3loop` command line: simulate bundles, run the loop-closure stages one
//! at a time, or the whole pipeline.

use clap::{Args, Parser, Subcommand};
use sim3loop::bow::BowVocabulary;
use sim3loop::config::PipelineConfig;
use sim3loop::eval::{ate, Alignment, Trajectory, TrajectoryEntry};
use sim3loop::pipeline::{drift_of, loops_to_csv, run_pipeline, train_vocabulary, write_outputs};
use sim3loop::pixelselect::select_points;
use sim3loop::posegraph::io::{load_graph, save_graph};
use sim3loop::sim::{read_bundle, simulate, write_bundle, Bundle};
use sim3loop::GrayImage;
use std::fmt::{Display, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "sim3loop", version, about = "Sim(3) loop-closure backend for monocular SLAM")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run ingestion and loop closing sequentially.
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct BundleArgs {
    /// Keyframe bundle directory (defaults to `bundle` from the config).
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic keyframe bundle.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Select points in a PGM image; writes `u,v,kind,score`.
    SelectPoints {
        #[arg(long)]
        image: PathBuf,
        /// Output CSV (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a vocabulary on the corners of a bundle.
    BuildVocab {
        #[command(flatten)]
        bundle: BundleArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect loops over a bundle; writes the accepted constraints as CSV.
    DetectLoops {
        #[command(flatten)]
        bundle: BundleArgs,
        /// Vocabulary file (trained from the bundle if omitted).
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a graph file; writes the optimized graph and a TUM trajectory.
    OptimizeGraph {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Camera-to-world trajectory of the optimized vertices.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// ATE (and optionally drift) of a trajectory against ground truth.
    Evaluate {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value = "sim3")]
        alignment: Alignment,
        /// Also report start/end drift.
        #[arg(long)]
        drift: bool,
        /// Write `metric,value` CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Full pipeline over a bundle.
    Run {
        #[command(flatten)]
        bundle: BundleArgs,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Output directory (defaults to `output` from the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure category; each maps to its own exit code.
#[derive(Clone, Copy)]
enum Category {
    Config,
    Input,
    Processing,
    Output,
}

impl Category {
    fn name(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Input => "input",
            Category::Processing => "processing",
            Category::Output => "output",
        }
    }

    fn code(self) -> u8 {
        match self {
            Category::Config => 3,
            Category::Input => 4,
            Category::Processing => 5,
            Category::Output => 6,
        }
    }
}

struct Failure {
    category: Category,
    message: String,
}

fn fail<E: Display>(category: Category) -> impl FnOnce(E) -> Failure {
    move |e| Failure {
        category,
        message: e.to_string(),
    }
}

type Outcome = Result<(), Failure>;

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(fail(Category::Config))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.single_thread |= cli.single_thread;
    Ok(cfg)
}

fn bundle_path(args: &BundleArgs, cfg: &PipelineConfig) -> Result<PathBuf, Failure> {
    args.bundle.clone().or_else(|| cfg.bundle.clone()).ok_or(Failure {
        category: Category::Config,
        message: "no bundle given (use --bundle or `bundle = ...` in the config)".into(),
    })
}

fn load_bundle(path: &Path) -> Result<Bundle, Failure> {
    read_bundle(path).map_err(fail(Category::Input))
}

fn load_vocab(path: Option<&PathBuf>, cfg: &PipelineConfig) -> Result<Option<BowVocabulary>, Failure> {
    match path.or(cfg.vocab.as_ref()) {
        Some(p) => BowVocabulary::load(p)
            .map(Some)
            .map_err(|e| fail(Category::Input)(format!("{}: {e}", p.display()))),
        None => Ok(None),
    }
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| fail(Category::Output)(format!("{}: {e}", path.display())))
}

fn cmd_simulate(cfg: &PipelineConfig, out: &Path) -> Outcome {
    let (world, _, bundle) = simulate(&cfg.sim_config(), &cfg.camera).map_err(fail(Category::Processing))?;
    write_bundle(out, &bundle).map_err(fail(Category::Output))?;
    println!(
        "wrote {} keyframes ({} landmarks) to {}",
        bundle.images.len(),
        world.landmarks.len(),
        out.display()
    );
    Ok(())
}

fn cmd_select(cfg: &PipelineConfig, image: &Path, out: Option<&Path>) -> Outcome {
    let img = GrayImage::load_pgm(image).map_err(|e| fail(Category::Input)(format!("{}: {e}", image.display())))?;
    let t0 = Instant::now();
    let points = select_points(&img, &cfg.select).map_err(fail(Category::Processing))?;
    let elapsed = t0.elapsed();
    let mut csv = String::from("u,v,kind,score\n");
    for p in &points {
        let _ = writeln!(csv, "{},{},{},{}", p.pixel.x, p.pixel.y, p.kind.as_str(), p.score);
    }
    let corners = points.iter().filter(|p| p.kind == sim3loop::pixelselect::PointKind::Corner).count();
    match out {
        Some(path) => {
            write_text(path, &csv)?;
            println!(
                "{} points ({} corners) in {:.3} ms",
                points.len(),
                corners,
                elapsed.as_secs_f64() * 1e3
            );
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_build_vocab(cfg: &PipelineConfig, bundle: &Path, out: &Path) -> Outcome {
    let b = load_bundle(bundle)?;
    let vocab = train_vocabulary(&b, cfg).map_err(fail(Category::Processing))?;
    vocab
        .save(out)
        .map_err(|e| fail(Category::Output)(format!("{}: {e}", out.display())))?;
    println!(
        "vocabulary k = {}, depth = {}, {} words -> {}",
        vocab.branching(),
        vocab.depth(),
        vocab.num_words(),
        out.display()
    );
    Ok(())
}

fn cmd_detect(cfg: &PipelineConfig, bundle: &Path, vocab: Option<&PathBuf>, out: &Path) -> Outcome {
    let b = load_bundle(bundle)?;
    let vocab = load_vocab(vocab, cfg)?;
    let r = run_pipeline(&b, vocab.as_ref(), cfg, true).map_err(fail(Category::Processing))?;
    write_text(out, &loops_to_csv(r.accepted()))?;
    println!(
        "{} accepted of {} constraints ({} candidates failed)",
        r.accepted().count(),
        r.constraints.len(),
        r.failures.len()
    );
    Ok(())
}

fn cmd_optimize(cfg: &PipelineConfig, graph: &Path, out: &Path, trajectory: Option<&Path>) -> Outcome {
    let mut g = load_graph(graph).map_err(fail(Category::Input))?;
    if !g.nodes().any(|n| n.fixed) {
        // anchor the gauge on the first vertex
        let first = g.nodes().next().map(|n| n.id);
        if let Some(first) = first {
            g.set_fixed(first).map_err(fail(Category::Processing))?;
        }
    }
    let report = g.optimize(&cfg.pgo).map_err(fail(Category::Processing))?;
    save_graph(&g, out).map_err(|e| fail(Category::Output)(format!("{}: {e}", out.display())))?;
    if let Some(path) = trajectory {
        let entries = g
            .nodes()
            .map(|n| TrajectoryEntry {
                timestamp: n.id as f64,
                pose: n.estimate.inverse(),
                id: n.id,
            })
            .collect();
        let t = Trajectory::new(entries, true).map_err(fail(Category::Processing))?;
        t.save(path)
            .map_err(|e| fail(Category::Output)(format!("{}: {e}", path.display())))?;
    }
    println!("initial_chi2 = {:.6e}", report.initial_chi2);
    println!("final_chi2 = {:.6e}", report.final_chi2);
    println!("iterations = {}", report.iterations);
    println!("free_nodes = {}", report.free_nodes);
    Ok(())
}

fn load_trajectory(path: &Path) -> Result<Trajectory, Failure> {
    Trajectory::load(path).map_err(|e| fail(Category::Input)(format!("{}: {e}", path.display())))
}

fn cmd_evaluate(est: &Path, gt: &Path, alignment: Alignment, drift: bool, csv: Option<&Path>) -> Outcome {
    let est = load_trajectory(est)?;
    let gt = load_trajectory(gt)?;
    let r = ate(&est, &gt, alignment).map_err(fail(Category::Processing))?;
    let mut rows = vec![
        ("ate_rmse", format!("{:.9}", r.rmse)),
        ("pairs", r.pairs.to_string()),
        ("alignment_scale", format!("{:.9}", r.alignment.scale)),
    ];
    if drift {
        let d = drift_of(&est, &gt).ok_or(Failure {
            category: Category::Processing,
            message: "drift needs at least three poses in the first and last tenth".into(),
        })?;
        rows.push(("drift_align", format!("{:.9}", d.e_align)));
        rows.push(("drift_t", format!("{:.9}", d.e_t)));
        rows.push(("drift_r_deg", format!("{:.9}", d.e_r)));
        rows.push(("drift_s", format!("{:.9}", d.e_s)));
    }
    for (k, v) in &rows {
        println!("{k} = {v}");
    }
    if let Some(path) = csv {
        let mut s = String::from("metric,value\n");
        for (k, v) in &rows {
            let _ = writeln!(s, "{k},{v}");
        }
        write_text(path, &s)?;
    }
    Ok(())
}

fn cmd_run(cfg: &PipelineConfig, bundle: &Path, vocab: Option<&PathBuf>, out: &Path) -> Outcome {
    let b = load_bundle(bundle)?;
    let vocab = load_vocab(vocab, cfg)?;
    let r = run_pipeline(&b, vocab.as_ref(), cfg, false).map_err(fail(Category::Processing))?;
    let report = write_outputs(out, &r, b.gt.as_ref()).map_err(fail(Category::Output))?;
    print!("{report}");
    Ok(())
}

fn dispatch(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate { out } => cmd_simulate(&cfg, out),
        Command::SelectPoints { image, out } => cmd_select(&cfg, image, out.as_deref()),
        Command::BuildVocab { bundle, out } => cmd_build_vocab(&cfg, &bundle_path(bundle, &cfg)?, out),
        Command::DetectLoops { bundle, vocab, out } => {
            cmd_detect(&cfg, &bundle_path(bundle, &cfg)?, vocab.as_ref(), out)
        }
        Command::OptimizeGraph { graph, out, trajectory } => cmd_optimize(&cfg, graph, out, trajectory.as_deref()),
        Command::Evaluate {
            est,
            gt,
            alignment,
            drift,
            csv,
        } => cmd_evaluate(est, gt, *alignment, *drift, csv.as_deref()),
        Command::Run { bundle, vocab, out } => {
            let out = out.clone().or_else(|| cfg.output.clone()).ok_or(Failure {
                category: Category::Config,
                message: "no output directory given (use --out or `output = ...` in the config)".into(),
            })?;
            cmd_run(&cfg, &bundle_path(bundle, &cfg)?, vocab.as_ref(), &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {}", f.category.name(), f.message);
            ExitCode::from(f.category.code())
        }
    }
}
