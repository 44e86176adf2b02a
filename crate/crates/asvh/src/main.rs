//! Command-line entry point: dataset generation, training, encoding,
//! evaluation, property verification, and plot-data export.
//!
//! Exit codes: 0 success, 1 assertion/verification failure, 2 usage/config
//! error, 3 IO/format error.

use asvh::config::RunConfig;
use asvh::error::AsvhError;
use asvh::feature_store::{
    generate_synthetic, read_container, read_labels, read_split, write_container, write_labels,
    write_split, SplitSpec, SyntheticSpec,
};
use asvh::retrieval::{encode_split, evaluate, ApDenominator, CodeTable};
use asvh::trainer::{load_checkpoint, run_training, save_checkpoint};
use asvh::verify::run_suites;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "asvh", version, about = "Self-supervised video hashing pipeline")]
struct Cli {
    /// Run configuration file (flat key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed and centers.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for data.asvh, labels.asvl and split.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 60)]
    videos_per_class: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    hard_frames: usize,
    #[arg(long, default_value_t = 2.0)]
    hard_noise: f64,
    #[arg(long, default_value_t = 0.3)]
    base_noise: f64,
    #[arg(long, default_value_t = 0.3)]
    drift: f64,
    /// Per class: this many leading videos go to the training split.
    #[arg(long, default_value_t = 40)]
    train_per_class: usize,
    /// Per class: this many videos (after the training block) become queries.
    #[arg(long, default_value_t = 10)]
    query_per_class: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// Output directory for the checkpoint pair and log.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    /// Checkpoint JSON (its .params sibling is loaded too).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Which split section to encode; "all" encodes every video.
    #[arg(long, default_value = "all")]
    section: String,
    /// Split file (required unless --section all).
    #[arg(long)]
    split: Option<PathBuf>,
    /// Output JSON code table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Query code table (JSON, from `encode`).
    #[arg(long)]
    query: PathBuf,
    /// Gallery code table (JSON, from `encode`).
    #[arg(long)]
    gallery: PathBuf,
    /// Label container (.asvl).
    #[arg(long)]
    labels: PathBuf,
    /// Report output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional CSV of per-query AP@100.
    #[arg(long)]
    per_query_csv: Option<PathBuf>,
    /// AP denominator: min_n_relevant (default) or hits_at_n.
    #[arg(long, default_value = "min_n_relevant")]
    denominator: String,
}

#[derive(Args)]
struct VerifyArgs {
    /// voting | grl | ste | gradients | metrics | all
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 1000)]
    instances: usize,
}

#[derive(Args)]
struct PlotArgs {
    /// Retrieval report JSON (from `eval`).
    #[arg(long)]
    report: PathBuf,
    /// Output directory for pr.csv and map_at.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature container, labels and split.
    Gen(GenArgs),
    /// Train a model and write checkpoints plus a JSONL epoch log.
    Train(TrainArgs),
    /// Encode videos into a packed hash-code table.
    Encode(EncodeArgs),
    /// Evaluate query codes against gallery codes.
    Eval(EvalArgs),
    /// Run the property-verification suites.
    Verify(VerifyArgs),
    /// Export plot data (PR curve, mAP-vs-N) from a report.
    Plot(PlotArgs),
}

fn exit_code(err: &AsvhError) -> i32 {
    match err {
        AsvhError::Config(_) => 2,
        AsvhError::Io(_) | AsvhError::Format { .. } | AsvhError::Json(_) => 3,
        _ => 1,
    }
}

fn load_run_config(cli: &Cli) -> asvh::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.centers.seed = seed;
    }
    Ok(cfg)
}

fn cmd_gen(cli: &Cli, args: &GenArgs) -> asvh::Result<()> {
    let spec = SyntheticSpec {
        num_classes: args.classes,
        videos_per_class: args.videos_per_class,
        frames_per_video: args.frames,
        feature_dim: args.dim,
        hard_frame_count: args.hard_frames,
        hard_noise_scale: args.hard_noise,
        base_noise_scale: args.base_noise,
        temporal_drift_scale: args.drift,
        seed: cli.seed.unwrap_or(0),
    };
    spec.validate()?;
    if args.train_per_class + args.query_per_class > args.videos_per_class {
        return Err(AsvhError::Config(format!(
            "train {} + query {} exceed videos_per_class {}",
            args.train_per_class, args.query_per_class, args.videos_per_class
        )));
    }
    let (set, hard_frames) = generate_synthetic(&spec)?;

    // Per class: [train | query | gallery-extra]; gallery = train + extra.
    let mut split = SplitSpec {
        train_indices: vec![],
        query_indices: vec![],
        gallery_indices: vec![],
    };
    for c in 0..args.classes {
        let base = c * args.videos_per_class;
        for i in 0..args.videos_per_class {
            let vid = base + i;
            if i < args.train_per_class {
                split.train_indices.push(vid);
                split.gallery_indices.push(vid);
            } else if i < args.train_per_class + args.query_per_class {
                split.query_indices.push(vid);
            } else {
                split.gallery_indices.push(vid);
            }
        }
    }
    split.validate(set.num_videos())?;

    std::fs::create_dir_all(&args.out)?;
    write_container(&set, &args.out.join("data.asvh"))?;
    write_labels(
        set.labels.as_ref().expect("synthetic data is labeled"),
        args.classes as u32,
        &args.out.join("labels.asvl"),
    )?;
    write_split(&split, &args.out.join("split.txt"))?;
    std::fs::write(
        args.out.join("hard_frames.json"),
        serde_json::to_string(&hard_frames)?,
    )?;
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "videos": set.num_videos(),
                "frames": set.frames_per_video(),
                "dim": set.feature_dim(),
                "train": split.train_indices.len(),
                "query": split.query_indices.len(),
                "gallery": split.gallery_indices.len(),
            })
        );
    } else {
        println!(
            "wrote {} videos ({} train / {} query / {} gallery) to {}",
            set.num_videos(),
            split.train_indices.len(),
            split.query_indices.len(),
            split.gallery_indices.len(),
            args.out.display()
        );
    }
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> asvh::Result<()> {
    let mut cfg = load_run_config(cli)?;
    let features = read_container(&args.features)?;
    let split = read_split(&args.split)?;
    split.validate(features.num_videos())?;
    cfg.model.feature_dim = features.feature_dim();
    cfg.validate()?;

    std::fs::create_dir_all(&args.out)?;
    if cfg.train.epochs == 0 {
        // Empty run: write the initial checkpoint and stop.
        let model = asvh::trainer::Model::init(
            cfg.model.clone(),
            cfg.sampler.clone(),
            cfg.train.seed,
        )?;
        let path = save_checkpoint(
            &args.out,
            "checkpoint",
            &model,
            &cfg.loss,
            &cfg.centers,
            &cfg.train,
            0,
        )?;
        println!("wrote initial checkpoint {}", path.display());
        return Ok(());
    }

    let mut log = std::fs::File::create(args.out.join("log.jsonl"))?;
    let outcome = run_training(
        &features,
        &split.train_indices,
        &cfg.model,
        &cfg.sampler,
        &cfg.loss,
        &cfg.centers,
        &cfg.train,
        Some(&mut log),
    )?;
    let path = save_checkpoint(
        &args.out,
        "checkpoint",
        &outcome.model,
        &cfg.loss,
        &cfg.centers,
        &cfg.train,
        cfg.train.epochs,
    )?;
    let last = outcome.logs.last().expect("at least one epoch");
    if cli.json {
        println!(
            "{}",
            serde_json::json!({
                "checkpoint": path,
                "epochs": outcome.logs.len(),
                "final_total": last.total,
                "final_l_fr": last.l_fr,
            })
        );
    } else {
        println!(
            "trained {} epochs (final loss {:.6}); checkpoint at {}",
            outcome.logs.len(),
            last.total,
            path.display()
        );
    }
    Ok(())
}

fn cmd_encode(cli: &Cli, args: &EncodeArgs) -> asvh::Result<()> {
    let (model, _meta) = load_checkpoint(&args.checkpoint)?;
    let features = read_container(&args.features)?;
    let indices: Vec<usize> = match args.section.as_str() {
        "all" => (0..features.num_videos()).collect(),
        section => {
            let split_path = args.split.as_ref().ok_or_else(|| {
                AsvhError::Config(format!("--split is required for --section {section}"))
            })?;
            let split = read_split(split_path)?;
            split.validate(features.num_videos())?;
            match section {
                "train" => split.train_indices,
                "query" => split.query_indices,
                "gallery" => split.gallery_indices,
                _ => {
                    return Err(AsvhError::Config(format!(
                        "unknown section '{section}' (train|query|gallery|all)"
                    )))
                }
            }
        }
    };
    let table = encode_split(&model.ps, &model.hp, &model.net_cfg, &features, &indices)?;
    std::fs::write(&args.out, serde_json::to_string(&table)?)?;
    if cli.json {
        println!(
            "{}",
            serde_json::json!({"codes": table.len(), "bits": table.bits_per_code, "out": args.out})
        );
    } else {
        println!(
            "encoded {} videos at {} bits to {}",
            table.len(),
            table.bits_per_code,
            args.out.display()
        );
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> asvh::Result<()> {
    let queries: CodeTable = serde_json::from_str(&std::fs::read_to_string(&args.query)?)?;
    let gallery: CodeTable = serde_json::from_str(&std::fs::read_to_string(&args.gallery)?)?;
    let (labels, _) = read_labels(&args.labels)?;
    let denom = match args.denominator.as_str() {
        "min_n_relevant" => ApDenominator::MinNRelevant,
        "hits_at_n" => ApDenominator::HitsAtN,
        other => {
            return Err(AsvhError::Config(format!(
                "unknown denominator '{other}' (min_n_relevant|hits_at_n)"
            )))
        }
    };
    let qlabels: Vec<u32> = queries.ids.iter().map(|&i| labels[i]).collect();
    let report = evaluate(
        &queries,
        &gallery,
        &qlabels,
        &labels,
        denom,
        args.per_query_csv.is_some(),
    )?;
    if let Some(csv) = &args.per_query_csv {
        let mut body = String::from("query_id,ap_at_100\n");
        for (id, ap) in queries.ids.iter().zip(report.per_query_ap.as_ref().unwrap()) {
            body.push_str(&format!("{id},{ap}\n"));
        }
        std::fs::write(csv, body)?;
    }
    let text = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => {
            std::fs::write(path, &text)?;
            if cli.json {
                println!("{}", serde_json::json!({"gmap": report.gmap, "out": path}));
            } else {
                println!("gmap = {:.6}; report at {}", report.gmap, path.display());
            }
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_verify(cli: &Cli, args: &VerifyArgs) -> asvh::Result<()> {
    let known = ["voting", "grl", "ste", "gradients", "metrics", "all"];
    if !known.contains(&args.suite.as_str()) {
        return Err(AsvhError::Config(format!(
            "unknown suite '{}' ({})",
            args.suite,
            known.join("|")
        )));
    }
    let results = run_suites(&args.suite, args.instances, cli.seed.unwrap_or(0));
    let all_passed = results.iter().all(|r| r.passed);
    if cli.json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        for r in &results {
            println!("{}: {} ({})", r.name, if r.passed { "PASS" } else { "FAIL" }, r.detail);
        }
    }
    if all_passed {
        Ok(())
    } else {
        Err(AsvhError::Contract("one or more verification suites failed".into()))
    }
}

fn cmd_plot(cli: &Cli, args: &PlotArgs) -> asvh::Result<()> {
    let report: asvh::retrieval::RetrievalReport =
        serde_json::from_str(&std::fs::read_to_string(&args.report)?)?;
    std::fs::create_dir_all(&args.out)?;
    let mut pr = String::from("radius,precision,recall\n");
    for (r, p, rec) in &report.pr {
        pr.push_str(&format!("{r},{p},{rec}\n"));
    }
    std::fs::write(args.out.join("pr.csv"), pr)?;
    let mut map = String::from("n,map\n");
    for (n, v) in &report.map_at {
        map.push_str(&format!("{n},{v}\n"));
    }
    std::fs::write(args.out.join("map_at.csv"), map)?;
    if cli.json {
        println!("{}", serde_json::json!({"out": args.out, "files": ["pr.csv", "map_at.csv"]}));
    } else {
        println!("wrote pr.csv and map_at.csv to {}", args.out.display());
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(&cli, args),
        Command::Train(args) => cmd_train(&cli, args),
        Command::Encode(args) => cmd_encode(&cli, args),
        Command::Eval(args) => cmd_eval(&cli, args),
        Command::Verify(args) => cmd_verify(&cli, args),
        Command::Plot(args) => cmd_plot(&cli, args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
