use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use viewformer::bench::{bench_attention, write_bench};
use viewformer::checkpoint::{CodebookState, TransformerState};
use viewformer::config::RunConfig;
use viewformer::dataset::{load_dataset, load_tokens, make_dataset, tokenize};
use viewformer::evaluate::evaluate;
use viewformer::pipeline::{localize, render, Query};
use viewformer::train::{train_codebook, train_transformer};
use viewformer::{Error, Result};

#[derive(Parser)]
#[command(
    name = "viewformer",
    version,
    about = "Few-view novel view synthesis and camera localization on procedural scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (the dataset directory for make-dataset).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Schedule {
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct Pick {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    transformer: Option<PathBuf>,
    /// Index of the episode in the dataset.
    #[arg(long, default_value_t = 0)]
    episode: usize,
    /// Number of leading views used as context.
    #[arg(long, default_value_t = 3)]
    context: usize,
    /// View to synthesize or localize; defaults to the last one.
    #[arg(long)]
    query: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render train and test episodes to disk.
    MakeDataset {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        test_scenes: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Train the VQ-VAE codebook on dataset images.
    TrainCodebook {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        schedule: Schedule,
        /// Continue from a codebook checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Replace every dataset image by its code indices.
    Tokenize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Train the transformer on a token set.
    TrainTransformer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[command(flatten)]
        schedule: Schedule,
        /// Train the image task only.
        #[arg(long)]
        no_loc: bool,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score checkpoints and baselines on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        codebook: Option<PathBuf>,
        /// Omit to report baselines only.
        #[arg(long)]
        transformer: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        context_sizes: Option<Vec<usize>>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Time branching against naive attention.
    BenchAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<usize>>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        d_m: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Synthesize one view of a stored episode to a PNG file.
    Render {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pick: Pick,
        /// Output image; defaults to render.png in the output directory.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Print the estimated world pose of one stored view as px py pz qw qx qy qz.
    Localize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        pick: Pick,
    },
}

fn base_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn apply_schedule(target: &mut viewformer::config::Schedule, s: &Schedule) {
    if let Some(v) = s.steps {
        target.steps = v;
    }
    if let Some(v) = s.batch {
        target.batch = v;
    }
    if let Some(v) = s.lr {
        target.lr = v;
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_models(cfg: &RunConfig, pick: &Pick) -> Result<(CodebookState, TransformerState)> {
    let cb = CodebookState::load(pick.codebook.as_deref().unwrap_or(&cfg.codebook_path()))?;
    let tf = TransformerState::load(pick.transformer.as_deref().unwrap_or(&cfg.transformer_path()))?;
    Ok((cb, tf))
}

fn dataset_path<'a>(cfg: &'a RunConfig, flag: &'a Option<PathBuf>) -> &'a Path {
    flag.as_deref().unwrap_or(&cfg.dataset)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeDataset {
            common,
            scenes,
            test_scenes,
            views,
            image_size,
            split_seed,
        } => {
            let mut cfg = base_config(&common)?;
            let d = &mut cfg.data;
            set(&mut d.scenes, scenes);
            set(&mut d.test_scenes, test_scenes);
            set(&mut d.views, views);
            set(&mut d.image_size, image_size);
            set(&mut d.split_seed, split_seed);
            let dir = common.out.unwrap_or(cfg.dataset);
            let data = make_dataset(&cfg.data, &dir)?;
            println!("wrote {} episodes to {}", data.episodes.len(), dir.display());
        }
        Command::TrainCodebook {
            common,
            dataset,
            schedule,
            resume,
        } => {
            let mut cfg = base_config(&common)?;
            apply_schedule(&mut cfg.codebook_training, &schedule);
            cfg.codebook.validate()?;
            let data = load_dataset(dataset_path(&cfg, &dataset))?;
            let resume = resume.map(|p| CodebookState::load(&p)).transpose()?;
            let state = train_codebook(&cfg, &data, resume)?;
            println!(
                "codebook trained to step {}: {}",
                state.step,
                cfg.codebook_path().display()
            );
        }
        Command::Tokenize {
            common,
            dataset,
            codebook,
        } => {
            let cfg = base_config(&common)?;
            let cb = CodebookState::load(codebook.as_deref().unwrap_or(&cfg.codebook_path()))?;
            let data = load_dataset(dataset_path(&cfg, &dataset))?;
            let tokens = tokenize(&cb.codebook, &data, &cfg.tokens_dir())?;
            println!(
                "tokenized {} episodes into {}",
                tokens.episodes.len(),
                cfg.tokens_dir().display()
            );
        }
        Command::TrainTransformer {
            common,
            tokens,
            schedule,
            no_loc,
            resume,
        } => {
            let mut cfg = base_config(&common)?;
            apply_schedule(&mut cfg.transformer_training, &schedule);
            if no_loc {
                cfg.localization = false;
            }
            cfg.model.validate()?;
            let set = load_tokens(tokens.as_deref().unwrap_or(&cfg.tokens_dir()))?;
            let resume = resume.map(|p| TransformerState::load(&p)).transpose()?;
            let state = train_transformer(&cfg, &set, resume)?;
            println!(
                "transformer trained to step {}: {}",
                state.step,
                cfg.transformer_path().display()
            );
        }
        Command::Evaluate {
            common,
            dataset,
            codebook,
            transformer,
            context_sizes,
            episodes,
        } => {
            let mut cfg = base_config(&common)?;
            set(&mut cfg.eval.context_sizes, context_sizes);
            if episodes.is_some() {
                cfg.eval.episodes = episodes;
            }
            let cb = CodebookState::load(codebook.as_deref().unwrap_or(&cfg.codebook_path()))?;
            let tf = transformer.map(|p| TransformerState::load(&p)).transpose()?;
            if let Some(tf) = &tf {
                cfg.model = tf.model.config.clone();
            }
            let data = load_dataset(dataset_path(&cfg, &dataset))?;
            let report = evaluate(&cfg, &cb.codebook, tf.as_ref().map(|t| &t.model), &data)?;
            std::fs::create_dir_all(&cfg.out).map_err(Error::io(&cfg.out))?;
            report.write(&cfg.out)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::BenchAttention {
            common,
            ns,
            k,
            d_m,
            repeats,
        } => {
            let mut cfg = base_config(&common)?;
            let b = &mut cfg.bench;
            set(&mut b.ns, ns);
            set(&mut b.k, k);
            set(&mut b.d_m, d_m);
            set(&mut b.repeats, repeats);
            let rows = bench_attention(&cfg.bench, cfg.seed)?;
            write_bench(&cfg.out, &rows)?;
            for r in &rows {
                println!(
                    "n={:>3} nodes {:>6} vs {:>6}  {:>9.3} ms vs {:>9.3} ms  ratio {:.2}",
                    r.n, r.branching_nodes, r.naive_nodes, r.branching_ms, r.naive_ms, r.ratio
                );
            }
        }
        Command::Render { common, pick, image } => {
            let cfg = base_config(&common)?;
            let data = load_dataset(dataset_path(&cfg, &pick.dataset))?;
            let q = Query::select(&data, pick.episode, pick.context, pick.query)?;
            let (cb, tf) = load_models(&cfg, &pick)?;
            let img = render(&cb, &tf.model, &q)?;
            let path = image.unwrap_or_else(|| cfg.out.join("render.png"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
            }
            let size = img.size() as u32;
            image::save_buffer(&path, &img.to_rgb8(), size, size, image::ExtendedColorType::Rgb8)
                .map_err(|e| Error::format(&path, e.to_string()))?;
            println!("{}", path.display());
        }
        Command::Localize { common, pick } => {
            let cfg = base_config(&common)?;
            let data = load_dataset(dataset_path(&cfg, &pick.dataset))?;
            let q = Query::select(&data, pick.episode, pick.context, pick.query)?;
            let (cb, tf) = load_models(&cfg, &pick)?;
            let pose = localize(&cb, &tf.model, &q)?;
            let nums: Vec<String> = pose.to_array().iter().map(|v| format!("{v:.6}")).collect();
            println!("{}", nums.join(" "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"error": e.kind(), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
