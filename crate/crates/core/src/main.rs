use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use asen_core::config::{architecture_hash, ExperimentConfig};
use asen_core::data::synthetic::generate_synthetic_dataset;
use asen_core::data::{split_dataset, Dataset, Role, Split};
use asen_core::evaluation::{
    average_precision, evaluate_map, evaluate_triplet_accuracy, render_map_table, rerank_topk,
    ModelScorer, PairScorer, RetrievalSplit,
};
use asen_core::model::{AsenModel, Variant};
use asen_core::training::{check_loss_gradients, fit, sample_triplets, Checkpoint};
use asen_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "asen",
    version,
    about = "Attribute-specific embedding networks"
)]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the model variant.
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Comma-separated attribute names or indices.
    #[arg(long, global = true, value_delimiter = ',')]
    attrs: Option<Vec<String>>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic quadrant dataset.
    GenData,
    /// Assign train/val/test splits and query/candidate roles.
    Split {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model and keep the best validation snapshot.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Attribute-specific retrieval MAP on the test split.
    EvalMap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Triplet relation prediction accuracy on held-out test triplets.
    EvalTriplet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rerank each test query's top-k by fine-grained similarity.
    Rerank {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint of a triplet_plain model giving the initial ranking;
        /// without it the model's similarity summed over all attributes is used.
        #[arg(long)]
        initial: Option<PathBuf>,
    },
    /// Write spatial attention maps of test images.
    ExportAttention {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Export at most this many images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Compare loss gradients with central differences on a tiny model.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(v) = cli.variant {
        cfg.model.variant = v;
    }
    if let Some(attrs) = &cli.attrs {
        cfg.eval.attrs = attrs.clone();
    }
    cfg.validate()?;
    println!("# resolved configuration (seed {})", cfg.seed);
    println!("{}", cfg.to_toml());
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_model(cfg: &ExperimentConfig, data: &Dataset, path: &Path) -> Result<AsenModel<f32>> {
    let arch = cfg.model_config(data.manifest.vocabulary.len());
    let ck = Checkpoint::<f32>::load(path)?;
    let hash = architecture_hash(&arch, &cfg.backbone);
    if ck.config_hash != hash {
        return Err(Error::Spec(format!(
            "{} was trained with a different architecture (hash {}, expected {hash}); check --config and --variant",
            path.display(),
            ck.config_hash
        )));
    }
    AsenModel::from_store(arch, &cfg.backbone, ck.params)
}

fn selected_attrs(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<usize>> {
    let vocab = &data.manifest.vocabulary;
    if cfg.eval.attrs.is_empty() {
        return Ok((0..vocab.len()).collect());
    }
    cfg.eval
        .attrs
        .iter()
        .map(|a| vocab.resolve(a.trim()))
        .collect()
}

/// Returns the process exit code.
fn run(cli: Cli) -> Result<u8> {
    let cfg = resolve_config(&cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::GenData => {
            let data = generate_synthetic_dataset(&cfg.data.synthetic)?;
            data.save(out)?;
            println!("wrote {} images to {}", data.len(), out.display());
        }
        Command::Split { data } => {
            let mut dataset = Dataset::load(data)?;
            let (manifest, report) = split_dataset(
                &dataset.manifest,
                cfg.data.ratios,
                cfg.data.query_fraction,
                cfg.seed,
            )?;
            dataset.manifest = manifest;
            dataset.save(out)?;
            println!("{report}");
        }
        Command::Train { data } => {
            let dataset = Dataset::load(data)?;
            let arch = cfg.model_config(dataset.manifest.vocabulary.len());
            let hash = architecture_hash(&arch, &cfg.backbone);
            let mut model = AsenModel::<f32>::new(arch, &cfg.backbone, cfg.seed)?;
            create_dir(out)?;
            let mut log = String::from("epoch\tmean_loss\tlr\tval_metric\n");
            let outcome = fit(&mut model, &dataset, &cfg.train, &hash, |entry| {
                println!("{entry}");
                writeln!(log, "{entry}").unwrap();
            })?;
            let variant = cfg.model.variant;
            write_file(&out.join(format!("{variant}.train_log.tsv")), &log)?;
            let path = out.join(format!("{variant}.ckpt"));
            outcome.best.save(&path)?;
            println!(
                "best epoch {} (validation {:.6}) saved to {}",
                outcome.best.epoch,
                outcome.best.metric,
                path.display()
            );
        }
        Command::EvalMap { data, checkpoint } => {
            let dataset = Dataset::load(data)?;
            let model = load_model(&cfg, &dataset, checkpoint)?;
            let split = RetrievalSplit::from_manifest(&dataset.manifest, Split::Test)?;
            let report = evaluate_map(&mut ModelScorer::new(&model, &dataset.inputs), &split)?;
            let names: Vec<&str> = dataset
                .manifest
                .vocabulary
                .attributes()
                .iter()
                .map(|a| a.name.as_str())
                .collect();
            let table = render_map_table(&names, &[(cfg.model.variant.to_string(), &report)]);
            create_dir(out)?;
            write_file(&out.join(format!("map_{}.tsv", cfg.model.variant)), &table)?;
            print!("{table}");
            if report.excluded > 0 {
                println!(
                    "{} queries without relevant candidates were excluded",
                    report.excluded
                );
            }
        }
        Command::EvalTriplet { data, checkpoint } => {
            let dataset = Dataset::load(data)?;
            let model = load_model(&cfg, &dataset, checkpoint)?;
            let test = dataset.manifest.indices(Split::Test)?;
            let triplets = sample_triplets(&dataset.manifest, &test, cfg.eval.triplets, cfg.seed)?;
            let acc = evaluate_triplet_accuracy(
                &mut ModelScorer::new(&model, &dataset.inputs),
                &triplets,
            )?;
            let text = format!(
                "model\taccuracy\n{}\t{:.2}\n",
                cfg.model.variant,
                100.0 * acc
            );
            create_dir(out)?;
            write_file(
                &out.join(format!("triplet_{}.tsv", cfg.model.variant)),
                &text,
            )?;
            print!("{text}");
        }
        Command::Rerank {
            data,
            checkpoint,
            initial,
        } => {
            let dataset = Dataset::load(data)?;
            let model = load_model(&cfg, &dataset, checkpoint)?;
            let attrs = selected_attrs(&cfg, &dataset)?;
            let all: Vec<usize> = (0..dataset.manifest.vocabulary.len()).collect();
            let initial_model = match initial {
                Some(p) => {
                    let mut plain = cfg.clone();
                    plain.model.variant = Variant::TripletPlain;
                    Some(load_model(&plain, &dataset, p)?)
                }
                None => None,
            };
            let manifest = &dataset.manifest;
            let queries = manifest.role_indices(Split::Test, Role::Query)?;
            let candidates = manifest.role_indices(Split::Test, Role::Candidate)?;
            let k = cfg.eval.rerank_k.min(candidates.len());
            let ids = manifest.image_ids();
            let mut fine = ModelScorer::new(&model, &dataset.inputs);
            let mut coarse = initial_model
                .as_ref()
                .map(|m| ModelScorer::new(m, &dataset.inputs));
            let relevant = |q: usize, c: usize| {
                attrs.iter().all(|&a| {
                    manifest.value(q, a).is_some() && manifest.value(q, a) == manifest.value(c, a)
                })
            };
            let mut text = String::from("query\tap_before\tap_after\tinitial\treranked\n");
            let (mut before_sum, mut after_sum, mut counted) = (0.0, 0.0, 0usize);
            for &q in &queries {
                let mut scored = Vec::with_capacity(candidates.len());
                for &c in &candidates {
                    let s = match coarse.as_mut() {
                        Some(m) => m.score(q, c, &[0])?,
                        None => fine.score(q, c, &all)?,
                    };
                    scored.push((s, c));
                }
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| ids[a.1].cmp(&ids[b.1])));
                let ranking: Vec<usize> = scored.into_iter().map(|(_, c)| c).collect();
                let reranked = rerank_topk(&mut fine, q, &ranking, &attrs, k)?;
                let flags =
                    |r: &[usize]| r[..k].iter().map(|&c| relevant(q, c)).collect::<Vec<_>>();
                let (b, a) = (
                    average_precision(&flags(&ranking)),
                    average_precision(&flags(&reranked)),
                );
                if let (Some(b), Some(a)) = (b, a) {
                    before_sum += b;
                    after_sum += a;
                    counted += 1;
                }
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                let join = |r: &[usize]| {
                    r[..k]
                        .iter()
                        .map(|&c| ids[c].as_str())
                        .collect::<Vec<_>>()
                        .join(",")
                };
                writeln!(
                    text,
                    "{}\t{}\t{}\t{}\t{}",
                    ids[q],
                    fmt(b),
                    fmt(a),
                    join(&ranking),
                    join(&reranked)
                )
                .unwrap();
            }
            create_dir(out)?;
            write_file(&out.join("rerank.tsv"), &text)?;
            if counted > 0 {
                println!(
                    "mean top-{k} AP over {counted} queries: {:.4} -> {:.4}",
                    before_sum / counted as f64,
                    after_sum / counted as f64
                );
            } else {
                println!("no query has a relevant candidate in its top {k}");
            }
        }
        Command::ExportAttention {
            data,
            checkpoint,
            limit,
        } => {
            let dataset = Dataset::load(data)?;
            let model = load_model(&cfg, &dataset, checkpoint)?;
            let attrs = selected_attrs(&cfg, &dataset)?;
            let images = match dataset.manifest.indices(Split::Test) {
                Ok(v) => v,
                Err(_) => (0..dataset.len()).collect(),
            };
            let dir = out.join("attention");
            create_dir(&dir)?;
            let vocab = &dataset.manifest.vocabulary;
            let n = limit.unwrap_or(images.len()).min(images.len());
            for &i in &images[..n] {
                let id = &dataset.manifest.records[i].image_id;
                let maps = model.attention_maps(id, &dataset.inputs[i], &attrs)?;
                let text: String = maps
                    .iter()
                    .map(|m| m.render(vocab.name(m.attribute)))
                    .collect();
                write_file(&dir.join(format!("{id}.txt")), &text)?;
            }
            println!("wrote {n} attention files to {}", dir.display());
        }
        Command::GradCheck { tolerance } => {
            let report = check_loss_gradients(cfg.seed, *tolerance)?;
            println!("{report}");
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(3);
            }
        }
    }
    Ok(0)
}
