//! Command-line front end and line-oriented retrieval server.

pub mod bundle;
pub mod server;
pub mod settings;

use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use urm_core::catalog::{load_catalog, load_interactions, remap_files};
use urm_core::eval::{self, flops_estimate, gen_synthetic, EvalConfig};
use urm_core::neighbor_index::{build_exact_knn_rows, save_graph, DEFAULT_DEGREE};
use urm_core::sampler::SamplerConfig;
use urm_core::trainer::{self, TrainConfig};
use urm_core::{Checkpoint, ItemMode, ObjectiveRegistry};

pub use bundle::{EngineBundle, ErrorResponse, Request, Response};
use settings::{pick, require, FileConfig};

#[derive(Debug, Parser)]
#[command(
    name = "urm",
    version,
    about = "Multi-query item retrieval: training, indexing, sampling and serving"
)]
pub struct Cli {
    /// TOML file whose keys mirror the flags; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a clustered synthetic catalog with train and test interactions.
    GenSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        interactions: Option<PathBuf>,
        /// Output path.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "objective-registry")]
        objective_registry: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "B")]
        bound: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Build the exact k-NN graph over effective item rows.
    BuildIndex {
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output path.
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        degree: Option<usize>,
        #[arg(long)]
        mode: Option<ItemMode>,
    },
    /// Answer one JSON request (from --request or stdin).
    Retrieve {
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        request: Option<String>,
    },
    /// Recall, precision sweep and item-representation ablation.
    Evaluate {
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        interactions: Option<PathBuf>,
        #[arg(long = "report-json")]
        report_json: Option<PathBuf>,
        #[arg(long)]
        sweep_csv: Option<PathBuf>,
        /// Evaluate every record instead of the configured cap.
        #[arg(long)]
        all_records: bool,
    },
    /// Multiply-accumulate counts of sampled versus exhaustive scoring.
    Flops {
        #[arg(long = "M", default_value_t = 128)]
        m: u64,
        #[arg(long = "H", default_value_t = 128)]
        h: u64,
        #[arg(long = "D", default_value_t = 4096)]
        d: u64,
        #[arg(long = "T", default_value_t = 4)]
        t: u64,
        #[arg(long = "K", default_value_t = 1000)]
        k: u64,
        #[arg(long, default_value_t = 32)]
        max_nbr: u64,
        #[arg(long = "C", default_value_t = 10_000_000)]
        n_items: u64,
    },
    /// Serve newline-delimited JSON requests on 127.0.0.1.
    Serve {
        #[command(flatten)]
        engine: EngineArgs,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Rewrite sparse item ids as dense 0..n ids.
    Remap {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out_catalog: PathBuf,
        #[arg(long, requires = "out_interactions")]
        interactions: Option<PathBuf>,
        #[arg(long, requires = "interactions")]
        out_interactions: Option<PathBuf>,
    },
}

/// Flags shared by the commands that load a trained engine.
#[derive(Debug, Clone, Default, Args)]
pub struct EngineArgs {
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long = "objective-registry")]
    pub objective_registry: Option<PathBuf>,
    #[arg(long = "T")]
    pub steps: Option<usize>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long = "B")]
    pub bound: Option<f64>,
    #[arg(long = "init-subset")]
    pub init_subset: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<ItemMode>,
}

fn file_mode(file: &FileConfig) -> Result<Option<ItemMode>> {
    file.mode
        .as_deref()
        .map(|m| m.parse::<ItemMode>().map_err(|e| anyhow::anyhow!("config mode: {e}")))
        .transpose()
}

impl EngineArgs {
    fn mode(&self, file: &FileConfig) -> Result<ItemMode> {
        Ok(pick(&self.mode, &file_mode(file)?).unwrap_or(ItemMode::Sum))
    }

    fn sampler(&self, file: &FileConfig) -> SamplerConfig {
        let d = SamplerConfig::default();
        SamplerConfig {
            steps: pick(&self.steps, &file.steps).unwrap_or(d.steps),
            k: pick(&self.k, &file.k).unwrap_or(d.k),
            tau: pick(&self.tau, &file.tau).unwrap_or(d.tau),
            init_subset: pick(&self.init_subset, &file.init_subset),
            seed: pick(&self.seed, &file.seed).unwrap_or(d.seed),
            bound: pick(&self.bound, &file.bound).unwrap_or(d.bound),
            final_selection: d.final_selection,
        }
    }

    fn load(&self, file: &FileConfig) -> Result<EngineBundle> {
        let registry = pick(&self.objective_registry, &file.objective_registry);
        EngineBundle::load(
            &require(&self.catalog, &file.catalog, "catalog")?,
            &require(&self.checkpoint, &file.checkpoint, "checkpoint")?,
            &require(&self.graph, &file.graph, "graph")?,
            registry.as_deref(),
            self.sampler(file),
            self.mode(file)?,
        )
    }
}

/// Run one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load_opt(cli.config.as_deref())?;
    match cli.command {
        Command::GenSynthetic { out_dir, seed } => {
            let mut spec = file.synthetic.clone().unwrap_or_default();
            if let Some(s) = pick(&seed, &file.seed) {
                spec.seed = s;
            }
            let data = gen_synthetic(&spec)?;
            let files = data.write(&out_dir)?;
            println!("catalog {}", files.catalog.display());
            println!("train {}", files.train.display());
            println!("test {}", files.test.display());
        }
        Command::Train {
            catalog,
            interactions,
            checkpoint,
            objective_registry,
            seed,
            bound,
            epochs,
        } => {
            let mut cfg = file.train.clone().unwrap_or_default();
            if let Some(s) = pick(&seed, &file.seed) {
                cfg.seed = s;
            }
            if let Some(b) = pick(&bound, &file.bound) {
                cfg.bound = b;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let out = require(&checkpoint, &file.checkpoint, "checkpoint")?;
            cmd_train(
                &require(&catalog, &file.catalog, "catalog")?,
                &require(&interactions, &file.interactions, "interactions")?,
                pick(&objective_registry, &file.objective_registry).as_deref(),
                &cfg,
                &out,
            )?;
        }
        Command::BuildIndex {
            catalog,
            checkpoint,
            graph,
            degree,
            mode,
        } => {
            let mode = pick(&mode, &file_mode(&file)?).unwrap_or(ItemMode::Sum);
            let degree = pick(&degree, &file.degree).unwrap_or(DEFAULT_DEGREE);
            cmd_build_index(
                &require(&catalog, &file.catalog, "catalog")?,
                &require(&checkpoint, &file.checkpoint, "checkpoint")?,
                &require(&graph, &file.graph, "graph")?,
                degree,
                mode,
            )?;
        }
        Command::Retrieve { engine, request } => {
            let bundle = engine.load(&file)?;
            let line = match request {
                Some(r) => r,
                None => {
                    let mut s = String::new();
                    std::io::stdin()
                        .read_to_string(&mut s)
                        .context("reading request from stdin")?;
                    s
                }
            };
            let req: Request = serde_json::from_str(line.trim()).context("parsing request")?;
            let resp = bundle.handle(&req)?;
            println!("{}", serde_json::to_string(&resp)?);
        }
        Command::Evaluate {
            engine,
            interactions,
            report_json,
            sweep_csv,
            all_records,
        } => {
            let mut cfg = eval_config(&engine, &file)?;
            if all_records {
                cfg.max_records = None;
            }
            let bundle = engine.load(&file)?;
            let records = load_interactions(
                require(&interactions, &file.interactions, "interactions")?,
                bundle.catalog.n_items(),
            )?;
            let report = eval::evaluate(&bundle.model, &bundle.catalog, &bundle.graph, &records, &cfg)?;
            print!("{}", report.to_table());
            if let Some(p) = pick(&report_json, &file.report_json) {
                std::fs::write(&p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(p) = sweep_csv {
                std::fs::write(&p, report.sweep_csv()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Flops {
            m,
            h,
            d,
            t,
            k,
            max_nbr,
            n_items,
        } => {
            let f = flops_estimate(m, h, d, t, k, max_nbr, n_items)?;
            println!("sampled {} ({:.3e})", f.sampled, f.sampled as f64);
            println!("full {} ({:.3e})", f.full, f.full as f64);
            println!("ratio {:.1}", f.ratio());
        }
        Command::Serve { engine, port } => {
            let bundle = engine.load(&file)?;
            let port = pick(&port, &file.port).unwrap_or(0);
            server::run(bundle, port)?;
        }
        Command::Remap {
            catalog,
            out_catalog,
            interactions,
            out_interactions,
        } => {
            let pair = interactions.as_deref().zip(out_interactions.as_deref());
            let remap = remap_files(&catalog, &out_catalog, pair)?;
            println!("remapped {} items", remap.original.len());
        }
    }
    Ok(())
}

fn eval_config(engine: &EngineArgs, file: &FileConfig) -> Result<EvalConfig> {
    let mut cfg = file.eval.clone().unwrap_or_default();
    if let Some(k) = pick(&engine.k, &file.k) {
        cfg.k = k;
    }
    if let Some(t) = pick(&engine.steps, &file.steps) {
        cfg.steps = t;
    }
    if let Some(t) = pick(&engine.tau, &file.tau) {
        cfg.tau = t;
    }
    if let Some(b) = pick(&engine.bound, &file.bound) {
        cfg.bound = b;
    }
    if let Some(s) = pick(&engine.init_subset, &file.init_subset) {
        cfg.init_subset = Some(s);
    }
    if let Some(s) = pick(&engine.seed, &file.seed) {
        cfg.seed = s;
    }
    cfg.mode = engine.mode(file)?;
    Ok(cfg)
}

pub fn cmd_train(
    catalog: &Path,
    interactions: &Path,
    registry: Option<&Path>,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<()> {
    let catalog = load_catalog(catalog)?;
    let records = load_interactions(interactions, catalog.n_items())?;
    let tags = registry
        .map(|p| ObjectiveRegistry::load(p).map(|r| r.tags().map(String::from).collect::<Vec<_>>()))
        .transpose()?;
    let output = trainer::train(&records, &catalog, tags, cfg)?;
    for (e, loss) in output.epoch_losses.iter().enumerate() {
        println!("epoch {} loss {loss:.6}", e + 1);
    }
    Checkpoint::from_parts(&output.model.mapping, Some(&output.model.generator)).save(out)?;
    Ok(())
}

pub fn cmd_build_index(catalog: &Path, checkpoint: &Path, out: &Path, degree: usize, mode: ItemMode) -> Result<()> {
    let catalog = load_catalog(catalog)?;
    let ck = Checkpoint::load(checkpoint)?;
    let mapping = ck.mapping(Arc::new(catalog.text_features().clone()))?;
    if mapping.n_items() != catalog.n_items() {
        anyhow::bail!(
            "checkpoint has {} items but the catalog has {}",
            mapping.n_items(),
            catalog.n_items()
        );
    }
    let graph = build_exact_knn_rows(&mapping.effective_items(mode), degree)?;
    save_graph(&graph, out)?;
    println!("graph {} items degree {}", graph.n_items(), graph.degree());
    Ok(())
}
