use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use npa::checkpoint::{
    load_checkpoint, load_optimizer, read_contents, save_checkpoint, save_optimizer, sidecar_path,
};
use npa::data::{
    gen_synthetic, load_baskets, make_eval_instances, save_baskets, split_dataset, write_atomic,
    BasketFormat, Catalog, EvalSampling, SynthSpec,
};
use npa::export::export_attention;
use npa::metrics::{evaluate_baseline, evaluate_model, BaselineKind, BaselineStats, EVAL_LIST_LEN};
use npa::model::parameter_shapes;
use npa::parallel::Execution;
use npa::recommend::{recommend_topk, Scoring, ScoringKind};
use npa::training::train_from;
use npa::{NpaError, NpaModel, Result, RunConfig};

#[derive(Parser)]
#[command(name = "npa", version, about = "Neural Pattern Associator: train, evaluate and inspect basket models")]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted combination patterns.
    GenSynth {
        /// TOML file with SynthSpec fields; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        num_baskets: Option<usize>,
    },
    /// Split a basket file into train/valid/test files.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated train,valid,test ratios.
        #[arg(long, default_value = "0.6,0.2,0.2")]
        ratios: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write a checkpoint plus optimizer sidecar.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint (and its sidecar, if present).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Evaluate a checkpoint or a baseline on held-out baskets.
    Evaluate {
        #[arg(long, required_unless_present = "baseline")]
        ckpt: Option<PathBuf>,
        /// pop, cp or itemcf instead of a checkpoint.
        #[arg(long, requires = "train_data")]
        baseline: Option<String>,
        /// Training baskets for fitting the baseline.
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Ranked list length; at least 20.
        #[arg(long, default_value_t = EVAL_LIST_LEN)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        input_fraction: f64,
        /// Sample consecutive windows instead of random subsets.
        #[arg(long)]
        temporal: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        scoring: ScoringArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Print the report as one JSON line instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Top-k recommendations for one basket.
    Recommend {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated item ids.
        #[arg(long)]
        basket: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
    /// Export per-step attention for a basket as JSON lines.
    InspectAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        basket: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        scoring: ScoringArgs,
    },
    /// Print a checkpoint's config and tensor shapes.
    CheckpointInfo {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Args)]
struct InputArgs {
    /// Tab-separated `id<TAB>name` catalog; required for --names.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Basket files list item names instead of ids.
    #[arg(long)]
    names: bool,
}

impl InputArgs {
    fn load(&self, path: &Path) -> Result<(Catalog, Vec<npa::data::Basket>)> {
        let catalog = self.catalog.as_deref().map(Catalog::load).transpose()?;
        let format = if self.names {
            BasketFormat::Names
        } else {
            BasketFormat::Ids
        };
        load_baskets(path, format, catalog.as_ref())
    }
}

#[derive(Args)]
struct ScoringArgs {
    /// softmax, mean or fesf; MC models default to fesf.
    #[arg(long)]
    scoring: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    fesf_temperature: f64,
}

impl ScoringArgs {
    fn resolve(&self, model: &NpaModel) -> Result<Scoring> {
        let kind = match &self.scoring {
            Some(s) => s.parse::<ScoringKind>()?,
            None if model.config().contexts_per_step() > 1 => ScoringKind::Fesf,
            None => ScoringKind::Softmax,
        };
        Ok(Scoring {
            kind,
            fesf_temperature: self.fesf_temperature,
        })
    }
}

fn parse_basket(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| NpaError::InvalidArgument(format!("bad item id `{}` in --basket", t.trim())))
        })
        .collect()
}

fn parse_ratios(text: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| NpaError::InvalidArgument(format!("bad --ratios `{text}`")))?;
    v.try_into()
        .map_err(|_| NpaError::InvalidArgument("--ratios takes three values".into()))
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::GenSynth {
            config,
            out_dir,
            seed,
            num_baskets,
        } => {
            let mut spec: SynthSpec = match config {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?)
                    .map_err(|e| NpaError::Config(format!("{}: {}", p.display(), e.message())))?,
                None => SynthSpec::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            if let Some(n) = num_baskets {
                spec.num_baskets = n;
            }
            let (catalog, baskets, truth) = gen_synthetic(&spec)?;
            std::fs::create_dir_all(&out_dir)?;
            save_baskets(&out_dir.join("baskets.txt"), &baskets)?;
            catalog.save(&out_dir.join("catalog.tsv"))?;
            let truth_json = serde_json::to_string(&truth).expect("truth serializes");
            write_atomic(&out_dir.join("truth.json"), truth_json.as_bytes())?;
            let spec_toml = toml::to_string(&spec).expect("spec serializes");
            write_atomic(&out_dir.join("synth.toml"), spec_toml.as_bytes())?;
            write!(out, "{spec_toml}")?;
            writeln!(out, "wrote {} baskets to {}", baskets.len(), out_dir.display())?;
        }
        Command::Split {
            data,
            out_dir,
            ratios,
            seed,
        } => {
            let (_, baskets) = load_baskets(&data, BasketFormat::Ids, None)?;
            let (train, valid, test) = split_dataset(&baskets, parse_ratios(&ratios)?, seed)?;
            std::fs::create_dir_all(&out_dir)?;
            for (name, part) in [("train", &train), ("valid", &valid), ("test", &test)] {
                save_baskets(&out_dir.join(format!("{name}.txt")), part)?;
                writeln!(out, "{name}\t{}", part.len())?;
            }
        }
        Command::Train {
            config,
            data,
            out: out_path,
            seed,
            resume,
            input,
        } => {
            let mut run_cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                run_cfg.train.seed = s;
            }
            let (catalog, baskets) = input.load(&data)?;
            let (mut model, optim) = match &resume {
                Some(path) => {
                    let model = load_checkpoint(path)?;
                    if model.config() != &run_cfg.model {
                        let mut resolved = run_cfg.model.clone();
                        resolved.num_items = model.config().num_items;
                        if &resolved != model.config() {
                            return Err(NpaError::Config(
                                "model settings differ from the checkpoint being resumed".into(),
                            ));
                        }
                    }
                    run_cfg.model = model.config().clone();
                    let side = sidecar_path(path);
                    let optim = if side.exists() {
                        Some(load_optimizer(&side, &model)?)
                    } else {
                        None
                    };
                    (model, optim)
                }
                None => {
                    if run_cfg.model.num_items == 0 {
                        run_cfg.model.num_items = catalog.num_items();
                    }
                    (NpaModel::new(run_cfg.model.clone(), run_cfg.train.seed)?, None)
                }
            };
            if let Some(bad) = baskets.iter().flat_map(|b| &b.items).find(|&&i| i >= model.config().num_items) {
                return Err(NpaError::invalid(format!(
                    "item id {bad} exceeds the model's {} items",
                    model.config().num_items
                )));
            }
            eprint!("# resolved config\n{}", run_cfg.to_toml());
            write!(out, "{}", run_cfg.to_toml().lines().map(|l| format!("# {l}\n")).collect::<String>())?;
            let outcome = train_from(&baskets, &mut model, &run_cfg.train, exec, optim, |r| {
                println!("{}", serde_json::to_string(r).expect("report serializes"));
                eprintln!("epoch {} done in {:.2}s", r.epoch, r.seconds);
            })?;
            save_checkpoint(&model, &out_path)?;
            save_optimizer(&outcome.optimizer, model.params().names(), &sidecar_path(&out_path))?;
        }
        Command::Evaluate {
            ckpt,
            baseline,
            train_data,
            data,
            k,
            input_fraction,
            temporal,
            seed,
            scoring,
            input,
            json,
        } => {
            if k < 20 {
                return Err(NpaError::invalid(format!("--k {k} is below the metric cutoff 20")));
            }
            let (_, test) = input.load(&data)?;
            let sampling = EvalSampling {
                input_fraction,
                temporal,
                instances_per_basket: 1,
                seed,
            };
            let (instances, skipped) = make_eval_instances(&test, &sampling)?;
            if skipped > 0 {
                eprintln!("skipped {skipped} baskets with fewer than two distinct items");
            }
            let (report, unseen) = match (ckpt, baseline) {
                (Some(path), None) => {
                    let model = load_checkpoint(&path)?;
                    let max_len = model.config().max_sequence_length;
                    let mut instances = instances;
                    for i in instances.iter_mut().filter(|i| i.input.len() > max_len) {
                        i.input.truncate(max_len);
                    }
                    let scoring = scoring.resolve(&model)?;
                    (evaluate_model(&model, &instances, scoring, k, seed, exec)?, None)
                }
                (None, Some(kind)) => {
                    let kind: BaselineKind = kind.parse()?;
                    let train_path = train_data.expect("clap requires --train-data");
                    let (_, train) = input.load(&train_path)?;
                    let num_items = train
                        .iter()
                        .chain(&test)
                        .flat_map(|b| &b.items)
                        .max()
                        .map_or(0, |m| m + 1);
                    let stats = BaselineStats::fit(&train, num_items);
                    let (r, unseen) = evaluate_baseline(&stats, kind, &instances, k, exec)?;
                    (r, Some(unseen))
                }
                _ => return Err(NpaError::invalid("pass exactly one of --ckpt or --baseline")),
            };
            if json {
                writeln!(out, "{}", report.to_json_line())?;
            } else {
                writeln!(out, "{report}")?;
            }
            if let Some(u) = unseen {
                eprintln!("unseen input items: {u}");
            }
        }
        Command::Recommend {
            ckpt,
            basket,
            k,
            seed,
            scoring,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let scoring = scoring.resolve(&model)?;
            let rec = recommend_topk(&model, &parse_basket(&basket)?, k, scoring, seed)?;
            for (item, score) in rec.items.iter().zip(&rec.scores) {
                writeln!(out, "{item}\t{score:.6}")?;
            }
        }
        Command::InspectAttention {
            ckpt,
            basket,
            out: path,
            k,
            seed,
            scoring,
        } => {
            let model = load_checkpoint(&ckpt)?;
            let scoring = scoring.resolve(&model)?;
            let export = export_attention(&model, &parse_basket(&basket)?, k, scoring, seed)?;
            let text = export.to_json_lines();
            match path {
                Some(p) => write_atomic(&p, text.as_bytes())?,
                None => write!(out, "{text}")?,
            }
        }
        Command::CheckpointInfo { ckpt } => {
            let c = read_contents(&ckpt)?;
            writeln!(out, "format_version = {}", c.version)?;
            writeln!(out, "checksum = {:016x}", c.checksum)?;
            writeln!(out, "bytes = {}", c.bytes)?;
            writeln!(out, "parameters = {}", c.params.num_scalars())?;
            writeln!(out, "\n[config]\n{}", c.config.to_toml().trim_end())?;
            writeln!(out, "\n[tensors]")?;
            let expected = parameter_shapes(&c.config);
            for (i, (name, t)) in c.params.iter().enumerate() {
                let ok = expected.get(i).is_some_and(|(n, s)| n == name && s.as_slice() == t.shape());
                let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                writeln!(out, "{name}\t[{}]{}", shape.join(", "), if ok { "" } else { "\tMISMATCH" })?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(NpaError::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
