use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use da4lg::dataset::{generate_synthetic, load_dataset, GroundingDataset, Split, SynthSpec};
use da4lg::evaluation::{
    ablation_cells, ablation_sweep, attention_pair, evaluate, extract_attention, grid_cells, write_heatmap, SweepCell,
};
use da4lg::head::EncoderToggles;
use da4lg::model::{FeatureCache, ViewMode};
use da4lg::objectives::TaskMask;
use da4lg::training::{
    build_model, load_checkpoint, save_checkpoint, train, CheckpointMeta, ParamLedger, PolicyKind, TrainConfig,
    TrainOptions,
};

#[derive(Debug, Parser)]
#[command(
    name = "da4lg",
    version,
    about = "Multi-view language grounding with a low-rank domain adapter"
)]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a spec file (TOML or JSON).
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write metrics and checkpoints.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "validation")]
        split: Split,
        /// `multi`, `single`, or `single:<view>`.
        #[arg(long, default_value = "multi")]
        views: ViewMode,
    },
    /// Train and evaluate every cell of a grid file over several seeds.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Print the parameter ledger of a checkpoint.
    Params {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Fold the domain adapters into the encoder and save the result.
    Merge {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export class-token attention heatmaps of the domain encoder.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        object: String,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        layer: Option<usize>,
        /// Also export the map with adapters zeroed.
        #[arg(long)]
        zero_adapters: bool,
        /// Dataset root; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "attention")]
        out: PathBuf,
    },
    /// Greedy-decode a caption for one object.
    CaptionDebug {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        object: String,
        /// Dataset root; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Sweep grid file. The dataset comes from `data` or is generated from
/// `synth`; cells come from `preset = "ablation"`, an explicit `cells` list,
/// or the product of `masks`, `toggles`, and `policies`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    data: Option<PathBuf>,
    synth: Option<SynthSpec>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default = "default_split")]
    split: Split,
    preset: Option<String>,
    cells: Option<Vec<SweepCell>>,
    masks: Option<Vec<TaskMask>>,
    toggles: Option<Vec<EncoderToggles>>,
    policies: Option<Vec<PolicyKind>>,
}

fn default_split() -> Split {
    Split::Validation
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        print!("{}", text());
    }
    Ok(())
}

fn read_structured<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(anyhow::Error::from)
    } else {
        toml::from_str(&text).map_err(anyhow::Error::from)
    };
    parsed.with_context(|| format!("invalid {}", path.display()))
}

fn open_data(path: &Path, flag: &str) -> Result<GroundingDataset> {
    load_dataset(path).with_context(|| format!("{flag} {}", path.display()))
}

fn data_for(data: Option<PathBuf>, recorded: Option<PathBuf>) -> Result<GroundingDataset> {
    let path = data
        .or(recorded)
        .ok_or_else(|| anyhow!("--data is required: the checkpoint records no dataset root"))?;
    open_data(&path, "--data")
}

fn threads() -> usize {
    std::env::var("DA4LG_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run(cli: Cli) -> Result<()> {
    let json = cli.json;
    match cli.command {
        Command::GenData { spec, out, seed } => {
            let mut spec: SynthSpec = read_structured(&spec).context("--spec")?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = generate_synthetic(&spec).context("--spec")?;
            data.save(&out).with_context(|| format!("--out {}", out.display()))?;
            let summary = json!({
                "out": out,
                "seed": spec.seed,
                "objects": data.n_objects(),
                "references": data.references().len(),
                "views": data.view_count(),
                "train": data.split(Split::Train).len(),
                "validation": data.split(Split::Validation).len(),
                "test": data.split(Split::Test).len(),
            });
            emit(json, &summary, || {
                format!(
                    "wrote {} objects and {} references to {}\n",
                    data.n_objects(),
                    data.references().len(),
                    out.display()
                )
            })
        }
        Command::Train {
            data,
            config,
            out,
            seed,
        } => {
            let dataset = open_data(&data, "--data")?;
            let mut cfg = TrainConfig::from_file(&config).context("--config")?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let mut model = build_model(&dataset, &cfg, EncoderToggles::default()).context("--config")?;
            let root = std::fs::canonicalize(&data).unwrap_or(data);
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                data_root: Some(root),
                skip_validation: false,
            };
            let report = train(&mut model, &dataset, &cfg, &opts)?;
            let last = report.history.last().cloned();
            let summary = json!({
                "out": out,
                "epochs": report.history.len(),
                "best_epoch": report.best_epoch,
                "trainable_params": report.ledger.trainable,
                "final": last,
            });
            emit(json, &summary, || {
                let mut s = format!(
                    "trained {} epochs, best epoch {}, {} trainable parameters\n",
                    report.history.len(),
                    report.best_epoch,
                    report.ledger.trainable
                );
                if let Some(m) = &last {
                    s += &format!(
                        "final loss {:.4}, validation accuracy {:?}\n",
                        m.loss_total, m.val_acc_all
                    );
                }
                s
            })
        }
        Command::Eval {
            data,
            ckpt,
            split,
            views,
        } => {
            let dataset = open_data(&data, "--data")?;
            let (model, _) = load_checkpoint(&ckpt).with_context(|| format!("--ckpt {}", ckpt.display()))?;
            let card = evaluate(&model, &dataset, split, views)?;
            for w in &card.warnings {
                log::warn!("{w}");
            }
            emit(json, &card, || card.to_table())
        }
        Command::Sweep { grid, seeds } => {
            if seeds == 0 {
                return Err(anyhow!("--seeds must be at least 1"));
            }
            let g: GridFile = read_structured(&grid).context("--grid")?;
            let dataset = match (&g.data, &g.synth) {
                (Some(path), None) => open_data(path, "data")?,
                (None, Some(spec)) => generate_synthetic(spec).context("--grid synth")?,
                _ => {
                    return Err(anyhow!(
                        "--grid {}: set exactly one of `data` or `synth`",
                        grid.display()
                    ))
                }
            };
            g.train.validate().context("--grid train")?;
            let cells = match (&g.preset, g.cells, &g.masks) {
                (Some(p), None, None) if p == "ablation" => ablation_cells(),
                (Some(p), _, _) if p != "ablation" => {
                    return Err(anyhow!("--grid {}: unknown preset `{p}`", grid.display()))
                }
                (None, Some(cells), None) => cells,
                (None, None, Some(masks)) => grid_cells(
                    masks,
                    g.toggles.as_deref().unwrap_or(&[EncoderToggles::default()]),
                    g.policies.as_deref().unwrap_or(&[g.train.policy]),
                ),
                _ => {
                    return Err(anyhow!(
                        "--grid {}: set exactly one of `preset`, `cells`, or `masks`",
                        grid.display()
                    ))
                }
            };
            let seed_list: Vec<u64> = (0..seeds).collect();
            let table = ablation_sweep(&dataset, &cells, &g.train, &seed_list, g.split, threads())?;
            emit(json, &table, || table.to_text())
        }
        Command::Params { ckpt } => {
            let (model, _) = load_checkpoint(&ckpt).with_context(|| format!("--ckpt {}", ckpt.display()))?;
            let ledger = ParamLedger::from_model(&model);
            emit(json, &ledger, || ledger.to_table())
        }
        Command::Merge { ckpt, out } => {
            let (model, manifest) = load_checkpoint(&ckpt).with_context(|| format!("--ckpt {}", ckpt.display()))?;
            let merged = model.merged()?;
            let meta = CheckpointMeta {
                seed: manifest.seed,
                policy: None,
                train: manifest.train.clone(),
                data_root: manifest.data_root.clone(),
                epoch: manifest.epoch,
            };
            let saved = save_checkpoint(&merged, &meta, &out).with_context(|| format!("--out {}", out.display()))?;
            let summary = json!({
                "out": out,
                "params": saved.params.len(),
                "trainable_params": saved.trainable_params,
                "frozen_params": saved.frozen_params,
            });
            emit(json, &summary, || {
                format!("wrote merged checkpoint to {}\n", out.display())
            })
        }
        Command::Attn {
            ckpt,
            object,
            view,
            layer,
            zero_adapters,
            data,
            out,
        } => {
            let (model, manifest) = load_checkpoint(&ckpt).with_context(|| format!("--ckpt {}", ckpt.display()))?;
            let dataset = data_for(data, manifest.data_root)?;
            let views = dataset
                .views(&object)
                .ok_or_else(|| anyhow!("--object: no object `{object}` in the dataset"))?;
            let image = views
                .get(view)
                .ok_or_else(|| anyhow!("--view {view}: object `{object}` has {} views", views.len()))?;
            let mut maps = Vec::new();
            if zero_adapters {
                let (with, without) = attention_pair(&model.domain, image, layer).context("--zero-adapters")?;
                maps.push((with, "with"));
                maps.push((without, "without"));
            } else {
                maps.push((
                    extract_attention(&model.domain, image, layer).context("--layer")?,
                    "with",
                ));
            }
            let mut files = Vec::new();
            for (map, tag) in &maps {
                files.extend(write_heatmap(map, &out, &object, view, tag)?);
            }
            let summary = json!({
                "object": object,
                "view": view,
                "layer": maps[0].0.layer,
                "grid_side": maps[0].0.grid_side,
                "maps": maps.iter().map(|(m, tag)| json!({"tag": tag, "grid": m.grid})).collect::<Vec<_>>(),
                "files": files,
            });
            emit(json, &summary, || {
                files.iter().map(|f| format!("{}\n", f.display())).collect()
            })
        }
        Command::CaptionDebug { ckpt, object, data } => {
            let (model, manifest) = load_checkpoint(&ckpt).with_context(|| format!("--ckpt {}", ckpt.display()))?;
            let dataset = data_for(data, manifest.data_root)?;
            if dataset.object(&object).is_none() {
                return Err(anyhow!("--object: no object `{object}` in the dataset"));
            }
            let cache = FeatureCache::build(&model, &dataset, ViewMode::Multi)?;
            let caption = model.caption(&cache, &object)?;
            emit(json, &json!({"object": object, "caption": caption}), || {
                format!("{caption}\n")
            })
        }
    }
}
