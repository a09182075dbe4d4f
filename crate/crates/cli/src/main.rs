use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use surrocon_core::contrastive::LabelKey;
use surrocon_core::dataforge::{self, Dataset, Split, NUM_BIOMARKERS};
use surrocon_core::metrics::{MetricsReport, SeedRun};
use surrocon_core::theory;
use surrocon_core::trainloop;
use surrocon_core::{Checkpoint, EncoderNet, Error, ProjectionHead, RunConfig, Stage};

#[derive(Parser)]
#[command(
    name = "surrocon",
    version,
    about = "Surrogate-label contrastive pretraining and biomarker probing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: manifest, `.f64` sidecar and `.meta.json`.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest path; the sidecar and metadata are written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Contrastive pretraining on a surrogate label key.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// Overrides `train.label_key`.
        #[arg(long, value_parser = parse_key)]
        label_key: Option<LabelKey>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for `pretrain.ckpt` and `run.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a linear probe on a frozen pretrained encoder.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated biomarker slots; overrides `probe.slots`.
        #[arg(long)]
        slots: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for `probe.ckpt` and `probe_run.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe and score balanced test sets; prints a metrics report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score this probe checkpoint instead of fitting new probes.
        #[arg(long)]
        probe: Option<PathBuf>,
        #[arg(long)]
        slots: Option<String>,
        /// Number of probe seeds; overrides `eval.seeds`.
        #[arg(long)]
        seeds: Option<usize>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Surrogate-fidelity sweep of the latent-class simulator, as CSV.
    TheorySweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Test-side embeddings with biomarker labels, as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Space::Repr)]
        space: Space,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Space {
    Repr,
    Proj,
}

fn parse_key(s: &str) -> Result<LabelKey, String> {
    s.parse::<LabelKey>().map_err(|e| e.to_string())
}

fn parse_slots(s: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|x| {
            x.trim().parse::<usize>().map_err(|_| Error::BadValue {
                key: "--slots".into(),
                detail: format!("`{x}` is not a slot index"),
            })
        })
        .collect()
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => RunConfig::parse(""),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn load_split(data: &Path, cfg: &RunConfig) -> Result<(Dataset, String), Error> {
    let ds = dataforge::load_manifest(data)?;
    let hash = dataforge::hash_files(data)?;
    Ok((
        dataforge::split_by_eye(ds, cfg.split.test_fraction, cfg.train.seed)?,
        hash,
    ))
}

fn load_networks(path: &Path, ds: &Dataset) -> Result<(EncoderNet, ProjectionHead), Error> {
    let ckpt = Checkpoint::read(path)?;
    let (enc, head) = ckpt.networks()?;
    if enc.input_dim() != ds.input_dim {
        return Err(Error::Dimension {
            op: "checkpoint",
            detail: format!(
                "encoder expects input_dim {}, dataset has input_dim {}",
                enc.input_dim(),
                ds.input_dim
            ),
        });
    }
    Ok((enc, head))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let cfg = load_config(config.as_deref())?;
            let ds = dataforge::generate(&cfg.generator, seed)?;
            let hash = dataforge::save_manifest(&ds, &out)?;
            let meta = json!({
                "config_hash": cfg.hash(),
                "generator_hash": cfg.generator.hash(),
                "dataset_hash": hash,
                "seed": seed,
                "n_samples": ds.len(),
                "input_dim": ds.input_dim,
            });
            write(&meta_path(&out), serde_json::to_string_pretty(&meta)?)?;
            println!("{hash}");
        }
        Command::Pretrain {
            data,
            label_key,
            config,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(key) = label_key {
                let width = match cfg.train.label_key {
                    LabelKey::Bcva { bin_width } | LabelKey::Cst { bin_width } => bin_width,
                    _ => None,
                };
                cfg.train.label_key = key.with_bin_width(width);
            }
            let (ds, data_hash) = load_split(&data, &cfg)?;
            let indices = ds.pretrain_indices(cfg.train.pool)?;
            let outcome = trainloop::pretrain_fresh(&ds, &indices, &cfg.train, &cfg.hash())?;
            let mut record = outcome.record;
            record.dataset_hash = Some(data_hash);
            create_dir(&out)?;
            outcome.checkpoint.write(&out.join("pretrain.ckpt"))?;
            write(&out.join("run.json"), record.to_json())?;
            eprintln!(
                "pretrained on {} samples, final loss {:.4}",
                indices.len(),
                record.epoch_losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Probe {
            checkpoint,
            data,
            config,
            slots,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = slots {
                cfg.probe.slots = parse_slots(&s)?;
            }
            let (ds, data_hash) = load_split(&data, &cfg)?;
            let (enc, _) = load_networks(&checkpoint, &ds)?;
            let train = ds.indices_in(Split::ProbeTrain)?;
            let outcome = trainloop::probe(&ds, &train, &enc, &cfg.probe, seed, &cfg.hash())?;
            let mut record = outcome.record;
            record.dataset_hash = Some(data_hash);
            create_dir(&out)?;
            outcome.checkpoint.write(&out.join("probe.ckpt"))?;
            write(&out.join("probe_run.json"), record.to_json())?;
        }
        Command::Evaluate {
            checkpoint,
            data,
            config,
            probe,
            slots,
            seeds,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = slots {
                cfg.probe.slots = parse_slots(&s)?;
            }
            if let Some(k) = seeds {
                cfg.seeds = k;
            }
            cfg.validate()?;
            let (ds, _) = load_split(&data, &cfg)?;
            let (enc, _) = load_networks(&checkpoint, &ds)?;
            let hash = cfg.hash();
            let runs: Vec<SeedRun> = match probe {
                Some(path) => {
                    let ckpt = Checkpoint::read(&path)?;
                    if ckpt.header.stage != Stage::Probe {
                        return Err(Error::Contract(format!(
                            "{} is not a probe checkpoint",
                            path.display()
                        )));
                    }
                    let lp = ckpt.linear_probe()?;
                    if lp.repr_dim() != enc.repr_dim() {
                        return Err(Error::Dimension {
                            op: "probe",
                            detail: format!(
                                "probe expects repr_dim {}, encoder produces repr_dim {}",
                                lp.repr_dim(),
                                enc.repr_dim()
                            ),
                        });
                    }
                    let tests = trainloop::build_test_sets(
                        &ds,
                        &ckpt.header.slots,
                        cfg.eval.n_per_class,
                        ckpt.header.seed,
                    )?;
                    let (slots, averages) =
                        trainloop::evaluate(&ds, &enc, &lp, &ckpt.header.slots, &tests)?;
                    vec![SeedRun {
                        seed: ckpt.header.seed,
                        slots,
                        averages,
                    }]
                }
                None => (0..cfg.seeds as u64)
                    .map(|i| {
                        let seed = cfg.train.seed.wrapping_add(i);
                        trainloop::probe_and_evaluate(&ds, &enc, &cfg.probe, &cfg.eval, seed, &hash)
                            .map(|(_, run)| run)
                    })
                    .collect::<Result<_, _>>()?,
            };
            let mut report = MetricsReport::from_runs(runs)?;
            report.config_hash = Some(hash);
            match out {
                Some(path) => write(&path, report.to_json())?,
                None => println!("{}", report.to_json()),
            }
        }
        Command::TheorySweep { config, out, seed } => {
            let cfg = load_config(config.as_deref())?;
            let rows = theory::sweep_surrogate_fidelity(&cfg.theory, seed)?;
            write(&out, theory::sweep_csv(&rows))?;
            write(
                &meta_path(&out),
                serde_json::to_string_pretty(&json!({ "config_hash": cfg.hash(), "seed": seed }))?,
            )?;
        }
        Command::ExportEmbeddings {
            checkpoint,
            data,
            config,
            space,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (ds, data_hash) = load_split(&data, &cfg)?;
            let (enc, head) = load_networks(&checkpoint, &ds)?;
            let test = ds.indices_in(Split::Test)?;
            let mut emb = enc.encode_values(&ds.feature_matrix(&test)?)?;
            if let Space::Proj = space {
                emb = head.project_values(&emb)?;
            }
            let d = emb.cols();
            let mut csv = (0..d)
                .map(|j| format!("e{j}"))
                .chain((0..NUM_BIOMARKERS).map(|j| format!("b{j}")))
                .collect::<Vec<_>>()
                .join(",");
            csv.push('\n');
            for (r, &i) in test.iter().enumerate() {
                let mut cells: Vec<String> = emb.row(r).iter().map(|v| v.to_string()).collect();
                cells.extend(ds.samples[i].biomarkers.iter().map(|b| match b {
                    Some(true) => "1".to_string(),
                    Some(false) => "0".to_string(),
                    None => "-1".to_string(),
                }));
                csv.push_str(&cells.join(","));
                csv.push('\n');
            }
            write(&out, csv)?;
            write(
                &meta_path(&out),
                serde_json::to_string_pretty(&json!({
                    "config_hash": cfg.hash(),
                    "dataset_hash": data_hash,
                    "checkpoint_config_hash": Checkpoint::read(&checkpoint)?.header.config_hash,
                }))?,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
