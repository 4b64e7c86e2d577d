//! The `refnet` command line.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use refnet_core::evaluator::{evaluate_predictions, rows_to_csv, rows_to_table, sweep_beta};
use refnet_core::phantom::{generate_phantom, CohortConfig, Phantom, PhantomSpec};
use refnet_core::preprocess::{prepare_input, FusionConfig};
use refnet_core::refnet::Model;
use refnet_core::registration::{change_map, register_volumes};
use refnet_core::trainer::{train, LabeledVolume};
use refnet_core::volume::{
    codes, load_labels, load_probabilities, load_scan, save_volume, LabelVolume, Volume,
};
use refnet_core::volumetry::{fluid_report, Connectivity};
use refnet_core::Error;

use crate::config::RunConfig;
use crate::store::Store;

pub type CliResult<T = ()> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser, Debug)]
#[command(name = "refnet", version, about = "Retinal fluid segmentation on OCT/OCTA volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Conn {
    #[value(name = "6")]
    Six,
    #[value(name = "26")]
    TwentySix,
}

#[derive(clap::Args, Debug, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples_per_epoch: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a phantom (or a cohort of them) into RFNV1 volumes.
    Synth {
        /// PhantomSpec JSON; writes oct.rfnv, octa.rfnv and labels.rfnv into --out.
        #[arg(long, conflicts_with = "cohort", required_unless_present = "cohort")]
        spec: Option<PathBuf>,
        /// CohortConfig JSON; writes one subdirectory per member.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Smooth and normalize an OCT volume, optionally fusing OCTA.
    Preprocess {
        #[arg(long)]
        oct: PathBuf,
        #[arg(long, requires = "beta")]
        octa: Option<PathBuf>,
        #[arg(long, requires = "octa")]
        beta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a directory of labeled volumes.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Epoch history as CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, conflicts_with = "oct_only")]
        beta: Option<f64>,
        #[arg(long)]
        oct_only: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Segment one volume; writes probabilities to --out and arg-max labels
    /// next to it as `<stem>.labels.rfnv`.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        volume: PathBuf,
        /// Defaults to `octa.rfnv` beside the volume when --beta is set.
        #[arg(long)]
        octa: Option<PathBuf>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Score probability volumes against reference labels, matched by volume id.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        truth: Vec<PathBuf>,
        #[arg(long, default_value = "model")]
        label: String,
        /// Write the metric row as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train OCT-only and one fused model per beta on one split.
    SweepBeta {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        betas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Fluid volume, components, en-face area and ETDRS thickness.
    Volume {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "6")]
        connectivity: Conn,
    },
    /// Align a follow-up visit to a baseline and map fluid change.
    Register {
        /// Directory with octa.rfnv and labels.rfnv.
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        followup: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve volumes and label resources over HTTP.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn mkdir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write_phantom(p: &Phantom, dir: &Path) -> CliResult {
    mkdir(dir)?;
    save_volume(&Volume::Scan(p.oct.clone()), dir.join("oct.rfnv"))?;
    save_volume(&Volume::Scan(p.octa.clone()), dir.join("octa.rfnv"))?;
    save_volume(&Volume::Label(p.truth.clone()), dir.join("labels.rfnv"))?;
    Ok(())
}

fn load_labeled_dir(dir: &Path) -> CliResult<LabeledVolume> {
    let octa = dir.join("octa.rfnv");
    Ok(LabeledVolume {
        oct: load_scan(dir.join("oct.rfnv"))?,
        octa: if octa.is_file() { Some(load_scan(octa)?) } else { None },
        labels: load_labels(dir.join("labels.rfnv"))?,
    })
}

/// Every directory under `root` (or `root` itself) holding oct.rfnv and
/// labels.rfnv, in name order.
pub fn load_dataset(root: &Path) -> CliResult<Vec<LabeledVolume>> {
    if root.join("labels.rfnv").is_file() {
        return Ok(vec![load_labeled_dir(root)?]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("oct.rfnv").is_file() && p.join("labels.rfnv").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(format!("no labeled volumes under {}", root.display()).into());
    }
    dirs.iter().map(|d| load_labeled_dir(d)).collect()
}

fn run_config(path: Option<&Path>, beta: Option<f64>, oct_only: bool, o: &TrainOverrides) -> CliResult<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(b) = beta {
        cfg.fusion.beta = Some(b);
    }
    if oct_only {
        cfg.fusion.beta = None;
    }
    let t = &mut cfg.train;
    if let Some(v) = o.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.lr {
        t.initial_lr = v;
    }
    if let Some(v) = o.seed {
        t.seed = v;
    }
    if let Some(v) = o.samples_per_epoch {
        t.samples_per_epoch = Some(v);
    }
    if let Some(v) = o.base_channels {
        cfg.model.base_channels = v;
    }
    if let Some(v) = o.levels {
        cfg.model.levels = v;
    }
    Ok(cfg)
}

fn fusion(beta: Option<f64>) -> CliResult<Option<FusionConfig>> {
    Ok(beta.map(FusionConfig::new).transpose()?)
}

fn fluid_only(labels: &LabelVolume) -> LabelVolume {
    labels.with_codes(
        labels
            .codes
            .iter()
            .map(|&c| if c == codes::FLUID { codes::FLUID } else { codes::BACKGROUND })
            .collect(),
        labels.provenance,
    )
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth { spec, cohort, out } => {
            if let Some(spec) = spec {
                let spec: PhantomSpec = read_json(&spec)?;
                write_phantom(&generate_phantom(&spec)?, &out)?;
            } else if let Some(cohort) = cohort {
                let cohort: CohortConfig = read_json(&cohort)?;
                for spec in cohort.specs() {
                    let p = generate_phantom(&spec)?;
                    write_phantom(&p, &out.join(&p.oct.volume_id))?;
                }
            }
        }
        Command::Preprocess { oct, octa, beta, out } => {
            let oct = load_scan(oct)?;
            let octa = octa.map(load_scan).transpose()?;
            let v = prepare_input(&oct, octa.as_ref(), fusion(beta)?)?;
            save_volume(&Volume::Scan(v), out)?;
        }
        Command::Train {
            data,
            config,
            out,
            history,
            beta,
            oct_only,
            overrides,
        } => {
            let cfg = run_config(config.as_deref(), beta, oct_only, &overrides)?;
            let tc = cfg.train_config()?;
            let dataset = load_dataset(&data)?;
            let (model, h) = train(&dataset, &tc, &cfg.model)?;
            model.save(&out)?;
            if let Some(p) = history {
                write(&p, h.to_csv())?;
            }
        }
        Command::Infer {
            model,
            volume,
            octa,
            beta,
            out,
            batch,
        } => {
            let model = Model::load(model)?;
            let oct = load_scan(&volume)?;
            let fusion = fusion(beta)?;
            let octa = match (octa, fusion) {
                (Some(p), _) => Some(load_scan(p)?),
                (None, Some(_)) => {
                    let p = volume.with_file_name("octa.rfnv");
                    Some(load_scan(&p).map_err(|e| format!("--beta needs an OCTA volume: {e}"))?)
                }
                (None, None) => None,
            };
            let input = prepare_input(&oct, octa.as_ref(), fusion)?;
            let probs = model.predict_volume(&input, batch.max(1))?;
            let labels = probs.argmax();
            save_volume(&Volume::Probability(probs), &out)?;
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("pred");
            save_volume(&Volume::Label(labels), out.with_file_name(format!("{stem}.labels.rfnv")))?;
        }
        Command::Eval { pred, truth, label, csv } => {
            let truth: Vec<LabelVolume> = truth.iter().map(load_labels).collect::<Result<_, _>>()?;
            let mut pairs = Vec::with_capacity(pred.len());
            for p in &pred {
                let p = load_probabilities(p)?;
                let t = truth
                    .iter()
                    .find(|t| t.volume_id == p.volume_id)
                    .ok_or_else(|| format!("no reference labels for volume {}", p.volume_id))?;
                pairs.push((p, t.clone()));
            }
            let (row, _) = evaluate_predictions(&label, &pairs)?;
            let rows = [row];
            print!("{}", rows_to_table(&rows));
            if let Some(p) = csv {
                write(&p, rows_to_csv(&rows))?;
            }
        }
        Command::SweepBeta {
            data,
            config,
            betas,
            out,
            overrides,
        } => {
            let cfg = run_config(config.as_deref(), None, false, &overrides)?;
            let tc = cfg.train_config()?;
            let dataset = load_dataset(&data)?;
            let outcome = sweep_beta(&dataset, &betas, &tc, &cfg.model)?;
            mkdir(&out)?;
            write(&out.join("sweep.csv"), rows_to_csv(&outcome.rows))?;
            let table = rows_to_table(&outcome.rows);
            write(&out.join("sweep.txt"), &table)?;
            let split = serde_json::json!({"train": outcome.train_ids, "test": outcome.test_ids});
            write(&out.join("split.json"), serde_json::to_vec_pretty(&split)?)?;
            for (row, e) in outcome.rows.iter().zip(&outcome.entries) {
                e.model.save(out.join(format!("{}.ckpt", row.label)))?;
                write(&out.join(format!("{}.history.csv", row.label)), e.history.to_csv())?;
            }
            print!("{table}");
        }
        Command::Volume {
            labels,
            out,
            connectivity,
        } => {
            let labels = load_labels(labels)?;
            let conn = match connectivity {
                Conn::Six => Connectivity::Six,
                Conn::TwentySix => Connectivity::TwentySix,
            };
            let report = fluid_report(&labels, conn)?;
            mkdir(&out)?;
            write(&out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
            if let Some(e) = &report.enface {
                write(&out.join("enface.png"), e.to_png()?)?;
            }
            if let Some(t) = &report.thickness {
                write(&out.join("thickness.png"), t.to_png()?)?;
            }
            save_volume(&Volume::Label(fluid_only(&labels)), out.join("fluid.rfnv"))?;
        }
        Command::Register { baseline, followup, out } => {
            let b_octa = load_scan(baseline.join("octa.rfnv"))?;
            let b_labels = load_labels(baseline.join("labels.rfnv"))?;
            let f_octa = load_scan(followup.join("octa.rfnv"))?;
            let f_labels = load_labels(followup.join("labels.rfnv"))?;
            let reg = register_volumes(&b_octa, &b_labels, &f_octa, &f_labels)?;
            let change = change_map(&b_labels, &reg.labels)?;
            mkdir(&out)?;
            write(&out.join("registration.json"), serde_json::to_vec_pretty(&reg.result)?)?;
            for (name, mask) in [("gained", &change.gained), ("lost", &change.lost), ("stable", &change.stable)] {
                let id = format!("{}-{name}", b_labels.volume_id);
                save_volume(
                    &Volume::Label(change.mask_volume(mask, &b_labels, &id)),
                    out.join(format!("{name}.rfnv")),
                )?;
            }
            write(&out.join("summary.json"), serde_json::to_vec_pretty(&change)?)?;
        }
        Command::Serve { data, addr } => {
            let store = Arc::new(Store::open(&data)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                eprintln!("serving {} volumes on http://{addr}", store.list().len());
                axum::serve(listener, crate::api::router(store)).await
            })?;
        }
    }
    Ok(())
}
