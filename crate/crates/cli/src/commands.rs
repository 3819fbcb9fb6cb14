//! Command implementations.

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use anyhow::Context;
use log::info;
use tkg_core::data::{gen_synthetic_tkg, load_dataset_dir, write_dataset_dir, Split, TkgDataset};
use tkg_core::eval::{evaluate_split, FilterMode};
use tkg_core::gradsuite::{run_grad_suite, GradSuiteOptions};
use tkg_core::training::{Checkpoint, TrainConfig, Trainer};
use tkg_core::TkgError;

use crate::manifest::{DatasetInfo, RunManifest, RunStatus};
use crate::{
    AblateTarget, CliError, CliResult, ConfigArgs, EvalArgs, FilterArg, GradcheckArgs, SplitArg, SweepArgs,
    SweepParam, SynthArgs, TrainArgs,
};

/// Name that selects the built-in synthetic dataset instead of a directory.
pub const SYNTH_SOURCE: &str = "synth";
/// Entities, raw relations, period, timestamps and seed of that dataset.
pub const SYNTH_DEFAULT: (usize, usize, usize, usize, u64) = (20, 2, 2, 200, 1);

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const SWEEP_FILE: &str = "sweep.csv";

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Config problems are usage errors; anything else keeps exit status 1.
fn config_error(e: TkgError) -> CliError {
    match e {
        TkgError::Config(_) | TkgError::Parse { .. } => CliError::Usage(e.to_string()),
        other => other.into(),
    }
}

impl ConfigArgs {
    /// Explicit command-line settings as `(key, value)` pairs.
    fn flag_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        push("data", self.data.clone());
        push("d", self.d.map(|v| v.to_string()));
        push("m", self.m.map(|v| v.to_string()));
        push("omega", self.omega.map(|v| v.to_string()));
        push("heads", self.heads.map(|v| v.to_string()));
        push("k", self.k.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| format!("{v:?}")));
        push("max_epochs", self.epochs.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("patience", self.patience.map(|v| v.to_string()));
        for a in &self.ablate {
            let keys: &[&'static str] = match a {
                AblateTarget::MultiSpan => &["multi_span"],
                AblateTarget::Disentangle => &["disentangle"],
                AblateTarget::Both => &["multi_span", "disentangle"],
                AblateTarget::VirtualGraph => &["virtual_graph"],
            };
            for k in keys {
                out.push((k, "off".into()));
            }
        }
        if self.no_virtual_graph {
            out.push(("virtual_graph", "off".into()));
        }
        out
    }

    fn apply_flags(&self, cfg: &mut TrainConfig) -> CliResult<()> {
        for (k, v) in self.flag_pairs() {
            cfg.set(k, &v).map_err(config_error)?;
        }
        cfg.validate().map_err(config_error)
    }

    /// Preset, then config file, then flags; validated.
    pub fn resolve(&self) -> CliResult<TrainConfig> {
        let mut cfg = match &self.preset {
            Some(name) => TrainConfig::preset(name).map_err(config_error)?,
            None => TrainConfig::default(),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        }
        self.apply_flags(&mut cfg)?;
        Ok(cfg)
    }
}

fn data_source(cfg: &TrainConfig) -> CliResult<String> {
    cfg.data
        .as_ref()
        .map(|p| p.display().to_string())
        .ok_or_else(|| usage("no dataset: pass --data or set `data` in the config file"))
}

pub fn load_data(source: &str) -> CliResult<(TkgDataset, DatasetInfo)> {
    let ds = if source == SYNTH_SOURCE {
        let (e, r, p, t, seed) = SYNTH_DEFAULT;
        gen_synthetic_tkg(e, r, p, t, seed)?
    } else {
        load_dataset_dir(Path::new(source)).with_context(|| format!("loading dataset {source}"))?
    };
    let info = DatasetInfo::new(source, &ds);
    Ok((ds, info))
}

/// Records the outcome of `body` in the manifest, then returns it.
fn finish<T>(manifest: &mut RunManifest, body: CliResult<T>) -> CliResult<T> {
    let status = if body.is_ok() { RunStatus::Ok } else { RunStatus::Failed };
    manifest.finish(status)?;
    body
}

pub fn train(args: TrainArgs) -> CliResult<()> {
    let resumed = match &args.resume {
        Some(path) => {
            if args.config.preset.is_some() || args.config.config.is_some() {
                return Err(usage("--preset and --config cannot be combined with --resume"));
            }
            Some(Checkpoint::load(path)?)
        }
        None => None,
    };
    let cfg = match &resumed {
        Some(ckpt) => {
            let mut cfg = ckpt.config.clone();
            args.config.apply_flags(&mut cfg)?;
            cfg
        }
        None => args.config.resolve()?,
    };
    let source = data_source(&cfg)?;
    let ckpt_path = cfg.checkpoint.clone().unwrap_or_else(|| args.out.join(CHECKPOINT_FILE));
    let log_path = args.out.join(LOG_FILE);

    let mut manifest = RunManifest::begin("train", &args.out)?.with_config(&cfg);
    manifest.output("log", &log_path);
    manifest.output("checkpoint", &ckpt_path);
    manifest.write()?;
    if args.dry_run {
        manifest.finish(RunStatus::DryRun)?;
        return Ok(());
    }
    let body = (|| -> CliResult<()> {
        let (ds, info) = load_data(&source)?;
        manifest.dataset = Some(info);
        manifest.write()?;
        let mut trainer = match resumed {
            Some(mut ckpt) => {
                ckpt.config = cfg.clone();
                Trainer::from_checkpoint(&ckpt, &ds)?
            }
            None => Trainer::new(cfg.clone(), &ds).map_err(config_error)?,
        };
        let mut log = if args.resume.is_some() {
            OpenOptions::new().create(true).append(true).open(&log_path)
        } else {
            File::create(&log_path)
        }
        .with_context(|| format!("opening {}", log_path.display()))?;
        let records = trainer.run(&ds, |rec, stats, tr| {
            let line = serde_json::to_string(rec).expect("records serialise");
            writeln!(log, "{line}").map_err(|e| TkgError::Io {
                path: log_path.clone(),
                source: e,
            })?;
            tr.checkpoint().save(&ckpt_path)?;
            info!(
                "epoch {} l_pred {:.6} l_dis {:.6} valid_mrr {} ({:.1?})",
                rec.epoch,
                rec.l_pred,
                rec.l_dis,
                rec.valid_mrr.map_or("-".into(), |v| format!("{v:.4}")),
                stats.wall_time
            );
            Ok(())
        })?;
        info!(
            "trained {} epochs (total {}), best valid MRR {:?}",
            records.len(),
            trainer.epoch,
            trainer.best_valid_mrr
        );
        Ok(())
    })();
    finish(&mut manifest, body)
}

pub fn eval(args: EvalArgs) -> CliResult<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    if args.no_virtual_graph {
        cfg.ablation.virtual_graph = false;
    }
    if let Some(d) = &args.data {
        cfg.data = Some(d.into());
    }
    let source = data_source(&cfg)?;
    let (split, filter) = match (args.split, args.filter) {
        (SplitArg::Valid, f) => (Split::Valid, f),
        (SplitArg::Test, f) => (Split::Test, f),
    };
    let filter = match filter {
        FilterArg::TimeAware => FilterMode::TimeAware,
        FilterArg::Static => FilterMode::Static,
    };
    let metrics_path = args.out.join(METRICS_FILE);
    let csv_path = args.out.join(METRICS_CSV_FILE);

    let mut manifest = RunManifest::begin("eval", &args.out)?.with_config(&cfg);
    manifest.config.insert("split".into(), format!("{split:?}").to_lowercase());
    manifest.config.insert("filter".into(), format!("{filter:?}"));
    manifest.output("checkpoint", &args.checkpoint);
    manifest.output("metrics", &metrics_path);
    if args.csv {
        manifest.output("metrics_csv", &csv_path);
    }
    manifest.write()?;
    let body = (|| -> CliResult<()> {
        let (ds, info) = load_data(&source)?;
        manifest.dataset = Some(info);
        manifest.write()?;
        if (ckpt.num_entities, ckpt.num_raw_relations) != (ds.num_entities, ds.num_raw_relations) {
            return Err(anyhow::anyhow!(
                "checkpoint expects {} entities and {} relations, dataset has {} and {}",
                ckpt.num_entities,
                ckpt.num_raw_relations,
                ds.num_entities,
                ds.num_raw_relations
            )
            .into());
        }
        let model = ckpt.restore_model(&cfg)?;
        let report = evaluate_split(&model, &ds, split, cfg.history, filter)?;
        std::fs::write(&metrics_path, report.to_json() + "\n")?;
        if args.csv {
            std::fs::write(&csv_path, report.to_csv())?;
        }
        println!(
            "mrr {:.6} hits@1 {:.6} hits@3 {:.6} hits@10 {:.6} queries {}",
            report.mrr,
            report.hits_at(1),
            report.hits_at(3),
            report.hits_at(10),
            report.num_queries
        );
        Ok(())
    })();
    finish(&mut manifest, body)
}

pub fn gradcheck(args: GradcheckArgs) -> CliResult<()> {
    if !(args.eps > 0.0 && args.eps.is_finite()) {
        return Err(usage("--eps must be a positive number"));
    }
    let report_path = args.out.join(GRADCHECK_FILE);
    let mut manifest = RunManifest::begin("gradcheck", &args.out)?;
    manifest.config.insert("eps".into(), format!("{:?}", args.eps));
    manifest.config.insert("tolerance".into(), format!("{:?}", args.tolerance));
    manifest.seed = Some(args.seed);
    manifest.output("report", &report_path);
    manifest.write()?;
    let body = (|| -> CliResult<()> {
        let opts = GradSuiteOptions {
            eps: args.eps,
            tolerance: args.tolerance,
            seed: args.seed,
            inject_sign_bug: args.inject_sign_bug.clone(),
        };
        let report = run_grad_suite(&opts).map_err(config_error)?;
        for c in &report.components {
            let mark = if c.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
            println!("{mark:4} {:40} {:.3e}", c.name, c.max_rel_error);
        }
        println!(
            "max relative error {:.3e} over {} coordinates in {:.1?}",
            report.max_rel_error, report.coordinates, report.elapsed
        );
        std::fs::write(&report_path, serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n")?;
        let failing: Vec<&str> = report.failing().iter().map(|c| c.name.as_str()).collect();
        if !failing.is_empty() {
            return Err(anyhow::anyhow!(
                "gradient check above tolerance {:e} for: {}",
                report.tolerance,
                failing.join(", ")
            )
            .into());
        }
        Ok(())
    })();
    finish(&mut manifest, body)
}

pub fn synth(args: SynthArgs) -> CliResult<()> {
    let ds = gen_synthetic_tkg(args.entities, args.relations, args.period, args.timesteps, args.seed)
        .map_err(|e| usage(e.to_string()))?;
    let mut manifest = RunManifest::begin("synth", &args.out)?;
    for (k, v) in [
        ("entities", args.entities),
        ("relations", args.relations),
        ("period", args.period),
        ("timesteps", args.timesteps),
    ] {
        manifest.config.insert(k.into(), v.to_string());
    }
    manifest.seed = Some(args.seed);
    manifest.dataset = Some(DatasetInfo::new(args.out.display().to_string(), &ds));
    manifest.output("dataset", &args.out);
    manifest.write()?;
    let body = write_dataset_dir(&ds, &args.out).map_err(CliError::from);
    finish(&mut manifest, body)
}

pub fn sweep(args: SweepArgs) -> CliResult<()> {
    let base = args.config.resolve()?;
    let key = match args.param {
        SweepParam::M => "m",
        SweepParam::Omega => "omega",
        SweepParam::K => "k",
    };
    if args.param == SweepParam::K && !base.ablation.virtual_graph {
        return Err(usage("sweeping k has no effect without the virtual graph"));
    }
    if args.values.is_empty() {
        return Err(usage("--values must list at least one grid point"));
    }
    let points: Vec<(usize, TrainConfig)> = args
        .values
        .iter()
        .map(|&v| {
            let mut cfg = base.clone();
            cfg.set(key, &v.to_string()).map_err(config_error)?;
            cfg.validate().map_err(config_error)?;
            Ok((v, cfg))
        })
        .collect::<CliResult<_>>()?;
    let source = data_source(&base)?;
    let csv_path = args.out.join(SWEEP_FILE);

    let mut manifest = RunManifest::begin("sweep", &args.out)?.with_config(&base);
    manifest.config.insert("sweep.param".into(), key.into());
    manifest.config.insert(
        "sweep.values".into(),
        args.values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
    );
    manifest.output("csv", &csv_path);
    manifest.write()?;
    let body = (|| -> CliResult<()> {
        let (ds, info) = load_data(&source)?;
        manifest.dataset = Some(info);
        manifest.write()?;
        let mut csv = File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
        writeln!(csv, "param,value,mrr,hits1,hits3,hits10")?;
        for (value, cfg) in points {
            let mut trainer = Trainer::new(cfg.clone(), &ds)?;
            trainer.run(&ds, |_, _, _| Ok(()))?;
            let r = evaluate_split(&trainer.model, &ds, Split::Test, cfg.history, FilterMode::TimeAware)?;
            let row = format!(
                "{key},{value},{},{},{},{}",
                r.mrr,
                r.hits_at(1),
                r.hits_at(3),
                r.hits_at(10)
            );
            info!("{row}");
            writeln!(csv, "{row}")?;
        }
        Ok(())
    })();
    finish(&mut manifest, body)
}
