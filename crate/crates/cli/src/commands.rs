use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dlo_core::env::{execute_episode, oracle_action, oracle_scene, EpisodeOutcome};
use dlo_core::estimator::{
    evaluation_samples, matched_distances, report_row, train_estimator, write_report_csv, EstimatorKind, EstimatorSpec,
    FlexEstimator, FlexReportRow, Method,
};
use dlo_core::flexibility::{generate_flex_dataset, linear_sweep, DatasetMeta, DatasetSpec, FlexDataset};
use dlo_core::neural::{write_loss_csv, Checkpoint};
use dlo_core::policy::{
    aggregate, band_rows, evaluate, sac_train_with, table_row, write_band_csv, write_curve_csv, write_records_jsonl,
    write_table_csv, Agent, Bandit, EvalSpec, FMode, InsertionBandit, Metrics, ReplayBuffer, Sac, SacAgent, SacConfig,
    TableRow, VisualBaseline,
};
use dlo_core::seed;
use log::info;

use crate::config::{require_file, ExperimentConfig, Regime};
use crate::Failure;

/// Stage seeds are named sub-streams of the root seed.
fn stage_seed(cfg: &ExperimentConfig, stage: &str, index: u64) -> u64 {
    seed::derive(cfg.seed, stage, index)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(ckpt.to_json()?.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Checkpoint::from_json(&text).with_context(|| format!("parsing checkpoint {}", path.display()))
}

fn dataset_spec(cfg: &ExperimentConfig) -> DatasetSpec {
    let d = &cfg.dataset;
    DatasetSpec {
        val_fraction: d.val_fraction,
        test_fraction: d.test_fraction,
        rig: cfg.env.rig.clone(),
        ..DatasetSpec::new(
            linear_sweep(d.sweep_min, d.sweep_max, d.sweep_count),
            d.per_sweep_augments,
            stage_seed(cfg, "flex-dataset", 0),
        )
    }
}

pub fn gen_flex_data(cfg: &ExperimentConfig, dry_run: bool) -> Result<(), Failure> {
    let spec = dataset_spec(cfg);
    spec.validate().map_err(Failure::validation)?;
    let path = cfg.dataset_path();
    if dry_run {
        println!("dry run: would write {} sweep values × {} augments to {}", spec.sweep.len(), spec.per_sweep_augments, path.display());
        return Ok(());
    }
    let ds = generate_flex_dataset(&spec).map_err(Failure::runtime)?;
    let run = || -> Result<()> {
        let mut w = create(&path)?;
        ds.write_jsonl(&mut w)?;
        w.flush()?;
        write_json(&cfg.dataset_meta_path(), &ds.meta)
    };
    run().map_err(Failure::Runtime)?;
    let augmented = ds.samples.iter().filter(|s| s.augmented).count();
    println!(
        "sweep {:.3}..{:.3} ({} values, {} skipped): {} samples, {} clean, {} augmented -> {}",
        cfg.dataset.sweep_min,
        cfg.dataset.sweep_max,
        spec.sweep.len(),
        ds.meta.skipped.len(),
        ds.samples.len(),
        ds.samples.len() - augmented,
        augmented,
        path.display()
    );
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<FlexDataset> {
    let meta_path = cfg.dataset_meta_path();
    let meta: DatasetMeta = serde_json::from_reader(BufReader::new(
        File::open(&meta_path).with_context(|| format!("opening {}", meta_path.display()))?,
    ))?;
    let path = cfg.dataset_path();
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    Ok(FlexDataset::read_jsonl(BufReader::new(file), meta)?)
}

fn estimator_specs(cfg: &ExperimentConfig) -> Vec<(&'static str, &'static str, EstimatorSpec)> {
    let e = &cfg.estimator;
    let train = dlo_core::neural::TrainConfig { seed: stage_seed(cfg, "flex-train", 0), ..e.train.clone() };
    let gnn = |augmented| EstimatorSpec { hidden: e.gnn_hidden, ..EstimatorSpec::gnn(augmented, train.clone()) };
    let mut specs = Vec::new();
    if e.baselines {
        specs.push(("MLP", "mlp", EstimatorSpec { hidden: e.mlp_hidden, ..EstimatorSpec::mlp(train.clone()) }));
        specs.push(("GNN w/o aug", "gnn_noaug", gnn(false)));
    }
    specs.push(("GNN", "gnn", gnn(true)));
    specs
}

pub fn train_flex(cfg: &ExperimentConfig, dry_run: bool) -> Result<(), Failure> {
    require_file(&cfg.dataset_path(), "dataset").map_err(Failure::Validation)?;
    require_file(&cfg.dataset_meta_path(), "dataset metadata").map_err(Failure::Validation)?;
    let specs = estimator_specs(cfg);
    if dry_run {
        let names: Vec<&str> = specs.iter().map(|s| s.0).collect();
        println!("dry run: would train {} on {}", names.join(", "), cfg.dataset_path().display());
        return Ok(());
    }
    let run = || -> Result<()> {
        let ds = load_dataset(cfg)?;
        let lib = ds.library();
        let evals = evaluation_samples(&ds);
        let mut rows = vec![report_row("Analytic", &matched_distances(&Method::Analytic, &evals, &lib)?)];
        for (name, file, spec) in &specs {
            info!("training {name}");
            let (est, curve) = train_estimator(spec, &ds)?;
            write_checkpoint(&cfg.out_dir.join(format!("estimator_{file}.json")), &est.to_checkpoint())?;
            let mut w = create(&cfg.out_dir.join(format!("loss_{file}.csv")))?;
            write_loss_csv(&curve, &mut w)?;
            w.flush()?;
            rows.push(report_row(name, &matched_distances(&Method::Learned(&est), &evals, &lib)?));
        }
        emit_report(&cfg.out_dir.join("flex_report.csv"), &rows)
    };
    run().map_err(Failure::Runtime)
}

fn emit_report(path: &Path, rows: &[FlexReportRow]) -> Result<()> {
    let mut w = create(path)?;
    write_report_csv(rows, &mut w)?;
    w.flush()?;
    for r in rows {
        println!("{:<12} d_pp {:7.2} ± {:6.2} mm  (n = {})", r.method, r.mean_mm, r.std_mm, r.count);
    }
    println!("report -> {}", path.display());
    Ok(())
}

fn load_estimator(path: &Path) -> Result<FlexEstimator> {
    Ok(FlexEstimator::from_checkpoint(&read_checkpoint(path)?)?)
}

pub fn eval_flex(cfg: &ExperimentConfig, dry_run: bool) -> Result<(), Failure> {
    require_file(&cfg.dataset_path(), "dataset").map_err(Failure::Validation)?;
    require_file(&cfg.estimator_path(), "estimator checkpoint").map_err(Failure::Validation)?;
    if dry_run {
        println!("dry run: would evaluate {} on {}", cfg.estimator_path().display(), cfg.dataset_path().display());
        return Ok(());
    }
    let run = || -> Result<()> {
        let ds = load_dataset(cfg)?;
        let est = load_estimator(&cfg.estimator_path())?;
        let lib = ds.library();
        let evals = evaluation_samples(&ds);
        let name = match est.kind() {
            EstimatorKind::Gnn => "GNN",
            EstimatorKind::Mlp => "MLP",
        };
        let rows = vec![
            report_row("Analytic", &matched_distances(&Method::Analytic, &evals, &lib)?),
            report_row(name, &matched_distances(&Method::Learned(&est), &evals, &lib)?),
        ];
        emit_report(&cfg.out_dir.join("flex_eval.csv"), &rows)
    };
    run().map_err(Failure::Runtime)
}

fn f_tag(provide_f: bool) -> &'static str {
    if provide_f {
        "f"
    } else {
        "nof"
    }
}

pub fn checkpoint_name(regime: Regime, provide_f: bool, s: usize) -> String {
    format!("sac_{}_{}_s{s}.json", regime.name(), f_tag(provide_f))
}

fn needs_estimator(cfg: &ExperimentConfig, mode: FMode) -> Result<Option<FlexEstimator>, Failure> {
    if mode != FMode::Estimated {
        return Ok(None);
    }
    let path = cfg.estimator_path();
    require_file(&path, "estimator checkpoint").map_err(Failure::Validation)?;
    load_estimator(&path).map(Some).map_err(Failure::Runtime)
}

pub fn train_policy(cfg: &ExperimentConfig, dry_run: bool) -> Result<(), Failure> {
    let estimator = if dry_run {
        if cfg.train.f_mode == FMode::Estimated {
            require_file(&cfg.estimator_path(), "estimator checkpoint").map_err(Failure::Validation)?;
        }
        None
    } else {
        needs_estimator(cfg, cfg.train.f_mode)?
    };
    let ckpt_dir = cfg.checkpoint_dir();
    let mut jobs = Vec::new();
    for &regime in &cfg.train.regimes {
        for &provide_f in &cfg.train.provide_f {
            for s in 0..cfg.train.seeds {
                jobs.push((regime, provide_f, s));
            }
        }
    }
    if dry_run {
        println!("dry run: would train {} policies ({} episodes each) into {}", jobs.len(), cfg.sac.episodes, ckpt_dir.display());
        return Ok(());
    }
    for (regime, provide_f, s) in jobs {
        let run_seed = stage_seed(cfg, "policy", s as u64);
        let env = dlo_core::env::EnvConfig { provide_f, seed: run_seed, ..regime.apply(&cfg.env) };
        let bandit = InsertionBandit::new(env, cfg.train.f_mode, estimator.clone()).map_err(Failure::validation)?;
        let path = ckpt_dir.join(checkpoint_name(regime, provide_f, s));
        let mut sac = if cfg.train.resume && path.is_file() {
            let mut sac = Sac::from_checkpoint(&read_checkpoint(&path).map_err(Failure::Runtime)?).map_err(Failure::runtime)?;
            sac.config.episodes = cfg.sac.episodes;
            sac
        } else {
            let sc = SacConfig { seed: run_seed, ..cfg.sac.clone() };
            Sac::new(bandit.feature_dim(), bandit.action_dim(), sc).map_err(Failure::validation)?
        };
        let remaining = cfg.sac.episodes.saturating_sub(sac.episodes_done);
        info!("{}: {} episodes from {}", path.display(), remaining, sac.episodes_done);
        let mut buffer = ReplayBuffer::new(sac.config.replay_capacity);
        let trained = sac_train_with(&bandit, &mut sac, &mut buffer, remaining);
        let curve_path = ckpt_dir.join(format!("curve_{}_{}_s{s}.csv", regime.name(), f_tag(provide_f)));
        match trained {
            Ok(curve) => {
                write_checkpoint(&path, &sac.to_checkpoint()).map_err(Failure::Runtime)?;
                let mut w = create(&curve_path).map_err(Failure::Runtime)?;
                write_curve_csv(&curve, &mut w).map_err(Failure::runtime)?;
                w.flush().map_err(|e| Failure::Runtime(e.into()))?;
                let last = curve.last().map(|c| c.success_rate * 100.0).unwrap_or(f64::NAN);
                println!("{} ({} episodes, last eval success {last:.0}%)", path.display(), sac.episodes_done);
            }
            Err(e) => {
                let partial = path.with_extension("partial.json");
                write_checkpoint(&partial, &sac.to_checkpoint()).map_err(Failure::Runtime)?;
                return Err(Failure::Runtime(anyhow::Error::new(e).context(format!("training {} (partial state in {})", path.display(), partial.display()))));
            }
        }
    }
    Ok(())
}

struct MethodRun {
    name: &'static str,
    per_seed: Vec<Metrics>,
    records: Vec<dlo_core::env::EpisodeRecord>,
}

impl MethodRun {
    fn new(name: &'static str) -> Self {
        Self { name, per_seed: Vec::new(), records: Vec::new() }
    }
}

fn load_agent(path: &Path, label: &str, provide_f: bool) -> Result<SacAgent> {
    let sac = Sac::from_checkpoint(&read_checkpoint(path)?)?;
    Ok(SacAgent { label: label.into(), policy: sac.actor, provide_f })
}

pub fn eval_policy(cfg: &ExperimentConfig, dry_run: bool) -> Result<(), Failure> {
    let ckpt_dir = cfg.checkpoint_dir();
    let mut needed: Vec<PathBuf> = Vec::new();
    for &regime in &cfg.train.regimes {
        for provide_f in [true, false] {
            for s in 0..cfg.train.seeds {
                needed.push(ckpt_dir.join(checkpoint_name(regime, provide_f, s)));
            }
        }
    }
    for p in &needed {
        require_file(p, "policy checkpoint").map_err(Failure::Validation)?;
    }
    if cfg.eval.f_mode == FMode::Estimated {
        require_file(&cfg.estimator_path(), "estimator checkpoint").map_err(Failure::Validation)?;
    }
    if dry_run {
        println!("dry run: would evaluate {} checkpoints for {} episodes at radius {} m", needed.len(), cfg.eval.episodes, cfg.eval.radius);
        return Ok(());
    }
    let estimator = needs_estimator(cfg, cfg.eval.f_mode)?;
    let run = || -> Result<()> {
        let mut table: Vec<TableRow> = Vec::new();
        let mut bands = Vec::new();
        for &regime in &cfg.train.regimes {
            let env = regime.apply(&cfg.env);
            let mut methods = [
                MethodRun::new("Ours w/ f"),
                MethodRun::new("Ours w/o f"),
                MethodRun::new("VB w/ f"),
                MethodRun::new("VB w/o f"),
                MethodRun::new("Random f"),
            ];
            for s in 0..cfg.train.seeds {
                let with_f = load_agent(&ckpt_dir.join(checkpoint_name(regime, true, s)), "Ours w/ f", true)?;
                let without_f = load_agent(&ckpt_dir.join(checkpoint_name(regime, false, s)), "Ours w/o f", false)?;
                let spec = EvalSpec {
                    episodes: cfg.eval.episodes,
                    seed: stage_seed(cfg, "eval", s as u64),
                    f_mode: cfg.eval.f_mode,
                    radius: Some(cfg.eval.radius),
                };
                let random_spec = EvalSpec { f_mode: FMode::Random, ..spec.clone() };
                let vb_f = VisualBaseline::new(true);
                let vb = VisualBaseline::new(false);
                let runs: [(&dyn Agent, &EvalSpec); 5] =
                    [(&with_f, &spec), (&without_f, &spec), (&vb_f, &spec), (&vb, &spec), (&with_f, &random_spec)];
                for (m, (agent, sp)) in methods.iter_mut().zip(runs) {
                    let (metrics, records) = evaluate(agent, &env, sp, estimator.as_ref())?;
                    m.per_seed.push(metrics);
                    m.records.extend(records);
                }
            }
            for m in &methods {
                let row = table_row(m.name, regime.name(), &m.per_seed);
                println!(
                    "{:<5} {:<11} success {:5.1} ± {:4.1} %  avg dist {:6.2} ± {:4.2} cm",
                    row.regime, row.method, row.success_pct, row.success_std, row.avg_dist_cm, row.avg_dist_std_cm
                );
                table.push(row);
                let label = format!("{} ({})", m.name, regime.name());
                bands.extend(band_rows(&label, &aggregate(&m.records)));
                let mut w = create(&cfg.out_dir.join("episodes").join(format!(
                    "{}_{}.jsonl",
                    regime.name(),
                    m.name.replace([' ', '/'], "_").to_lowercase()
                )))?;
                write_records_jsonl(&m.records, &mut w)?;
                w.flush()?;
            }
        }
        let mut w = create(&cfg.out_dir.join("table.csv"))?;
        write_table_csv(&table, &mut w)?;
        w.flush()?;
        let mut w = create(&cfg.out_dir.join("bands.csv"))?;
        write_band_csv(&bands, &mut w)?;
        w.flush()?;
        let smoke = run_oracle(cfg)?;
        write_json(&cfg.out_dir.join("oracle.json"), &smoke)?;
        println!("tables -> {}", cfg.out_dir.display());
        Ok(())
    };
    run().map_err(Failure::Runtime)
}

fn run_oracle(cfg: &ExperimentConfig) -> Result<EpisodeOutcome> {
    let scene = oracle_scene(&cfg.env, stage_seed(cfg, "oracle", 0))?;
    Ok(execute_episode(&scene, &oracle_action(cfg.env.rope_n, &cfg.env.bounds())))
}

pub fn oracle_smoke(cfg: &ExperimentConfig, dry_run: bool) -> Result<(), Failure> {
    if dry_run {
        println!("dry run: would run the scripted straight-through insertion");
        return Ok(());
    }
    let out = run_oracle(cfg).map_err(Failure::Runtime)?;
    write_json(&cfg.out_dir.join("oracle.json"), &out).map_err(Failure::Runtime)?;
    println!("rope_in {} rope_out {} reward {:.3}", out.rope_in, out.rope_out, out.reward);
    if out.rope_out {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!("scripted insertion did not pass through the ring")))
    }
}
