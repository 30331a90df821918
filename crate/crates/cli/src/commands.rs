use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gcldr_core::autodiff::Mode;
use gcldr_core::data::{generate, load_csv, save_csv, split_validation, GcldrDataset, Role};
use gcldr_core::eval::{make_variant, metrics, predict_variant, MetricsReport};
use gcldr_core::meta::{split_domains, verify_taylor, write_taylor_csv, TaylorRow};
use gcldr_core::model::{Forward, ModelBundle, Trainable};
use gcldr_core::trainer::{e_step, fit, Variant};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checks::{gradcheck_suite, CheckRow};
use crate::config::ExperimentConfig;
use crate::report::{RunEntry, RunReport};
use crate::CliError;

/// Generator seeds of successive repeats are this far apart.
const REPEAT_STRIDE: u64 = 1_000_003;

fn data_offset(seed: u64, repeat: usize) -> u64 {
    seed.wrapping_add(REPEAT_STRIDE.wrapping_mul(repeat as u64))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Writes one dataset CSV per configured seed and repeat.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    create_dir(out)?;
    let mut paths = Vec::new();
    for &seed in &cfg.evaluation.seeds {
        for r in 0..cfg.evaluation.repeat {
            let ds = generate(&cfg.data_config(data_offset(seed, r))?)?;
            let path = out.join(format!("data_seed{seed}_r{r}.csv"));
            save_csv(&ds, &path)?;
            log::info!("wrote {} ({} train, {} test rows)", path.display(), ds.count(Role::Train), ds.count(Role::Test));
            paths.push(path);
        }
    }
    Ok(paths)
}

/// Trains and evaluates one variant on one data draw.
pub fn run_one(cfg: &ExperimentConfig, variant: Variant, seed: u64, repeat: usize) -> Result<(RunEntry, ModelBundle), CliError> {
    let start = Instant::now();
    let ds = generate(&cfg.data_config(data_offset(seed, repeat))?)?;
    let train = ds.samples(Role::Train);
    let (val, test) = split_validation(&ds.samples(Role::Test), cfg.dataset.validation_fraction, seed)?;
    let bundle = make_variant(&cfg.bundle_config(seed), variant)?;
    let (bundle, history) = fit(bundle, &train, Some(&val), &cfg.train_config(variant, seed))?;
    let probs = predict_variant(&bundle, variant, &test.x)?;
    let m = metrics(&probs, &test.y, cfg.tau())?;
    log::info!("{variant} seed {seed} repeat {repeat}: ACC@1 {:.4} aAUC {:.4}", m.acc1, m.auc);
    let entry = RunEntry {
        variant,
        seed,
        repeat,
        metrics: m,
        history,
        wall_clock_s: start.elapsed().as_secs_f64(),
        checkpoint: None,
    };
    Ok((entry, bundle))
}

/// Runs every variant × seed × repeat on `workers` threads. Results are
/// assembled in configuration order, so the report does not depend on
/// `workers`. With `out`, writes the report, CSV tables and checkpoints.
pub fn cmd_train(cfg: &ExperimentConfig, workers: usize, out: Option<&Path>) -> Result<RunReport, CliError> {
    cfg.validate()?;
    let start = Instant::now();
    let jobs: Vec<(Variant, u64, usize)> = cfg
        .training
        .variants
        .iter()
        .flat_map(|&v| cfg.evaluation.seeds.iter().flat_map(move |&s| (0..cfg.evaluation.repeat).map(move |r| (v, s, r))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<(RunEntry, ModelBundle), CliError>> =
        pool.install(|| jobs.par_iter().map(|&(v, s, r)| run_one(cfg, v, s, r)).collect());

    let ckpt_dir = out.map(|o| o.join("checkpoints"));
    if let Some(d) = &ckpt_dir {
        create_dir(d)?;
    }
    let mut runs = Vec::with_capacity(results.len());
    for res in results {
        let (mut entry, bundle) = res?;
        if let Some(d) = &ckpt_dir {
            let name = format!("{}_seed{}_r{}.json", entry.variant, entry.seed, entry.repeat);
            bundle.save(&d.join(&name))?;
            entry.checkpoint = Some(format!("checkpoints/{name}"));
        }
        runs.push(entry);
    }
    let report = RunReport::new(cfg.clone(), runs, start.elapsed().as_secs_f64());
    if let Some(o) = out {
        write(&o.join("report.json"), &report.to_json())?;
        export_csv(&report, o)?;
    }
    Ok(report)
}

/// Metrics of a saved model on the test rows of `data` (or of freshly generated data).
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    variant: Variant,
    data: Option<&Path>,
    seed: u64,
) -> Result<MetricsReport, CliError> {
    let bundle = ModelBundle::load(checkpoint)?;
    if bundle.components != variant.components() {
        return Err(CliError::Config(format!("checkpoint was not trained as variant {variant}")));
    }
    let ds: GcldrDataset = match data {
        Some(p) => load_csv(p)?,
        None => generate(&cfg.data_config(data_offset(seed, 0))?)?,
    };
    let test = ds.samples(Role::Test);
    if test.is_empty() {
        return Err(CliError::Config("dataset has no test rows".into()));
    }
    let probs = predict_variant(&bundle, variant, &test.x)?;
    Ok(metrics(&probs, &test.y, cfg.tau())?)
}

pub fn cmd_gradcheck(cfg: &ExperimentConfig, corrupt: bool) -> Result<Vec<CheckRow>, CliError> {
    Ok(gradcheck_suite(cfg.evaluation.gradcheck_seeds, corrupt)?)
}

/// Exact versus first-order meta objective on one training batch of the
/// configured model, dropout off.
pub fn cmd_taylor(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TaylorRow>, CliError> {
    let ds = generate(&cfg.data_config(data_offset(seed, 0))?)?;
    let train = ds.samples(Role::Train);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(cfg.training.batch_size.min(train.len()));
    let batch = train.subset(&idx);
    let bundle = make_variant(&cfg.bundle_config(seed), Variant::Full)?;
    let post = {
        let mut fwd = Forward::new(&bundle, Mode::Train, Trainable::Nothing, seed).without_dropout();
        let f = bundle.forward_features(&mut fwd, &batch.x)?;
        e_step(&mut fwd, &bundle, &f, &batch.y)?
    };
    let split = split_domains(bundle.config.domains, &mut rng)?;
    Ok(verify_taylor(&bundle, &batch.x, &batch.y, &post, &split, cfg.training.gamma, &cfg.evaluation.taylor_alphas, seed)?)
}

pub fn taylor_csv(rows: &[TaylorRow]) -> Result<String, CliError> {
    let mut buf = Vec::new();
    write_taylor_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ExportFormat {
    Csv,
    Json,
    Plotdata,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.17e}"))
}

fn export_csv(report: &RunReport, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut hist = String::from("variant,seed,repeat,epoch,l_cd,l_ci,l_ac,l_d,l_u,l_meta,val_auc,val_acc1\n");
    let mut met = String::from("variant,seed,repeat,auc,far,frr,bfr,acc1,tau\n");
    for r in &report.runs {
        for h in &r.history {
            hist.push_str(&format!(
                "{},{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{}\n",
                r.variant, r.seed, r.repeat, h.epoch, h.l_cd, h.l_ci, h.l_ac, h.l_d, h.l_u, h.l_meta, opt(h.val_auc), opt(h.val_acc1)
            ));
        }
        let m = &r.metrics;
        met.push_str(&format!(
            "{},{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            r.variant, r.seed, r.repeat, m.auc, m.far, m.frr, m.bfr, m.acc1, m.tau
        ));
    }
    let (hp, mp) = (out.join("history.csv"), out.join("metrics.csv"));
    write(&hp, &hist)?;
    write(&mp, &met)?;
    Ok(vec![hp, mp])
}

/// Re-emits a saved report in another format.
pub fn cmd_export(report_path: &Path, format: ExportFormat, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = fs::read_to_string(report_path).map_err(|e| CliError::Io(format!("{}: {e}", report_path.display())))?;
    let report = RunReport::from_json(&text)?;
    create_dir(out)?;
    match format {
        ExportFormat::Csv => export_csv(&report, out),
        ExportFormat::Json => {
            let p = out.join("report.json");
            write(&p, &report.to_json())?;
            Ok(vec![p])
        }
        ExportFormat::Plotdata => {
            let mut s = String::from("# variant seed repeat epoch val_auc val_acc1 l_cd l_u\n");
            for r in &report.runs {
                for h in &r.history {
                    s.push_str(&format!(
                        "{} {} {} {} {} {} {:.17e} {:.17e}\n",
                        r.variant,
                        r.seed,
                        r.repeat,
                        h.epoch,
                        h.val_auc.map_or("nan".into(), |v| format!("{v:.17e}")),
                        h.val_acc1.map_or("nan".into(), |v| format!("{v:.17e}")),
                        h.l_cd,
                        h.l_u
                    ));
                }
                s.push('\n');
            }
            let p = out.join("plotdata.dat");
            write(&p, &s)?;
            Ok(vec![p])
        }
    }
}
