use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mocorr_core::metrics::{self, ImageMetrics, MetricAggregates, SsimParams, METRIC_NAMES};
use mocorr_core::motion::{self, Ordering, SimConfig};
use mocorr_core::phantom::{make_phantom, PhantomSpec};
use mocorr_core::training::{self, AblationSpec, Checkpoint, Pair, TrainConfig};
use mocorr_core::volume::{load_volume, save_volume, Slice, Volume};
use mocorr_core::{seed, verify, Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::RunManifest;
use crate::{
    overrides, AblateArgs, Command, EvaluateArgs, GradcheckArgs, PhantomArgs, Profile, ReplayArgs, SeverityStudyArgs,
    SimMode, SimulateArgs, TrainArgs,
};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

/// What a command reports for its manifest. `status` is returned after the
/// manifest is written, so failed checks still leave a record.
struct Outcome {
    config: Value,
    seeds: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    status: Result<()>,
}

impl Outcome {
    fn ok(config: Value, seeds: Value, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Self {
        Outcome { config, seeds, inputs, outputs, status: Ok(()) }
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Phantom(_) => "phantom",
        Command::Simulate(_) => "simulate",
        Command::SeverityStudy(_) => "severity-study",
        Command::Train(_) => "train",
        Command::Evaluate(_) => "evaluate",
        Command::Ablate(_) => "ablate",
        Command::Gradcheck(_) => "gradcheck",
        Command::Replay(_) => "replay",
    }
}

fn out_dir(cmd: &mut Command) -> Option<&mut PathBuf> {
    match cmd {
        Command::Phantom(a) => Some(&mut a.out.out),
        Command::Simulate(a) => Some(&mut a.out.out),
        Command::SeverityStudy(a) => Some(&mut a.out.out),
        Command::Train(a) => Some(&mut a.out.out),
        Command::Evaluate(a) => Some(&mut a.out.out),
        Command::Ablate(a) => Some(&mut a.out.out),
        Command::Gradcheck(a) => Some(&mut a.out.out),
        Command::Replay(_) => None,
    }
}

pub fn run(mut cmd: Command, deterministic: bool) -> Result<()> {
    if let Command::Replay(args) = cmd {
        return replay(&args);
    }
    let out = out_dir(&mut cmd).cloned().unwrap_or_default();
    std::fs::create_dir_all(&out)?;
    let start = Instant::now();
    let outcome = match &cmd {
        Command::Phantom(a) => phantom(a)?,
        Command::Simulate(a) => simulate(a)?,
        Command::SeverityStudy(a) => severity_study(a)?,
        Command::Train(a) => train(a)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Ablate(a) => ablate(a)?,
        Command::Gradcheck(a) => gradcheck(a)?,
        Command::Replay(_) => unreachable!("handled above"),
    };
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command_name(&cmd).to_string(),
        invocation: cmd,
        config: outcome.config,
        seeds: outcome.seeds,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        deterministic,
        duration_s: start.elapsed().as_secs_f64(),
    };
    manifest.write(&out)?;
    outcome.status
}

fn replay(args: &ReplayArgs) -> Result<()> {
    let m = RunManifest::read(&args.manifest)?;
    let mut cmd = m.invocation;
    if let Some(out) = &args.out {
        if let Some(dir) = out_dir(&mut cmd) {
            *dir = out.clone();
        }
    }
    let out = out_dir(&mut cmd).cloned().unwrap_or_default();
    // Configs may have come from files or overrides that no longer exist;
    // the manifest's resolved copy is authoritative.
    match &mut cmd {
        Command::Train(a) => {
            std::fs::create_dir_all(&out)?;
            let path = out.join(RESOLVED_CONFIG_FILE);
            std::fs::write(&path, serde_json::to_string_pretty(&m.config)?)?;
            a.config = Some(path);
            a.set.clear();
        }
        Command::Ablate(a) => {
            std::fs::create_dir_all(&out)?;
            let path = out.join(RESOLVED_CONFIG_FILE);
            std::fs::write(&path, serde_json::to_string_pretty(&m.config)?)?;
            a.spec = Some(path);
            a.set.clear();
        }
        _ => {}
    }
    log::info!("replaying {} into {}", m.command, out.display());
    run(cmd, m.deterministic)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    std::fs::write(path, contents).map_err(|e| Error::io_at(path, e))?;
    Ok(path.to_path_buf())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<PathBuf> {
    write(path, serde_json::to_string_pretty(value)?)
}

/// Every `.mvol` in `dir`, sorted by file name; the file stem is the subject id.
pub fn load_subjects(dir: &Path) -> Result<Vec<(String, Volume)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .and_then(|entries| entries.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>())
        .map_err(|e| Error::io_at(dir, e))?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "mvol"));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config("data", format!("no .mvol files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok((id, load_volume(p)?))
        })
        .collect()
}

/// Deep-merges `patch` into `base`; objects merge key by key, anything else
/// replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn resolve<T: Serialize + serde::de::DeserializeOwned>(defaults: &T, file: Option<&Path>, set: &[String]) -> Result<(T, Value)> {
    let mut value = serde_json::to_value(defaults)?;
    if let Some(path) = file {
        let patch: Value = serde_json::from_slice(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?)?;
        merge(&mut value, patch);
    }
    overrides::apply_all(&mut value, set)?;
    let parsed: T = serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
    // Re-serialize so the recorded config is exactly what was parsed.
    let resolved = serde_json::to_value(&parsed)?;
    Ok((parsed, resolved))
}

fn phantom(a: &PhantomArgs) -> Result<Outcome> {
    let template = PhantomSpec { seed: a.seed, dims: a.dims, n_structures: a.n_structures, ..PhantomSpec::default() };
    template.validate()?;
    if a.count == 0 {
        return Err(Error::config("count", "must be at least 1"));
    }
    let mut outputs = Vec::new();
    let mut seeds = Vec::new();
    for i in 0..a.count {
        let s = seed::mix(a.seed, i as u64);
        let v = make_phantom(&PhantomSpec { seed: s, ..template.clone() })?;
        let path = a.out.out.join(format!("subject_{i:03}.mvol"));
        save_volume(&v, &path)?;
        outputs.push(path);
        seeds.push(s);
    }
    println!("wrote {} phantoms to {}", a.count, a.out.out.display());
    Ok(Outcome::ok(serde_json::to_value(&template)?, json!({ "base": a.seed, "per_phantom": seeds }), vec![], outputs))
}

fn simulate(a: &SimulateArgs) -> Result<Outcome> {
    let clean = load_volume(&a.input)?;
    let preset = a.preset.preset();
    let sim = SimConfig { pe_only: a.pe_only };
    let [_, ny, nz] = clean.dims();
    let recorded = a.traj_in.as_ref().map(motion::load_trajectories).transpose()?;
    let (corrupted, trajs) = match (a.mode, recorded) {
        (SimMode::TwoD, Some(t)) => (motion::corrupt_subject_with(&clean, &t, &sim)?, t),
        (SimMode::TwoD, None) => motion::corrupt_subject(&clean, a.seed, &preset, &sim)?,
        (SimMode::ThreeD, recorded) => {
            let traj = match recorded {
                Some(mut t) if t.len() == 1 => t.remove(0),
                Some(t) => {
                    return Err(Error::config("traj-in", format!("3d mode needs exactly 1 trajectory, file has {}", t.len())))
                }
                None => motion::generate_trajectory(a.seed, ny * nz, &preset, Ordering::Points3d)?,
            };
            (motion::corrupt_volume(&clean, &traj, &sim)?, vec![traj])
        }
    };
    let vol_path = a.out.out.join("corrupted.mvol");
    save_volume(&corrupted, &vol_path)?;
    let traj_path = a.traj_out.clone().unwrap_or_else(|| a.out.out.join("trajectories.mtraj"));
    motion::save_trajectories(&trajs, &traj_path)?;

    let p = SsimParams::with_range(a.dynamic_range);
    let rows = (0..nz)
        .map(|z| ImageMetrics::measure(&corrupted.slice(z)?, &clean.slice(z)?, &p))
        .collect::<Result<Vec<_>>>()?;
    let agg = MetricAggregates::of(&rows);
    println!(
        "corrupted vs input: ssim {:.4}  mse {:.6}  psnr {:.3} dB  ({} slices)",
        agg.ssim.mean, agg.mse.mean, agg.psnr.mean, nz
    );
    let metrics_path = write_json(&a.out.out.join("before_metrics.json"), &json!({ "per_slice": rows, "aggregate": agg }))?;
    let mut inputs = vec![a.input.clone()];
    inputs.extend(a.traj_in.clone());
    Ok(Outcome::ok(
        json!({ "preset": preset, "sim": sim, "mode": a.mode, "ssim": p }),
        json!({ "trajectory": a.seed }),
        inputs,
        vec![vol_path, traj_path, metrics_path],
    ))
}

fn severity_study(a: &SeverityStudyArgs) -> Result<Outcome> {
    let vols = load_subjects(&a.phantoms)?;
    let sim = SimConfig { pe_only: a.pe_only };
    let p = SsimParams::default();
    let study = metrics::severity_study(&vols, a.seed, &sim, &p)?;
    let mut outputs = Vec::new();
    for m in METRIC_NAMES {
        outputs.push(write(&a.out.out.join(format!("scatter_{m}.csv")), study.scatter_csv(m))?);
    }
    outputs.push(write_json(&a.out.out.join("r2.json"), &study.r2)?);
    let means: BTreeMap<&str, MetricAggregates> = study.means.iter().map(|(s, m)| (s.as_str(), *m)).collect();
    outputs.push(write_json(
        &a.out.out.join("means.json"),
        &json!({ "means": means, "skipped_background": study.skipped_background, "n_rows": study.rows.len() }),
    )?);
    println!("{:<6} {:<20} {:>8} {:>10}", "metric", "pair", "r2", "reference");
    for e in &study.r2 {
        let reference = e.reference.map(|r| format!("{r:.4}")).unwrap_or_else(|| "-".into());
        println!("{:<6} {:<20} {:>8.4} {:>10}", e.metric, e.pair, e.r2, reference);
    }
    for (s, m) in &study.means {
        println!("mean ssim {:<9} {:.4}", s.as_str(), m.ssim.mean);
    }
    Ok(Outcome::ok(json!({ "sim": sim, "ssim": p }), json!({ "study": a.seed }), vec![a.phantoms.clone()], outputs))
}

fn train(a: &TrainArgs) -> Result<Outcome> {
    let defaults = match a.profile {
        Profile::Paper => TrainConfig::default(),
        Profile::Toy => TrainConfig::toy(),
    };
    let (cfg, resolved) = resolve(&defaults, a.config.as_deref(), &a.set)?;
    cfg.validate()?;
    let vols = load_subjects(&a.data)?;
    let ds = training::build_dataset(&vols, cfg.seed, &cfg.data)?;
    let resume = a.resume.as_ref().map(Checkpoint::load).transpose()?;
    let split = match &resume {
        Some(c) => c.split.clone(),
        None => training::split_subjects(&ds.subjects, cfg.seed, cfg.data.test_fraction, cfg.data.val_fraction)?,
    };
    log::info!(
        "{} pairs from {} subjects; test subjects {:?}",
        ds.pairs.len(),
        ds.subjects.len(),
        split.test_subjects
    );
    let out = training::train(&cfg, &ds, &split, resume)?;
    let dir = &a.out.out;
    let mut outputs = vec![dir.join("best.mckpt"), dir.join("last.mckpt")];
    out.best.save(&outputs[0])?;
    out.last.save(&outputs[1])?;
    outputs.push(write(&dir.join("curves.csv"), training::curves_csv(&out.last.history))?);
    let mut log = String::new();
    for r in &out.batch_log {
        let _ = writeln!(log, "{}", serde_json::to_string(r)?);
    }
    outputs.push(write(&dir.join("batch_log.jsonl"), log)?);
    outputs.push(write_json(&dir.join("split.json"), &split)?);
    outputs.push(write_json(&dir.join(RESOLVED_CONFIG_FILE), &resolved)?);
    if let (Some(first), Some(last)) = (out.last.history.first(), out.last.history.last()) {
        println!(
            "trained {} epochs: train loss {:.5} -> {:.5}, best val loss {:.5} (epoch {})",
            out.last.epoch,
            first.train_loss,
            last.train_loss,
            out.best.history.last().map_or(f64::NAN, |r| r.val_loss),
            out.best.epoch.saturating_sub(1)
        );
    }
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.config.clone());
    inputs.extend(a.resume.clone());
    Ok(Outcome::ok(
        resolved,
        json!({ "run": cfg.seed, "split": split.seed }),
        inputs,
        outputs,
    ))
}

fn evaluate(a: &EvaluateArgs) -> Result<Outcome> {
    let mut ckpt = Checkpoint::load(&a.checkpoint)?;
    let cfg = ckpt.train_config.clone();
    let vols = load_subjects(&a.data)?;
    let ds = training::build_dataset(&vols, cfg.seed, &cfg.data)?;
    let part = ckpt.split.partition(&ds)?;
    let test: Vec<&Pair> = part.test.iter().map(|&i| &ds.pairs[i]).collect();
    let ev = training::evaluate(&mut ckpt.model, &test, &cfg.ssim, cfg.batch_size)?;
    let dir = &a.out.out;
    let mut outputs = vec![
        write(&dir.join("report.csv"), ev.report.to_csv())?,
        write_json(&dir.join("summary.json"), &ev.report.summary_json())?,
    ];
    if a.diff_maps {
        let spacing: BTreeMap<&str, [f32; 3]> = vols.iter().map(|(id, v)| (id.as_str(), v.spacing())).collect();
        let mut groups: BTreeMap<(String, String), Vec<(usize, Slice)>> = BTreeMap::new();
        for ((pair, pred), row) in test.iter().zip(&ev.predictions).zip(&ev.report.rows) {
            let data = pred
                .data
                .iter()
                .zip(&pair.target.data)
                .map(|(p, t)| if a.absolute { (p - t).abs() } else { p - t })
                .collect();
            let (nx, ny) = pred.dims();
            groups
                .entry((row.subject_id.clone(), row.condition.clone()))
                .or_default()
                .push((row.slice_index, Slice::new(nx, ny, data)?));
        }
        for ((subject, condition), mut slices) in groups {
            slices.sort_by_key(|(z, _)| *z);
            let slices: Vec<Slice> = slices.into_iter().map(|(_, s)| s).collect();
            let v = Volume::from_slices(&slices, spacing[subject.as_str()])?;
            let path = dir.join(format!("diff_{subject}_{condition}.mvol"));
            save_volume(&v, &path)?;
            outputs.push(path);
        }
    }
    let (b, f) = (&ev.report.before, &ev.report.after);
    let imp = &ev.report.improvement;
    println!("{:<8} {:>10} {:>12} {:>10}", "", "SSIM (%)", "MSE", "PSNR");
    println!("{:<8} {:>10.2} {:>12.6} {:>10.3}", "before", 100.0 * b.ssim.mean, b.mse.mean, b.psnr.mean);
    println!("{:<8} {:>10.2} {:>12.6} {:>10.3}", "after", 100.0 * f.ssim.mean, f.mse.mean, f.psnr.mean);
    println!(
        "improvement: ssim {:+.2} points, mse {:.2}% lower, psnr {:.2}% higher ({} images)",
        imp.ssim_points,
        imp.mse_percent,
        imp.psnr_percent,
        ev.report.rows.len()
    );
    Ok(Outcome::ok(
        json!({ "train_config": cfg, "diff_maps": a.diff_maps, "absolute": a.absolute }),
        json!({ "run": cfg.seed, "split": ckpt.split.seed }),
        vec![a.checkpoint.clone(), a.data.clone()],
        outputs,
    ))
}

fn ablate(a: &AblateArgs) -> Result<Outcome> {
    let (spec, resolved) = resolve(&AblationSpec::default(), a.spec.as_deref(), &a.set)?;
    let vols = load_subjects(&a.data)?;
    let result = training::run_ablation(&spec, &vols)?;
    let dir = &a.out.out;
    let outputs = vec![
        write(&dir.join("ablation.csv"), result.to_csv())?,
        write_json(&dir.join("ablation.json"), &result)?,
    ];
    for t in &result.tables {
        println!("Table {}", t.table);
        println!(
            "  {:<45} {:>9} {:>11} {:>8} | {:>9} {:>8} {:>7}",
            "experiment", "SSIM (%)", "MSE", "PSNR", "ref SSIM", "ref MSE", "ref PSNR"
        );
        for r in std::iter::once(&t.corrupted).chain(&t.rows) {
            println!(
                "  {:<45} {:>9.2} {:>11.6} {:>8.3} | {:>9.2} {:>8.2} {:>7.2}",
                r.experiment,
                r.measured.ssim_percent,
                r.measured.mse,
                r.measured.psnr,
                r.reference.ssim_percent,
                r.reference.mse,
                r.reference.psnr
            );
        }
    }
    println!("reference columns are published clinical-data figures (MSE on a different intensity scale)");
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.spec.clone());
    Ok(Outcome::ok(resolved, json!({ "run": spec.base.seed }), inputs, outputs))
}

fn gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    let reports = verify::gradcheck_suite(&a.ops, a.trials, a.seed)?;
    println!("{:<22} {:>6} {:>9} {:>14}  result", "check", "trials", "rejected", "max rel err");
    for r in &reports {
        println!(
            "{:<22} {:>6} {:>9} {:>14.3e}  {}",
            r.name,
            r.trials,
            r.rejected,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let rows: Vec<Value> = reports
        .iter()
        .map(|r| json!({ "name": r.name, "trials": r.trials, "rejected": r.rejected, "max_rel_err": r.max_rel_err, "passed": r.passed() }))
        .collect();
    let path = write_json(&a.out.out.join("gradcheck.json"), &rows)?;
    let mut outcome = Outcome::ok(
        json!({ "ops": a.ops, "trials": a.trials, "tolerance": mocorr_core::autodiff::gradcheck::TOLERANCE }),
        json!({ "gradcheck": a.seed }),
        vec![],
        vec![path],
    );
    if !failed.is_empty() {
        outcome.status = Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(outcome)
}
