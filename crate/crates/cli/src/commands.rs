use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use madapt::adapt::{adapt_dual, adapt_eft, traces_to_csv, AdaptMode, AdaptationTrace};
use madapt::body_model::{forward_kinematics, project, Skeleton};
use madapt::diffcore::ParamVector;
use madapt::experiments::{
    evaluate_method, run_experiment, write_output, ExperimentPlan, Method, ModelSet,
};
use madapt::gradcheck::{grad_check_to_csv, run_grad_check, GRAD_CHECK_TOL, LOSS_NAMES};
use madapt::metrics::{per_joint_to_csv, results_to_csv, PerJointRow, ResultRow};
use madapt::regressor::{read_checkpoint, regress, write_checkpoint, CheckpointSidecar, RegressorSpec};
use madapt::synth::{load_dataset, make_dataset, serialize_dataset, Dataset, DomainConfig};
use madapt::training::{meta_train, pretrain, TrainHistory, Trained};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{load_run_config, parse_toml, RunConfig};
use crate::manifest::{self, unix_now, RunManifest};
use crate::{AdaptArgs, CliError, Command, Common, ExperimentArgs, GenDataArgs, GradCheckArgs, TrainArgs};

/// State accumulated for the run manifest.
#[derive(Default)]
struct RunRecord {
    config: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
}

impl RunRecord {
    fn set_config(&mut self, value: &impl Serialize) {
        self.config = serde_json::to_value(value).expect("config serializes");
    }
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::GenData(_) => "gen-data",
        Command::Pretrain(_) => "pretrain",
        Command::MetaTrain(_) => "meta-train",
        Command::Adapt(_) => "adapt",
        Command::Eval(_) => "eval",
        Command::Experiment(_) => "experiment",
        Command::GradCheck(_) => "grad-check",
    }
}

/// `(manifest file, base for artifact paths)`.
fn manifest_location(command: &Command) -> (PathBuf, PathBuf) {
    let dir = |p: &Path| (p.join("manifest.jsonl"), p.to_path_buf());
    match command {
        Command::GenData(a) => {
            let mut name = a.out.as_os_str().to_owned();
            name.push(".manifest.jsonl");
            let base = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
            (PathBuf::from(name), base)
        }
        Command::Pretrain(a) => dir(&a.out),
        Command::MetaTrain(a) => dir(&a.train.out),
        Command::Adapt(a) | Command::Eval(a) => dir(&a.out),
        Command::Experiment(a) => dir(&a.out),
        Command::GradCheck(a) => dir(&a.out),
    }
}

pub fn run(command: Command, args: Vec<String>) -> Result<(), CliError> {
    let started_unix = unix_now();
    let name = command_name(&command);
    let (manifest_path, base) = manifest_location(&command);
    let mut record = RunRecord::default();
    let result = match command {
        Command::GenData(a) => gen_data(a, &mut record),
        Command::Pretrain(a) => train(a, None, &mut record),
        Command::MetaTrain(a) => {
            let aux = !a.no_aux;
            train(a.train, Some(aux), &mut record)
        }
        Command::Adapt(a) => adapt(a, false, &mut record),
        Command::Eval(a) => adapt(a, true, &mut record),
        Command::Experiment(a) => experiment(a, &mut record),
        Command::GradCheck(a) => grad_check(a, &mut record),
    };
    let input_hash = manifest::input_hash(&record.inputs, &record.config).unwrap_or_default();
    let artifacts = manifest::artifacts(&base, &record.artifacts)?;
    let manifest = RunManifest {
        command: name.into(),
        args,
        config: record.config,
        seed: record.seed,
        input_hash,
        started_unix,
        finished_unix: unix_now(),
        exit_code: result.as_ref().err().map_or(0, |e| i32::from(e.code())),
        error: result.as_ref().err().map(|e| e.to_string()),
        artifacts,
    };
    manifest::append(&manifest_path, &manifest)?;
    result
}

fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var("MADAPT_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("MADAPT_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn load_skeleton(path: Option<&Path>, record: &mut RunRecord) -> Result<Skeleton<f64>, CliError> {
    match path {
        None => Ok(Skeleton::human16()),
        Some(p) => {
            record.inputs.push(p.to_path_buf());
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Skeleton::from_text(&text).map_err(|e| CliError::Config(format!("skeleton {}: {e}", p.display())))
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: PathBuf, contents: &[u8], record: &mut RunRecord) -> Result<(), CliError> {
    fs::write(&path, contents).map_err(|e| CliError::io(&path, e))?;
    record.artifacts.push(path);
    Ok(())
}

fn config_with_common(common: &Common, record: &mut RunRecord) -> Result<(RunConfig, u64), CliError> {
    if let Some(p) = &common.config {
        record.inputs.push(p.clone());
    }
    let cfg = load_run_config(common.config.as_deref())?;
    let seed = resolve_seed(common.seed, cfg.seed)?;
    record.seed = Some(seed);
    Ok((cfg, seed))
}

fn gen_data(a: GenDataArgs, record: &mut RunRecord) -> Result<(), CliError> {
    let (mut cfg, seed) = config_with_common(&a.common, record)?;
    let skeleton = load_skeleton(a.common.skeleton.as_deref(), record)?;
    let data = &mut cfg.data;
    if let Some(d) = a.domain {
        data.domain = d;
    }
    data.batches = a.b.unwrap_or(data.batches);
    data.per_batch = a.m.unwrap_or(data.per_batch);
    data.detector_sigma = a.sigma.or(data.detector_sigma);
    data.occlusion_prob = a.occlusion.or(data.occlusion_prob);
    cfg.seed = Some(seed);
    record.set_config(&cfg.data);

    let mut domain = DomainConfig::preset(&cfg.data.domain)?;
    if let Some(s) = cfg.data.detector_sigma {
        domain = domain.with_noise(s);
    }
    if let Some(p) = cfg.data.occlusion_prob {
        domain = domain.with_occlusion(p);
    }
    let ds = make_dataset(&skeleton, &domain, cfg.data.batches, cfg.data.per_batch, seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let file = fs::File::create(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let mut w = BufWriter::new(file);
    serialize_dataset(&ds, &mut w).map_err(|e| CliError::io(&a.out, e))?;
    w.flush().map_err(|e| CliError::io(&a.out, e))?;
    record.artifacts.push(a.out);
    Ok(())
}

fn read_dataset(path: &Path, skeleton: &Skeleton<f64>, record: &mut RunRecord) -> Result<Dataset, CliError> {
    record.inputs.push(path.to_path_buf());
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let ds = load_dataset(BufReader::new(file)).map_err(|e| match e {
        madapt::synth::SynthError::Io(io) => CliError::io(path, io),
        other => CliError::Config(format!("dataset {}: {other}", path.display())),
    })?;
    if ds.skeleton_hash != skeleton.content_hash() {
        return Err(CliError::Config(format!(
            "dataset {} was generated for a different skeleton",
            path.display()
        )));
    }
    Ok(ds)
}

fn save_model(
    dir: &Path,
    role: &str,
    spec: &RegressorSpec,
    params: &ParamVector<f64>,
    seed: u64,
    record: &mut RunRecord,
) -> Result<(), CliError> {
    let path = dir.join(format!("{role}.ckpt"));
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, spec, params).map_err(|e| CliError::io(&path, e))?;
    write_file(path, &bytes, record)?;
    let sidecar = CheckpointSidecar {
        spec: spec.clone(),
        seed,
        role: role.into(),
        param_count: params.len(),
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes") + "\n";
    write_file(dir.join(format!("{role}.ckpt.json")), json.as_bytes(), record)
}

fn load_model(
    dir: &Path,
    role: &str,
    record: &mut RunRecord,
) -> Result<Option<(RegressorSpec, ParamVector<f64>)>, CliError> {
    let path = dir.join(format!("{role}.ckpt"));
    if !path.exists() {
        return Ok(None);
    }
    let side_path = dir.join(format!("{role}.ckpt.json"));
    let text = fs::read_to_string(&side_path).map_err(|e| CliError::io(&side_path, e))?;
    let sidecar: CheckpointSidecar = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", side_path.display())))?;
    record.inputs.push(path.clone());
    let file = fs::File::open(&path).map_err(|e| CliError::io(&path, e))?;
    let params = read_checkpoint(BufReader::new(file), &sidecar.spec)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(Some((sidecar.spec, params)))
}

fn train(a: TrainArgs, meta: Option<bool>, record: &mut RunRecord) -> Result<(), CliError> {
    let (mut cfg, seed) = config_with_common(&a.common, record)?;
    let skeleton = load_skeleton(a.common.skeleton.as_deref(), record)?;
    let o = &a.overrides;
    let t = &mut cfg.train;
    t.epochs = o.epochs.unwrap_or(t.epochs);
    t.alpha = o.alpha.unwrap_or(t.alpha);
    t.beta_lr = o.beta_lr.unwrap_or(t.beta_lr);
    t.batch_size = o.batch_size.unwrap_or(t.batch_size);
    t.inner_steps = o.inner_steps.unwrap_or(t.inner_steps);
    t.loss.lambda_2d = o.lambda_2d.unwrap_or(t.loss.lambda_2d);
    t.loss.lambda_3d = o.lambda_3d.unwrap_or(t.loss.lambda_3d);
    t.seed = seed;
    if let Some(h) = &o.hidden {
        cfg.model.hidden = h.clone();
    }
    cfg.seed = Some(seed);
    record.set_config(&cfg);
    cfg.train.validate()?;

    let ds = read_dataset(&a.data, &skeleton, record)?;
    let spec = RegressorSpec::for_skeleton(&skeleton)
        .with_hidden(cfg.model.hidden.clone())
        .with_activation(cfg.model.activation);
    let trained = match meta {
        None => pretrain(&spec, &skeleton, &ds.samples, &cfg.train)?,
        Some(aux) => meta_train(&spec, aux.then_some(&spec), &skeleton, &ds.samples, &cfg.train)?,
    };
    create_dir(&a.out)?;
    save_model(&a.out, "main", &spec, &trained.main, seed, record)?;
    if let Some(u) = &trained.aux {
        save_model(&a.out, "aux", &spec, u, seed, record)?;
    }
    write_file(a.out.join("history.csv"), trained.history.to_csv().as_bytes(), record)?;
    let json = serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n";
    write_file(a.out.join("run_config.json"), json.as_bytes(), record)
}

fn mode_name(mode: AdaptMode) -> &'static str {
    match mode {
        AdaptMode::Eft => "eft",
        AdaptMode::Dual => "dual",
        AdaptMode::None => "none",
    }
}

fn adapt(a: AdaptArgs, with_metrics: bool, record: &mut RunRecord) -> Result<(), CliError> {
    let skeleton = load_skeleton(a.common.skeleton.as_deref(), record)?;
    let model_cfg_path = a.model.join("run_config.json");
    let model_cfg: RunConfig = {
        let text = fs::read_to_string(&model_cfg_path).map_err(|e| CliError::io(&model_cfg_path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", model_cfg_path.display())))?
    };
    let file_cfg = match &a.common.config {
        Some(p) => {
            record.inputs.push(p.clone());
            Some(parse_toml::<RunConfig>(p)?)
        }
        None => None,
    };
    let seed = resolve_seed(a.common.seed, file_cfg.as_ref().and_then(|c| c.seed))?;
    record.seed = Some(seed);
    let (main_spec, w) = load_model(&a.model, "main", record)?
        .ok_or_else(|| CliError::Config(format!("{} has no main.ckpt", a.model.display())))?;
    let aux = load_model(&a.model, "aux", record)?;

    let mut cfg = file_cfg.as_ref().map_or(model_cfg.adapt.clone(), |c| c.adapt.clone());
    cfg.mode = a
        .mode
        .or(file_cfg.as_ref().map(|c| c.adapt.mode))
        .unwrap_or(if aux.is_some() { AdaptMode::Dual } else { AdaptMode::Eft });
    cfg.max_steps = a.steps.unwrap_or(cfg.max_steps);
    cfg.alpha = a.alpha.unwrap_or(cfg.alpha);
    cfg.early_stop_rel_tol = a.tol.unwrap_or(cfg.early_stop_rel_tol);
    record.set_config(&serde_json::json!({ "adapt": cfg, "loss": model_cfg.train.loss }));
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.mode == AdaptMode::Dual {
        match &aux {
            None => return Err(CliError::Config("mode dual requires aux.ckpt in the model directory".into())),
            Some((s, _)) if *s != main_spec => {
                return Err(CliError::Config("aux and main checkpoints have different specs".into()))
            }
            _ => {}
        }
    }
    let ds = read_dataset(&a.data, &skeleton, record)?;
    create_dir(&a.out)?;

    if with_metrics {
        let trained = Trained {
            main: w,
            aux: aux.map(|(_, u)| u),
            history: TrainHistory::default(),
        };
        let (method, models) = match cfg.mode {
            AdaptMode::None => (Method::None, ModelSet { pretrained: Some(trained), ..ModelSet::default() }),
            AdaptMode::Eft => (Method::Eft, ModelSet { pretrained: Some(trained), ..ModelSet::default() }),
            AdaptMode::Dual => (Method::MetaDual, ModelSet { meta_dual: Some(trained), ..ModelSet::default() }),
        };
        let eval = evaluate_method(method, &models, &main_spec, &skeleton, &ds.samples, &cfg, &model_cfg.train)?;
        let row = ResultRow {
            experiment: "eval".into(),
            method: mode_name(cfg.mode).into(),
            domain: ds.domain.name.clone(),
            seed: ds.seed,
            mpjpe_mean: eval.mean_mpjpe(),
            pa_mpjpe_mean: eval.mean_pa_mpjpe(),
            n_samples: eval.mpjpe.len(),
        };
        println!(
            "{} on {}: MPJPE {:.6} PA-MPJPE {:.6} ({} samples)",
            row.method, row.domain, row.mpjpe_mean, row.pa_mpjpe_mean, row.n_samples
        );
        let per_joint: Vec<PerJointRow> = skeleton
            .names()
            .iter()
            .enumerate()
            .map(|(j, name)| PerJointRow {
                method: row.method.clone(),
                joint: name.clone(),
                mpjpe: eval.per_joint.0[j],
                pa_mpjpe: eval.per_joint.1[j],
            })
            .collect();
        write_file(a.out.join("results.csv"), results_to_csv(&[row]).as_bytes(), record)?;
        write_file(a.out.join("per_joint.csv"), per_joint_to_csv(&per_joint).as_bytes(), record)?;
        return write_file(a.out.join("traces.csv"), traces_to_csv(&eval.traces).as_bytes(), record);
    }

    let u = aux.map(|(_, u)| u);
    let outputs = ds
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let input = s.test_input();
            let (w_final, mut trace) = match (cfg.mode, &u) {
                (AdaptMode::Dual, Some(u)) => {
                    adapt_dual(&main_spec, &main_spec, &skeleton, &w, u, input, &cfg, &model_cfg.train.loss, None)
                }
                _ => adapt_eft(&main_spec, &skeleton, &w, input, &cfg, &model_cfg.train.loss, None),
            }
            .map_err(|e| CliError::Divergence(format!("sample {i}: {e}")))?;
            trace.sample_id = i;
            let (body, cam) =
                regress(&main_spec, &w_final, input.observation).map_err(|e| CliError::Divergence(e.to_string()))?;
            let joints = forward_kinematics(&skeleton, &body).map_err(|e| CliError::Divergence(e.to_string()))?;
            let proj = project(&joints, &cam);
            let mut rows = String::new();
            for (j, (p, q)) in joints.iter().zip(&proj).enumerate() {
                let _ = writeln!(rows, "{i},{j},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}", p[0], p[1], p[2], q[0], q[1]);
            }
            Ok((rows, trace))
        })
        .collect::<Result<Vec<(String, AdaptationTrace)>, CliError>>()?;
    let mut predictions = String::from("sample_id,joint,x,y,z,u,v\n");
    let mut traces = Vec::with_capacity(outputs.len());
    for (rows, trace) in outputs {
        predictions.push_str(&rows);
        traces.push(trace);
    }
    write_file(a.out.join("predictions.csv"), predictions.as_bytes(), record)?;
    write_file(a.out.join("traces.csv"), traces_to_csv(&traces).as_bytes(), record)
}

fn experiment(a: ExperimentArgs, record: &mut RunRecord) -> Result<(), CliError> {
    let mut plan = match (&a.plan, &a.preset) {
        (Some(p), _) => {
            record.inputs.push(p.clone());
            parse_toml::<ExperimentPlan>(p)?
        }
        (None, Some(name)) => ExperimentPlan::preset(name)?,
        (None, None) => return Err(CliError::Config("--plan or --preset is required".into())),
    };
    if let Some(s) = a.seed {
        plan.seeds = vec![s];
    } else if a.plan.is_none() {
        if let Ok(v) = std::env::var("MADAPT_SEED") {
            plan.seeds = vec![resolve_seed(None, None).map_err(|_| {
                CliError::Config(format!("MADAPT_SEED must be an unsigned integer, got {v:?}"))
            })?];
        }
    }
    if let Some(m) = a.methods {
        plan.methods = m;
    }
    plan.test_samples = a.test_samples.unwrap_or(plan.test_samples);
    plan.train_batches = a.train_batches.unwrap_or(plan.train_batches);
    plan.train.epochs = a.epochs.unwrap_or(plan.train.epochs);
    record.seed = plan.seeds.first().copied();
    record.set_config(&plan);
    let skeleton = load_skeleton(a.skeleton.as_deref(), record)?;
    let output = run_experiment(&plan, &skeleton)?;
    for r in &output.summary {
        println!(
            "{:<10} {:<28} MPJPE {:.6} ± {:.6}  PA-MPJPE {:.6} ± {:.6}  ({} seeds)",
            r.method, r.domain, r.mpjpe_mean, r.mpjpe_std, r.pa_mpjpe_mean, r.pa_mpjpe_std, r.n_seeds
        );
    }
    for g in &output.grid {
        println!(
            "alpha={:e} beta_lr={:e} k={} {}: {:?} MPJPE {:.6}",
            g.alpha, g.beta_lr, g.inner_steps, g.method, g.status, g.mpjpe_mean
        );
    }
    let written = write_output(&output, &a.out)?;
    record.artifacts.extend(written.into_iter().filter(|p| !p.ends_with("timing.csv")));
    Ok(())
}

fn grad_check(a: GradCheckArgs, record: &mut RunRecord) -> Result<(), CliError> {
    let seed = resolve_seed(a.seed, None)?;
    record.seed = Some(seed);
    record.set_config(&serde_json::json!({ "instances": a.instances, "tolerance": GRAD_CHECK_TOL }));
    if a.instances == 0 {
        return Err(CliError::Config("--instances must be at least 1".into()));
    }
    let rows = run_grad_check(seed, a.instances).map_err(|e| CliError::Divergence(e.to_string()))?;
    create_dir(&a.out)?;
    write_file(a.out.join("grad_check.csv"), grad_check_to_csv(&rows).as_bytes(), record)?;
    for name in LOSS_NAMES {
        let worst = rows
            .iter()
            .filter(|r| r.loss == name)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max);
        let status = if worst < GRAD_CHECK_TOL { "ok" } else { "FAIL" };
        println!("{name:<9} max relative error {worst:.3e} {status}");
    }
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(CliError::CheckFailed(format!(
            "{failed} of {} gradient checks exceed {GRAD_CHECK_TOL:e}",
            rows.len()
        )));
    }
    Ok(())
}
