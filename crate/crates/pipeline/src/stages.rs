//! The pipeline stages, each reading the previous stage's artifacts from
//! the output directory:
//!
//! ```text
//! out/config.txt                       resolved configuration
//! out/dataset/patient_NNNN/...         synth
//! out/models/artery.ckpt, myo.ckpt     pretrain-artery, pretrain-myo
//! out/dataset/patient_NNNN/artery_enc.bin, myo_feat.bin    encode
//! out/runs/<mode>/fold_K/ckpt_NNNNNN.ckpt                   train
//! out/eval/<mode>.summary, roc_<mode>_<fold>.csv            eval
//! out/report.txt                                             report
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ffrmil_core::{NamedTensors, Scalar};

use crate::artery::{pretrain_artery as train_artery_encoder, ArteryEncoder, ArteryPretrainConfig, ENCODING_LEN};
use crate::config::PipelineConfig;
use crate::error::{io_err, Error, Result};
use crate::eval::{evaluate_last, format_report, stratified_kfold, summarize, CvSummary, FoldPlan};
use crate::io::{artery_encodings_from_bytes, artery_encodings_to_bytes, myo_features_from_bytes, myo_features_to_bytes, Volume};
use crate::mil::{train_mil, Bag, MilModel, Mode};
use crate::myo::{cluster_myocardium, pretrain_myo as train_myo_encoder, MyoClusterSet, MyoEncoder, MyoPretrainConfig, FEATURE_LEN};
use crate::synth::cohort::{generate_patient, patient_seed, splitmix64};
use crate::synth::dataset::{list_patients, read_meta, read_patient, write_patient, MYO_MASK_FILE, MYO_VOLUME_FILE, artery_file};
use crate::synth::{CohortConfig, PatientPlan};

pub const ARTERY_ENC_FILE: &str = "artery_enc.bin";
pub const MYO_FEAT_FILE: &str = "myo_feat.bin";
pub const ARTERY_MODEL: &str = "artery.ckpt";
pub const MYO_MODEL: &str = "myo.ckpt";

const PRETRAIN_SALT: u64 = 0x7072_6574_7261_696e;
const CLUSTER_SALT: u64 = 0x636c_7573_7465_7273;
const MIL_SALT: u64 = 0x6d69_6c5f_6e65_7473;

pub fn dataset_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.out.join("dataset")
}

pub fn models_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.out.join("models")
}

pub fn run_dir(cfg: &PipelineConfig, mode: Mode) -> PathBuf {
    cfg.out.join("runs").join(mode.to_string())
}

pub fn fold_dir(cfg: &PipelineConfig, mode: Mode, fold: usize) -> PathBuf {
    run_dir(cfg, mode).join(format!("fold_{fold}"))
}

pub fn eval_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.out.join("eval")
}

pub fn roc_file(cfg: &PipelineConfig, mode: Mode, fold: usize) -> PathBuf {
    eval_dir(cfg).join(format!("roc_{mode}_{fold}.csv"))
}

pub fn summary_file(cfg: &PipelineConfig, mode: Mode) -> PathBuf {
    eval_dir(cfg).join(format!("{mode}.summary"))
}

pub fn report_file(cfg: &PipelineConfig) -> PathBuf {
    cfg.out.join("report.txt")
}

fn missing(what: impl Into<String>, stage: &str) -> Error {
    Error::MissingStage {
        what: what.into(),
        stage: stage.to_string(),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

fn save_named(path: &Path, nt: &NamedTensors) -> Result<()> {
    write(path, nt.to_bytes())
}

fn load_named(path: &Path) -> Result<NamedTensors> {
    Ok(NamedTensors::from_bytes(&read(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?)
}

/// Writes the resolved configuration next to the outputs.
pub fn echo_config(cfg: &PipelineConfig) -> Result<()> {
    write(&cfg.out.join("config.txt"), cfg.to_text())
}

/// Seed of the pretraining cohort, disjoint from the classification cohort.
pub fn pretrain_cohort(cfg: &PipelineConfig) -> CohortConfig {
    CohortConfig {
        patients: cfg.pretrain_patients,
        seed: splitmix64(cfg.cohort.seed ^ PRETRAIN_SALT),
        ..cfg.cohort.clone()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub patients: usize,
    pub positives: usize,
    pub arteries: usize,
    pub mean_min_ffr: f64,
}

pub fn synth(cfg: &PipelineConfig) -> Result<SynthSummary> {
    cfg.validate()?;
    echo_config(cfg)?;
    let root = dataset_dir(cfg);
    if root.exists() {
        fs::remove_dir_all(&root).map_err(io_err(&root))?;
    }
    fs::create_dir_all(&root).map_err(io_err(&root))?;
    let c = &cfg.cohort;
    let mut s = SynthSummary {
        patients: c.patients,
        positives: 0,
        arteries: 0,
        mean_min_ffr: 0.0,
    };
    for i in 0..c.patients {
        let rec = generate_patient(c, i, patient_seed(c.seed, i))?;
        s.positives += rec.plan.label as usize;
        s.arteries += rec.mprs.len();
        s.mean_min_ffr += rec.plan.min_ffr / c.patients as f64;
        write_patient(&root, &rec)?;
    }
    Ok(s)
}

fn log_losses(name: &str, r: &crate::artery::PretrainReport) -> String {
    let n = r.losses.len();
    let head = r.losses.iter().take(10).sum::<f64>() / n.clamp(1, 10) as f64;
    let tail = r.losses.iter().rev().take(10).sum::<f64>() / n.clamp(1, 10) as f64;
    format!(
        "{name}: iterations {n}, loss first10 {head:.6} last10 {tail:.6}, held-out mse before {:.6} after {:.6}\n",
        r.heldout_mse_before, r.heldout_mse_after
    )
}

pub fn pretrain_artery<T: Scalar>(cfg: &PipelineConfig) -> Result<String> {
    cfg.validate()?;
    let pc = pretrain_cohort(cfg);
    let mut mprs: Vec<Volume> = Vec::new();
    for i in 0..pc.patients {
        mprs.extend(generate_patient(&pc, i, patient_seed(pc.seed, i))?.mprs);
    }
    let seed = pc.seed;
    let acfg = ArteryPretrainConfig {
        vcae: cfg.cae_config(cfg.vcae_iterations, seed ^ 1),
        seq: cfg.cae_config(cfg.seq_iterations, seed ^ 2),
        patches: cfg.pretrain_patches,
        seed,
    };
    let (_, nt, [v, s]) = train_artery_encoder::<T>(&mprs, &acfg)?;
    save_named(&models_dir(cfg).join(ARTERY_MODEL), &nt)?;
    let log = log_losses("vcae", &v) + &log_losses("sequence cae", &s);
    write(&models_dir(cfg).join("artery_pretrain.log"), &log)?;
    Ok(log)
}

pub fn pretrain_myo<T: Scalar>(cfg: &PipelineConfig) -> Result<String> {
    cfg.validate()?;
    let pc = pretrain_cohort(cfg);
    let mut vols = Vec::new();
    for i in 0..pc.patients {
        let r = generate_patient(&pc, i, patient_seed(pc.seed, i))?;
        vols.push((r.myocardium, r.mask));
    }
    // myocardium patches are 30x smaller than artery patches; double the batch
    let mcfg = MyoPretrainConfig {
        cae: crate::model::CaeTrainConfig {
            batch: cfg.pretrain_batch * 2,
            ..cfg.cae_config(cfg.myo_iterations, pc.seed ^ 3)
        },
        patches: cfg.pretrain_patches,
        seed: pc.seed ^ 4,
    };
    let (_, nt, r) = train_myo_encoder::<T>(&vols, &mcfg)?;
    save_named(&models_dir(cfg).join(MYO_MODEL), &nt)?;
    let log = log_losses("myocardium cae", &r);
    write(&models_dir(cfg).join("myo_pretrain.log"), &log)?;
    Ok(log)
}

fn patient_dirs(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let root = dataset_dir(cfg);
    if !root.is_dir() {
        return Err(missing(format!("dataset at {}", root.display()), "synth"));
    }
    let dirs = list_patients(&root)?;
    if dirs.is_empty() {
        return Err(missing(format!("patients in {}", root.display()), "synth"));
    }
    Ok(dirs)
}

/// Writes `artery_enc.bin` and `myo_feat.bin` for every patient.
pub fn encode<T: Scalar>(cfg: &PipelineConfig) -> Result<usize> {
    cfg.validate()?;
    let dirs = patient_dirs(cfg)?;
    let artery_path = models_dir(cfg).join(ARTERY_MODEL);
    if !artery_path.is_file() {
        return Err(missing(format!("artery encoder {}", artery_path.display()), "pretrain-artery"));
    }
    let myo_path = models_dir(cfg).join(MYO_MODEL);
    if !myo_path.is_file() {
        return Err(missing(format!("myocardium encoder {}", myo_path.display()), "pretrain-myo"));
    }
    let artery = ArteryEncoder::<T>::from_named(&load_named(&artery_path)?)?;
    let myo = MyoEncoder::<T>::from_named(&load_named(&myo_path)?)?;
    let cluster_seed = splitmix64(cfg.cohort.seed ^ CLUSTER_SALT);
    // masks repeat across patients, so their clusterings are shared
    let mut clusterings: HashMap<Vec<u32>, MyoClusterSet> = HashMap::new();
    for dir in &dirs {
        let plan = read_meta(dir)?;
        let mut encodings = Vec::with_capacity(plan.arteries.len());
        for i in 0..plan.arteries.len() {
            encodings.push(artery.encode(&Volume::load(&artery_file(dir, i))?)?);
        }
        write(&dir.join(ARTERY_ENC_FILE), artery_encodings_to_bytes(&encodings))?;
        let volume = Volume::load(&dir.join(MYO_VOLUME_FILE))?;
        let mask = Volume::load(&dir.join(MYO_MASK_FILE))?;
        let key: Vec<u32> = mask.data.iter().map(|v| v.to_bits()).collect();
        if !clusterings.contains_key(&key) {
            clusterings.insert(key.clone(), cluster_myocardium(&mask, cluster_seed)?);
        }
        let features = myo.features(&volume, &clusterings[&key])?;
        write(&dir.join(MYO_FEAT_FILE), myo_features_to_bytes(&features))?;
    }
    Ok(dirs.len())
}

/// Bags, minimum FFR and plans of every patient, in directory order.
pub fn load_bags(cfg: &PipelineConfig) -> Result<(Vec<Bag>, Vec<PatientPlan>)> {
    let dirs = patient_dirs(cfg)?;
    let mut bags = Vec::with_capacity(dirs.len());
    let mut plans = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let plan = read_meta(dir)?;
        let (ap, mp) = (dir.join(ARTERY_ENC_FILE), dir.join(MYO_FEAT_FILE));
        if !ap.is_file() || !mp.is_file() {
            return Err(missing(format!("encodings in {}", dir.display()), "encode"));
        }
        let fmt = |path: &Path| {
            let path = path.to_path_buf();
            move |reason| Error::Format { path, reason }
        };
        let arteries = artery_encodings_from_bytes(&read(&ap)?, ENCODING_LEN).map_err(fmt(&ap))?;
        let myo = myo_features_from_bytes(&read(&mp)?, FEATURE_LEN).map_err(fmt(&mp))?;
        if arteries.len() != plan.arteries.len() {
            return Err(Error::Format {
                path: ap,
                reason: format!("{} encodings for {} arteries", arteries.len(), plan.arteries.len()),
            });
        }
        bags.push(Bag {
            arteries,
            myo,
            label: plan.label,
        });
        plans.push(plan);
    }
    Ok((bags, plans))
}

pub fn fold_plan(cfg: &PipelineConfig, bags: &[Bag]) -> Result<FoldPlan> {
    let labels: Vec<bool> = bags.iter().map(|b| b.label).collect();
    stratified_kfold(&labels, cfg.folds, cfg.cohort.seed)
}

/// Seed of fold `fold`'s classifier; identical across modes.
pub fn fold_seed(cfg: &PipelineConfig, fold: usize) -> u64 {
    splitmix64(cfg.cohort.seed ^ MIL_SALT ^ (fold as u64).wrapping_mul(0x9e37_79b9))
}

fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("ckpt_{iteration:06}.ckpt"))
}

fn folds_text(plan: &FoldPlan) -> String {
    let mut s = format!("k = {}\n", plan.k);
    for (i, f) in plan.assignment.iter().enumerate() {
        let _ = writeln!(s, "{i} = {f}");
    }
    s
}

/// Trains one classifier per fold and writes its checkpoints.
pub fn train<T: Scalar>(cfg: &PipelineConfig, mode: Mode) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let (bags, _) = load_bags(cfg)?;
    let plan = fold_plan(cfg, &bags)?;
    let rd = run_dir(cfg, mode);
    if rd.exists() {
        fs::remove_dir_all(&rd).map_err(io_err(&rd))?;
    }
    write(&rd.join("folds.txt"), folds_text(&plan))?;
    let mut losses = Vec::new();
    for fold in 0..plan.k {
        let train_bags: Vec<Bag> = plan.train(fold).into_iter().map(|i| bags[i].clone()).collect();
        let seed = fold_seed(cfg, fold);
        let mut model = MilModel::<T>::new(mode, seed);
        model.fit_standardizers(&train_bags);
        let dir = fold_dir(cfg, mode, fold);
        let summary = train_mil(&mut model, &train_bags, &cfg.train_config(seed), |it, m, adam| {
            save_named(&checkpoint_path(&dir, it), &m.to_named(Some(adam), it as u64))
        })?;
        losses.push(summary.interval_losses);
    }
    Ok(losses)
}

/// Evaluates the last checkpoints of every fold and writes ROC curves and
/// the cross-validated summary.
pub fn eval<T: Scalar>(cfg: &PipelineConfig, mode: Mode) -> Result<CvSummary> {
    cfg.validate()?;
    let (bags, plans) = load_bags(cfg)?;
    let plan = fold_plan(cfg, &bags)?;
    let folds_path = run_dir(cfg, mode).join("folds.txt");
    match fs::read_to_string(&folds_path) {
        Ok(text) if text == folds_text(&plan) => {}
        Ok(_) => {
            return Err(missing(
                format!("{mode} runs matching the current folds"),
                &format!("train --mode {mode}"),
            ))
        }
        Err(_) => return Err(missing(format!("{mode} training runs"), &format!("train --mode {mode}"))),
    }
    let t = cfg.train_config(0);
    let iterations: Vec<usize> = (1..=t.checkpoint_count()).map(|i| i * t.checkpoint_interval).collect();
    let wanted = &iterations[iterations.len() - cfg.eval_checkpoints..];
    let mut folds = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        let dir = fold_dir(cfg, mode, fold);
        let mut models = Vec::with_capacity(wanted.len());
        for &it in wanted {
            let path = checkpoint_path(&dir, it);
            if !path.is_file() {
                return Err(missing(format!("checkpoint {}", path.display()), &format!("train --mode {mode}")));
            }
            let (m, _) = MilModel::<T>::from_named(&load_named(&path)?)?;
            models.push(m);
        }
        let test = plan.test(fold);
        let test_bags: Vec<Bag> = test.iter().map(|&i| bags[i].clone()).collect();
        let ffr: Vec<f64> = test.iter().map(|&i| plans[i].min_ffr).collect();
        let fe = evaluate_last(&models, cfg.eval_checkpoints, &test_bags, &ffr, mode)?;
        write(&roc_file(cfg, mode, fold), fe.mean_roc.to_csv())?;
        folds.push(fe);
    }
    let summary = summarize(mode, &folds)?;
    write(&summary_file(cfg, mode), summary_to_text(&summary))?;
    Ok(summary)
}

pub fn summary_to_text(s: &CvSummary) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
    let mut t = String::new();
    let _ = writeln!(t, "mode = {}", s.mode);
    let _ = writeln!(
        t,
        "slot_auc = {}",
        s.slot_auc.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    );
    let _ = writeln!(t, "auc_mean = {}", s.auc_mean);
    let _ = writeln!(t, "auc_sd_checkpoints = {}", s.auc_sd_checkpoints);
    let _ = writeln!(t, "auc_sd_folds = {}", s.auc_sd_folds);
    let _ = writeln!(t, "sensitivity = {}", s.sensitivity);
    let _ = writeln!(t, "specificity = {}", s.specificity);
    for (i, (se, sp)) in s.ranges.iter().enumerate() {
        let _ = writeln!(t, "range{i} = {},{}", opt(*se), opt(*sp));
    }
    t
}

pub fn summary_from_text(text: &str) -> std::result::Result<CvSummary, String> {
    let kv: HashMap<&str, &str> = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim(), v.trim()))
        .collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| format!("missing `{k}`"));
    let num = |k: &str| -> std::result::Result<f64, String> { get(k)?.parse().map_err(|_| format!("bad `{k}`")) };
    let opt = |s: &str| -> std::result::Result<Option<f64>, String> {
        if s == "-" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| format!("bad range value `{s}`"))
        }
    };
    let mut ranges = [(None, None); 3];
    for (i, r) in ranges.iter_mut().enumerate() {
        let v = get(&format!("range{i}"))?;
        let (a, b) = v.split_once(',').ok_or("malformed range")?;
        *r = (opt(a)?, opt(b)?);
    }
    Ok(CvSummary {
        mode: get("mode")?.parse()?,
        slot_auc: get("slot_auc")?
            .split(',')
            .map(|x| x.parse().map_err(|_| "bad slot_auc".to_string()))
            .collect::<std::result::Result<_, _>>()?,
        auc_mean: num("auc_mean")?,
        auc_sd_checkpoints: num("auc_sd_checkpoints")?,
        auc_sd_folds: num("auc_sd_folds")?,
        sensitivity: num("sensitivity")?,
        specificity: num("specificity")?,
        ranges,
    })
}

pub fn load_summary(cfg: &PipelineConfig, mode: Mode) -> Result<CvSummary> {
    let path = summary_file(cfg, mode);
    let text = fs::read_to_string(&path).map_err(|_| missing(format!("{mode} evaluation"), &format!("eval --mode {mode}")))?;
    summary_from_text(&text).map_err(|reason| Error::Format { path, reason })
}

/// The three-row ablation table, written to `report.txt`.
pub fn report(cfg: &PipelineConfig) -> Result<String> {
    let rows = Mode::ALL
        .into_iter()
        .map(|m| load_summary(cfg, m))
        .collect::<Result<Vec<_>>>()?;
    let text = format_report(&rows);
    write(&report_file(cfg), &text)?;
    Ok(text)
}

/// Reads back a patient written by [`synth`].
pub fn read_dataset_patient(cfg: &PipelineConfig, index: usize) -> Result<crate::synth::PatientRecord> {
    read_patient(&crate::synth::dataset::patient_dir(&dataset_dir(cfg), index))
}
