//! Experiment orchestration: per-fold training, the three-way method
//! comparison, merge-point ablation and report emission.

pub mod config;
pub mod gradient;
pub mod train;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::backbone::{BackboneSpec, ParamStore, Task};
use crate::data::{container, make_folds, synth, Dataset, FoldSpec};
use crate::error::{Error, Result};
use crate::losses::{compute_weights, IntensityCounts, WeightTables};
use crate::metrics::{build_report, reports_to_csv, MetricReport, PredictionRow, PredictionSet};
use crate::siamese::{predict, DetectionRule, MergePoint, PredictOptions, PredictionMode};

pub use config::{DataSource, ExperimentConfig};
pub use train::{epoch_order, mean_loss, train, Sample, TrainLog, TrainSettings};

/// Loads the manifest or generates the synthetic dataset named by `cfg`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match (&cfg.data, cfg.synth_config()) {
        (DataSource::Manifest(p), _) => Dataset::load(p),
        (DataSource::Synthetic(_), Some(s)) => Ok(synth::generate(&s)?.dataset),
        (DataSource::Synthetic(_), None) => unreachable!("synthetic source has a config"),
    }
}

pub fn backbone_for(cfg: &ExperimentConfig, data: &Dataset) -> Result<BackboneSpec> {
    let shape = data.image_shape().ok_or_else(|| Error::Data("dataset has no frames".into()))?;
    cfg.backbone((shape[0], shape[1], shape[2]), data.num_aus())
}

/// Train/validation record indices of one fold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train_participants: Vec<String>,
    pub val_participants: Vec<String>,
    pub train: Vec<usize>,
    /// Validation records that are scored: every frame except the
    /// participant's reference.
    pub scored: Vec<usize>,
    /// Reference record per validation participant.
    pub val_references: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn new(data: &Dataset, folds: &FoldSpec, fold: usize) -> Result<Self> {
        if fold >= folds.k {
            return Err(Error::Protocol(format!("fold {fold} of {}", folds.k)));
        }
        let mut train_ps = BTreeSet::new();
        let mut val_ps = BTreeSet::new();
        for r in &data.manifest.records {
            let f = folds
                .fold_of(&r.participant)
                .ok_or_else(|| Error::Protocol(format!("participant {} has no fold", r.participant)))?;
            if f == fold {
                val_ps.insert(r.participant.clone());
            } else {
                train_ps.insert(r.participant.clone());
            }
        }
        let val_references = val_ps
            .iter()
            .map(|p| Ok((p.clone(), data.reference_index(p)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let refs: BTreeSet<usize> = val_references.values().copied().collect();
        let mut train = Vec::new();
        let mut scored = Vec::new();
        for (i, r) in data.manifest.records.iter().enumerate() {
            if train_ps.contains(&r.participant) {
                train.push(i);
            } else if !refs.contains(&i) {
                scored.push(i);
            }
        }
        Ok(FoldSplit {
            fold,
            train_participants: train_ps.into_iter().collect(),
            val_participants: val_ps.into_iter().collect(),
            train,
            scored,
            val_references,
        })
    }

    /// Training samples; Siamese samples pair every frame with its
    /// participant's reference.
    pub fn train_samples(&self, data: &Dataset, siamese: bool) -> Result<Vec<Sample>> {
        let mut refs = BTreeMap::new();
        if siamese {
            for p in &self.train_participants {
                refs.insert(p.as_str(), data.reference_index(p)?);
            }
        }
        Ok(self
            .train
            .iter()
            .map(|&i| Sample {
                target: i,
                reference: siamese.then(|| refs[data.manifest.records[i].participant.as_str()]),
            })
            .collect())
    }

    pub fn weights(&self, data: &Dataset) -> Result<WeightTables> {
        let rows = self.train.iter().map(|&i| data.manifest.records[i].intensities.as_slice());
        Ok(compute_weights(&IntensityCounts::from_labels(data.num_aus(), rows)?))
    }
}

/// Checks that the fold never trains on a validation participant and never
/// scores a reference frame, and returns the counts proving it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub train_participants: usize,
    pub val_participants: usize,
    pub train_frames: usize,
    pub scored_frames: usize,
    pub val_frames_in_training: usize,
    pub reference_frames_excluded: usize,
    pub reference_frames_scored: usize,
}

impl FoldAudit {
    pub fn of(data: &Dataset, split: &FoldSplit) -> Self {
        let val: BTreeSet<&str> = split.val_participants.iter().map(String::as_str).collect();
        let refs: BTreeSet<usize> = split.val_references.values().copied().collect();
        FoldAudit {
            fold: split.fold,
            train_participants: split.train_participants.len(),
            val_participants: split.val_participants.len(),
            train_frames: split.train.len(),
            scored_frames: split.scored.len(),
            val_frames_in_training: split
                .train
                .iter()
                .filter(|&&i| val.contains(data.manifest.records[i].participant.as_str()))
                .count(),
            reference_frames_excluded: refs.len(),
            reference_frames_scored: split.scored.iter().filter(|i| refs.contains(i)).count(),
        }
    }

    pub fn clean(&self) -> bool {
        self.val_frames_in_training == 0 && self.reference_frames_scored == 0
    }
}

/// Models trained for one fold.
#[derive(Clone, Debug)]
pub struct FoldModels {
    pub split: FoldSplit,
    pub weights: WeightTables,
    /// Plain backbone shared by NCG and OFC_BS.
    pub plain: Option<ParamStore>,
    pub csn: Vec<(MergePoint, ParamStore)>,
    pub logs: Vec<TrainLog>,
}

impl FoldModels {
    pub fn params_for(&self, mode: PredictionMode) -> Option<&ParamStore> {
        match mode.merge() {
            None => self.plain.as_ref(),
            Some(m) => self.csn.iter().find(|(k, _)| *k == m).map(|(_, p)| p),
        }
    }
}

pub fn train_settings(cfg: &ExperimentConfig, fold: usize) -> TrainSettings {
    TrainSettings {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        // Every model of a fold starts from the same initialization.
        seed: cfg.seed.wrapping_add(fold as u64),
        optim: cfg.optim.clone(),
        fc_input: cfg.fc_input,
    }
}

/// Trains every model the configured modes need on one fold.
pub fn train_fold(cfg: &ExperimentConfig, spec: &BackboneSpec, data: &Dataset, folds: &FoldSpec, fold: usize) -> Result<FoldModels> {
    let split = FoldSplit::new(data, folds, fold)?;
    let weights = split.weights(data)?;
    let settings = train_settings(cfg, fold);
    let mut models = FoldModels {
        split,
        weights,
        plain: None,
        csn: Vec::new(),
        logs: Vec::new(),
    };
    if cfg.modes.iter().any(|m| m.merge().is_none()) {
        let samples = models.split.train_samples(data, false)?;
        let (p, log) = train(spec, data, &samples, None, &models.weights, &settings)?;
        models.plain = Some(p);
        models.logs.push(log);
    }
    let mut merges: Vec<MergePoint> = Vec::new();
    for m in cfg.modes.iter().filter_map(|m| m.merge()) {
        if !merges.contains(&m) {
            merges.push(m);
        }
    }
    if !merges.is_empty() {
        let samples = models.split.train_samples(data, true)?;
        for m in merges {
            let (p, log) = train(spec, data, &samples, Some(m), &models.weights, &settings)?;
            models.csn.push((m, p));
            models.logs.push(log);
        }
    }
    Ok(models)
}

pub fn predict_options(cfg: &ExperimentConfig) -> PredictOptions {
    PredictOptions {
        clamp: cfg.clamp,
        fc_input: cfg.fc_input,
    }
}

pub fn detection_rule(cfg: &ExperimentConfig, mode: PredictionMode) -> Option<DetectionRule> {
    (cfg.task == Task::Detection).then(|| DetectionRule::for_mode(mode, cfg.threshold, cfg.bs_delta))
}

/// Predictions of one mode on the fold's scored validation frames. OFC
/// modes use each participant's own reference frame.
pub fn predict_split(
    cfg: &ExperimentConfig,
    spec: &BackboneSpec,
    params: &ParamStore,
    data: &Dataset,
    split: &FoldSplit,
    mode: PredictionMode,
) -> Result<PredictionSet> {
    let mut set = PredictionSet::new(data.manifest.au_names.clone());
    let opts = predict_options(cfg);
    for chunk in split.scored.chunks(cfg.batch_size.max(1)) {
        let x = data.batch(chunk)?;
        let refs = if mode.needs_reference() {
            let r: Vec<usize> = chunk
                .iter()
                .map(|&i| split.val_references[&data.manifest.records[i].participant])
                .collect();
            Some(data.batch(&r)?)
        } else {
            None
        };
        let out = predict(spec, params, mode, &x, refs.as_ref(), &opts)?;
        let n = data.num_aus();
        for (b, &i) in chunk.iter().enumerate() {
            let rec = &data.manifest.records[i];
            for au in 0..n {
                set.push(PredictionRow {
                    participant: rec.participant.clone(),
                    frame: rec.frame,
                    au,
                    label: rec.intensities[au],
                    prediction: out.data()[b * n + au],
                })?;
            }
        }
    }
    Ok(set)
}

#[derive(Clone, Debug, Serialize)]
pub struct ModeResult {
    pub mode: PredictionMode,
    #[serde(skip)]
    pub predictions: Vec<PredictionSet>,
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldWeights {
    pub fold: usize,
    pub weights: WeightTables,
}

/// Everything a cross-validation run produces.
#[derive(Clone, Debug, Serialize)]
pub struct CrossvalResult {
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub seed: u64,
    pub task: Task,
    pub folds: FoldSpec,
    pub audit: Vec<FoldAudit>,
    pub weights: Vec<FoldWeights>,
    pub training: Vec<Vec<TrainLog>>,
    pub modes: Vec<ModeResult>,
}

impl CrossvalResult {
    pub fn reports(&self) -> Vec<MetricReport> {
        self.modes.iter().map(|m| m.report.clone()).collect()
    }

    pub fn report(&self, mode: PredictionMode) -> Option<&MetricReport> {
        self.modes.iter().find(|m| m.mode == mode).map(|m| &m.report)
    }

    pub fn to_csv(&self) -> String {
        reports_to_csv(&self.reports())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `report.csv`, `report.json` and one prediction CSV per mode.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        put("report.csv", self.to_csv())?;
        put("report.json", self.to_json()?)?;
        for m in &self.modes {
            let mut all = PredictionSet::new(m.report.au_names.clone());
            for f in &m.predictions {
                all.extend(f)?;
            }
            put(&format!("predictions_{}.csv", m.mode.to_string().replace(':', "_")), all.to_csv())?;
        }
        Ok(())
    }
}

/// Participant-exclusive cross-validation of every configured mode.
pub fn run_crossval(cfg: &ExperimentConfig, data: &Dataset) -> Result<CrossvalResult> {
    cfg.validate()?;
    if cfg.folds < 2 {
        return Err(Error::Protocol(format!(
            "cross-validation needs at least 2 folds, got {}",
            cfg.folds
        )));
    }
    let spec = backbone_for(cfg, data)?;
    let folds = make_folds(&data.manifest, cfg.folds, cfg.seed)?;
    folds.validate(&data.manifest)?;

    let mut per_mode: Vec<Vec<PredictionSet>> = vec![Vec::new(); cfg.modes.len()];
    let mut audit = Vec::new();
    let mut weights = Vec::new();
    let mut training = Vec::new();
    for fold in 0..folds.k {
        let models = train_fold(cfg, &spec, data, &folds, fold)?;
        let a = FoldAudit::of(data, &models.split);
        if !a.clean() {
            return Err(Error::Protocol(format!("fold {fold} leaks validation data: {a:?}")));
        }
        for (i, &mode) in cfg.modes.iter().enumerate() {
            let params = models.params_for(mode).expect("trained for every mode");
            per_mode[i].push(predict_split(cfg, &spec, params, data, &models.split, mode)?);
        }
        audit.push(a);
        weights.push(FoldWeights {
            fold,
            weights: models.weights,
        });
        training.push(models.logs);
    }

    let modes = cfg
        .modes
        .iter()
        .zip(per_mode)
        .map(|(&mode, predictions)| {
            let report = build_report(&mode.to_string(), cfg.task, &predictions, detection_rule(cfg, mode))?;
            Ok(ModeResult {
                mode,
                predictions,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossvalResult {
        config: cfg.to_kv(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        task: cfg.task,
        folds,
        audit,
        weights,
        training,
        modes,
    })
}

/// One Siamese variant per merge point, with shared seed and folds.
pub fn run_ablation(cfg: &ExperimentConfig, data: &Dataset, merges: &[MergePoint]) -> Result<CrossvalResult> {
    if merges.len() < 2 {
        return Err(Error::Config(format!("ablation needs at least 2 merge points, got {}", merges.len())));
    }
    let mut cfg = cfg.clone();
    cfg.modes = merges.iter().map(|&m| PredictionMode::OfcCsn(m)).collect();
    run_crossval(&cfg, data)
}

/// Writes a parameter checkpoint as a CSNT container.
pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    container::save(path, &params.named_tensors())
}
