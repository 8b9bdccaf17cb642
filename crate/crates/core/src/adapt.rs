//! Generalization across skins: pooled multi-sensor training, triplet
//! regularization and label-free fine-tuning on a new skin.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    line_adaptation_protocol, sample_triplets, snake_grid_protocol, Dataset, FleetSpec, Indentation, LineParams,
    LinePath, LineTrajectory, SnakeGridParams, sensor_id,
};
use crate::error::{Error, Result};
use crate::eval::{metrics_from_rows, predictions, EvalReport, FoldResult};
use crate::field_sim::{BoardGeometry, SensorInstance, SkinPhysics};
use crate::hashing::stable_hash;
use crate::neural::{
    fit_decoder, loss_and_gradients, objective_loss, Adam, LabeledBatch, LabeledTripletSampler, MlpModel, Objective,
    OutputKind, TrainConfig, TrainLog, TripletBatch,
};
use crate::protocol::BaselineMode;

/// Labeled data of one skin.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorData {
    pub sensor_id: String,
    pub board: usize,
    pub skin: usize,
    pub dataset: Dataset,
}

/// One cross-validation split by sensor id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Per-sensor datasets with cross-validation folds.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSensorDataset {
    sensors: Vec<SensorData>,
    folds: Vec<Fold>,
}

impl MultiSensorDataset {
    /// Checks that ids are unique, folds reference known ids and no fold shares a sensor between train and test.
    pub fn new(sensors: Vec<SensorData>, folds: Vec<Fold>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &sensors {
            if !seen.insert(s.sensor_id.as_str()) {
                return Err(Error::InvalidParameter(format!("duplicate sensor id {}", s.sensor_id)));
            }
        }
        for f in &folds {
            for id in f.train.iter().chain(&f.test) {
                if !seen.contains(id.as_str()) {
                    return Err(Error::InvalidParameter(format!("fold {} names unknown sensor {id}", f.index)));
                }
            }
            if let Some(shared) = f.test.iter().find(|id| f.train.contains(id)) {
                return Err(Error::InvalidParameter(format!(
                    "fold {} has sensor {shared} in both train and test",
                    f.index
                )));
            }
        }
        Ok(Self { sensors, folds })
    }

    /// Leave-one-board-out folds: fold `b` tests on every skin of board `b`.
    pub fn by_board(sensors: Vec<SensorData>) -> Result<Self> {
        let mut boards: Vec<usize> = sensors.iter().map(|s| s.board).collect();
        boards.sort_unstable();
        boards.dedup();
        let folds = boards
            .iter()
            .enumerate()
            .map(|(index, &b)| Fold {
                index,
                train: sensors.iter().filter(|s| s.board != b).map(|s| s.sensor_id.clone()).collect(),
                test: sensors.iter().filter(|s| s.board == b).map(|s| s.sensor_id.clone()).collect(),
            })
            .collect();
        Self::new(sensors, folds)
    }

    pub fn sensors(&self) -> &[SensorData] {
        &self.sensors
    }

    pub fn folds(&self) -> &[Fold] {
        &self.folds
    }

    pub fn sensor(&self, id: &str) -> Result<&SensorData> {
        self.sensors
            .iter()
            .find(|s| s.sensor_id == id)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown sensor {id}")))
    }

    pub fn ids(&self) -> Vec<String> {
        self.sensors.iter().map(|s| s.sensor_id.clone()).collect()
    }

    /// Sensors named in `ids`, without folds.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        let sensors = ids.iter().map(|id| self.sensor(id).cloned()).collect::<Result<Vec<_>>>()?;
        Self::new(sensors, Vec::new())
    }

    /// All samples in sensor order.
    pub fn pooled(&self) -> Vec<Indentation> {
        self.sensors.iter().flat_map(|s| s.dataset.samples.iter().cloned()).collect()
    }
}

/// Unlabeled line trajectories from one target skin.
///
/// Holds flux only; the generated ground-truth paths never enter this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSet {
    pub sensor_id: String,
    pub trajectories: Vec<LineTrajectory>,
    pub budget: usize,
}

/// Field names that would carry contact labels.
const LABEL_KEYS: [&str; 7] = ["location", "force", "depth", "start", "end", "paths", "path"];

impl AdaptationSet {
    pub fn new(sensor_id: impl Into<String>, trajectories: Vec<LineTrajectory>) -> Self {
        let budget = trajectories.iter().map(LineTrajectory::n_points).sum();
        Self {
            sensor_id: sensor_id.into(),
            trajectories,
            budget,
        }
    }

    /// First `budget` indentations in recording order; lines left with fewer than 3 points are dropped.
    pub fn truncated(&self, budget: usize) -> Self {
        let mut left = budget;
        let mut out = Vec::new();
        for t in &self.trajectories {
            let n = t.n_points().min(left);
            if n >= 3 {
                out.push(LineTrajectory {
                    ordered_flux: t.ordered_flux[..n].to_vec(),
                });
            }
            left -= n;
            if left == 0 {
                break;
            }
        }
        Self::new(self.sensor_id.clone(), out)
    }

    pub fn is_empty(&self) -> bool {
        self.budget == 0
    }

    /// Walk the serialized form and fail if any label-bearing field is reachable.
    pub fn audit(&self) -> Result<()> {
        audit_value(&serde_json::to_value(self)?, "adaptation")
    }
}

fn audit_value(v: &serde_json::Value, path: &str) -> Result<()> {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                if LABEL_KEYS.contains(&k.as_str()) {
                    return Err(Error::InvalidParameter(format!("label field {path}.{k} reachable")));
                }
                audit_value(child, &format!("{path}.{k}"))?;
            }
            Ok(())
        }
        serde_json::Value::Array(items) => items.iter().try_for_each(|c| audit_value(c, path)),
        _ => Ok(()),
    }
}

/// Pooled training over every sensor in `data`.
pub fn train_multisensor(
    data: &MultiSensorDataset,
    config: &TrainConfig,
    use_triplet: bool,
    output: OutputKind,
) -> Result<(MlpModel, TrainLog)> {
    if data.sensors.len() < 2 {
        return Err(Error::InvalidParameter(
            "multi-sensor training needs at least 2 sensors; use neural::train for one".into(),
        ));
    }
    fit_decoder(&data.pooled(), &[], output, config, use_triplet)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the adaptation set; one pass is `ceil(budget / batch_size)` steps.
    pub epochs: usize,
    /// Stop once the source-validation loss has stayed above
    /// `(1 + max_source_degradation) ×` its pre-adaptation value for this many epochs.
    pub patience: usize,
    pub max_source_degradation: f64,
    pub triplet_weight: f64,
    /// Keep the labeled-triplet term in the source loss.
    pub source_triplets: bool,
    /// Keep the layers after the feature layer fixed.
    pub freeze_head: bool,
    /// Fraction of source samples held out for early stopping.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 256,
            epochs: 50,
            patience: 5,
            max_source_degradation: 0.25,
            triplet_weight: 3.0,
            source_triplets: true,
            freeze_head: false,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub source_loss: f64,
    pub target_triplet: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptLog {
    pub epochs: Vec<AdaptEpoch>,
    pub stopped_early: bool,
}

/// Fine-tune `model` on a target skin from unlabeled line trajectories.
///
/// Each step combines a labeled batch from `source` (original loss) with an
/// equal-sized batch of target triplets drawn with replacement (triplet loss only).
pub fn self_supervised_adapt(
    model: &MlpModel,
    adaptation: &AdaptationSet,
    source: &MultiSensorDataset,
    config: &AdaptConfig,
) -> Result<(MlpModel, AdaptLog)> {
    if adaptation.is_empty() || adaptation.trajectories.is_empty() {
        return Err(Error::EmptyInput("adaptation set"));
    }
    adaptation.audit()?;
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(Error::InvalidParameter("batch_size and epochs must be >= 1".into()));
    }
    let output = model.output_kind()?;
    let mut samples = source.pooled();
    if samples.len() < 2 {
        return Err(Error::EmptyInput("source data"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xADA9_7000);
    samples.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * config.validation_fraction).round() as usize).clamp(1, samples.len() - 1);
    let (val, train) = samples.split_at(n_val);
    let val_batch = LabeledBatch::from_samples(val, output);
    let sampler = config.source_triplets.then(|| LabeledTripletSampler::new(train));
    let train_cfg = TrainConfig {
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
        ..TrainConfig::default()
    };
    let mut adam = Adam::new(model, &train_cfg);
    let frozen: Vec<bool> = (0..model.arch.n_layers())
        .map(|l| config.freeze_head && l > model.arch.feature_layer)
        .collect();
    let val_objective = |m: &MlpModel| -> Result<f64> { Ok(objective_loss(m, &Objective::l2(&val_batch))?.l2) };

    let mut current = model.clone();
    let limit = val_objective(&current)? * (1.0 + config.max_source_degradation);
    let mut over_limit = 0;
    let steps = adaptation.budget.div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut log = AdaptLog::default();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let (mut src_sum, mut trip_sum) = (0.0, 0.0);
        for _ in 0..steps {
            if cursor + config.batch_size > order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let idx = &order[cursor..(cursor + config.batch_size).min(order.len())];
            cursor += idx.len();
            let batch = LabeledBatch::from_samples(idx.iter().map(|&i| &train[i]), output);
            let src_trip = sampler.as_ref().map(|s| s.sample(train, idx, &mut rng));
            let target = TripletBatch::from_triplets(&sample_triplets(
                &adaptation.trajectories,
                idx.len(),
                config.seed.wrapping_add(step.wrapping_mul(0x9E37_79B9)),
            )?);
            let mut objective = Objective::l2(&batch);
            if let Some(t) = &src_trip {
                objective = objective.with_triplets(t, config.triplet_weight);
            }
            objective = objective.with_triplets(&target, config.triplet_weight);
            let (loss, grads) = loss_and_gradients(&current, &objective)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: step as usize });
            }
            adam.step(&mut current, &grads, config.learning_rate, &frozen);
            src_sum += loss.l2;
            trip_sum += objective_loss(&current, &Objective::triplet(&target))?.triplet;
            step += 1;
        }
        let validation_loss = val_objective(&current)?;
        log.epochs.push(AdaptEpoch {
            epoch,
            source_loss: src_sum / steps as f64,
            target_triplet: trip_sum / steps as f64,
            validation_loss,
        });
        if validation_loss > limit {
            over_limit += 1;
            if over_limit >= config.patience {
                log.stopped_early = true;
                break;
            }
        } else {
            over_limit = 0;
        }
    }
    Ok((current, log))
}

/// A fleet with labeled snake-grid data and unlabeled line trajectories per skin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetDataSpec {
    pub fleet: FleetSpec,
    pub geometry: BoardGeometry,
    pub physics: SkinPhysics,
    /// Snake-grid passes of labeled data per skin.
    pub passes: usize,
    pub baseline: BaselineMode,
    /// Lines recorded after the labeled data, used for adaptation.
    pub adaptation_lines: LineParams,
    pub seed: u64,
}

impl Default for FleetDataSpec {
    fn default() -> Self {
        Self {
            fleet: FleetSpec::default(),
            geometry: BoardGeometry::canonical(),
            physics: SkinPhysics::default(),
            passes: 2,
            baseline: BaselineMode::BeforeEach,
            adaptation_lines: LineParams {
                n_lines: 24,
                ..LineParams::default()
            },
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetData {
    pub spec: FleetDataSpec,
    pub data: MultiSensorDataset,
    pub adaptation: BTreeMap<String, AdaptationSet>,
    /// Ground truth of the adaptation lines, for diagnostics only.
    pub adaptation_paths: BTreeMap<String, Vec<LinePath>>,
    /// Sensor state after recording, for follow-up sessions.
    pub sensors: BTreeMap<String, SensorInstance>,
}

/// One skin's recordings: labeled snake grid, then unlabeled lines.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSession {
    pub dataset: Dataset,
    pub adaptation: AdaptationSet,
    pub paths: Vec<LinePath>,
    pub sensor: SensorInstance,
}

/// Record the `index`-th fleet sensor.
pub fn record_sensor(spec: &FleetDataSpec, mut sensor: SensorInstance, index: u64) -> Result<SensorSession> {
    let seed = spec.seed.wrapping_mul(1_000_003).wrapping_add(index);
    let dataset = snake_grid_protocol(&mut sensor, &SnakeGridParams::with_passes(spec.passes), spec.baseline, seed)?;
    let lines = line_adaptation_protocol(&mut sensor, &spec.adaptation_lines, seed ^ 0x11AE)?;
    Ok(SensorSession {
        dataset,
        adaptation: AdaptationSet::new(sensor.id.clone(), lines.trajectories),
        paths: lines.paths,
        sensor,
    })
}

pub fn build_fleet_data(spec: &FleetDataSpec) -> Result<FleetData> {
    let sensors = spec.fleet.build(&spec.geometry, &spec.physics)?;
    let per = spec.fleet.skins_per_board;
    let recorded: Vec<_> = sensors
        .into_par_iter()
        .enumerate()
        .map(|(i, s)| record_sensor(spec, s, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::new();
    let mut adaptation = BTreeMap::new();
    let mut paths = BTreeMap::new();
    let mut states = BTreeMap::new();
    for (i, rec) in recorded.into_iter().enumerate() {
        let (board, skin) = (i / per, i % per);
        let id = sensor_id(board, skin);
        adaptation.insert(id.clone(), rec.adaptation);
        paths.insert(id.clone(), rec.paths);
        states.insert(id.clone(), rec.sensor);
        data.push(SensorData {
            sensor_id: id,
            board,
            skin,
            dataset: rec.dataset,
        });
    }
    Ok(FleetData {
        spec: spec.clone(),
        data: MultiSensorDataset::by_board(data)?,
        adaptation,
        adaptation_paths: paths,
        sensors: states,
    })
}

/// The four compared approaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    SingleSensor,
    MultiSensor,
    MultiSensorTriplet,
    Adapted,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::SingleSensor,
        Condition::MultiSensor,
        Condition::MultiSensorTriplet,
        Condition::Adapted,
    ];

    pub fn label(self, budget: usize) -> String {
        match self {
            Condition::SingleSensor => "Single-sensor".into(),
            Condition::MultiSensor => "Multi-sensor without triplet loss".into(),
            Condition::MultiSensorTriplet => "Multi-sensor with triplet loss".into(),
            Condition::Adapted => format!("Multi-sensor with triplet loss, adapted using {budget} indentations"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossValConfig {
    pub train: TrainConfig,
    /// Epochs for the single-sensor baseline, which sees far fewer samples per epoch.
    pub single_sensor_epochs: usize,
    pub adapt: AdaptConfig,
    /// Adaptation budgets; the adapted condition reports once per budget.
    pub budgets: Vec<usize>,
    pub output: OutputKind,
    /// Sensors each trained alone for the single-sensor condition.
    pub single_sensor_train: Vec<String>,
    /// Boards whose skins test every single-sensor model.
    pub single_sensor_test_boards: Vec<usize>,
    /// Fold subset to run; empty runs all.
    pub folds: Vec<usize>,
}

impl Default for CrossValConfig {
    fn default() -> Self {
        Self {
            // Cross-sensor runs use ReLU on the feature layers too; with the
            // all-linear variant, target triplets leave held-out accuracy unchanged.
            train: TrainConfig {
                epochs: 60,
                relu_feature_layers: true,
                ..TrainConfig::default()
            },
            single_sensor_epochs: 300,
            adapt: AdaptConfig::default(),
            budgets: vec![390],
            output: OutputKind::NormalForce,
            single_sensor_train: vec!["b0s0".into(), "b2s0".into(), "b4s0".into()],
            single_sensor_test_boards: vec![1, 3, 5],
            folds: Vec::new(),
        }
    }
}

fn pooled_metrics(parts: &[(MlpModel, &[Indentation])]) -> Result<crate::eval::SampleMetrics> {
    let mut p_all = Vec::new();
    let mut t_all = Vec::new();
    for (model, samples) in parts {
        let (p, t) = predictions(model, samples)?;
        p_all.push(p);
        t_all.push(t);
    }
    let stack = |v: &[ndarray::Array2<f64>]| {
        let views: Vec<_> = v.iter().map(|a| a.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::InvalidParameter(e.to_string()))
    };
    let (p, t) = (stack(&p_all)?, stack(&t_all)?);
    metrics_from_rows(p.view(), t.view())
}

/// Per-fold results of the multi-sensor conditions.
struct FoldOutcome {
    multi: Option<FoldResult>,
    triplet: Option<FoldResult>,
    /// One entry per configured budget.
    adapted: Vec<FoldResult>,
}

/// Fold models trained during cross-validation, reusable by later runs.
///
/// Keyed by fleet, fold, training config and loss, so a run with another
/// adaptation budget gets the same base model without retraining it.
#[derive(Debug, Default)]
pub struct ModelCache {
    models: Mutex<BTreeMap<(String, usize, bool), MlpModel>>,
}

impl ModelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.models.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_train(
        &self,
        fleet: &FleetData,
        fold: &Fold,
        train: &MultiSensorDataset,
        config: &CrossValConfig,
        use_triplet: bool,
    ) -> Result<MlpModel> {
        let key = (stable_hash(&(&fleet.spec, &config.train, config.output)), fold.index, use_triplet);
        if let Some(m) = self.models.lock().expect("cache lock").get(&key) {
            return Ok(m.clone());
        }
        let (m, _) = train_multisensor(train, &config.train, use_triplet, config.output)?;
        self.models.lock().expect("cache lock").insert(key, m.clone());
        Ok(m)
    }
}

fn run_fold(
    fleet: &FleetData,
    fold: &Fold,
    config: &CrossValConfig,
    conditions: &[Condition],
    cache: &ModelCache,
) -> Result<FoldOutcome> {
    let train = fleet.data.subset(&fold.train)?;
    let tests: Vec<&[Indentation]> = fold
        .test
        .iter()
        .map(|id| fleet.data.sensor(id).map(|s| s.dataset.samples.as_slice()))
        .collect::<Result<_>>()?;
    let name = fold.index.to_string();
    let eval_one = |m: &MlpModel| -> Result<FoldResult> {
        let parts: Vec<(MlpModel, &[Indentation])> = tests.iter().map(|t| (m.clone(), *t)).collect();
        Ok(FoldResult::new(name.clone(), pooled_metrics(&parts)?))
    };
    let mut out = FoldOutcome {
        multi: None,
        triplet: None,
        adapted: Vec::new(),
    };
    if conditions.contains(&Condition::MultiSensor) {
        let m = cache.get_or_train(fleet, fold, &train, config, false)?;
        out.multi = Some(eval_one(&m)?);
    }
    if conditions.contains(&Condition::MultiSensorTriplet) || conditions.contains(&Condition::Adapted) {
        let m = cache.get_or_train(fleet, fold, &train, config, true)?;
        if conditions.contains(&Condition::MultiSensorTriplet) {
            out.triplet = Some(eval_one(&m)?);
        }
        if conditions.contains(&Condition::Adapted) {
            for &budget in &config.budgets {
                let mut parts = Vec::new();
                for (id, t) in fold.test.iter().zip(&tests) {
                    let set = fleet
                        .adaptation
                        .get(id)
                        .ok_or_else(|| Error::InvalidParameter(format!("no adaptation set for {id}")))?
                        .truncated(budget);
                    parts.push((adapt_or_keep(&m, &set, &train, &config.adapt)?, *t));
                }
                out.adapted.push(FoldResult::new(name.clone(), pooled_metrics(&parts)?));
            }
        }
    }
    Ok(out)
}

/// Adapted copy of `model`, or `model` itself when the set is empty.
pub fn adapt_or_keep(
    model: &MlpModel,
    set: &AdaptationSet,
    source: &MultiSensorDataset,
    config: &AdaptConfig,
) -> Result<MlpModel> {
    if set.is_empty() {
        Ok(model.clone())
    } else {
        Ok(self_supervised_adapt(model, set, source, config)?.0)
    }
}

fn run_single_sensor(fleet: &FleetData, config: &CrossValConfig) -> Result<Vec<FoldResult>> {
    let test_ids: Vec<String> = fleet
        .data
        .sensors()
        .iter()
        .filter(|s| config.single_sensor_test_boards.contains(&s.board))
        .map(|s| s.sensor_id.clone())
        .collect();
    let cfg = TrainConfig {
        epochs: config.single_sensor_epochs,
        ..config.train.clone()
    };
    config
        .single_sensor_train
        .par_iter()
        .map(|train_id| {
            let train = fleet.data.sensor(train_id)?;
            let (m, _) = fit_decoder(&train.dataset.samples, &[], config.output, &cfg, false)?;
            let parts: Vec<(MlpModel, &[Indentation])> = test_ids
                .iter()
                .filter(|id| *id != train_id)
                .map(|id| Ok((m.clone(), fleet.data.sensor(id)?.dataset.samples.as_slice())))
                .collect::<Result<_>>()?;
            Ok(FoldResult::new(train_id.clone(), pooled_metrics(&parts)?))
        })
        .collect()
}

/// Run the requested conditions and return one report per condition, in the order given.
pub fn cross_validate(fleet: &FleetData, config: &CrossValConfig, conditions: &[Condition]) -> Result<Vec<EvalReport>> {
    cross_validate_cached(fleet, config, conditions, &ModelCache::new())
}

/// [`cross_validate`] drawing fold models from `cache` and adding the ones it trains.
pub fn cross_validate_cached(
    fleet: &FleetData,
    config: &CrossValConfig,
    conditions: &[Condition],
    cache: &ModelCache,
) -> Result<Vec<EvalReport>> {
    let hash = stable_hash(&(&fleet.spec, config, conditions));
    let folds: Vec<&Fold> = fleet
        .data
        .folds()
        .iter()
        .filter(|f| config.folds.is_empty() || config.folds.contains(&f.index))
        .collect();
    if folds.is_empty() {
        return Err(Error::InvalidParameter("no folds selected".into()));
    }
    let outcomes: Vec<FoldOutcome> = folds
        .par_iter()
        .map(|f| run_fold(fleet, f, config, conditions, cache))
        .collect::<Result<_>>()?;
    let mut reports = Vec::new();
    for &c in conditions {
        match c {
            Condition::SingleSensor => {
                reports.push(EvalReport::aggregate(c.label(0), run_single_sensor(fleet, config)?, hash.clone())?)
            }
            Condition::MultiSensor => {
                let folds = outcomes.iter().filter_map(|o| o.multi.clone()).collect();
                reports.push(EvalReport::aggregate(c.label(0), folds, hash.clone())?);
            }
            Condition::MultiSensorTriplet => {
                let folds = outcomes.iter().filter_map(|o| o.triplet.clone()).collect();
                reports.push(EvalReport::aggregate(c.label(0), folds, hash.clone())?);
            }
            Condition::Adapted => {
                for (k, &budget) in config.budgets.iter().enumerate() {
                    let folds = outcomes.iter().map(|o| o.adapted[k].clone()).collect();
                    reports.push(EvalReport::aggregate(c.label(budget), folds, hash.clone())?);
                }
            }
        }
    }
    Ok(reports)
}
