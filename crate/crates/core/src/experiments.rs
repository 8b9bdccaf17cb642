//! Named experiment presets.
//!
//! A preset maps a [`RunConfig`] to a set of output files held in memory, so
//! reruns can be compared byte for byte before anything touches the disk.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::adapt::{
    adapt_or_keep, build_fleet_data, cross_validate, record_sensor, train_multisensor, AdaptationSet, Condition,
    FleetData,
};
use crate::config::RunConfig;
use crate::datagen::{line_adaptation_protocol, Indentation, LineParams};
use crate::error::{Error, Result};
use crate::eval::{drift_study, predictions, render_report, EvalReport, FoldResult, ReportFormat};
use crate::field_sim::{make_sensor, BoardGeometry, DriftLaw, VariationParams};
use crate::neural::MlpModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Table2,
    BudgetSweep,
    SensorSweep,
    FlexTransfer,
    ManualAdapt,
    Drift,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Table2,
        Preset::BudgetSweep,
        Preset::SensorSweep,
        Preset::FlexTransfer,
        Preset::ManualAdapt,
        Preset::Drift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Table2 => "table2",
            Preset::BudgetSweep => "fig5a_budget_sweep",
            Preset::SensorSweep => "fig5b_sensor_sweep",
            Preset::FlexTransfer => "flex_transfer",
            Preset::ManualAdapt => "manual_adapt",
            Preset::Drift => "drift",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Preset::Table2 => "four approaches under 6-fold cross-validation",
            Preset::BudgetSweep => "adapted accuracy against adaptation budget",
            Preset::SensorSweep => "held-out accuracy against number of training sensors",
            Preset::FlexTransfer => "transfer to flexible boards with a thinner standoff",
            Preset::ManualAdapt => "adaptation from hand-held pen lines",
            Preset::Drift => "error over 50,000 interactions under each baseline mode",
        }
    }

    /// The preset's config with its defining overrides applied.
    pub fn config(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.preset = self.name().to_string();
        c
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::Config(format!("unknown preset {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Files produced by a preset, keyed by file name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PresetOutput {
    pub files: BTreeMap<String, Vec<u8>>,
    /// Aggregated reports, when the preset produces any.
    pub reports: Vec<EvalReport>,
}

impl PresetOutput {
    fn add(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.insert(name.to_string(), bytes.into());
    }

    fn add_reports(&mut self, reports: Vec<EvalReport>) -> Result<()> {
        for f in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown] {
            self.add(&format!("report.{}", f.extension()), render_report(&reports, f)?);
        }
        self.reports = reports;
        Ok(())
    }

    pub fn write_to(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    preset: &'a str,
    config_hash: String,
    files: Vec<&'a str>,
}

/// Run `preset` under `config` (seeds resolved first).
pub fn run_preset(preset: Preset, config: &RunConfig) -> Result<PresetOutput> {
    let config = preset.config(config).resolved();
    let mut out = match preset {
        Preset::Table2 => table2(&config)?,
        Preset::BudgetSweep => budget_sweep(&config)?,
        Preset::SensorSweep => sensor_sweep(&config)?,
        Preset::FlexTransfer => flex_transfer(&config)?,
        Preset::ManualAdapt => manual_adapt(&config)?,
        Preset::Drift => drift(&config)?,
    };
    let mut stored = config.clone();
    stored.output_dir.clear();
    out.add("config.toml", stored.to_toml()?);
    let names: Vec<String> = out.files.keys().cloned().collect();
    let manifest = Manifest {
        preset: preset.name(),
        config_hash: config.hash(),
        files: names.iter().map(String::as_str).collect(),
    };
    out.add("manifest.json", serde_json::to_string_pretty(&manifest)?);
    Ok(out)
}

fn table2(config: &RunConfig) -> Result<PresetOutput> {
    let fleet = build_fleet_data(&config.fleet)?;
    let mut out = PresetOutput::default();
    out.add_reports(cross_validate(&fleet, &config.crossval, &Condition::ALL)?)?;
    Ok(out)
}

fn budget_sweep(config: &RunConfig) -> Result<PresetOutput> {
    let fleet = build_fleet_data(&config.fleet)?;
    let mut cv = config.crossval.clone();
    cv.budgets = config.sweep.budgets.clone();
    let mut out = PresetOutput::default();
    out.add_reports(cross_validate(&fleet, &cv, &[Condition::Adapted])?)?;
    Ok(out)
}

/// The first `n` of `ids`, taken round-robin across skins so boards stay mixed.
fn spread(ids: &[String], n: usize) -> Vec<String> {
    let mut sorted = ids.to_vec();
    sorted.sort_by_key(|id| {
        let skin = id.rsplit('s').next().unwrap_or("").to_string();
        (skin, id.clone())
    });
    sorted.truncate(n);
    sorted
}

fn sensor_sweep(config: &RunConfig) -> Result<PresetOutput> {
    let fleet = build_fleet_data(&config.fleet)?;
    let folds: Vec<_> = fleet
        .data
        .folds()
        .iter()
        .filter(|f| config.sweep.folds.is_empty() || config.sweep.folds.contains(&f.index))
        .collect();
    if folds.is_empty() {
        return Err(Error::Config("sweep.folds selects no fold".into()));
    }
    let jobs: Vec<(usize, &crate::adapt::Fold)> = config
        .sweep
        .sensor_counts
        .iter()
        .flat_map(|&n| folds.iter().map(move |f| (n, *f)))
        .collect();
    let results: Vec<(usize, FoldResult)> = jobs
        .par_iter()
        .map(|&(n, fold)| {
            if n > fold.train.len() {
                return Err(Error::Config(format!("sensor count {n} exceeds the {} training sensors", fold.train.len())));
            }
            let train = fleet.data.subset(&spread(&fold.train, n))?;
            let (model, _) = train_multisensor(&train, &config.crossval.train, config.split.use_triplet, config.crossval.output)?;
            let test: Vec<Indentation> = fold
                .test
                .iter()
                .map(|id| fleet.data.sensor(id).map(|s| s.dataset.samples.clone()))
                .collect::<Result<Vec<_>>>()?
                .concat();
            Ok((n, FoldResult::new(fold.index.to_string(), crate::eval::evaluate(&model, &test)?)))
        })
        .collect::<Result<_>>()?;
    let hash = config.hash();
    let mut reports = Vec::new();
    for &n in &config.sweep.sensor_counts {
        let folds = results.iter().filter(|(k, _)| *k == n).map(|(_, r)| r.clone()).collect();
        reports.push(EvalReport::aggregate(format!("Multi-sensor, {n} training sensors"), folds, hash.clone())?);
    }
    let mut out = PresetOutput::default();
    out.add_reports(reports)?;
    Ok(out)
}

fn mean_signed_force_error(model: &MlpModel, samples: &[Indentation]) -> Result<f64> {
    let (p, t) = predictions(model, samples)?;
    let fz = p.ncols() - 1;
    Ok(p.column(fz).iter().zip(t.column(fz)).map(|(a, b)| a - b).sum::<f64>() / p.nrows() as f64)
}

#[derive(Serialize)]
struct TargetBias {
    sensor_id: String,
    condition: String,
    mean_signed_force_error: f64,
}

fn flex_transfer(config: &RunConfig) -> Result<PresetOutput> {
    let fleet = build_fleet_data(&config.fleet)?;
    let geometry: BoardGeometry = config.fleet.geometry.with_standoff_scale(config.flex.standoff_scale);
    let targets: Vec<_> = (0..config.flex.targets)
        .into_par_iter()
        .map(|i| {
            let s = make_sensor(
                format!("flex{i}"),
                &geometry,
                &config.fleet.fleet.variation,
                &config.fleet.physics,
                config.flex.seed.wrapping_add(i as u64),
            )?;
            record_sensor(&config.fleet, s, 10_000 + i as u64)
        })
        .collect::<Result<_>>()?;
    let (model, _) = train_multisensor(&fleet.data, &config.crossval.train, true, config.crossval.output)?;
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut bias = Vec::new();
    let adapted_label = Condition::Adapted.label(config.flex.budget);
    for t in &targets {
        let samples = &t.dataset.samples;
        let adapted = adapt_or_keep(&model, &t.adaptation.truncated(config.flex.budget), &fleet.data, &config.crossval.adapt)?;
        let id = t.sensor.id.clone();
        before.push(FoldResult::new(id.clone(), crate::eval::evaluate(&model, samples)?));
        after.push(FoldResult::new(id.clone(), crate::eval::evaluate(&adapted, samples)?));
        for (label, m) in [(Condition::MultiSensorTriplet.label(0), &model), (adapted_label.clone(), &adapted)] {
            bias.push(TargetBias {
                sensor_id: id.clone(),
                condition: label,
                mean_signed_force_error: mean_signed_force_error(m, samples)?,
            });
        }
    }
    let hash = config.hash();
    let mut out = PresetOutput::default();
    out.add_reports(vec![
        EvalReport::aggregate(Condition::MultiSensorTriplet.label(0), before, hash.clone())?,
        EvalReport::aggregate(adapted_label, after, hash)?,
    ])?;
    out.add("force_bias.json", serde_json::to_string_pretty(&bias)?);
    Ok(out)
}

/// Pen-drawn lines recorded on each sensor after its robotic session.
fn manual_sets(fleet: &FleetData, config: &RunConfig) -> Result<BTreeMap<String, AdaptationSet>> {
    let params = LineParams {
        manual: Some(config.manual.jitter.clone()),
        ..LineParams::for_budget(config.manual.budget, config.manual.points_per_line)
    };
    let sensors: Vec<_> = fleet.sensors.iter().collect();
    sensors
        .into_par_iter()
        .enumerate()
        .map(|(i, (id, sensor))| {
            let mut s = sensor.clone();
            let lines = line_adaptation_protocol(&mut s, &params, config.fleet.seed ^ 0x9E11 ^ i as u64)?;
            Ok((id.clone(), AdaptationSet::new(id.clone(), lines.trajectories).truncated(config.manual.budget)))
        })
        .collect()
}

fn manual_adapt(config: &RunConfig) -> Result<PresetOutput> {
    let fleet = build_fleet_data(&config.fleet)?;
    let manual = manual_sets(&fleet, config)?;
    let folds: Vec<_> = fleet
        .data
        .folds()
        .iter()
        .filter(|f| config.manual.folds.is_empty() || config.manual.folds.contains(&f.index))
        .collect();
    if folds.is_empty() {
        return Err(Error::Config("manual.folds selects no fold".into()));
    }
    let budget = config.manual.budget;
    let per_fold: Vec<[FoldResult; 3]> = folds
        .par_iter()
        .map(|fold| {
            let train = fleet.data.subset(&fold.train)?;
            let (model, _) = train_multisensor(&train, &config.crossval.train, true, config.crossval.output)?;
            let mut models: [Vec<(MlpModel, &[Indentation])>; 3] = Default::default();
            for id in &fold.test {
                let samples = fleet.data.sensor(id)?.dataset.samples.as_slice();
                let robotic = fleet.adaptation[id].truncated(budget);
                models[0].push((model.clone(), samples));
                models[1].push((adapt_or_keep(&model, &robotic, &train, &config.crossval.adapt)?, samples));
                models[2].push((adapt_or_keep(&model, &manual[id], &train, &config.crossval.adapt)?, samples));
            }
            let name = fold.index.to_string();
            let eval = |parts: &[(MlpModel, &[Indentation])]| -> Result<FoldResult> {
                let mut rows = Vec::new();
                for (m, s) in parts {
                    rows.push(predictions(m, s)?);
                }
                let views_p: Vec<_> = rows.iter().map(|r| r.0.view()).collect();
                let views_t: Vec<_> = rows.iter().map(|r| r.1.view()).collect();
                let cat = |v: &[ndarray::ArrayView2<'_, f64>]| {
                    ndarray::concatenate(ndarray::Axis(0), v).map_err(|e| Error::InvalidParameter(e.to_string()))
                };
                let (p, t) = (cat(&views_p)?, cat(&views_t)?);
                Ok(FoldResult::new(name.clone(), crate::eval::metrics_from_rows(p.view(), t.view())?))
            };
            Ok([eval(&models[0])?, eval(&models[1])?, eval(&models[2])?])
        })
        .collect::<Result<_>>()?;
    let hash = config.hash();
    let labels = [
        Condition::MultiSensorTriplet.label(0),
        format!("Adapted using {budget} robotic indentations"),
        format!("Adapted using {budget} manual indentations"),
    ];
    let mut reports = Vec::new();
    for (k, label) in labels.into_iter().enumerate() {
        let folds = per_fold.iter().map(|r| r[k].clone()).collect();
        reports.push(EvalReport::aggregate(label, folds, hash.clone())?);
    }
    let mut out = PresetOutput::default();
    out.add_reports(reports)?;
    Ok(out)
}

fn drift(config: &RunConfig) -> Result<PresetOutput> {
    let mut physics = config.fleet.physics.clone();
    if !config.drift.drift_enabled {
        physics.drift = DriftLaw::disabled();
    }
    let sensor = make_sensor(
        "drift0",
        &config.fleet.geometry,
        &VariationParams::default(),
        &physics,
        config.drift.sensor_seed,
    )?;
    let curves = drift_study(&sensor, &config.drift.study, &config.drift.train, config.drift.output)?;
    let mut csv = Vec::new();
    for (i, c) in curves.iter().enumerate() {
        let mut buf = Vec::new();
        c.write_csv(&mut buf)?;
        // keep one header
        let text = String::from_utf8(buf).expect("csv is utf-8");
        let body = if i == 0 { text.as_str() } else { text.split_once('\n').map(|x| x.1).unwrap_or("") };
        csv.extend_from_slice(body.as_bytes());
    }
    let mut md = String::from("| Baseline mode | Spearman rho | p-value | Final MSE_xy, in mm² | Final signed force error, in N |\n|---|---|---|---|---|\n");
    for c in &curves {
        let last = c.windows.last().expect("at least one window");
        md.push_str(&format!(
            "| {} | {:.3} | {:.2e} | {:.3} | {:+.4} |\n",
            c.mode, c.trend.rho, c.trend.p_value, last.mse_xy, last.mean_signed_force_error
        ));
    }
    let mut out = PresetOutput::default();
    out.add("drift_curves.json", serde_json::to_string_pretty(&curves)?);
    out.add("drift.csv", csv);
    out.add("drift.md", md);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        let e = "table3".parse::<Preset>().unwrap_err();
        assert!(e.to_string().contains("fig5a_budget_sweep"));
    }

    #[test]
    fn spread_mixes_boards() {
        let ids: Vec<String> = (1..6).flat_map(|b| (0..3).map(move |s| crate::datagen::sensor_id(b, s))).collect();
        assert_eq!(spread(&ids, 3), vec!["b1s0", "b2s0", "b3s0"]);
        assert_eq!(spread(&ids, 15).len(), 15);
    }
}
