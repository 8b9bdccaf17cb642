//! Metrics, aggregated reports and the drift study.
//!
//! `mse_xy` is the per-coordinate mean squared location error,
//! `((x̂−x)² + (ŷ−y)²) / 2` averaged over samples. `mse_f` averages the squared
//! error over force components.

use std::fmt::Write as _;

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::datagen::{indent, with_baseline, Indentation, RawIndentation, SnakeGridParams};
use crate::error::{Error, Result};
use crate::field_sim::{IndenterContact, SensorInstance};
use crate::neural::{fit_decoder, target_matrix, flux_matrix, MlpModel, OutputKind, TrainConfig};
use crate::protocol::BaselineMode;

pub const MSE_CONVENTION: &str =
    "mse_xy: per-coordinate mean of squared location error, mm^2; mse_f: mean squared force error per component, N^2";

/// Percentage of samples with both |x̂−x| ≤ tol and |ŷ−y| ≤ tol.
pub fn localization_accuracy(predictions: &[[f64; 2]], labels: &[[f64; 2]], tolerance: f64) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("accuracy samples"));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| (p[0] - l[0]).abs() <= tolerance && (p[1] - l[1]).abs() <= tolerance)
        .count();
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

/// `(mse_xy, mse_f)` for rows laid out as `[x, y, force...]`.
pub fn mse_metrics(predictions: ArrayView2<'_, f64>, labels: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
    if predictions.dim() != labels.dim() {
        return Err(Error::DimensionMismatch {
            expected: labels.ncols(),
            got: predictions.ncols(),
        });
    }
    if predictions.nrows() == 0 {
        return Err(Error::EmptyInput("mse samples"));
    }
    if predictions.ncols() < 3 {
        return Err(Error::InvalidParameter("rows need x, y and at least one force".into()));
    }
    let n = predictions.nrows() as f64;
    let nf = (predictions.ncols() - 2) as f64;
    let (mut xy, mut f) = (0.0, 0.0);
    for (p, l) in predictions.rows().into_iter().zip(labels.rows()) {
        xy += ((p[0] - l[0]).powi(2) + (p[1] - l[1]).powi(2)) / 2.0;
        f += p.iter().zip(l.iter()).skip(2).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / nf;
    }
    Ok((xy / n, f / n))
}

/// Metrics of one model on one labeled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub accuracy_pct: f64,
    pub mse_xy: f64,
    pub mse_f: f64,
    pub n_samples: usize,
}

/// Predicted and true rows of `model` on `samples`.
pub fn predictions(model: &MlpModel, samples: &[Indentation]) -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
    let output = model.output_kind()?;
    let pred = model.predict_batch(flux_matrix(samples.iter().map(|s| &s.flux_delta)).view())?;
    Ok((pred, target_matrix(samples, output)))
}

pub fn metrics_from_rows(pred: ArrayView2<'_, f64>, truth: ArrayView2<'_, f64>) -> Result<SampleMetrics> {
    let p: Vec<[f64; 2]> = pred.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    let t: Vec<[f64; 2]> = truth.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    let (mse_xy, mse_f) = mse_metrics(pred, truth)?;
    Ok(SampleMetrics {
        accuracy_pct: localization_accuracy(&p, &t, 1.0)?,
        mse_xy,
        mse_f,
        n_samples: p.len(),
    })
}

pub fn evaluate(model: &MlpModel, samples: &[Indentation]) -> Result<SampleMetrics> {
    let (p, t) = predictions(model, samples)?;
    metrics_from_rows(p.view(), t.view())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample SD across folds; absent with a single fold.
    pub sd: Option<f64>,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Self { mean, sd }
    }
}

/// Metrics of one fold (or one trained model) within a condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: String,
    pub accuracy_pct: f64,
    pub mse_xy: f64,
    pub mse_f: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: String,
    pub accuracy_pct: MetricSummary,
    pub mse_xy: MetricSummary,
    pub mse_f: MetricSummary,
    pub n_samples: usize,
    pub folds: Vec<FoldResult>,
    pub config_hash: String,
    pub mse_convention: String,
}

impl EvalReport {
    pub fn aggregate(condition: impl Into<String>, folds: Vec<FoldResult>, config_hash: impl Into<String>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::EmptyInput("report folds"));
        }
        let pick = |f: fn(&FoldResult) -> f64| MetricSummary::of(&folds.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            condition: condition.into(),
            accuracy_pct: pick(|f| f.accuracy_pct),
            mse_xy: pick(|f| f.mse_xy),
            mse_f: pick(|f| f.mse_f),
            n_samples: folds.iter().map(|f| f.n_samples).sum(),
            folds,
            config_hash: config_hash.into(),
            mse_convention: MSE_CONVENTION.into(),
        })
    }
}

impl FoldResult {
    pub fn new(fold: impl Into<String>, m: SampleMetrics) -> Self {
        Self {
            fold: fold.into(),
            accuracy_pct: m.accuracy_pct,
            mse_xy: m.mse_xy,
            mse_f: m.mse_f,
            n_samples: m.n_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::InvalidParameter(format!("unknown report format {other:?}"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Json => "json",
            Self::Csv => "csv",
            Self::Markdown => "md",
        }
    }
}

fn pm(m: &MetricSummary, digits: usize) -> String {
    match m.sd {
        Some(sd) => format!("{:.digits$} ± {:.digits$}", m.mean, sd),
        None => format!("{:.digits$}", m.mean),
    }
}

/// Render reports in the given order.
pub fn render_report(reports: &[EvalReport], format: ReportFormat) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("reports"));
    }
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(reports)? + "\n"),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "condition",
                "accuracy_pct_mean",
                "accuracy_pct_sd",
                "mse_xy_mean",
                "mse_xy_sd",
                "mse_f_mean",
                "mse_f_sd",
                "n_samples",
                "folds",
                "config_hash",
            ])?;
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            for r in reports {
                w.write_record([
                    r.condition.clone(),
                    r.accuracy_pct.mean.to_string(),
                    opt(r.accuracy_pct.sd),
                    r.mse_xy.mean.to_string(),
                    opt(r.mse_xy.sd),
                    r.mse_f.mean.to_string(),
                    opt(r.mse_f.sd),
                    r.n_samples.to_string(),
                    r.folds.len().to_string(),
                    r.config_hash.clone(),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        ReportFormat::Markdown => {
            let mut s = String::new();
            writeln!(s, "<!-- {MSE_CONVENTION} -->").unwrap();
            writeln!(s, "| Model | Accuracy, in % | MSE_xy, in mm² | MSE_F, in N² |").unwrap();
            writeln!(s, "|---|---|---|---|").unwrap();
            for r in reports {
                writeln!(
                    s,
                    "| {} | {} | {} | {} |",
                    r.condition,
                    pm(&r.accuracy_pct, 2),
                    pm(&r.mse_xy, 3),
                    pm(&r.mse_f, 3)
                )
                .unwrap();
            }
            Ok(s)
        }
    }
}

pub fn parse_reports_json(text: &str) -> Result<Vec<EvalReport>> {
    Ok(serde_json::from_str(text)?)
}

/// Spearman rank correlation with a two-sided p-value from the t approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    pub p_value: f64,
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::InvalidParameter("spearman needs at least 3 points".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean).powi(2);
        syy += (b - mean).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Spearman { rho: 0.0, p_value: 1.0 });
    }
    let rho = sxy / (sxx * syy).sqrt();
    let df = n - 2.0;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Spearman { rho, p_value })
}

/// Layout of the drift experiment in interaction counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftStudySpec {
    pub total_interactions: u64,
    pub train_prefix: u64,
    pub eval_window: u64,
    pub eval_stride: u64,
    pub baseline_modes: Vec<BaselineMode>,
    pub seed: u64,
}

impl Default for DriftStudySpec {
    fn default() -> Self {
        Self {
            total_interactions: 50_000,
            train_prefix: 5_000,
            eval_window: 1_000,
            eval_stride: 5_000,
            baseline_modes: vec![BaselineMode::Once, BaselineMode::EveryK(100), BaselineMode::BeforeEach],
            seed: 7,
        }
    }
}

impl DriftStudySpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_prefix + self.eval_window > self.total_interactions {
            return Err(Error::InvalidParameter(
                "train_prefix + eval_window must not exceed total_interactions".into(),
            ));
        }
        if self.eval_window == 0 || self.eval_stride == 0 || self.baseline_modes.is_empty() {
            return Err(Error::InvalidParameter("eval_window, eval_stride and baseline_modes must be non-empty".into()));
        }
        Ok(())
    }

    /// Window start indices: every stride after the prefix while the window fits.
    pub fn window_starts(&self) -> Vec<u64> {
        let mut out = Vec::new();
        let mut s = self.train_prefix.max(self.eval_stride);
        while s + self.eval_window <= self.total_interactions {
            out.push(s);
            s += self.eval_stride;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftWindow {
    pub index: usize,
    pub start: u64,
    pub accuracy_pct: f64,
    pub mse_xy: f64,
    /// Standard error of `mse_xy` across samples in the window.
    pub mse_xy_se: f64,
    pub mse_f: f64,
    /// Mean of predicted minus true normal force, N.
    pub mean_signed_force_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCurve {
    pub mode: BaselineMode,
    pub windows: Vec<DriftWindow>,
    /// Window index against `mse_xy`.
    pub trend: Spearman,
    /// `(true Fz, predicted Fz)` over the final window.
    pub force_scatter: Vec<[f64; 2]>,
}

impl DriftCurve {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["mode", "window", "start", "accuracy_pct", "mse_xy", "mse_xy_se", "mse_f", "mean_signed_force_error"])?;
        for x in &self.windows {
            w.write_record([
                self.mode.to_string(),
                x.index.to_string(),
                x.start.to_string(),
                x.accuracy_pct.to_string(),
                x.mse_xy.to_string(),
                x.mse_xy_se.to_string(),
                x.mse_f.to_string(),
                x.mean_signed_force_error.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Contact of the `i`-th interaction of a repeated snake-grid session.
pub fn snake_contact(params: &SnakeGridParams, locations: &[[f64; 2]], tip_radius: f64, i: u64) -> IndenterContact {
    let per_depth = locations.len() as u64;
    let k = i % (per_depth * params.depths.len() as u64);
    let [x, y] = locations[(k % per_depth) as usize];
    IndenterContact::new(x, y, params.depths[(k / per_depth) as usize], tip_radius)
}

/// Raw indentations for interactions `[start, start + n)` of a repeated snake grid.
///
/// The sensor's drift is advanced to `start` first; drift depends only on the
/// interaction count, so skipped interactions need no simulation.
pub fn snake_segment(sensor: &mut SensorInstance, start: u64, n: u64, seed: u64) -> Result<Vec<RawIndentation>> {
    let current = sensor.drift.interaction_count;
    if start < current {
        return Err(Error::InvalidParameter(format!("segment start {start} is behind the sensor at {current}")));
    }
    sensor.advance_drift(start - current);
    let params = SnakeGridParams::default();
    let locations = params.locations();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ start.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    (start..start + n)
        .map(|i| {
            let c = snake_contact(&params, &locations, sensor.physics.tip_radius, i);
            indent(sensor, &c, (i / params.per_pass() as u64) as u32, &mut rng)
        })
        .collect()
}

/// Train on the prefix under each baseline mode and track errors over later windows.
pub fn drift_study(
    sensor: &SensorInstance,
    spec: &DriftStudySpec,
    train_config: &TrainConfig,
    output: OutputKind,
) -> Result<Vec<DriftCurve>> {
    spec.validate()?;
    let starts = spec.window_starts();
    if starts.is_empty() {
        return Err(Error::InvalidParameter("no evaluation window fits".into()));
    }
    // One raw session shared by all modes; modes differ only in baseline handling.
    let mut s = sensor.clone();
    s.drift = s.drift.advance(0);
    let start0 = s.drift.interaction_count;
    let prefix = snake_segment(&mut s, start0, spec.train_prefix, spec.seed)?;
    let mut windows = Vec::with_capacity(starts.len());
    for &w in &starts {
        windows.push(snake_segment(&mut s, start0 + w, spec.eval_window, spec.seed)?);
    }
    spec.baseline_modes
        .par_iter()
        .map(|&mode| drift_curve(&sensor.id, mode, &prefix, &windows, &starts, train_config, output))
        .collect()
}

fn drift_curve(
    id: &str,
    mode: BaselineMode,
    prefix: &[RawIndentation],
    windows: &[Vec<RawIndentation>],
    starts: &[u64],
    train_config: &TrainConfig,
    output: OutputKind,
) -> Result<DriftCurve> {
    // The tracker persists across the whole session, so feed everything in order.
    let all: Vec<RawIndentation> = prefix.iter().chain(windows.iter().flatten()).cloned().collect();
    let labeled = with_baseline(&all, mode, id)?;
    let (train, rest) = labeled.split_at(prefix.len());
    let (model, _) = fit_decoder(train, &[], output, train_config, false)?;
    let fz = output.dim() - 1;
    let mut out = Vec::with_capacity(windows.len());
    let mut scatter = Vec::new();
    let mut offset = 0;
    for (index, (w, &start)) in windows.iter().zip(starts).enumerate() {
        let samples = &rest[offset..offset + w.len()];
        offset += w.len();
        let (p, t) = predictions(&model, samples)?;
        let m = metrics_from_rows(p.view(), t.view())?;
        let per: Vec<f64> = p
            .rows()
            .into_iter()
            .zip(t.rows())
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)) / 2.0)
            .collect();
        let n = per.len() as f64;
        let var = per.iter().map(|v| (v - m.mse_xy).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        let signed = p.rows().into_iter().zip(t.rows()).map(|(a, b)| a[fz] - b[fz]).sum::<f64>() / n;
        if index + 1 == windows.len() {
            scatter = p.rows().into_iter().zip(t.rows()).map(|(a, b)| [b[fz], a[fz]]).collect();
        }
        out.push(DriftWindow {
            index,
            start,
            accuracy_pct: m.accuracy_pct,
            mse_xy: m.mse_xy,
            mse_xy_se: (var / n).sqrt(),
            mse_f: m.mse_f,
            mean_signed_force_error: signed,
        });
    }
    let idx: Vec<f64> = (0..out.len()).map(|i| i as f64).collect();
    let mse: Vec<f64> = out.iter().map(|w| w.mse_xy).collect();
    let trend = if out.len() >= 3 {
        spearman(&idx, &mse)?
    } else {
        Spearman { rho: 0.0, p_value: 1.0 }
    };
    Ok(DriftCurve {
        mode,
        windows: out,
        trend,
        force_scatter: scatter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn accuracy_boundary_is_inclusive() {
        let labels = vec![[0.0, 0.0]; 4];
        assert_eq!(localization_accuracy(&labels, &labels, 1.0).unwrap(), 100.0);
        assert_eq!(localization_accuracy(&[[1.0, 1.0]; 4], &labels, 1.0).unwrap(), 100.0);
        assert_eq!(localization_accuracy(&[[1.0001, 0.0]; 4], &labels, 1.0).unwrap(), 0.0);
        assert!(localization_accuracy(&[], &[], 1.0).is_err());
        assert!(localization_accuracy(&labels[..2], &labels, 1.0).is_err());
    }

    #[test]
    fn accuracy_hand_counted() {
        let labels = [[0.0, 0.0], [1.0, 2.0], [-3.0, 4.0], [5.0, 5.0], [0.0, -8.0], [2.0, 2.0], [7.0, -1.0], [0.5, 0.5], [-6.0, -6.0], [3.0, 0.0]];
        let preds = [
            [0.5, -0.5],   // hit
            [2.2, 2.0],    // x off by 1.2
            [-3.9, 4.9],   // hit
            [5.0, 6.5],    // y off by 1.5
            [1.0, -7.0],   // hit, both on the boundary
            [0.0, 0.0],    // miss
            [7.1, -1.1],   // hit
            [-0.49, 1.49], // hit
            [-6.0, -4.9],  // y off by 1.1
            [3.0, 0.999],  // hit
        ];
        assert_eq!(localization_accuracy(&preds, &labels, 1.0).unwrap(), 60.0);
        // only the 7.1/-1.1 row is within 0.2 on both axes
        assert_eq!(localization_accuracy(&preds, &labels, 0.2).unwrap(), 10.0);
    }

    #[test]
    fn mse_single_sample() {
        let p = array![[1.0, 1.0, 0.5]];
        let t = array![[0.0, 0.0, 0.0]];
        assert_eq!(mse_metrics(p.view(), t.view()).unwrap(), (1.0, 0.25));
        assert_eq!(mse_metrics(t.view(), t.view()).unwrap(), (0.0, 0.0));
        assert!(mse_metrics(p.view(), array![[0.0, 0.0]].view()).is_err());
    }

    #[test]
    fn mse_averages_force_components() {
        let p = array![[0.0, 0.0, 1.0, 0.0, 2.0]];
        let t = array![[0.0, 2.0, 0.0, 0.0, 0.0]];
        assert_eq!(mse_metrics(p.view(), t.view()).unwrap(), (2.0, 5.0 / 3.0));
    }

    #[test]
    fn summary_sd_only_with_several_folds() {
        assert_eq!(MetricSummary::of(&[3.0]).sd, None);
        let s = MetricSummary::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.sd.unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    fn sample_report(name: &str) -> EvalReport {
        let folds = vec![
            FoldResult::new("0", SampleMetrics { accuracy_pct: 80.0, mse_xy: 0.5, mse_f: 0.01, n_samples: 10 }),
            FoldResult::new("1", SampleMetrics { accuracy_pct: 90.0, mse_xy: 0.25, mse_f: 0.02, n_samples: 12 }),
        ];
        EvalReport::aggregate(name, folds, "abcd").unwrap()
    }

    #[test]
    fn render_formats() {
        let r = sample_report("Single-sensor");
        let md = render_report(std::slice::from_ref(&r), ReportFormat::Markdown).unwrap();
        let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Model")).collect();
        assert_eq!(rows, vec!["| Single-sensor | 85.00 ± 7.07 | 0.375 ± 0.177 | 0.015 ± 0.007 |"]);
        let csv = render_report(std::slice::from_ref(&r), ReportFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 2);
        let json = render_report(&[r.clone(), sample_report("x")], ReportFormat::Json).unwrap();
        assert_eq!(parse_reports_json(&json).unwrap(), vec![r, sample_report("x")]);
        assert!(render_report(&[], ReportFormat::Json).is_err());
    }

    #[test]
    fn spearman_known_values() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spearman(&x, &[2.0, 4.0, 9.0, 10.0, 30.0]).unwrap().rho, 1.0);
        assert_eq!(spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap().rho, -1.0);
        // rank differences 1,1,1,1,0 → rho = 1 − 6·4/(5·24) = 0.8; scipy p = 0.1041
        let s = spearman(&x, &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((s.rho - 0.8).abs() < 1e-12);
        assert!((s.p_value - 0.104_088).abs() < 1e-4, "{}", s.p_value);
        let t = spearman(&x, &[1.0, 1.0, 2.0, 2.0, 3.0]).unwrap();
        assert!(t.rho > 0.9);
    }

    #[test]
    fn default_windows() {
        let s = DriftStudySpec::default();
        let w = s.window_starts();
        assert_eq!(w.len(), 9);
        assert_eq!(w[0], 5_000);
        assert_eq!(*w.last().unwrap(), 45_000);
        let bad = DriftStudySpec { train_prefix: 49_500, ..DriftStudySpec::default() };
        assert!(bad.validate().is_err());
    }
}
