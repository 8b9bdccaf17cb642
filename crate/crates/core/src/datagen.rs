//! Indentation protocols that drive the simulator and produce datasets.
//!
//! Every labeled indentation takes a no-load reading, then a contact reading,
//! and subtracts the baseline chosen by a [`BaselineTracker`]. Drift advances by
//! one interaction per indentation, so generation on one sensor is sequential.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_sim::{
    make_sensor, BoardGeometry, FluxVector, IndenterContact, SensorInstance, SensorRecipe, SkinPhysics,
    VariationParams, FLUX_DIM, MAX_CANONICAL_DEPTH,
};
use crate::hashing::stable_hash;
use crate::neural::OutputKind;
use crate::protocol::{BaselineMode, BaselineTracker, FluxFrame};

const DATASET_MAGIC: &[u8; 8] = b"MSKDSET\0";
const DATASET_VERSION: u32 = 1;
/// Bytes per sample record in the dataset container.
pub const RECORD_LEN: usize = 8 * (3 + 3 + FLUX_DIM) + 4 + 4 + 8;
/// Frame period of the simulated stream, µs (400 Hz).
pub const FRAME_PERIOD_US: u64 = 2_500;

/// One labeled indentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Indentation {
    pub location: [f64; 2],
    pub depth: f64,
    /// (Fx, Fy, Fz) in N.
    pub force: [f64; 3],
    pub flux_delta: FluxVector,
    pub sensor_id: String,
    pub pass_index: u32,
    pub interaction_index: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnakeGridParams {
    pub passes: usize,
    /// Points per side of the square grid.
    pub grid_points: usize,
    pub pitch: f64,
    /// Side of the square block dropped from each corner.
    pub corner_exclusion: usize,
    pub depths: Vec<f64>,
}

impl Default for SnakeGridParams {
    fn default() -> Self {
        Self {
            passes: 1,
            grid_points: 9,
            pitch: 2.0,
            corner_exclusion: 2,
            depths: canonical_depths(),
        }
    }
}

/// 0.2, 0.4, ..., 1.2 mm.
pub fn canonical_depths() -> Vec<f64> {
    (1..=6).map(|i| 0.2 * i as f64).collect()
}

impl SnakeGridParams {
    pub fn with_passes(passes: usize) -> Self {
        Self {
            passes,
            ..Self::default()
        }
    }

    pub fn per_pass(&self) -> usize {
        self.locations().len() * self.depths.len()
    }

    /// Boustrophedon traversal of the grid, corners excluded.
    pub fn locations(&self) -> Vec<[f64; 2]> {
        let n = self.grid_points;
        let c = self.corner_exclusion;
        let half = (n as f64 - 1.0) / 2.0;
        let in_corner = |i: usize, j: usize| {
            let near = |k: usize| k < c || k + c >= n;
            near(i) && near(j)
        };
        let mut out = Vec::new();
        for j in 0..n {
            let cols: Vec<usize> = if j % 2 == 0 { (0..n).collect() } else { (0..n).rev().collect() };
            for i in cols {
                if !in_corner(i, j) {
                    out.push([(i as f64 - half) * self.pitch, (j as f64 - half) * self.pitch]);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShearDragParams {
    /// Distance between parallel drag lines, mm.
    pub spacing: f64,
    pub depth: f64,
    /// Side of the square covered by the drags, mm.
    pub span: f64,
    /// Distance between flux samples along a drag, mm.
    pub sample_step: f64,
    /// Drag speed, mm/s.
    pub speed: f64,
}

impl Default for ShearDragParams {
    fn default() -> Self {
        Self {
            spacing: 2.0,
            depth: 0.8,
            span: 16.0,
            sample_step: 0.5,
            speed: 10.0,
        }
    }
}

impl ShearDragParams {
    /// Offsets of parallel lines across the span.
    pub fn line_offsets(&self) -> Vec<f64> {
        let n = (self.span / self.spacing + 1e-9).floor() as usize + 1;
        (0..n).map(|i| -self.span / 2.0 + i as f64 * self.spacing).collect()
    }
}

/// Location/depth jitter emulating hand-held indentations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManualJitter {
    pub location_sd: f64,
    pub depth_sd: f64,
}

impl Default for ManualJitter {
    fn default() -> Self {
        Self {
            location_sd: 0.5,
            depth_sd: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineParams {
    pub n_lines: usize,
    pub points_per_line: usize,
    /// Shortest allowed line, mm.
    pub min_length: f64,
    pub span: f64,
    /// Per-line depth is drawn uniformly from this range, mm.
    pub depth_range: [f64; 2],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manual: Option<ManualJitter>,
}

impl Default for LineParams {
    fn default() -> Self {
        Self {
            n_lines: 6,
            points_per_line: 65,
            min_length: 8.0,
            span: 16.0,
            depth_range: [0.2, MAX_CANONICAL_DEPTH],
            manual: None,
        }
    }
}

impl LineParams {
    /// Split `budget` indentations into lines of `points_per_line` (last line may be shorter).
    pub fn for_budget(budget: usize, points_per_line: usize) -> Self {
        Self {
            n_lines: budget.div_ceil(points_per_line.max(1)),
            points_per_line,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum ProtocolSpec {
    SnakeGrid(SnakeGridParams),
    ShearDrag(ShearDragParams),
}

impl ProtocolSpec {
    /// Labels the protocol provides: normal force on the grid, full force when dragging.
    pub fn output_kind(&self) -> OutputKind {
        match self {
            ProtocolSpec::SnakeGrid(_) => OutputKind::NormalForce,
            ProtocolSpec::ShearDrag(_) => OutputKind::FullForce,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProtocolSpec::SnakeGrid(_) => "snake_grid",
            ProtocolSpec::ShearDrag(_) => "shear_drag",
        }
    }
}

/// Everything needed to regenerate a dataset bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub sensor_ids: Vec<String>,
    pub sensor: SensorRecipe,
    /// Interactions the sensor had seen before this protocol started.
    pub start_interaction: u64,
    pub protocol: ProtocolSpec,
    pub baseline: BaselineMode,
    pub noise_seed: u64,
    pub config_hash: String,
}

impl DatasetMetadata {
    fn new(
        sensor: &SensorInstance,
        start_interaction: u64,
        protocol: ProtocolSpec,
        baseline: BaselineMode,
        noise_seed: u64,
    ) -> Self {
        let mut meta = Self {
            sensor_ids: vec![sensor.id.clone()],
            sensor: sensor.recipe.clone(),
            start_interaction,
            protocol,
            baseline,
            noise_seed,
            config_hash: String::new(),
        };
        meta.config_hash = stable_hash(&meta);
        meta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Indentation>,
    pub metadata: DatasetMetadata,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Rebuild the sensor from the recipe, replay its history, and rerun the protocol.
    pub fn regenerate(meta: &DatasetMetadata) -> Result<Dataset> {
        let mut sensor = meta.sensor.build()?;
        sensor.advance_drift(meta.start_interaction);
        match &meta.protocol {
            ProtocolSpec::SnakeGrid(p) => snake_grid_protocol(&mut sensor, p, meta.baseline, meta.noise_seed),
            ProtocolSpec::ShearDrag(p) => shear_drag_protocol(&mut sensor, p, meta.baseline, meta.noise_seed),
        }
    }

    /// Random split into (first, second) with `first_fraction` of the samples in the first part.
    pub fn split_random(&self, first_fraction: f64, seed: u64) -> (Vec<Indentation>, Vec<Indentation>) {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.samples.len() as f64) * first_fraction).round() as usize;
        let pick = |ids: &[usize]| ids.iter().map(|&i| self.samples[i].clone()).collect::<Vec<_>>();
        (pick(&idx[..cut]), pick(&idx[cut..]))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&ContainerHeader {
            metadata: self.metadata.clone(),
            record_layout: RECORD_LAYOUT.iter().map(|s| s.to_string()).collect(),
            record_len: RECORD_LEN,
        })?;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        let mut rec = Vec::with_capacity(RECORD_LEN);
        for s in &self.samples {
            rec.clear();
            let sensor_index = self
                .metadata
                .sensor_ids
                .iter()
                .position(|id| *id == s.sensor_id)
                .ok_or_else(|| Error::format("dataset", format!("sensor `{}` missing from metadata", s.sensor_id)))?;
            for v in s.location.iter().chain([&s.depth]).chain(&s.force).chain(&s.flux_delta) {
                rec.extend_from_slice(&v.to_le_bytes());
            }
            rec.extend_from_slice(&(sensor_index as u32).to_le_bytes());
            rec.extend_from_slice(&s.pass_index.to_le_bytes());
            rec.extend_from_slice(&s.interaction_index.to_le_bytes());
            w.write_all(&rec)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Dataset> {
        let mut fixed = [0u8; 16];
        r.read_exact(&mut fixed)?;
        if &fixed[..8] != DATASET_MAGIC {
            return Err(Error::format("dataset", "bad magic"));
        }
        let version = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::format("dataset", format!("unsupported version {version}")));
        }
        let header_len = u32::from_le_bytes(fixed[12..16].try_into().unwrap()) as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header)?;
        let header: ContainerHeader = serde_json::from_slice(&header)?;
        if header.record_len != RECORD_LEN {
            return Err(Error::format("dataset", format!("record length {}", header.record_len)));
        }
        let mut count = [0u8; 8];
        r.read_exact(&mut count)?;
        let count = u64::from_le_bytes(count) as usize;
        let mut samples = Vec::with_capacity(count);
        let mut rec = [0u8; RECORD_LEN];
        for _ in 0..count {
            r.read_exact(&mut rec)?;
            let f = |i: usize| f64::from_le_bytes(rec[8 * i..8 * i + 8].try_into().unwrap());
            let tail = 8 * (6 + FLUX_DIM);
            let sensor_index = u32::from_le_bytes(rec[tail..tail + 4].try_into().unwrap()) as usize;
            let sensor_id = header
                .metadata
                .sensor_ids
                .get(sensor_index)
                .cloned()
                .ok_or_else(|| Error::format("dataset", format!("sensor index {sensor_index} out of range")))?;
            samples.push(Indentation {
                location: [f(0), f(1)],
                depth: f(2),
                force: [f(3), f(4), f(5)],
                flux_delta: std::array::from_fn(|i| f(6 + i)),
                sensor_id,
                pass_index: u32::from_le_bytes(rec[tail + 4..tail + 8].try_into().unwrap()),
                interaction_index: u64::from_le_bytes(rec[tail + 8..tail + 16].try_into().unwrap()),
            });
        }
        Ok(Dataset {
            samples,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["sensor_id", "pass_index", "interaction_index", "x", "y", "depth", "fx", "fy", "fz"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for i in 0..FLUX_DIM / 3 {
            for a in ["dbx", "dby", "dbz"] {
                header.push(format!("chip{i}_{a}"));
            }
        }
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.sensor_id.clone(), s.pass_index.to_string(), s.interaction_index.to_string()];
            row.extend(
                s.location
                    .iter()
                    .chain([&s.depth])
                    .chain(&s.force)
                    .chain(&s.flux_delta)
                    .map(|v| v.to_string()),
            );
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

const RECORD_LAYOUT: [&str; 9] = [
    "x:f64",
    "y:f64",
    "depth:f64",
    "force:3xf64",
    "flux_delta:15xf64",
    "sensor_index:u32",
    "pass_index:u32",
    "interaction_index:u64",
    "little-endian",
];

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    metadata: DatasetMetadata,
    record_layout: Vec<String>,
    record_len: usize,
}

/// Raw no-load/contact pair for one indentation, before baseline handling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawIndentation {
    pub contact: IndenterContact,
    pub force: [f64; 3],
    pub no_load: FluxVector,
    pub loaded: FluxVector,
    pub pass_index: u32,
    pub interaction_index: u64,
}

/// Press `contact` once: no-load reading, contact reading, one drift step.
pub fn indent<R: Rng + ?Sized>(
    sensor: &mut SensorInstance,
    contact: &IndenterContact,
    pass_index: u32,
    rng: &mut R,
) -> Result<RawIndentation> {
    let no_load = sensor.read_flux(None, rng)?.flux;
    let loaded = sensor.read_flux(Some(contact), rng)?.flux;
    let f = sensor.contact_force(contact)?;
    let raw = RawIndentation {
        contact: *contact,
        force: [f.x, f.y, f.z],
        no_load,
        loaded,
        pass_index,
        interaction_index: sensor.drift.interaction_count,
    };
    sensor.advance_drift(1);
    Ok(raw)
}

/// Raw snake-grid indentations: per pass, one snake traversal at each depth.
pub fn snake_grid_raw(sensor: &mut SensorInstance, params: &SnakeGridParams, seed: u64) -> Result<Vec<RawIndentation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locations = params.locations();
    let mut out = Vec::with_capacity(params.passes * params.per_pass());
    for pass in 0..params.passes {
        for &depth in &params.depths {
            for &[x, y] in &locations {
                let c = IndenterContact::new(x, y, depth, sensor.physics.tip_radius);
                out.push(indent(sensor, &c, pass as u32, &mut rng)?);
            }
        }
    }
    Ok(out)
}

/// Apply a baseline policy to raw indentations.
pub fn with_baseline(raw: &[RawIndentation], mode: BaselineMode, sensor_id: &str) -> Result<Vec<Indentation>> {
    let mut tracker = BaselineTracker::new(mode)?;
    raw.iter()
        .map(|r| {
            tracker.observe_no_load(&r.no_load);
            Ok(Indentation {
                location: r.contact.location,
                depth: r.contact.depth,
                force: r.force,
                flux_delta: tracker.contact_delta(&r.loaded)?,
                sensor_id: sensor_id.to_string(),
                pass_index: r.pass_index,
                interaction_index: r.interaction_index,
            })
        })
        .collect()
}

pub fn snake_grid_protocol(
    sensor: &mut SensorInstance,
    params: &SnakeGridParams,
    baseline: BaselineMode,
    seed: u64,
) -> Result<Dataset> {
    let start = sensor.drift.interaction_count;
    let raw = snake_grid_raw(sensor, params, seed)?;
    Ok(Dataset {
        samples: with_baseline(&raw, baseline, &sensor.id)?,
        metadata: DatasetMetadata::new(sensor, start, ProtocolSpec::SnakeGrid(params.clone()), baseline, seed),
    })
}

/// Straight drags along x then y, alternating direction line to line.
///
/// The baseline tracker is offered a no-load reading at the start of each line;
/// samples along one drag share it.
pub fn shear_drag_protocol(
    sensor: &mut SensorInstance,
    params: &ShearDragParams,
    baseline: BaselineMode,
    seed: u64,
) -> Result<Dataset> {
    if !(params.spacing > 0.0) || !(params.sample_step > 0.0) {
        return Err(Error::InvalidParameter("shear drag spacing and sample_step must be > 0".into()));
    }
    let start = sensor.drift.interaction_count;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracker = BaselineTracker::new(baseline)?;
    let offsets = params.line_offsets();
    let n_steps = (params.span / params.sample_step + 1e-9).floor() as usize;
    let mut samples = Vec::new();
    for (axis_index, along_x) in [true, false].into_iter().enumerate() {
        for (line, &offset) in offsets.iter().enumerate() {
            let forward = line % 2 == 0;
            let dir = if forward { 1.0 } else { -1.0 };
            let no_load = sensor.read_flux(None, &mut rng)?.flux;
            tracker.observe_no_load(&no_load);
            for step in 0..=n_steps {
                let s = -params.span / 2.0 + step as f64 * params.sample_step;
                let s = if forward { s } else { -s };
                let (x, y, vx, vy) = if along_x {
                    (s, offset, dir * params.speed, 0.0)
                } else {
                    (offset, s, 0.0, dir * params.speed)
                };
                let c = IndenterContact::new(x, y, params.depth, sensor.physics.tip_radius).dragging(vx, vy);
                let loaded = sensor.read_flux(Some(&c), &mut rng)?.flux;
                let f = sensor.contact_force(&c)?;
                samples.push(Indentation {
                    location: [x, y],
                    depth: params.depth,
                    force: [f.x, f.y, f.z],
                    flux_delta: tracker.contact_delta(&loaded)?,
                    sensor_id: sensor.id.clone(),
                    pass_index: axis_index as u32,
                    interaction_index: sensor.drift.interaction_count,
                });
                sensor.advance_drift(1);
            }
        }
    }
    Ok(Dataset {
        samples,
        metadata: DatasetMetadata::new(sensor, start, ProtocolSpec::ShearDrag(params.clone()), baseline, seed),
    })
}

/// Unlabeled indentations along one straight line, in traversal order.
///
/// Only flux is kept: the index of each entry is its position along the line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineTrajectory {
    pub ordered_flux: Vec<FluxVector>,
}

impl LineTrajectory {
    pub fn n_points(&self) -> usize {
        self.ordered_flux.len()
    }
}

/// Ground truth of a generated line, kept apart from the trajectory for diagnostics only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinePath {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineCollection {
    pub trajectories: Vec<LineTrajectory>,
    pub paths: Vec<LinePath>,
}

impl LineCollection {
    pub fn total_points(&self) -> usize {
        self.trajectories.iter().map(LineTrajectory::n_points).sum()
    }
}

/// Random straight lines indented point by point with before-each baselines.
///
/// When `params.manual` is set, each indentation lands off the ideal line by the
/// configured jitter, emulating a hand-held pen.
pub fn line_adaptation_protocol(
    sensor: &mut SensorInstance,
    params: &LineParams,
    seed: u64,
) -> Result<LineCollection> {
    line_adaptation_protocol_budget(sensor, params, params.n_lines * params.points_per_line, seed)
}

/// Like [`line_adaptation_protocol`] but stops after `budget` indentations in total.
pub fn line_adaptation_protocol_budget(
    sensor: &mut SensorInstance,
    params: &LineParams,
    budget: usize,
    seed: u64,
) -> Result<LineCollection> {
    if params.n_lines < 1 || params.points_per_line < 3 {
        return Err(Error::InvalidParameter("need n_lines >= 1 and points_per_line >= 3".into()));
    }
    if params.min_length > params.span * std::f64::consts::SQRT_2 {
        return Err(Error::InvalidParameter("min_length exceeds the span diagonal".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracker = BaselineTracker::new(BaselineMode::BeforeEach)?;
    let half = params.span / 2.0;
    let mut remaining = budget;
    let mut out = LineCollection {
        trajectories: Vec::new(),
        paths: Vec::new(),
    };
    for _ in 0..params.n_lines {
        if remaining < 3 {
            break;
        }
        let n = params.points_per_line.min(remaining);
        let (start, end) = loop {
            let a = [rng.random_range(-half..=half), rng.random_range(-half..=half)];
            let b = [rng.random_range(-half..=half), rng.random_range(-half..=half)];
            if (a[0] - b[0]).hypot(a[1] - b[1]) >= params.min_length {
                break (a, b);
            }
        };
        let depth = rng.random_range(params.depth_range[0]..=params.depth_range[1]);
        let mut flux = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 / (n - 1) as f64;
            let mut x = start[0] + t * (end[0] - start[0]);
            let mut y = start[1] + t * (end[1] - start[1]);
            let mut d = depth;
            if let Some(j) = &params.manual {
                let (nx, ny, nd): (f64, f64, f64) =
                    (rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                x = (x + j.location_sd * nx).clamp(-half, half);
                y = (y + j.location_sd * ny).clamp(-half, half);
                d = (d + j.depth_sd * nd).clamp(0.05, MAX_CANONICAL_DEPTH);
            }
            let c = IndenterContact::new(x, y, d, sensor.physics.tip_radius);
            let raw = indent(sensor, &c, 0, &mut rng)?;
            tracker.observe_no_load(&raw.no_load);
            flux.push(tracker.contact_delta(&raw.loaded)?);
        }
        remaining -= n;
        out.trajectories.push(LineTrajectory { ordered_flux: flux });
        out.paths.push(LinePath { start, end, depth });
    }
    Ok(out)
}

/// Indices of one sampled triplet within trajectory `line`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletIndices {
    pub line: usize,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl TripletIndices {
    /// `|a − p| < |a − n|`, with `p ≠ a`.
    pub fn is_ordered(&self) -> bool {
        let dp = self.anchor.abs_diff(self.positive);
        let dn = self.anchor.abs_diff(self.negative);
        dp >= 1 && dn > dp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub anchor: FluxVector,
    pub positive: FluxVector,
    pub negative: FluxVector,
}

/// Sample triplets with replacement: anchor uniform over all points, positive and
/// negative from the anchor's line with the positive strictly closer in index.
pub fn sample_triplet_indices(lengths: &[usize], n_triplets: usize, seed: u64) -> Result<Vec<TripletIndices>> {
    if lengths.is_empty() && n_triplets > 0 {
        return Err(Error::EmptyInput("trajectories"));
    }
    if let Some(short) = lengths.iter().find(|&&l| l < 3) {
        return Err(Error::InvalidParameter(format!("trajectory with {short} points; need >= 3")));
    }
    let total: usize = lengths.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_triplets);
    while out.len() < n_triplets {
        let mut g = rng.random_range(0..total);
        let mut line = 0;
        while g >= lengths[line] {
            g -= lengths[line];
            line += 1;
        }
        let len = lengths[line];
        let anchor = g;
        // anchor needs two distinct distances available
        if anchor.max(len - 1 - anchor) < 2 {
            continue;
        }
        let j = rng.random_range(0..len);
        let k = rng.random_range(0..len);
        let (dj, dk) = (anchor.abs_diff(j), anchor.abs_diff(k));
        if dj == 0 || dk == 0 || dj == dk {
            continue;
        }
        let (positive, negative) = if dj < dk { (j, k) } else { (k, j) };
        out.push(TripletIndices {
            line,
            anchor,
            positive,
            negative,
        });
    }
    Ok(out)
}

pub fn sample_triplets(trajectories: &[LineTrajectory], n_triplets: usize, seed: u64) -> Result<Vec<Triplet>> {
    let lengths: Vec<usize> = trajectories.iter().map(LineTrajectory::n_points).collect();
    Ok(sample_triplet_indices(&lengths, n_triplets, seed)?
        .into_iter()
        .map(|t| {
            let f = &trajectories[t.line].ordered_flux;
            Triplet {
                anchor: f[t.anchor],
                positive: f[t.positive],
                negative: f[t.negative],
            }
        })
        .collect())
}

/// Snake-grid session as a frame stream: a no-load frame then a contact frame per indentation.
pub fn record_snake_session(
    sensor: &mut SensorInstance,
    params: &SnakeGridParams,
    seed: u64,
) -> Result<(Vec<FluxFrame>, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locations = params.locations();
    let mut frames = Vec::new();
    let mut markers = Vec::new();
    let mut ts = 0u64;
    for _ in 0..params.passes {
        for &depth in &params.depths {
            for &[x, y] in &locations {
                let c = IndenterContact::new(x, y, depth, sensor.physics.tip_radius);
                for (contact, marker) in [(None, false), (Some(&c), true)] {
                    let reading = sensor.read_flux(contact, &mut rng)?;
                    frames.push(FluxFrame::from_reading(ts, &reading));
                    markers.push(marker);
                    ts += FRAME_PERIOD_US;
                }
                sensor.advance_drift(1);
            }
        }
    }
    Ok((frames, markers))
}

/// Layout of a simulated fleet: boards share a geometry perturbation, skins vary independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetSpec {
    pub boards: usize,
    pub skins_per_board: usize,
    /// SD of each board's standoff offset, mm.
    pub board_standoff_sd: f64,
    /// SD of each magnetometer's placement error on a board, mm.
    pub board_placement_sd: f64,
    pub variation: VariationParams,
    pub seed: u64,
}

impl Default for FleetSpec {
    fn default() -> Self {
        Self {
            boards: 6,
            skins_per_board: 3,
            board_standoff_sd: 0.1,
            board_placement_sd: 0.1,
            variation: VariationParams::default(),
            seed: 2021,
        }
    }
}

pub fn sensor_id(board: usize, skin: usize) -> String {
    format!("b{board}s{skin}")
}

impl FleetSpec {
    pub fn board_geometry(&self, base: &BoardGeometry, board: usize) -> BoardGeometry {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9).wrapping_add(board as u64));
        let mut g = base.clone();
        let dz: f64 = rng.sample(StandardNormal);
        g.sensor_standoff = (g.sensor_standoff + self.board_standoff_sd * dz).max(0.0);
        for p in g.magnetometer_positions.iter_mut() {
            for v in p.iter_mut() {
                let d: f64 = rng.sample(StandardNormal);
                *v += self.board_placement_sd * d;
            }
        }
        g
    }

    /// Sensors in board-major order with ids `b{board}s{skin}`.
    pub fn build(&self, base: &BoardGeometry, physics: &SkinPhysics) -> Result<Vec<SensorInstance>> {
        let mut out = Vec::with_capacity(self.boards * self.skins_per_board);
        for b in 0..self.boards {
            let g = self.board_geometry(base, b);
            for s in 0..self.skins_per_board {
                let seed = self.seed.wrapping_add(1_000 * (b as u64 + 1) + s as u64);
                out.push(make_sensor(sensor_id(b, s), &g, &self.variation, physics, seed)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_sim::DriftLaw;

    fn sensor(drift: bool, noise: bool) -> SensorInstance {
        let mut p = SkinPhysics::default();
        if !drift {
            p.drift = DriftLaw::disabled();
        }
        let s = make_sensor("t0", &BoardGeometry::canonical(), &VariationParams::default(), &p, 11).unwrap();
        if noise {
            s
        } else {
            s.without_noise()
        }
    }

    #[test]
    fn snake_grid_has_65_locations() {
        let p = SnakeGridParams::default();
        let locs = p.locations();
        assert_eq!(locs.len(), 65);
        let mut uniq = locs.clone();
        uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
        uniq.dedup();
        assert_eq!(uniq.len(), 65);
        assert!(!locs.contains(&[-8.0, -8.0]) && !locs.contains(&[-6.0, -6.0]));
        assert!(locs.contains(&[-4.0, -8.0]) && locs.contains(&[-8.0, -4.0]));
        // consecutive points in a row are one pitch apart
        assert_eq!(locs[0], [-4.0, -8.0]);
        assert_eq!(locs[1], [-2.0, -8.0]);
        assert_eq!(p.per_pass(), 390);
        assert_eq!(canonical_depths().len(), 6);
    }

    #[test]
    fn one_pass_is_390_indentations() {
        let mut s = sensor(true, true);
        let d = snake_grid_protocol(&mut s, &SnakeGridParams::with_passes(1), BaselineMode::BeforeEach, 1).unwrap();
        assert_eq!(d.len(), 390);
        assert_eq!(s.drift.interaction_count, 390);
        assert!(d.samples.windows(2).all(|w| w[1].interaction_index > w[0].interaction_index));
        let mut s = sensor(true, true);
        let d = snake_grid_protocol(&mut s, &SnakeGridParams::with_passes(0), BaselineMode::BeforeEach, 1).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn passes_repeat_without_drift_or_noise() {
        let mut s = sensor(false, false);
        let d = snake_grid_protocol(&mut s, &SnakeGridParams::with_passes(2), BaselineMode::Once, 3).unwrap();
        for (a, b) in d.samples[..390].iter().zip(&d.samples[390..]) {
            for (x, y) in a.flux_delta.iter().zip(&b.flux_delta) {
                assert!((x - y).abs() <= 1e-10 * x.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn regenerates_from_metadata() {
        let mut s = sensor(true, true);
        s.advance_drift(25);
        let d = snake_grid_protocol(&mut s, &SnakeGridParams::with_passes(1), BaselineMode::EveryK(5), 9).unwrap();
        let again = Dataset::regenerate(&d.metadata).unwrap();
        assert_eq!(again, d);
    }

    #[test]
    fn container_round_trip() {
        let mut s = sensor(true, true);
        let d = snake_grid_protocol(&mut s, &SnakeGridParams::with_passes(1), BaselineMode::BeforeEach, 2).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(&buf[..]).unwrap();
        assert_eq!(back, d);
        assert!(Dataset::read_from(&buf[..20]).is_err());
        let mut csv = Vec::new();
        d.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 391);
    }

    #[test]
    fn shear_drag_lines_and_friction() {
        let p = ShearDragParams::default();
        assert_eq!(p.line_offsets().len(), 9);
        let mut s = sensor(true, true);
        let d = shear_drag_protocol(&mut s, &p, BaselineMode::BeforeEach, 4).unwrap();
        assert_eq!(d.len(), 2 * 9 * 33);
        for smp in &d.samples {
            let t = smp.force[0].hypot(smp.force[1]);
            assert!((t - 0.4 * smp.force[2]).abs() <= 1e-12 * smp.force[2]);
        }
        // both drag directions occur along each axis
        assert!(d.samples.iter().any(|s| s.force[0] > 0.0) && d.samples.iter().any(|s| s.force[0] < 0.0));
        assert!(d.samples.iter().any(|s| s.force[1] > 0.0) && d.samples.iter().any(|s| s.force[1] < 0.0));
    }

    #[test]
    fn line_protocol_budget() {
        let mut s = sensor(true, true);
        let lines = line_adaptation_protocol(&mut s, &LineParams::default(), 5).unwrap();
        assert_eq!(lines.trajectories.len(), 6);
        assert_eq!(lines.total_points(), 390);
        let manual = LineParams {
            manual: Some(ManualJitter::default()),
            ..LineParams::for_budget(325, 65)
        };
        let lines = line_adaptation_protocol(&mut s, &manual, 6).unwrap();
        assert_eq!(lines.total_points(), 325);
        let bad = LineParams {
            points_per_line: 2,
            ..LineParams::default()
        };
        assert!(line_adaptation_protocol(&mut s, &bad, 1).is_err());
    }

    #[test]
    fn three_point_line_triplets() {
        let t = sample_triplet_indices(&[3], 200, 1).unwrap();
        for tr in t {
            assert!(tr.anchor == 0 || tr.anchor == 2);
            assert_eq!(tr.anchor.abs_diff(tr.positive), 1);
            assert_eq!(tr.anchor.abs_diff(tr.negative), 2);
        }
    }

    #[test]
    fn triplets_ordered_and_deterministic() {
        let t = sample_triplet_indices(&[65], 10_000, 7).unwrap();
        assert!(t.iter().all(TripletIndices::is_ordered));
        assert_eq!(t, sample_triplet_indices(&[65], 10_000, 7).unwrap());
        assert_ne!(t, sample_triplet_indices(&[65], 10_000, 8).unwrap());
        assert!(sample_triplet_indices(&[65, 2], 10, 7).is_err());
    }

    #[test]
    fn fleet_ids_and_board_sharing() {
        let fleet = FleetSpec::default();
        let sensors = fleet.build(&BoardGeometry::canonical(), &SkinPhysics::default()).unwrap();
        assert_eq!(sensors.len(), 18);
        assert_eq!(sensors[4].id, "b1s1");
        assert_eq!(sensors[3].recipe.geometry, sensors[5].recipe.geometry);
        assert_ne!(sensors[0].recipe.geometry, sensors[3].recipe.geometry);
    }
}
