//! Magnetized elastomer skin simulator.
//!
//! The skin is discretized into a grid of point dipoles sitting above a board
//! carrying five three-axis magnetometers. An indentation displaces the dipoles
//! with a smooth radial bump; the magnetometers read the superposed dipole field.
//! Fabrication variation, elastomer softening, and baseline drift are layered on
//! top so that every simulated skin has its own response.

use nalgebra::{Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_MAGNETOMETERS: usize = 5;
pub const FLUX_DIM: usize = 3 * N_MAGNETOMETERS;

/// Flux readout of all magnetometers, laid out `[b0x, b0y, b0z, b1x, ...]`.
pub type FluxVector = [f64; FLUX_DIM];

/// Unit constant `k` of the point-dipole law `B = k (3(m·r̂)r̂ − m) / |r|³`.
///
/// Flux is in arbitrary units; the decoder normalizes its inputs, so only the
/// relative field structure matters.
pub const FIELD_CONSTANT: f64 = 1.0;

/// Deepest indentation used by the canonical protocols, mm.
pub const MAX_CANONICAL_DEPTH: f64 = 1.2;

const SNAPSHOT_MAGIC: &[u8; 8] = b"MSKSNAP\0";
const SNAPSHOT_VERSION: u32 = 1;

/// Point-dipole field of `moment` located at `position`, observed at `observation`.
pub fn dipole_field(
    position: &Point3<f64>,
    moment: &Vector3<f64>,
    observation: &Point3<f64>,
) -> Result<Vector3<f64>> {
    let r = observation - position;
    let dist2 = r.norm_squared();
    if dist2 == 0.0 || !dist2.is_finite() {
        return Err(Error::Singularity);
    }
    Ok(dipole_field_unchecked(&r, dist2, moment))
}

#[inline]
fn dipole_field_unchecked(r: &Vector3<f64>, dist2: f64, moment: &Vector3<f64>) -> Vector3<f64> {
    let dist = dist2.sqrt();
    let inv3 = 1.0 / (dist2 * dist);
    let inv5 = inv3 / dist2;
    (r * (3.0 * moment.dot(r) * inv5) - moment * inv3) * FIELD_CONSTANT
}

/// Board layout: magnetometer positions and the skin's placement above them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoardGeometry {
    /// Magnetometer (x, y) positions in mm, central chip first.
    pub magnetometer_positions: [[f64; 2]; N_MAGNETOMETERS],
    pub skin_thickness: f64,
    /// Vertical gap between the magnetometer plane and the skin underside, mm.
    pub sensor_standoff: f64,
    /// (width, height) of the sensing area in mm, centered on the central chip.
    pub sensing_area: [f64; 2],
}

impl Default for BoardGeometry {
    fn default() -> Self {
        Self::canonical()
    }
}

impl BoardGeometry {
    pub const PITCH: f64 = 7.0;

    /// Rigid board: plus-shaped layout at 7 mm pitch under a 20 mm × 20 mm skin.
    pub fn canonical() -> Self {
        let p = Self::PITCH;
        Self {
            magnetometer_positions: [[0.0, 0.0], [p, 0.0], [0.0, p], [-p, 0.0], [0.0, -p]],
            skin_thickness: 2.0,
            sensor_standoff: 1.0,
            sensing_area: [20.0, 20.0],
        }
    }

    /// Flexible board: same layout with an 80% smaller skin-to-board gap.
    pub fn flexible() -> Self {
        Self::canonical().with_standoff_scale(0.2)
    }

    pub fn with_standoff_scale(&self, scale: f64) -> Self {
        Self {
            sensor_standoff: self.sensor_standoff * scale,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.skin_thickness > 0.0) {
            return Err(Error::InvalidGeometry("skin_thickness must be > 0".into()));
        }
        if !(self.sensor_standoff >= 0.0) {
            return Err(Error::InvalidGeometry("sensor_standoff must be >= 0".into()));
        }
        if !(self.sensing_area[0] > 0.0 && self.sensing_area[1] > 0.0) {
            return Err(Error::InvalidGeometry("sensing_area must be positive".into()));
        }
        if self
            .magnetometer_positions
            .iter()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidGeometry("non-finite magnetometer position".into()));
        }
        Ok(())
    }

    /// True when four chips sit at `PITCH` around the central one, 90° apart.
    pub fn has_canonical_layout(&self) -> bool {
        let [c, rest @ ..] = &self.magnetometer_positions;
        let mut angles = Vec::with_capacity(4);
        for p in rest {
            let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
            if ((dx * dx + dy * dy).sqrt() - Self::PITCH).abs() > 1e-9 {
                return false;
            }
            angles.push(dy.atan2(dx));
        }
        angles.sort_by(f64::total_cmp);
        angles
            .windows(2)
            .all(|w| (w[1] - w[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-9)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let [c, ..] = self.magnetometer_positions;
        (x - c[0]).abs() <= self.sensing_area[0] / 2.0 && (y - c[1]).abs() <= self.sensing_area[1] / 2.0
    }

    pub fn magnetometer_points(&self) -> [Point3<f64>; N_MAGNETOMETERS] {
        self.magnetometer_positions.map(|[x, y]| Point3::new(x, y, 0.0))
    }
}

/// Discretization and magnetization pattern of the elastomer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Dipole counts along x, y, z.
    pub dims: [usize; 3],
    /// Lateral extent of the elastomer, mm. Slightly larger than the sensing area.
    pub extent: [f64; 2],
    /// The skin is magnetized as an alternating ±z checkerboard of this many blocks per side.
    pub magnetization_blocks: usize,
    pub moment_strength: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            dims: [10, 10, 2],
            extent: [22.0, 22.0],
            magnetization_blocks: 4,
            moment_strength: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipoleGrid {
    pub positions: Vec<Point3<f64>>,
    pub moments: Vec<Vector3<f64>>,
    pub dims: [usize; 3],
    /// z of the elastomer underside, mm.
    pub z_bottom: f64,
    pub thickness: f64,
}

impl DipoleGrid {
    /// Undisturbed grid: dipoles at cell centers, checkerboard ±z magnetization.
    pub fn nominal(geometry: &BoardGeometry, spec: &GridSpec) -> Result<Self> {
        let [nx, ny, nz] = spec.dims;
        if nx == 0 || ny == 0 || nz == 0 || spec.magnetization_blocks == 0 {
            return Err(Error::InvalidParameter("grid dims and blocks must be >= 1".into()));
        }
        if spec.moment_strength == 0.0 || !spec.moment_strength.is_finite() {
            return Err(Error::InvalidParameter("moment_strength must be nonzero".into()));
        }
        let [cx, cy] = geometry.magnetometer_positions[0];
        let [w, h] = spec.extent;
        let z_bottom = geometry.sensor_standoff;
        let t = geometry.skin_thickness;
        let n = nx * ny * nz;
        let mut positions = Vec::with_capacity(n);
        let mut moments = Vec::with_capacity(n);
        let blocks = spec.magnetization_blocks;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let x = cx - w / 2.0 + w * (i as f64 + 0.5) / nx as f64;
                    let y = cy - h / 2.0 + h * (j as f64 + 0.5) / ny as f64;
                    let z = z_bottom + t * (k as f64 + 0.5) / nz as f64;
                    positions.push(Point3::new(x, y, z));
                    let (bx, by) = (i * blocks / nx, j * blocks / ny);
                    let sign = if (bx + by) % 2 == 0 { 1.0 } else { -1.0 };
                    moments.push(Vector3::new(0.0, 0.0, sign * spec.moment_strength));
                }
            }
        }
        Ok(Self {
            positions,
            moments,
            dims: spec.dims,
            z_bottom,
            thickness: t,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Same grid with every moment multiplied by `factor`.
    pub fn scaled_moments(&self, factor: f64) -> Self {
        Self {
            moments: self.moments.iter().map(|m| m * factor).collect(),
            ..self.clone()
        }
    }

    /// Superposed field of all dipoles at `observation`.
    pub fn field_at(&self, observation: &Point3<f64>) -> Result<Vector3<f64>> {
        let mut b = Vector3::zeros();
        for (p, m) in self.positions.iter().zip(&self.moments) {
            let r = observation - p;
            let d2 = r.norm_squared();
            if d2 == 0.0 {
                return Err(Error::Singularity);
            }
            b += dipole_field_unchecked(&r, d2, m);
        }
        Ok(b)
    }
}

/// Standard deviations of per-skin fabrication variation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VariationParams {
    /// Relative SD of each dipole's moment magnitude.
    pub moment_scale_sd: f64,
    /// SD of each dipole's moment tilt, radians.
    pub moment_angle_sd: f64,
    /// SD of each dipole's position along every axis, mm.
    pub position_jitter_sd: f64,
    /// SD of the whole skin's standoff offset, mm.
    pub standoff_offset_sd: f64,
}

impl Default for VariationParams {
    fn default() -> Self {
        Self {
            moment_scale_sd: 0.1,
            moment_angle_sd: 0.05,
            position_jitter_sd: 0.2,
            standoff_offset_sd: 0.1,
        }
    }
}

impl VariationParams {
    pub fn none() -> Self {
        Self {
            moment_scale_sd: 0.0,
            moment_angle_sd: 0.0,
            position_jitter_sd: 0.0,
            standoff_offset_sd: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sds = [
            self.moment_scale_sd,
            self.moment_angle_sd,
            self.position_jitter_sd,
            self.standoff_offset_sd,
        ];
        if sds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter("variation SDs must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// How the elastomer moves under the indenter.
///
/// Vertical displacement is a Gaussian bump `depth · exp(−r²/2σ²)` with `σ` equal
/// to the tip radius. Lateral displacement follows the bump's radial gradient
/// scaled by `poisson_factor`. Both fall off linearly through the thickness,
/// reaching zero at the underside which rests on the board.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeformationLaw {
    pub poisson_factor: f64,
    /// Tangential displacement per unit vertical displacement while dragging.
    pub shear_coupling: f64,
}

impl Default for DeformationLaw {
    fn default() -> Self {
        Self {
            poisson_factor: 0.3,
            shear_coupling: 0.4,
        }
    }
}

/// Hemispherical indenter pressed into the skin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndenterContact {
    /// (x, y) in mm, sensing-area coordinates.
    pub location: [f64; 2],
    pub depth: f64,
    pub tip_radius: f64,
    /// Drag velocity in mm/s for shear trajectories.
    pub drag_velocity: Option<[f64; 2]>,
}

impl IndenterContact {
    pub fn new(x: f64, y: f64, depth: f64, tip_radius: f64) -> Self {
        Self {
            location: [x, y],
            depth,
            tip_radius,
            drag_velocity: None,
        }
    }

    pub fn dragging(mut self, vx: f64, vy: f64) -> Self {
        self.drag_velocity = Some([vx, vy]);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.depth >= 0.0) || !self.depth.is_finite() {
            return Err(Error::InvalidContact(format!("depth {} must be >= 0", self.depth)));
        }
        if !(self.tip_radius > 0.0) {
            return Err(Error::InvalidContact("tip_radius must be > 0".into()));
        }
        if self.location.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidContact("non-finite location".into()));
        }
        Ok(())
    }

    /// Unit drag direction, if the indenter is moving.
    fn drag_direction(&self) -> Option<[f64; 2]> {
        let [vx, vy] = self.drag_velocity?;
        let speed = vx.hypot(vy);
        (speed > 0.0).then(|| [vx / speed, vy / speed])
    }
}

/// Displace `grid` under `contact`.
pub fn deform(grid: &DipoleGrid, contact: &IndenterContact, law: &DeformationLaw) -> Result<DipoleGrid> {
    contact.validate()?;
    if contact.depth == 0.0 {
        return Ok(grid.clone());
    }
    let [cx, cy] = contact.location;
    let sigma = contact.tip_radius;
    let inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    let drag = contact.drag_direction();
    let positions = grid
        .positions
        .iter()
        .map(|p| {
            let (dx, dy) = (p.x - cx, p.y - cy);
            let r2 = dx * dx + dy * dy;
            let bump = contact.depth * (-r2 * inv_two_sigma2).exp();
            let through = ((p.z - grid.z_bottom) / grid.thickness).clamp(0.0, 1.0);
            let w = bump * through;
            // radial outward displacement: poisson · σ · |dw/dr|
            let radial = law.poisson_factor * w / sigma;
            let mut q = Point3::new(p.x + radial * dx, p.y + radial * dy, p.z - w);
            if let Some([ux, uy]) = drag {
                q.x += law.shear_coupling * w * ux;
                q.y += law.shear_coupling * w * uy;
            }
            q
        })
        .collect();
    Ok(DipoleGrid {
        positions,
        moments: grid.moments.clone(),
        dims: grid.dims,
        z_bottom: grid.z_bottom,
        thickness: grid.thickness,
    })
}

/// Hertzian contact law with Coulomb drag friction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContactLaw {
    /// Effective modulus E*, MPa (N/mm²).
    pub effective_modulus: f64,
    pub friction: f64,
}

impl Default for ContactLaw {
    /// E* = 1 MPa gives Fz ≈ 3.04 N at 1.2 mm with a 3 mm tip.
    fn default() -> Self {
        Self {
            effective_modulus: 1.0,
            friction: 0.4,
        }
    }
}

impl ContactLaw {
    /// Force on the skin in N: `Fz = s · 4/3 · E* · √R · d^1.5`, tangential `μ·Fz` along the drag.
    pub fn force(&self, contact: &IndenterContact, drift: &DriftState) -> Result<Vector3<f64>> {
        contact.validate()?;
        let fz = drift.softening_factor
            * (4.0 / 3.0)
            * self.effective_modulus
            * contact.tip_radius.sqrt()
            * contact.depth.powf(1.5);
        let (fx, fy) = match contact.drag_direction() {
            Some([ux, uy]) => (self.friction * fz * ux, self.friction * fz * uy),
            None => (0.0, 0.0),
        };
        Ok(Vector3::new(fx, fy, fz))
    }
}

/// Softening and baseline-wander parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftLaw {
    pub enabled: bool,
    /// Asymptotic softening factor.
    pub softening_floor: f64,
    /// Softening time constant, interactions.
    pub softening_tau: f64,
    /// Random-walk step SD relative to the typical no-load flux norm.
    pub walk_step_rel: f64,
    /// Largest baseline offset norm relative to the typical contact flux-delta norm.
    pub walk_bound_rel: f64,
}

impl Default for DriftLaw {
    fn default() -> Self {
        Self {
            enabled: true,
            softening_floor: 0.85,
            softening_tau: 30_000.0,
            walk_step_rel: 1e-4,
            walk_bound_rel: 0.5,
        }
    }
}

impl DriftLaw {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// `floor + (1 − floor)·exp(−n/τ)`.
    pub fn softening_at(&self, interactions: u64) -> f64 {
        if !self.enabled {
            return 1.0;
        }
        self.softening_floor + (1.0 - self.softening_floor) * (-(interactions as f64) / self.softening_tau).exp()
    }
}

/// Wear state of one skin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftState {
    pub interaction_count: u64,
    pub softening_factor: f64,
    pub baseline_offset: FluxVector,
    pub law: DriftLaw,
    /// Absolute random-walk step SD, flux units.
    pub step_sd: f64,
    /// The offset is projected back onto this norm ball after each step, flux units.
    pub bound: f64,
    pub seed: u64,
}

impl DriftState {
    pub fn fresh(law: DriftLaw, step_sd: f64, bound: f64, seed: u64) -> Self {
        Self {
            interaction_count: 0,
            softening_factor: law.softening_at(0),
            baseline_offset: [0.0; FLUX_DIM],
            law,
            step_sd,
            bound,
            seed,
        }
    }

    /// State after `n` more interactions.
    ///
    /// Each interaction's baseline step is drawn from an RNG stream keyed by its
    /// global index, so `advance(a).advance(b) == advance(a + b)`.
    pub fn advance(&self, n: u64) -> DriftState {
        let mut next = self.clone();
        if n == 0 {
            return next;
        }
        if self.law.enabled && self.step_sd > 0.0 {
            for step in self.interaction_count..self.interaction_count + n {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(step);
                for v in next.baseline_offset.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += self.step_sd * z.clamp(-4.0, 4.0);
                }
                let n = norm(&next.baseline_offset);
                if n > self.bound {
                    let k = self.bound / n;
                    next.baseline_offset.iter_mut().for_each(|v| *v *= k);
                }
            }
        }
        next.interaction_count += n;
        next.softening_factor = self.law.softening_at(next.interaction_count);
        next
    }
}

/// Everything about a skin model that is shared across a fleet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkinPhysics {
    pub grid: GridSpec,
    pub deformation: DeformationLaw,
    pub contact: ContactLaw,
    pub drift: DriftLaw,
    /// Measurement noise SD relative to the typical contact flux-delta norm.
    pub noise_rel: f64,
    /// Indenter radius used by the protocols and for noise calibration, mm.
    pub tip_radius: f64,
    pub ambient_temp_c: f64,
}

impl Default for SkinPhysics {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            deformation: DeformationLaw::default(),
            contact: ContactLaw::default(),
            drift: DriftLaw::default(),
            noise_rel: 0.005,
            tip_radius: 3.0,
            ambient_temp_c: 25.0,
        }
    }
}

/// Flux scales of the nominal canonical skin, used to set noise and drift magnitudes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceScales {
    pub no_load_norm: f64,
    /// RMS flux-delta norm over a 9×9 grid at 2 mm pitch and six depths.
    pub contact_delta_norm: f64,
}

impl SkinPhysics {
    pub fn reference_scales(&self) -> Result<ReferenceScales> {
        let geometry = BoardGeometry::canonical();
        let grid = DipoleGrid::nominal(&geometry, &self.grid)?;
        let mags = geometry.magnetometer_points();
        let rest = superpose(&grid, &mags)?;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for iy in 0..9 {
            for ix in 0..9 {
                for d in 1..=6 {
                    let contact = IndenterContact::new(
                        -8.0 + 2.0 * ix as f64,
                        -8.0 + 2.0 * iy as f64,
                        0.2 * d as f64,
                        self.tip_radius,
                    );
                    let deformed = deform(&grid, &contact, &self.deformation)?;
                    let flux = superpose(&deformed, &mags)?;
                    sum_sq += flux.iter().zip(&rest).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                    count += 1;
                }
            }
        }
        Ok(ReferenceScales {
            no_load_norm: norm(&rest),
            contact_delta_norm: (sum_sq / count as f64).sqrt(),
        })
    }
}

fn superpose(grid: &DipoleGrid, mags: &[Point3<f64>; N_MAGNETOMETERS]) -> Result<FluxVector> {
    let mut out = [0.0; FLUX_DIM];
    for (i, m) in mags.iter().enumerate() {
        let b = grid.field_at(m)?;
        out[3 * i..3 * i + 3].copy_from_slice(b.as_slice());
    }
    Ok(out)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One magnetometer sweep: 15 flux values plus 5 chip temperatures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reading {
    pub flux: FluxVector,
    pub temperature: [f64; N_MAGNETOMETERS],
}

/// Inputs that regenerate a sensor bit-exactly through [`make_sensor`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecipe {
    pub id: String,
    /// Board geometry before skin-level variation.
    pub geometry: BoardGeometry,
    pub variation: VariationParams,
    pub physics: SkinPhysics,
    pub seed: u64,
}

impl SensorRecipe {
    pub fn build(&self) -> Result<SensorInstance> {
        make_sensor(self.id.clone(), &self.geometry, &self.variation, &self.physics, self.seed)
    }
}

/// A simulated skin mounted on a board.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorInstance {
    pub id: String,
    pub recipe: SensorRecipe,
    pub geometry: BoardGeometry,
    /// Undeformed grid with fabrication variation applied.
    pub grid: DipoleGrid,
    pub drift: DriftState,
    pub noise_sd: f64,
    pub physics: SkinPhysics,
}

/// Draw a skin on `geometry` with fabrication variation keyed by `seed`.
pub fn make_sensor(
    id: impl Into<String>,
    geometry: &BoardGeometry,
    variation: &VariationParams,
    physics: &SkinPhysics,
    seed: u64,
) -> Result<SensorInstance> {
    geometry.validate()?;
    variation.validate()?;
    let id = id.into();
    let recipe = SensorRecipe {
        id: id.clone(),
        geometry: geometry.clone(),
        variation: variation.clone(),
        physics: physics.clone(),
        seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { rng.sample(StandardNormal) };

    let mut geometry = geometry.clone();
    geometry.sensor_standoff = (geometry.sensor_standoff + variation.standoff_offset_sd * normal()).max(0.0);
    let mut grid = DipoleGrid::nominal(&geometry, &physics.grid)?;

    let [w, h] = physics.grid.extent;
    let [cx, cy] = geometry.magnetometer_positions[0];
    let (z_lo, z_hi) = (grid.z_bottom, grid.z_bottom + grid.thickness);
    for (p, m) in grid.positions.iter_mut().zip(grid.moments.iter_mut()) {
        let j = Vector3::new(normal(), normal(), normal()) * variation.position_jitter_sd;
        p.x = (p.x + j.x).clamp(cx - w / 2.0, cx + w / 2.0);
        p.y = (p.y + j.y).clamp(cy - h / 2.0, cy + h / 2.0);
        p.z = (p.z + j.z).clamp(z_lo, z_hi);

        let scale = (1.0 + variation.moment_scale_sd * normal()).max(0.05);
        let tilt = Vector3::new(normal(), normal(), normal()) * variation.moment_angle_sd;
        *m = Rotation3::new(tilt) * (*m * scale);
    }

    let scales = physics.reference_scales()?;
    let drift = DriftState::fresh(
        physics.drift,
        physics.drift.walk_step_rel * scales.no_load_norm,
        physics.drift.walk_bound_rel * scales.contact_delta_norm,
        seed ^ 0x5eed_d21f_7a11_0c4b,
    );
    Ok(SensorInstance {
        id,
        recipe,
        geometry,
        grid,
        drift,
        noise_sd: physics.noise_rel * scales.contact_delta_norm,
        physics: physics.clone(),
    })
}

impl SensorInstance {
    /// Noise-free, drift-free field of `grid` at the magnetometers.
    pub fn superpose(&self, grid: &DipoleGrid) -> Result<FluxVector> {
        superpose(grid, &self.geometry.magnetometer_points())
    }

    /// Pure no-load superposition of the undeformed skin.
    pub fn rest_field(&self) -> Result<FluxVector> {
        self.superpose(&self.grid)
    }

    pub fn deformed_grid(&self, contact: &IndenterContact) -> Result<DipoleGrid> {
        if !self.geometry.contains(contact.location[0], contact.location[1]) {
            return Err(Error::InvalidContact(format!(
                "location ({}, {}) outside sensing area",
                contact.location[0], contact.location[1]
            )));
        }
        deform(&self.grid, contact, &self.physics.deformation)
    }

    /// Noise-free flux delta of `contact` relative to the undeformed skin.
    pub fn clean_delta(&self, contact: &IndenterContact) -> Result<FluxVector> {
        let loaded = self.superpose(&self.deformed_grid(contact)?)?;
        let rest = self.rest_field()?;
        Ok(std::array::from_fn(|i| loaded[i] - rest[i]))
    }

    /// Full readout: superposition + drift baseline offset + Gaussian noise.
    pub fn read_flux<R: Rng + ?Sized>(
        &self,
        contact: Option<&IndenterContact>,
        rng: &mut R,
    ) -> Result<Reading> {
        let mut flux = match contact {
            Some(c) => self.superpose(&self.deformed_grid(c)?)?,
            None => self.rest_field()?,
        };
        for (v, off) in flux.iter_mut().zip(&self.drift.baseline_offset) {
            *v += off;
            if self.noise_sd > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                *v += self.noise_sd * z;
            }
        }
        Ok(Reading {
            flux,
            temperature: [self.physics.ambient_temp_c; N_MAGNETOMETERS],
        })
    }

    pub fn contact_force(&self, contact: &IndenterContact) -> Result<Vector3<f64>> {
        self.physics.contact.force(contact, &self.drift)
    }

    pub fn advance_drift(&mut self, n: u64) {
        self.drift = self.drift.advance(n);
    }

    pub fn without_noise(mut self) -> Self {
        self.noise_sd = 0.0;
        self
    }

    /// Versioned binary snapshot: magic, version, JSON-encoded instance.
    pub fn to_snapshot(&self) -> Result<Vec<u8>> {
        let body = serde_json::to_vec(self)?;
        let mut out = Vec::with_capacity(body.len() + 20);
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_snapshot(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != SNAPSHOT_MAGIC {
            return Err(Error::format("sensor snapshot", "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(Error::format("sensor snapshot", format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + len)
            .ok_or_else(|| Error::format("sensor snapshot", "truncated"))?;
        Ok(serde_json::from_slice(body)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn physics() -> SkinPhysics {
        SkinPhysics::default()
    }

    fn quiet_sensor(geometry: &BoardGeometry, seed: u64) -> SensorInstance {
        let mut p = physics();
        p.drift = DriftLaw::disabled();
        make_sensor("t", geometry, &VariationParams::default(), &p, seed)
            .unwrap()
            .without_noise()
    }

    #[test]
    fn axial_and_equatorial_dipole() {
        let m = Vector3::new(0.0, 0.0, 1.0);
        let origin = Point3::origin();
        let r: f64 = 2.5;
        let on_axis = dipole_field(&origin, &m, &Point3::new(0.0, 0.0, r)).unwrap();
        assert_relative_eq!(on_axis.z, 2.0 * FIELD_CONSTANT / r.powi(3), max_relative = 1e-14);
        assert_eq!((on_axis.x, on_axis.y), (0.0, 0.0));
        let eq = dipole_field(&origin, &m, &Point3::new(r, 0.0, 0.0)).unwrap();
        assert_relative_eq!(eq.z, -FIELD_CONSTANT / r.powi(3), max_relative = 1e-14);
        assert_relative_eq!(eq.x, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn coincident_points_are_singular() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert!(matches!(dipole_field(&p, &Vector3::z(), &p), Err(Error::Singularity)));
    }

    #[test]
    fn canonical_geometry_layout() {
        let g = BoardGeometry::canonical();
        assert!(g.has_canonical_layout());
        assert_eq!(g.sensing_area, [20.0, 20.0]);
        g.validate().unwrap();
        let mut bad = g.clone();
        bad.skin_thickness = 0.0;
        assert!(bad.validate().is_err());
        bad = g.clone();
        bad.sensor_standoff = -0.1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn nominal_grid_shape() {
        let g = BoardGeometry::canonical();
        let grid = DipoleGrid::nominal(&g, &GridSpec::default()).unwrap();
        assert_eq!(grid.len(), 200);
        assert!(grid.moments.iter().all(|m| m.norm() > 0.0));
        assert!(grid
            .positions
            .iter()
            .all(|p| p.z > g.sensor_standoff && p.z < g.sensor_standoff + g.skin_thickness));
        // 10 cells in 4 blocks split 3, 2, 3, 2: 52 up per layer
        let up = grid.moments.iter().filter(|m| m.z > 0.0).count();
        assert_eq!(up, 104);
    }

    #[test]
    fn zero_variation_gives_nominal_grid() {
        let g = BoardGeometry::canonical();
        let s = make_sensor("z", &g, &VariationParams::none(), &physics(), 99).unwrap();
        assert_eq!(s.grid, DipoleGrid::nominal(&g, &GridSpec::default()).unwrap());
        assert_eq!(s.geometry, g);
    }

    #[test]
    fn sensors_are_seed_deterministic() {
        let g = BoardGeometry::canonical();
        let v = VariationParams::default();
        let a = make_sensor("a", &g, &v, &physics(), 5).unwrap();
        let b = make_sensor("a", &g, &v, &physics(), 5).unwrap();
        let c = make_sensor("a", &g, &v, &physics(), 6).unwrap();
        assert_eq!(a.to_snapshot().unwrap(), b.to_snapshot().unwrap());
        assert_ne!(a.grid.moments, c.grid.moments);
    }

    #[test]
    fn snapshot_round_trip() {
        let s = make_sensor("snap", &BoardGeometry::canonical(), &VariationParams::default(), &physics(), 3)
            .unwrap();
        let s = SensorInstance {
            drift: s.drift.advance(17),
            ..s
        };
        let back = SensorInstance::from_snapshot(&s.to_snapshot().unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(SensorInstance::from_snapshot(b"garbage").is_err());
    }

    #[test]
    fn deform_identity_at_zero_depth() {
        let grid = DipoleGrid::nominal(&BoardGeometry::canonical(), &GridSpec::default()).unwrap();
        let out = deform(&grid, &IndenterContact::new(1.0, -2.0, 0.0, 3.0), &DeformationLaw::default()).unwrap();
        assert_eq!(out, grid);
        let err = deform(&grid, &IndenterContact::new(0.0, 0.0, -0.1, 3.0), &DeformationLaw::default());
        assert!(matches!(err, Err(Error::InvalidContact(_))));
    }

    #[test]
    fn central_deformation_has_fourfold_symmetry() {
        let grid = DipoleGrid::nominal(&BoardGeometry::canonical(), &GridSpec::default()).unwrap();
        let out = deform(&grid, &IndenterContact::new(0.0, 0.0, 1.0, 3.0), &DeformationLaw::default()).unwrap();
        // rotating every displaced dipole by 90° must land on another displaced dipole
        for p in &out.positions {
            let rotated = Point3::new(-p.y, p.x, p.z);
            let hit = out.positions.iter().any(|q| (q - rotated).norm() < 1e-12);
            assert!(hit, "no partner for {p:?}");
        }
    }

    #[test]
    fn deeper_contact_displaces_more() {
        let grid = DipoleGrid::nominal(&BoardGeometry::canonical(), &GridSpec::default()).unwrap();
        let max_disp = |depth: f64| {
            let out = deform(&grid, &IndenterContact::new(2.0, 3.0, depth, 3.0), &DeformationLaw::default()).unwrap();
            out.positions
                .iter()
                .zip(&grid.positions)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max)
        };
        assert!(max_disp(1.2) > max_disp(0.2));
    }

    #[test]
    fn noiseless_no_load_equals_superposition() {
        let s = quiet_sensor(&BoardGeometry::canonical(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = s.read_flux(None, &mut rng).unwrap();
        assert_eq!(r.flux, s.rest_field().unwrap());
        assert_eq!(r.temperature, [25.0; 5]);
        let zero = s.clean_delta(&IndenterContact::new(3.0, 1.0, 0.0, 3.0)).unwrap();
        assert_eq!(zero, [0.0; FLUX_DIM]);
    }

    #[test]
    fn doubling_moments_doubles_flux() {
        let s = quiet_sensor(&BoardGeometry::canonical(), 2);
        let c = IndenterContact::new(-2.0, 4.0, 0.8, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = s.read_flux(Some(&c), &mut rng).unwrap().flux;
        let doubled = SensorInstance {
            grid: s.grid.scaled_moments(2.0),
            ..s.clone()
        };
        let twice = doubled.read_flux(Some(&c), &mut rng).unwrap().flux;
        for (a, b) in base.iter().zip(&twice) {
            assert_relative_eq!(2.0 * a, *b, max_relative = 1e-12);
        }
    }

    #[test]
    fn contact_outside_area_rejected() {
        let s = quiet_sensor(&BoardGeometry::canonical(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(s.read_flux(Some(&IndenterContact::new(10.5, 0.0, 0.5, 3.0)), &mut rng).is_err());
    }

    #[test]
    fn hertz_force_law() {
        let law = ContactLaw::default();
        let drift = DriftState::fresh(DriftLaw::default(), 0.0, 1.0, 0);
        let c = IndenterContact::new(0.0, 0.0, 0.0, 3.0);
        assert_eq!(law.force(&c, &drift).unwrap(), Vector3::zeros());
        let f1 = law.force(&IndenterContact::new(0.0, 0.0, 0.5, 3.0), &drift).unwrap().z;
        let f2 = law.force(&IndenterContact::new(0.0, 0.0, 1.0, 3.0), &drift).unwrap().z;
        assert_relative_eq!(f2 / f1, 2f64.powf(1.5), max_relative = 1e-14);

        let f12 = law.force(&IndenterContact::new(0.0, 0.0, 1.2, 3.0), &drift).unwrap().z;
        assert!((2.0..=4.0).contains(&f12), "Fz(1.2 mm) = {f12}");

        let soft = DriftState {
            softening_factor: 0.9,
            ..drift.clone()
        };
        let fs = law.force(&IndenterContact::new(0.0, 0.0, 1.0, 3.0), &soft).unwrap().z;
        assert_relative_eq!(fs, 0.9 * f2, max_relative = 1e-15);
    }

    #[test]
    fn drag_friction() {
        let law = ContactLaw::default();
        let drift = DriftState::fresh(DriftLaw::default(), 0.0, 1.0, 0);
        let still = IndenterContact::new(0.0, 0.0, 1.0, 3.0).dragging(0.0, 0.0);
        let f = law.force(&still, &drift).unwrap();
        assert_eq!((f.x, f.y), (0.0, 0.0));
        let moving = IndenterContact::new(0.0, 0.0, 1.0, 3.0).dragging(-3.0, 4.0);
        let f = law.force(&moving, &drift).unwrap();
        assert_relative_eq!(f.xy().norm(), 0.4 * f.z, max_relative = 1e-14);
        assert_relative_eq!(f.x / f.y, -0.75, max_relative = 1e-14);
    }

    #[test]
    fn drift_zero_steps_is_identity() {
        let d = DriftState::fresh(DriftLaw::default(), 0.01, 1.0, 4);
        assert_eq!(d.advance(0), d);
    }

    #[test]
    fn drift_walk_stays_bounded() {
        let d = DriftState::fresh(DriftLaw::default(), 0.01, 0.05, 4).advance(5_000);
        assert!(norm(&d.baseline_offset) <= 0.05 + 1e-12);
        assert!(norm(&d.baseline_offset) > 0.04);
    }

    #[test]
    fn drift_advance_composes() {
        let d = DriftState::fresh(DriftLaw::default(), 0.01, 1.0, 4);
        assert_eq!(d.advance(30).advance(70), d.advance(100));
    }

    #[test]
    fn softening_after_fifty_thousand() {
        let law = DriftLaw::default();
        // 0.85 + 0.15·exp(−5/3)
        let s = law.softening_at(50_000);
        assert_relative_eq!(s, 0.878_331_34, epsilon = 1e-6);
        assert!((0.7..=0.95).contains(&s));
        let mut prev = 1.0;
        for n in (0..100_000).step_by(5_000) {
            let v = law.softening_at(n);
            assert!(v <= prev);
            prev = v;
        }
        assert_eq!(DriftLaw::disabled().softening_at(50_000), 1.0);
    }
}
