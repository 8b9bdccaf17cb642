//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary so the lines always print. `ACCEPTANCE_ONLY=3,7`
//! restricts the run to the listed criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use magskin::adapt::{build_fleet_data, cross_validate_cached, Condition, CrossValConfig, FleetData, FleetDataSpec, ModelCache};
use magskin::config::RunConfig;
use magskin::datagen::{sample_triplet_indices, snake_grid_protocol, SnakeGridParams};
use magskin::eval::{evaluate, EvalReport};
use magskin::experiments::{run_preset, Preset};
use magskin::field_sim::{dipole_field, make_sensor, BoardGeometry, DipoleGrid, GridSpec, SkinPhysics, VariationParams};
use magskin::neural::{
    loss_and_gradients, objective_loss, Architecture, LabeledBatch, MlpModel, Normalizer, Objective, TripletBatch,
};
use magskin::protocol::{decode_frame, decode_stream, encode_frame, encode_stream, ChipSample, FluxFrame, FRAME_LEN};
use magskin::protocol::BaselineMode;
use nalgebra::{Point3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

/// Closed-form dipole field on plain arrays.
fn oracle_field(pos: [f64; 3], m: [f64; 3], obs: [f64; 3]) -> [f64; 3] {
    let r = [obs[0] - pos[0], obs[1] - pos[1], obs[2] - pos[2]];
    let d = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let u = [r[0] / d, r[1] / d, r[2] / d];
    let mu = m[0] * u[0] + m[1] * u[1] + m[2] * u[2];
    let k = magskin::field_sim::FIELD_CONSTANT / (d * d * d);
    [k * (3.0 * mu * u[0] - m[0]), k * (3.0 * mu * u[1] - m[1]), k * (3.0 * mu * u[2] - m[2])]
}

fn rel(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn c1_physics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let mut worst = 0.0f64;
    let mut worst_lin = 0.0f64;
    for _ in 0..1000 {
        let pos = [u(-10.0, 10.0), u(-10.0, 10.0), u(0.5, 4.0)];
        let obs = [u(-10.0, 10.0), u(-10.0, 10.0), u(-1.0, 0.0)];
        let m = [u(-1.0, 1.0), u(-1.0, 1.0), u(-1.0, 1.0)];
        let b = dipole_field(&Point3::from(pos), &Vector3::from(m), &Point3::from(obs)).unwrap();
        worst = worst.max(rel(&b, &Vector3::from(oracle_field(pos, m, obs))));

        // linear in the moment: f(a·m1 + c·m2) = a·f(m1) + c·f(m2)
        let m2 = Vector3::new(u(-1.0, 1.0), u(-1.0, 1.0), u(-1.0, 1.0));
        let (a, c) = (u(-3.0, 3.0), u(-3.0, 3.0));
        let f = |mm: &Vector3<f64>| dipole_field(&Point3::from(pos), mm, &Point3::from(obs)).unwrap();
        let lhs = f(&(Vector3::from(m) * a + m2 * c));
        let rhs = f(&Vector3::from(m)) * a + f(&m2) * c;
        worst_lin = worst_lin.max(rel(&lhs, &rhs));
    }
    // superposition: a grid's field is the sum of its dipoles' fields
    let grid = DipoleGrid::nominal(&BoardGeometry::canonical(), &GridSpec::default()).unwrap();
    let mut worst_sup = 0.0f64;
    for _ in 0..100 {
        let obs = Point3::new(u(-10.0, 10.0), u(-10.0, 10.0), u(-1.0, 0.0));
        let total = grid.field_at(&obs).unwrap();
        let sum = grid
            .positions
            .iter()
            .zip(&grid.moments)
            .map(|(p, m)| Vector3::from(oracle_field([p.x, p.y, p.z], [m.x, m.y, m.z], [obs.x, obs.y, obs.z])))
            .fold(Vector3::zeros(), |acc, v| acc + v);
        worst_sup = worst_sup.max(rel(&total, &sum));
    }
    check(
        worst <= 1e-12 && worst_lin <= 1e-10 && worst_sup <= 1e-10,
        format!("oracle max rel {worst:.1e}, linearity {worst_lin:.1e}, superposition {worst_sup:.1e}"),
    )
}

// ---------------------------------------------------------------- 2

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-scale..scale))
}

fn c2_gradients() -> Outcome {
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut n_params = 0;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let n_layers = rng.random_range(2..=4);
        let dims: Vec<usize> = (0..=n_layers).map(|_| rng.random_range(1..=8)).collect();
        let relu: Vec<bool> = (0..n_layers).map(|i| i + 1 < n_layers && rng.random_bool(0.7)).collect();
        let feature_layer = rng.random_range(0..n_layers - 1);
        let arch = Architecture::new(dims.clone(), relu, feature_layer).unwrap();
        let mut m = MlpModel::new(arch, None, trial).unwrap();
        m.input_norm = Normalizer {
            mean: (0..dims[0]).map(|_| rng.random_range(-0.5..0.5)).collect(),
            sd: (0..dims[0]).map(|_| rng.random_range(0.5..2.0)).collect(),
        };
        let out = *dims.last().unwrap();
        m.output_norm = Normalizer {
            mean: (0..out).map(|_| rng.random_range(-1.0..1.0)).collect(),
            sd: (0..out).map(|_| rng.random_range(0.5..3.0)).collect(),
        };
        // biases away from zero keep the differences clear of ReLU kinks
        for l in &mut m.layers {
            l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
        let lab = LabeledBatch {
            inputs: rows(&mut rng, 6, dims[0], 1.0),
            targets: rows(&mut rng, 6, out, 2.0),
        };
        let trip = TripletBatch {
            anchor: rows(&mut rng, 5, dims[0], 1.0),
            positive: rows(&mut rng, 5, dims[0], 3.0),
            negative: rows(&mut rng, 5, dims[0], 0.5),
        };
        let objectives = [
            Objective::l2(&lab),
            Objective::triplet(&trip),
            Objective::l2(&lab).with_triplets(&trip, 0.7),
        ];
        for obj in &objectives {
            let (_, g) = loss_and_gradients(&m, obj).unwrap();
            let analytic = g.flat();
            let base = m.params_flat();
            n_params += base.len();
            for k in 0..base.len() {
                let mut p = base.clone();
                p[k] = base[k] + h;
                m.set_params_flat(&p).unwrap();
                let up = objective_loss(&m, obj).unwrap().total;
                p[k] = base[k] - h;
                m.set_params_flat(&p).unwrap();
                let down = objective_loss(&m, obj).unwrap().total;
                m.set_params_flat(&base).unwrap();
                let numeric = (up - down) / (2.0 * h);
                // relative; the floor keeps exact zeros from being judged against
                // cancellation noise (about eps·|L|/h ≈ 1e-10)
                let e = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1e-5);
                worst = worst.max(e);
            }
        }
    }
    check(worst <= 1e-4, format!("{n_params} gradient entries, max rel error {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn c3_same_sensor() -> Outcome {
    let physics = SkinPhysics::default();
    let mut sensor = make_sensor("single", &BoardGeometry::canonical(), &VariationParams::default(), &physics, 31).unwrap();
    let params = SnakeGridParams::with_passes(26);
    let mut data = snake_grid_protocol(&mut sensor, &params, BaselineMode::BeforeEach, 32).unwrap();
    data.samples.truncate(10_000);
    let (train, test) = data.split_random(0.9, 33);
    let cfg = RunConfig::default().train;
    let (model, _) = magskin::neural::fit_decoder(&train, &[], magskin::neural::OutputKind::NormalForce, &cfg, false).unwrap();
    let m = evaluate(&model, &test).unwrap();
    check(
        train.len() == 9_000 && test.len() == 1_000 && m.accuracy_pct >= 95.0 && m.mse_xy <= 0.3,
        format!("{} train / {} test: accuracy {:.2}%, MSE_xy {:.3} mm²", train.len(), test.len(), m.accuracy_pct, m.mse_xy),
    )
}

// ---------------------------------------------------------------- 4, 5

const PLATEAU_BUDGETS: [usize; 3] = [390, 780, 1560];

fn fleet() -> &'static Result<FleetData, String> {
    static FLEET: OnceLock<Result<FleetData, String>> = OnceLock::new();
    FLEET.get_or_init(|| build_fleet_data(&FleetDataSpec::default()).map_err(|e| e.to_string()))
}

/// Fold models shared by 4 and 5, which differ only in adaptation budget.
fn models() -> &'static ModelCache {
    static CACHE: OnceLock<ModelCache> = OnceLock::new();
    CACHE.get_or_init(ModelCache::new)
}

fn table2_run() -> &'static Result<Vec<EvalReport>, String> {
    static RUN: OnceLock<Result<Vec<EvalReport>, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let fleet = fleet().as_ref().map_err(Clone::clone)?;
        cross_validate_cached(fleet, &CrossValConfig::default(), &Condition::ALL, models()).map_err(|e| e.to_string())
    })
}

fn accuracy_of(reports: &[EvalReport], label: &str) -> f64 {
    reports
        .iter()
        .find(|r| r.condition == label)
        .unwrap_or_else(|| panic!("no report {label}"))
        .accuracy_pct
        .mean
}

fn c4_table2() -> Outcome {
    let reports = table2_run().as_ref().map_err(Clone::clone)?;
    let single = accuracy_of(reports, &Condition::SingleSensor.label(0));
    let multi = accuracy_of(reports, &Condition::MultiSensor.label(0));
    let triplet = accuracy_of(reports, &Condition::MultiSensorTriplet.label(0));
    let adapted = accuracy_of(reports, &Condition::Adapted.label(390));
    check(
        single + 20.0 <= multi && adapted >= triplet + 3.0,
        format!(
            "single {single:.2} + 20 <= multi {multi:.2}: {}; adapted {adapted:.2} >= triplet {triplet:.2} + 3: {}",
            single + 20.0 <= multi,
            adapted >= triplet + 3.0
        ),
    )
}

fn c5_plateau() -> Outcome {
    // the 390 point and the base models come from the four-way run; 4 pays for them when both run
    let base = table2_run().as_ref().map_err(Clone::clone)?;
    let cfg = CrossValConfig {
        budgets: PLATEAU_BUDGETS[1..].to_vec(),
        ..CrossValConfig::default()
    };
    let fleet = fleet().as_ref().map_err(Clone::clone)?;
    let more = cross_validate_cached(fleet, &cfg, &[Condition::Adapted], models()).map_err(|e| e.to_string())?;
    let a = accuracy_of(base, &Condition::Adapted.label(PLATEAU_BUDGETS[0]));
    let [b, c] = [1, 2].map(|i| accuracy_of(&more, &Condition::Adapted.label(PLATEAU_BUDGETS[i])));
    check(
        b - a > c - b,
        format!("390 → 780 gain {:+.2} vs 780 → 1560 gain {:+.2} (accuracies {a:.2}, {b:.2}, {c:.2})", b - a, c - b),
    )
}

// ---------------------------------------------------------------- 6

fn c6_drift() -> Outcome {
    let out = run_preset(Preset::Drift, &RunConfig::default()).map_err(|e| e.to_string())?;
    let curves: Vec<magskin::eval::DriftCurve> =
        serde_json::from_slice(&out.files["drift_curves.json"]).map_err(|e| e.to_string())?;
    let once = curves.iter().find(|c| c.mode == BaselineMode::Once).ok_or("no once curve")?;
    let last = once.windows.last().ok_or("no windows")?;
    check(
        once.trend.rho > 0.0 && once.trend.p_value < 0.05 && last.mean_signed_force_error > 0.0,
        format!(
            "once: rho {:.3}, p {:.2e}, final signed force error {:+.4} N over {} windows",
            once.trend.rho,
            once.trend.p_value,
            last.mean_signed_force_error,
            once.windows.len()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn random_frame(rng: &mut ChaCha8Rng, ts: u64) -> FluxFrame {
    let mut f = || f32::from_bits(rng.random::<u32>());
    FluxFrame {
        timestamp_us: ts,
        chips: std::array::from_fn(|_| ChipSample { temp: f(), bx: f(), by: f(), bz: f() }),
    }
}

fn c7_protocol() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let frames: Vec<FluxFrame> = (0..10_000u64)
        .map(|i| {
            let jitter = rng.random_range(0..100);
            random_frame(&mut rng, i * 2_500 + jitter)
        })
        .collect();
    let bytes = encode_stream(&frames);
    let (back, diag) = decode_stream(&bytes);
    let exact = back.len() == frames.len() && back.iter().zip(&frames).all(|(a, b)| a.bit_eq(b)) && diag.crc_failures == 0;

    let sent: std::collections::HashSet<[u8; FRAME_LEN]> = frames.iter().map(encode_frame).collect();
    let mut worst_loss = 0usize;
    let mut invalid = 0usize;
    for _ in 0..200 {
        let mut bad = bytes.clone();
        let bit = rng.random_range(0..bad.len() * 8);
        bad[bit / 8] ^= 1 << (bit % 8);
        let (got, _) = decode_stream(&bad);
        worst_loss = worst_loss.max(frames.len().saturating_sub(got.len()));
        // every yielded frame must be CRC-valid and one that was actually sent
        invalid += got
            .iter()
            .map(encode_frame)
            .filter(|b| decode_frame(b).is_err() || !sent.contains(b))
            .count();
    }
    // random garbage never yields a CRC-invalid frame either
    let garbage: Vec<u8> = (0..200 * FRAME_LEN).map(|_| rng.random()).collect();
    let (junk, _) = decode_stream(&garbage);
    invalid += junk.iter().filter(|f| decode_frame(&encode_frame(f)).is_err()).count();
    check(
        exact && worst_loss <= 2 && invalid == 0,
        format!("round-trip bit-exact: {exact}; worst frames lost to one bit flip: {worst_loss}; invalid frames yielded: {invalid}"),
    )
}

// ---------------------------------------------------------------- 8

fn c8_triplets() -> Outcome {
    let lengths: Vec<usize> = (0..40).map(|i| 3 + (i * 7) % 80).collect();
    let triplets = sample_triplet_indices(&lengths, 100_000, 8).map_err(|e| e.to_string())?;
    let bad = triplets
        .iter()
        .filter(|t| {
            let (dp, dn) = (t.anchor.abs_diff(t.positive), t.anchor.abs_diff(t.negative));
            let len = lengths[t.line];
            !(dp > 0 && dp < dn && t.anchor < len && t.positive < len && t.negative < len)
        })
        .count();
    let spec = FleetDataSpec { passes: 1, ..FleetDataSpec::default() };
    let fleet = build_fleet_data(&spec).map_err(|e| e.to_string())?;
    let audits = fleet.adaptation.values().map(|s| s.audit()).filter(Result::is_err).count();
    check(
        triplets.len() == 100_000 && bad == 0 && audits == 0,
        format!("{} triplets, {bad} out of order; {} adaptation sets audited, {audits} failed", triplets.len(), fleet.adaptation.len()),
    )
}

// ---------------------------------------------------------------- 9

/// Small-scale settings so every preset can run twice.
fn smoke_config() -> RunConfig {
    let mut c = RunConfig::default();
    for o in [
        "fleet.passes=1",
        "fleet.adaptation_lines.n_lines=4",
        "crossval.train.epochs=2",
        "crossval.single_sensor_epochs=2",
        "crossval.adapt.epochs=2",
        "crossval.folds=[0, 3]",
        "crossval.budgets=[130]",
        "sweep.budgets=[0, 130]",
        "sweep.sensor_counts=[2, 5]",
        "sweep.folds=[0]",
        "flex.targets=2",
        "flex.budget=130",
        "manual.budget=130",
        "manual.folds=[1]",
        "drift.study.total_interactions=4000",
        "drift.study.train_prefix=1000",
        "drift.study.eval_window=300",
        "drift.study.eval_stride=1000",
        "drift.train.epochs=3",
    ] {
        c.apply_override(o).unwrap();
    }
    c
}

fn c9_determinism() -> Outcome {
    let config = smoke_config();
    let mut lines = Vec::new();
    let mut all = true;
    for p in Preset::ALL {
        let a = run_preset(p, &config).map_err(|e| format!("{p}: {e}"))?;
        let b = run_preset(p, &config).map_err(|e| format!("{p}: {e}"))?;
        let same = a.files == b.files && !a.files.is_empty();
        all &= same;
        lines.push(format!("{p} {}", if same { "identical" } else { "DIFFERS" }));
    }
    check(all, format!("smoke scale, two runs each: {}", lines.join(", ")))
}

// ----------------------------------------------------------------

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "physics oracle", limit: Duration::from_secs(1), run: c1_physics },
        Criterion { id: 2, name: "gradient correctness", limit: Duration::from_secs(30), run: c2_gradients },
        Criterion { id: 3, name: "same-sensor decoding", limit: Duration::from_secs(300), run: c3_same_sensor },
        Criterion { id: 4, name: "four-way ordering", limit: Duration::from_secs(900), run: c4_table2 },
        Criterion { id: 5, name: "adaptation budget plateau", limit: Duration::from_secs(600), run: c5_plateau },
        Criterion { id: 6, name: "drift study", limit: Duration::from_secs(600), run: c6_drift },
        Criterion { id: 7, name: "protocol suite", limit: Duration::from_secs(5), run: c7_protocol },
        Criterion { id: 8, name: "triplet sampling and label audit", limit: Duration::from_secs(60), run: c8_triplets },
        Criterion { id: 9, name: "determinism", limit: Duration::from_secs(900), run: c9_determinism },
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    // `cargo test -- --list` and friends
    if std::env::args().any(|a| a == "--list") {
        for c in &criteria {
            println!("criterion_{}: test", c.id);
        }
        return;
    }
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let elapsed = t.elapsed();
        let over = elapsed > c.limit;
        let (tag, detail) = match (&res, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {:?} limit", c.limit)),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("[{tag}] criterion {} ({}) in {:.2?}: {detail}", c.id, c.name, elapsed);
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
