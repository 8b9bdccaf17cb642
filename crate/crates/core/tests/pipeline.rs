use magskin::adapt::{adapt_or_keep, build_fleet_data, train_multisensor, AdaptConfig, FleetDataSpec};
use magskin::config::RunConfig;
use magskin::datagen::{
    line_adaptation_protocol, sample_triplets, shear_drag_protocol, snake_grid_protocol, Dataset, LineParams,
    ShearDragParams, SnakeGridParams,
};
use magskin::eval::evaluate;
use magskin::field_sim::{make_sensor, BoardGeometry, SensorInstance, SkinPhysics, VariationParams};
use magskin::neural::{fit_decoder, MlpModel, OutputKind, TrainConfig};
use magskin::protocol::BaselineMode;

fn sensor(seed: u64) -> SensorInstance {
    make_sensor("s", &BoardGeometry::canonical(), &VariationParams::default(), &SkinPhysics::default(), seed).unwrap()
}

#[test]
fn dataset_container_round_trips_and_regenerates() {
    let mut s = sensor(1);
    s.advance_drift(77);
    let d = snake_grid_protocol(&mut s, &SnakeGridParams::default(), BaselineMode::EveryK(10), 5).unwrap();
    let mut bytes = Vec::new();
    d.write_to(&mut bytes).unwrap();
    let back = Dataset::read_from(&bytes[..]).unwrap();
    assert_eq!(back, d);
    assert_eq!(Dataset::regenerate(&d.metadata).unwrap(), d);
    assert!(Dataset::read_from(&bytes[..bytes.len() - 3]).is_err());

    let mut csv = Vec::new();
    d.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 391);
}

#[test]
fn shear_drag_labels_carry_tangential_force() {
    let mut s = sensor(2);
    let d = shear_drag_protocol(&mut s, &ShearDragParams::default(), BaselineMode::BeforeEach, 3).unwrap();
    assert_eq!(d.metadata.protocol.output_kind(), OutputKind::FullForce);
    assert!(d.samples.iter().any(|x| x.force[0].abs() > 0.0 || x.force[1].abs() > 0.0));
    for x in &d.samples {
        let t = x.force[0].hypot(x.force[1]);
        assert!(t <= 0.4 * x.force[2] + 1e-12);
    }
}

#[test]
fn line_triplets_come_from_one_line() {
    let mut s = sensor(3);
    let lines = line_adaptation_protocol(&mut s, &LineParams::default(), 4).unwrap();
    assert_eq!(lines.total_points(), 390);
    let triplets = sample_triplets(&lines.trajectories, 500, 1).unwrap();
    let on_line = |v: &[f64; 15]| lines.trajectories.iter().position(|t| t.ordered_flux.contains(v));
    for t in &triplets {
        let l = on_line(&t.anchor);
        assert!(l.is_some());
        assert_eq!(on_line(&t.positive), l);
        assert_eq!(on_line(&t.negative), l);
    }
}

#[test]
fn same_sensor_training_generalizes_to_held_out_split() {
    let mut s = sensor(4);
    let d = snake_grid_protocol(&mut s, &SnakeGridParams::with_passes(4), BaselineMode::BeforeEach, 6).unwrap();
    let (train, test) = d.split_random(0.9, 7);
    let cfg = TrainConfig {
        epochs: 40,
        ..TrainConfig::default()
    };
    let (model, log) = fit_decoder(&train, &[], OutputKind::NormalForce, &cfg, false).unwrap();
    assert!(log.epochs.last().unwrap().train_loss < log.epochs[0].train_loss);
    let m = evaluate(&model, &test).unwrap();
    assert!(m.accuracy_pct > 50.0, "{m:?}");
    assert!(m.mse_f < 0.1, "{m:?}");

    // the checkpoint reproduces predictions exactly
    let back = MlpModel::read_from(&model.to_bytes()[..]).unwrap();
    assert_eq!(evaluate(&back, &test).unwrap(), m);
}

#[test]
fn adapting_on_a_training_sensor_keeps_in_domain_accuracy() {
    let mut spec = FleetDataSpec::default();
    spec.fleet.boards = 2;
    spec.fleet.skins_per_board = 2;
    let fleet = build_fleet_data(&spec).unwrap();
    let cfg = TrainConfig {
        epochs: 40,
        relu_feature_layers: true,
        ..TrainConfig::default()
    };
    let (model, _) = train_multisensor(&fleet.data, &cfg, true, OutputKind::NormalForce).unwrap();
    let own = &fleet.data.sensor("b0s0").unwrap().dataset.samples;
    let set = fleet.adaptation["b0s0"].truncated(390);
    let adapted = adapt_or_keep(&model, &set, &fleet.data, &AdaptConfig::default()).unwrap();
    let before = evaluate(&model, own).unwrap().accuracy_pct;
    let after = evaluate(&adapted, own).unwrap().accuracy_pct;
    assert!(after >= before - 1.0, "in-domain accuracy {before:.2} -> {after:.2}");
}

#[test]
fn config_hash_is_independent_of_key_order() {
    let a = "[crossval]\nbudgets = [130]\n[crossval.train]\nepochs = 4\n[fleet]\npasses = 1\n";
    let b = "[fleet]\npasses = 1\n\n[crossval.train]\nepochs = 4\n\n[crossval]\nbudgets = [130]\n";
    let ca = RunConfig::from_toml_str(a).unwrap();
    let cb = RunConfig::from_toml_str(b).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(ca.hash(), cb.hash());
    assert_ne!(ca.hash(), RunConfig::default().hash());
}
