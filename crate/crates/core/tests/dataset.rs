mod common;

use std::path::Path;

use boter_core::artifact::Provenance;
use boter_core::dataset::{
    generate_world, parse_dataset, read_dataset, sample_dataset, split_labels, write_dataset, JointRanges, WorldBounds,
};
use boter_core::kinematics::forward_kinematics;
use boter_core::{DhTable, Error, ErrorWorld, Split};
use common::rng;
use rand::Rng;

fn default_world(seed: u64) -> ErrorWorld {
    generate_world(seed, &DhTable::ur5(), &WorldBounds::default()).unwrap()
}

#[test]
fn default_world_errors_are_millimetre_scale() {
    let ranges = JointRanges::default();
    for seed in [1, 2024, 77] {
        let world = default_world(seed);
        let mut r = rng(seed);
        let mut total = 0.0;
        for _ in 0..1000 {
            let theta = ranges.0.map(|[lo, hi]| r.random_range(lo..=hi));
            let truth = world.measure_exact(theta).unwrap();
            let q = boter_core::JointAngles::from_degrees(theta).unwrap();
            total += truth.distance(forward_kinematics(&world.nominal, &q));
        }
        let mean = total / 1000.0;
        assert!((0.5..=5.0).contains(&mean), "world {seed}: mean error {mean} mm");
    }
}

#[test]
fn perturbations_respect_bounds() {
    let world = default_world(3);
    let nominal = DhTable::ur5();
    for (t, n) in world.true_table.rows.iter().zip(&nominal.rows) {
        assert!((t.a - n.a).abs() <= 0.5 && (t.d - n.d).abs() <= 0.5);
        assert!((t.alpha - n.alpha).abs() <= 0.1f64.to_radians() + 1e-15);
        assert!((t.theta_offset - n.theta_offset).abs() <= 0.1f64.to_radians() + 1e-15);
    }
    assert!(world.compliance.iter().all(|c| c.abs() <= 0.05f64.to_radians() + 1e-15));
    assert_eq!(world.noise_sigma, 0.02);
    let bad = WorldBounds { link_mm: -1.0, ..WorldBounds::default() };
    assert!(generate_world(1, &nominal, &bad).is_err());
}

#[test]
fn measurement_noise_has_configured_spread() {
    let world = default_world(5);
    let theta = [10.0, -90.0, 20.0, 30.0, -40.0, 50.0];
    let exact = world.measure_exact(theta).unwrap();
    let mut r = rng(99);
    let draws = 10_000;
    let mut sums = [0.0; 3];
    let mut squares = [0.0; 3];
    for _ in 0..draws {
        let p = world.measure(theta, &mut r).unwrap();
        let e = [p.x - exact.x, p.y - exact.y, p.z - exact.z];
        for k in 0..3 {
            sums[k] += e[k];
            squares[k] += e[k] * e[k];
        }
    }
    for k in 0..3 {
        let mean = sums[k] / draws as f64;
        let std = (squares[k] / draws as f64 - mean * mean).sqrt();
        assert!((std - 0.02).abs() < 0.004, "axis {k}: {std}");
    }
}

#[test]
fn zero_noise_measurement_is_deterministic() {
    let world = generate_world(5, &DhTable::ur5(), &WorldBounds { noise_sigma_mm: 0.0, ..WorldBounds::default() }).unwrap();
    let theta = [1.0, -80.0, 2.0, 3.0, 4.0, 5.0];
    let a = world.measure(theta, &mut rng(1)).unwrap();
    let b = world.measure(theta, &mut rng(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, world.measure_exact(theta).unwrap());
}

#[test]
fn split_sizes_follow_eight_one_one() {
    let world = default_world(1);
    let set = sample_dataset(&world, 724, 7, &JointRanges::default()).unwrap();
    assert_eq!(set.counts(), (580, 72, 72));
    let small = sample_dataset(&world, 10, 7, &JointRanges::default()).unwrap();
    assert_eq!(small.counts(), (8, 1, 1));
    assert!(sample_dataset(&world, 9, 7, &JointRanges::default()).is_err());
    assert_eq!(split_labels(724, 7), set.splits);
    assert_ne!(split_labels(724, 8), set.splits);
}

#[test]
fn samples_lie_in_ranges_and_carry_nominal_theory() {
    let world = default_world(1);
    let ranges = JointRanges::default();
    let set = sample_dataset(&world, 200, 7, &ranges).unwrap();
    for s in &set.samples {
        assert!(ranges.contains(&s.theta_deg));
        assert_eq!(s.theoretical, forward_kinematics(&DhTable::ur5(), &s.joints()));
    }
}

#[test]
fn sample_streams_do_not_depend_on_count() {
    let world = default_world(1);
    let ranges = JointRanges::default();
    let short = sample_dataset(&world, 50, 7, &ranges).unwrap();
    let long = sample_dataset(&world, 120, 7, &ranges).unwrap();
    assert_eq!(short.samples[..], long.samples[..50]);
}

#[test]
fn csv_round_trip_is_lossless_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let world = default_world(2);
    let prov = Provenance::from_config_text("x");
    let set = sample_dataset(&world, 100, 7, &JointRanges::default()).unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_dataset(&set, &a, &prov).unwrap();
    write_dataset(&sample_dataset(&world, 100, 7, &JointRanges::default()).unwrap(), &b, &prov).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.starts_with("# boter "));
    assert_eq!(read_dataset(&a, &DhTable::ur5()).unwrap(), set);
}

#[test]
fn malformed_rows_are_located() {
    let nominal = DhTable::ur5();
    let path = Path::new("bad.csv");
    let short = "j1_deg,j2_deg,j3_deg,j4_deg,j5_deg,x_mm,y_mm,z_mm,split\n";
    match parse_dataset(short, path, &nominal) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
        other => panic!("{other:?}"),
    }
    let header = "j1_deg,j2_deg,j3_deg,j4_deg,j5_deg,j6_deg,x_mm,y_mm,z_mm,split\n";
    let bad_cell = format!("{header}1,2,3,4,5,6,7,8,9,train\n1,2,abc,4,5,6,7,8,9,test\n");
    match parse_dataset(&bad_cell, path, &nominal) {
        Err(Error::Parse { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains("j3_deg") && message.contains("abc"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    let bad_split = format!("{header}1,2,3,4,5,6,7,8,9,holdout\n");
    assert!(parse_dataset(&bad_split, path, &nominal).is_err());
}

#[test]
fn world_document_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("world.json");
    let world = default_world(12);
    world.save(&path, &Provenance::from_config_text("")).unwrap();
    assert_eq!(ErrorWorld::load(&path).unwrap(), world);
}

#[test]
fn split_names_parse() {
    for s in [Split::Train, Split::Val, Split::Test] {
        assert_eq!(s.to_string().parse::<Split>().unwrap(), s);
    }
    assert!("dev".parse::<Split>().is_err());
}
