use std::collections::BTreeSet;

use advpose_core::synth::{generate_dataset, sample_placement, AnthropometricModel, CameraMode, Dataset, DomainSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn sampled_angles_stay_inside_scaled_limits() {
    let model = AnthropometricModel::default_16();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for scope in [0.6, 1.0] {
        for _ in 0..10_000 {
            let art = model.sample_articulation(scope, &mut rng);
            for (j, a) in art.angles.iter().enumerate() {
                let (lo, hi) = model.joint_angle_limits[j];
                let rest = model.rest_pose_angles[j];
                for k in 0..3 {
                    let off = a[k] - rest[k];
                    assert!(off >= scope * lo[k] - 1e-12 && off <= scope * hi[k] + 1e-12, "joint {j} axis {k}: {off}");
                }
            }
        }
    }
}

#[test]
fn bone_length_means_match_the_model() {
    let model = AnthropometricModel::default_16();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 10_000;
    let p = model.joint_count();
    let mut sums = vec![0.0; p];
    for _ in 0..n {
        let art = model.sample_articulation(1.0, &mut rng);
        let pose = model.forward_kinematics(&art);
        for j in model.topology.topological_order() {
            sums[j] += pose.bone_length(j, model.topology.parent[j]);
        }
    }
    for j in model.topology.topological_order() {
        let mean = sums[j] / n as f64;
        // The ±2σ truncation is symmetric, so the mean is unbiased and the
        // spread is below σ.
        let bound = 3.0 * model.bone_length_std[j] / (n as f64).sqrt() + 1e-9;
        assert!((mean - model.bone_length_mean[j]).abs() <= bound, "bone {j}: {mean}");
    }
}

#[test]
fn wild_azimuths_stay_in_range() {
    let wild = DomainSpec::wild();
    let CameraMode::Sampled { azimuth, elevation, distance } = wild.camera.clone() else {
        panic!("wild domain samples its cameras")
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..10_000 {
        let c = sample_placement(&wild, &mut rng);
        assert!(c.azimuth >= azimuth.0 && c.azimuth <= azimuth.1);
        assert!(c.elevation >= elevation.0 && c.elevation <= elevation.1);
        assert!(c.distance >= distance.0 && c.distance <= distance.1);
        lo = lo.min(c.azimuth);
        hi = hi.max(c.azimuth);
    }
    // The draws also cover the range.
    let span = azimuth.1 - azimuth.0;
    assert!(lo - azimuth.0 < 0.01 * span && azimuth.1 - hi < 0.01 * span);
}

#[test]
fn lab_uses_exactly_its_four_cameras() {
    let lab = DomainSpec::lab();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let seen: BTreeSet<(i64, i64)> = (0..1000)
        .map(|_| {
            let c = sample_placement(&lab, &mut rng);
            ((c.azimuth * 1e6) as i64, (c.elevation * 1e6) as i64)
        })
        .collect();
    assert_eq!(seen.len(), 4);
}

#[test]
fn generation_is_independent_of_parallelism() {
    let model = AnthropometricModel::default_16();
    let domain = DomainSpec::wild();
    let bytes = |ds: &Dataset| {
        let mut v = Vec::new();
        ds.write_to(&mut v).unwrap();
        v
    };
    let with_threads = |n: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        pool.install(|| bytes(&generate_dataset(&domain, &model, 64, 5).unwrap()))
    };
    let serial = with_threads(1);
    assert_eq!(serial, with_threads(4));
    assert_eq!(serial, with_threads(7));
}

#[test]
fn labels_follow_the_domain_and_reproject() {
    let model = AnthropometricModel::default_16();
    for domain in [DomainSpec::lab(), DomainSpec::wild(), DomainSpec::xfer()] {
        let ds = generate_dataset(&domain, &model, 500, 21).unwrap();
        for s in &ds.samples {
            assert_eq!(s.pose3d.is_some(), domain.has_3d_labels);
            if let Some(err) = s.reprojection_error() {
                assert!(err < 1e-6, "{}: reprojection error {err}", domain.name);
            }
        }
    }
}
