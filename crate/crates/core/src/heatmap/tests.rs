use approx::assert_relative_eq;
use nalgebra::{Point3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::mesh::gen::{evenly_spaced_midline_indices, strip};

#[test]
fn dist_to_prob_closed_forms() {
    let sigma = 0.15;
    assert!((dist_to_prob(0.0, sigma) - 1.0).abs() < 1e-12);
    assert!((dist_to_prob(sigma, sigma) - (-0.5f64).exp()).abs() < 1e-12);
    assert!((dist_to_prob(2.0 * sigma, sigma) - (-2.0f64).exp()).abs() < 1e-12);
    assert_eq!(dist_to_prob(f64::INFINITY, sigma), 0.0);
}

#[test]
fn encode_is_monotone_in_geodesic_distance() {
    let mesh = strip(1.0, 0.2, 25, 5).unwrap();
    let cloud = PointCloud::new(mesh.vertices().to_vec()).unwrap();
    let ann = KeypointAnnotation::new(vec![mesh.midline()[0]], 0.15).unwrap();
    let hm = encode(&mesh, &cloud, &ann).unwrap();
    let d = mesh.geodesic_distances(mesh.midline()[0]).unwrap();
    for i in 0..cloud.len() {
        for j in 0..cloud.len() {
            if d[i] < d[j] {
                assert!(hm.probs()[(i, 0)] > hm.probs()[(j, 0)]);
            }
        }
    }
}

#[test]
fn decode_single_peak_and_symmetric_pair() {
    let n = 40;
    let mut pts = Vec::new();
    for i in 0..n {
        pts.push(Point3::new(i as f64 * 0.05, 0.0, 0.0));
    }
    let cloud = PointCloud::new(pts.clone()).unwrap();

    // keep = ceil(0.05 * 40) = 2 inliers per column
    let mut probs = Array2::zeros((n, 2));
    probs[(7, 0)] = 1.0;
    probs[(10, 1)] = 0.5;
    probs[(20, 1)] = 0.5;
    let hm = Heatmap::new(probs).unwrap();
    let decoded = decode_positions(&hm, &cloud).unwrap();
    assert_relative_eq!(decoded[0], pts[7], epsilon = 1e-12);
    let midpoint = Point3::from((pts[10].coords + pts[20].coords) / 2.0);
    assert_relative_eq!(decoded[1], midpoint, epsilon = 1e-12);
}

#[test]
fn decode_keeps_exactly_five_inliers_at_n100() {
    assert_eq!(inlier_count(100), 5);
    // Five points share one location with high probability; a sixth,
    // lower-probability point sits elsewhere. With exactly five inliers the
    // decoded position is the shared location, unpolluted.
    let n = 100;
    let mut pts = Vec::new();
    for i in 0..n {
        pts.push(Point3::new(i as f64, 0.0, 0.0));
    }
    let here = Point3::new(3.0, 0.0, 0.0);
    for i in 0..5 {
        pts[i] = here;
    }
    let cloud = PointCloud::new(pts).unwrap();
    let mut probs = Array2::zeros((n, 1));
    for i in 0..5 {
        probs[(i, 0)] = 0.9;
    }
    probs[(50, 0)] = 0.8; // would shift the mean if included
    let hm = Heatmap::new(probs).unwrap();
    let decoded = decode_positions(&hm, &cloud).unwrap();
    assert_relative_eq!(decoded[0], here, epsilon = 1e-12);
}

#[test]
fn decode_rejects_small_clouds_and_zero_columns() {
    let pts: Vec<Point3<f64>> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
    let small = PointCloud::new(pts).unwrap();
    let hm = Heatmap::new(Array2::zeros((10, 1))).unwrap();
    assert!(matches!(
        decode_positions(&hm, &small),
        Err(HeatmapError::TooFewPoints { got: 10 })
    ));

    let pts: Vec<Point3<f64>> = (0..25).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
    let cloud = PointCloud::new(pts).unwrap();
    let hm = Heatmap::new(Array2::zeros((25, 1))).unwrap();
    assert!(matches!(
        decode_positions(&hm, &cloud),
        Err(HeatmapError::ZeroColumn { keypoint: 0 })
    ));
}

#[test]
fn decode_invariant_to_column_rescale() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 60;
    let pts: Vec<Point3<f64>> = (0..n)
        .map(|_| {
            Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    let cloud = PointCloud::new(pts).unwrap();
    let mut probs = Array2::zeros((n, 1));
    for i in 0..n {
        probs[(i, 0)] = rng.gen_range(0.0..1.0);
    }
    let scaled = probs.mapv(|p| p * 0.37);
    let a = decode_positions(&Heatmap::new(probs).unwrap(), &cloud).unwrap();
    let b = decode_positions(&Heatmap::new(scaled).unwrap(), &cloud).unwrap();
    assert_relative_eq!(a[0], b[0], epsilon = 1e-12);
}

#[test]
fn frames_on_flat_strip() {
    let mesh = strip(1.0, 0.2, 25, 5).unwrap();
    let cloud = PointCloud::new(mesh.vertices().to_vec()).unwrap();
    let normals = mesh.vertex_normals().unwrap();
    let midlines = mesh.midline_directions().unwrap();
    let center = mesh.midline()[12];
    let set = decode_frames(
        &[mesh.vertices()[center]],
        &cloud,
        &normals,
        &midlines,
        0.06,
    )
    .unwrap();
    let kp = &set.keypoints[0];
    assert_relative_eq!(kp.z_axis(), Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-9);
    assert_relative_eq!(kp.x_axis(), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-9);
    assert_relative_eq!(kp.y_axis(), Vector3::new(0.0, -1.0, 0.0), epsilon = 1e-9);
    assert!(kp.is_valid_frame());
}

#[test]
fn frames_orthonormal_inputs_pass_through() {
    let cloud = PointCloud::new(vec![Point3::origin(); 30]).unwrap();
    let normals = vec![Vector3::new(0.0, 0.0, 1.0); 30];
    let midlines = vec![Vector3::new(0.0, 1.0, 0.0); 30];
    let set = decode_frames(&[Point3::origin()], &cloud, &normals, &midlines, 0.1).unwrap();
    let kp = &set.keypoints[0];
    assert_relative_eq!(kp.z_axis(), Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    assert_relative_eq!(kp.x_axis(), Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
}

#[test]
fn frames_gram_schmidt_hand_case() {
    let cloud = PointCloud::new(vec![Point3::origin(); 20]).unwrap();
    let normals = vec![Vector3::new(0.0, 0.0, 1.0); 20];
    let x_raw = Vector3::new(1.0, 0.0, 0.1).normalize();
    let midlines = vec![x_raw; 20];
    let set = decode_frames(&[Point3::origin()], &cloud, &normals, &midlines, 0.1).unwrap();
    let kp = &set.keypoints[0];
    assert_relative_eq!(kp.x_axis(), Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    assert_relative_eq!(kp.y_axis(), Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    assert!(kp.is_valid_frame());
}

#[test]
fn frames_error_paths() {
    let cloud = PointCloud::new(vec![Point3::new(5.0, 5.0, 5.0); 20]).unwrap();
    let normals = vec![Vector3::new(0.0, 0.0, 1.0); 20];
    let midlines = vec![Vector3::new(1.0, 0.0, 0.0); 20];
    assert!(matches!(
        decode_frames(&[Point3::origin()], &cloud, &normals, &midlines, 0.1),
        Err(HeatmapError::NoNeighbors { .. })
    ));

    let near = PointCloud::new(vec![Point3::origin(); 20]).unwrap();
    let parallel = vec![Vector3::new(0.0, 0.0, 1.0); 20];
    assert!(matches!(
        decode_frames(&[Point3::origin()], &near, &normals, &parallel, 0.1),
        Err(HeatmapError::MidlineParallelToNormal { .. })
    ));
}

#[test]
fn round_trip_isolated_keypoints() {
    let mesh = strip(1.0, 0.2, 25, 5).unwrap();
    // Two keypoints at opposite ends: geodesic separation 1.0 >= 4 sigma.
    let sigma = 0.1;
    let keys = vec![mesh.midline()[0], mesh.midline()[24]];
    let ann = KeypointAnnotation::new(keys.clone(), sigma).unwrap();
    let cloud = PointCloud::new(mesh.vertices().to_vec()).unwrap();
    let hm = encode(&mesh, &cloud, &ann).unwrap();
    let decoded = decode_positions(&hm, &cloud).unwrap();
    let tol = 1.5 * mesh.mean_edge_length();
    for (d, &kv) in decoded.iter().zip(&keys) {
        let err = (d - mesh.vertices()[kv]).norm();
        assert!(err <= tol, "round trip error {err} > {tol}");
    }
}

#[test]
fn angular_error_basics() {
    let mesh = strip(1.0, 0.2, 25, 5).unwrap();
    let cloud = PointCloud::new(mesh.vertices().to_vec()).unwrap();
    let normals = mesh.vertex_normals().unwrap();
    let midlines = mesh.midline_directions().unwrap();
    let keys = evenly_spaced_midline_indices(25, 5)
        .into_iter()
        .map(|i| mesh.vertices()[mesh.midline()[i]])
        .collect::<Vec<_>>();
    let set = decode_frames(&keys, &cloud, &normals, &midlines, 0.06).unwrap();
    let err = angular_error(&set, &set).unwrap();
    assert_eq!(err.position_m, 0.0);
    assert_eq!(err.z_deg, 0.0);
    assert_eq!(err.x_deg, 0.0);

    // Rotate every frame's z by 90 degrees about x.
    let rot =
        nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::FRAC_PI_2);
    let turned = OrientedKeypointSet {
        keypoints: set
            .keypoints
            .iter()
            .map(|kp| OrientedKeypoint {
                position: kp.position,
                frame: rot.matrix() * kp.frame,
            })
            .collect(),
    };
    let err = angular_error(&turned, &set).unwrap();
    assert_relative_eq!(err.z_deg, 90.0, epsilon = 1e-9);
}

#[test]
fn keypoints_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("kp.json");
    let mesh = strip(1.0, 0.2, 25, 5).unwrap();
    let cloud = PointCloud::new(mesh.vertices().to_vec()).unwrap();
    let normals = mesh.vertex_normals().unwrap();
    let midlines = mesh.midline_directions().unwrap();
    let set = decode_frames(
        &[mesh.vertices()[mesh.midline()[5]]],
        &cloud,
        &normals,
        &midlines,
        0.06,
    )
    .unwrap();
    write_keypoints_json(&set, &path).unwrap();
    let back = read_keypoints_json(&path).unwrap();
    assert_eq!(back, set);
}
