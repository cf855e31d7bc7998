use approx::assert_relative_eq;
use nalgebra::{Point3, UnitQuaternion, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gen::strip;
use super::*;

/// Plain nx-by-ny unit grid mesh (any ny), midline = bottom row.
fn grid_mesh(nx: usize, ny: usize) -> DeformableMesh {
    let mut vertices = Vec::new();
    for iy in 0..ny {
        for ix in 0..nx {
            vertices.push(Point3::new(ix as f64, iy as f64, 0.0));
        }
    }
    let at = |ix: usize, iy: usize| iy * nx + ix;
    let mut faces = Vec::new();
    for iy in 0..ny - 1 {
        for ix in 0..nx - 1 {
            faces.push([at(ix, iy), at(ix + 1, iy), at(ix + 1, iy + 1)]);
            faces.push([at(ix, iy), at(ix + 1, iy + 1), at(ix, iy + 1)]);
        }
    }
    let flags = vec![1i8; faces.len()];
    let midline = (0..nx).collect();
    DeformableMesh::new(vertices, faces, midline, flags).unwrap()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let points = (0..n)
        .map(|_| {
            Point3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
        })
        .collect();
    PointCloud::new(points).unwrap()
}

// ---------------------------------------------------------------- geodesics

#[test]
fn geodesic_path_graph() {
    let vertices = vec![
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(2.0, 0.0, 0.0),
    ];
    let mesh = DeformableMesh::from_edge_graph(vertices, &[(0, 1), (1, 2)], vec![0, 1, 2]).unwrap();
    let d = mesh.geodesic_distances(0).unwrap();
    assert_eq!(d, vec![0.0, 1.0, 2.0]);
}

#[test]
fn geodesic_source_is_zero() {
    let mesh = strip(1.0, 0.2, 9, 3).unwrap();
    for source in [0, 5, 13, 26] {
        let d = mesh.geodesic_distances(source).unwrap();
        assert_eq!(d[source], 0.0);
    }
}

#[test]
fn geodesic_source_out_of_range() {
    let mesh = strip(1.0, 0.2, 5, 3).unwrap();
    assert!(matches!(
        mesh.geodesic_distances(999),
        Err(MeshError::SourceOutOfRange { .. })
    ));
}

/// Exhaustive simple-path enumeration: the independent oracle for Dijkstra.
fn brute_force_distances(mesh: &DeformableMesh, source: usize) -> Vec<f64> {
    let n = mesh.vertex_count();
    let mut adjacency = vec![Vec::new(); n];
    for e in mesh.edges() {
        adjacency[e.a].push((e.b, e.rest_length));
        adjacency[e.b].push((e.a, e.rest_length));
    }
    let mut best = vec![f64::INFINITY; n];
    let mut visited = vec![false; n];
    fn dfs(
        v: usize,
        cost: f64,
        adjacency: &[Vec<(usize, f64)>],
        visited: &mut [bool],
        best: &mut [f64],
    ) {
        if cost < best[v] {
            best[v] = cost;
        }
        visited[v] = true;
        for &(nb, w) in &adjacency[v] {
            if !visited[nb] {
                dfs(nb, cost + w, adjacency, visited, best);
            }
        }
        visited[v] = false;
    }
    dfs(source, 0.0, &adjacency, &mut visited, &mut best);
    best
}

#[test]
fn geodesic_matches_exhaustive_enumeration_on_4x4_grid() {
    let mesh = grid_mesh(4, 4);
    assert_eq!(mesh.vertex_count(), 16);
    let dijkstra = mesh.geodesic_distances(0).unwrap();
    let oracle = brute_force_distances(&mesh, 0);
    for v in 0..16 {
        assert_relative_eq!(dijkstra[v], oracle[v], epsilon = 1e-12);
    }
}

#[test]
fn geodesic_symmetry_and_euclidean_bound() {
    let mesh = strip(1.0, 0.2, 13, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let u = rng.gen_range(0..mesh.vertex_count());
        let v = rng.gen_range(0..mesh.vertex_count());
        let du = mesh.geodesic_distances(u).unwrap();
        let dv = mesh.geodesic_distances(v).unwrap();
        assert_relative_eq!(du[v], dv[u], epsilon = 1e-12);
        let euclid = (mesh.vertices()[u] - mesh.vertices()[v]).norm();
        assert!(du[v] >= euclid - 1e-9, "geodesic {} < euclid {}", du[v], euclid);
    }
}

// ------------------------------------------------------------------ normals

#[test]
fn flat_strip_normals_point_positive_to_negative() {
    let mesh = strip(1.0, 0.2, 9, 3).unwrap();
    for n in mesh.vertex_normals().unwrap() {
        assert_relative_eq!(n, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
    }
}

#[test]
fn normals_rotation_equivariant() {
    let mesh = strip(1.0, 0.2, 9, 5).unwrap();
    let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.83)
        * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -1.21);
    let rotated = mesh
        .with_positions(mesh.vertices().iter().map(|p| rot * p).collect())
        .unwrap();
    let base = mesh.vertex_normals().unwrap();
    let turned = rotated.vertex_normals().unwrap();
    for (n0, n1) in base.iter().zip(&turned) {
        assert_relative_eq!(rot * n0, *n1, epsilon = 1e-9);
    }
}

/// Analytic half fold: x > crease maps through a 180-degree rotation about
/// the line {x = crease, z = h/2}, so folded faces flip sign.
fn half_fold(p: &Point3<f64>, crease: f64, h: f64) -> Point3<f64> {
    if p.x > crease {
        Point3::new(2.0 * crease - p.x, p.y, h - p.z)
    } else {
        *p
    }
}

#[test]
fn half_fold_flips_normals() {
    let mesh = strip(1.0, 0.2, 9, 3).unwrap();
    let crease = 0.5;
    let folded = mesh
        .with_positions(
            mesh.vertices()
                .iter()
                .map(|p| half_fold(p, crease, 0.05))
                .collect(),
        )
        .unwrap();

    // Oracle: recompute each face normal from the folded positions by hand.
    for (fi, f) in folded.faces().iter().enumerate() {
        let xs: Vec<f64> = f.iter().map(|&v| mesh.vertices()[v].x).collect();
        let all_left = xs.iter().all(|&x| x < crease - 1e-9);
        let all_right = xs.iter().all(|&x| x > crease + 1e-9);
        if !(all_left || all_right) {
            continue; // crease-straddling faces are torn by the analytic map
        }
        let [a, b, c] = *f;
        let cross = (folded.vertices()[b] - folded.vertices()[a])
            .cross(&(folded.vertices()[c] - folded.vertices()[a]));
        let expected = -(folded.side_flags()[fi] as f64) * cross.normalize();
        let got = folded.oriented_face_area_normal(fi).normalize();
        assert_relative_eq!(got, expected, epsilon = 1e-12);
        if all_left {
            assert_relative_eq!(got, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-9);
        } else {
            assert_relative_eq!(got, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-9);
        }
    }
}

#[test]
fn degenerate_faces_excluded_and_isolated_degenerate_errors() {
    // Face [0,1,2] is collinear (zero area); vertex 2 has no other face.
    let vertices = vec![
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(2.0, 0.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
    ];
    let faces = vec![[0, 1, 2], [0, 1, 3]];
    let mesh = DeformableMesh::new(vertices, faces, vec![0, 1], vec![1, 1]).unwrap();
    assert!(matches!(
        mesh.vertex_normals(),
        Err(MeshError::AllDegenerateNeighborhood { vertex: 2 })
    ));
}

// --------------------------------------------------------------- midline

#[test]
fn straight_strip_midline_directions() {
    let mesh = strip(1.0, 0.2, 9, 3).unwrap();
    for d in mesh.midline_directions().unwrap() {
        assert_relative_eq!(d, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
    }
}

#[test]
fn bent_midline_directions_piecewise() {
    // 9-vertex polyline bent 90 degrees at index 4: along +x then along +y.
    let mut vertices = Vec::new();
    for i in 0..5 {
        vertices.push(Point3::new(i as f64, 0.0, 0.0));
    }
    for i in 1..5 {
        vertices.push(Point3::new(4.0, i as f64, 0.0));
    }
    let edges: Vec<(usize, usize)> = (0..8).map(|i| (i, i + 1)).collect();
    let mesh = DeformableMesh::from_edge_graph(vertices, &edges, (0..9).collect()).unwrap();
    let dirs = mesh.midline_directions().unwrap();
    for (i, d) in dirs.iter().enumerate() {
        if i < 4 {
            assert_relative_eq!(*d, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        } else if i > 4 {
            assert_relative_eq!(*d, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        }
    }
}

#[test]
fn midline_directions_match_recomputation_oracle() {
    let mesh = strip(1.0, 0.2, 25, 5).unwrap();
    // Smooth deterministic deformation.
    let deformed = mesh
        .with_positions(
            mesh.vertices()
                .iter()
                .map(|p| {
                    Point3::new(
                        p.x + 0.05 * (2.0 * p.x + 0.3).sin(),
                        p.y + 0.04 * (1.3 * p.x).cos(),
                        0.1 * (1.7 * p.x + 1.0).sin(),
                    )
                })
                .collect(),
        )
        .unwrap();
    let got = deformed.midline_directions().unwrap();

    // Oracle: direct recomputation from the midline polyline.
    let mid = deformed.midline();
    let pos = deformed.vertices();
    let m = mid.len();
    let mut tangents = Vec::with_capacity(m);
    for i in 0..m {
        let (a, b) = if i == 0 {
            (mid[0], mid[1])
        } else if i == m - 1 {
            (mid[m - 2], mid[m - 1])
        } else {
            (mid[i - 1], mid[i + 1])
        };
        tangents.push((pos[b] - pos[a]).normalize());
    }
    for (v, d) in got.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (mi, &mv) in mid.iter().enumerate() {
            let dist = (pos[v] - pos[mv]).norm_squared();
            if dist < best_d {
                best_d = dist;
                best = mi;
            }
        }
        assert_relative_eq!(*d, tangents[best], epsilon = 1e-9);
        assert_relative_eq!(d.norm(), 1.0, epsilon = 1e-12);
    }
}

#[test]
fn midline_too_short_errors() {
    let vertices = vec![
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
    ];
    let mesh = DeformableMesh::new(vertices, vec![[0, 1, 2]], vec![0], vec![1]).unwrap();
    assert!(matches!(
        mesh.midline_directions(),
        Err(MeshError::MidlineTooShort { got: 1 })
    ));
}

// ---------------------------------------------------------------- distances

#[test]
fn chamfer_identical_clouds_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cloud = random_cloud(&mut rng, 17);
    assert_eq!(chamfer(&cloud, &cloud), 0.0);
}

#[test]
fn chamfer_single_points() {
    let a = PointCloud::new(vec![Point3::new(0.0, 0.0, 0.0)]).unwrap();
    let b = PointCloud::new(vec![Point3::new(1.0, 0.0, 0.0)]).unwrap();
    assert_relative_eq!(chamfer(&a, &b), 2.0, epsilon = 1e-15);
}

#[test]
fn chamfer_matches_quadratic_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_cloud(&mut rng, 10);
    let b = random_cloud(&mut rng, 10);
    // O(n^2) oracle written out longhand.
    let mut sum_a = 0.0;
    for p in &a.points {
        let mut nearest = f64::INFINITY;
        for q in &b.points {
            let d = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt();
            if d < nearest {
                nearest = d;
            }
        }
        sum_a += nearest;
    }
    let mut sum_b = 0.0;
    for q in &b.points {
        let mut nearest = f64::INFINITY;
        for p in &a.points {
            let d = ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt();
            if d < nearest {
                nearest = d;
            }
        }
        sum_b += nearest;
    }
    let expected = sum_a / 10.0 + sum_b / 10.0;
    assert_relative_eq!(chamfer(&a, &b), expected, epsilon = 1e-12);
}

#[test]
fn vertex_l2_basics_and_oracle() {
    let mesh = strip(1.0, 0.2, 9, 3).unwrap();
    assert_eq!(vertex_l2(&mesh, &mesh).unwrap(), 0.0);

    let shifted = mesh
        .with_positions(
            mesh.vertices()
                .iter()
                .map(|p| p + Vector3::new(0.1, 0.0, 0.0))
                .collect(),
        )
        .unwrap();
    assert_relative_eq!(vertex_l2(&mesh, &shifted).unwrap(), 0.1, epsilon = 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let jittered = mesh
        .with_positions(
            mesh.vertices()
                .iter()
                .map(|p| {
                    p + Vector3::new(
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.05..0.05),
                        rng.gen_range(-0.05..0.05),
                    )
                })
                .collect(),
        )
        .unwrap();
    // Independent re-summation.
    let mut total = 0.0;
    for (p, q) in mesh.vertices().iter().zip(jittered.vertices()) {
        total += (p - q).norm();
    }
    assert_relative_eq!(
        vertex_l2(&mesh, &jittered).unwrap(),
        total / mesh.vertex_count() as f64,
        epsilon = 1e-12
    );
}

#[test]
fn vertex_l2_count_mismatch_errors() {
    let a = strip(1.0, 0.2, 9, 3).unwrap();
    let b = strip(1.0, 0.2, 7, 3).unwrap();
    assert!(matches!(
        vertex_l2(&a, &b),
        Err(MeshError::VertexCountMismatch { .. })
    ));
}

// -------------------------------------------------------------- validation

#[test]
fn construction_rejects_bad_input() {
    let vertices = vec![
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
    ];
    assert!(matches!(
        DeformableMesh::new(vertices.clone(), vec![[0, 1, 9]], vec![], vec![1]),
        Err(MeshError::FaceIndexOutOfRange { .. })
    ));
    assert!(matches!(
        DeformableMesh::new(vertices.clone(), vec![[0, 1, 2]], vec![0, 2], vec![1]),
        Ok(_) // 0 and 2 share an edge in the triangle
    ));
    assert!(matches!(
        DeformableMesh::new(vertices.clone(), vec![[0, 1, 2]], vec![0, 0], vec![1]),
        Err(MeshError::MidlineDuplicate { .. })
    ));
    assert!(matches!(
        DeformableMesh::new(vertices, vec![[0, 1, 2]], vec![], vec![1, 1]),
        Err(MeshError::SideFlagCount { .. })
    ));

    // Disconnected: two separate triangles.
    let vertices = vec![
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(1.0, 0.0, 0.0),
        Point3::new(0.0, 1.0, 0.0),
        Point3::new(5.0, 0.0, 0.0),
        Point3::new(6.0, 0.0, 0.0),
        Point3::new(5.0, 1.0, 0.0),
    ];
    assert!(matches!(
        DeformableMesh::new(vertices, vec![[0, 1, 2], [3, 4, 5]], vec![], vec![1, 1]),
        Err(MeshError::Disconnected { .. })
    ));
}

#[test]
fn cloud_validation() {
    assert!(matches!(PointCloud::new(vec![]), Err(MeshError::EmptyCloud)));
    assert!(matches!(
        PointCloud::with_visibility(vec![Point3::origin()], vec![true, false]),
        Err(MeshError::MaskLengthMismatch { .. })
    ));
}

// ------------------------------------------------------------ property tests

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn chamfer_symmetric_and_rigid_invariant(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_cloud(&mut rng, 12);
        let b = random_cloud(&mut rng, 9);
        let ab = chamfer(&a, &b);
        let ba = chamfer(&b, &a);
        prop_assert!((ab - ba).abs() < 1e-12);

        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), rng.gen_range(0.0..6.28))
            * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), rng.gen_range(0.0..6.28));
        let t = Vector3::new(rng.gen_range(-2.0..2.0), 0.3, -0.7);
        let map = |c: &PointCloud| {
            PointCloud::new(c.points.iter().map(|p| rot * p + t).collect()).unwrap()
        };
        let moved = chamfer(&map(&a), &map(&b));
        prop_assert!((moved - ab).abs() < 1e-9);
    }

    #[test]
    fn midline_directions_rotation_equivariant(seed in 0u64..1000) {
        let mesh = strip(1.0, 0.2, 9, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), rng.gen_range(-3.0..3.0));
        let rotated = mesh
            .with_positions(mesh.vertices().iter().map(|p| rot * p).collect())
            .unwrap();
        let base = mesh.midline_directions().unwrap();
        let turned = rotated.midline_directions().unwrap();
        for (d0, d1) in base.iter().zip(&turned) {
            prop_assert!((rot * d0 - d1).norm() < 1e-9);
        }
    }
}
