//! Accumulate LiDAR scans into a world-frame point cloud, voxel-downsample at
//! a requested resolution, and cull points behind the camera.

use std::collections::HashMap;

use thiserror::Error;

use crate::geometry::{interpolate_pose, GeometryError, Trajectory, Vec3};

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One LiDAR sweep: points in the sensor frame at a capture timestamp.
#[derive(Debug, Clone)]
pub struct Scan {
    pub timestamp: f64,
    pub points: Vec<Vec3>,
}

#[derive(Debug, Clone, Default)]
pub struct ScanSet {
    pub scans: Vec<Scan>,
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_points(points: &[Vec3]) -> Option<Aabb> {
        let first = points.first()?;
        let mut min = *first;
        let mut max = *first;
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        Some(Aabb { min, max })
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    /// Grow symmetrically by `pad` meters on every axis.
    pub fn padded(&self, pad: f64) -> Aabb {
        Aabb {
            min: self.min - Vec3::repeat(pad),
            max: self.max + Vec3::repeat(pad),
        }
    }
}

/// Accumulated LiDAR point positions in the world frame.
///
/// The bounding box is computed on accumulation and deliberately preserved
/// (not re-tightened) through downsampling so that the voxel grid origin is
/// stable; that makes `voxel_downsample` idempotent.
#[derive(Debug, Clone)]
pub struct WorldCloud {
    pub positions: Vec<Vec3>,
    pub aabb: Aabb,
}

impl WorldCloud {
    pub fn new(positions: Vec<Vec3>) -> Result<WorldCloud, CloudError> {
        let aabb =
            Aabb::from_points(&positions).ok_or(CloudError::EmptyInput("point cloud"))?;
        Ok(WorldCloud { positions, aabb })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Transform every scan into the world frame via the trajectory pose at its
/// timestamp. Output point count is the sum of scan sizes, in scan order.
pub fn accumulate(scans: &ScanSet, traj: &Trajectory) -> Result<WorldCloud, CloudError> {
    if scans.scans.is_empty() {
        return Err(CloudError::EmptyInput("scan set"));
    }
    let total: usize = scans.scans.iter().map(|s| s.points.len()).sum();
    let mut positions = Vec::with_capacity(total);
    for scan in &scans.scans {
        if scan.points.is_empty() {
            return Err(CloudError::EmptyInput("scan"));
        }
        let pose = interpolate_pose(traj, scan.timestamp)?;
        for p in &scan.points {
            positions.push(pose.transform_point(p));
        }
    }
    WorldCloud::new(positions)
}

/// Keep one point per voxel: the first point encountered in input order that
/// falls in the voxel. The grid origin is the cloud AABB minimum corner.
pub fn voxel_downsample(cloud: &WorldCloud, voxel_size: f64) -> WorldCloud {
    assert!(voxel_size > 0.0, "voxel_size must be positive");
    let origin = cloud.aabb.min;
    let mut occupancy: HashMap<(i64, i64, i64), ()> =
        HashMap::with_capacity(cloud.positions.len());
    let mut kept = Vec::new();
    for p in &cloud.positions {
        let key = (
            ((p.x - origin.x) / voxel_size).floor() as i64,
            ((p.y - origin.y) / voxel_size).floor() as i64,
            ((p.z - origin.z) / voxel_size).floor() as i64,
        );
        if occupancy.insert(key, ()).is_none() {
            kept.push(*p);
        }
    }
    WorldCloud {
        positions: kept,
        aabb: cloud.aabb,
    }
}

/// Drop points at or behind the near plane (camera looks along +z). Returns
/// the kept points and the map from kept index to original index so gradients
/// can be scattered back.
pub fn cull_behind_camera(points_cam: &[Vec3], near: f64) -> (Vec<Vec3>, Vec<usize>) {
    let mut kept = Vec::new();
    let mut index_map = Vec::new();
    for (i, p) in points_cam.iter().enumerate() {
        if p.z > near {
            kept.push(*p);
            index_map.push(i);
        }
    }
    (kept, index_map)
}

/// Scatter per-kept-point values back onto the original index space, filling
/// culled slots with the default. The value sum is conserved exactly.
pub fn scatter_culled<T: Copy + Default>(
    kept_values: &[T],
    index_map: &[usize],
    original_len: usize,
) -> Vec<T> {
    assert_eq!(kept_values.len(), index_map.len());
    let mut out = vec![T::default(); original_len];
    for (v, &i) in kept_values.iter().zip(index_map) {
        out[i] = *v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accumulate_identity_trajectory_keeps_points() {
        let traj = Trajectory::new(vec![(0.0, Pose::identity()), (1.0, Pose::identity())]).unwrap();
        let scan = Scan {
            timestamp: 0.5,
            points: vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.0, 0.5)],
        };
        let cloud = accumulate(&ScanSet { scans: vec![scan.clone()] }, &traj).unwrap();
        assert_eq!(cloud.positions, scan.points);
        assert!(cloud.aabb.contains(&cloud.positions[0]));
    }

    #[test]
    fn accumulate_empty_is_an_error() {
        let traj = Trajectory::new(vec![(0.0, Pose::identity()), (1.0, Pose::identity())]).unwrap();
        assert!(matches!(
            accumulate(&ScanSet::default(), &traj),
            Err(CloudError::EmptyInput(_))
        ));
        let with_empty_scan = ScanSet {
            scans: vec![Scan { timestamp: 0.5, points: vec![] }],
        };
        assert!(matches!(
            accumulate(&with_empty_scan, &traj),
            Err(CloudError::EmptyInput(_))
        ));
    }

    /// Two scans of the same physical wall taken from two poses must land on
    /// one plane after accumulation.
    #[test]
    fn accumulated_wall_scans_are_coplanar() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p0 = Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.3),
            Vec3::new(0.5, -0.2, 0.1),
        );
        let p1 = Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -0.2),
            Vec3::new(1.5, 0.3, 0.0),
        );
        let traj = Trajectory::new(vec![(0.0, p0), (1.0, p1)]).unwrap();
        // Wall: the plane x = 4 in world coordinates.
        let mut make_scan = |t: f64, pose: &Pose| {
            let inv = pose.inverse();
            let points = (0..40)
                .map(|_| {
                    let w = Vec3::new(4.0, rng.gen_range(-2.0..2.0), rng.gen_range(0.0..2.0));
                    inv.transform_point(&w)
                })
                .collect();
            Scan { timestamp: t, points }
        };
        let scans = ScanSet {
            scans: vec![make_scan(0.0, &p0), make_scan(1.0, &p1)],
        };
        let cloud = accumulate(&scans, &traj).unwrap();
        assert_eq!(cloud.len(), 80);
        for p in &cloud.positions {
            assert!((p.x - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cube_corners_collapse_to_one_point() {
        let corners: Vec<Vec3> = (0..8)
            .map(|i| {
                Vec3::new(
                    (i & 1) as f64,
                    ((i >> 1) & 1) as f64,
                    ((i >> 2) & 1) as f64,
                )
            })
            .collect();
        let cloud = WorldCloud::new(corners.clone()).unwrap();
        let down = voxel_downsample(&cloud, 10.0);
        assert_eq!(down.len(), 1);
        assert_eq!(down.positions[0], corners[0]);
    }

    #[test]
    fn well_separated_points_survive_downsampling() {
        let points: Vec<Vec3> = (0..20).map(|i| Vec3::new(i as f64 * 2.0, 0.0, 0.0)).collect();
        let cloud = WorldCloud::new(points.clone()).unwrap();
        let down = voxel_downsample(&cloud, 1.0);
        assert_eq!(down.positions, points);
    }

    #[test]
    fn finer_voxels_keep_strictly_more_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let points: Vec<Vec3> = (0..100_000)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let cloud = WorldCloud::new(points).unwrap();
        let mut last = 0usize;
        for voxel_cm in [10.0, 8.0, 6.0, 4.0, 2.0] {
            let n = voxel_downsample(&cloud, voxel_cm / 100.0).len();
            assert!(n > last, "count must increase as voxels shrink: {n} vs {last}");
            last = n;
        }
    }

    #[test]
    fn downsampling_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let points: Vec<Vec3> = (0..5000)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                )
            })
            .collect();
        let cloud = WorldCloud::new(points).unwrap();
        for size in [0.5, 0.13, 0.02] {
            let once = voxel_downsample(&cloud, size);
            let twice = voxel_downsample(&once, size);
            assert_eq!(once.positions, twice.positions);
        }
    }

    /// Reordering points inside a voxel while keeping the global order of
    /// first occupancy leaves the output unchanged.
    #[test]
    fn downsampling_is_order_stable() {
        let a = Vec3::new(0.1, 0.1, 0.1); // voxel A, first
        let a2 = Vec3::new(0.2, 0.2, 0.2); // voxel A, later
        let a3 = Vec3::new(0.15, 0.25, 0.1); // voxel A, later
        let b = Vec3::new(1.6, 0.1, 0.1); // voxel B
        let base = WorldCloud::new(vec![a, a2, a3, b]).unwrap();
        let permuted = WorldCloud {
            positions: vec![a, a3, a2, b],
            aabb: base.aabb,
        };
        let d0 = voxel_downsample(&base, 1.0);
        let d1 = voxel_downsample(&permuted, 1.0);
        assert_eq!(d0.positions, d1.positions);
    }

    #[test]
    fn culling_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let points: Vec<Vec3> = (0..500)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                )
            })
            .collect();
        let near = 0.2;
        let (kept, map) = cull_behind_camera(&points, near);
        let expected = points.iter().filter(|p| p.z > near).count();
        assert_eq!(kept.len(), expected);
        for (k, &i) in kept.iter().zip(&map) {
            assert_eq!(*k, points[i]);
        }
    }

    #[test]
    fn culling_edge_cases() {
        let behind = vec![Vec3::new(0.0, 0.0, -1.0); 5];
        let (kept, map) = cull_behind_camera(&behind, 0.1);
        assert!(kept.is_empty() && map.is_empty());

        let front = vec![Vec3::new(0.0, 0.0, 10.0); 5];
        let (kept, map) = cull_behind_camera(&front, 0.1);
        assert_eq!(kept.len(), 5);
        assert_eq!(map, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn gradient_scatter_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let points: Vec<Vec3> = (0..300)
            .map(|_| Vec3::new(0.0, 0.0, rng.gen_range(-2.0..2.0)))
            .collect();
        let (kept, map) = cull_behind_camera(&points, 0.2);
        let grads: Vec<f64> = (0..kept.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scattered = scatter_culled(&grads, &map, points.len());
        let sum_kept: f64 = grads.iter().sum();
        let sum_scattered: f64 = scattered.iter().sum();
        assert_eq!(sum_kept, sum_scattered);
        for (i, v) in scattered.iter().enumerate() {
            if !map.contains(&i) {
                assert_eq!(*v, 0.0);
            }
        }
    }
}
