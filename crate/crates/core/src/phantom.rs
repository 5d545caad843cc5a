//! Analytic two-segment leg phantom built from additive ellipsoids.
//!
//! Each primitive lives in the frame of its parent segment (thigh frame
//! origin at the hip, shank frame origin at the knee, both with +y pointing
//! proximally) and carries a delta attenuation; nested primitives add up.
//! Lengths are mm, attenuation 1/mm.

use std::path::Path;

use thiserror::Error;

use crate::motion::{Segment, SegmentTrajectory};
use crate::se3::{RigidPose, Rotation3, Vec3};

pub const SOFT_TISSUE_MU: f64 = 0.02;
pub const CORTICAL_DELTA_MU: f64 = 0.03;
pub const MARROW_DELTA_MU: f64 = -0.015;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("primitive {name}: semi-axes must be positive")]
    InvalidSemiAxes { name: String },
    #[error("phantom line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("time index {index} out of range for trajectory of {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
}

/// Ellipsoid in its parent segment's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub name: String,
    pub parent: Segment,
    pub center: Vec3,
    pub semi_axes: Vec3,
    pub orientation: Rotation3,
    pub delta_mu: f64,
}

impl Primitive {
    pub fn new(name: &str, parent: Segment, center: [f64; 3], semi_axes: [f64; 3], delta_mu: f64) -> Self {
        Self {
            name: name.to_string(),
            parent,
            center: Vec3::from(center),
            semi_axes: Vec3::from(semi_axes),
            orientation: Rotation3::identity(),
            delta_mu,
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.semi_axes.iter().all(|&a| a > 0.0 && a.is_finite()) {
            Ok(())
        } else {
            Err(PhantomError::InvalidSemiAxes { name: self.name.clone() })
        }
    }

    /// Local placement within the parent segment.
    pub fn local_pose(&self) -> RigidPose {
        RigidPose::new(self.orientation, self.center)
    }

    /// Implicit function: `< 1` inside, `> 1` outside, in the segment frame.
    pub fn level(&self, x: &Vec3) -> f64 {
        let p = self.orientation.transpose().apply(&(x - self.center));
        p.component_div(&self.semi_axes).norm_squared()
    }
}

/// The built-in left-leg phantom. Soft tissue per segment, femur and tibia
/// shafts, femoral condyles, tibial plateau and fibula with nested marrow,
/// and the patella.
pub fn default_leg_phantom() -> Vec<Primitive> {
    use Segment::{Shank, Thigh};
    let c = CORTICAL_DELTA_MU;
    let m = MARROW_DELTA_MU;
    vec![
        Primitive::new("thigh_soft", Thigh, [0.0, -250.0, 0.0], [75.0, 200.0, 70.0], SOFT_TISSUE_MU),
        Primitive::new("femur_shaft", Thigh, [0.0, -230.0, 0.0], [14.0, 170.0, 14.0], c),
        Primitive::new("femur_marrow", Thigh, [0.0, -230.0, 0.0], [8.0, 150.0, 8.0], m),
        Primitive::new("femur_condyles", Thigh, [0.0, -400.0, 0.0], [30.0, 22.0, 40.0], c),
        Primitive::new("condyle_marrow", Thigh, [0.0, -399.0, 0.0], [22.0, 15.0, 31.0], m),
        Primitive::new("patella", Thigh, [42.0, -395.0, 0.0], [8.0, 22.0, 18.0], c),
        Primitive::new("shank_soft", Shank, [0.0, -200.0, 0.0], [62.0, 215.0, 60.0], SOFT_TISSUE_MU),
        Primitive::new("tibia_plateau", Shank, [0.0, -35.0, 0.0], [30.0, 18.0, 36.0], c),
        Primitive::new("plateau_marrow", Shank, [0.0, -35.0, 0.0], [22.0, 12.0, 28.0], m),
        Primitive::new("tibia_shaft", Shank, [0.0, -200.0, 0.0], [15.0, 160.0, 15.0], c),
        Primitive::new("tibia_marrow", Shank, [0.0, -200.0, 0.0], [9.0, 140.0, 9.0], m),
        Primitive::new("fibula", Shank, [-5.0, -210.0, 28.0], [7.0, 150.0, 7.0], c),
        Primitive::new("fibula_marrow", Shank, [-5.0, -210.0, 28.0], [3.5, 130.0, 3.5], m),
    ]
}

/// Primitive placed in the world frame, with what the chord computation
/// needs precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedPrimitive {
    pub name: String,
    pub center: Vec3,
    pub rotation: Rotation3,
    pub semi_axes: Vec3,
    pub delta_mu: f64,
    bound_radius: f64,
}

impl PosedPrimitive {
    pub fn new(name: &str, pose: &RigidPose, semi_axes: Vec3, delta_mu: f64) -> Self {
        Self {
            name: name.to_string(),
            center: pose.translation,
            rotation: pose.rotation,
            semi_axes,
            delta_mu,
            bound_radius: semi_axes.max(),
        }
    }

    /// Length of the half-line `origin + t dir`, `t >= 0`, inside the
    /// ellipsoid. `dir` must be a unit vector.
    pub fn chord(&self, origin: &Vec3, dir: &Vec3) -> f64 {
        let rel = origin - self.center;
        // cheap rejection against the bounding sphere
        let along = rel.dot(dir);
        let perp2 = rel.norm_squared() - along * along;
        let r2 = self.bound_radius * self.bound_radius;
        if perp2 > r2 {
            return 0.0;
        }
        let rt = self.rotation.transpose();
        let p = rt.apply(&rel).component_div(&self.semi_axes);
        let q = rt.apply(dir).component_div(&self.semi_axes);
        let a = q.norm_squared();
        let b = p.dot(&q);
        let c = p.norm_squared() - 1.0;
        let disc = b * b - a * c;
        if disc <= 0.0 {
            return 0.0;
        }
        let s = disc.sqrt();
        let t_far = (-b + s) / a;
        if t_far <= 0.0 {
            return 0.0;
        }
        let t_near = ((-b - s) / a).max(0.0);
        t_far - t_near
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        let p = self.rotation.transpose().apply(&(x - self.center));
        p.component_div(&self.semi_axes).norm_squared() < 1.0
    }
}

/// Phantom primitives at one instant, world frame, mm.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PosedPhantom {
    pub primitives: Vec<PosedPrimitive>,
}

impl PosedPhantom {
    /// Places primitives given segment poses in the world frame, mm.
    pub fn from_segment_poses(primitives: &[Primitive], thigh: &RigidPose, shank: &RigidPose) -> Self {
        Self {
            primitives: primitives
                .iter()
                .map(|p| {
                    let seg = match p.parent {
                        Segment::Thigh => thigh,
                        Segment::Shank => shank,
                    };
                    PosedPrimitive::new(&p.name, &seg.compose(&p.local_pose()), p.semi_axes, p.delta_mu)
                })
                .collect(),
        }
    }

    /// The same phantom moved rigidly by `pose`.
    pub fn transformed(&self, pose: &RigidPose) -> Self {
        Self {
            primitives: self
                .primitives
                .iter()
                .map(|p| {
                    let world = pose.compose(&RigidPose::new(p.rotation, p.center));
                    PosedPrimitive::new(&p.name, &world, p.semi_axes, p.delta_mu)
                })
                .collect(),
        }
    }

    /// Attenuation at a point.
    pub fn mu_at(&self, x: &Vec3) -> f64 {
        self.primitives.iter().filter(|p| p.contains(x)).map(|p| p.delta_mu).sum()
    }
}

/// Rigid transport of every primitive by its parent segment's pose at
/// trajectory sample `index` (trajectory in meters).
pub fn pose_at(primitives: &[Primitive], traj: &SegmentTrajectory, index: usize) -> Result<PosedPhantom, PhantomError> {
    if index >= traj.len() {
        return Err(PhantomError::IndexOutOfRange { index, len: traj.len() });
    }
    Ok(PosedPhantom::from_segment_poses(
        primitives,
        &traj.thigh[index].scale_translation(1e3),
        &traj.shank[index].scale_translation(1e3),
    ))
}

/// Sum of `delta_mu` times chord length along the half-line from `origin`
/// in the unit direction `dir`.
pub fn line_integral(phantom: &PosedPhantom, origin: &Vec3, dir: &Vec3) -> f64 {
    phantom
        .primitives
        .iter()
        .map(|p| p.delta_mu * p.chord(origin, dir))
        .sum()
}

/// Text format, one primitive per line, `#` comments:
/// `name parent cx cy cz ax ay az rx ry rz delta_mu` with Euler XYZ angles
/// in degrees.
pub fn parse_phantom(text: &str) -> Result<Vec<Primitive>, PhantomError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| PhantomError::Parse { line: idx + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 12 {
            return Err(err(format!("expected 12 fields, found {}", fields.len())));
        }
        let parent = Segment::parse(fields[1]).ok_or_else(|| err(format!("unknown segment {:?}", fields[1])))?;
        let nums = fields[2..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad number {f:?}"))))
            .collect::<Result<Vec<f64>, _>>()?;
        let p = Primitive {
            name: fields[0].to_string(),
            parent,
            center: Vec3::new(nums[0], nums[1], nums[2]),
            semi_axes: Vec3::new(nums[3], nums[4], nums[5]),
            orientation: Rotation3::from_euler_xyz(nums[6].to_radians(), nums[7].to_radians(), nums[8].to_radians()),
            delta_mu: nums[9],
        };
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}

pub fn load_phantom(path: &Path) -> Result<Vec<Primitive>, PhantomError> {
    let text = std::fs::read_to_string(path).map_err(|source| PhantomError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_phantom(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{forward_kinematics, Anthropometry, CoordSample, GeneralizedCoords};
    use proptest::prelude::*;

    fn sphere(r: f64, mu: f64) -> PosedPhantom {
        PosedPhantom {
            primitives: vec![PosedPrimitive::new("s", &RigidPose::identity(), Vec3::repeat(r), mu)],
        }
    }

    fn quadrature(ph: &PosedPhantom, o: &Vec3, d: &Vec3, t_max: f64, steps: usize) -> f64 {
        let h = t_max / steps as f64;
        (0..steps).map(|i| ph.mu_at(&(o + d * ((i as f64 + 0.5) * h)))).sum::<f64>() * h
    }

    /// Radius of a sphere about the origin enclosing [`test_phantom`].
    const BOUND: f64 = 12.5;

    /// Small phantom with a few overlapping, rotated ellipsoids.
    fn test_phantom() -> PosedPhantom {
        let parts = [
            ([0.0, 0.0, 0.0], [12.0, 9.0, 7.0], [0.1, 0.2, 0.3], 0.02),
            ([2.0, -1.5, 1.0], [5.0, 6.0, 4.0], [0.5, -0.2, 0.0], 0.03),
            ([2.0, -1.5, 1.0], [2.5, 3.0, 2.0], [0.5, -0.2, 0.0], -0.015),
            ([-5.0, 3.0, 0.0], [3.0, 3.0, 5.0], [0.0, 0.0, 1.0], 0.03),
        ];
        PosedPhantom {
            primitives: parts
                .iter()
                .map(|(c, a, w, mu)| {
                    let pose = RigidPose::new(Rotation3::exp(&Vec3::from(*w)), Vec3::from(*c));
                    PosedPrimitive::new("p", &pose, Vec3::from(*a), *mu)
                })
                .collect(),
        }
    }

    #[test]
    fn sphere_through_center() {
        let ph = sphere(30.0, 0.02);
        let v = line_integral(&ph, &Vec3::new(-100.0, 0.0, 0.0), &Vec3::x());
        assert!((v - 2.0 * 30.0 * 0.02).abs() < 1e-12);
        assert_eq!(line_integral(&ph, &Vec3::new(-100.0, 40.0, 0.0), &Vec3::x()), 0.0);
        // ray pointing away sees nothing; ray starting inside sees the rest
        assert_eq!(line_integral(&ph, &Vec3::new(-100.0, 0.0, 0.0), &(-Vec3::x())), 0.0);
        let inside = line_integral(&ph, &Vec3::new(10.0, 0.0, 0.0), &Vec3::x());
        assert!((inside - 20.0 * 0.02).abs() < 1e-12);
    }

    #[test]
    fn empty_phantom_is_zero() {
        let ph = PosedPhantom::default();
        assert_eq!(line_integral(&ph, &Vec3::zeros(), &Vec3::y()), 0.0);
    }

    #[test]
    fn quadrature_oracle() {
        use rand::{Rng, SeedableRng};
        let ph = test_phantom();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..40 {
            let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                .normalize();
            let offset = Vec3::new(rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0), rng.random_range(-7.0..7.0));
            // integrate over the ray's chord through the phantom's bounding sphere
            let o = offset - d * (offset.dot(&d) + (BOUND * BOUND - (offset - d * offset.dot(&d)).norm_squared()).max(0.0).sqrt());
            let span = 2.0 * (BOUND * BOUND - (o - d * o.dot(&d)).norm_squared()).max(0.0).sqrt();
            let exact = line_integral(&ph, &o, &d);
            let approx = quadrature(&ph, &o, &d, span, 10_000);
            worst = worst.max((exact - approx).abs());
        }
        assert!(worst < 1e-4, "worst {worst}");
    }

    #[test]
    fn default_phantom_is_fixed_and_nonnegative() {
        assert_eq!(default_leg_phantom(), default_leg_phantom());
        let ph = PosedPhantom::from_segment_poses(&default_leg_phantom(), &RigidPose::identity(), &RigidPose::from_translation(Vec3::new(0.0, -420.0, 0.0)));
        for y in (-850..0).step_by(10) {
            for x in (-80..80).step_by(4) {
                for z in (-80..80).step_by(8) {
                    assert!(ph.mu_at(&Vec3::new(x as f64, y as f64, z as f64)) >= -1e-15);
                }
            }
        }
        let bone = line_integral(&ph, &Vec3::new(-200.0, -200.0, 0.0), &Vec3::x());
        let soft = line_integral(&ph, &Vec3::new(-200.0, -200.0, 50.0), &Vec3::x());
        assert!(bone > soft);
    }

    #[test]
    fn marrow_stays_inside_bone() {
        let prims = default_leg_phantom();
        let pairs = [
            ("femur_marrow", "femur_shaft"),
            ("condyle_marrow", "femur_condyles"),
            ("plateau_marrow", "tibia_plateau"),
            ("tibia_marrow", "tibia_shaft"),
            ("fibula_marrow", "fibula"),
        ];
        let get = |n: &str| prims.iter().find(|p| p.name == n).unwrap();
        let body = Anthropometry::default();
        for flex in (0..=90).step_by(15) {
            let s = CoordSample::squat(Vec3::new(0.0, 0.85, 0.0), (flex as f64).to_radians());
            let (thigh, shank) = crate::motion::segment_poses(&s, &body);
            let ph = PosedPhantom::from_segment_poses(&prims, &thigh.scale_translation(1e3), &shank.scale_translation(1e3));
            let find = |n: &str| ph.primitives.iter().find(|p| p.name == n).unwrap();
            for (inner, outer) in pairs {
                let (pi, po) = (find(inner), find(outer));
                assert_eq!(get(inner).parent, get(outer).parent);
                for i in 0..24 {
                    for j in 1..12 {
                        let (th, ph_) = (i as f64 * std::f64::consts::PI / 12.0, j as f64 * std::f64::consts::PI / 12.0);
                        let unit = Vec3::new(ph_.sin() * th.cos(), ph_.cos(), ph_.sin() * th.sin());
                        let x = pi.center + pi.rotation.apply(&unit.component_mul(&pi.semi_axes));
                        assert!(po.contains(&x), "{inner} leaves {outer} at flex {flex}");
                    }
                }
            }
        }
    }

    fn two_sample_traj(a: CoordSample, b: CoordSample) -> SegmentTrajectory {
        let coords = GeneralizedCoords::new(0.0, 10.0, vec![a, b]).unwrap();
        forward_kinematics(&coords, &Anthropometry::default()).unwrap()
    }

    #[test]
    fn pose_at_kinematics() {
        let prims = default_leg_phantom();
        let base = CoordSample::squat(Vec3::new(0.0, 0.85, 0.0), 0.5);
        let mut bent = base;
        bent.knee_flex += 0.1;
        let traj = two_sample_traj(base, bent);
        let p0 = pose_at(&prims, &traj, 0).unwrap();
        let p1 = pose_at(&prims, &traj, 1).unwrap();
        let knee = traj.knee[0] * 1e3;
        // extra flexion rotates about the knee's lateral axis, which is the
        // thigh frame's z-axis
        let axis = traj.thigh[0].rotation.apply(&Vec3::z());
        let rot = Rotation3::from_axis_angle(&axis, -0.1).unwrap();
        for (a, b, prim) in zip3(&p0, &p1, &prims) {
            match prim.parent {
                Segment::Thigh => assert_eq!(a.center, b.center),
                Segment::Shank => {
                    let expected = knee + rot.apply(&(a.center - knee));
                    assert!((b.center - expected).amax() < 1e-9);
                    assert!(b.rotation.angle_to(&rot.compose(&a.rotation)) < 1e-9);
                }
            }
        }
        assert!(matches!(pose_at(&prims, &traj, 2), Err(PhantomError::IndexOutOfRange { .. })));

        let mut moved = base;
        moved.root_position += Vec3::new(0.01, 0.0, -0.02);
        let traj = two_sample_traj(base, moved);
        let p0 = pose_at(&prims, &traj, 0).unwrap();
        let p1 = pose_at(&prims, &traj, 1).unwrap();
        for (a, b, _) in zip3(&p0, &p1, &prims) {
            assert!((b.center - a.center - Vec3::new(10.0, 0.0, -20.0)).amax() < 1e-9);
        }
    }

    fn zip3<'a>(
        a: &'a PosedPhantom,
        b: &'a PosedPhantom,
        prims: &'a [Primitive],
    ) -> impl Iterator<Item = (&'a PosedPrimitive, &'a PosedPrimitive, &'a Primitive)> {
        a.primitives.iter().zip(&b.primitives).zip(prims).map(|((x, y), z)| (x, y, z))
    }

    #[test]
    fn text_format() {
        let text = "# minimal\nball shank 0 -10 0  20 20 20  0 0 0  0.02\nrod thigh 1 2 3 4 5 6 90 0 0 0.03 # tilted\n";
        let prims = parse_phantom(text).unwrap();
        assert_eq!(prims.len(), 2);
        assert_eq!(prims[0].parent, Segment::Shank);
        assert!((prims[1].orientation.apply(&Vec3::y()) - Vec3::z()).amax() < 1e-12);
        assert!(matches!(parse_phantom("a thigh 1 2 3"), Err(PhantomError::Parse { line: 1, .. })));
        assert!(matches!(parse_phantom("a knee 0 0 0 1 1 1 0 0 0 1"), Err(PhantomError::Parse { .. })));
        assert!(matches!(
            parse_phantom("a thigh 0 0 0 1 0 1 0 0 0 1"),
            Err(PhantomError::InvalidSemiAxes { .. })
        ));
    }

    proptest! {
        #[test]
        fn rigid_invariance(
            w in prop::array::uniform3(-1.0f64..1.0),
            t in prop::array::uniform3(-50.0f64..50.0),
            d in prop::array::uniform3(-1.0f64..1.0),
            o in prop::array::uniform3(-20.0f64..20.0),
        ) {
            let dir = Vec3::from(d);
            prop_assume!(dir.norm() > 0.1);
            let dir = dir.normalize();
            let origin = Vec3::from(o) - dir * 80.0;
            let ph = test_phantom();
            let pose = RigidPose::new(Rotation3::exp(&Vec3::from(w)), Vec3::from(t));
            let moved = ph.transformed(&pose);
            let a = line_integral(&ph, &origin, &dir);
            let b = line_integral(&moved, &pose.transform_point(&origin), &pose.transform_vector(&dir));
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn additivity_and_sign(
            d in prop::array::uniform3(-1.0f64..1.0),
            o in prop::array::uniform3(-20.0f64..20.0),
            split in 0usize..4,
        ) {
            let dir = Vec3::from(d);
            prop_assume!(dir.norm() > 0.1);
            let dir = dir.normalize();
            let origin = Vec3::from(o) - dir * 80.0;
            let ph = test_phantom();
            let (a, b) = ph.primitives.split_at(split);
            let pa = PosedPhantom { primitives: a.to_vec() };
            let pb = PosedPhantom { primitives: b.to_vec() };
            let whole = line_integral(&ph, &origin, &dir);
            prop_assert!((whole - line_integral(&pa, &origin, &dir) - line_integral(&pb, &origin, &dir)).abs() < 1e-12);
            prop_assert!(whole >= -1e-12);
        }
    }
}
