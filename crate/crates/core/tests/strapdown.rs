use kneemoco::imusim::{self, sensor_velocity, sensor_world_poses, simulate_imu, SensorMount};
use kneemoco::moco::{estimate_track, Discretization, MotionTrack, StrapdownOptions};
use kneemoco::motion::{forward_kinematics, generate_sway, smooth, Anthropometry, SwayChannel, SwayParams};
use kneemoco::se3::RigidPose;

const LEAD_IN: usize = 60;

fn sway(rate: f64, seed: u64) -> SwayParams {
    let mut p = SwayParams {
        sample_rate: rate,
        ..SwayParams::default()
    };
    let deg = 1f64.to_radians();
    let amps = [0.005, 0.002, 0.005, 0.5 * deg, deg, 0.5 * deg, 0.5 * deg, 0.3 * deg, 0.3 * deg, 0.5 * deg];
    for (c, a) in p.channels.iter_mut().zip(amps) {
        *c = SwayChannel {
            amplitude: a,
            frequency: 0.2 + 0.05 * (seed % 3) as f64,
            phase: 0.0,
        };
    }
    p
}

/// Returns (max translation error m, max rotation error rad) over an 8 s scan.
fn run(rate: f64, scheme: Discretization, seed: u64) -> (f64, f64) {
    let coords = generate_sway(&sway(rate, seed), seed).unwrap();
    let coords = smooth(&coords, (rate / 2.0) as usize).unwrap();
    let traj = forward_kinematics(&coords, &Anthropometry::default()).unwrap();
    let mount = SensorMount::default();
    let g = imusim::gravity();
    let imu = simulate_imu(&traj, &mount, &g).unwrap();
    let poses = sensor_world_poses(&traj, &mount);
    let lead = (LEAD_IN as f64 * rate / 120.0) as usize;
    let t0 = imu[lead].t;
    let ct: Vec<f64> = (0..248).map(|k| t0 + k as f64 / 31.0).collect();
    let v0 = sensor_velocity(&poses, lead, 1.0 / rate);
    let options = StrapdownOptions { gravity: g, scheme };
    let track = estimate_track(&imu[lead..], &poses[lead], &v0, &ct, &options).unwrap();

    let truth_coords = coords.resample_uniform(t0, 31.0, 248).unwrap();
    let truth = forward_kinematics(&truth_coords, &Anthropometry::default()).unwrap();
    let truth_poses: Vec<RigidPose> = truth.shank.iter().map(|p| p.compose(&mount.local_pose())).collect();
    let truth = MotionTrack::from_poses(ct, &truth_poses);
    track
        .motion
        .iter()
        .zip(&truth.motion)
        .map(|(a, b)| a.distance_to(b))
        .fold((0.0f64, 0.0f64), |acc, d| (acc.0.max(d.0), acc.1.max(d.1)))
}

#[test]
fn ideal_imu_drift_below_one_millimeter() {
    for seed in 0..5 {
        let (dt, dr) = run(120.0, Discretization::Aligned, seed);
        println!("seed {seed}: {:.4} mm, {:.2e} rad", dt * 1e3, dr);
        assert!(dt < 1e-3, "drift {dt}");
        assert!(dr < 1e-4);
    }
}

#[test]
fn higher_rate_reduces_drift() {
    let (a, _) = run(120.0, Discretization::Aligned, 1);
    let (b, _) = run(240.0, Discretization::Aligned, 1);
    println!("120 Hz {a:.3e} m, 240 Hz {b:.3e} m");
    assert!(b < a);
}

#[test]
fn literal_scheme_is_worse() {
    let (a, _) = run(120.0, Discretization::Aligned, 2);
    let (l, _) = run(120.0, Discretization::Literal, 2);
    println!("aligned {a:.3e} m, literal {l:.3e} m");
    assert!(l > a);
}
