//! Procedural motion families: straight walk, turning walk, idle sway and
//! sit-stand. Feet are placed in the world and the legs follow by two-bone IK,
//! so planted feet are exactly stationary on the ground plane `y = 0`.

use std::f64::consts::PI;

use maskmotion_core::body::{compose_global, forward_kinematics, BodyFrame, LocalPose, SkeletonConfig};
use maskmotion_core::geometry::{matrix_to_rot6d, Trajectory, TrajectoryFrame};
use maskmotion_core::linalg::{add, cross, dot, norm, scale, sub, Mat3, PointSeq, Vec3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionFamily {
    StraightWalk,
    TurningWalk,
    IdleSway,
    SitStand,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 4] = [MotionFamily::StraightWalk, MotionFamily::TurningWalk, MotionFamily::IdleSway, MotionFamily::SitStand];

    pub fn name(self) -> &'static str {
        match self {
            MotionFamily::StraightWalk => "straight_walk",
            MotionFamily::TurningWalk => "turning_walk",
            MotionFamily::IdleSway => "idle_sway",
            MotionFamily::SitStand => "sit_stand",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticMotionConfig {
    pub num_sequences: usize,
    pub frames: usize,
    pub fps: f64,
    pub families: Vec<MotionFamily>,
    /// Walking speed range, m/s.
    pub speed: [f64; 2],
    /// Gait cycle period range, s.
    pub cycle: [f64; 2],
    /// Turning rate magnitude range, rad/s.
    pub turn_rate: [f64; 2],
    /// Distance of the path midpoint from the camera, m.
    pub depth: [f64; 2],
    pub seed: u64,
}

impl Default for SyntheticMotionConfig {
    fn default() -> Self {
        SyntheticMotionConfig {
            num_sequences: 100,
            frames: 60,
            fps: 30.0,
            families: MotionFamily::ALL.to_vec(),
            speed: [0.6, 1.1],
            cycle: [0.85, 1.1],
            turn_rate: [0.3, 0.8],
            depth: [4.0, 6.0],
            seed: 0,
        }
    }
}

impl SyntheticMotionConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if self.num_sequences == 0 || self.frames < 2 || !(self.fps > 0.0) || self.families.is_empty() {
            return Err(HarnessError::Config("synthetic data needs sequences, ≥ 2 frames, fps > 0 and a family".into()));
        }
        if !(ordered(self.speed) && ordered(self.cycle) && ordered(self.turn_rate) && ordered(self.depth)) || self.cycle[0] <= 0.0 || self.depth[0] < 2.0 {
            return Err(HarnessError::Config("synthetic parameter ranges must be ordered and positive".into()));
        }
        Ok(())
    }
}

/// One generated sequence in world coordinates (camera frame, y up, ground at y = 0).
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub name: String,
    pub family: Option<MotionFamily>,
    pub fps: f64,
    pub traj: Trajectory<f64>,
    pub poses: Vec<LocalPose<f64>>,
    /// Ground-truth stance flags per frame and foot.
    pub contacts: Vec<Vec<bool>>,
}

impl MotionSequence {
    pub fn frames(&self) -> usize {
        self.traj.len()
    }

    pub fn local_bodies(&self, skel: &SkeletonConfig<f64>) -> Result<Vec<BodyFrame<f64>>> {
        Ok(self.poses.iter().map(|p| forward_kinematics(p, skel)).collect::<maskmotion_core::Result<Vec<_>>>()?)
    }

    pub fn world_bodies(&self, skel: &SkeletonConfig<f64>) -> Result<Vec<BodyFrame<f64>>> {
        self.local_bodies(skel)?
            .iter()
            .zip(&self.traj.frames)
            .map(|(b, f)| Ok(compose_global(b, f)?))
            .collect()
    }

    pub fn world_joints(&self, skel: &SkeletonConfig<f64>) -> Result<PointSeq<f64>> {
        Ok(PointSeq::from_frames(self.world_bodies(skel)?.into_iter().map(|b| b.joints).collect()))
    }
}

const LEFT: usize = 0;
const RIGHT: usize = 1;
const DUTY: f64 = 0.6;
const SWING_HEIGHT: f64 = 0.08;
const FOOT_OFFSET: Vec3<f64> = [0.0, -0.06, 0.12];
const HALF_STANCE_WIDTH: f64 = 0.1;

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

fn forward_of(yaw: f64) -> Vec3<f64> {
    [yaw.sin(), 0.0, yaw.cos()]
}

fn left_of(yaw: f64) -> Vec3<f64> {
    [yaw.cos(), 0.0, -yaw.sin()]
}

fn normalize(v: Vec3<f64>) -> Vec3<f64> {
    scale(v, 1.0 / norm(v).max(1e-12))
}

/// Rotation whose columns are `x = y × z`, `y`, `z` with `y` along `-bone` and
/// `z` the component of `hint` orthogonal to it.
fn bone_frame(bone_dir: Vec3<f64>, hint: Vec3<f64>) -> Mat3<f64> {
    let y = normalize(scale(bone_dir, -1.0));
    let z = normalize(sub(hint, scale(y, dot(hint, y))));
    let x = cross(y, z);
    Mat3::from_cols(x, y, z)
}

/// Root path and heading as functions of time.
#[derive(Clone, Copy, Debug)]
struct Path {
    start: Vec3<f64>,
    yaw0: f64,
    speed: f64,
    turn: f64,
}

impl Path {
    fn yaw(&self, t: f64) -> f64 {
        self.yaw0 + self.turn * t
    }

    /// Horizontal position at time `t` (closed form for a circular arc).
    fn at(&self, t: f64) -> Vec3<f64> {
        let (v, w, y0) = (self.speed, self.turn, self.yaw0);
        let d = if w.abs() < 1e-9 {
            scale(forward_of(y0), v * t)
        } else {
            let y1 = y0 + w * t;
            [v / w * (y0.cos() - y1.cos()), 0.0, v / w * (y1.sin() - y0.sin())]
        };
        add(self.start, d)
    }
}

/// Walking gait: stance plants at fixed world points, smooth swing arcs.
struct Gait {
    path: Path,
    cycle: f64,
    phase0: f64,
}

impl Gait {
    /// Plant `k` of `foot`: position and yaw.
    fn plant(&self, foot: usize, k: i64) -> (Vec3<f64>, f64) {
        let off = if foot == LEFT { 0.0 } else { 0.5 };
        let start = (k as f64 + off - self.phase0) * self.cycle;
        let mid = start + 0.5 * DUTY * self.cycle;
        let yaw = self.path.yaw(mid);
        let side = if foot == LEFT { 1.0 } else { -1.0 };
        // the ankle, not the toe, sits under the hip at mid-stance
        let p = add(self.path.at(mid), add(scale(left_of(yaw), side * HALF_STANCE_WIDTH), scale(forward_of(yaw), FOOT_OFFSET[2])));
        ([p[0], 0.0, p[2]], yaw)
    }

    /// Foot position, yaw and stance flag at time `t`.
    fn foot(&self, foot: usize, t: f64) -> (Vec3<f64>, f64, bool) {
        let off = if foot == LEFT { 0.0 } else { 0.5 };
        let u = t / self.cycle + self.phase0 - off;
        let k = u.floor() as i64;
        let s = u - k as f64;
        if s < DUTY {
            let (p, yaw) = self.plant(foot, k);
            (p, yaw, true)
        } else {
            let (a, ya) = self.plant(foot, k);
            let (b, yb) = self.plant(foot, k + 1);
            let q = (s - DUTY) / (1.0 - DUTY);
            let h = smoothstep(q);
            let lift = SWING_HEIGHT * (PI * q).sin().powi(2);
            let p = add(a, scale(sub(b, a), h));
            ([p[0], lift, p[2]], ya + (yb - ya) * h, false)
        }
    }
}

/// Joint angles that are not solved by IK.
#[derive(Clone, Copy, Debug, Default)]
struct UpperBody {
    spine_pitch: f64,
    spine_roll: f64,
    arm_swing: [f64; 2],
    elbow: [f64; 2],
    neck_pitch: f64,
}

struct Builder<'a> {
    skel: &'a SkeletonConfig<f64>,
    /// Largest distance between a foot target and the reachable ankle position.
    miss: std::cell::Cell<f64>,
}

const HIPS: [usize; 2] = [1, 2];
const KNEES: [usize; 2] = [4, 5];
const ANKLES: [usize; 2] = [7, 8];

impl Builder<'_> {
    /// Local pose placing each foot joint at the given world target (with foot yaw),
    /// for a root frame `(rot, trans)`.
    fn pose(&self, root_rot: &Mat3<f64>, root: Vec3<f64>, feet: [(Vec3<f64>, f64); 2], upper: &UpperBody) -> LocalPose<f64> {
        let j = self.skel.joint_count;
        let mut rots = vec![Mat3::identity(); j];
        let inv = root_rot.transpose();
        let thigh = norm(self.skel.bone_offset[KNEES[0]]);
        let shin = norm(self.skel.bone_offset[ANKLES[0]]);
        for side in [LEFT, RIGHT] {
            let (target, yaw) = feet[side];
            let foot_rot = inv * Mat3::rot_y(yaw);
            let foot_local = inv.mul_vec(sub(target, root));
            let ankle = sub(foot_local, foot_rot.mul_vec(FOOT_OFFSET));
            let hip = self.skel.bone_offset[HIPS[side]];
            let d = sub(ankle, hip);
            let reach = norm(d).clamp(0.05, 0.999 * (thigh + shin));
            let u = normalize(d);
            let fwd = foot_rot.mul_vec([0.0, 0.0, 1.0]);
            let w = normalize(sub(fwd, scale(u, dot(fwd, u))));
            let cos_a = ((thigh * thigh + reach * reach - shin * shin) / (2.0 * thigh * reach)).clamp(-1.0, 1.0);
            let a = cos_a.acos();
            let thigh_dir = add(scale(u, a.cos()), scale(w, a.sin()));
            let knee = add(hip, scale(thigh_dir, thigh));
            let ankle_hit = add(hip, scale(u, reach));
            self.miss.set(self.miss.get().max(norm(sub(ankle_hit, ankle))));
            let shin_dir = normalize(sub(ankle_hit, knee));
            let r_hip = bone_frame(thigh_dir, fwd);
            let r_knee = bone_frame(shin_dir, fwd);
            rots[HIPS[side]] = r_hip;
            rots[KNEES[side]] = r_hip.transpose() * r_knee;
            rots[ANKLES[side]] = r_knee.transpose() * foot_rot;
        }
        let spine = Mat3::rot_x(upper.spine_pitch / 3.0) * Mat3::rot_z(upper.spine_roll / 3.0);
        for s in [3, 6, 9] {
            rots[s] = spine;
        }
        // head stays level
        rots[12] = Mat3::rot_x(upper.neck_pitch - upper.spine_pitch);
        for (side, (shoulder, elbow)) in [(16usize, 18usize), (17, 19)].into_iter().enumerate() {
            rots[shoulder] = Mat3::rot_x(-upper.arm_swing[side]);
            rots[elbow] = Mat3::rot_x(-upper.elbow[side]);
        }
        LocalPose { joint_rotations: rots.iter().map(|m| matrix_to_rot6d(m).expect("rotation")).collect() }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Generates one sequence of `family`.
pub fn generate_sequence(
    family: MotionFamily,
    cfg: &SyntheticMotionConfig,
    skel: &SkeletonConfig<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<MotionSequence> {
    let n = cfg.frames;
    let dt = 1.0 / cfg.fps;
    let duration = (n - 1) as f64 * dt;
    let depth = uniform(rng, cfg.depth);
    let lateral = rng.gen_range(-0.5..0.5);
    let builder = Builder { skel, miss: std::cell::Cell::new(0.0) };
    let mut frames = Vec::with_capacity(n);
    let mut poses = Vec::with_capacity(n);
    let mut contacts = Vec::with_capacity(n);
    match family {
        MotionFamily::StraightWalk | MotionFamily::TurningWalk => {
            let speed = uniform(rng, cfg.speed);
            let turn = if family == MotionFamily::TurningWalk {
                uniform(rng, cfg.turn_rate) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
            } else {
                0.0
            };
            let yaw0 = rng.gen_range(-PI..PI);
            let mut path = Path { start: [0.0; 3], yaw0, speed, turn };
            // centre the path in front of the camera
            let mid = path.at(duration / 2.0);
            path.start = [lateral - mid[0], 0.0, depth - mid[2]];
            let gait = Gait { path, cycle: uniform(rng, cfg.cycle), phase0: rng.gen_range(0.0..1.0) };
            let height = rng.gen_range(0.82..0.84);
            let arm = rng.gen_range(0.2..0.4);
            for i in 0..n {
                let t = i as f64 * dt;
                let phase = 2.0 * PI * (t / gait.cycle + gait.phase0);
                let yaw = path.yaw(t);
                let roll = 0.03 * phase.sin();
                let rot = Mat3::rot_y(yaw) * Mat3::rot_z(roll);
                let p = path.at(t);
                let root = [p[0], height - 0.015 * (2.0 * phase).cos(), p[2]];
                let (lp, ly, lc) = gait.foot(LEFT, t);
                let (rp, ry, rc) = gait.foot(RIGHT, t);
                let upper = UpperBody {
                    spine_pitch: 0.05,
                    spine_roll: -roll,
                    arm_swing: [-arm * phase.sin(), arm * phase.sin()],
                    elbow: [0.3 + 0.1 * phase.sin(), 0.3 - 0.1 * phase.sin()],
                    neck_pitch: 0.0,
                };
                poses.push(builder.pose(&rot, root, [(lp, ly), (rp, ry)], &upper));
                frames.push(TrajectoryFrame::from_matrix(&rot, root)?);
                contacts.push(vec![lc, rc]);
            }
        }
        MotionFamily::IdleSway => {
            let yaw = rng.gen_range(-PI..PI);
            let f = rng.gen_range(0.2..0.4);
            let amp = rng.gen_range(0.01..0.02);
            let ph = rng.gen_range(0.0..2.0 * PI);
            let centre = [lateral, 0.0, depth];
            let feet = [LEFT, RIGHT].map(|s| {
                let side = if s == LEFT { 1.0 } else { -1.0 };
                let p = add(centre, scale(left_of(yaw), side * HALF_STANCE_WIDTH));
                (add(p, scale(forward_of(yaw), 0.03)), yaw)
            });
            for i in 0..n {
                let t = i as f64 * dt;
                let w = 2.0 * PI * f * t + ph;
                let rot = Mat3::rot_y(yaw + 0.03 * w.sin()) * Mat3::rot_z(0.02 * w.sin());
                let side = scale(left_of(yaw), amp * w.sin());
                let root = add([centre[0], 0.9 + 0.005 * (2.0 * w).cos(), centre[2]], side);
                let upper = UpperBody {
                    spine_pitch: 0.03 * (0.7 * w).sin(),
                    spine_roll: -0.02 * w.sin(),
                    arm_swing: [0.05 * (0.8 * w).sin(), -0.05 * (0.8 * w).sin()],
                    elbow: [0.2, 0.2],
                    neck_pitch: 0.02 * (0.5 * w).sin(),
                };
                poses.push(builder.pose(&rot, root, feet, &upper));
                frames.push(TrajectoryFrame::from_matrix(&rot, root)?);
                contacts.push(vec![true, true]);
            }
        }
        MotionFamily::SitStand => {
            let yaw = rng.gen_range(-PI..PI);
            let period = rng.gen_range(2.5..4.0);
            let ph = rng.gen_range(0.0..1.0);
            let drop = rng.gen_range(0.3..0.42);
            let centre = [lateral, 0.0, depth];
            let feet = [LEFT, RIGHT].map(|s| {
                let side = if s == LEFT { 1.0 } else { -1.0 };
                (add(centre, scale(left_of(yaw), side * HALF_STANCE_WIDTH)), yaw)
            });
            for i in 0..n {
                let t = i as f64 * dt;
                let b = 0.5 - 0.5 * (2.0 * PI * (t / period + ph)).cos();
                let rot = Mat3::rot_y(yaw);
                let back = scale(forward_of(yaw), -0.05 - 0.25 * b);
                let root = add([centre[0], 0.9 - drop * b, centre[2]], back);
                let upper = UpperBody {
                    spine_pitch: 0.05 + 0.45 * b,
                    spine_roll: 0.0,
                    arm_swing: [0.4 * b, 0.4 * b],
                    elbow: [0.2 + 0.3 * b, 0.2 + 0.3 * b],
                    neck_pitch: 0.0,
                };
                poses.push(builder.pose(&rot, root, feet, &upper));
                frames.push(TrajectoryFrame::from_matrix(&rot, root)?);
                contacts.push(vec![true, true]);
            }
        }
    }
    if builder.miss.get() > 1e-9 {
        return Err(HarnessError::Config(format!("{family:?} leg target out of reach by {:.3} m", builder.miss.get())));
    }
    Ok(MotionSequence { name: String::new(), family: Some(family), fps: cfg.fps, traj: Trajectory::new(frames, cfg.fps), poses, contacts })
}

/// `cfg.num_sequences` sequences cycling through the families; deterministic per seed.
pub fn generate_dataset(cfg: &SyntheticMotionConfig, skel: &SkeletonConfig<f64>) -> Result<Vec<MotionSequence>> {
    cfg.validate()?;
    (0..cfg.num_sequences)
        .map(|i| {
            let family = cfg.families[i % cfg.families.len()];
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let mut s = generate_sequence(family, cfg, skel, &mut rng)?;
            s.name = format!("{}_{i:05}", family.name());
            Ok(s)
        })
        .collect()
}
