//! A small synthetic manipulation bench: scenes, a scripted expert, rigid
//! perturbations and a closed-loop evaluator.

mod dataset;
mod env;
mod eval;

pub use dataset::{
    generate_dataset, load_dataset, read_demos, save_dataset, training_samples, write_demos, DatasetManifest, Demo,
    DemoStep, DATASET_VERSION,
};
pub use env::{render_cloud, render_image, scripted_expert, Env, ExpertPolicy};
pub use eval::{evaluate, ChunkPolicy, EvalReport, FlowPolicy, RandomPolicy};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::so3::{random_rotation, Rotation};

/// Objects and the goal pad are placed uniformly on a disk of this radius (m).
pub const DISK_RADIUS: f64 = 0.2;
pub const OBJECT_RADIUS: f64 = 0.02;
pub const PAD_RADIUS: f64 = 0.03;
/// Minimum object-to-pad distance at scene creation (m).
pub const MIN_SEPARATION: f64 = 0.08;
/// Height of the end-effector start above the table, and its jitter (m).
pub const START_HEIGHT: f64 = 0.2;
pub const START_JITTER: f64 = 0.05;
/// Largest end-effector displacement per control step (m).
pub const MAX_STEP: f64 = 0.15;
/// Closing within this distance of the object grasps it (m).
pub const GRASP_RADIUS: f64 = 0.03;
pub const SUCCESS_THRESHOLD: f64 = 0.015;
/// Steps executed from each predicted chunk before re-planning.
pub const EXEC_STEPS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Reach,
    PickPlace,
}

impl Task {
    /// Default closed-loop step budget.
    pub fn budget(self) -> usize {
        match self {
            Task::Reach => 32,
            Task::PickPlace => 64,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Reach => "reach",
            Task::PickPlace => "pick-place",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reach" => Ok(Task::Reach),
            "pick-place" | "pick_place" => Ok(Task::PickPlace),
            _ => Err(Error::Validation(format!("unknown task '{s}' (expected reach or pick-place)"))),
        }
    }
}

/// A tabletop scene. Everything is expressed in the world frame; `frame`
/// records the rigid rotation that carried the canonical scene here.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub task: Task,
    pub object: Vector3<f64>,
    pub object_rot: Rotation,
    /// Centre of the goal pad.
    pub goal: Vector3<f64>,
    /// Table normal.
    pub up: Vector3<f64>,
    pub ee_start: Vector3<f64>,
    pub ee_rot: Rotation,
    pub frame: Rotation,
    pub workspace_radius: f64,
}

fn disk_point<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let r = DISK_RADIUS * rng.random::<f64>().sqrt();
    let phi = 2.0 * PI * rng.random::<f64>();
    Vector3::new(r * phi.cos(), r * phi.sin(), 0.0)
}

/// Samples a canonical scene: object and pad uniform on the disk, yaw-uniform
/// orientations, end-effector pointing down near the start height.
pub fn sample_scene<R: Rng + ?Sized>(task: Task, rng: &mut R) -> Scene {
    let object = disk_point(rng);
    let goal = loop {
        let g = disk_point(rng);
        if (g - object).norm() >= MIN_SEPARATION {
            break g;
        }
    };
    let object_rot = Rotation::about_z(2.0 * PI * rng.random::<f64>());
    let jitter = Vector3::new(
        rng.random_range(-START_JITTER..START_JITTER),
        rng.random_range(-START_JITTER..START_JITTER),
        rng.random_range(-START_JITTER..START_JITTER),
    );
    let ee_start = Vector3::new(0.0, 0.0, START_HEIGHT) + jitter;
    let ee_rot = Rotation::about_z(2.0 * PI * rng.random::<f64>()).compose(&Rotation::about_x(PI));
    Scene {
        task,
        object,
        object_rot,
        goal,
        up: Vector3::z(),
        ee_start,
        ee_rot,
        frame: Rotation::identity(),
        workspace_radius: DISK_RADIUS + START_JITTER + START_HEIGHT,
    }
}

impl Scene {
    /// Where the object centre (pick-place) or the end-effector (reach) must end up.
    pub fn target(&self) -> Vector3<f64> {
        self.goal + self.up * OBJECT_RADIUS
    }

    /// Rigid rotation of all scene content about the world origin.
    pub fn rotated(&self, r: &Rotation) -> Scene {
        Scene {
            task: self.task,
            object: r.apply(&self.object),
            object_rot: r.compose(&self.object_rot),
            goal: r.apply(&self.goal),
            up: r.apply(&self.up),
            ee_start: r.apply(&self.ee_start),
            ee_rot: r.compose(&self.ee_rot),
            frame: r.compose(&self.frame),
            workspace_radius: self.workspace_radius,
        }
    }
}

/// Rigid perturbation applied to a test scene.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "degrees", rename_all = "kebab-case")]
pub enum Perturbation {
    /// Rotation about the world z axis.
    Yaw(f64),
    /// Rotation about the world y axis.
    Tilt(f64),
    /// A fresh Haar-uniform rotation per episode.
    Haar,
}

impl Perturbation {
    pub const NONE: Perturbation = Perturbation::Yaw(0.0);

    /// The rotation for one episode; only `Haar` consumes randomness.
    pub fn rotation<R: Rng + ?Sized>(&self, rng: &mut R) -> Rotation {
        match *self {
            Perturbation::Yaw(d) => Rotation::about_z(d.to_radians()),
            Perturbation::Tilt(d) => Rotation::about_y(d.to_radians()),
            Perturbation::Haar => random_rotation(rng),
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Yaw(d) => write!(f, "yaw:{d}"),
            Perturbation::Tilt(d) => write!(f, "tilt:{d}"),
            Perturbation::Haar => f.write_str("haar"),
        }
    }
}

impl FromStr for Perturbation {
    type Err = Error;

    /// Accepts `none`, `haar`, `yaw:<deg>`, `tilt:<deg>`, and `yaw:haar` / `tilt:haar` as aliases of `haar`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("bad perturbation '{s}' (expected none, haar, yaw:<deg> or tilt:<deg>)"));
        match s {
            "none" => return Ok(Perturbation::NONE),
            "haar" => return Ok(Perturbation::Haar),
            _ => {}
        }
        let (mode, arg) = s.split_once(':').ok_or_else(bad)?;
        if arg == "haar" && (mode == "yaw" || mode == "tilt" || mode == "so3") {
            return Ok(Perturbation::Haar);
        }
        let deg: f64 = arg.parse().map_err(|_| bad())?;
        if !deg.is_finite() {
            return Err(bad());
        }
        match mode {
            "yaw" => Ok(Perturbation::Yaw(deg)),
            "tilt" => Ok(Perturbation::Tilt(deg)),
            _ => Err(bad()),
        }
    }
}

/// Applies a fixed-angle perturbation. `Haar` draws its rotation from `rng`.
pub fn perturb_scene<R: Rng + ?Sized>(scene: &Scene, p: Perturbation, rng: &mut R) -> Scene {
    scene.rotated(&p.rotation(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perturbation_parsing() {
        assert_eq!("yaw:0".parse::<Perturbation>().unwrap(), Perturbation::Yaw(0.0));
        assert_eq!("tilt:-10".parse::<Perturbation>().unwrap(), Perturbation::Tilt(-10.0));
        assert_eq!("yaw:haar".parse::<Perturbation>().unwrap(), Perturbation::Haar);
        assert!("roll:5".parse::<Perturbation>().is_err());
        assert!("yaw:abc".parse::<Perturbation>().is_err());
        for p in [Perturbation::Yaw(15.0), Perturbation::Tilt(10.0), Perturbation::Haar] {
            assert_eq!(p.to_string().parse::<Perturbation>().unwrap(), p);
        }
    }

    #[test]
    fn scenes_stay_inside_the_workspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let s = sample_scene(Task::PickPlace, &mut rng);
            assert!(s.object.norm() <= DISK_RADIUS && s.goal.norm() <= DISK_RADIUS);
            assert!(s.ee_start.norm() <= s.workspace_radius);
            assert!((s.goal - s.object).norm() >= MIN_SEPARATION);
        }
    }
}
