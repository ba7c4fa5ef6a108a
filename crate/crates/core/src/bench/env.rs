use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;

use super::eval::ChunkPolicy;
use super::{Demo, DemoStep, Scene, Task, GRASP_RADIUS, MAX_STEP, OBJECT_RADIUS, PAD_RADIUS, SUCCESS_THRESHOLD};
use crate::error::{Error, Result};
use crate::perception::{ActionChunk, Image, PointCloud, ProprioState, IMAGE_SIZE};
use crate::policy::Observation;
use crate::so3::Rotation;

/// Fraction of the remaining distance the expert covers per step.
const EXPERT_GAIN: f64 = 0.35;
/// Within this distance the expert lands exactly on its aim and toggles the gripper.
const SNAP: f64 = 0.01;
/// Half-width of the gripper camera's orthographic view (m).
const CAMERA_EXTENT: f64 = 0.3;

const TABLE_COLOR: [f64; 3] = [0.5, 0.5, 0.5];
const OBJECT_COLOR: [f64; 3] = [0.9, 0.1, 0.1];
const PAD_COLOR: [f64; 3] = [0.1, 0.8, 0.2];

fn icosahedron() -> [Vector3<f64>; 12] {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v = [Vector3::zeros(); 12];
    let mut k = 0;
    for s1 in [-1.0, 1.0] {
        for s2 in [-1.0, 1.0] {
            v[k] = Vector3::new(0.0, s1, s2 * phi);
            v[k + 1] = Vector3::new(s1, s2 * phi, 0.0);
            v[k + 2] = Vector3::new(s2 * phi, 0.0, s1);
            k += 3;
        }
    }
    v.map(|p| p.normalize())
}

fn ring(n: usize, radius: f64, phase: f64) -> impl Iterator<Item = Vector3<f64>> {
    (0..n).map(move |i| {
        let a = phase + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        Vector3::new(radius * a.cos(), radius * a.sin(), 0.0)
    })
}

fn cloud_at(scene: &Scene, object: &Vector3<f64>, object_rot: &Rotation) -> PointCloud {
    let mut points = Vec::with_capacity(40);
    let mut colors = Vec::with_capacity(40);
    for p in ring(8, 0.08, 0.0).chain(ring(8, 0.18, std::f64::consts::PI / 8.0)) {
        points.push(scene.frame.apply(&p));
        colors.push(TABLE_COLOR);
    }
    for d in icosahedron() {
        points.push(object + object_rot.apply(&(d * OBJECT_RADIUS)));
        colors.push(OBJECT_COLOR);
    }
    for p in ring(12, PAD_RADIUS, 0.0) {
        points.push(scene.goal + scene.frame.apply(&p));
        colors.push(PAD_COLOR);
    }
    PointCloud::new(points, colors).expect("finite scene geometry")
}

/// Point cloud of the scene in its initial state: 16 table, 12 object and 12 pad points.
pub fn render_cloud(scene: &Scene) -> PointCloud {
    cloud_at(scene, &scene.object, &scene.object_rot)
}

/// Orthographic view of `cloud` from a camera fixed to the gripper, looking
/// along its z axis. Nearer points overwrite farther ones.
pub fn render_image(cloud: &PointCloud, ee: &Vector3<f64>, ee_rot: &Rotation) -> Image {
    let mut img = Image::zeros(IMAGE_SIZE, IMAGE_SIZE);
    let mut depth = vec![f64::INFINITY; IMAGE_SIZE * IMAGE_SIZE];
    let inv = ee_rot.inverse();
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        let q = inv.apply(&(p - ee));
        let u = ((q.x / CAMERA_EXTENT + 1.0) * 0.5 * IMAGE_SIZE as f64).floor();
        let v = ((q.y / CAMERA_EXTENT + 1.0) * 0.5 * IMAGE_SIZE as f64).floor();
        if q.z <= 0.0 || !(0.0..IMAGE_SIZE as f64).contains(&u) || !(0.0..IMAGE_SIZE as f64).contains(&v) {
            continue;
        }
        let (x, y) = (u as usize, v as usize);
        let k = y * IMAGE_SIZE + x;
        if q.z < depth[k] {
            depth[k] = q.z;
            for (ch, &val) in c.iter().enumerate() {
                img.set(y, x, ch, val as f32);
            }
        }
    }
    img
}

/// Kinematic tabletop world. The end-effector moves toward each commanded
/// position by at most [`MAX_STEP`]; a grasped object moves rigidly with it.
#[derive(Clone, Debug)]
pub struct Env {
    pub scene: Scene,
    pub ee: Vector3<f64>,
    pub ee_rot: Rotation,
    /// 0 open, 1 closed.
    pub gripper: f64,
    pub object: Vector3<f64>,
    pub object_rot: Rotation,
    pub grasped: bool,
    grasp_offset: Vector3<f64>,
    pub steps: usize,
}

impl Env {
    pub fn new(scene: Scene) -> Self {
        Env {
            ee: scene.ee_start,
            ee_rot: scene.ee_rot,
            gripper: 0.0,
            object: scene.object,
            object_rot: scene.object_rot,
            grasped: false,
            grasp_offset: Vector3::zeros(),
            steps: 0,
            scene,
        }
    }

    pub fn cloud(&self) -> PointCloud {
        cloud_at(&self.scene, &self.object, &self.object_rot)
    }

    pub fn proprio(&self) -> ProprioState {
        ProprioState::from_rotation(self.ee, &self.ee_rot, self.gripper)
    }

    pub fn observe(&self) -> Observation {
        let cloud = self.cloud();
        let image = render_image(&cloud, &self.ee, &self.ee_rot);
        Observation { cloud, image, proprio: self.proprio() }
    }

    pub fn step(&mut self, a: &ProprioState) {
        let mut d = a.position - self.ee;
        let n = d.norm();
        if n > MAX_STEP {
            d *= MAX_STEP / n;
        }
        if d.iter().all(|x| x.is_finite()) {
            self.ee += d;
        }
        if let Ok(r) = a.rotation() {
            self.ee_rot = r;
        }
        if self.grasped {
            self.object = self.ee + self.grasp_offset;
        }
        let close = a.gripper > 0.5;
        if close && self.gripper < 0.5 && (self.object - self.ee).norm() <= GRASP_RADIUS {
            self.grasped = true;
            self.grasp_offset = self.object - self.ee;
        }
        if !close {
            self.grasped = false;
        }
        self.gripper = if close { 1.0 } else { 0.0 };
        self.steps += 1;
    }

    pub fn success(&self) -> bool {
        let target = self.scene.target();
        let open = self.gripper < 0.5;
        match self.scene.task {
            Task::Reach => open && (self.ee - target).norm() <= SUCCESS_THRESHOLD,
            Task::PickPlace => open && !self.grasped && (self.object - target).norm() <= SUCCESS_THRESHOLD,
        }
    }

    /// The scripted expert's next command. Depends only on the current state.
    pub fn expert_action(&self) -> ProprioState {
        let target = self.scene.target();
        let (aim, toggle_closed, hold_closed) = match self.scene.task {
            Task::Reach => (target, false, false),
            Task::PickPlace if self.grasped => (target - self.grasp_offset, false, true),
            Task::PickPlace if (self.object - target).norm() <= SNAP => (self.ee, false, false),
            Task::PickPlace => (self.object, true, false),
        };
        let d = aim - self.ee;
        let n = d.norm();
        let (next, arrived) = if n <= SNAP {
            (aim, true)
        } else {
            let step = if EXPERT_GAIN * n > MAX_STEP { d * (MAX_STEP / n) } else { d * EXPERT_GAIN };
            (self.ee + step, false)
        };
        let closed = if arrived { toggle_closed } else { hold_closed };
        ProprioState::from_rotation(next, &self.scene.ee_rot, if closed { 1.0 } else { 0.0 })
    }

    /// True once the expert would hold still with the task solved.
    pub fn settled(&self) -> bool {
        let a = self.expert_action();
        self.success() && (a.position - self.ee).norm() <= 1e-12 && (a.gripper - self.gripper).abs() < 0.5
    }
}

/// Rolls the scripted expert out to completion, recording every step.
pub fn scripted_expert(scene: &Scene) -> Result<Demo> {
    let mut env = Env::new(scene.clone());
    let limit = 4 * scene.task.budget();
    let mut steps = Vec::new();
    while !env.settled() {
        if env.steps >= limit {
            return Err(Error::Generation(format!(
                "expert did not finish the {} task within {limit} steps",
                scene.task
            )));
        }
        let obs = env.observe();
        let action = env.expert_action();
        env.step(&action);
        steps.push(DemoStep { obs, action });
    }
    if steps.is_empty() {
        return Err(Error::Generation("scene is solved before the first step".into()));
    }
    Ok(Demo { task: scene.task, steps, success: true })
}

/// Oracle chunk policy: simulates the expert ahead on a copy of each environment.
#[derive(Clone, Debug)]
pub struct ExpertPolicy {
    pub horizon: usize,
}

impl ChunkPolicy for ExpertPolicy {
    fn act(&mut self, envs: &[&Env], _obs: &[Observation], _rngs: &mut [ChaCha8Rng]) -> Result<Vec<ActionChunk>> {
        Ok(envs
            .iter()
            .map(|env| {
                let mut sim = (*env).clone();
                let steps = (0..self.horizon)
                    .map(|_| {
                        let a = sim.expert_action();
                        sim.step(&a);
                        a
                    })
                    .collect();
                ActionChunk { steps }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::sample_scene;
    use rand::SeedableRng;

    #[test]
    fn expert_lands_exactly_on_the_goal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for task in [Task::Reach, Task::PickPlace] {
            for _ in 0..50 {
                let scene = sample_scene(task, &mut rng);
                let demo = scripted_expert(&scene).unwrap();
                assert!(demo.success);
                assert!(demo.steps.len() <= task.budget(), "{task}: {} steps", demo.steps.len());
                let mut env = Env::new(scene.clone());
                for s in &demo.steps {
                    env.step(&s.action);
                }
                let end = match task {
                    Task::Reach => env.ee,
                    Task::PickPlace => env.object,
                };
                assert!((end - scene.target()).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn icosahedron_is_unit_and_centred() {
        let v = icosahedron();
        let mean: Vector3<f64> = v.iter().sum::<Vector3<f64>>() / 12.0;
        assert!(mean.norm() < 1e-15);
        assert!(v.iter().all(|p| (p.norm() - 1.0).abs() < 1e-15));
    }
}
