use nalgebra::Vector3;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_scene, Env, Perturbation, Task, EXEC_STEPS};
use crate::error::{Error, Result};
use crate::flow::sample_actions;
use crate::params::ParamStore;
use crate::perception::ActionChunk;
use crate::policy::{Model, Observation};

/// Anything that maps a batch of observations to action chunks.
///
/// `envs` exposes simulator state for oracle policies; learned policies
/// must only read `obs`. `rngs[i]` is the private stream of episode `i`.
pub trait ChunkPolicy {
    fn act(&mut self, envs: &[&Env], obs: &[Observation], rngs: &mut [ChaCha8Rng]) -> Result<Vec<ActionChunk>>;
}

/// A trained flow policy sampled with a fixed number of Euler steps.
#[derive(Clone, Copy, Debug)]
pub struct FlowPolicy<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub steps: usize,
}

impl ChunkPolicy for FlowPolicy<'_> {
    fn act(&mut self, _envs: &[&Env], obs: &[Observation], rngs: &mut [ChaCha8Rng]) -> Result<Vec<ActionChunk>> {
        sample_actions(self.model, self.store, obs, rngs, self.steps)
    }
}

/// Random displacements of up to 5 cm per axis and a coin-flip gripper.
#[derive(Clone, Debug)]
pub struct RandomPolicy {
    pub horizon: usize,
}

impl ChunkPolicy for RandomPolicy {
    fn act(&mut self, _envs: &[&Env], obs: &[Observation], rngs: &mut [ChaCha8Rng]) -> Result<Vec<ActionChunk>> {
        Ok(obs
            .iter()
            .zip(rngs.iter_mut())
            .map(|(o, rng)| {
                let mut s = o.proprio;
                let steps = (0..self.horizon)
                    .map(|_| {
                        let d = Vector3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                        s.position += d * 0.1;
                        s.gripper = if rng.random::<bool>() { 1.0 } else { 0.0 };
                        s
                    })
                    .collect();
                ActionChunk { steps }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub perturbation: String,
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_episode_length: f64,
    pub episode_seeds: Vec<u64>,
    pub outcomes: Vec<bool>,
    pub lengths: Vec<usize>,
}

/// Closed-loop evaluation. Episode `i` samples its scene from
/// `episode_seeds[i]`, then its perturbation; the policy receives a separate
/// stream from the same seed, so a given seed sees the same canonical scene
/// and the same sampler noise under every perturbation.
///
/// Each round the policy predicts one chunk per unfinished episode, and the
/// first [`EXEC_STEPS`] actions are executed, stopping early on success or
/// when the task's step budget is spent.
pub fn evaluate(
    policy: &mut dyn ChunkPolicy,
    task: Task,
    n_episodes: usize,
    perturbation: Perturbation,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::Validation("evaluation needs at least one episode".into()));
    }
    let budget = task.budget();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let episode_seeds: Vec<u64> = (0..n_episodes).map(|_| master.next_u64()).collect();
    let mut envs = Vec::with_capacity(n_episodes);
    let mut rngs = Vec::with_capacity(n_episodes);
    for &s in &episode_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let scene = sample_scene(task, &mut rng);
        let r = perturbation.rotation(&mut rng);
        envs.push(Env::new(scene.rotated(&r)));
        let mut policy_rng = ChaCha8Rng::seed_from_u64(s);
        policy_rng.set_stream(1);
        rngs.push(policy_rng);
    }
    let mut done = vec![false; n_episodes];
    let mut outcomes = vec![false; n_episodes];
    while done.iter().any(|d| !d) {
        let active: Vec<usize> = (0..n_episodes).filter(|&i| !done[i]).collect();
        let obs: Vec<Observation> = active.iter().map(|&i| envs[i].observe()).collect();
        let env_refs: Vec<&Env> = active.iter().map(|&i| &envs[i]).collect();
        let mut active_rngs: Vec<ChaCha8Rng> = active.iter().map(|&i| rngs[i].clone()).collect();
        let chunks = policy.act(&env_refs, &obs, &mut active_rngs)?;
        if chunks.len() != active.len() {
            return Err(Error::Shape(format!("policy returned {} chunks for {} episodes", chunks.len(), active.len())));
        }
        for ((&i, chunk), rng) in active.iter().zip(&chunks).zip(active_rngs) {
            rngs[i] = rng;
            let env = &mut envs[i];
            for a in chunk.steps.iter().take(EXEC_STEPS) {
                env.step(a);
                if env.success() {
                    outcomes[i] = true;
                    done[i] = true;
                    break;
                }
                if env.steps >= budget {
                    done[i] = true;
                    break;
                }
            }
            if chunk.steps.is_empty() {
                return Err(Error::Shape("policy returned an empty chunk".into()));
            }
        }
    }
    let lengths: Vec<usize> = envs.iter().map(|e| e.steps).collect();
    let successes = outcomes.iter().filter(|&&o| o).count();
    Ok(EvalReport {
        task,
        perturbation: perturbation.to_string(),
        episodes: n_episodes,
        successes,
        success_rate: successes as f64 / n_episodes as f64,
        mean_episode_length: lengths.iter().sum::<usize>() as f64 / n_episodes as f64,
        episode_seeds,
        outcomes,
        lengths,
    })
}
