//! Acceptance checks, one test per criterion. Each writes a single
//! `[criterion NN] PASS|FAIL ...` line straight to stdout so the line
//! survives the test harness capture, then asserts.
//!
//! Criteria 6 to 9 share trained policies; each is trained once per process.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use equiflow::bench::{evaluate, generate_dataset, sample_scene, training_samples, Env, FlowPolicy, Perturbation, Task};
use equiflow::config::{ModelKind, RunConfig};
use equiflow::equivcheck::{policy_chunk_check, run_check};
use equiflow::flow::*;
use equiflow::gradcheck;
use equiflow::params::ParamStore;
use equiflow::policy::{prepare, EquiPolicyConfig, Model, ModelConfig, PreparedObs, ACTION_SIG};
use equiflow::so3::{IrrepSeq, Signature};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "[criterion {id:02}] {verdict} {detail}").unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {id} failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn pts(rate: f64) -> f64 {
    100.0 * rate
}

// ---------------------------------------------------------------------------
// Property suites

#[test]
fn criterion_01_representation_theory() {
    let start = Instant::now();
    let reports: Vec<_> = ["wigner", "sh"].iter().map(|c| run_check(c, 500, 1).unwrap()).collect();
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_violation).fold(0.0, f64::max);
    let pass = worst <= 1e-8 && secs < 10.0;
    report(1, pass, &format!("500 cases each, max violation {worst:.2e} (tol 1e-8), {secs:.2}s (limit 10s)"));
}

#[test]
fn criterion_02_layer_equivariance() {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for check in ["equi_linear", "gate", "temporal_conv", "efilm", "fem_fuse", "equi_unet"] {
        let r = run_check(check, 100, 2).unwrap();
        pass &= r.relative && r.max_violation <= 1e-6;
        parts.push(format!("{check} {:.1e}", r.max_violation));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    report(2, pass, &format!("100 cases each, relative tol 1e-6: {}; {secs:.1}s (limit 60s)", parts.join(", ")));
}

#[test]
fn criterion_03_efilm_identity() {
    let r = run_check("efilm_identity", 200, 3).unwrap();
    report(3, r.max_violation <= 1e-8, &format!("200 tuples, max violation {:.2e} (tol 1e-8)", r.max_violation));
}

#[test]
fn criterion_04_gradients() {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for op in gradcheck::OPS {
        let linear = matches!(*op, "equi_linear" | "time_ops");
        let tol = if linear { 1e-7 } else { 1e-4 };
        let r = gradcheck::run(op, 4).unwrap();
        pass &= r.max_rel_error <= tol;
        parts.push(format!("{op} {:.1e}/{tol:.0e}", r.max_rel_error));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 300.0;
    report(4, pass, &format!("{}; {secs:.1}s (limit 300s)", parts.join(", ")));
}

// ---------------------------------------------------------------------------
// Rectified flow

fn constant_field_error() -> f64 {
    let mut r = rng(50);
    let mut worst = 0.0f64;
    for steps in [1, 2, 3, 7, 10, 100] {
        let x0 = sample_source(ACTION_SIG, 16, &mut r);
        let c = sample_source(ACTION_SIG, 16, &mut r);
        let got = euler_integrate(&ConstantVelocity(c.clone()), &x0, steps).unwrap();
        let want = x0.add(&c).unwrap();
        let scale = x0.flatten().iter().zip(c.flatten()).map(|(a, b)| a.abs() + b.abs()).fold(0.0, f64::max);
        // In units of accumulated rounding: one ulp of the operand scale per step.
        worst = worst.max(got.max_abs_diff(&want) / (steps as f64 * f64::EPSILON * scale));
    }
    worst
}

fn two_point_error() -> f64 {
    let mut r = rng(51);
    let sig = Signature::new(1, 2, 0);
    let targets = [sample_source(sig, 2, &mut r), sample_source(sig, 2, &mut r)];
    let sources: Vec<IrrepSeq> = (0..4).map(|_| sample_source(sig, 2, &mut r)).collect();
    let mut samples = Vec::new();
    for a in &targets {
        for x0 in &sources {
            for t in [0.0, 0.2, 0.4, 0.6, 0.8] {
                samples.push(make_path_sample(x0.clone(), a.clone(), t).unwrap());
            }
        }
    }
    // Closed form: the mean target velocity over the grid.
    let n = samples[0].v_star.num_coefficients();
    let mut oracle = vec![0.0; n];
    for s in &samples {
        for (o, v) in oracle.iter_mut().zip(s.v_star.flatten()) {
            *o += v / samples.len() as f64;
        }
    }
    let field_of = |c: &[f64]| {
        let mut f = IrrepSeq::zeros(sig, 2);
        let mut it = c.iter();
        for l in 0..3 {
            f.block_mut(l).iter_mut().for_each(|x| *x = *it.next().unwrap());
        }
        ConstantVelocity(f)
    };
    let loss = |c: &[f64]| rf_loss_field(&field_of(c), &samples).unwrap();
    // The loss is quadratic and separable, so one Newton sweep is exact up to rounding.
    let mut c = vec![0.0; n];
    for _ in 0..2 {
        for k in 0..n {
            let (mut up, mut dn) = (c.clone(), c.clone());
            up[k] += 1e-2;
            dn[k] -= 1e-2;
            let (lp, l0, lm) = (loss(&up), loss(&c), loss(&dn));
            c[k] -= 1e-2 * (lp - lm) / (2.0 * (lp - 2.0 * l0 + lm));
        }
    }
    c.iter().zip(&oracle).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
}

/// Steps until the loss on one demo's fixed path samples drops below 1e-3.
fn memorization() -> (Option<usize>, f64, f64) {
    let (demos, _) = generate_dataset(Task::PickPlace, 1, 3).unwrap();
    let data = training_samples(&demos, 16).unwrap();
    let (model, mut store) = Model::build(&ModelConfig::Equivariant(EquiPolicyConfig::default()), 0).unwrap();
    let mut r = rng(52);
    let samples: Vec<FlowPathSample> = data
        .iter()
        .map(|d| {
            let x0 = sample_source(ACTION_SIG, d.target.len(), &mut r);
            make_path_sample(x0, d.target.clone(), r.random_range(0.0..1.0)).unwrap()
        })
        .collect();
    let obs: Vec<&PreparedObs> = data.iter().map(|d| &d.obs).collect();
    let mut opt = AdamW::new(&store, 0.0);
    let start = Instant::now();
    let mut best = f64::INFINITY;
    for step in 0..=2000 {
        let lg = rf_loss(&model, &store, &obs, &samples).unwrap();
        best = best.min(lg.loss);
        if lg.loss < 1e-3 {
            return (Some(step), lg.loss, start.elapsed().as_secs_f64());
        }
        if step < 2000 {
            opt.step(&mut store, &lg.grads, 5e-3);
        }
    }
    (None, best, start.elapsed().as_secs_f64())
}

#[test]
fn criterion_05_rectified_flow() {
    let a = constant_field_error();
    let b = two_point_error();
    let (steps, loss, secs) = memorization();
    let pass_a = a <= 4.0;
    let pass_b = b <= 1e-6;
    let pass_c = steps.is_some() && secs < 600.0;
    let c_text = match steps {
        Some(s) => format!("loss {loss:.2e} after {s} steps in {secs:.1}s"),
        None => format!("best loss {loss:.2e} in 2000 steps, {secs:.1}s"),
    };
    report(
        5,
        pass_a && pass_b && pass_c,
        &format!(
            "(a) constant field error {a:.2} ulp-steps (limit 4); (b) two-point minimiser off by {b:.1e} (tol 1e-6); (c) {c_text} (need < 1e-3 within 2000 steps, 600s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Trained policies

struct Trained {
    model: Model,
    ema: ParamStore,
    cfg: RunConfig,
    train_seconds: f64,
}

impl Trained {
    fn eval(&self, episodes: usize, p: Perturbation, steps: usize) -> f64 {
        let mut policy = FlowPolicy { model: &self.model, store: &self.ema, steps };
        evaluate(&mut policy, self.cfg.task, episodes, p, self.cfg.eval_seed).unwrap().success_rate
    }
}

fn fit(cfg: RunConfig) -> Trained {
    let start = Instant::now();
    let (demos, _) = generate_dataset(cfg.task, cfg.n_demos, cfg.data_seed).unwrap();
    let data = training_samples(&demos, cfg.horizon).unwrap();
    let (model, init) = Model::build(&cfg.model_config(), cfg.seed).unwrap();
    let out = train(&model, init, &data, &cfg.train_config(), |_| {}).unwrap();
    Trained { model, ema: out.ema, cfg, train_seconds: start.elapsed().as_secs_f64() }
}

fn run_config(task: Task, model: ModelKind, n_demos: usize) -> RunConfig {
    RunConfig { task, model, n_demos, ..Default::default() }
}

fn pick_place(n_demos: usize) -> &'static Trained {
    static P25: OnceLock<Trained> = OnceLock::new();
    static P50: OnceLock<Trained> = OnceLock::new();
    static P100: OnceLock<Trained> = OnceLock::new();
    let cell = match n_demos {
        25 => &P25,
        50 => &P50,
        100 => &P100,
        _ => unreachable!(),
    };
    cell.get_or_init(|| fit(run_config(Task::PickPlace, ModelKind::Equivariant, n_demos)))
}

fn pick_place_mlp() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| fit(run_config(Task::PickPlace, ModelKind::MlpBaseline, 100)))
}

fn reach(kind: ModelKind) -> &'static Trained {
    static EQUI: OnceLock<Trained> = OnceLock::new();
    static MLP: OnceLock<Trained> = OnceLock::new();
    let cell = if kind == ModelKind::Equivariant { &EQUI } else { &MLP };
    cell.get_or_init(|| fit(run_config(Task::Reach, kind, 100)))
}

#[test]
fn criterion_06_end_to_end_equivariance() {
    let t = pick_place(100);
    let chunk = policy_chunk_check(&t.model, &t.ema, 20, t.cfg.sampler_steps, false, 6).unwrap();
    let canonical = pts(t.eval(50, Perturbation::NONE, t.cfg.sampler_steps));
    let haar = pts(t.eval(50, Perturbation::Haar, t.cfg.sampler_steps));
    let gap = (haar - canonical).abs();
    let pass = chunk.max_violation <= 1e-5 && gap <= 5.0;
    report(
        6,
        pass,
        &format!(
            "pick-place chunk violation {:.1e} (tol 1e-5, 20 scenes); success canonical {canonical:.0}% vs haar {haar:.0}%, gap {gap:.0} pts (limit 5, 50 episodes)",
            chunk.max_violation
        ),
    );
}

#[test]
fn criterion_07_rotation_robustness() {
    let start = Instant::now();
    let (equi, mlp) = (reach(ModelKind::Equivariant), reach(ModelKind::MlpBaseline));
    let steps = equi.cfg.sampler_steps;
    let rate = |t: &Trained, p| pts(t.eval(50, p, steps));
    let (e0, eh, et) = (rate(equi, Perturbation::NONE), rate(equi, Perturbation::Haar), rate(equi, Perturbation::Tilt(10.0)));
    let (m0, mh, mt) = (rate(mlp, Perturbation::NONE), rate(mlp, Perturbation::Haar), rate(mlp, Perturbation::Tilt(10.0)));
    let elapsed = start.elapsed().as_secs_f64();
    // Training may have happened in this test or in another one sharing the model.
    let runtime = elapsed.max(equi.train_seconds + mlp.train_seconds);
    let retained = eh.min(et) >= 0.8 * e0;
    let dropped = m0 - mh >= 30.0;
    let pass = retained && dropped && e0 > 0.0 && runtime < 1800.0;
    report(
        7,
        pass,
        &format!(
            "reach, 50 episodes: equivariant {e0:.0}% -> haar {eh:.0}% / tilt {et:.0}% (need >= 80% retained); mlp {m0:.0}% -> haar {mh:.0}% / tilt {mt:.0}% (need haar drop >= 30 pts); {runtime:.0}s (limit 1800s)"
        ),
    );
}

#[test]
fn criterion_08_step_sweep() {
    let t = pick_place(100);
    let steps = [1, 2, 3, 5, 10];
    let rates: Vec<f64> = steps.iter().map(|&n| pts(t.eval(100, Perturbation::NONE, n))).collect();
    let monotone = rates.windows(2).all(|w| w[1] >= w[0] - 3.0);
    let pass = rates[4] >= rates[0] && monotone;
    let row: Vec<String> = steps.iter().zip(&rates).map(|(n, r)| format!("{n}:{r:.0}%")).collect();
    report(8, pass, &format!("pick-place, 100 episodes per setting: {} (10 >= 1 and non-decreasing within 3 pts)", row.join(" ")));
}

#[test]
fn criterion_09_demo_scaling() {
    let counts = [25, 50, 100];
    let rates: Vec<f64> = counts.iter().map(|&n| pts(pick_place(n).eval(100, Perturbation::Haar, 10))).collect();
    let mlp = pts(pick_place_mlp().eval(100, Perturbation::Haar, 10));
    let monotone = rates.windows(2).all(|w| w[1] >= w[0] - 3.0);
    let pass = monotone && rates[1] >= mlp;
    report(
        9,
        pass,
        &format!(
            "pick-place under haar, 100 episodes: equivariant 25/50/100 demos {:.0}/{:.0}/{:.0}% (non-decreasing within 3 pts); mlp at 100 demos {mlp:.0}% (equivariant at 50 must be >=)",
            rates[0], rates[1], rates[2]
        ),
    );
}

fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0);
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

#[test]
fn criterion_10_sampler_cost() {
    let (model, store) = Model::build(&ModelConfig::Equivariant(EquiPolicyConfig { zero_head: false, ..Default::default() }), 10).unwrap();
    let mut r = rng(10);
    let prepared: Vec<PreparedObs> =
        (0..8).map(|_| prepare(&Env::new(sample_scene(Task::PickPlace, &mut r)).observe()).unwrap()).collect();
    let obs: Vec<&PreparedObs> = prepared.iter().collect();
    let sources: Vec<IrrepSeq> = (0..8).map(|_| sample_source(ACTION_SIG, model.horizon(), &mut r)).collect();
    let cost = |steps| {
        let t = time_sampler(&model, &store, &obs, &sources, steps, 50, &thread_cpu_seconds).unwrap();
        t.condition + t.integrate
    };
    cost(1);
    let one = cost(1);
    let mut pass = true;
    let mut row = Vec::new();
    for k in [2, 3, 5, 10] {
        let ratio = cost(k) / (k as f64 * one);
        pass &= (0.7..=1.3).contains(&ratio);
        row.push(format!("{k}:{ratio:.2}"));
    }
    report(
        10,
        pass,
        &format!("one step {:.2} ms for a batch of 8; cost(k) / (k * cost(1)) = {} (need within 0.7..1.3)", one * 1e3, row.join(" ")),
    );
}

#[test]
fn criterion_11_reproducibility() {
    let base = RunConfig { task: Task::Reach, n_demos: 4, epochs: 3, batch_size: 16, probe_size: 16, eval_episodes: 5, ..Default::default() };
    let resolved = RunConfig::from_toml(&base.to_toml()).unwrap();
    let run = |cfg: &RunConfig| {
        let mut records = Vec::new();
        let (demos, _) = generate_dataset(cfg.task, cfg.n_demos, cfg.data_seed).unwrap();
        let data = training_samples(&demos, cfg.horizon).unwrap();
        let (model, init) = Model::build(&cfg.model_config(), cfg.seed).unwrap();
        let out = train(&model, init, &data, &cfg.train_config(), |r| records.push(serde_json::to_string(r).unwrap())).unwrap();
        let mut policy = FlowPolicy { model: &model, store: &out.ema, steps: cfg.sampler_steps };
        let eval = evaluate(&mut policy, cfg.task, cfg.eval_episodes, cfg.perturbation().unwrap(), cfg.eval_seed).unwrap();
        (records.join("\n"), serde_json::to_string(&eval).unwrap())
    };
    let (a, b) = (run(&base), run(&resolved));
    let pass = a == b && !a.0.is_empty();
    report(11, pass, &format!("two runs from one resolved config: metrics identical {}, eval reports identical {}", a.0 == b.0, a.1 == b.1));
}
