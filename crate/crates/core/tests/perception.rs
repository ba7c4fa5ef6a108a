use equiflow::bench::{sample_scene, Env, Task};
use equiflow::nn::EquiLinearParams;
use equiflow::perception::*;
use equiflow::policy::{prepare, CondValues, EquiPolicyConfig, Model, ModelConfig, Observation};
use equiflow::so3::*;
use nalgebra::Vector3;
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn cloud(r: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let points = (0..n).map(|_| Vector3::new(r.random_range(-0.2..0.2), r.random_range(-0.2..0.2), r.random_range(0.0..0.1))).collect();
    let colors = (0..n).map(|_| [r.random(), r.random(), r.random()]).collect();
    PointCloud::new(points, colors).unwrap()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn encoder_params(seed: u64) -> EquiLinearParams {
    let out = Signature::new(8 + 4 + 2, 4, 2);
    EquiLinearParams::random(expansion_signature(), out, true, &mut rng(seed))
}

fn state(r: &mut ChaCha8Rng) -> ProprioState {
    let rot = random_rotation(r);
    let p = Vector3::new(r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), r.random_range(0.0..0.3));
    ProprioState::from_rotation(p, &rot, r.random())
}

#[test]
fn normalisation_examples() {
    let mut r = rng(1);
    let p = Vector3::new(0.3, -0.1, 0.2);
    let (c, m) = normalize_cloud(&PointCloud::new(vec![p], vec![[0.0; 3]]).unwrap());
    assert_eq!(c.points[0], Vector3::zeros());
    assert_eq!(m, p);
    for _ in 0..20 {
        let pc = cloud(&mut r, 15);
        let (c0, m0) = normalize_cloud(&pc);
        let t = Vector3::new(r.random(), r.random(), r.random());
        let (c1, m1) = normalize_cloud(&pc.translated(&t));
        assert!(c0.points.iter().zip(&c1.points).all(|(a, b)| (a - b).norm() < 1e-12));
        assert!((m1 - m0 - t).norm() < 1e-12);
        let rot = random_rotation(&mut r);
        let (c2, _) = normalize_cloud(&pc.rotated(&rot));
        assert!(c0.points.iter().zip(&c2.points).all(|(a, b)| (rot.apply(a) - b).norm() < 1e-12));
    }
    assert!(PointCloud::new(vec![], vec![]).is_err());
    assert!(PointCloud::new(vec![Vector3::new(f64::NAN, 0.0, 0.0)], vec![[0.0; 3]]).is_err());
}

#[test]
fn origin_point_has_no_directional_content() {
    let pc = PointCloud::new(vec![Vector3::zeros()], vec![[0.4, 0.2, 0.9]]).unwrap();
    let f = encode_point_cloud(&pc, &encoder_params(2)).unwrap();
    assert!(f.block(1).iter().chain(f.block(2)).all(|&x| x == 0.0));
    let e = cloud_expansion(&pc);
    assert!(e.block(1).iter().chain(e.block(2)).all(|&x| x == 0.0));
    assert!(e.block(0).iter().any(|&x| x != 0.0));
}

#[test]
fn point_order_does_not_matter() {
    let mut r = rng(3);
    let p = encoder_params(3);
    for _ in 0..10 {
        let pc = cloud(&mut r, 30);
        let mut idx: Vec<usize> = (0..30).collect();
        idx.shuffle(&mut r);
        let shuffled = PointCloud::new(idx.iter().map(|&i| pc.points[i]).collect(), idx.iter().map(|&i| pc.colors[i]).collect()).unwrap();
        let (a, b) = (encode_point_cloud(&pc, &p).unwrap(), encode_point_cloud(&shuffled, &p).unwrap());
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cloud_encoder_commutes(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (centered, _) = normalize_cloud(&cloud(&mut r, 20));
        let p = encoder_params(seed ^ 7);
        let rot = random_rotation(&mut r);
        let d = wigner_blocks(&rot, 2).unwrap();
        let a = encode_point_cloud(&centered.rotated(&rot), &p).unwrap();
        let b = apply_rotation(&encode_point_cloud(&centered, &p).unwrap(), &d).unwrap();
        prop_assert!(rel(&a.flatten(), &b.flatten()) < 1e-6);
    }

    #[test]
    fn rotated_state_embeds_rotated(seed in any::<u64>()) {
        let mut r = rng(seed);
        let s = state(&mut r);
        let rot = random_rotation(&mut r);
        let d = wigner_blocks(&rot, 2).unwrap();
        let a = embed_proprio(&s.rotated(&rot), &Vector3::zeros()).unwrap();
        let b = apply_rotation(&embed_proprio(&s, &Vector3::zeros()).unwrap(), &d).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        let t = Vector3::new(r.random(), r.random(), r.random());
        let c = Vector3::new(r.random(), r.random(), r.random());
        let mut moved = s;
        moved.position += t;
        prop_assert!(embed_proprio(&moved, &(c + t)).unwrap().max_abs_diff(&embed_proprio(&s, &c).unwrap()) < 1e-12);
    }

    #[test]
    fn chunk_round_trip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let chunk = ActionChunk { steps: (0..16).map(|_| state(&mut r)).collect() };
        let c = Vector3::new(r.random(), r.random(), r.random());
        let emb = embed_action_chunk(&chunk, &c).unwrap();
        let back = decode_action_chunk(&emb, &c).unwrap();
        for (a, b) in chunk.steps.iter().zip(&back.steps) {
            prop_assert!((a.position - b.position).norm() < 1e-10);
            prop_assert!((a.gripper - b.gripper).abs() < 1e-10);
            prop_assert!((a.rot_a - b.rot_a).norm() < 1e-6 && (a.rot_b - b.rot_b).norm() < 1e-6);
        }
        let rot = random_rotation(&mut r);
        let d = wigner_blocks(&rot, 2).unwrap();
        let a = embed_action_chunk(&chunk.rotated(&rot), &Vector3::zeros()).unwrap();
        let b = apply_rotation_seq(&embed_action_chunk(&chunk, &Vector3::zeros()).unwrap(), &d).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-8);
    }
}

#[test]
fn proprio_examples() {
    let s = ProprioState { position: Vector3::zeros(), rot_a: Vector3::zeros(), rot_b: Vector3::zeros(), gripper: 0.5 };
    assert!(embed_proprio(&s, &Vector3::zeros()).is_err());
    let mut f = IrrepFeature::zeros(PROPRIO_SIG);
    f.block_mut(0)[[0, 0]] = 0.5;
    let seq = IrrepSeq::from_frames(&[f]).unwrap();
    let back = decode_action_chunk(&seq, &Vector3::zeros()).unwrap();
    assert_eq!(back.steps[0].gripper, 0.5);
    assert_eq!(back.steps[0].position, Vector3::zeros());

    let c = Vector3::new(0.1, -0.2, 0.05);
    let zero = decode_action_chunk(&IrrepSeq::zeros(PROPRIO_SIG, 4), &c).unwrap();
    assert!(zero.steps.iter().all(|s| s.position == c));
    assert!(decode_action_chunk(&IrrepSeq::zeros(Signature::new(1, 2, 0), 4), &c).is_err());
}

fn random_image(r: &mut ChaCha8Rng) -> Image {
    let mut img = Image::zeros(IMAGE_SIZE, IMAGE_SIZE);
    for v in img.data.iter_mut() {
        *v = r.random();
    }
    img
}

#[test]
fn image_encoder_examples() {
    let mut r = rng(5);
    let p = ImageEncoderParams {
        w: Array2::from_shape_fn((PATCH_FEATURES, 16), |_| r.random_range(-1.0..1.0)),
        b: Array2::from_shape_fn((1, 16), |_| r.random_range(-1.0..1.0)),
    };
    let zero = encode_image(&Image::zeros(IMAGE_SIZE, IMAGE_SIZE), &p).unwrap();
    assert_eq!(zero.n_tokens(), N_IMAGE_TOKENS);
    for row in zero.tokens().rows() {
        assert_eq!(row, p.b.row(0));
    }
    let img = random_image(&mut r);
    assert_eq!(encode_image(&img, &p).unwrap(), encode_image(&img, &p).unwrap());
    let base = encode_image(&img, &p).unwrap();
    let half = IMAGE_SIZE / 2;
    for (q, (y, x)) in [(3, 2), (5, half + 3), (half + 1, 7), (half + 4, half + 9)].into_iter().enumerate() {
        let mut other = img.clone();
        other.set(y, x, 1, 1.0 - img.get(y, x, 1));
        let t = encode_image(&other, &p).unwrap();
        for k in 0..N_IMAGE_TOKENS {
            let changed = t.tokens().row(k) != base.tokens().row(k);
            assert_eq!(changed, k == q, "quadrant {q}, token {k}");
        }
    }
    assert!(encode_image(&Image::zeros(16, 16), &p).is_err());
}

fn encode(model: &Model, store: &equiflow::params::ParamStore, obs: &Observation) -> Vec<f64> {
    let prepared = prepare(obs).unwrap();
    match model.condition(store, &[&prepared]).unwrap() {
        CondValues::Equi(b, 1) => IrrepFeature::new(b).unwrap().flatten(),
        other => panic!("unexpected conditioning {other:?}"),
    }
}

#[test]
fn observation_encoder_is_translation_invariant_and_rotation_equivariant() {
    let (model, store) = Model::build(&ModelConfig::Equivariant(EquiPolicyConfig::default()), 11).unwrap();
    let mut r = rng(6);
    let mut worst: (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let task = if r.random() { Task::Reach } else { Task::PickPlace };
        let obs = Env::new(sample_scene(task, &mut r)).observe();
        let base = encode(&model, &store, &obs);
        let t = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let mut moved = obs.clone();
        moved.cloud = obs.cloud.translated(&t);
        moved.proprio.position += t;
        worst.0 = worst.0.max(rel(&encode(&model, &store, &moved), &base));
        for _ in 0..20 {
            let rot = random_rotation(&mut r);
            let d = wigner_blocks(&rot, 2).unwrap();
            let turned = Observation { cloud: obs.cloud.rotated(&rot), image: obs.image.clone(), proprio: obs.proprio.rotated(&rot) };
            let prepared = prepare(&obs).unwrap();
            let CondValues::Equi(b, _) = model.condition(&store, &[&prepared]).unwrap() else { unreachable!() };
            let expect = apply_rotation(&IrrepFeature::new(b).unwrap(), &d).unwrap().flatten();
            worst.1 = worst.1.max(rel(&encode(&model, &store, &turned), &expect));
        }
    }
    assert!(worst.0 < 1e-6, "translation {}", worst.0);
    assert!(worst.1 < 1e-6, "rotation {}", worst.1);
}
