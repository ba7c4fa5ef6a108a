use equiflow::nn::*;
use equiflow::params::ParamStore;
use equiflow::policy::{EquiPolicyConfig, Model, ModelConfig};
use equiflow::so3::*;
use equiflow::tape::Padding;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn blocks(seed: u64) -> WignerBlocks {
    wigner_blocks(&random_rotation(&mut rng(seed)), 2).unwrap()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn unet_cfg(zero_head: bool) -> UNetConfig {
    UNetConfig {
        horizon: 8,
        action_sig: Signature::new(1, 3, 0),
        cond_sig: Signature::new(3, 2, 1),
        time_dim: 4,
        widths: vec![Signature::new(4, 2, 1), Signature::new(5, 2, 2), Signature::new(6, 3, 2)],
        radius: 2,
        factor: 2,
        padding: Padding::Replicate,
        pos_channels: 2,
        zero_head,
    }
}

#[test]
fn identity_weights_leave_features_unchanged() {
    let sig = Signature::new(3, 2, 4);
    let f = IrrepFeature::random(sig, &mut rng(1));
    assert!(equi_linear(&f, &EquiLinearParams::identity(sig)).unwrap().max_abs_diff(&f) < 1e-15);
}

#[test]
fn scalar_weight_doubles_vector_block() {
    let sig = Signature::new(0, 1, 0);
    let f = IrrepFeature::random(sig, &mut rng(2));
    let p = EquiLinearParams {
        weights: [Array2::zeros((0, 0)), Array2::from_elem((1, 1), 2.0), Array2::zeros((0, 0))],
        bias: None,
    };
    let out = equi_linear(&f, &p).unwrap();
    assert!(out.max_abs_diff(&f.scale(2.0)) < 1e-15);
}

#[test]
fn signature_mismatch_is_an_error() {
    let f = IrrepFeature::random(Signature::new(2, 2, 0), &mut rng(3));
    let p = EquiLinearParams::identity(Signature::new(2, 3, 0));
    assert!(equi_linear(&f, &p).is_err());
}

#[test]
fn temporal_impulse_response_is_the_kernel() {
    let sig = Signature::new(1, 1, 1);
    let mut p = TemporalConvParams::random(sig, sig, 3, Padding::Zero, &mut rng(4));
    p.bias = None;
    let len = 6;
    for l in 0..3 {
        for m in 0..degree_dim(l) {
            let mut seq = IrrepSeq::zeros(sig, len);
            seq.block_mut(l)[[0, m]] = 1.0;
            let out = spherical_temporal_conv(&seq, &p).unwrap();
            for t in 0..len {
                let expect = if t <= 3 { p.weights[l][t][[0, 0]] } else { 0.0 };
                let got = out.block(l)[[0, t * degree_dim(l) + m]];
                assert!((got - expect).abs() < 1e-15, "l={l} m={m} t={t}");
            }
        }
    }
}

#[test]
fn zero_radius_identity_mixing_is_identity() {
    let sig = Signature::new(2, 3, 1);
    let p = TemporalConvParams {
        weights: std::array::from_fn(|l| vec![Array2::eye(sig.0[l])]),
        bias: None,
        padding: Padding::Replicate,
    };
    let seq = IrrepSeq::random(sig, 5, &mut rng(5));
    assert!(spherical_temporal_conv(&seq, &p).unwrap().max_abs_diff(&seq) < 1e-15);
    assert!(spherical_temporal_conv(&IrrepSeq::zeros(sig, 0), &p).is_err());
}

#[test]
fn conv_weights_have_no_coefficient_index() {
    let (a, b) = (Signature::new(3, 2, 4), Signature::new(5, 1, 2));
    let p = TemporalConvParams::random(a, b, 2, Padding::Replicate, &mut rng(6));
    for l in 0..3 {
        assert_eq!(p.weights[l].len(), 3);
        for w in &p.weights[l] {
            assert_eq!(w.dim(), (b.0[l], a.0[l]));
        }
    }
    let (model, store) = Model::build(&ModelConfig::Equivariant(EquiPolicyConfig::default()), 0).unwrap();
    drop(model);
    let mut lagged = 0;
    for (key, v) in store.iter() {
        if let Some((stem, _)) = key.split_once(".lag") {
            let first = store.get(&format!("{stem}.lag0")).unwrap();
            assert_eq!(v.dim(), first.dim(), "{key}");
            lagged += 1;
        }
    }
    assert!(lagged > 0);
}

#[test]
fn efilm_examples() {
    let sig = Signature::new(2, 3, 2);
    let mut r = rng(7);
    let h = IrrepFeature::random(sig, &mut r);
    let mut unit = h.clone();
    for l in 0..3 {
        let w = degree_dim(l);
        let b = unit.block_mut(l);
        for mut row in b.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|x| x / n);
        }
        assert_eq!(b.ncols(), w);
    }
    let out = efilm(&h, &unit, &IrrepFeature::zeros(sig)).unwrap();
    assert!(out.max_abs_diff(&h) < 1e-12);

    let gamma = IrrepFeature::random(sig, &mut r);
    let beta = IrrepFeature::random(sig, &mut r);
    let out = efilm(&IrrepFeature::zeros(sig), &gamma, &beta).unwrap();
    assert!(out.max_abs_diff(&beta) < 1e-15);
    assert!(efilm(&h, &IrrepFeature::zeros(Signature::new(2, 3, 1)), &beta).is_err());
}

#[test]
fn gate_saturation() {
    let sig = Signature::new(3, 2, 1);
    let mut f = IrrepFeature::random(sig, &mut rng(8));
    for v in f.block_mut(0).iter_mut() {
        *v = 60.0;
    }
    let open = gated_nonlinearity(&f).unwrap();
    assert!((open.block(1) - f.block(1)).iter().all(|x| x.abs() < 1e-6));
    assert!((open.block(2) - f.block(2)).iter().all(|x| x.abs() < 1e-6));
    for v in f.block_mut(0).iter_mut() {
        *v = -60.0;
    }
    let shut = gated_nonlinearity(&f).unwrap();
    assert!(shut.block(1).iter().chain(shut.block(2)).all(|x| x.abs() < 1e-6));
    assert!(gated_nonlinearity(&IrrepFeature::random(Signature::new(2, 2, 1), &mut rng(9))).is_err());
}

#[test]
fn time_embedding_examples() {
    let e0 = time_embedding_values(0.0, 8);
    assert_eq!(&e0[..4], &[0.0; 4]);
    assert_eq!(&e0[4..], &[1.0; 4]);
    assert_eq!(time_embedding_values(0.37, 16), time_embedding_values(0.37, 16));
    let grid: Vec<Vec<f64>> = (0..=64).map(|k| time_embedding_values(k as f64 / 64.0, 16)).collect();
    for i in 0..grid.len() {
        for j in i + 1..grid.len() {
            let d: f64 = grid[i].iter().zip(&grid[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(d >= 1e-6, "t={} vs t={}", i, j);
        }
    }
    assert_eq!(time_embedding_values(1.5, 8), time_embedding_values(1.0, 8));
    assert_eq!(time_embedding(0.2, 6).signature(), Signature::new(6, 0, 0));
}

#[test]
fn unet_shapes_and_zero_head() {
    let cfg = unet_cfg(true);
    assert_eq!(cfg.bottleneck_len(), 2);
    let mut store = ParamStore::new();
    let net = EquiUNet::new(&mut store, "u", cfg.clone(), &mut rng(10)).unwrap();
    let x = IrrepSeq::random(cfg.action_sig, 8, &mut rng(11));
    let c = IrrepFeature::random(cfg.cond_sig, &mut rng(12));
    let v = net.forward_value(&store, &x, 0.4, &c).unwrap();
    assert_eq!((v.signature(), v.len()), (x.signature(), x.len()));
    assert!(v.flatten().iter().all(|&z| z == 0.0));
    assert!(net.forward_value(&store, &IrrepSeq::random(cfg.action_sig, 4, &mut rng(1)), 0.4, &c).is_err());
    assert!(net.forward_value(&store, &x, 0.4, &IrrepFeature::random(Signature::new(3, 1, 1), &mut rng(1))).is_err());

    let mut store = ParamStore::new();
    let cfg = unet_cfg(false);
    let net = EquiUNet::new(&mut store, "u", cfg, &mut rng(10)).unwrap();
    let v = net.forward_value(&store, &x, 0.4, &c).unwrap();
    assert_eq!((v.signature(), v.len()), (x.signature(), x.len()));
    assert!(v.norm() > 0.0);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (_, store) = Model::build(&ModelConfig::Equivariant(EquiPolicyConfig::default()), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.bin");
    store.save(&path).unwrap();
    let back = ParamStore::load(&path).unwrap();
    assert!(store.bit_equal(&back));
    let mut fresh = Model::build(&ModelConfig::Equivariant(EquiPolicyConfig::default()), 4).unwrap().1;
    fresh.load_from(&back).unwrap();
    assert!(fresh.bit_equal(&store));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn equi_linear_commutes(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = EquiLinearParams::random(Signature::new(3, 4, 2), Signature::new(2, 3, 5), true, &mut r);
        let f = IrrepFeature::random(Signature::new(3, 4, 2), &mut r);
        let d = blocks(seed ^ 1);
        let a = equi_linear(&apply_rotation(&f, &d).unwrap(), &p).unwrap();
        let b = apply_rotation(&equi_linear(&f, &p).unwrap(), &d).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-10);
    }

    #[test]
    fn gate_commutes(seed in any::<u64>()) {
        let f = IrrepFeature::random(Signature::new(6, 3, 2), &mut rng(seed));
        let d = blocks(seed ^ 2);
        let a = gated_nonlinearity(&apply_rotation(&f, &d).unwrap()).unwrap();
        let b = apply_rotation(&gated_nonlinearity(&f).unwrap(), &d).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-8);
    }

    #[test]
    fn temporal_conv_commutes(seed in any::<u64>()) {
        let mut r = rng(seed);
        let p = TemporalConvParams::random(Signature::new(2, 3, 2), Signature::new(3, 2, 2), 2, Padding::Replicate, &mut r);
        let x = IrrepSeq::random(Signature::new(2, 3, 2), 7, &mut r);
        let d = blocks(seed ^ 3);
        let a = spherical_temporal_conv(&apply_rotation_seq(&x, &d).unwrap(), &p).unwrap();
        let b = spherical_temporal_conv(&x, &p).unwrap();
        let back = apply_rotation_seq(&a, &wigner_blocks(&inverse_of(seed ^ 3), 2).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&b) < 1e-10);
        prop_assert!(rel(&a.flatten(), &apply_rotation_seq(&b, &d).unwrap().flatten()) < 1e-6);
    }

    #[test]
    fn efilm_commutes(seed in any::<u64>()) {
        let mut r = rng(seed);
        let sig = Signature::new(2, 3, 2);
        let (h, g, b) = (IrrepFeature::random(sig, &mut r), IrrepFeature::random(sig, &mut r), IrrepFeature::random(sig, &mut r));
        let d = blocks(seed ^ 4);
        let rot = |f: &IrrepFeature| apply_rotation(f, &d).unwrap();
        let a = efilm(&rot(&h), &rot(&g), &rot(&b)).unwrap();
        let e = rot(&efilm(&h, &g, &b).unwrap());
        prop_assert!(a.max_abs_diff(&e) < 1e-8);
    }

    #[test]
    fn unet_commutes(seed in any::<u64>()) {
        let cfg = unet_cfg(false);
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let net = EquiUNet::new(&mut store, "u", cfg.clone(), &mut r).unwrap();
        let x = IrrepSeq::random(cfg.action_sig, cfg.horizon, &mut r);
        let c = IrrepFeature::random(cfg.cond_sig, &mut r);
        let d = blocks(seed ^ 5);
        let t = (seed % 1000) as f64 / 999.0;
        let a = net.forward_value(&store, &apply_rotation_seq(&x, &d).unwrap(), t, &apply_rotation(&c, &d).unwrap()).unwrap();
        let b = apply_rotation_seq(&net.forward_value(&store, &x, t, &c).unwrap(), &d).unwrap();
        prop_assert!(rel(&a.flatten(), &b.flatten()) < 1e-6);
    }
}

fn inverse_of(seed: u64) -> Rotation {
    random_rotation(&mut rng(seed)).inverse()
}
