mod common;

use common::{add_input, fill_params, max_rel_error, random_tensor, randomize, rng, tiny_mamba};
use lcmf::cmm::{CmmBlock, CmmLayerConfig, CrossBlock, Modality};
use lcmf::flops::{flops_attention, flops_cmm, layer_norm as ln_flops, mixer};
use lcmf::mamba::{mamba_preproc, BcProjection, MambaConfig, MambaMixer};
use lcmf::nn::LN_EPS;
use lcmf::scan::TransitionMode;
use lcmf::tape::{softplus, ScanArgs};
use lcmf::{Builder, Error, ParamStore, Tape, Tensor, Var};

fn block(cfg: CmmLayerConfig, seed: u64) -> (CmmBlock, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let b = CmmBlock::new(&mut Builder::new(&mut store, &mut r), "cmm", cfg).unwrap();
    (b, store)
}

fn mixer_with_store(cfg: MambaConfig, seed: u64) -> (MambaMixer, ParamStore) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let m = MambaMixer::new(&mut Builder::new(&mut store, &mut r), "mix", cfg).unwrap();
    (m, store)
}

fn value(t: &Tape, v: Var) -> Tensor {
    t.value(v).clone()
}

fn ln(t: &mut Tape, x: Var) -> Var {
    let d = t.shape(x)[1];
    let g = t.constant(Tensor::full(vec![d], 1.0));
    let b = t.constant(Tensor::zeros(vec![d]));
    t.layer_norm(x, g, b, LN_EPS).unwrap()
}

#[test]
fn preproc_with_zero_output_projection_is_identity() {
    let (m, mut store) = mixer_with_store(tiny_mamba(6, 3), 1);
    fill_params(&mut store, "mix.out_proj", 0.0);
    let x = random_tensor(&mut rng(2), &[9, 6], -1.0, 1.0);
    let mut t = Tape::inference(&store);
    let xv = t.constant(x.clone());
    let y = mamba_preproc(&mut t, &m, xv).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn preproc_single_step() {
    let (m, store) = mixer_with_store(tiny_mamba(4, 2), 3);
    let mut t = Tape::inference(&store);
    let x = t.constant(random_tensor(&mut rng(4), &[1, 4], -1.0, 1.0));
    let y = mamba_preproc(&mut t, &m, x).unwrap();
    assert_eq!(t.shape(y), &[1, 4]);
    assert!(t.value(y).data().iter().all(|v| v.is_finite()));
}

#[test]
fn preproc_matches_hand_composition() {
    let cfg = tiny_mamba(5, 3);
    let (m, store) = mixer_with_store(cfg, 5);
    let x = random_tensor(&mut rng(6), &[7, 5], -1.0, 1.0);
    let mut t = Tape::inference(&store);
    let xv = t.constant(x);
    let got = mamba_preproc(&mut t, &m, xv).unwrap();

    let p = |t: &mut Tape, name: &str| t.param(store.find(&format!("mix.{name}")).unwrap());
    let linear = |t: &mut Tape, x: Var, name: &str| {
        let w = p(t, &format!("{name}.weight"));
        let b = p(t, &format!("{name}.bias"));
        let y = t.matmul(x, w).unwrap();
        t.add_row(y, b).unwrap()
    };
    let conv = |t: &mut Tape, x: Var, name: &str| {
        let k = p(t, &format!("{name}.kernel"));
        let b = p(t, &format!("{name}.bias"));
        let y = t.conv1d(x, k, true).unwrap();
        t.add_row(y, b).unwrap()
    };
    let (g, b) = (p(&mut t, "norm.gain"), p(&mut t, "norm.bias"));
    let xn = t.layer_norm(xv, g, b, LN_EPS).unwrap();
    let u = linear(&mut t, xn, "in_proj");
    let u_ssm = t.slice_cols(u, 0, cfg.d_inner).unwrap();
    let u_conv = t.slice_cols(u, cfg.d_inner, cfg.d_inner).unwrap();
    let a = linear(&mut t, u_ssm, "a_proj");
    let a = t.sigmoid(a);
    let dt = linear(&mut t, u_ssm, "dt_proj");
    let dt = t.softplus(dt);
    let bc = |t: &mut Tape, w: &str, bias: &str, cv: &str| {
        let (w, bias) = (p(t, w), p(t, bias));
        let z = t.matmul(u_ssm, w).unwrap();
        let z = t.add_row(z, bias).unwrap();
        let z = conv(t, z, cv);
        t.silu(z)
    };
    let bm = bc(&mut t, "w_b", "b_b", "conv_b");
    let cm = bc(&mut t, "w_c", "b_c", "conv_c");
    let d_skip = p(&mut t, "d_skip");
    let y = t
        .selective_scan(
            ScanArgs {
                x: u_ssm,
                a,
                delta: dt,
                b: bm,
                c: cm,
                d_skip,
            },
            TransitionMode::Stable,
        )
        .unwrap();
    let gate = conv(&mut t, u_conv, "gate_conv");
    let gate = t.sigmoid(gate);
    let v = t.mul(y, gate).unwrap();
    let out = linear(&mut t, v, "out_proj");
    let want = t.add(xv, out).unwrap();
    assert_eq!(t.value(got), t.value(want));
}

#[test]
fn project_split_with_constructed_projection() {
    let cfg = MambaConfig {
        d_inner: 4,
        ..tiny_mamba(4, 2)
    };
    let (m, mut store) = mixer_with_store(cfg, 7);
    let w = store.find("mix.in_proj.weight").unwrap();
    let mut proj = Tensor::zeros(vec![4, 8]);
    for i in 0..4 {
        proj.data_mut()[i * 8 + i] = 1.0;
    }
    *store.value_mut(w) = proj;
    let x = random_tensor(&mut rng(8), &[5, 4], -2.0, 2.0);
    let mut t = Tape::inference(&store);
    let xv = t.constant(x);
    let (xn, u_ssm, u_conv) = m.branch.project_split(&mut t, xv).unwrap();
    let norm = ln(&mut t, xv);
    assert_eq!(t.value(u_ssm), t.value(norm));
    assert_eq!(t.value(xn), t.value(norm));
    assert!(t.value(u_conv).data().iter().all(|&v| v == 0.0));
}

#[test]
fn project_split_shapes_and_gradients() {
    let cfg = tiny_mamba(3, 2);
    let (m, mut store) = mixer_with_store(cfg, 9);
    let x = add_input(&mut store, "input", random_tensor(&mut rng(10), &[4, 3], -1.0, 1.0));
    {
        let mut t = Tape::inference(&store);
        let xv = t.param(x);
        let (_, a, b) = m.branch.project_split(&mut t, xv).unwrap();
        assert_eq!(t.shape(a), &[4, 6]);
        assert_eq!(t.shape(b), &[4, 6]);
    }
    for half in 0..2 {
        let err = max_rel_error(&mut store, 11, |t| {
            let xv = t.param(x);
            let (_, a, b) = m.branch.project_split(t, xv)?;
            Ok(if half == 0 { a } else { b })
        });
        assert!(err < 1e-4, "half {half}: {err:e}");
    }
    let grads = {
        let mut t = Tape::new(&store);
        let xv = t.param(x);
        let (_, a, b) = m.branch.project_split(&mut t, xv).unwrap();
        let s = t.concat_cols(&[a, b]).unwrap();
        let s = t.mul(s, s).unwrap();
        let l = t.sum(s);
        t.backward(l).unwrap()
    };
    let w = grads.param(store.find("mix.in_proj.weight").unwrap()).unwrap();
    // Columns 0..6 feed the scan branch, 6..12 the gate.
    let col_energy = |range: std::ops::Range<usize>| -> f64 {
        (0..3).flat_map(|r| range.clone().map(move |c| r * 12 + c)).map(|i| w[i].abs()).sum()
    };
    assert!(col_energy(0..6) > 0.0 && col_energy(6..12) > 0.0);
}

#[test]
fn alpha_follows_layer_index() {
    let m = tiny_mamba(4, 2);
    let alpha = |l| CmmLayerConfig::new(l, 4, m).unwrap().alpha();
    assert_eq!(alpha(1), 0.25);
    assert_eq!(alpha(4), 1.0);
    for l in 1..4 {
        assert!(alpha(l) < alpha(l + 1));
    }
    for total in 1..50 {
        assert_eq!(CmmLayerConfig::new(total, total, m).unwrap().alpha(), 1.0);
    }
    assert!(matches!(CmmLayerConfig::new(0, 4, m), Err(Error::Config(_))));
    assert!(matches!(CmmLayerConfig::new(5, 4, m), Err(Error::Config(_))));
    assert_eq!(CmmLayerConfig::with_extended_index(0, 4, m).unwrap().alpha(), 0.0);
}

fn bc_pair(seed: u64) -> (BcProjection, BcProjection, ParamStore) {
    let cfg = tiny_mamba(3, 2);
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let (cross, uni) = {
        let mut b = Builder::new(&mut store, &mut r);
        let cross = BcProjection::new(&mut b.sub("cross"), cfg, true).unwrap();
        let uni = BcProjection::new(&mut b.sub("uni"), cfg, false).unwrap();
        (cross, uni)
    };
    // The unimodal generator gets the host half of the shared weights.
    for name in ["w_b", "w_c"] {
        let full = store.value(store.find(&format!("cross.{name}")).unwrap()).clone();
        let upper = Tensor::new(vec![6, 2], full.data()[..12].to_vec()).unwrap();
        *store.value_mut(store.find(&format!("uni.{name}")).unwrap()) = upper;
    }
    for name in ["b_b", "b_c", "conv_b.kernel", "conv_b.bias", "conv_c.kernel", "conv_c.bias"] {
        let v = store.value(store.find(&format!("cross.{name}")).unwrap()).clone();
        *store.value_mut(store.find(&format!("uni.{name}")).unwrap()) = v;
    }
    (cross, uni, store)
}

#[test]
fn zero_interaction_is_unimodal() {
    let (cross, uni, store) = bc_pair(12);
    let u = random_tensor(&mut rng(13), &[5, 6], -1.0, 1.0);
    let mut t = Tape::inference(&store);
    let uv = t.constant(u);
    let (b0, c0) = cross.forward(&mut t, uv, None).unwrap();
    let (b1, c1) = uni.forward(&mut t, uv, None).unwrap();
    assert_eq!(t.value(b0), t.value(b1));
    assert_eq!(t.value(c0), t.value(c1));
}

#[test]
fn zero_summary_ignores_alpha() {
    let (cross, _, store) = bc_pair(14);
    let u = random_tensor(&mut rng(15), &[5, 6], -1.0, 1.0);
    let mut t = Tape::inference(&store);
    let uv = t.constant(u);
    let base = {
        let (b, c) = cross.forward(&mut t, uv, None).unwrap();
        (value(&t, b), value(&t, c))
    };
    for alpha in [0.25, 0.5, 1.0] {
        let zero = t.constant(Tensor::zeros(vec![1, 6]));
        let s = t.scale(zero, alpha);
        let (b, c) = cross.forward(&mut t, uv, Some(s)).unwrap();
        assert_eq!((value(&t, b), value(&t, c)), base);
    }
}

#[test]
fn zero_parameters_give_half_and_ln2() {
    let (m, mut store) = mixer_with_store(tiny_mamba(3, 2), 16);
    fill_params(&mut store, "mix.a_proj", 0.0);
    fill_params(&mut store, "mix.dt_proj", 0.0);
    let mut t = Tape::inference(&store);
    let u = t.constant(random_tensor(&mut rng(17), &[4, 6], -1.0, 1.0));
    let (a, dt) = m.branch.a_delta(&mut t, u).unwrap();
    assert!(t.value(a).data().iter().all(|&v| v == 0.5));
    assert!(t.value(dt).data().iter().all(|&v| v == std::f64::consts::LN_2));
}

#[test]
fn time_steps_are_positive() {
    let (m, mut store) = mixer_with_store(tiny_mamba(8, 2), 18);
    randomize(&mut store, 19, 3.0);
    let mut t = Tape::inference(&store);
    let u = t.constant(random_tensor(&mut rng(20), &[6250, 16], -4.0, 4.0));
    let (a, dt) = m.branch.a_delta(&mut t, u).unwrap();
    assert_eq!(t.value(dt).len(), 100_000);
    assert!(t.value(dt).data().iter().all(|&v| v > 0.0));
    assert!(t.value(a).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(softplus(-700.0) > 0.0);
}

/// Exchanges the per-modality parameters of block `cmm`.
fn swap_streams(store: &mut ParamStore) {
    let pairs: Vec<_> = store
        .iter()
        .filter_map(|(id, p)| {
            let rest = p.name().strip_prefix("cmm.visual.")?;
            Some((id, store.find(&format!("cmm.linguistic.{rest}")).unwrap()))
        })
        .collect();
    assert!(!pairs.is_empty());
    for (a, b) in pairs {
        let va = store.value(a).clone();
        let vb = std::mem::replace(store.value_mut(b), va);
        *store.value_mut(a) = vb;
    }
}

fn streams(seed: u64, tv: usize, tl: usize, d: usize) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    (random_tensor(&mut r, &[tv, d], -1.0, 1.0), random_tensor(&mut r, &[tl, d], -1.0, 1.0))
}

#[test]
fn mirrored_weights_give_mirrored_outputs() {
    let cfg = CmmLayerConfig::new(2, 3, tiny_mamba(4, 3)).unwrap();
    let (b, mut store) = block(cfg, 21);
    let (xv, xl) = streams(22, 6, 4, 4);
    let forward = |store: &ParamStore, a: &Tensor, c: &Tensor| {
        let mut t = Tape::inference(store);
        let (av, cv) = (t.constant(a.clone()), t.constant(c.clone()));
        let out = b.forward(&mut t, av, cv).unwrap();
        (value(&t, out.z_v), value(&t, out.z_l))
    };
    let (zv, zl) = forward(&store, &xv, &xl);
    swap_streams(&mut store);
    let (zv2, zl2) = forward(&store, &xl, &xv);
    assert_eq!(zv2, zl);
    assert_eq!(zl2, zv);
}

#[test]
fn zero_output_projections_reduce_to_double_layer_norm() {
    let cfg = CmmLayerConfig::new(1, 2, tiny_mamba(5, 2)).unwrap();
    let (b, mut store) = block(cfg, 23);
    for side in ["visual", "linguistic"] {
        fill_params(&mut store, &format!("cmm.{side}.out_proj"), 0.0);
        fill_params(&mut store, &format!("cmm.{side}.preproc.out_proj"), 0.0);
    }
    let (xv, xl) = streams(24, 7, 3, 5);
    let mut t = Tape::inference(&store);
    let (v, l) = (t.constant(xv), t.constant(xl));
    let out = b.forward(&mut t, v, l).unwrap();
    for (x, z) in [(v, out.z_v), (l, out.z_l)] {
        let once = ln(&mut t, x);
        let twice = ln(&mut t, once);
        assert_eq!(t.value(z), t.value(twice));
    }
}

#[test]
fn full_block_gradients() {
    for mode in [TransitionMode::Stable, TransitionMode::Literal] {
        let m = MambaConfig {
            mode,
            ..tiny_mamba(6, 2)
        };
        let cfg = CmmLayerConfig::new(1, 2, m).unwrap();
        let (b, mut store) = block(cfg, 25);
        randomize(&mut store, 26, 0.5);
        let (xv, xl) = streams(27, 4, 3, 6);
        let v = add_input(&mut store, "input.v", xv);
        let l = add_input(&mut store, "input.l", xl);
        let err = max_rel_error(&mut store, 28, |t| {
            let (vv, lv) = (t.param(v), t.param(l));
            let out = b.forward(t, vv, lv)?;
            t.concat_rows(&[out.z_v, out.z_l])
        });
        assert!(err < 1e-4, "{mode:?}: {err:e}");
    }
}

#[test]
fn zero_alpha_isolates_the_host_stream() {
    let cfg = CmmLayerConfig::with_extended_index(0, 3, tiny_mamba(4, 2)).unwrap();
    let (b, store) = block(cfg, 29);
    let (xv, xl) = streams(30, 5, 6, 4);
    let other = random_tensor(&mut rng(31), &[9, 4], -5.0, 5.0);
    let run = |l: &Tensor| {
        let mut t = Tape::inference(&store);
        let (v, lv) = (t.constant(xv.clone()), t.constant(l.clone()));
        let out = b.forward(&mut t, v, lv).unwrap();
        let host = b.forward_host(&mut t, Modality::Visual, v, lv).unwrap();
        (value(&t, out.z_v), value(&t, host))
    };
    let (a, ah) = run(&xl);
    let (c, ch) = run(&other);
    assert_eq!(a, c);
    assert_eq!(ah, ch);
    assert_eq!(a, ah);
}

#[test]
fn nonzero_alpha_does_mix_streams() {
    let cfg = CmmLayerConfig::new(3, 3, tiny_mamba(4, 2)).unwrap();
    let (b, store) = block(cfg, 32);
    let (xv, xl) = streams(33, 5, 6, 4);
    let run = |l: &Tensor| {
        let mut t = Tape::inference(&store);
        let (v, lv) = (t.constant(xv.clone()), t.constant(l.clone()));
        let z = b.forward(&mut t, v, lv).unwrap().z_v;
        value(&t, z)
    };
    assert!(run(&xl).max_abs_diff(&run(&xl.map(|x| x * x))) > 1e-6);
}

#[test]
fn stream_order_does_not_matter() {
    let cfg = CmmLayerConfig::new(1, 1, tiny_mamba(4, 3)).unwrap();
    let (b, store) = block(cfg, 34);
    let (xv, xl) = streams(35, 8, 5, 4);
    let mut t = Tape::inference(&store);
    let (v, l) = (t.constant(xv), t.constant(xl));
    let out = b.forward(&mut t, v, l).unwrap();
    let zl = b.forward_host(&mut t, Modality::Linguistic, l, v).unwrap();
    let zv = b.forward_host(&mut t, Modality::Visual, v, l).unwrap();
    assert_eq!(t.value(out.z_v), t.value(zv));
    assert_eq!(t.value(out.z_l), t.value(zl));
    assert_eq!(t.shape(out.z_v), &[8, 4]);
    assert_eq!(t.shape(out.z_l), &[5, 4]);
}

#[test]
fn empty_stream_falls_back_to_unimodal() {
    let cfg = CmmLayerConfig::new(2, 2, tiny_mamba(4, 2)).unwrap();
    let (b, store) = block(cfg, 36);
    let x = random_tensor(&mut rng(37), &[5, 4], -1.0, 1.0);
    let iso = CmmLayerConfig::with_extended_index(0, 2, tiny_mamba(4, 2)).unwrap();
    let mut t = Tape::inference(&store);
    let v = t.constant(x);
    let empty = t.constant(Tensor::zeros(vec![0, 4]));
    let out = b.forward(&mut t, v, empty).unwrap();
    assert_eq!(t.shape(out.z_l), &[0, 4]);
    let iso_block = CmmBlock { cfg: iso, ..b.clone() };
    let other = t.constant(Tensor::full(vec![3, 4], 2.0));
    let alone = iso_block.forward(&mut t, v, other).unwrap();
    assert_eq!(t.value(out.z_v), t.value(alone.z_v));
}

#[test]
fn width_mismatch_is_a_config_error() {
    let cfg = CmmLayerConfig::new(1, 1, tiny_mamba(4, 2)).unwrap();
    let (b, store) = block(cfg, 38);
    let mut t = Tape::inference(&store);
    let v = t.constant(Tensor::zeros(vec![3, 4]));
    let l = t.constant(Tensor::zeros(vec![3, 5]));
    assert!(matches!(b.forward(&mut t, v, l), Err(Error::Config(_))));
}

#[test]
fn ablated_block_is_layer_norm_per_stream() {
    let cfg = CmmLayerConfig::new(1, 1, tiny_mamba(4, 2)).unwrap();
    let mut store = ParamStore::new();
    let mut r = rng(39);
    let b = CrossBlock::new(&mut Builder::new(&mut store, &mut r), "x", cfg, true).unwrap();
    assert_eq!(store.num_elements(), 4 * 4);
    let (xv, xl) = streams(40, 3, 2, 4);
    let mut t = Tape::inference(&store);
    let (v, l) = (t.constant(xv), t.constant(xl));
    let out = b.forward(&mut t, v, l).unwrap();
    let (nv, nl) = (ln(&mut t, v), ln(&mut t, l));
    assert_eq!(t.value(out.z_v), t.value(nv));
    assert_eq!(t.value(out.z_l), t.value(nl));
}

#[test]
fn cmm_flops_are_linear() {
    let cfg = CmmLayerConfig::new(1, 1, MambaConfig::new(64)).unwrap();
    for (tv, tl) in [(1, 1), (100, 7), (2048, 2048), (512, 31)] {
        assert_eq!(flops_cmm(2 * tv, 2 * tl, &cfg), 2 * flops_cmm(tv, tl, &cfg));
    }
}

#[test]
fn cmm_flops_with_an_empty_stream_are_unimodal() {
    let m = MambaConfig::new(32);
    let cfg = CmmLayerConfig::new(2, 2, m).unwrap();
    for t in [1u64, 9, 300] {
        let d = m.d_model as u64;
        let unimodal = 2 * mixer(t, &m) + 2 * t * d + ln_flops(t, d);
        assert_eq!(flops_cmm(t, 0, &cfg), unimodal);
        assert_eq!(flops_cmm(0, t, &cfg), unimodal);
    }
}

#[test]
fn attention_overtakes_cmm_at_long_lengths() {
    let m = MambaConfig::new(256);
    let cfg = CmmLayerConfig::new(1, 1, m).unwrap();
    let ratio = |t: u64| flops_attention(t, 256, 4) as f64 / flops_cmm(t, t, &cfg) as f64;
    assert!(ratio(1 << 16) > 1.0);
    assert!(ratio(1 << 20) > 10.0);
    for t in [1024u64, 4096, 16384, 65536] {
        assert!(ratio(2 * t) > ratio(t));
    }
}

/// Ten-fold advantage at T = 4096, D = 256. Each stream runs two mixer
/// passes, so a CMM block costs roughly 29·D² per token of each stream while
/// attention costs about 4·T·D per token. At T = 4096 the ratio comes out
/// near 0.6 and only reaches 10 at roughly T = 64k. Kept as an honest record of
/// the unmet target.
#[test]
#[ignore = "unattainable with the implemented cost model; see the decision log"]
fn cmm_is_ten_times_cheaper_at_4096() {
    let cfg = CmmLayerConfig::new(1, 1, MambaConfig::new(256)).unwrap();
    let ratio = flops_attention(4096, 256, 4) as f64 / flops_cmm(4096, 4096, &cfg) as f64;
    assert!(ratio >= 10.0, "attention / cmm = {ratio:.3}");
}
