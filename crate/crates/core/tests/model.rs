use fyh::loss::{DalConfig, NetworkLoss};
use fyh::model::{argmax_classes, build_dianet, padded_size, DianetConfig, ModelError, BN_EPS};
use fyh::tensor::{
    analytic_grads, grad_check, write_checkpoint, GradCheckConfig, Graph, ParamStore, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> DianetConfig {
    DianetConfig {
        base_width: 2,
        iam_reduction: 2,
        ..Default::default()
    }
}

fn random_input(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_labels(seed: u64, n: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..11u8)).collect()
}

/// Closed-form count of trainable entries.
fn expected_params(cfg: &DianetConfig) -> usize {
    let unit = |cin: usize, cout: usize, k: usize| cout * cin * k * k + 2 * cout;
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let w = |b: usize| cfg.base_width << b;
    let mut total = unit(cfg.in_channels, w(0), 3) + unit(w(0), w(0), 3);
    for s in 0..4 {
        if s > 0 {
            total += unit(w(s - 1), w(s), 3);
        }
        for b in 0..=s {
            total += cfg.stage_depth * unit(w(b), w(b), 3);
            if cfg.use_iam {
                let mid = w(b) / cfg.iam_reduction;
                total += conv(w(b), mid, 1) + conv(mid, w(b), 1) + conv(2, 1, 7);
            }
        }
        for i in 0..=s {
            for j in 0..=s {
                if j > i {
                    total += unit(w(j), w(i), 1);
                } else if j < i {
                    total += (i - j - 1) * unit(w(j), w(j), 3) + unit(w(j), w(i), 3);
                }
            }
        }
    }
    total + conv(15 * cfg.base_width, cfg.num_classes, 1)
}

#[test]
fn parameter_count_follows_formula() {
    for width in [8, 16] {
        let cfg = DianetConfig {
            base_width: width,
            ..Default::default()
        };
        let (_, p) = build_dianet::<f32>(&cfg, 0).unwrap();
        assert_eq!(p.trainable_numel(), expected_params(&cfg), "C = {width}");
        // Each conv unit also stores a running mean and variance per channel.
        let buffers: usize = p
            .iter()
            .filter(|(n, _)| n.ends_with(".running_mean") || n.ends_with(".running_var"))
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(p.numel() - p.trainable_numel(), buffers);
        let stem = p.get("stem.1.weight").unwrap();
        assert_eq!(stem.shape, [width, width, 3, 3]);
    }
    let no_iam = DianetConfig {
        use_iam: false,
        ..Default::default()
    };
    let (_, p) = build_dianet::<f32>(&no_iam, 0).unwrap();
    assert_eq!(p.trainable_numel(), expected_params(&no_iam));
    assert!(p.names().iter().all(|n| !n.contains("iam")));
}

#[test]
fn same_seed_same_checkpoint() {
    let bytes = |seed| {
        let (_, p) = build_dianet::<f32>(&DianetConfig::default(), seed).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &serde_json::json!({}), &p).unwrap();
        buf
    };
    assert_eq!(bytes(5), bytes(5));
    assert_ne!(bytes(5), bytes(6));
}

#[test]
fn init_scheme() {
    let (_, p) = build_dianet::<f32>(&DianetConfig::default(), 1).unwrap();
    for (name, t) in p.iter() {
        if name.ends_with(".scale") || name.ends_with(".running_var") {
            assert!(t.data.iter().all(|v| *v == 1.0), "{name}");
        } else if name.ends_with(".shift")
            || name.ends_with(".bias")
            || name.ends_with(".running_mean")
        {
            assert!(t.data.iter().all(|v| *v == 0.0), "{name}");
        } else {
            let fan_in = (t.shape[1] * t.shape[2] * t.shape[3]) as f32;
            let bound = (6.0 / fan_in).sqrt();
            assert!(t.data.iter().all(|v| v.abs() <= bound), "{name}");
            if name.ends_with("squeeze.weight") {
                assert!(t.data.iter().all(|v| *v >= 0.0), "{name}");
            }
        }
    }
}

#[test]
fn invalid_configs() {
    for cfg in [
        DianetConfig {
            base_width: 1,
            ..Default::default()
        },
        DianetConfig {
            base_width: 6,
            ..Default::default()
        },
        DianetConfig {
            stage_depth: 0,
            ..Default::default()
        },
    ] {
        assert!(matches!(
            build_dianet::<f32>(&cfg, 0),
            Err(ModelError::InvalidConfig(_))
        ));
    }
}

#[test]
fn output_shape_contract() {
    let (net, p) = build_dianet::<f32>(&tiny(), 0).unwrap();
    for (h, w) in [(32, 32), (20, 12), (9, 17)] {
        let x = random_input(1, [1, 14, h, w]).cast::<f32>();
        let y = net.predict(&p, &x).unwrap();
        assert_eq!(y.shape, [1, 11, h, w]);
    }
    assert_eq!(padded_size(100), 104);
    assert_eq!(padded_size(104), 104);
    assert_eq!(padded_size(1), 8);
    let bad = random_input(1, [1, 13, 8, 8]).cast::<f32>();
    assert!(net.predict(&p, &bad).is_err());
}

#[test]
fn zero_head_gives_uniform_softmax_and_class_zero() {
    let (net, mut p) = build_dianet::<f32>(&tiny(), 0).unwrap();
    let (w, b) = net.head_slots();
    for slot in [w, b] {
        p.tensors_mut()[slot].data.fill(0.0);
    }
    let x = random_input(2, [2, 14, 16, 16]).cast::<f32>();
    let y = net.predict(&p, &x).unwrap();
    assert!(y.data.iter().all(|v| *v == 0.0));
    assert!(argmax_classes(&y).iter().all(|c| *c == 0));
    let mut g = Graph::<f32>::new();
    let l = g.input(y);
    let ce = g.softmax_ce_map(l, &vec![3; 512], 255).unwrap();
    assert!(ce
        .prob_correct
        .iter()
        .all(|p| (p - 1.0 / 11.0).abs() < 1e-7));
}

/// Runs stage-1 attention on `x` with the gate biases set to `bias`.
fn attention_with_bias(bias: f64) -> (Tensor<f64>, Tensor<f64>) {
    let (net, mut p) = build_dianet::<f64>(&tiny(), 3).unwrap();
    let (excite, spatial) = net.attention_bias_slots(0, 0).unwrap();
    p.tensors_mut()[excite].data.fill(bias);
    p.tensors_mut()[spatial].data.fill(bias);
    let x = random_input(4, [1, 2, 6, 5]);
    let mut g = Graph::new();
    let vars = p.bind_frozen(&mut g);
    let xv = g.input(x.clone());
    let y = net.attention(&mut g, &vars, 0, 0, xv).unwrap();
    (x, g.value(y).clone())
}

#[test]
fn attention_saturated_gates() {
    let (x, open) = attention_with_bias(60.0);
    for (a, b) in x.data.iter().zip(&open.data) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
    let (x, shut) = attention_with_bias(-60.0);
    for (a, b) in x.data.iter().zip(&shut.data) {
        assert!((a - b).abs() < 1e-12);
    }
}

/// Attention recomputed with plain loops over the raw parameters.
#[test]
fn attention_matches_loop_oracle() {
    let cfg = DianetConfig {
        base_width: 4,
        iam_reduction: 2,
        ..Default::default()
    };
    let (net, p) = build_dianet::<f64>(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = p;
    for t in p.tensors_mut() {
        for v in &mut t.data {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let get = |n: &str| p.get(&format!("stage1.iam0.{n}")).unwrap().data.clone();
    let (sq_w, sq_b, ex_w, ex_b, sp_w, sp_b) = (
        get("squeeze.weight"),
        get("squeeze.bias"),
        get("excite.weight"),
        get("excite.bias"),
        get("spatial.weight"),
        get("spatial.bias"),
    );
    let (c, h, w) = (4, 7, 9);
    let x = random_input(12, [1, c, h, w]);
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());

    let gap: Vec<f64> = (0..c)
        .map(|ch| x.data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect();
    let mid = c / 2;
    let hidden: Vec<f64> = (0..mid)
        .map(|m| (sq_b[m] + (0..c).map(|ch| sq_w[m * c + ch] * gap[ch]).sum::<f64>()).max(0.0))
        .collect();
    let gate_c: Vec<f64> = (0..c)
        .map(|ch| {
            sig(ex_b[ch]
                + (0..mid)
                    .map(|m| ex_w[ch * mid + m] * hidden[m])
                    .sum::<f64>())
        })
        .collect();
    let xc = |ch: usize, y: usize, x_: usize| x.data[(ch * h + y) * w + x_] * gate_c[ch];
    let mut stats = vec![[0.0; 2]; h * w];
    for y in 0..h {
        for x_ in 0..w {
            let vals: Vec<f64> = (0..c).map(|ch| xc(ch, y, x_)).collect();
            stats[y * w + x_] = [
                vals.iter().sum::<f64>() / c as f64,
                vals.iter().cloned().fold(f64::MIN, f64::max),
            ];
        }
    }
    let mut want = vec![0.0; c * h * w];
    for y in 0..h {
        for x_ in 0..w {
            let mut acc = sp_b[0];
            for s in 0..2 {
                for ky in 0..7 {
                    for kx in 0..7 {
                        let (iy, ix) =
                            (y as isize + ky as isize - 3, x_ as isize + kx as isize - 3);
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += sp_w[(s * 7 + ky) * 7 + kx]
                                * stats[iy as usize * w + ix as usize][s];
                        }
                    }
                }
            }
            let gate_s = sig(acc);
            for ch in 0..c {
                want[(ch * h + y) * w + x_] =
                    xc(ch, y, x_) * gate_s + x.data[(ch * h + y) * w + x_];
            }
        }
    }

    let mut g = Graph::new();
    let vars = p.bind_frozen(&mut g);
    let xv = g.input(x);
    let y = net.attention(&mut g, &vars, 0, 0, xv).unwrap();
    for (a, b) in g.value(y).data.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn fusion_inputs(
    g: &mut Graph<f64>,
    cfg: &DianetConfig,
    seed: u64,
    zero_except: Option<usize>,
) -> Vec<Var> {
    (0..4)
        .map(|b| {
            let side = 16 >> b;
            let mut t = random_input(seed + b as u64, [1, cfg.base_width << b, side, side]);
            if zero_except.is_some_and(|keep| keep != b) {
                t.data.fill(0.0);
            }
            g.input(t)
        })
        .collect()
}

#[test]
fn fusion_preserves_schedule_and_composes_primitives() {
    let cfg = tiny();
    let (net, p) = build_dianet::<f64>(&cfg, 5).unwrap();
    let mut g = Graph::new();
    let vars = p.bind_frozen(&mut g);
    let feats = fusion_inputs(&mut g, &cfg, 20, None);
    let out = net.fuse_branches(&mut g, &vars, 3, &feats).unwrap();
    for (f, o) in feats.iter().zip(&out) {
        assert_eq!(g.shape(*f), g.shape(*o));
    }

    // Branch 1 by hand: identity + down(0) + up(2) + up(3), then ReLU.
    let unit = |g: &mut Graph<f64>, name: &str, x: Var, stride: usize, pad: usize, relu: bool| {
        let s = |k: &str| vars[p.slot(&format!("{name}.{k}")).unwrap()];
        let y = g.conv2d(x, s("weight"), None, stride, pad).unwrap();
        let (y, _) = g.batch_norm(y, BN_EPS).unwrap();
        let y = g.affine(y, s("scale"), s("shift")).unwrap();
        if relu {
            g.relu(y).unwrap()
        } else {
            y
        }
    };
    let down = unit(&mut g, "stage4.fuse.0to1.0", feats[0], 2, 1, false);
    let up2 = unit(&mut g, "stage4.fuse.2to1", feats[2], 1, 0, false);
    let up2 = g.bilinear_resize(up2, 8, 8).unwrap();
    let up3 = unit(&mut g, "stage4.fuse.3to1", feats[3], 1, 0, false);
    let up3 = g.bilinear_resize(up3, 8, 8).unwrap();
    let sum = g.add_all(&[feats[1], down, up2, up3]).unwrap();
    let want = g.relu(sum).unwrap();
    assert_eq!(g.value(want), g.value(out[1]));

    // Branch 3 receives the two-step chain from branch 0.
    let d = unit(&mut g, "stage4.fuse.0to3.0", feats[0], 2, 1, true);
    let d = unit(&mut g, "stage4.fuse.0to3.1", d, 2, 1, true);
    let d = unit(&mut g, "stage4.fuse.0to3.2", d, 2, 1, false);
    assert_eq!(g.shape(d), g.shape(feats[3]));
}

#[test]
fn fusion_with_single_live_branch() {
    let cfg = tiny();
    let (net, p) = build_dianet::<f64>(&cfg, 6).unwrap();
    let mut g = Graph::new();
    let vars = p.bind_frozen(&mut g);
    let feats = fusion_inputs(&mut g, &cfg, 30, Some(2));
    let out = net.fuse_branches(&mut g, &vars, 3, &feats).unwrap();
    // Branch 2 gets only its own (identity) term.
    let own: Vec<f64> = g.value(feats[2]).data.iter().map(|v| v.max(0.0)).collect();
    assert_eq!(g.value(out[2]).data, own);
    // Zero inputs normalize to zero and contribute only the (zero) shifts.
    assert!(g.value(out[0]).data.iter().any(|v| *v != 0.0));
    assert!(net.fuse_branches(&mut g, &vars, 3, &feats[..3]).is_err());
}

#[test]
fn full_network_gradient_check() {
    let (net, mut p) = build_dianet::<f32>(&tiny(), 7).unwrap();
    p.jitter(0.05, &mut ChaCha8Rng::seed_from_u64(70));
    let objective = NetworkLoss {
        net: &net,
        input: random_input(8, [1, 14, 8, 8]),
        labels: random_labels(9, 64),
        dal: DalConfig::default(),
    };
    // Normalized pre-activations sit close to ReLU/max kinks, so wider
    // stencils straddle some of them; f64 analytic gradients keep rounding
    // out of the tiny entries behind the coarsest branches.
    let cfg = GradCheckConfig {
        eps: 1e-5,
        ..Default::default()
    };
    let report = grad_check(&objective, &p.cast::<f64>(), cfg).unwrap();
    println!("full network grad check: {report:?}");
    assert!(report.max_rel_error < 1e-3, "{report:?}");
    assert_eq!(report.entries, p.trainable_numel());
}

#[test]
fn every_parameter_receives_gradient() {
    let (net, p) = build_dianet::<f32>(&DianetConfig::default(), 10).unwrap();
    let mut live = vec![false; p.len()];
    for batch in 0..8 {
        // Per-channel offsets and gains vary the direction of the pooled
        // features that drive the attention squeeze.
        let mut rng = ChaCha8Rng::seed_from_u64(100 + batch);
        let gains: Vec<f64> = (0..14).map(|_| rng.random_range(0.0..3.0)).collect();
        let offsets: Vec<f64> = (0..14).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut input = random_input(11 + batch, [2, 14, 16, 16]);
        for (i, v) in input.data.iter_mut().enumerate() {
            let c = (i / 256) % 14;
            *v = *v * gains[c] + offsets[c];
        }
        let objective = NetworkLoss {
            net: &net,
            input,
            labels: random_labels(12 + batch, 512),
            dal: DalConfig::default(),
        };
        let grads = analytic_grads(&objective, &p, None).unwrap();
        for (l, g) in live.iter_mut().zip(&grads) {
            *l |= g.iter().any(|v| *v != 0.0);
        }
    }
    for (slot, (name, l)) in p.names().iter().zip(&live).enumerate() {
        assert!(*l || !p.is_trainable(slot), "dead parameter {name}");
    }
}

#[test]
fn f32_and_f64_builds_agree() {
    let (net, p32) = build_dianet::<f32>(&tiny(), 13).unwrap();
    let (_, p64) = build_dianet::<f64>(&tiny(), 13).unwrap();
    let p64_from_32: ParamStore<f64> = p32.cast();
    for (a, b) in p64_from_32.tensors().iter().zip(p64.tensors()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    let x = random_input(14, [1, 14, 8, 8]);
    let y32 = net.predict(&p32, &x.cast()).unwrap();
    let y64 = net.predict(&p64_from_32, &x).unwrap();
    for (a, b) in y32.data.iter().zip(&y64.data) {
        assert!((*a as f64 - b).abs() < 1e-4);
    }
}
