use poseadapt::autodiff::{finite_diff_check_at, Tape, Tensor, TensorError, Var};
use poseadapt::model::{ArchConfig, ArchPlan, BoundParams, ModelError, ModelParams, Mode, Network, Profile, Stage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, 64, 64], |_| rng.gen_range(0.0..1.0))
}

fn desk() -> (Network, ModelParams) {
    let net = Network::new(ArchConfig::desk_small()).unwrap();
    let params = net.init_params(11);
    (net, params)
}

fn first_se(net: &Network) -> poseadapt::model::SeUnit {
    net.plan()
        .stages
        .iter()
        .find_map(|s| match s {
            Stage::Block(b) => b.se.clone(),
            _ => None,
        })
        .unwrap()
}

#[test]
fn se_block_with_saturated_gate_is_identity() {
    let (net, mut params) = desk();
    let se = first_se(&net);
    let fc2 = format!("{}.fc2", se.name);
    params.insert(format!("{fc2}.weight"), Tensor::zeros(&[se.squeeze, se.channels]));
    params.insert(format!("{fc2}.bias"), Tensor::full(&[se.channels], 3.0));
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let x = tape.constant(random(&[2, se.channels, 5, 5], 1));
    let y = Network::se_block(x, &se, &bound).unwrap();
    assert_eq!(y.value().data(), x.value().data());
}

#[test]
fn se_block_half_gate_halves_channel_zero() {
    let (net, mut params) = desk();
    let se = first_se(&net);
    let fc2 = format!("{}.fc2", se.name);
    params.insert(format!("{fc2}.weight"), Tensor::zeros(&[se.squeeze, se.channels]));
    params.insert(
        format!("{fc2}.bias"),
        Tensor::from_fn(&[se.channels], |c| if c == 0 { 0.0 } else { 3.0 }),
    );
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let xv = random(&[se.channels, 4, 4], 2);
    let x = tape.constant(xv.clone());
    let y = Network::se_block(x, &se, &bound).unwrap().value();
    for (i, (a, b)) in y.data().iter().zip(xv.data()).enumerate() {
        let expected = if i < 16 { b * 0.5 } else { *b };
        assert_eq!(*a, expected);
    }
}

#[test]
fn se_block_matches_loop_oracle() {
    let (net, params) = desk();
    let se = first_se(&net);
    let (c, s) = (se.channels, se.squeeze);
    let xv = random(&[c, 6, 6], 3);
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let y = Network::se_block(tape.constant(xv.clone()), &se, &bound).unwrap().value();

    let p = |n: &str| params.get(&format!("{}.{n}", se.name)).unwrap().data().to_vec();
    let (w1, b1, w2, b2) = (p("fc1.weight"), p("fc1.bias"), p("fc2.weight"), p("fc2.bias"));
    let x = xv.data();
    let gap: Vec<f64> = (0..c).map(|ch| x[ch * 36..(ch + 1) * 36].iter().sum::<f64>() / 36.0).collect();
    let mut hidden = vec![0.0; s];
    for j in 0..s {
        let mut acc = b1[j];
        for i in 0..c {
            acc += gap[i] * w1[i * s + j];
        }
        hidden[j] = acc.max(0.0);
    }
    for ch in 0..c {
        let mut acc = b2[ch];
        for j in 0..s {
            acc += hidden[j] * w2[j * c + ch];
        }
        let gate = ((acc + 3.0).clamp(0.0, 6.0)) / 6.0;
        for p in 0..36 {
            assert!((y.data()[ch * 36 + p] - x[ch * 36 + p] * gate).abs() < 1e-12);
        }
    }
}

#[test]
fn oversized_reduction_is_a_config_error() {
    let mut c = ArchConfig::desk_small();
    c.se_reduction = 17;
    assert!(matches!(Network::new(c), Err(ModelError::Config { .. })));
}

#[test]
fn desk_backbone_yields_64_by_7_by_7() {
    let (net, params) = desk();
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let f = net.backbone_forward(&bound, tape.constant(image(0))).unwrap();
    assert_eq!(f.shape(), vec![1, 64, 7, 7]);
}

#[test]
fn mobilenet_v3_large_backbone_yields_960_by_7_by_7() {
    let net = Network::new(Profile::MobileNetV3Large.config()).unwrap();
    let params = net.init_params(0);
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let img = random(&[3, 224, 224], 4);
    let f = net.backbone_forward(&bound, tape.constant(img)).unwrap();
    assert_eq!(f.shape(), vec![1, 960, 7, 7]);
}

#[test]
fn zero_image_and_zero_convs_give_zero_features() {
    let (net, params) = desk();
    let mut zeroed = ModelParams::default();
    for (name, t) in params.iter() {
        zeroed.insert(name.clone(), Tensor::zeros(t.shape()));
    }
    let tape = Tape::new();
    let bound = zeroed.bind(&tape, false);
    let f = net.backbone_forward(&bound, tape.constant(Tensor::zeros(&[3, 64, 64]))).unwrap();
    assert!(f.value().data().iter().all(|v| *v == 0.0));
}

#[test]
fn wrong_image_shape_is_structured_error() {
    let (net, params) = desk();
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let err = net.backbone_forward(&bound, tape.constant(Tensor::zeros(&[3, 32, 64]))).unwrap_err();
    match err {
        ModelError::InputShape { expected, got } => {
            assert_eq!(expected, vec![3, 64, 64]);
            assert_eq!(got, vec![3, 32, 64]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn identity_latent_layer_reproduces_gap() {
    let mut c = ArchConfig::desk_small();
    c.head_hidden_layer = false;
    c.latent_dim = 64;
    let net = Network::new(c).unwrap();
    let mut params = net.init_params(1);
    for which in ["latent_t", "latent_r"] {
        params.insert(format!("{which}.0.weight"), Tensor::from_fn(&[64, 64], |i| f64::from(u8::from(i / 64 == i % 64))));
        params.insert(format!("{which}.0.bias"), Tensor::zeros(&[64]));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let f = tape.constant(random(&[2, 64, 7, 7], 5));
    let (lt, lr) = net.encode_latents(f, &bound).unwrap();
    let gap = f.global_avg_pool().unwrap().value();
    assert_eq!(lt.value().data(), gap.data());
    assert_eq!(lr.value().data(), gap.data());
}

#[test]
fn latent_lengths_follow_configured_width() {
    for d in [32, 256, 512] {
        let mut c = ArchConfig::desk_small();
        c.latent_dim = d;
        let net = Network::new(c).unwrap();
        let params = net.init_params(0);
        let tape = Tape::new();
        let bound = params.bind(&tape, false);
        let f = tape.constant(random(&[64, 7, 7], 6));
        let (lt, lr) = net.encode_latents(f, &bound).unwrap();
        assert_eq!(lt.shape(), vec![d]);
        assert_eq!(lr.shape(), vec![d]);
        let (lt2, _) = net.encode_latents(f, &bound).unwrap();
        assert_eq!(lt.value(), lt2.value());
    }
}

#[test]
fn translation_head_with_zero_weights_returns_bias() {
    let (net, mut params) = desk();
    let head = net.plan().heads.translation.clone();
    let last = head.dims.len() - 2;
    let (name, d_in, _) = head.layers().last().unwrap();
    assert_eq!(name, head.layer_name(last));
    params.insert(format!("{name}.weight"), Tensor::zeros(&[d_in, 3]));
    params.insert(format!("{name}.bias"), Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let t = net.translation_head(tape.constant(random(&[4, 32], 7)), &bound).unwrap();
    assert_eq!(t.shape(), vec![4, 3]);
    for row in t.value().data().chunks(3) {
        assert_eq!(row, [1.0, 2.0, 3.0]);
    }
}

fn bound_from<'t>(names: &[String], vars: &[Var<'t>]) -> BoundParams<'t> {
    BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

fn as_tensor_error(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

#[test]
fn translation_head_gradient_matches_finite_differences() {
    let (net, params) = desk();
    let names: Vec<String> = params.names().filter(|n| n.starts_with("translation.")).cloned().collect();
    let tensors: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let latent = random(&[3, 32], 8);
    let target = random(&[3, 3], 9);
    let coords: Vec<(usize, usize)> = (0..tensors.len()).flat_map(|i| (0..3).map(move |j| (i, j))).collect();
    let err = finite_diff_check_at(
        |tape, vars| {
            let bound = bound_from(&names, vars);
            let t = net.translation_head(tape.constant(latent.clone()), &bound).map_err(as_tensor_error)?;
            Ok(t.sub(&tape.constant(target.clone()))?.square().sum())
        },
        &tensors,
        1e-6,
        &coords,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn rotation_head_ignores_query_and_key_inputs() {
    let (net, params) = desk();
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let latent = tape.constant(random(&[2, 32], 10));
    let f1 = tape.constant(random(&[2, 64, 7, 7], 11));
    let f2 = tape.constant(random(&[2, 64, 7, 7], 12).map(|v| 5.0 * v + 1.0));
    let a = net.rotation_head(latent, f1, &bound, Mode::Eval).unwrap().value();
    let b = net.rotation_head(latent, f2, &bound, Mode::Eval).unwrap().value();
    assert_eq!(a.shape(), &[2, 4]);
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn rotation_head_rejects_indivisible_heads() {
    let mut c = ArchConfig::desk_small();
    c.mha_heads = 6;
    assert!(matches!(Network::new(c), Err(ModelError::Config { .. })));
}

#[test]
fn eval_quaternions_are_unit_and_canonical() {
    let (net, params) = desk();
    let imgs = Tensor::new(vec![3, 3, 64, 64], [image(1), image(2), image(3)].iter().flat_map(|t| t.to_vec()).collect()).unwrap();
    let a = net.predict(&params, &imgs).unwrap();
    let b = net.predict(&params, &imgs).unwrap();
    assert_eq!(a, b);
    for p in &a {
        let n: f64 = p.q.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(p.q[0] >= 0.0);
    }
}

#[test]
fn branches_share_one_parameter_instance() {
    let (net, params) = desk();
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    for (name, var) in bound.iter() {
        assert!(var.value().same_storage(params.get(name).unwrap()));
    }
    let stem = bound.get("stem.weight").unwrap();
    let mut outputs = Vec::new();
    for seed in 0..3 {
        let out = net.forward(&bound, tape.constant(image(seed)), Mode::Eval).unwrap();
        outputs.push(out.t.sum());
    }
    for out in &outputs {
        let g = out.backward().unwrap();
        assert!(g.get(&stem).unwrap().data().iter().any(|v| *v != 0.0));
    }
    // The same leaf reaches every branch: the stacked sum's gradient is the sum of branch gradients.
    let total = outputs[0].add(&outputs[1]).unwrap().add(&outputs[2]).unwrap();
    let g_total = total.backward().unwrap().get(&stem).unwrap().clone();
    let parts: Vec<Tensor> = outputs.iter().map(|o| o.backward().unwrap().get(&stem).unwrap().clone()).collect();
    let summed = Tensor::from_fn(stem.value().shape(), |i| parts.iter().map(|p| p.data()[i]).sum());
    assert!(g_total.max_abs_diff(&summed) < 1e-9);
}

#[test]
fn stacked_branch_matches_single_branch() {
    let (net, params) = desk();
    let imgs: Vec<Tensor> = (0..3).map(image).collect();
    let stacked = Tensor::new(vec![3, 3, 64, 64], imgs.iter().flat_map(|t| t.to_vec()).collect()).unwrap();
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let all = net.forward(&bound, tape.constant(stacked), Mode::Eval).unwrap();
    for (i, img) in imgs.iter().enumerate() {
        let one = net.forward(&bound, tape.constant(img.clone()), Mode::Eval).unwrap();
        let t_all = &all.t.value().data()[i * 3..i * 3 + 3].to_vec();
        let q_all = &all.q_raw.value().data()[i * 4..i * 4 + 4].to_vec();
        for (a, b) in t_all.iter().zip(one.t.value().data()) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in q_all.iter().zip(one.q_raw.value().data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

fn squared_output_loss<'t>(
    net: &Network,
    names: &[String],
    imgs: &Tensor,
    tape: &'t Tape,
    vars: &[Var<'t>],
) -> Result<Var<'t>, TensorError> {
    let bound = bound_from(names, vars);
    let out = net.forward(&bound, tape.constant(imgs.clone()), Mode::Eval).map_err(as_tensor_error)?;
    out.t.square().sum().add(&out.q_raw.square().sum())
}

#[test]
fn full_model_gradient_matches_finite_differences() {
    let (net, params) = desk();
    let names: Vec<String> = params.names().cloned().collect();
    let tensors: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let imgs = Tensor::new(vec![2, 3, 64, 64], [image(20), image(21)].iter().flat_map(|t| t.to_vec()).collect()).unwrap();
    // Probe each tensor at its steepest element: elsewhere many gradients sit
    // below the central-difference rounding floor.
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let grads = squared_output_loss(&net, &names, &imgs, &tape, &leaves).unwrap().backward().unwrap();
    let coords: Vec<(usize, usize)> = leaves
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let g = grads.get(v).unwrap();
            let j = (0..g.numel()).max_by(|&a, &b| g.data()[a].abs().total_cmp(&g.data()[b].abs())).unwrap();
            (i, j)
        })
        .collect();
    let err = finite_diff_check_at(
        |tape, vars| squared_output_loss(&net, &names, &imgs, tape, vars),
        &tensors,
        1e-5,
        &coords,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn desk_model_is_small() {
    let plan = ArchPlan::resolve(&ArchConfig::desk_small()).unwrap();
    assert!(plan.num_params() < 500_000);
    let att: usize = plan
        .param_specs()
        .iter()
        .filter(|s| s.name.starts_with("rotation.attention"))
        .map(|s| s.shape.iter().product::<usize>())
        .sum();
    assert_eq!(att, 4 * (49 * 49 + 49));
}

#[test]
fn train_mode_dropout_is_seeded() {
    let (net, params) = desk();
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let imgs = Tensor::new(vec![2, 3, 64, 64], [image(4), image(5)].iter().flat_map(|t| t.to_vec()).collect()).unwrap();
    let x = tape.constant(imgs);
    let a = net.forward(&bound, x, Mode::Train { dropout_seed: 9 }).unwrap().q_raw.value();
    let b = net.forward(&bound, x, Mode::Train { dropout_seed: 9 }).unwrap().q_raw.value();
    assert_eq!(a, b);
}
