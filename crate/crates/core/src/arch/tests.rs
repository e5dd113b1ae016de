use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::neuron::NeuronConfig;
use crate::numerics::{Graph, Tensor, BN_EPS};

fn minimal(d_cap: u32) -> ModelSpec {
    ModelSpec {
        stages: vec![vec![BlockSpec::downsample(8), BlockSpec::conv(8), BlockSpec::transformer(8, 2)]],
        input_shape: [1, 32, 32],
        num_classes: 3,
        neuron: NeuronConfig { d_cap, ..Default::default() },
        attn_scale: None,
    }
}

fn random(shape: &[usize], seed: u64, lo: f32, hi: f32) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn transformer_parts(m: &Model) -> (&SepConv, &Attention, &ChannelMixer) {
    m.blocks
        .iter()
        .find_map(|b| match b {
            Block::Transformer { sep, attn, mlp } => Some((sep, attn, mlp)),
            _ => None,
        })
        .unwrap()
}

#[test]
fn minimal_spec_runs_on_single_image() {
    let m = build_model(&minimal(4), 1).unwrap();
    let logits = m.eval_logits(&random(&[1, 1, 32, 32], 2, 0.0, 1.0)).unwrap();
    assert_eq!(logits.shape(), &[1, 3]);
    assert!(logits.all_finite());
}

#[test]
fn parameter_count_matches_hand_formula() {
    let bn = |c: usize| 2 * c;
    let (c, h, cv, k) = (8, 32, 16, 3);
    let stem = c * 9 + bn(c);
    let sep = c * 2 * c + bn(2 * c) + 2 * c * 9 + bn(2 * c) + 2 * c * c + bn(c);
    let cc = c * h * 9 + bn(h) + h * c * 9 + bn(c);
    let attn = 2 * (c * c + bn(c)) + c * cv + bn(cv) + cv * c + bn(c);
    let mlp = c * h + bn(h) + h * c + bn(c);
    let head = c * k + k;
    let expected = stem + (sep + cc) + (sep + attn + mlp) + head;
    assert_eq!(build_model(&minimal(4), 0).unwrap().param_count(), expected);
}

#[test]
fn attention_with_unit_gamma_is_four_equal_linears() {
    let mut spec = minimal(4);
    spec.stages[0][2] = BlockSpec::transformer(8, 2).with_gamma(1.0);
    let m = build_model(&spec, 0).unwrap();
    let count: usize = m
        .params
        .entries()
        .iter()
        .filter(|e| e.name.contains(".attn.") && e.kind == ParamKind::Weight)
        .map(|e| e.value.len())
        .sum();
    assert_eq!(count, 4 * (8 * 8 + 2 * 8));
}

#[test]
fn same_seed_same_parameters() {
    let a = build_model(&minimal(4), 42).unwrap();
    let b = build_model(&minimal(4), 42).unwrap();
    let c = build_model(&minimal(4), 43).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

#[test]
fn invalid_specs_are_described() {
    let mut s = minimal(4);
    s.stages[0][2].heads = 3;
    assert!(matches!(build_model(&s, 0), Err(ArchError::InvalidSpec(m)) if m.contains("heads")));
    let mut s = minimal(4);
    s.stages[0][1].channels = 16;
    assert!(matches!(build_model(&s, 0), Err(ArchError::InvalidSpec(m)) if m.contains("channel mismatch")));
    let mut s = minimal(4);
    s.stages[0].remove(0);
    assert!(matches!(build_model(&s, 0), Err(ArchError::InvalidSpec(m)) if m.contains("first block")));
    let mut s = minimal(4);
    s.stages[0][2].gamma = 0.5;
    assert!(build_model(&s, 0).is_err());
    let mut s = minimal(4);
    s.input_shape = [1, 1, 1];
    assert!(build_model(&s, 0).is_err());
}

#[test]
fn training_activations_are_bounded_integers() {
    for d in [1, 4] {
        let m = build_model(&minimal(d), 3).unwrap();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, true);
        let x = g.constant(random(&[2, 1, 32, 32], 4, 0.0, 1.0));
        let mut ctx = ForwardCtx::new(m.spec.neuron, true).recording();
        m.forward(&mut g, &bound, x, &mut ctx).unwrap();
        assert_eq!(ctx.activations.len(), m.sites.len());
        for (_, counts) in &ctx.activations {
            assert!(counts.data.iter().all(|&v| v <= d));
        }
        assert!(ctx.activations.iter().any(|(_, c)| c.total() > 0));
    }
}

#[test]
fn residuals_never_add_spike_tensors() {
    let m = build_model(&minimal(4), 5).unwrap();
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let x = g.constant(random(&[1, 1, 32, 32], 6, 0.0, 1.0));
    let mut ctx = ForwardCtx::new(m.spec.neuron, false).recording();
    m.forward(&mut g, &bound, x, &mut ctx).unwrap();
    assert_eq!(ctx.residual_operands.len(), 5);
    for (a, b) in &ctx.residual_operands {
        assert!(!ctx.spike_vars.contains(a) && !ctx.spike_vars.contains(b));
    }
}

fn bn_offset(m: &Model, c: &ConvBn) -> Vec<f32> {
    let p = &m.params;
    (0..c.cout)
        .map(|i| {
            let (g, b) = (p.value(c.gamma).data()[i], p.value(c.beta).data()[i]);
            let (mu, var) = (p.value(c.mean).data()[i], p.value(c.var).data()[i]);
            b - g * mu / (var + BN_EPS as f32).sqrt()
        })
        .collect()
}

#[test]
fn zero_membrane_leaves_only_normalization_offset() {
    let mut m = build_model(&minimal(4), 7).unwrap();
    let (sep, _, _) = transformer_parts(&m);
    let pw2 = sep.pw2.clone();
    *m.params.value_mut(pw2.beta) = random(&[8], 8, -1.0, 1.0);
    *m.params.value_mut(pw2.mean) = random(&[8], 9, -1.0, 1.0);
    let (sep, _, _) = transformer_parts(&m);
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let u = g.constant(Tensor::zeros(&[1, 8, 4, 4]));
    let mut ctx = ForwardCtx::new(m.spec.neuron, false);
    let y = m.spike_sep_conv(&mut g, &bound, sep, u, &mut ctx).unwrap();
    let off = bn_offset(&m, &pw2);
    for (i, v) in g.value(y).data().iter().enumerate() {
        assert_eq!(*v, off[i / 16]);
    }
}

#[test]
fn binary_cap_still_runs() {
    let m = build_model(&minimal(1), 7).unwrap();
    let z = m.eval_logits(&random(&[2, 1, 32, 32], 1, 0.0, 1.0)).unwrap();
    assert!(z.all_finite());
}

#[test]
fn mid_block_spiking_layer_changes_output() {
    let m = build_model(&minimal(4), 11).unwrap();
    let (sep, _, _) = transformer_parts(&m);
    let u_val = random(&[1, 8, 4, 4], 12, -1.0, 4.0);
    let run = |mid: bool| {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let u = g.constant(u_val.clone());
        let mut ctx = ForwardCtx::new(m.spec.neuron, false);
        ctx.sepconv_mid_sn = mid;
        let y = m.spike_sep_conv(&mut g, &bound, sep, u, &mut ctx).unwrap();
        g.value(y).clone()
    };
    assert_ne!(run(true), run(false));
}

#[test]
fn channel_conv_preserves_shape_and_trains_both_kernels() {
    let m = build_model(&minimal(4), 13).unwrap();
    let mixer = m
        .blocks
        .iter()
        .find_map(|b| match b {
            Block::Conv { mixer, .. } => Some(mixer),
            _ => None,
        })
        .unwrap();
    let mut g = Graph::new();
    let bound = m.bind(&mut g, true);
    let u = g.constant(random(&[2, 8, 8, 8], 14, -1.0, 4.0));
    let mut ctx = ForwardCtx::new(m.spec.neuron, true);
    let y = m.channel_conv(&mut g, &bound, mixer, u, &mut ctx).unwrap();
    assert_eq!(g.shape(y), &[2, 8, 8, 8]);
    let w = g.param(random(&[2, 8, 8, 8], 15, -1.0, 1.0));
    let p = g.mul(y, w).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    for c in [&mixer.fc1, &mixer.fc2] {
        let grad = g.grad(bound.var(c.w)).unwrap();
        assert!(grad.max_abs() > 0.0, "{} received no gradient", c.name);
    }
}

#[test]
fn silent_queries_silence_attention() {
    let mut m = build_model(&minimal(4), 17).unwrap();
    let (_, attn, _) = transformer_parts(&m);
    let (q, proj) = (attn.q.clone(), attn.proj.clone());
    *m.params.value_mut(q.gamma) = Tensor::zeros(&[8]);
    *m.params.value_mut(q.beta) = Tensor::full(&[8], -5.0);
    let (_, attn, _) = transformer_parts(&m);
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let u = g.constant(random(&[1, 8, 4, 4], 18, 0.0, 4.0));
    let mut ctx = ForwardCtx::new(m.spec.neuron, false);
    let y = m.e_sdsa(&mut g, &bound, attn, u, &mut ctx).unwrap();
    let off = bn_offset(&m, &proj);
    for (i, v) in g.value(y).data().iter().enumerate() {
        assert_eq!(*v, off[i / 16]);
    }
}

#[test]
fn single_token_attention_is_scaled_value() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::new(&[1, 2, 1], vec![2.0, 1.0]).unwrap());
    let k = g.constant(Tensor::new(&[1, 2, 1], vec![3.0, 4.0]).unwrap());
    let v = g.constant(Tensor::new(&[1, 3, 1], vec![1.0, 0.0, 2.0]).unwrap());
    let a = g.linear_attention(q, k, v, 1).unwrap();
    // q . k = 10 scales every value channel
    assert_eq!(g.value(a).data(), &[10.0, 0.0, 20.0]);
}

#[test]
fn integer_operands_give_integer_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut ints = |shape: &[usize]| Tensor::<f32>::from_fn(shape, |_| rng.gen_range(0..=4) as f32);
    let mut g = Graph::<f32>::new();
    let q = g.constant(ints(&[2, 8, 16]));
    let k = g.constant(ints(&[2, 8, 16]));
    let v = g.constant(ints(&[2, 16, 16]));
    let a = g.linear_attention(q, k, v, 2).unwrap();
    assert!(g.value(a).data().iter().all(|x| x.fract() == 0.0));
}

#[test]
fn zeroed_sub_modules_give_identity_block() {
    let mut m = build_model(&minimal(4), 21).unwrap();
    let idx = m.blocks.iter().position(|b| matches!(b, Block::Transformer { .. })).unwrap();
    if let Block::Transformer { sep, attn, mlp } = m.blocks[idx].clone() {
        for c in [sep.pw2, attn.proj, mlp.fc2] {
            *m.params.value_mut(c.gamma) = Tensor::zeros(&[c.cout]);
        }
    }
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let u_val = random(&[1, 8, 16, 16], 22, -2.0, 4.0);
    let u = g.constant(u_val.clone());
    let mut ctx = ForwardCtx::new(m.spec.neuron, false);
    let y = m.block_forward(&mut g, &bound, idx, u, &mut ctx).unwrap();
    assert_eq!(g.value(y), &u_val);
}

#[test]
fn ablating_pre_attention_sepconv_changes_output() {
    let mut m = build_model(&minimal(4), 23).unwrap();
    m.calibrate_bn(&random(&[4, 1, 32, 32], 29, 0.0, 1.0)).unwrap();
    let idx = m.blocks.iter().position(|b| matches!(b, Block::Transformer { .. })).unwrap();
    let u_val = random(&[1, 8, 16, 16], 24, -1.0, 4.0);
    let run = |skip: bool| {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let u = g.constant(u_val.clone());
        let mut ctx = ForwardCtx::new(m.spec.neuron, false);
        ctx.skip_pre_attention_sepconv = skip;
        let y = m.block_forward(&mut g, &bound, idx, u, &mut ctx).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (run(false), run(true));
    assert_eq!(a.shape(), &[1, 8, 16, 16]);
    assert_ne!(a, b);
}

#[test]
fn repeated_forward_is_identical() {
    let m = build_model(&minimal(4), 25).unwrap();
    let x = random(&[3, 1, 32, 32], 26, 0.0, 1.0);
    assert_eq!(m.eval_logits(&x).unwrap(), m.eval_logits(&x).unwrap());
}

#[test]
fn stateful_sites_carry_membrane() {
    let mut spec = minimal(2);
    spec.neuron.t_steps = 2;
    let m = build_model(&spec, 27).unwrap();
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let mut ctx = ForwardCtx::new(spec.neuron, false);
    let x = g.constant(random(&[1, 1, 32, 32], 28, 0.0, 1.0));
    m.forward(&mut g, &bound, x, &mut ctx).unwrap();
    assert_eq!(ctx.states.len(), m.sites.len());
}
