use sfa_core::arch::{build_model, Model, ModelSpec};
use sfa_core::engine::*;
use sfa_core::neuron::{NeuronConfig, ResetMode};
use sfa_core::numerics::Tensor;
use sfa_core::profiler::count_sops;

fn calibrated(neuron: NeuronConfig, seed: u64) -> (Model, Tensor<f32>) {
    let spec = ModelSpec::toy([1, 16, 16], 3, 8, 2, neuron);
    let mut m = build_model(&spec, seed).unwrap();
    let data = blobs(48, 16, seed + 40);
    m.calibrate_bn(&data.images).unwrap();
    (m, data.images)
}

fn same_bits(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn set_betas(m: &mut Model, v: f32) {
    let names: Vec<String> = m.params.entries().iter().map(|e| e.name.clone()).filter(|n| n.ends_with(".bn.beta")).collect();
    for n in names {
        m.params.by_name_mut(&n).unwrap().data_mut().iter_mut().for_each(|b| *b = v);
    }
}

#[test]
fn three_modes_agree_bit_for_bit() {
    let (m, x) = calibrated(NeuronConfig::default(), 1);
    let net = compile(&m);
    let frames = [x];
    let int = infer_integer(&net, &frames).unwrap();
    let sync = infer_sync_expanded(&net, &frames).unwrap();
    let asy = infer_async_event(&net, &frames, AsyncConfig::default()).unwrap();
    assert!(same_bits(&int.logits, &sync.logits));
    assert!(same_bits(&int.logits, &asy.logits));
    assert_eq!(sync.accumulations, asy.accumulations);
    assert!(int.activations.iter().any(|a| a.windows[0].total() > 0), "network is silent");
    for (acts, rec) in int.activations.iter().zip(&sync.records) {
        assert_eq!(rec.spikes.sum_over_steps(), acts.windows[0]);
        assert!(rec.spikes.is_front_loaded(4), "{}", rec.name);
    }
}

#[test]
fn expanded_logits_track_training_forward() {
    let (m, x) = calibrated(NeuronConfig::default(), 2);
    let net = compile(&m);
    let int = infer_integer(&net, &[x.clone()]).unwrap();
    let eval = m.eval_logits(&x).unwrap();
    let agree = int.logits.argmax_rows().iter().zip(eval.argmax_rows()).filter(|(a, b)| **a == *b).count();
    assert!(agree * 10 >= 9 * x.shape()[0], "{agree}/{}", x.shape()[0]);
}

#[test]
fn binary_cap_has_no_expansion() {
    let (m, x) = calibrated(NeuronConfig { d_cap: 1, ..Default::default() }, 3);
    let net = compile(&m);
    let int = infer_integer(&net, &[x.clone()]).unwrap();
    let sync = infer_sync_expanded(&net, &[x]).unwrap();
    for (acts, rec) in int.activations.iter().zip(&sync.records) {
        assert_eq!(rec.spikes.steps, 1);
        let bits: Vec<u32> = rec.spikes.bits.iter().map(|&b| b as u32).collect();
        assert_eq!(bits, acts.windows[0].data);
    }
    assert!(same_bits(&int.logits, &sync.logits));
}

#[test]
fn stateful_multi_window_networks_agree() {
    for (reset, beta) in [(ResetMode::Soft, 1.0), (ResetMode::Hard, 0.5), (ResetMode::None, 0.9)] {
        let neuron = NeuronConfig { t_steps: 3, reset_mode: reset, beta, ..Default::default() };
        let spec = ModelSpec::toy([2, 16, 16], 4, 8, 2, neuron);
        let mut m = build_model(&spec, 4).unwrap();
        let fd = moving_bar(12, 16, 1000, 5).to_frames(3).unwrap();
        m.calibrate_bn(&fd.frames[1].map(|v| v * 50.0)).unwrap();
        let frames: Vec<Tensor<f32>> = fd.frames.iter().map(|f| f.map(|v| v * 50.0)).collect();
        let net = compile(&m);
        let r = equivalence_report(&net, &frames, AsyncConfig { seed: 9, ..Default::default() }, None).unwrap();
        assert!(r.passed(0.0), "{reset:?}: {:?}", r.ensure(0.0));
        let int = infer_integer(&net, &frames).unwrap();
        assert!(int.activations.iter().any(|a| a.windows[2].total() > 0));
        let eval = dynamic_eval_logits(&m, &frames).unwrap();
        let agree = int.logits.argmax_rows().iter().zip(eval.argmax_rows()).filter(|(a, b)| **a == *b).count();
        assert!(agree >= 10, "{reset:?}: {agree}/12");
    }
}

#[test]
fn async_order_does_not_change_results() {
    let (m, x) = calibrated(NeuronConfig::default(), 5);
    let net = compile(&m);
    let x = gather_rows(&x, &[0, 1, 2, 3, 4, 5]);
    let base = infer_async_event(&net, &[x.clone()], AsyncConfig { seed: 0, ..Default::default() }).unwrap();
    for seed in 1..4 {
        let r = infer_async_event(&net, &[x.clone()], AsyncConfig { seed, ..Default::default() }).unwrap();
        assert!(same_bits(&base.logits, &r.logits));
        assert_eq!(base.accumulations, r.accumulations);
        let mut a = base.traces[0].clone();
        let mut b = r.traces[0].clone();
        assert_ne!(a, b, "scheduling should interleave layers differently");
        a.sort_by_key(|e| (e.layer, e.channel, e.y, e.x, e.micro_step));
        b.sort_by_key(|e| (e.layer, e.channel, e.y, e.x, e.micro_step));
        assert_eq!(a, b);
    }
}

#[test]
fn events_are_ordered_and_bounded_per_window() {
    let (m, x) = calibrated(NeuronConfig::default(), 6);
    let net = compile(&m);
    let r = infer_async_event(&net, &[gather_rows(&x, &[0, 1, 2])], AsyncConfig::default()).unwrap();
    for trace in &r.traces {
        assert!(!trace.is_empty());
        let layers = trace.iter().map(|e| e.layer).max().unwrap() + 1;
        for l in 0..layers {
            let steps: Vec<usize> = trace.iter().filter(|e| e.layer == l).map(|e| e.micro_step).collect();
            assert!(steps.windows(2).all(|w| w[0] <= w[1]));
            assert!(steps.iter().all(|&s| (1..=4).contains(&s)));
        }
        let mut per: std::collections::HashMap<(usize, usize, usize, usize), usize> = Default::default();
        for e in trace {
            *per.entry((e.layer, e.channel, e.y, e.x)).or_default() += 1;
        }
        assert!(per.values().all(|&c| c <= 4));
    }
    let csv = trace_to_csv(&r.traces[0][..3]);
    assert!(csv.starts_with("layer,channel,y,x,micro_step\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn accumulations_match_profiler_sops() {
    let (m, x) = calibrated(NeuronConfig::default(), 7);
    let net = compile(&m);
    let x = gather_rows(&x, &(0..10).collect::<Vec<_>>());
    let sync = infer_sync_expanded(&net, &[x.clone()]).unwrap();
    let asy = infer_async_event(&net, &[x], AsyncConfig::default()).unwrap();
    let sops: u64 = count_sops(&sync.records, &net).unwrap().iter().map(|l| l.sops).sum();
    assert!(sops > 0);
    assert_eq!(sops, asy.accumulations);
    assert_eq!(sops, sync.accumulations);
}

#[test]
fn zero_input_is_idle() {
    let (mut m, _) = calibrated(NeuronConfig::default(), 8);
    set_betas(&mut m, -1.0);
    let b = m.params.id("head.b").unwrap();
    m.params.value_mut(b).data_mut().copy_from_slice(&[0.25, -1.5, 3.0]);
    let net = compile(&m);
    let zeros = Tensor::zeros(&[2, 1, 16, 16]);
    let r = infer_async_event(&net, &[zeros.clone()], AsyncConfig::default()).unwrap();
    assert!(r.traces.iter().all(|t| t.is_empty()));
    assert_eq!(r.accumulations, 0);
    let int = infer_integer(&net, &[zeros]).unwrap();
    let expect: Vec<f64> = [0.25f32, -1.5, 3.0].iter().map(|&v| v as f64).collect();
    assert_eq!(&int.logits.data()[..3], expect.as_slice());
    assert_eq!(&int.logits.data()[3..], expect.as_slice());
}

#[test]
fn repeated_integer_inference_is_identical() {
    let (m, x) = calibrated(NeuronConfig::default(), 9);
    let net = compile(&m);
    let a = infer_integer(&net, &[x.clone()]).unwrap();
    let b = infer_integer(&net, &[x]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn tight_queue_bound_overflows() {
    let (m, x) = calibrated(NeuronConfig::default(), 10);
    let net = compile(&m);
    let err = infer_async_event(&net, &[gather_rows(&x, &[0])], AsyncConfig { seed: 0, capacity_factor: 0.01 }).unwrap_err();
    match err {
        EngineError::QueueOverflow { peak, capacity, .. } => assert!(peak > capacity),
        other => panic!("unexpected {other}"),
    }
    let ok = infer_async_event(&net, &[gather_rows(&x, &[0])], AsyncConfig::default()).unwrap();
    assert!(ok.peak_queue > 0);
}

#[test]
fn fault_injection_is_detected() {
    let (m, x) = calibrated(NeuronConfig::default(), 11);
    let net = compile(&m);
    let x = gather_rows(&x, &[0, 1, 2, 3]);
    let healthy = equivalence_report(&net, &[x.clone()], AsyncConfig::default(), None).unwrap();
    assert!(healthy.passed(1e-4));
    assert_eq!(healthy.match_fraction(), 1.0);
    assert_eq!(healthy.max_abs_sync.len(), 4);
    let fault = Fault { layer: 2, sample: 1, neuron: 5, step: 0 };
    let bad = equivalence_report(&net, &[x], AsyncConfig::default(), Some(fault)).unwrap();
    assert!(!bad.layers_match());
    assert_eq!(bad.diffs[0].layer, healthy.layers[2].name);
    assert_eq!((bad.diffs[0].sample, bad.diffs[0].neuron), (1, 5));
    let msg = bad.ensure(1e-4).unwrap_err().to_string();
    assert!(msg.contains("neuron 5"), "{msg}");
}

#[test]
fn rejects_mismatched_frames() {
    let (m, _) = calibrated(NeuronConfig::default(), 12);
    let net = compile(&m);
    assert!(infer_integer(&net, &[Tensor::zeros(&[1, 2, 16, 16])]).is_err());
    assert!(infer_integer(&net, &[]).is_err());
}
