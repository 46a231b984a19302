use super::*;
use crate::align::AlignStages;
use crate::data::{DomainId, Task};
use crate::model::Tensor;
use rand::Rng;

fn toy_model(n_channels: usize, template_len: usize) -> ModelConfig {
    let mut c = ModelConfig::preset(Task::Mi, n_channels, template_len);
    c.fpe.embed_dim = 4;
    c.fpe.token_dim = 8;
    c.fpe.mlp_hidden = 8;
    c.fpe.frame_window = 8;
    c.fpe.frame_stride = 8;
    c.fpe.avg_window = 3;
    c.fpe.avg_shift = 2;
    c.transformer.depth = 1;
    c.transformer.heads = 2;
    c.transformer.dim_head = 4;
    c.transformer.dim_mlp = 8;
    c
}

fn toy_layout(n_channels: usize, template_len: usize) -> AlignedLayout {
    let mut l = AlignedLayout::new(Task::Mi, AlignStages::default());
    l.template.target_channels.truncate(n_channels);
    l.template.template_len = template_len;
    l
}

fn toy_checkpoint(seed: u64) -> Checkpoint {
    Checkpoint::init(toy_model(2, 64), toy_layout(2, 64), vec!["a".into(), "b".into()], seed).unwrap()
}

/// Class sets the sign of a constant offset on channel 0, plus noise.
fn toy_data(n: usize, seed: u64) -> Vec<TemplateInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let sign = if label == 0 { 1.0 } else { -1.0 };
            let mut t = TemplateInput::zeros(2, 64, label, DomainId::new("toy", &format!("s{}", i % 3), "0"));
            for (j, v) in t.data.iter_mut().enumerate() {
                *v = rng.gen_range(-0.3..0.3) + if j < 64 { sign } else { 0.0 };
            }
            t
        })
        .collect()
}

fn fast_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 16,
        lr_init: 1e-3,
        lr_max: 1e-2,
        seed,
        max_steps: Some(200),
        ..TrainConfig::default()
    }
}

#[test]
fn cross_entropy_examples() {
    let (l, g) = cross_entropy(&[0.0f64, 0.0], 0);
    assert!((l - 2f64.ln()).abs() < 1e-12);
    assert_eq!(g, vec![-0.5, 0.5]);
    let (l, g) = cross_entropy(&[1000.0f64, 0.0], 0);
    assert!(l.abs() < 1e-12 && g.iter().all(|v| v.is_finite()));
    let (l, _) = cross_entropy(&[1.0f64, 2.0, 3.0], 2);
    let want = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
    assert!((l - want).abs() < 1e-12);
    assert!((l - 0.4076).abs() < 1e-4);
}

#[test]
fn adamw_examples() {
    let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
    let (mut th, mut m, mut v) = ([1.0f32], [0.0f32], [0.0f32]);
    adamw_update(&mut th, &[1.0], &mut m, &mut v, 1, 0.1, true, &cfg);
    let want = 1.0 - 0.1 / (1.0 + 1e-8);
    assert!((th[0] as f64 - want).abs() < 1e-7);

    let mut th = [2.0f32, -4.0];
    adamw_update(&mut th, &[0.0, 0.0], &mut [0.0; 2], &mut [0.0; 2], 1, 0.1, true, &cfg);
    assert_eq!(th, [2.0, -4.0]);

    let cfg = TrainConfig { weight_decay: 0.5, ..TrainConfig::default() };
    let mut th = [2.0f32, -4.0];
    adamw_update(&mut th, &[0.0, 0.0], &mut [0.0; 2], &mut [0.0; 2], 1, 0.1, true, &cfg);
    assert_eq!(th, [2.0 * 0.95, -4.0 * 0.95]);
    let mut th = [2.0f32];
    adamw_update(&mut th, &[0.0], &mut [0.0], &mut [0.0], 1, 0.1, false, &cfg);
    assert_eq!(th, [2.0]);
}

#[test]
fn decay_skips_biases_norms_and_embeddings() {
    let mut ck = toy_checkpoint(0);
    let before = ck.params.clone();
    let grads = ck.params.zeros_like();
    let cfg = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
    let mut st = OptimizerState::new(&ck.params);
    adamw_step(&mut ck.params, &grads, &mut st, 0.5, &cfg);
    for ((name, a), b) in before.names().iter().zip(before.tensors()).zip(ck.params.tensors()) {
        let decayed = name.contains("w_") || name.ends_with("_w") || name == "proj_e0" || name.starts_with("patch_w");
        assert_eq!(ModelParams::<f32>::decays(name), decayed, "{name}");
        if decayed {
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| (*y - 0.95 * *x).abs() < 1e-7), "{name}");
        } else {
            assert_eq!(a, b, "{name}");
        }
    }
}

#[test]
fn onecycle_endpoints() {
    let cfg = TrainConfig::default();
    let total = 1000;
    assert_eq!(onecycle_lr(0, total, &cfg).unwrap(), 2.5e-4);
    assert!((onecycle_lr(300, total, &cfg).unwrap() - 5e-4).abs() < 1e-12);
    let last = onecycle_lr(total - 1, total, &cfg).unwrap();
    assert!((last - 2.5e-6).abs() < 0.01 * 2.5e-6);
    let max = (0..total).map(|s| onecycle_lr(s, total, &cfg).unwrap()).fold(0.0, f64::max);
    assert!((max - 5e-4).abs() < 1e-12);
    assert!(onecycle_lr(total, total, &cfg).is_err());
    assert_eq!(onecycle_lr(0, 1, &cfg).unwrap(), 2.5e-4);
}

#[test]
fn duplicated_batch_keeps_gradient() {
    let ck = toy_checkpoint(1);
    let data = toy_data(3, 2);
    let xs: Vec<&[f32]> = data.iter().map(|t| t.data.as_slice()).collect();
    let ys: Vec<usize> = data.iter().map(|t| t.label).collect();
    let p64 = ck.params.cast::<f64>();
    let x64: Vec<Vec<f64>> = xs.iter().map(|x| x.iter().map(|&v| v as f64).collect()).collect();
    let (l1, g1) = batch_gradient(&p64, &ck.model, &x64, &ys).unwrap();
    let x2: Vec<Vec<f64>> = x64.iter().chain(&x64).cloned().collect();
    let y2: Vec<usize> = ys.iter().chain(&ys).copied().collect();
    let (l2, g2) = batch_gradient(&p64, &ck.model, &x2, &y2).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_input_gives_dead_first_layer() {
    let mut ck = toy_checkpoint(3);
    ck.params.pos_embed = Tensor::zeros(&ck.params.pos_embed.shape);
    ck.params.cls_token = Tensor::zeros(&ck.params.cls_token.shape);
    let x = vec![0.0f32; 128];
    let (_, g) = batch_gradient(&ck.params, &ck.model, &[x.as_slice(), x.as_slice()], &[0, 1]).unwrap();
    assert!(g.patch_w1.data.iter().all(|&v| v == 0.0));
}

#[test]
fn thread_count_does_not_change_gradient() {
    let ck = toy_checkpoint(4);
    let data = toy_data(13, 5);
    let xs: Vec<&[f32]> = data.iter().map(|t| t.data.as_slice()).collect();
    let ys: Vec<usize> = data.iter().map(|t| t.label).collect();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| batch_gradient(&ck.params, &ck.model, &xs, &ys).unwrap())
    };
    let (l1, g1) = run(1);
    let (l3, g3) = run(3);
    assert_eq!(l1.to_bits(), l3.to_bits());
    assert_eq!(g1, g3);
}

#[test]
fn separable_toy_reaches_low_loss() {
    let data = toy_data(96, 6);
    let out = train(&data, toy_checkpoint(7), &fast_cfg(8)).unwrap();
    assert_eq!(out.history.len(), 200);
    let tail: f64 = out.history[190..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
    assert!(tail < 0.1, "final loss {tail}");
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = toy_data(20, 9);
    let start = toy_checkpoint(10);
    let cfg = TrainConfig { lr_init: 0.0, lr_max: 0.0, weight_decay: 0.0, max_steps: Some(5), ..fast_cfg(1) };
    let out = train(&data, start.clone(), &cfg).unwrap();
    assert_eq!(out.checkpoint.params, start.params);
}

#[test]
fn same_seed_same_history() {
    let data = toy_data(40, 11);
    let cfg = TrainConfig { max_steps: Some(15), ..fast_cfg(12) };
    let a = train(&data, toy_checkpoint(13), &cfg).unwrap();
    let b = train(&data, toy_checkpoint(13), &cfg).unwrap();
    let bits = |o: &TrainOutcome| o.history.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
}

#[test]
fn divergence_returns_last_good_parameters() {
    let data = toy_data(20, 14);
    let mut start = toy_checkpoint(15);
    start.params.head_w.data[0] = f32::NAN;
    let cfg = TrainConfig { max_steps: Some(3), ..fast_cfg(1) };
    let out = train(&data, start.clone(), &cfg).unwrap();
    assert_eq!(out.diverged_at, Some(0));
    assert!(out.history.is_empty());
}

#[test]
fn convex_probe_is_monotone() {
    // Only head_w moves, so the loss is convex in the trained weights.
    let ck = toy_checkpoint(16);
    let data = toy_data(24, 17);
    let p64 = ck.params.cast::<f64>();
    let x64: Vec<Vec<f64>> = data.iter().map(|t| t.data.iter().map(|&v| v as f64).collect()).collect();
    let ys: Vec<usize> = data.iter().map(|t| t.label).collect();
    let mut p = p64;
    let mut last = f64::INFINITY;
    for _ in 0..30 {
        let (loss, g) = batch_gradient(&p, &ck.model, &x64, &ys).unwrap();
        assert!(loss <= last + 1e-12, "{loss} > {last}");
        last = loss;
        for (w, d) in p.head_w.data.iter_mut().zip(&g.head_w.data) {
            *w -= 0.05 * d;
        }
    }
}

#[test]
fn chronological_split_examples() {
    let trials: Vec<TemplateInput> = (0..100)
        .map(|i| TemplateInput::zeros(1, 4, i % 2, DomainId::new("d", "s1", "0")))
        .collect();
    let (tune, eval) = chronological_split(&trials, 0.3).unwrap();
    assert_eq!((tune.len(), eval.len()), (30, 70));
    assert_eq!(tune[..], trials[..30]);
    assert!(chronological_split(&trials[..1], 0.3).is_err());
    assert!(chronological_split(&trials, 1.0).is_err());
}

#[test]
fn zero_step_finetune_is_identity() {
    let ck = toy_checkpoint(18);
    let data = toy_data(30, 19);
    let cfg = TrainConfig { max_steps: Some(0), ..fast_cfg(1) };
    let out = finetune(&ck, &data, 0.3, &cfg).unwrap();
    assert_eq!(out.tuned.checkpoint, ck);
    assert_eq!(out.eval.len(), 21);
}

#[test]
fn finetune_continues_optimizer_state() {
    let data = toy_data(40, 20);
    let cfg = TrainConfig { max_steps: Some(4), ..fast_cfg(2) };
    let first = train(&data, toy_checkpoint(21), &cfg).unwrap().checkpoint;
    assert_eq!(first.optimizer.as_ref().unwrap().step, 4);
    let tuned = finetune(&first, &data, 0.5, &cfg).unwrap();
    assert_eq!(tuned.tuned.checkpoint.optimizer.unwrap().step, 8);
}
