//! Oracles shared by the integration tests.
#![allow(dead_code)]

use afpm::data::Task;
use afpm::model::{average_embeddings, backward, extract_patches, forward, forward_cached, ModelConfig, ModelParams, PatchMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let loss = -(logits[label] - max - z.ln());
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, l)| (l - max).exp() / z - if i == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

pub fn reduced_config(mode: PatchMode) -> ModelConfig {
    let mut cfg = ModelConfig::preset(Task::Mi, 3, 64);
    cfg.fpe.embed_dim = 4;
    cfg.fpe.token_dim = 8;
    cfg.fpe.mlp_hidden = 8;
    cfg.fpe.frame_window = 10;
    cfg.fpe.frame_stride = 8;
    cfg.fpe.avg_window = 3;
    cfg.fpe.avg_shift = 2;
    cfg.fpe.patch_mode = mode;
    cfg.transformer.depth = 1;
    cfg.transformer.heads = 2;
    cfg.transformer.dim_head = 4;
    cfg.transformer.dim_mlp = 8;
    cfg.validate().unwrap();
    cfg
}

fn batch_loss(params: &ModelParams<f64>, cfg: &ModelConfig, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(x, &y)| ce(&forward(x, params, cfg).unwrap(), y).0)
        .sum::<f64>()
        / xs.len() as f64
}

/// Largest relative error between analytic and central-difference gradients, per tensor.
pub fn gradient_errors(mode: PatchMode) -> Vec<(String, f64)> {
    let cfg = reduced_config(mode);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ModelParams::<f64>::init(&cfg, &mut rng);
    // move away from the symmetric initial point so every path carries gradient
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let xs: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..3 * 50).map(|_| rng.gen_range(-1.0..1.0)).chain(std::iter::repeat(0.0).take(3 * 14)).collect())
        .collect();
    // rows of the template are channel-major: rebuild so that padding sits at the row ends
    let xs: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            let mut out = vec![0.0; 3 * 64];
            for ch in 0..3 {
                out[ch * 64..ch * 64 + 50].copy_from_slice(&x[ch * 50..ch * 50 + 50]);
            }
            out
        })
        .collect();
    let ys = [0usize, 1, 1];

    let mut grads = params.zeros_like();
    for (x, &y) in xs.iter().zip(&ys) {
        let cache = forward_cached(x, &params, &cfg).unwrap();
        let (_, dl) = ce(&cache.logits, y);
        backward(&params, &cfg, &cache, &dl, &mut grads);
    }
    grads.scale(1.0 / xs.len() as f64);

    let names = params.names();
    let mut report = Vec::new();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data.clone()).collect();
    let h = 1e-4;
    for (ti, name) in names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..analytic[ti].len() {
            let orig = params.tensors()[ti].data[i];
            params.tensors_mut()[ti].data[i] = orig + h;
            let lp = batch_loss(&params, &cfg, &xs, &ys);
            params.tensors_mut()[ti].data[i] = orig - h;
            let lm = batch_loss(&params, &cfg, &xs, &ys);
            params.tensors_mut()[ti].data[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = analytic[ti][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        report.push((name.to_string(), worst));
    }
    report
}

/// Window starts on the stride grid, enumerated over a zero-padded copy of the
/// signal long enough to hold every window that starts inside it or at its end.
fn enumerate_starts(len: usize, stride: usize) -> Vec<usize> {
    (0..=len + stride).filter(|s| s % stride == 0 && *s <= len.div_ceil(stride) * stride).collect()
}

fn window(row: &[f64], start: usize, win: usize) -> Vec<f64> {
    (start..start + win).map(|i| row.get(i).copied().unwrap_or(0.0)).collect()
}

fn config(m: usize, len: usize, d: usize, win: usize, p: usize, h: usize, mode: PatchMode) -> ModelConfig {
    let mut c = ModelConfig::preset(Task::Mi, m, len);
    c.fpe.frame_stride = d;
    c.fpe.frame_window = win;
    c.fpe.avg_window = p;
    c.fpe.avg_shift = h;
    c.fpe.patch_mode = mode;
    c
}

/// Checks `G`, `K`, token counts, patch contents and window means for one
/// parameter set against enumeration.
pub fn check_index_case(len: usize, d: usize, win: usize, p: usize, h: usize) -> Result<(), String> {
    let case = format!("T'={len} d={d} m={win} P={p} h={h}");
    let ensure = |ok: bool, what: &str| if ok { Ok(()) } else { Err(format!("{what} for {case}")) };
    let m = 2;
    let starts = enumerate_starts(len, d);
    let g = len.div_ceil(d) + 1;
    ensure(starts.len() == g, "G differs from the enumerated patch count")?;

    let windows: Vec<usize> = (0..g).filter(|w| w % h == 0 && w + p <= g).collect();
    let k = (g - p) / h + 1;
    ensure(windows.len() == k, "K differs from the enumerated window count")?;

    let x: Vec<f64> = (0..m * len).map(|i| i as f64 + 1.0).collect();
    let frame = config(m, len, d, win, p, h, PatchMode::Frame);
    ensure(frame.n_embeddings() == g && frame.n_averaged() == k && frame.n_tokens() == k + 1, "frame config counts")?;
    let patches = extract_patches(&x, &frame);
    ensure(patches.len() == g * m * win, "frame patch buffer length")?;
    for (j, &s) in starts.iter().enumerate() {
        let mut expect = Vec::new();
        for ch in 0..m {
            expect.extend(window(&x[ch * len..(ch + 1) * len], s, win));
        }
        ensure(patches[j * m * win..(j + 1) * m * win] == expect[..], "frame patch contents")?;
    }

    let chan = config(m, len, d, win, p, h, PatchMode::Channel);
    ensure(chan.n_tokens() == m * k + 1, "channel patch token count")?;
    let cp = extract_patches(&x, &chan);
    for ch in 0..m {
        for (j, &s) in starts.iter().enumerate() {
            let r = ch * g + j;
            ensure(cp[r * win..(r + 1) * win] == window(&x[ch * len..(ch + 1) * len], s, win)[..], "channel patch contents")?;
        }
    }

    let width = 3;
    let e: Vec<f64> = (0..m * g * width).map(|i| (i * 7 % 13) as f64).collect();
    let avg = average_embeddings(&e, width, m, p, h).map_err(|e| e.to_string())?;
    ensure(avg.len() == m * k * width, "averaged length")?;
    for grp in 0..m {
        for (kk, &w) in windows.iter().enumerate() {
            for c in 0..width {
                let mean = (w..w + p).map(|r| e[(grp * g + r) * width + c]).sum::<f64>() / p as f64;
                let got = avg[(grp * k + kk) * width + c];
                ensure((got - mean).abs() <= 1e-12 * mean.abs().max(1.0), "window mean")?;
            }
        }
    }
    Ok(())
}
