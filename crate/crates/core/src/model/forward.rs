use rayon::prelude::*;

use super::ops::{
    add_row_bias, gelu, gelu_grad, layer_norm, layer_norm_backward, matmul, matmul_a_bt,
    matmul_acc, matmul_at_b_acc, softmax_rows, sum_rows_acc,
};
use super::{BlockParams, ModelConfig, ModelParams, PatchMode, Real};
use crate::error::{Error, Result};

/// Number of frame embeddings, `ceil(T'/d) + 1`.
pub fn patch_count(template_len: usize, stride: usize) -> usize {
    template_len.div_ceil(stride) + 1
}

/// Cuts an `M x T'` template into flattened patches.
///
/// Frame mode yields `G` patches of `M*m` values, channel-major; patch `g`
/// covers columns `[g*d, g*d + m)`, reading zero past the last column.
/// Channel mode yields `M*G` patches of `m` values ordered channel-major then time.
pub fn extract_patches<T: Real>(x: &[T], cfg: &ModelConfig) -> Vec<T> {
    let m_ch = cfg.n_channels;
    let len = cfg.template_len;
    let win = cfg.fpe.frame_window;
    let stride = cfg.fpe.frame_stride;
    let g_count = cfg.n_embeddings();
    assert_eq!(x.len(), m_ch * len, "input must be M x T'");
    let mut out = vec![T::zero(); cfg.n_groups() * g_count * cfg.patch_len()];
    let copy_window = |row: &[T], start: usize, dst: &mut [T]| {
        if start < len {
            let end = (start + win).min(len);
            dst[..end - start].copy_from_slice(&row[start..end]);
        }
    };
    match cfg.fpe.patch_mode {
        PatchMode::Frame => {
            let plen = m_ch * win;
            for g in 0..g_count {
                let patch = &mut out[g * plen..(g + 1) * plen];
                for ch in 0..m_ch {
                    copy_window(
                        &x[ch * len..(ch + 1) * len],
                        g * stride,
                        &mut patch[ch * win..(ch + 1) * win],
                    );
                }
            }
        }
        PatchMode::Channel => {
            for ch in 0..m_ch {
                for g in 0..g_count {
                    let r = ch * g_count + g;
                    copy_window(
                        &x[ch * len..(ch + 1) * len],
                        g * stride,
                        &mut out[r * win..(r + 1) * win],
                    );
                }
            }
        }
    }
    out
}

/// Patch MLP, affine -> GELU -> affine. Returns pre-activations and embeddings.
fn patch_mlp<T: Real>(patches: &[T], params: &ModelParams<T>, cfg: &ModelConfig) -> (Vec<T>, Vec<T>) {
    let plen = cfg.patch_len();
    let rows = patches.len() / plen;
    let hid = cfg.fpe.mlp_hidden;
    let emb = cfg.fpe.embed_dim;
    let mut pre = vec![T::zero(); rows * hid];
    matmul(patches, &params.patch_w1.data, rows, plen, hid, &mut pre);
    add_row_bias(&mut pre, &params.patch_b1.data);
    let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
    let mut e = vec![T::zero(); rows * emb];
    matmul(&act, &params.patch_w2.data, rows, hid, emb, &mut e);
    add_row_bias(&mut e, &params.patch_b2.data);
    (pre, e)
}

/// Embeds every patch with the shared patch MLP; one row of width `L` per patch.
pub fn embed_patches<T: Real>(patches: &[T], params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Vec<T>> {
    if patches.len() % cfg.patch_len() != 0 {
        return Err(Error::arg(format!(
            "patch buffer of {} values is not a multiple of patch length {}",
            patches.len(),
            cfg.patch_len()
        )));
    }
    Ok(patch_mlp(patches, params, cfg).1)
}

/// Means of `window` consecutive rows, windows shifted by `shift`, applied
/// independently to each of `groups` blocks of `per_group` rows.
pub fn average_embeddings<T: Real>(
    e: &[T],
    width: usize,
    groups: usize,
    window: usize,
    shift: usize,
) -> Result<Vec<T>> {
    let per_group = e.len() / (width * groups.max(1));
    if window == 0 || shift == 0 || window > per_group {
        return Err(Error::arg(format!(
            "averaging window {window} (shift {shift}) invalid for {per_group} embeddings"
        )));
    }
    let k_count = (per_group - window) / shift + 1;
    let inv = T::one() / T::cast(window as f64);
    let mut out = vec![T::zero(); groups * k_count * width];
    for g in 0..groups {
        for k in 0..k_count {
            let dst = &mut out[(g * k_count + k) * width..(g * k_count + k + 1) * width];
            for i in 0..window {
                let r = g * per_group + k * shift + i;
                for (d, &v) in dst.iter_mut().zip(&e[r * width..(r + 1) * width]) {
                    *d = *d + v;
                }
            }
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
    }
    Ok(out)
}

/// `[cls; e_1 E0; ...; e_K E0] + E_pos`.
pub fn assemble_tokens<T: Real>(averaged: &[T], params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Vec<T>> {
    let emb = cfg.fpe.embed_dim;
    let d = cfg.fpe.token_dim;
    let k = averaged.len() / emb;
    let n = params.pos_embed.shape[0];
    if k + 1 != n {
        return Err(Error::arg(format!(
            "{k} averaged embeddings do not match {n} position embeddings"
        )));
    }
    let mut tokens = params.pos_embed.data.clone();
    for (t, c) in tokens[..d].iter_mut().zip(&params.cls_token.data) {
        *t = *t + *c;
    }
    matmul_acc(averaged, &params.proj_e0.data, k, emb, d, &mut tokens[d..]);
    Ok(tokens)
}

#[derive(Clone, Debug)]
struct BlockCache<T> {
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    n1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads x N x N` attention probabilities.
    probs: Vec<T>,
    o: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    n2: Vec<T>,
    f_pre: Vec<T>,
    f_act: Vec<T>,
}

fn block_forward<T: Real>(x: &[T], bp: &BlockParams<T>, cfg: &ModelConfig) -> (Vec<T>, BlockCache<T>) {
    let tc = &cfg.transformer;
    let d = cfg.fpe.token_dim;
    let n = x.len() / d;
    let aw = tc.attn_width();
    let dh = tc.dim_head;
    let scale = T::one() / T::cast(dh as f64).sqrt();

    let mut n1 = vec![T::zero(); n * d];
    let (xhat1, rstd1) = layer_norm(x, d, &bp.ln1_gain.data, &bp.ln1_shift.data, &mut n1);
    let mut q = vec![T::zero(); n * aw];
    let mut k = vec![T::zero(); n * aw];
    let mut v = vec![T::zero(); n * aw];
    matmul(&n1, &bp.w_q.data, n, d, aw, &mut q);
    matmul(&n1, &bp.w_k.data, n, d, aw, &mut k);
    matmul(&n1, &bp.w_v.data, n, d, aw, &mut v);

    let mut probs = vec![T::zero(); tc.heads * n * n];
    let mut o = vec![T::zero(); n * aw];
    for h in 0..tc.heads {
        let off = h * dh;
        let a = &mut probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let qi = &q[i * aw + off..i * aw + off + dh];
            for j in 0..n {
                let kj = &k[j * aw + off..j * aw + off + dh];
                a[i * n + j] = super::ops::dot(qi, kj) * scale;
            }
        }
        softmax_rows(a, n);
        for i in 0..n {
            let oi = &mut o[i * aw + off..i * aw + off + dh];
            for j in 0..n {
                let p = a[i * n + j];
                for (ov, &vv) in oi.iter_mut().zip(&v[j * aw + off..j * aw + off + dh]) {
                    *ov = *ov + p * vv;
                }
            }
        }
    }
    let mut x_mid = x.to_vec();
    matmul_acc(&o, &bp.w_out.data, n, aw, d, &mut x_mid);
    add_row_bias(&mut x_mid, &bp.b_out.data);

    let mut n2 = vec![T::zero(); n * d];
    let (xhat2, rstd2) = layer_norm(&x_mid, d, &bp.ln2_gain.data, &bp.ln2_shift.data, &mut n2);
    let mut f_pre = vec![T::zero(); n * tc.dim_mlp];
    matmul(&n2, &bp.w_ff1.data, n, d, tc.dim_mlp, &mut f_pre);
    add_row_bias(&mut f_pre, &bp.b_ff1.data);
    let f_act: Vec<T> = f_pre.iter().map(|&v| gelu(v)).collect();
    let mut x_out = x_mid;
    matmul_acc(&f_act, &bp.w_ff2.data, n, tc.dim_mlp, d, &mut x_out);
    add_row_bias(&mut x_out, &bp.b_ff2.data);

    let cache = BlockCache {
        xhat1,
        rstd1,
        n1,
        q,
        k,
        v,
        probs,
        o,
        xhat2,
        rstd2,
        n2,
        f_pre,
        f_act,
    };
    (x_out, cache)
}

fn check_finite<T: Real>(x: &[T], block: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite activation after encoder block {block}")))
    }
}

/// Pre-norm encoder: per block `x += MHSA(LN(x))`, then `x += MLP(LN(x))`.
pub fn transformer_forward<T: Real>(tokens: &[T], params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Vec<T>> {
    let mut x = tokens.to_vec();
    for (i, bp) in params.blocks.iter().enumerate() {
        x = block_forward(&x, bp, cfg).0;
        check_finite(&x, i)?;
    }
    Ok(x)
}

/// Attention probabilities of every block and head, `depth x heads x N x N`.
/// Exposed for inspection and tests.
pub fn attention_maps<T: Real>(tokens: &[T], params: &ModelParams<T>, cfg: &ModelConfig) -> Vec<Vec<T>> {
    let mut x = tokens.to_vec();
    let mut maps = Vec::new();
    for bp in &params.blocks {
        let (next, cache) = block_forward(&x, bp, cfg);
        maps.push(cache.probs);
        x = next;
    }
    maps
}

/// `logits = W^T e_cls` for the class-token row.
pub fn classify<T: Real>(cls_row: &[T], head_w: &[T], n_classes: usize) -> Vec<T> {
    let d = cls_row.len();
    let mut logits = vec![T::zero(); n_classes];
    matmul(cls_row, head_w, 1, d, n_classes, &mut logits);
    logits
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    patches: Vec<T>,
    mlp_pre: Vec<T>,
    averaged: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    enc_out: Vec<T>,
    final_xhat: Vec<T>,
    final_rstd: Vec<T>,
    cls_out: Vec<T>,
    pub logits: Vec<T>,
}

/// Forward pass keeping everything needed for the gradient.
pub fn forward_cached<T: Real>(x: &[T], params: &ModelParams<T>, cfg: &ModelConfig) -> Result<ForwardCache<T>> {
    if x.len() != cfg.n_channels * cfg.template_len {
        return Err(Error::TemplateMismatch(format!(
            "input of {} values, model expects {}x{}",
            x.len(),
            cfg.n_channels,
            cfg.template_len
        )));
    }
    let patches = extract_patches(x, cfg);
    let (mlp_pre, e) = patch_mlp(&patches, params, cfg);
    let averaged = average_embeddings(
        &e,
        cfg.fpe.embed_dim,
        cfg.n_groups(),
        cfg.fpe.avg_window,
        cfg.fpe.avg_shift,
    )?;
    let mut h = assemble_tokens(&averaged, params, cfg)?;
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (i, bp) in params.blocks.iter().enumerate() {
        let (next, cache) = block_forward(&h, bp, cfg);
        check_finite(&next, i)?;
        blocks.push(cache);
        h = next;
    }
    let d = cfg.fpe.token_dim;
    let (final_xhat, final_rstd, cls_out) = if cfg.transformer.final_norm {
        let mut out = vec![T::zero(); d];
        let (xh, rs) = layer_norm(&h[..d], d, &params.lnf_gain.data, &params.lnf_shift.data, &mut out);
        (xh, rs, out)
    } else {
        (Vec::new(), Vec::new(), h[..d].to_vec())
    };
    let logits = classify(&cls_out, &params.head_w.data, cfg.transformer.n_classes);
    Ok(ForwardCache {
        patches,
        mlp_pre,
        averaged,
        blocks,
        enc_out: h,
        final_xhat,
        final_rstd,
        cls_out,
        logits,
    })
}

/// Logits for one `M x T'` input.
pub fn forward<T: Real>(x: &[T], params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Vec<T>> {
    Ok(forward_cached(x, params, cfg)?.logits)
}

/// Logits for many inputs, evaluated in parallel; row `i` equals `forward(inputs[i])`.
pub fn forward_batch<T: Real, X: AsRef<[T]> + Sync>(
    inputs: &[X],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<Vec<Vec<T>>> {
    inputs
        .par_iter()
        .map(|x| forward(x.as_ref(), params, cfg))
        .collect()
}

fn block_backward<T: Real>(
    dy: &[T],
    c: &BlockCache<T>,
    bp: &BlockParams<T>,
    g: &mut BlockParams<T>,
    cfg: &ModelConfig,
) -> Vec<T> {
    let tc = &cfg.transformer;
    let d = cfg.fpe.token_dim;
    let n = dy.len() / d;
    let aw = tc.attn_width();
    let dh = tc.dim_head;
    let f = tc.dim_mlp;
    let scale = T::one() / T::cast(dh as f64).sqrt();

    // feed-forward branch
    matmul_at_b_acc(&c.f_act, dy, n, f, d, &mut g.w_ff2.data);
    sum_rows_acc(dy, d, &mut g.b_ff2.data);
    let mut df = vec![T::zero(); n * f];
    matmul_a_bt(dy, &bp.w_ff2.data, n, d, f, &mut df);
    for (v, &p) in df.iter_mut().zip(&c.f_pre) {
        *v = *v * gelu_grad(p);
    }
    matmul_at_b_acc(&c.n2, &df, n, d, f, &mut g.w_ff1.data);
    sum_rows_acc(&df, f, &mut g.b_ff1.data);
    let mut dn2 = vec![T::zero(); n * d];
    matmul_a_bt(&df, &bp.w_ff1.data, n, f, d, &mut dn2);
    let dmid_ln = layer_norm_backward(
        &dn2,
        &c.xhat2,
        &c.rstd2,
        &bp.ln2_gain.data,
        d,
        &mut g.ln2_gain.data,
        &mut g.ln2_shift.data,
    );
    let dmid: Vec<T> = dy.iter().zip(&dmid_ln).map(|(&a, &b)| a + b).collect();

    // attention branch
    matmul_at_b_acc(&c.o, &dmid, n, aw, d, &mut g.w_out.data);
    sum_rows_acc(&dmid, d, &mut g.b_out.data);
    let mut d_o = vec![T::zero(); n * aw];
    matmul_a_bt(&dmid, &bp.w_out.data, n, d, aw, &mut d_o);

    let mut dq = vec![T::zero(); n * aw];
    let mut dk = vec![T::zero(); n * aw];
    let mut dv = vec![T::zero(); n * aw];
    let mut da = vec![T::zero(); n * n];
    for h in 0..tc.heads {
        let off = h * dh;
        let a = &c.probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let doi = &d_o[i * aw + off..i * aw + off + dh];
            for j in 0..n {
                let vj = &c.v[j * aw + off..j * aw + off + dh];
                da[i * n + j] = super::ops::dot(doi, vj);
                let p = a[i * n + j];
                for (dvv, &dov) in dv[j * aw + off..j * aw + off + dh].iter_mut().zip(doi) {
                    *dvv = *dvv + p * dov;
                }
            }
        }
        for i in 0..n {
            let row_a = &a[i * n..(i + 1) * n];
            let row_da = &mut da[i * n..(i + 1) * n];
            let s = super::ops::dot(row_a, row_da);
            for (x, &p) in row_da.iter_mut().zip(row_a) {
                *x = p * (*x - s) * scale;
            }
        }
        for i in 0..n {
            for j in 0..n {
                let ds = da[i * n + j];
                if ds == T::zero() {
                    continue;
                }
                for t in 0..dh {
                    dq[i * aw + off + t] = dq[i * aw + off + t] + ds * c.k[j * aw + off + t];
                    dk[j * aw + off + t] = dk[j * aw + off + t] + ds * c.q[i * aw + off + t];
                }
            }
        }
    }
    matmul_at_b_acc(&c.n1, &dq, n, d, aw, &mut g.w_q.data);
    matmul_at_b_acc(&c.n1, &dk, n, d, aw, &mut g.w_k.data);
    matmul_at_b_acc(&c.n1, &dv, n, d, aw, &mut g.w_v.data);
    let mut dn1 = vec![T::zero(); n * d];
    let mut tmp = vec![T::zero(); n * d];
    for (dx, w) in [(&dq, &bp.w_q), (&dk, &bp.w_k), (&dv, &bp.w_v)] {
        matmul_a_bt(dx, &w.data, n, aw, d, &mut tmp);
        for (a, &b) in dn1.iter_mut().zip(&tmp) {
            *a = *a + b;
        }
    }
    let din_ln = layer_norm_backward(
        &dn1,
        &c.xhat1,
        &c.rstd1,
        &bp.ln1_gain.data,
        d,
        &mut g.ln1_gain.data,
        &mut g.ln1_shift.data,
    );
    dmid.iter().zip(&din_ln).map(|(&a, &b)| a + b).collect()
}

/// Accumulates into `grads` the gradient of a scalar loss whose derivative
/// with respect to the logits is `dlogits`.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    cache: &ForwardCache<T>,
    dlogits: &[T],
    grads: &mut ModelParams<T>,
) {
    let d = cfg.fpe.token_dim;
    let c = cfg.transformer.n_classes;
    let n = cfg.n_tokens();

    // head
    matmul_at_b_acc(&cache.cls_out, dlogits, 1, d, c, &mut grads.head_w.data);
    let mut dcls = vec![T::zero(); d];
    matmul_a_bt(dlogits, &params.head_w.data, 1, c, d, &mut dcls);

    let mut dh = vec![T::zero(); n * d];
    if cfg.transformer.final_norm {
        let dx = layer_norm_backward(
            &dcls,
            &cache.final_xhat,
            &cache.final_rstd,
            &params.lnf_gain.data,
            d,
            &mut grads.lnf_gain.data,
            &mut grads.lnf_shift.data,
        );
        dh[..d].copy_from_slice(&dx);
    } else {
        dh[..d].copy_from_slice(&dcls);
    }
    debug_assert_eq!(cache.enc_out.len(), dh.len());

    for i in (0..params.blocks.len()).rev() {
        dh = block_backward(&dh, &cache.blocks[i], &params.blocks[i], &mut grads.blocks[i], cfg);
    }

    // tokens
    for (g, &v) in grads.cls_token.data.iter_mut().zip(&dh[..d]) {
        *g = *g + v;
    }
    for (g, &v) in grads.pos_embed.data.iter_mut().zip(&dh) {
        *g = *g + v;
    }
    let emb = cfg.fpe.embed_dim;
    let k_tot = n - 1;
    matmul_at_b_acc(&cache.averaged, &dh[d..], k_tot, emb, d, &mut grads.proj_e0.data);
    let mut davg = vec![T::zero(); k_tot * emb];
    matmul_a_bt(&dh[d..], &params.proj_e0.data, k_tot, d, emb, &mut davg);

    // averaging
    let g_count = cfg.n_embeddings();
    let k_count = cfg.n_averaged();
    let window = cfg.fpe.avg_window;
    let shift = cfg.fpe.avg_shift;
    let inv = T::one() / T::cast(window as f64);
    let rows = cfg.n_groups() * g_count;
    let mut de = vec![T::zero(); rows * emb];
    for grp in 0..cfg.n_groups() {
        for k in 0..k_count {
            let src = &davg[(grp * k_count + k) * emb..(grp * k_count + k + 1) * emb];
            for i in 0..window {
                let r = grp * g_count + k * shift + i;
                for (dst, &s) in de[r * emb..(r + 1) * emb].iter_mut().zip(src) {
                    *dst = *dst + s * inv;
                }
            }
        }
    }

    // patch MLP
    let hid = cfg.fpe.mlp_hidden;
    let plen = cfg.patch_len();
    let act: Vec<T> = cache.mlp_pre.iter().map(|&v| gelu(v)).collect();
    matmul_at_b_acc(&act, &de, rows, hid, emb, &mut grads.patch_w2.data);
    sum_rows_acc(&de, emb, &mut grads.patch_b2.data);
    let mut dpre = vec![T::zero(); rows * hid];
    matmul_a_bt(&de, &params.patch_w2.data, rows, emb, hid, &mut dpre);
    for (v, &p) in dpre.iter_mut().zip(&cache.mlp_pre) {
        *v = *v * gelu_grad(p);
    }
    matmul_at_b_acc(&cache.patches, &dpre, rows, plen, hid, &mut grads.patch_w1.data);
    sum_rows_acc(&dpre, hid, &mut grads.patch_b1.data);
}
