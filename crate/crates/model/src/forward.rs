//! Training-time forward pass and its hand-written backward pass.
//!
//! Sequences are processed one at a time, unpadded, so padding never
//! reaches attention or the loss. Pre-LN blocks:
//!
//! ```text
//! x += Wo · attn(LN1(x))          q, v carry LoRA
//! x += W2 · gelu(W1 · LN2(x))     W1, W2 carry LoRA
//! ```

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, NdFloat, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use uivlm_core::raster::Raster;
use uivlm_core::sequence::ModelInput;

use crate::config::{FreezeFlags, ModelConfig};
use crate::error::InputError;
use crate::params::{cast, Block, Group, Lora, Params};

const LN_EPS: f64 = 1e-5;

/// Pixels of each patch, row-major patches, row-major pixels, scaled to
/// `[0, 1]`.
pub fn patchify<F: NdFloat>(r: &Raster, cfg: &ModelConfig) -> Array2<F> {
    let per_row = cfg.image_px / cfg.patch_px;
    let p = cfg.patch_px;
    let scale: F = cast(1.0 / 255.0);
    Array2::from_shape_fn((cfg.n_patches(), cfg.patch_dim()), |(patch, i)| {
        let (pr, pc) = (patch / per_row, patch % per_row);
        let (y, x) = (pr * p + i / p, pc * p + i % p);
        F::from(r.get(y, x)).expect("u8 converts") * scale
    })
}

pub(crate) fn validate_input(cfg: &ModelConfig, m: &ModelInput) -> Result<(), InputError> {
    if m.len() > cfg.max_seq_len {
        return Err(InputError::TooLong {
            len: m.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&t) = m.token_ids.iter().find(|t| **t as usize >= cfg.vocab_size) {
        return Err(InputError::BadToken(t));
    }
    m.check().map_err(InputError::Slots)?;
    for s in &m.vision_slots {
        if s.patch >= cfg.n_patches() {
            return Err(InputError::Slots(format!(
                "slot at {} uses patch {} of {}",
                s.position,
                s.patch,
                cfg.n_patches()
            )));
        }
    }
    for (index, img) in m.images.iter().enumerate() {
        if img.height() != cfg.image_px || img.width() != cfg.image_px {
            return Err(InputError::ImageShape {
                index,
                height: img.height(),
                width: img.width(),
                expected: cfg.image_px,
            });
        }
    }
    Ok(())
}

pub(crate) struct EmbedCache<F> {
    patches: Vec<Array2<F>>,
    /// Vision encoder outputs, `n_patches x l` per image.
    encoded: Vec<Array2<F>>,
}

/// Vision encoder and projection for one image: `W_proj (W p + b + pos)`.
pub(crate) fn encode_image<F: NdFloat>(
    p: &Params<F>,
    patches: &Array2<F>,
) -> (Array2<F>, Array2<F>) {
    let mut v = patches.dot(&p.ve_w.t());
    v += &p.ve_b;
    v += &p.ve_pos;
    let z = v.dot(&p.proj.t());
    (v, z)
}

/// Input embeddings: token or projected patch, plus position.
pub(crate) fn embed<F: NdFloat>(p: &Params<F>, m: &ModelInput) -> (Array2<F>, EmbedCache<F>) {
    let cfg = &p.config;
    let mut cache = EmbedCache {
        patches: Vec::with_capacity(m.images.len()),
        encoded: Vec::with_capacity(m.images.len()),
    };
    let mut projected = Vec::with_capacity(m.images.len());
    for img in &m.images {
        let patches = patchify(img, cfg);
        let (v, z) = encode_image(p, &patches);
        cache.patches.push(patches);
        cache.encoded.push(v);
        projected.push(z);
    }
    let mut x = Array2::zeros((m.len(), cfg.d_model));
    let mut slots = m.vision_slots.iter().peekable();
    for (t, &tok) in m.token_ids.iter().enumerate() {
        let mut row = x.row_mut(t);
        match slots.peek() {
            Some(s) if s.position == t => {
                row.assign(&projected[s.image_index].row(s.patch));
                slots.next();
            }
            _ => row.assign(&p.tok_emb.row(tok as usize)),
        }
        row += &p.pos_emb.row(t);
    }
    (x, cache)
}

fn embed_backward<F: NdFloat>(
    p: &Params<F>,
    m: &ModelInput,
    cache: &EmbedCache<F>,
    dx: &Array2<F>,
    freeze: &FreezeFlags,
    g: &mut Params<F>,
) {
    let cfg = &p.config;
    let mut dz: Vec<Array2<F>> = m
        .images
        .iter()
        .map(|_| Array2::zeros((cfg.n_patches(), cfg.d_model)))
        .collect();
    let mut slots = m.vision_slots.iter().peekable();
    let train_tok = Group::TokenEmbedding.trainable(freeze);
    let train_base = Group::DecoderBase.trainable(freeze);
    for (t, &tok) in m.token_ids.iter().enumerate() {
        let d = dx.row(t);
        match slots.peek() {
            Some(s) if s.position == t => {
                let mut r = dz[s.image_index].row_mut(s.patch);
                r += &d;
                slots.next();
            }
            _ if train_tok => {
                let mut r = g.tok_emb.row_mut(tok as usize);
                r += &d;
            }
            _ => {}
        }
        if train_base {
            let mut r = g.pos_emb.row_mut(t);
            r += &d;
        }
    }
    let train_ve = Group::VisionEncoder.trainable(freeze);
    for ((dz, v), patches) in dz.iter().zip(&cache.encoded).zip(&cache.patches) {
        general_mat_mul(F::one(), &dz.t(), v, F::one(), &mut g.proj);
        if train_ve {
            let dv = dz.dot(&p.proj);
            general_mat_mul(F::one(), &dv.t(), patches, F::one(), &mut g.ve_w);
            g.ve_b += &dv.sum_axis(Axis(0));
            g.ve_pos += &dv;
        }
    }
}

pub(crate) struct LnCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
}

pub(crate) fn layer_norm<F: NdFloat>(
    x: ArrayView2<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
) -> (Array2<F>, LnCache<F>) {
    let n = x.ncols();
    let nf: F = cast(n as f64);
    let eps: F = cast(LN_EPS);
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / nf;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().fold(F::zero(), |a, &v| a + v * v) / nf;
        *is = F::one() / (var + eps).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * gamma + beta;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward<F: NdFloat>(
    dy: &Array2<F>,
    c: &LnCache<F>,
    gamma: &Array1<F>,
    grads: Option<(&mut Array1<F>, &mut Array1<F>)>,
) -> Array2<F> {
    if let Some((dg, db)) = grads {
        *dg += &(dy * &c.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let nf: F = cast(gamma.len() as f64);
    let mut dx = dy * gamma;
    for ((mut row, xh), &is) in dx.rows_mut().into_iter().zip(c.xhat.rows()).zip(&c.inv_std) {
        let mean_d = row.sum() / nf;
        let mean_dx = row.iter().zip(xh).fold(F::zero(), |a, (&d, &x)| a + d * x) / nf;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|d, &x| *d = (*d - mean_d - x * mean_dx) * is);
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: NdFloat>(u: F) -> F {
    let half: F = cast(0.5);
    let inner = cast::<F>(GELU_C) * (u + cast::<F>(GELU_A) * u * u * u);
    half * u * (F::one() + inner.tanh())
}

fn gelu_grad<F: NdFloat>(u: F) -> F {
    let half: F = cast(0.5);
    let c: F = cast(GELU_C);
    let a: F = cast(GELU_A);
    let th = (c * (u + a * u * u * u)).tanh();
    half * (F::one() + th)
        + half * u * (F::one() - th * th) * c * (F::one() + cast::<F>(3.0) * a * u * u)
}

struct LoraCache<F> {
    /// Adapter input after dropout, when dropout is active.
    dropped: Option<Array2<F>>,
    /// `dropped · Aᵀ`
    z: Array2<F>,
}

/// `h Wᵀ + s · (drop(h) Aᵀ) Bᵀ`
fn lora_linear<F: NdFloat>(
    h: &Array2<F>,
    w: &Array2<F>,
    l: &Lora<F>,
    scale: F,
    mask: Option<Array2<F>>,
) -> (Array2<F>, LoraCache<F>) {
    let dropped = mask.map(|m| m * h);
    let z = dropped.as_ref().unwrap_or(h).dot(&l.a.t());
    let mut y = h.dot(&w.t());
    general_mat_mul(scale, &z, &l.b.t(), F::one(), &mut y);
    (y, LoraCache { dropped, z })
}

struct LinearGrads<'a, F> {
    w: Option<&'a mut Array2<F>>,
    lora: Option<&'a mut Lora<F>>,
}

#[allow(clippy::too_many_arguments)]
fn lora_linear_backward<F: NdFloat>(
    dy: &Array2<F>,
    h: &Array2<F>,
    w: &Array2<F>,
    l: &Lora<F>,
    scale: F,
    c: &LoraCache<F>,
    mask: Option<&Array2<F>>,
    grads: LinearGrads<'_, F>,
) -> Array2<F> {
    let mut dh = dy.dot(w);
    let dyb = dy.dot(&l.b);
    let mut dhd = dyb.dot(&l.a);
    if let Some(m) = mask {
        dhd *= m;
    }
    dh.scaled_add(scale, &dhd);
    if let Some(dw) = grads.w {
        general_mat_mul(F::one(), &dy.t(), h, F::one(), dw);
    }
    if let Some(dl) = grads.lora {
        general_mat_mul(scale, &dy.t(), &c.z, F::one(), &mut dl.b);
        general_mat_mul(
            scale,
            &dyb.t(),
            c.dropped.as_ref().unwrap_or(h),
            F::one(),
            &mut dl.a,
        );
    }
    dh
}

/// Causal multi-head attention. Returns the concatenated head outputs and
/// the attention weights of every head.
pub(crate) fn attention<F: NdFloat>(
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    n_heads: usize,
) -> (Array2<F>, Vec<Array2<F>>) {
    let (t, d) = q.dim();
    let dh = d / n_heads;
    let inv: F = cast(1.0 / (dh as f64).sqrt());
    let mut out = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
            softmax_prefix(&mut row, i + 1, inv);
        }
        out.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    (out, probs)
}

/// Softmax of `scale * row[..n]` in place; entries from `n` on become 0.
pub(crate) fn softmax_prefix<F: NdFloat>(row: &mut ndarray::ArrayViewMut1<F>, n: usize, scale: F) {
    let mut max = F::neg_infinity();
    for v in row.iter_mut().take(n) {
        *v *= scale;
        max = max.max(*v);
    }
    let mut sum = F::zero();
    for v in row.iter_mut().take(n) {
        *v = (*v - max).exp();
        sum += *v;
    }
    for (j, v) in row.iter_mut().enumerate() {
        *v = if j < n { *v / sum } else { F::zero() };
    }
}

fn attention_backward<F: NdFloat>(
    d_out: &Array2<F>,
    q: &Array2<F>,
    k: &Array2<F>,
    v: &Array2<F>,
    probs: &[Array2<F>],
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let (_, d) = q.dim();
    let n_heads = probs.len();
    let dh = d / n_heads;
    let inv: F = cast(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros(q.dim());
    let mut dk = Array2::zeros(k.dim());
    let mut dv = Array2::zeros(v.dim());
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let doh = d_out.slice(cols);
        let mut ds = doh.dot(&v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        for (mut dr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = dr.iter().zip(pr).fold(F::zero(), |a, (&x, &y)| a + x * y);
            Zip::from(&mut dr)
                .and(&pr)
                .for_each(|x, &y| *x = y * (*x - dot) * inv);
        }
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}

/// Dropout masks for the four adapter inputs of one block.
struct BlockMasks<F> {
    q: Option<Array2<F>>,
    v: Option<Array2<F>>,
    w1: Option<Array2<F>>,
    w2: Option<Array2<F>>,
}

/// Source of dropout masks; `None` means evaluation mode.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask<F: NdFloat>(&mut self, rows: usize, cols: usize) -> Option<Array2<F>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep: F = cast(1.0 / (1.0 - self.rate));
        let rate = self.rate;
        let rng = &mut *self.rng;
        Some(Array2::from_shape_fn((rows, cols), |_| {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                keep
            }
        }))
    }
}

struct BlockCache<F> {
    ln1: LnCache<F>,
    h1: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    cq: LoraCache<F>,
    cv: LoraCache<F>,
    probs: Vec<Array2<F>>,
    o: Array2<F>,
    ln2: LnCache<F>,
    h2: Array2<F>,
    u: Array2<F>,
    g: Array2<F>,
    c1: LoraCache<F>,
    c2: LoraCache<F>,
    masks: BlockMasks<F>,
}

fn block_forward<F: NdFloat>(
    b: &Block<F>,
    cfg: &ModelConfig,
    x: &mut Array2<F>,
    dropout: &mut Option<Dropout<'_>>,
) -> BlockCache<F> {
    let scale: F = cast(cfg.lora_scale());
    let (t, k) = x.dim();
    let mut mask = |cols: usize| dropout.as_mut().and_then(|d| d.mask::<F>(t, cols));
    let masks = BlockMasks {
        q: mask(k),
        v: mask(k),
        w1: mask(k),
        w2: mask(cfg.d_ff),
    };
    let (h1, ln1) = layer_norm(x.view(), &b.ln1_g, &b.ln1_b);
    let (q, cq) = lora_linear(&h1, &b.wq, &b.lora_q, scale, masks.q.clone());
    let kk = h1.dot(&b.wk.t());
    let (v, cv) = lora_linear(&h1, &b.wv, &b.lora_v, scale, masks.v.clone());
    let (o, probs) = attention(&q, &kk, &v, cfg.n_heads);
    general_mat_mul(F::one(), &o, &b.wo.t(), F::one(), x);
    let (h2, ln2) = layer_norm(x.view(), &b.ln2_g, &b.ln2_b);
    let (u, c1) = lora_linear(&h2, &b.w1, &b.lora_1, scale, masks.w1.clone());
    let g = u.mapv(gelu);
    let (f, c2) = lora_linear(&g, &b.w2, &b.lora_2, scale, masks.w2.clone());
    *x += &f;
    BlockCache {
        ln1,
        h1,
        q,
        k: kk,
        v,
        cq,
        cv,
        probs,
        o,
        ln2,
        h2,
        u,
        g,
        c1,
        c2,
        masks,
    }
}

/// Backpropagates through one block; `dx` holds the gradient w.r.t. the
/// block output on entry and w.r.t. its input on exit.
fn block_backward<F: NdFloat>(
    b: &Block<F>,
    cfg: &ModelConfig,
    c: &BlockCache<F>,
    dx: &mut Array2<F>,
    freeze: &FreezeFlags,
    gb: &mut Block<F>,
) {
    let scale: F = cast(cfg.lora_scale());
    let base = Group::DecoderBase.trainable(freeze);
    let Block {
        ln1_g,
        ln1_b,
        wq,
        wk,
        wv,
        wo,
        ln2_g,
        ln2_b,
        w1,
        w2,
        lora_q,
        lora_v,
        lora_1,
        lora_2,
    } = gb;
    fn opt<T>(on: bool, x: &mut T) -> Option<&mut T> {
        on.then_some(x)
    }

    // Feed-forward branch.
    let dg = lora_linear_backward(
        dx,
        &c.g,
        &b.w2,
        &b.lora_2,
        scale,
        &c.c2,
        c.masks.w2.as_ref(),
        LinearGrads {
            w: opt(base, w2),
            lora: Some(lora_2),
        },
    );
    let du = Zip::from(&dg)
        .and(&c.u)
        .map_collect(|&d, &u| d * gelu_grad(u));
    let dh2 = lora_linear_backward(
        &du,
        &c.h2,
        &b.w1,
        &b.lora_1,
        scale,
        &c.c1,
        c.masks.w1.as_ref(),
        LinearGrads {
            w: opt(base, w1),
            lora: Some(lora_1),
        },
    );
    *dx += &layer_norm_backward(&dh2, &c.ln2, &b.ln2_g, base.then_some((ln2_g, ln2_b)));

    // Attention branch.
    let d_o = dx.dot(&b.wo);
    if let Some(dwo) = opt(base, wo) {
        general_mat_mul(F::one(), &dx.t(), &c.o, F::one(), dwo);
    }
    let (dq, dk, dv) = attention_backward(&d_o, &c.q, &c.k, &c.v, &c.probs);
    let mut dh1 = lora_linear_backward(
        &dq,
        &c.h1,
        &b.wq,
        &b.lora_q,
        scale,
        &c.cq,
        c.masks.q.as_ref(),
        LinearGrads {
            w: opt(base, wq),
            lora: Some(lora_q),
        },
    );
    dh1 += &lora_linear_backward(
        &dv,
        &c.h1,
        &b.wv,
        &b.lora_v,
        scale,
        &c.cv,
        c.masks.v.as_ref(),
        LinearGrads {
            w: opt(base, wv),
            lora: Some(lora_v),
        },
    );
    general_mat_mul(F::one(), &dk, &b.wk, F::one(), &mut dh1);
    if let Some(dwk) = opt(base, wk) {
        general_mat_mul(F::one(), &dk.t(), &c.h1, F::one(), dwk);
    }
    *dx += &layer_norm_backward(&dh1, &c.ln1, &b.ln1_g, base.then_some((ln1_g, ln1_b)));
}

/// Everything the backward pass needs from one forward pass.
pub struct Trace<F> {
    embed: EmbedCache<F>,
    blocks: Vec<BlockCache<F>>,
    rows: Vec<usize>,
    lnf: LnCache<F>,
    hf: Array2<F>,
    /// Softmax over the vocabulary for each supervised row.
    probs: Array2<F>,
    /// Summed (not averaged) cross-entropy over supervised rows.
    pub loss_sum: F,
}

impl<F> Trace<F> {
    pub fn supervised(&self) -> usize {
        self.rows.len()
    }
}

/// Residual stream after the last block, before the final layer norm.
fn hidden<F: NdFloat>(
    p: &Params<F>,
    m: &ModelInput,
    mut dropout: Option<Dropout<'_>>,
) -> (Array2<F>, EmbedCache<F>, Vec<BlockCache<F>>) {
    let (mut x, embed) = embed(p, m);
    let blocks = p
        .blocks
        .iter()
        .map(|b| block_forward(b, &p.config, &mut x, &mut dropout))
        .collect();
    (x, embed, blocks)
}

/// Forward pass over one sequence computing logits only at supervised rows.
pub fn forward<F: NdFloat>(
    p: &Params<F>,
    m: &ModelInput,
    dropout: Option<Dropout<'_>>,
) -> Result<Trace<F>, InputError> {
    validate_input(&p.config, m)?;
    let rows: Vec<usize> = (0..m.len()).filter(|&t| m.loss_mask[t]).collect();
    if rows.is_empty() {
        return Err(InputError::EmptyMask);
    }
    let (x, embed, blocks) = hidden(p, m, dropout);
    let sel = x.select(Axis(0), &rows);
    let (hf, lnf) = layer_norm(sel.view(), &p.lnf_g, &p.lnf_b);
    let mut probs = hf.dot(&p.head.t());
    let mut loss_sum = F::zero();
    for (mut row, &t) in probs.rows_mut().into_iter().zip(&rows) {
        let target = m.targets[t] as usize;
        let picked = row[target];
        let lse = log_sum_exp(row.view());
        loss_sum += lse - picked;
        row.mapv_inplace(|v| (v - lse).exp());
    }
    Ok(Trace {
        embed,
        blocks,
        rows,
        lnf,
        hf,
        probs,
        loss_sum,
    })
}

pub(crate) fn log_sum_exp<F: NdFloat>(row: ArrayView1<F>) -> F {
    let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
    max + row.fold(F::zero(), |a, &b| a + (b - max).exp()).ln()
}

/// Accumulates `scale * d(loss_sum)/dθ` into `g` for every tensor that the
/// freeze flags leave trainable. Frozen tensors are left untouched.
pub fn backward<F: NdFloat>(
    p: &Params<F>,
    m: &ModelInput,
    tr: &Trace<F>,
    scale: F,
    freeze: &FreezeFlags,
    g: &mut Params<F>,
) {
    let cfg = &p.config;
    let mut dlogits = tr.probs.clone();
    for (mut row, &t) in dlogits.rows_mut().into_iter().zip(&tr.rows) {
        row[m.targets[t] as usize] -= F::one();
        row.mapv_inplace(|v| v * scale);
    }
    let base = Group::DecoderBase.trainable(freeze);
    if base {
        general_mat_mul(F::one(), &dlogits.t(), &tr.hf, F::one(), &mut g.head);
    }
    let dhf = dlogits.dot(&p.head);
    let dsel = layer_norm_backward(
        &dhf,
        &tr.lnf,
        &p.lnf_g,
        if base {
            Some((&mut g.lnf_g, &mut g.lnf_b))
        } else {
            None
        },
    );
    let mut dx = Array2::zeros((m.len(), cfg.d_model));
    for (r, &t) in tr.rows.iter().enumerate() {
        dx.row_mut(t).assign(&dsel.row(r));
    }
    for ((b, c), gb) in p
        .blocks
        .iter()
        .zip(&tr.blocks)
        .zip(g.blocks.iter_mut())
        .rev()
    {
        block_backward(b, cfg, c, &mut dx, freeze, gb);
    }
    embed_backward(p, m, &tr.embed, &dx, freeze, g);
}

/// Mean cross-entropy over supervised positions, without dropout.
pub fn loss<F: NdFloat>(p: &Params<F>, m: &ModelInput) -> Result<F, InputError> {
    let tr = forward(p, m, None)?;
    Ok(tr.loss_sum / cast(tr.supervised() as f64))
}

/// Logits at every position (`len x vocab`), without dropout.
pub fn logits<F: NdFloat>(p: &Params<F>, m: &ModelInput) -> Result<Array2<F>, InputError> {
    validate_input(&p.config, m)?;
    let (x, _, _) = hidden(p, m, None);
    let (hf, _) = layer_norm(x.view(), &p.lnf_g, &p.lnf_b);
    Ok(hf.dot(&p.head.t()))
}
