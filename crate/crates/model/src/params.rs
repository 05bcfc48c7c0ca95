//! Parameter tensors, grouped by what the freeze flags control.

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{FreezeFlags, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    VisionEncoder,
    Projection,
    TokenEmbedding,
    DecoderBase,
    Lora,
}

impl Group {
    pub fn trainable(self, freeze: &FreezeFlags) -> bool {
        match self {
            Group::VisionEncoder => !freeze.vision_encoder,
            Group::TokenEmbedding => !freeze.token_embeddings,
            Group::DecoderBase => !freeze.decoder_base,
            Group::Projection | Group::Lora => true,
        }
    }
}

pub(crate) fn cast<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("f64 converts to the float type")
}

/// Low-rank update `W + (alpha / r) B A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lora<F> {
    /// `r x in`
    pub a: Array2<F>,
    /// `out x r`
    pub b: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    /// `d_ff x k`
    pub w1: Array2<F>,
    /// `k x d_ff`
    pub w2: Array2<F>,
    pub lora_q: Lora<F>,
    pub lora_v: Lora<F>,
    pub lora_1: Lora<F>,
    pub lora_2: Lora<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub config: ModelConfig,
    /// `l x patch_dim`
    pub ve_w: Array2<F>,
    pub ve_b: Array1<F>,
    /// Per-patch position vectors, `n_patches x l`.
    pub ve_pos: Array2<F>,
    /// `k x l`
    pub proj: Array2<F>,
    pub tok_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub blocks: Vec<Block<F>>,
    pub lnf_g: Array1<F>,
    pub lnf_b: Array1<F>,
    /// `vocab x k`
    pub head: Array2<F>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<F: NdFloat>(&mut self, rows: usize, cols: usize, std: f64) -> Array2<F> {
        let d = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_fn((rows, cols), |_| cast(d.sample(&mut self.rng)))
    }
}

impl<F: NdFloat> Params<F> {
    /// Random initialization. Adapters start with `B = 0`, so the adapted
    /// network computes exactly the base network.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut g = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (k, ff, l, r) = (
            config.d_model,
            config.d_ff,
            config.vision_width,
            config.lora_rank,
        );
        let pd = config.patch_dim();
        let out_std = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let ve_w = g.normal(l, pd, inv(pd) * 4.0);
        let ve_b = Array1::zeros(l);
        let ve_pos = g.normal(config.n_patches(), l, 1.0);
        let proj = g.normal(k, l, inv(l));
        let tok_emb = g.normal(config.vocab_size, k, 1.0);
        let pos_emb = g.normal(config.max_seq_len, k, 0.5);
        let blocks = (0..config.n_layers)
            .map(|_| {
                let mut lora = |out: usize, inp: usize| Lora {
                    a: g.normal(r, inp, inv(inp)),
                    b: Array2::zeros((out, r)),
                };
                let lora_q = lora(k, k);
                let lora_v = lora(k, k);
                let lora_1 = lora(ff, k);
                let lora_2 = lora(k, ff);
                Block {
                    ln1_g: Array1::ones(k),
                    ln1_b: Array1::zeros(k),
                    wq: g.normal(k, k, inv(k)),
                    wk: g.normal(k, k, inv(k)),
                    wv: g.normal(k, k, inv(k)),
                    wo: g.normal(k, k, inv(k) * out_std),
                    ln2_g: Array1::ones(k),
                    ln2_b: Array1::zeros(k),
                    w1: g.normal(ff, k, inv(k)),
                    w2: g.normal(k, ff, inv(ff) * out_std),
                    lora_q,
                    lora_v,
                    lora_1,
                    lora_2,
                }
            })
            .collect();
        Self {
            config: config.clone(),
            ve_w,
            ve_b,
            ve_pos,
            proj,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Array1::ones(k),
            lnf_b: Array1::zeros(k),
            head: g.normal(config.vocab_size, k, inv(k)),
        }
    }

    /// Same shapes, all zeros; used for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, _, mut t| t.fill(F::zero()));
        z
    }

    /// Visits every tensor with its name and group, in a fixed order.
    pub fn for_each<'s>(&'s self, mut f: impl FnMut(&str, Group, ArrayViewD<'s, F>)) {
        use Group::*;
        f("vision.w", VisionEncoder, self.ve_w.view().into_dyn());
        f("vision.b", VisionEncoder, self.ve_b.view().into_dyn());
        f("vision.pos", VisionEncoder, self.ve_pos.view().into_dyn());
        f("proj", Projection, self.proj.view().into_dyn());
        f("tok_emb", TokenEmbedding, self.tok_emb.view().into_dyn());
        f("pos_emb", DecoderBase, self.pos_emb.view().into_dyn());
        for (i, b) in self.blocks.iter().enumerate() {
            let n = |s: &str| format!("blocks.{i}.{s}");
            f(&n("ln1.g"), DecoderBase, b.ln1_g.view().into_dyn());
            f(&n("ln1.b"), DecoderBase, b.ln1_b.view().into_dyn());
            f(&n("wq"), DecoderBase, b.wq.view().into_dyn());
            f(&n("wk"), DecoderBase, b.wk.view().into_dyn());
            f(&n("wv"), DecoderBase, b.wv.view().into_dyn());
            f(&n("wo"), DecoderBase, b.wo.view().into_dyn());
            f(&n("ln2.g"), DecoderBase, b.ln2_g.view().into_dyn());
            f(&n("ln2.b"), DecoderBase, b.ln2_b.view().into_dyn());
            f(&n("w1"), DecoderBase, b.w1.view().into_dyn());
            f(&n("w2"), DecoderBase, b.w2.view().into_dyn());
            for (tag, l) in [
                ("q", &b.lora_q),
                ("v", &b.lora_v),
                ("1", &b.lora_1),
                ("2", &b.lora_2),
            ] {
                f(&n(&format!("lora_{tag}.a")), Lora, l.a.view().into_dyn());
                f(&n(&format!("lora_{tag}.b")), Lora, l.b.view().into_dyn());
            }
        }
        f("lnf.g", DecoderBase, self.lnf_g.view().into_dyn());
        f("lnf.b", DecoderBase, self.lnf_b.view().into_dyn());
        f("head", DecoderBase, self.head.view().into_dyn());
    }

    /// Mutable counterpart of [`Params::for_each`], same order.
    pub fn for_each_mut<'s>(&'s mut self, mut f: impl FnMut(&str, Group, ArrayViewMutD<'s, F>)) {
        use Group::*;
        f("vision.w", VisionEncoder, self.ve_w.view_mut().into_dyn());
        f("vision.b", VisionEncoder, self.ve_b.view_mut().into_dyn());
        f(
            "vision.pos",
            VisionEncoder,
            self.ve_pos.view_mut().into_dyn(),
        );
        f("proj", Projection, self.proj.view_mut().into_dyn());
        f(
            "tok_emb",
            TokenEmbedding,
            self.tok_emb.view_mut().into_dyn(),
        );
        f("pos_emb", DecoderBase, self.pos_emb.view_mut().into_dyn());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = |s: &str| format!("blocks.{i}.{s}");
            f(&n("ln1.g"), DecoderBase, b.ln1_g.view_mut().into_dyn());
            f(&n("ln1.b"), DecoderBase, b.ln1_b.view_mut().into_dyn());
            f(&n("wq"), DecoderBase, b.wq.view_mut().into_dyn());
            f(&n("wk"), DecoderBase, b.wk.view_mut().into_dyn());
            f(&n("wv"), DecoderBase, b.wv.view_mut().into_dyn());
            f(&n("wo"), DecoderBase, b.wo.view_mut().into_dyn());
            f(&n("ln2.g"), DecoderBase, b.ln2_g.view_mut().into_dyn());
            f(&n("ln2.b"), DecoderBase, b.ln2_b.view_mut().into_dyn());
            f(&n("w1"), DecoderBase, b.w1.view_mut().into_dyn());
            f(&n("w2"), DecoderBase, b.w2.view_mut().into_dyn());
            for (tag, l) in [
                ("q", &mut b.lora_q),
                ("v", &mut b.lora_v),
                ("1", &mut b.lora_1),
                ("2", &mut b.lora_2),
            ] {
                f(
                    &n(&format!("lora_{tag}.a")),
                    Lora,
                    l.a.view_mut().into_dyn(),
                );
                f(
                    &n(&format!("lora_{tag}.b")),
                    Lora,
                    l.b.view_mut().into_dyn(),
                );
            }
        }
        f("lnf.g", DecoderBase, self.lnf_g.view_mut().into_dyn());
        f("lnf.b", DecoderBase, self.lnf_b.view_mut().into_dyn());
        f("head", DecoderBase, self.head.view_mut().into_dyn());
    }

    /// Applies `f(self_tensor, other_tensor)` pairwise over two parameter
    /// sets of the same shape.
    pub fn zip_mut(
        &mut self,
        other: &Self,
        mut f: impl FnMut(&str, Group, ArrayViewMutD<'_, F>, ArrayViewD<'_, F>),
    ) {
        let mut it = other.views().into_iter();
        self.for_each_mut(|name, group, t| f(name, group, t, it.next().expect("same layout").2));
    }

    pub fn views(&self) -> Vec<(String, Group, ArrayViewD<'_, F>)> {
        let mut out = Vec::new();
        self.for_each(|n, g, t| out.push((n.to_owned(), g, t)));
        out
    }

    pub fn views_mut(&mut self) -> Vec<(String, Group, ArrayViewMutD<'_, F>)> {
        let mut out = Vec::new();
        self.for_each_mut(|n, g, t| out.push((n.to_owned(), g, t)));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _, _| out.push(n.to_owned()));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, t| n += t.len());
        n
    }

    pub fn map<G: NdFloat>(&self, f: impl Fn(F) -> G) -> Params<G> {
        let l2 = |a: &Array2<F>| a.mapv(&f);
        let l1 = |a: &Array1<F>| a.mapv(&f);
        let lora = |l: &Lora<F>| Lora {
            a: l2(&l.a),
            b: l2(&l.b),
        };
        Params {
            config: self.config.clone(),
            ve_w: l2(&self.ve_w),
            ve_b: l1(&self.ve_b),
            ve_pos: l2(&self.ve_pos),
            proj: l2(&self.proj),
            tok_emb: l2(&self.tok_emb),
            pos_emb: l2(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: l1(&b.ln1_g),
                    ln1_b: l1(&b.ln1_b),
                    wq: l2(&b.wq),
                    wk: l2(&b.wk),
                    wv: l2(&b.wv),
                    wo: l2(&b.wo),
                    ln2_g: l1(&b.ln2_g),
                    ln2_b: l1(&b.ln2_b),
                    w1: l2(&b.w1),
                    w2: l2(&b.w2),
                    lora_q: lora(&b.lora_q),
                    lora_v: lora(&b.lora_v),
                    lora_1: lora(&b.lora_1),
                    lora_2: lora(&b.lora_2),
                })
                .collect(),
            lnf_g: l1(&self.lnf_g),
            lnf_b: l1(&self.lnf_b),
            head: l2(&self.head),
        }
    }
}
