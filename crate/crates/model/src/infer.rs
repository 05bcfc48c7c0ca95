//! Incremental decoding with a key/value cache.

use ndarray::{s, Array1, Array2, Axis, NdFloat};
use rayon::prelude::*;
use uivlm_core::episode::Episode;
use uivlm_core::eval::{Prediction, PredictionRecord};
use uivlm_core::parse_action;
use uivlm_core::sequence::{build_prompt, HistoryConfig, ModelInput};
use uivlm_core::vocab::{Vocab, EOA};

use crate::error::InputError;
use crate::forward::{embed, gelu, layer_norm, softmax_prefix, validate_input};
use crate::params::{cast, Params};

pub const DECODE_CAP: usize = 64;

/// Parameters with every adapter folded into its base weight, ready for
/// inference.
#[derive(Debug, Clone)]
pub struct InferenceModel<F> {
    params: Params<F>,
}

impl<F: NdFloat> InferenceModel<F> {
    pub fn new(params: &Params<F>) -> Self {
        let mut p = params.clone();
        let scale: F = cast(p.config.lora_scale());
        for b in &mut p.blocks {
            for (w, l) in [
                (&mut b.wq, &mut b.lora_q),
                (&mut b.wv, &mut b.lora_v),
                (&mut b.w1, &mut b.lora_1),
                (&mut b.w2, &mut b.lora_2),
            ] {
                w.scaled_add(scale, &l.b.dot(&l.a));
                l.b.fill(F::zero());
            }
        }
        Self { params: p }
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    /// Runs the prompt and returns a session positioned after it.
    pub fn start(&self, prompt: &ModelInput) -> Result<Session<'_, F>, InputError> {
        validate_input(&self.params.config, prompt)?;
        let cfg = &self.params.config;
        let mut sess = Session {
            model: self,
            keys: (0..cfg.n_layers)
                .map(|_| Array2::zeros((cfg.max_seq_len, cfg.d_model)))
                .collect(),
            values: (0..cfg.n_layers)
                .map(|_| Array2::zeros((cfg.max_seq_len, cfg.d_model)))
                .collect(),
            len: 0,
            last: Array1::zeros(cfg.d_model),
        };
        let (x, _) = embed(&self.params, prompt);
        sess.extend(x);
        Ok(sess)
    }
}

pub struct Session<'m, F> {
    model: &'m InferenceModel<F>,
    keys: Vec<Array2<F>>,
    values: Vec<Array2<F>>,
    len: usize,
    /// Residual stream of the last processed position.
    last: Array1<F>,
}

impl<F: NdFloat> Session<'_, F> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_full(&self) -> bool {
        self.len >= self.model.params.config.max_seq_len
    }

    /// Next-token logits.
    pub fn logits(&self) -> Array1<F> {
        let p = &self.model.params;
        let x = self.last.view().insert_axis(Axis(0));
        let (h, _) = layer_norm(x, &p.lnf_g, &p.lnf_b);
        p.head.dot(&h.row(0))
    }

    /// Appends a token; the caller checks [`Session::is_full`] first.
    pub fn push(&mut self, token: u32) {
        let p = &self.model.params;
        let mut x = p.tok_emb.row(token as usize).to_owned();
        x += &p.pos_emb.row(self.len);
        self.extend(x.insert_axis(Axis(0)));
    }

    fn extend(&mut self, mut x: Array2<F>) {
        let p = &self.model.params;
        let cfg = &p.config;
        let (n, _) = x.dim();
        let start = self.len;
        let end = start + n;
        let dh = cfg.head_dim();
        let inv: F = cast(1.0 / (dh as f64).sqrt());
        for (l, b) in p.blocks.iter().enumerate() {
            let (h, _) = layer_norm(x.view(), &b.ln1_g, &b.ln1_b);
            let q = h.dot(&b.wq.t());
            self.keys[l]
                .slice_mut(s![start..end, ..])
                .assign(&h.dot(&b.wk.t()));
            self.values[l]
                .slice_mut(s![start..end, ..])
                .assign(&h.dot(&b.wv.t()));
            let keys = self.keys[l].slice(s![..end, ..]);
            let values = self.values[l].slice(s![..end, ..]);
            let mut o = Array2::zeros((n, cfg.d_model));
            for hd in 0..cfg.n_heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let mut sc = q.slice(cols).dot(&keys.slice(cols).t());
                for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
                    softmax_prefix(&mut row, start + i + 1, inv);
                }
                o.slice_mut(cols).assign(&sc.dot(&values.slice(cols)));
            }
            x += &o.dot(&b.wo.t());
            let (h2, _) = layer_norm(x.view(), &b.ln2_g, &b.ln2_b);
            let g = h2.dot(&b.w1.t()).mapv(gelu);
            x += &g.dot(&b.w2.t());
        }
        self.last = x.row(n - 1).to_owned();
        self.len = end;
    }
}

/// Index of the largest logit; ties go to the lowest id. `None` if any
/// logit is NaN.
pub fn argmax<F: NdFloat>(logits: &Array1<F>) -> Option<u32> {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v.is_nan() {
            return None;
        }
        if v > logits[best] {
            best = i;
        }
    }
    Some(best as u32)
}

/// Greedy decoding of one action after the prompt.
pub fn decode_action<F: NdFloat>(
    model: &InferenceModel<F>,
    prompt: &ModelInput,
    vocab: &Vocab,
) -> Prediction {
    let mut sess = match model.start(prompt) {
        Ok(s) => s,
        Err(e) => return Prediction::DecodeFailure(format!("invalid prompt: {e}")),
    };
    let mut out = Vec::new();
    loop {
        let Some(tok) = argmax(&sess.logits()) else {
            return Prediction::DecodeFailure("non-finite logits".into());
        };
        if tok == EOA {
            break;
        }
        out.push(tok);
        if out.len() >= DECODE_CAP {
            return Prediction::DecodeFailure(format!(
                "no end-of-action within {DECODE_CAP} tokens"
            ));
        }
        if sess.is_full() {
            return Prediction::DecodeFailure("context length exhausted".into());
        }
        sess.push(tok);
    }
    let Some(text) = vocab.detokenize(&out) else {
        return Prediction::DecodeFailure("special token in action".into());
    };
    match parse_action(&text) {
        Ok(a) => Prediction::Action(a),
        Err(e) => Prediction::DecodeFailure(format!("unparseable {text:?}: {e}")),
    }
}

pub fn predict_action<F: NdFloat>(
    model: &InferenceModel<F>,
    ep: &Episode,
    step_index: usize,
    history: &HistoryConfig,
    vocab: &Vocab,
) -> Prediction {
    match build_prompt(ep, step_index, history, vocab) {
        Ok(prompt) => decode_action(model, &prompt, vocab),
        Err(e) => Prediction::DecodeFailure(e.to_string()),
    }
}

/// One record per step of every episode, in episode then step order.
/// Episodes are decoded in parallel; the output does not depend on the
/// thread count.
pub fn predict_episodes<F: NdFloat>(
    model: &InferenceModel<F>,
    episodes: &[Episode],
    history: &HistoryConfig,
    vocab: &Vocab,
) -> Vec<PredictionRecord> {
    episodes
        .par_iter()
        .map(|ep| {
            (0..ep.steps.len())
                .map(|i| PredictionRecord {
                    episode_id: ep.id.clone(),
                    step_index: i,
                    prediction: predict_action(model, ep, i, history, vocab),
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}
