//! Masked next-token training with Adam.

use ndarray::{NdFloat, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uivlm_core::episode::Episode;
use uivlm_core::sequence::{training_sequences, HistoryConfig, ModelInput};
use uivlm_core::vocab::Vocab;

use crate::config::{FreezeFlags, ModelConfig, TrainConfig};
use crate::error::{ConfigError, InputError, TrainError};
use crate::forward::{backward, forward, validate_input, Dropout};
use crate::params::{cast, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

pub fn loss_curve_csv(points: &[LossPoint]) -> String {
    let mut out = String::from("step,epoch,loss\n");
    for p in points {
        out.push_str(&format!("{},{},{:.6}\n", p.step, p.epoch, p.loss));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params<f32>,
    pub losses: Vec<LossPoint>,
    pub steps: usize,
}

/// History window used to build inputs for a config.
pub fn history_config(cfg: &TrainConfig, model: &ModelConfig) -> HistoryConfig {
    HistoryConfig {
        max_history: cfg.max_history,
        slots_per_image: model.n_patches(),
    }
}

/// Side length of the (square) screenshots in `episodes`.
pub fn image_px(episodes: &[Episode]) -> Result<usize, ConfigError> {
    let mut size = None;
    for s in episodes.iter().flat_map(|e| &e.steps) {
        let (h, w) = (s.screen.height(), s.screen.width());
        if h != w || size.is_some_and(|px| px != h) {
            return Err(ConfigError::new(
                "corpus",
                "screenshots must all be square and of one size",
            ));
        }
        size = Some(h);
    }
    size.ok_or_else(|| ConfigError::new("corpus", "no screenshots"))
}

/// Training sequences for every episode.
pub fn prepare_examples(
    episodes: &[Episode],
    history: &HistoryConfig,
    vocab: &Vocab,
    model: &ModelConfig,
    pack: bool,
) -> Result<Vec<ModelInput>, TrainError> {
    let mut out = Vec::new();
    for ep in episodes {
        for m in training_sequences(ep, history, vocab, pack)? {
            validate_input(model, &m)?;
            out.push(m);
        }
    }
    Ok(out)
}

/// Sum of losses and summed gradients of a batch, each sequence scaled by
/// `1 / (supervised positions in the batch)`.
///
/// Sequences are processed in parallel but reduced in input order, so the
/// result is independent of scheduling. Dropout masks are drawn from a
/// stream keyed by `(seed, step, index in batch)`.
pub fn batch_gradients<F: NdFloat>(
    params: &Params<F>,
    batch: &[&ModelInput],
    freeze: &FreezeFlags,
    dropout: f64,
    seed: u64,
    step: usize,
) -> Result<(F, Params<F>), InputError> {
    let total: usize = batch.iter().map(|m| m.masked_count()).sum();
    if total == 0 {
        return Err(InputError::EmptyMask);
    }
    let scale: F = cast(1.0 / total as f64);
    let parts: Vec<Result<(F, Params<F>), InputError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d809_u64.wrapping_mul(step as u64 + 1));
            rng.set_stream(i as u64);
            let drop = (dropout > 0.0).then_some(Dropout {
                rate: dropout,
                rng: &mut rng,
            });
            let tr = forward(params, m, drop)?;
            let mut g = params.zeros_like();
            backward(params, m, &tr, scale, freeze, &mut g);
            Ok((tr.loss_sum, g))
        })
        .collect();
    let mut loss = F::zero();
    let mut grads: Option<Params<F>> = None;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc.zip_mut(&g, |_, _, mut a, b| a += &b),
        }
    }
    Ok((loss * scale, grads.expect("batch is non-empty")))
}

pub struct Adam {
    m: Params<f32>,
    v: Params<f32>,
    t: i32,
}

impl Adam {
    pub fn new(params: &Params<f32>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update of every tensor the freeze flags leave trainable.
    pub fn step(
        &mut self,
        params: &mut Params<f32>,
        grads: &Params<f32>,
        cfg: &TrainConfig,
        lr: f64,
    ) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1 as f32, cfg.adam_beta2 as f32);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        let eps = cfg.adam_eps as f32;
        let g = grads.views();
        let m = self.m.views_mut();
        let v = self.v.views_mut();
        for ((((_, group, mut p), (_, _, g)), (_, _, mut m)), (_, _, mut v)) in
            params.views_mut().into_iter().zip(g).zip(m).zip(v)
        {
            if !group.trainable(&cfg.freeze) {
                continue;
            }
            Zip::from(&mut p)
                .and(&g)
                .and(&mut m)
                .and(&mut v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
    }
}

fn clip_gradients(grads: &mut Params<f32>, cfg: &TrainConfig) {
    if cfg.grad_clip <= 0.0 {
        return;
    }
    let mut sq = 0.0f64;
    grads.for_each(|_, group, t| {
        if group.trainable(&cfg.freeze) {
            sq += t.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if norm > cfg.grad_clip {
        let s = (cfg.grad_clip / norm) as f32;
        grads.for_each_mut(|_, _, mut t| t.mapv_inplace(|x| x * s));
    }
}

/// Trains from a fresh initialization on the given episodes.
pub fn train(
    episodes: &[Episode],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with(episodes, vocab, cfg, |_| {})
}

pub fn train_with(
    episodes: &[Episode],
    vocab: &Vocab,
    cfg: &TrainConfig,
    on_step: impl FnMut(&LossPoint),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let model = cfg.model_config(vocab.len(), image_px(episodes)?);
    model.validate()?;
    let examples = prepare_examples(
        episodes,
        &history_config(cfg, &model),
        vocab,
        &model,
        cfg.pack_trajectories,
    )?;
    let params = Params::init(&model, cfg.seed);
    train_params(params, &examples, cfg, on_step)
}

/// The optimization loop on prepared examples, starting from `params`.
pub fn train_params(
    mut params: Params<f32>,
    examples: &[ModelInput],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LossPoint),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut adam = Adam::new(&params);
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total = match cfg.max_steps {
        0 => per_epoch * cfg.epochs,
        m => m.min(per_epoch * cfg.epochs),
    };
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ModelInput> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, mut grads) = batch_gradients(
                &params,
                &batch,
                &cfg.freeze,
                cfg.lora_dropout,
                cfg.seed,
                step,
            )?;
            if !loss.is_finite() {
                return Err(TrainError::Divergence { step });
            }
            clip_gradients(&mut grads, cfg);
            adam.step(&mut params, &grads, cfg, cfg.lr_at(step, total));
            let point = LossPoint {
                step,
                epoch,
                loss: f64::from(loss),
            };
            on_step(&point);
            losses.push(point);
            step += 1;
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
        }
    }
    let mut finite = true;
    params.for_each(|_, _, t| finite &= t.iter().all(|x| x.is_finite()));
    if !finite {
        return Err(TrainError::Divergence { step });
    }
    Ok(TrainOutcome {
        params,
        losses,
        steps: step,
    })
}
