//! Interleaved instruction / screenshot / action sequences for the model.
//!
//! Layout of one training sequence:
//!
//! ```text
//! <bos> instruction  (<img>*S action <eoa>)*  <img>*S  target <eoa>
//! ```
//!
//! `targets[t]` is the token to be predicted at position `t` (the input
//! shifted by one) and `loss_mask[t]` selects the positions whose target
//! belongs to the supervised action.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::Episode;
use crate::raster::Raster;
use crate::vocab::{Vocab, BOS, IMG, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryConfig {
    /// Past (screen, action) pairs kept before the current screen.
    pub max_history: usize,
    pub slots_per_image: usize,
}

impl Default for HistoryConfig {
    fn default() -> Self {
        Self {
            max_history: 2,
            slots_per_image: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisionSlot {
    pub position: usize,
    pub image_index: usize,
    /// Which of the image's slots this position holds.
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub token_ids: Vec<u32>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
    pub vision_slots: Vec<VisionSlot>,
    pub images: Vec<Raster>,
    pub episode_id: String,
    pub step_index: usize,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }

    /// Checks the structural invariants.
    pub fn check(&self) -> Result<(), String> {
        let n = self.token_ids.len();
        if self.targets.len() != n || self.loss_mask.len() != n {
            return Err("token_ids, targets and loss_mask differ in length".into());
        }
        let mut slots = self.vision_slots.iter().peekable();
        let mut last = None;
        for (pos, &t) in self.token_ids.iter().enumerate() {
            let is_slot = slots.peek().is_some_and(|s| s.position == pos);
            if is_slot {
                let s = slots.next().expect("peeked");
                if s.image_index >= self.images.len() {
                    return Err(format!(
                        "slot at {pos} references missing image {}",
                        s.image_index
                    ));
                }
                if last.is_some_and(|l| l >= pos) {
                    return Err("vision slot positions not increasing".into());
                }
                last = Some(pos);
            }
            if (t == IMG) != is_slot {
                return Err(format!(
                    "position {pos}: IMG token and vision slot disagree"
                ));
            }
        }
        if slots.next().is_some() {
            return Err("vision slot beyond sequence end or out of order".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SequenceError {
    #[error("step {step_index} out of range for episode {episode_id} of length {len}")]
    StepOutOfRange {
        episode_id: String,
        step_index: usize,
        len: usize,
    },
    #[error("slots_per_image must be at least 1")]
    NoSlots,
}

struct Builder<'v> {
    vocab: &'v Vocab,
    slots: usize,
    input: ModelInput,
}

impl<'v> Builder<'v> {
    fn new(vocab: &'v Vocab, slots: usize, ep: &Episode, step_index: usize) -> Self {
        let mut b = Self {
            vocab,
            slots,
            input: ModelInput {
                token_ids: Vec::new(),
                targets: Vec::new(),
                loss_mask: Vec::new(),
                vision_slots: Vec::new(),
                images: Vec::new(),
                episode_id: ep.id.clone(),
                step_index,
            },
        };
        b.push(BOS, false);
        for t in vocab.tokenize_instruction(&ep.instruction) {
            b.push(t, false);
        }
        b
    }

    /// Appends a token. `supervised` marks it as a prediction target, which
    /// sets the mask on the preceding position.
    fn push(&mut self, t: u32, supervised: bool) {
        let m = &mut self.input;
        if let Some(last) = m.targets.last_mut() {
            *last = t;
            *m.loss_mask.last_mut().expect("same length") = supervised;
        }
        m.token_ids.push(t);
        m.targets.push(PAD);
        m.loss_mask.push(false);
    }

    fn image(&mut self, r: &Raster) {
        let image_index = self.input.images.len();
        self.input.images.push(r.clone());
        for patch in 0..self.slots {
            self.input.vision_slots.push(VisionSlot {
                position: self.input.token_ids.len(),
                image_index,
                patch,
            });
            self.push(IMG, false);
        }
    }

    fn action(&mut self, a: &crate::action::DeviceAction, supervised: bool) {
        for t in self.vocab.tokenize_action(a) {
            self.push(t, supervised);
        }
    }
}

fn check_args(ep: &Episode, step_index: usize, cfg: &HistoryConfig) -> Result<(), SequenceError> {
    if cfg.slots_per_image == 0 {
        return Err(SequenceError::NoSlots);
    }
    if step_index >= ep.steps.len() {
        return Err(SequenceError::StepOutOfRange {
            episode_id: ep.id.clone(),
            step_index,
            len: ep.steps.len(),
        });
    }
    Ok(())
}

/// Everything up to and including the current screen; what the model sees
/// before decoding the action for `step_index`.
pub fn build_prompt(
    ep: &Episode,
    step_index: usize,
    cfg: &HistoryConfig,
    vocab: &Vocab,
) -> Result<ModelInput, SequenceError> {
    check_args(ep, step_index, cfg)?;
    Ok(prompt_builder(ep, step_index, cfg, vocab).input)
}

fn prompt_builder<'v>(
    ep: &Episode,
    step_index: usize,
    cfg: &HistoryConfig,
    vocab: &'v Vocab,
) -> Builder<'v> {
    let mut b = Builder::new(vocab, cfg.slots_per_image, ep, step_index);
    let first = step_index - step_index.min(cfg.max_history);
    for s in &ep.steps[first..step_index] {
        b.image(&s.screen);
        b.action(&s.gold_action, false);
    }
    b.image(&ep.steps[step_index].screen);
    b
}

/// Prompt followed by the gold action of `step_index`, with the loss mask
/// selecting exactly that action and its EOA.
pub fn build_sequence(
    ep: &Episode,
    step_index: usize,
    cfg: &HistoryConfig,
    vocab: &Vocab,
) -> Result<ModelInput, SequenceError> {
    check_args(ep, step_index, cfg)?;
    let mut b = prompt_builder(ep, step_index, cfg, vocab);
    b.action(&ep.steps[step_index].gold_action, true);
    Ok(b.input)
}

/// The whole episode in one sequence with every action supervised.
///
/// Under causal attention each action's predictions see exactly the
/// full-history prefix, so this is equivalent to the per-step sequences
/// whenever no history is truncated, at a fraction of the cost.
pub fn build_trajectory(
    ep: &Episode,
    slots_per_image: usize,
    vocab: &Vocab,
) -> Result<ModelInput, SequenceError> {
    let cfg = HistoryConfig {
        max_history: ep.steps.len(),
        slots_per_image,
    };
    check_args(ep, 0, &cfg)?;
    let mut b = Builder::new(vocab, slots_per_image, ep, 0);
    for s in &ep.steps {
        b.image(&s.screen);
        b.action(&s.gold_action, true);
    }
    Ok(b.input)
}

/// Training sequences for an episode: one per step, or, with `pack` and a
/// history window covering the episode, a single packed trajectory.
pub fn training_sequences(
    ep: &Episode,
    cfg: &HistoryConfig,
    vocab: &Vocab,
    pack: bool,
) -> Result<Vec<ModelInput>, SequenceError> {
    if pack && cfg.max_history + 1 >= ep.steps.len() {
        Ok(vec![build_trajectory(ep, cfg.slots_per_image, vocab)?])
    } else {
        (0..ep.steps.len())
            .map(|i| build_sequence(ep, i, cfg, vocab))
            .collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("sequence for episode {episode_id} step {step_index} has length {len} > {pad_to}")]
pub struct TruncationError {
    pub episode_id: String,
    pub step_index: usize,
    pub len: usize,
    pub pad_to: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Inputs right-padded with PAD to a common length.
    pub inputs: Vec<ModelInput>,
    /// `valid[b][t]` is false at padding.
    pub valid: Vec<Vec<bool>>,
    pub lengths: Vec<usize>,
    pub pad_to: usize,
}

pub fn batch(inputs: &[ModelInput], pad_to: usize) -> Result<Batch, TruncationError> {
    let mut out = Batch {
        inputs: Vec::with_capacity(inputs.len()),
        valid: Vec::with_capacity(inputs.len()),
        lengths: Vec::with_capacity(inputs.len()),
        pad_to,
    };
    for m in inputs {
        let n = m.len();
        if n > pad_to {
            return Err(TruncationError {
                episode_id: m.episode_id.clone(),
                step_index: m.step_index,
                len: n,
                pad_to,
            });
        }
        let mut p = m.clone();
        p.token_ids.resize(pad_to, PAD);
        p.targets.resize(pad_to, PAD);
        p.loss_mask.resize(pad_to, false);
        let mut valid = vec![true; n];
        valid.resize(pad_to, false);
        out.inputs.push(p);
        out.valid.push(valid);
        out.lengths.push(n);
    }
    Ok(out)
}

pub fn unbatch(b: &Batch) -> Vec<ModelInput> {
    b.inputs
        .iter()
        .zip(&b.lengths)
        .map(|(m, &n)| {
            let mut m = m.clone();
            m.token_ids.truncate(n);
            m.targets.truncate(n);
            m.loss_mask.truncate(n);
            m
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::DeviceAction;
    use crate::episode::{Split, Step};
    use crate::vocab::EOA;

    fn episode(n: usize) -> Episode {
        let steps = (0..n)
            .map(|i| Step {
                screen_ref: format!("s/{i}.pgm"),
                screen: Raster::filled(4, 4, i as u8),
                screen_height_px: 4,
                screen_width_px: 4,
                bboxes: vec![],
                gold_action: if i + 1 == n {
                    DeviceAction::TaskComplete
                } else {
                    DeviceAction::tap(0.1 * i as f64, 0.5).unwrap()
                },
            })
            .collect();
        Episode {
            id: "e".into(),
            instruction: "open mail".into(),
            steps,
            split: Split::Train,
            subset: "tap_label".into(),
        }
    }

    fn cfg(h: usize) -> HistoryConfig {
        HistoryConfig {
            max_history: h,
            slots_per_image: 16,
        }
    }

    #[test]
    fn first_step_layout() {
        let v = Vocab::standard();
        let ep = episode(3);
        let m = build_sequence(&ep, 0, &cfg(2), &v).unwrap();
        m.check().unwrap();
        let act = v.tokenize_action(&ep.steps[0].gold_action);
        assert_eq!(m.len(), 1 + 2 + 16 + act.len());
        assert_eq!(m.masked_count(), act.len());
        assert_eq!(m.images.len(), 1);
        assert_eq!(*m.token_ids.last().unwrap(), EOA);
        // The mask sits one position before each supervised token.
        let first_masked = m.loss_mask.iter().position(|b| *b).unwrap();
        assert_eq!(m.token_ids[first_masked], IMG);
        assert_eq!(m.targets[first_masked], act[0]);
    }

    #[test]
    fn history_truncation_keeps_recent_steps() {
        let v = Vocab::standard();
        let ep = episode(5);
        let m = build_sequence(&ep, 3, &cfg(1), &v).unwrap();
        assert_eq!(
            m.images,
            vec![ep.steps[2].screen.clone(), ep.steps[3].screen.clone()]
        );
        let m0 = build_sequence(&ep, 3, &cfg(0), &v).unwrap();
        assert_eq!(m0.images, vec![ep.steps[3].screen.clone()]);
        assert!(build_sequence(&ep, 5, &cfg(0), &v).is_err());
    }

    #[test]
    fn monotone_history() {
        let v = Vocab::standard();
        let ep = episode(5);
        for k in 1..4 {
            let a = build_sequence(&ep, 4, &cfg(k), &v).unwrap();
            let b = build_sequence(&ep, 4, &cfg(k - 1), &v).unwrap();
            let head = 3;
            assert!(a.token_ids.ends_with(&b.token_ids[head..]));
            assert_eq!(a.images.len(), b.images.len() + 1);
        }
    }

    #[test]
    fn trajectory_matches_per_step_prefixes() {
        let v = Vocab::standard();
        let ep = episode(4);
        let t = build_trajectory(&ep, 16, &v).unwrap();
        t.check().unwrap();
        for i in 0..4 {
            let s = build_sequence(&ep, i, &cfg(10), &v).unwrap();
            let n = s.len();
            assert_eq!(&t.token_ids[..n], &s.token_ids[..]);
            // Every mask bit of the per-step sequence is set in the trajectory.
            for p in 0..n - 1 {
                if s.loss_mask[p] {
                    assert!(t.loss_mask[p]);
                    assert_eq!(t.targets[p], s.targets[p]);
                }
            }
        }
        let total: usize = ep
            .steps
            .iter()
            .map(|s| v.tokenize_action(&s.gold_action).len())
            .sum();
        assert_eq!(t.masked_count(), total);
    }

    #[test]
    fn packing_only_when_asked_and_the_window_covers() {
        let v = Vocab::standard();
        let ep = episode(3);
        assert_eq!(
            training_sequences(&ep, &cfg(2), &v, false).unwrap().len(),
            3
        );
        assert_eq!(training_sequences(&ep, &cfg(2), &v, true).unwrap().len(), 1);
        assert_eq!(training_sequences(&ep, &cfg(1), &v, true).unwrap().len(), 3);
    }

    #[test]
    fn batching() {
        let v = Vocab::standard();
        let ep = episode(3);
        let a = build_sequence(&ep, 0, &cfg(0), &v).unwrap();
        let b = build_sequence(&ep, 1, &cfg(1), &v).unwrap();
        let n = a.len().max(b.len());
        let single = batch(std::slice::from_ref(&a), a.len()).unwrap();
        assert_eq!(single.inputs[0], a);
        let bt = batch(&[a.clone(), b.clone()], n).unwrap();
        assert_eq!(unbatch(&bt), vec![a.clone(), b]);
        for (m, &len) in bt.inputs.iter().zip(&bt.lengths) {
            assert!(m.loss_mask[len..].iter().all(|b| !b));
            assert!(m.token_ids[len..].iter().all(|t| *t == PAD));
        }
        let err = batch(std::slice::from_ref(&a), a.len() - 1).unwrap_err();
        assert_eq!(err.episode_id, "e");
    }
}
