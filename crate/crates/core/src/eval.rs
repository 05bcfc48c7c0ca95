//! Partial action matching scores over a corpus.
//!
//! An episode's score is the number of correctly predicted steps divided by
//! the episode length; subset scores pool steps across the subset's
//! episodes. Missing and undecodable predictions count as wrong.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::DeviceAction;
use crate::episode::{ActionRecord, Corpus, Episode};
use crate::matcher::{actions_match, MatchConfig, MatchRule};

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Action(DeviceAction),
    /// The model output could not be turned into an action.
    DecodeFailure(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub episode_id: String,
    pub step_index: usize,
    pub prediction: Prediction,
}

/// On-disk form: exactly one of `action` and `decode_failure` is set.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrediction {
    episode_id: String,
    step_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    action: Option<ActionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    decode_failure: Option<String>,
}

impl PredictionRecord {
    pub fn action(episode_id: impl Into<String>, step_index: usize, a: DeviceAction) -> Self {
        Self {
            episode_id: episode_id.into(),
            step_index,
            prediction: Prediction::Action(a),
        }
    }

    pub fn to_json(&self) -> String {
        let (action, decode_failure) = match &self.prediction {
            Prediction::Action(a) => (Some(ActionRecord::from(a)), None),
            Prediction::DecodeFailure(r) => (None, Some(r.clone())),
        };
        serde_json::to_string(&RawPrediction {
            episode_id: self.episode_id.clone(),
            step_index: self.step_index,
            action,
            decode_failure,
        })
        .expect("prediction serializes")
    }

    pub fn from_json(line: &str) -> Result<Self, String> {
        let raw: RawPrediction = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let prediction = match (raw.action, raw.decode_failure) {
            (Some(a), None) => Prediction::Action(DeviceAction::try_from(&a)?),
            (None, Some(r)) => Prediction::DecodeFailure(r),
            _ => return Err("exactly one of action and decode_failure must be set".into()),
        };
        Ok(Self {
            episode_id: raw.episode_id,
            step_index: raw.step_index,
            prediction,
        })
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("duplicate prediction for episode {episode_id} step {step_index}")]
    DuplicatePrediction {
        episode_id: String,
        step_index: usize,
    },
    #[error("prediction references unknown episode {0}")]
    UnknownEpisode(String),
    #[error("prediction for episode {episode_id} step {step_index} is beyond its {len} steps")]
    StepOutOfRange {
        episode_id: String,
        step_index: usize,
        len: usize,
    },
    #[error("the two prediction sets cover different episodes")]
    MismatchedEvalSets,
    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            PredictionRecord::from_json(l).map_err(|message| EvalError::Schema {
                path: path.display().to_string(),
                line: i + 1,
                message,
            })
        })
        .collect()
}

pub fn encode_predictions(records: &[PredictionRecord]) -> Vec<u8> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json());
        out.push('\n');
    }
    out.into_bytes()
}

/// Matched / unmatched counts for one deciding rule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleCount {
    pub matched: usize,
    pub unmatched: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub correct: usize,
    pub length: usize,
    pub missing: usize,
    pub decode_failures: usize,
    pub rules: BTreeMap<MatchRule, RuleCount>,
}

impl EpisodeScore {
    pub fn score(&self) -> f64 {
        if self.length == 0 {
            0.0
        } else {
            self.correct as f64 / self.length as f64
        }
    }
}

/// Scores one episode. `predictions` must all belong to `ep`.
pub fn score_episode(
    ep: &Episode,
    predictions: &[&PredictionRecord],
    cfg: &MatchConfig,
) -> Result<EpisodeScore, EvalError> {
    let mut by_step: Vec<Option<&Prediction>> = vec![None; ep.steps.len()];
    for p in predictions {
        if p.episode_id != ep.id {
            return Err(EvalError::UnknownEpisode(p.episode_id.clone()));
        }
        let slot = by_step
            .get_mut(p.step_index)
            .ok_or_else(|| EvalError::StepOutOfRange {
                episode_id: ep.id.clone(),
                step_index: p.step_index,
                len: ep.steps.len(),
            })?;
        if slot.replace(&p.prediction).is_some() {
            return Err(EvalError::DuplicatePrediction {
                episode_id: ep.id.clone(),
                step_index: p.step_index,
            });
        }
    }
    let mut s = EpisodeScore {
        length: ep.steps.len(),
        ..Default::default()
    };
    for (step, pred) in ep.steps.iter().zip(by_step) {
        match pred {
            None => s.missing += 1,
            Some(Prediction::DecodeFailure(_)) => s.decode_failures += 1,
            Some(Prediction::Action(a)) => {
                let r = actions_match(a, &step.gold_action, &step.bboxes, cfg);
                let c = s.rules.entry(r.rule).or_default();
                if r.matched {
                    c.matched += 1;
                    s.correct += 1;
                } else {
                    c.unmatched += 1;
                }
            }
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    StepWeighted,
    SubsetMean,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub episodes: usize,
    pub steps: usize,
    pub correct: usize,
    pub exact_episodes: usize,
    pub partial_match: f64,
    pub exact_match: f64,
}

impl SubsetScore {
    fn add(&mut self, e: &EpisodeScore) {
        self.episodes += 1;
        self.steps += e.length;
        self.correct += e.correct;
        if e.correct == e.length {
            self.exact_episodes += 1;
        }
    }

    fn finish(&mut self) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        self.partial_match = ratio(self.correct, self.steps);
        self.exact_match = ratio(self.exact_episodes, self.episodes);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub subsets: BTreeMap<String, SubsetScore>,
    /// Pooled over all steps.
    pub overall: SubsetScore,
    /// Unweighted mean of the subset partial-match scores.
    pub overall_subset_mean: f64,
    pub aggregation: Aggregation,
    pub rules: BTreeMap<MatchRule, RuleCount>,
    pub missing_predictions: usize,
    pub decode_failures: usize,
}

impl ScoreReport {
    /// The headline overall score under the configured aggregation.
    pub fn overall_score(&self) -> f64 {
        match self.aggregation {
            Aggregation::StepWeighted => self.overall.partial_match,
            Aggregation::SubsetMean => self.overall_subset_mean,
        }
    }

    pub fn subset_score(&self, subset: &str) -> Option<f64> {
        self.subsets.get(subset).map(|s| s.partial_match)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One-row table: overall score followed by one column per subset.
    pub fn table(&self, label: &str) -> String {
        render_table(
            &self.subsets.keys().cloned().collect::<Vec<_>>(),
            &[(label, self)],
            None,
        )
    }
}

fn group_predictions<'a>(
    corpus: &Corpus,
    predictions: &'a [PredictionRecord],
) -> Result<HashMap<&'a str, Vec<&'a PredictionRecord>>, EvalError> {
    let mut by_episode: HashMap<&str, Vec<&PredictionRecord>> = HashMap::new();
    for p in predictions {
        if corpus.get(&p.episode_id).is_none() {
            return Err(EvalError::UnknownEpisode(p.episode_id.clone()));
        }
        by_episode.entry(p.episode_id.as_str()).or_default().push(p);
    }
    Ok(by_episode)
}

pub fn score_corpus(
    corpus: &Corpus,
    predictions: &[PredictionRecord],
    cfg: &MatchConfig,
    aggregation: Aggregation,
) -> Result<ScoreReport, EvalError> {
    let by_episode = group_predictions(corpus, predictions)?;
    let mut report = ScoreReport {
        subsets: BTreeMap::new(),
        overall: SubsetScore::default(),
        overall_subset_mean: 0.0,
        aggregation,
        rules: MatchRule::ALL
            .iter()
            .map(|r| (*r, RuleCount::default()))
            .collect(),
        missing_predictions: 0,
        decode_failures: 0,
    };
    for ep in corpus.episodes() {
        let preds = by_episode
            .get(ep.id.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let s = score_episode(ep, preds, cfg)?;
        report.overall.add(&s);
        report.subsets.entry(ep.subset.clone()).or_default().add(&s);
        report.missing_predictions += s.missing;
        report.decode_failures += s.decode_failures;
        for (rule, c) in &s.rules {
            let r = report.rules.entry(*rule).or_default();
            r.matched += c.matched;
            r.unmatched += c.unmatched;
        }
    }
    report.overall.finish();
    for s in report.subsets.values_mut() {
        s.finish();
    }
    if !report.subsets.is_empty() {
        report.overall_subset_mean = report
            .subsets
            .values()
            .map(|s| s.partial_match)
            .sum::<f64>()
            / report.subsets.len() as f64;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub model_a: ScoreReport,
    pub model_b: ScoreReport,
    /// `a - b` per subset.
    pub deltas: BTreeMap<String, f64>,
    pub overall_delta: f64,
    /// Subset whose delta is the point of the comparison, when present.
    pub highlight: Option<String>,
}

impl AblationReport {
    pub fn table(&self, label_a: &str, label_b: &str) -> String {
        let subsets: Vec<String> = self.model_a.subsets.keys().cloned().collect();
        render_table(
            &subsets,
            &[(label_a, &self.model_a), (label_b, &self.model_b)],
            Some((&self.deltas, self.overall_delta, self.highlight.as_deref())),
        )
    }
}

/// Compares two prediction sets over the same episodes.
pub fn ablation_report(
    corpus: &Corpus,
    predictions_a: &[PredictionRecord],
    predictions_b: &[PredictionRecord],
    cfg: &MatchConfig,
) -> Result<AblationReport, EvalError> {
    let ids = |p: &[PredictionRecord]| {
        p.iter()
            .map(|r| r.episode_id.clone())
            .collect::<BTreeSet<_>>()
    };
    if ids(predictions_a) != ids(predictions_b) {
        return Err(EvalError::MismatchedEvalSets);
    }
    let a = score_corpus(corpus, predictions_a, cfg, Aggregation::StepWeighted)?;
    let b = score_corpus(corpus, predictions_b, cfg, Aggregation::StepWeighted)?;
    let deltas = a
        .subsets
        .iter()
        .map(|(k, s)| (k.clone(), s.partial_match - b.subsets[k].partial_match))
        .collect();
    let memory = crate::synthetic::TaskFamily::TwoStepMemory.as_str();
    Ok(AblationReport {
        overall_delta: a.overall.partial_match - b.overall.partial_match,
        highlight: a.subsets.contains_key(memory).then(|| memory.to_owned()),
        model_a: a,
        model_b: b,
        deltas,
    })
}

type DeltaRow<'a> = (&'a BTreeMap<String, f64>, f64, Option<&'a str>);

fn render_table(
    subsets: &[String],
    rows: &[(&str, &ScoreReport)],
    delta: Option<DeltaRow<'_>>,
) -> String {
    let mut header = vec!["Model".to_owned(), "Overall".to_owned()];
    header.extend(subsets.iter().cloned());
    let mut body: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, r)| {
            let mut row = vec![(*label).to_owned(), format!("{:.4}", r.overall_score())];
            row.extend(
                subsets
                    .iter()
                    .map(|s| format!("{:.4}", r.subsets[s].partial_match)),
            );
            row
        })
        .collect();
    if let Some((deltas, overall, highlight)) = delta {
        let mut row = vec!["delta".to_owned(), format!("{overall:+.4}")];
        row.extend(subsets.iter().map(|s| {
            let mark = if highlight == Some(s.as_str()) {
                "*"
            } else {
                ""
            };
            format!("{:+.4}{mark}", deltas[s])
        }));
        body.push(row);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            body.iter()
                .chain(std::iter::once(&header))
                .map(|r| r[c].len())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::from("Partial match scores\n");
    for (i, row) in std::iter::once(&header).chain(&body).enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| {
                if c == 0 {
                    format!("{v:<w$}")
                } else {
                    format!("{v:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(
                out,
                "{}",
                "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1))
            );
        }
    }
    out
}
