//! Demonstration episodes and their on-disk corpus layout.
//!
//! A corpus directory holds `episodes.jsonl` (one episode per line) and a
//! `screens/` directory of binary PGM screenshots referenced by relative
//! path. Actions are stored structurally, not as action strings.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::{ActionKind, DeviceAction, NormalizedPoint};
use crate::matcher::BBox;
use crate::raster::{Raster, RasterError};

pub const EPISODES_FILE: &str = "episodes.jsonl";
pub const SCREENS_DIR: &str = "screens";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split {other:?} (expected train, val or test)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// Path of the screenshot relative to the corpus root.
    pub screen_ref: String,
    pub screen: Raster,
    pub screen_height_px: u32,
    pub screen_width_px: u32,
    pub bboxes: Vec<BBox>,
    pub gold_action: DeviceAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub instruction: String,
    pub steps: Vec<Step>,
    pub split: Split,
    pub subset: String,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// An immutable, id-sorted collection of episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    episodes: Vec<Episode>,
    /// Subset sizes at load or generation time. Subsampling always selects
    /// relative to these, which makes it idempotent.
    origin_subset_sizes: BTreeMap<String, usize>,
}

impl Corpus {
    /// Builds a corpus, sorting episodes by id.
    pub fn new(mut episodes: Vec<Episode>) -> Self {
        episodes.sort_by(|a, b| a.id.cmp(&b.id));
        let mut origin_subset_sizes = BTreeMap::new();
        for ep in &episodes {
            *origin_subset_sizes.entry(ep.subset.clone()).or_insert(0) += 1;
        }
        Self {
            episodes,
            origin_subset_sizes,
        }
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Episode> {
        self.episodes
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.episodes[i])
    }

    pub fn total_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// Episodes of one split, keeping the subsampling provenance.
    pub fn filter_split(&self, split: Split) -> Corpus {
        self.filter(|e| e.split == split)
    }

    pub fn filter(&self, keep: impl Fn(&Episode) -> bool) -> Corpus {
        Corpus {
            episodes: self.episodes.iter().filter(|e| keep(e)).cloned().collect(),
            origin_subset_sizes: self.origin_subset_sizes.clone(),
        }
    }

    pub fn into_episodes(self) -> Vec<Episode> {
        self.episodes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BBoxRecord {
    pub cy: f64,
    pub cx: f64,
    pub h: f64,
    pub w: f64,
}

impl From<&BBox> for BBoxRecord {
    fn from(b: &BBox) -> Self {
        Self {
            cy: b.center_y,
            cx: b.center_x,
            h: b.height,
            w: b.width,
        }
    }
}

impl From<&BBoxRecord> for BBox {
    fn from(r: &BBoxRecord) -> Self {
        BBox::new(r.cy, r.cx, r.h, r.w)
    }
}

/// Structured action as stored in JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    #[serde(rename = "type")]
    pub action_type: String,
    #[serde(default)]
    pub touch_yx: Option<[f64; 2]>,
    #[serde(default)]
    pub lift_yx: Option<[f64; 2]>,
    #[serde(default)]
    pub text: Option<String>,
}

const TYPE_NAMES: [(ActionKind, &str); 7] = [
    (ActionKind::DualPoint, "DUAL_POINT"),
    (ActionKind::TypeText, "TYPE"),
    (ActionKind::PressBack, "PRESS_BACK"),
    (ActionKind::PressHome, "PRESS_HOME"),
    (ActionKind::PressEnter, "PRESS_ENTER"),
    (ActionKind::TaskComplete, "TASK_COMPLETE"),
    (ActionKind::TaskImpossible, "TASK_IMPOSSIBLE"),
];

impl From<&DeviceAction> for ActionRecord {
    fn from(a: &DeviceAction) -> Self {
        let kind = a.kind();
        let action_type = TYPE_NAMES
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, n)| (*n).to_owned())
            .unwrap_or_default();
        let mut rec = ActionRecord {
            action_type,
            touch_yx: None,
            lift_yx: None,
            text: None,
        };
        match a {
            DeviceAction::DualPoint { touch, lift } => {
                rec.touch_yx = Some([touch.y(), touch.x()]);
                rec.lift_yx = Some([lift.y(), lift.x()]);
            }
            DeviceAction::TypeText { text } => rec.text = Some(text.clone()),
            _ => {}
        }
        rec
    }
}

impl TryFrom<&ActionRecord> for DeviceAction {
    type Error = String;

    fn try_from(r: &ActionRecord) -> Result<Self, Self::Error> {
        let kind = TYPE_NAMES
            .iter()
            .find(|(_, n)| *n == r.action_type)
            .map(|(k, _)| *k)
            .ok_or_else(|| format!("unknown action type {:?}", r.action_type))?;
        let point = |field: &str, v: Option<[f64; 2]>| -> Result<NormalizedPoint, String> {
            let [y, x] = v.ok_or_else(|| format!("{field} missing"))?;
            NormalizedPoint::new(y, x).map_err(|e| format!("{field}: {e}"))
        };
        Ok(match kind {
            ActionKind::DualPoint => {
                let touch = point("touch_yx", r.touch_yx)?;
                // A missing lift point denotes a tap.
                let lift = match r.lift_yx {
                    Some(_) => point("lift_yx", r.lift_yx)?,
                    None => touch,
                };
                DeviceAction::DualPoint { touch, lift }
            }
            ActionKind::TypeText => {
                let text = r.text.clone().ok_or("text missing for TYPE action")?;
                DeviceAction::type_text(text).map_err(|e| e.to_string())?
            }
            ActionKind::PressBack => DeviceAction::PressBack,
            ActionKind::PressHome => DeviceAction::PressHome,
            ActionKind::PressEnter => DeviceAction::PressEnter,
            ActionKind::TaskComplete => DeviceAction::TaskComplete,
            ActionKind::TaskImpossible => DeviceAction::TaskImpossible,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub screen: String,
    pub height_px: u32,
    pub width_px: u32,
    pub bboxes: Vec<BBoxRecord>,
    pub action: ActionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: String,
    pub instruction: String,
    pub subset: String,
    pub split: Split,
    pub steps: Vec<StepRecord>,
}

impl From<&Episode> for EpisodeRecord {
    fn from(e: &Episode) -> Self {
        Self {
            id: e.id.clone(),
            instruction: e.instruction.clone(),
            subset: e.subset.clone(),
            split: e.split,
            steps: e
                .steps
                .iter()
                .map(|s| StepRecord {
                    screen: s.screen_ref.clone(),
                    height_px: s.screen_height_px,
                    width_px: s.screen_width_px,
                    bboxes: s.bboxes.iter().map(BBoxRecord::from).collect(),
                    action: ActionRecord::from(&s.gold_action),
                })
                .collect(),
        }
    }
}

/// One validation finding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    /// Episode id, or `line N` when the id could not be read.
    pub episode: String,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.episode, self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus validation failed with {} issue(s):\n{}", .0.len(), format_issues(.0))]
    Validation(Vec<Issue>),
    #[error("unknown subset {0:?}")]
    UnknownSubset(String),
    #[error("fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn format_issues(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn validate_step(
    root: &Path,
    ep_id: &str,
    idx: usize,
    rec: &StepRecord,
    issues: &mut Vec<Issue>,
) -> Option<Step> {
    let mut issue = |field: String, message: String| {
        issues.push(Issue {
            episode: ep_id.to_owned(),
            field,
            message,
        })
    };
    let f = |name: &str| format!("steps[{idx}].{name}");
    let mut ok = true;

    if rec.height_px == 0 || rec.width_px == 0 {
        issue(f("height_px"), "screen dimensions must be positive".into());
        ok = false;
    }
    for (bi, b) in rec.bboxes.iter().enumerate() {
        if !BBox::from(b).is_within_screen() {
            issue(
                f(&format!("bboxes[{bi}]")),
                format!("box {b:?} not within [0, 1]"),
            );
            ok = false;
        }
    }
    let action = match DeviceAction::try_from(&rec.action) {
        Ok(a) => Some(a),
        Err(e) => {
            issue(f("action"), e);
            None
        }
    };
    let screen_path = root.join(&rec.screen);
    let screen = if Path::new(&rec.screen).is_absolute() || rec.screen.contains("..") {
        issue(
            f("screen"),
            format!(
                "screen path {:?} must be relative to the corpus",
                rec.screen
            ),
        );
        None
    } else {
        match Raster::read_pgm(&screen_path) {
            Ok(r) => {
                if r.height() != rec.height_px as usize || r.width() != rec.width_px as usize {
                    issue(
                        f("screen"),
                        format!(
                            "{} decodes to {}x{}, expected {}x{}",
                            screen_path.display(),
                            r.height(),
                            r.width(),
                            rec.height_px,
                            rec.width_px
                        ),
                    );
                    None
                } else {
                    Some(r)
                }
            }
            Err(RasterError::Io { source, .. }) => {
                issue(f("screen"), format!("{}: {source}", screen_path.display()));
                None
            }
            Err(e) => {
                issue(f("screen"), e.to_string());
                None
            }
        }
    };
    match (ok, action, screen) {
        (true, Some(gold_action), Some(screen)) => Some(Step {
            screen_ref: rec.screen.clone(),
            screen,
            screen_height_px: rec.height_px,
            screen_width_px: rec.width_px,
            bboxes: rec.bboxes.iter().map(BBox::from).collect(),
            gold_action,
        }),
        _ => None,
    }
}

/// Loads and validates `root/episodes.jsonl` with its screenshots.
///
/// Every problem found is reported at once in [`StoreError::Validation`].
pub fn load_corpus(root: &Path) -> Result<Corpus, StoreError> {
    let path = root.join(EPISODES_FILE);
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut issues = Vec::new();
    let mut episodes = Vec::new();
    let mut seen = HashSet::new();

    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpisodeRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                issues.push(Issue {
                    episode: format!("line {}", line_no + 1),
                    field: "record".into(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        let mut ep_issue = |field: &str, message: String| {
            issues.push(Issue {
                episode: rec.id.clone(),
                field: field.to_owned(),
                message,
            })
        };
        let mut ok = true;
        if rec.id.is_empty() {
            ep_issue("id", "empty id".into());
            ok = false;
        } else if !seen.insert(rec.id.clone()) {
            ep_issue("id", "duplicate id".into());
            ok = false;
        }
        if rec.steps.is_empty() {
            ep_issue("steps", "episode has no steps".into());
            ok = false;
        }
        let steps: Vec<Option<Step>> = rec
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| validate_step(root, &rec.id, i, s, &mut issues))
            .collect();
        if let Some(Some(last)) = steps.last() {
            if !last.gold_action.is_terminal() {
                issues.push(Issue {
                    episode: rec.id.clone(),
                    field: format!("steps[{}].action", steps.len() - 1),
                    message: "last action must be TASK_COMPLETE or TASK_IMPOSSIBLE".into(),
                });
                ok = false;
            }
        }
        if ok && steps.iter().all(Option::is_some) {
            episodes.push(Episode {
                id: rec.id,
                instruction: rec.instruction,
                subset: rec.subset,
                split: rec.split,
                steps: steps.into_iter().flatten().collect(),
            });
        }
    }
    if issues.is_empty() {
        Ok(Corpus::new(episodes))
    } else {
        Err(StoreError::Validation(issues))
    }
}

/// Canonical JSONL encoding of a corpus (one line per episode, id order).
pub fn encode_episodes_jsonl(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    for ep in corpus.episodes() {
        serde_json::to_writer(&mut out, &EpisodeRecord::from(ep)).expect("records serialize");
        out.push(b'\n');
    }
    out
}

/// Writes `episodes.jsonl` and every referenced screenshot under `root`.
pub fn write_corpus(corpus: &Corpus, root: &Path) -> Result<(), StoreError> {
    let screens = root.join(SCREENS_DIR);
    fs::create_dir_all(&screens).map_err(io_err(&screens))?;
    for ep in corpus.episodes() {
        for step in &ep.steps {
            let p: PathBuf = root.join(&step.screen_ref);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            step.screen.write_pgm(&p)?;
        }
    }
    let path = root.join(EPISODES_FILE);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(&encode_episodes_jsonl(corpus))
        .map_err(io_err(&path))?;
    Ok(())
}

/// SHA-256 over the episode file and every screenshot, in id order.
pub fn corpus_hash(corpus: &Corpus) -> String {
    let mut h = Sha256::new();
    h.update(encode_episodes_jsonl(corpus));
    for ep in corpus.episodes() {
        for s in &ep.steps {
            h.update(s.screen_ref.as_bytes());
            h.update(s.screen.pixels());
        }
    }
    hex_digest(h)
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn selection_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Keeps `ceil(fraction * n)` episodes of `subset`, where `n` is the subset
/// size when the corpus was loaded or generated.
///
/// Episodes are ranked by a seeded hash of their id and the lowest ranks
/// survive. Because the rank of an id never changes and `n` refers to the
/// original corpus, applying the same call to its own output is a no-op.
pub fn subsample_subset(
    corpus: &Corpus,
    subset: &str,
    fraction: f64,
    seed: u64,
) -> Result<Corpus, StoreError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(StoreError::BadFraction(fraction));
    }
    let n = *corpus
        .origin_subset_sizes
        .get(subset)
        .ok_or_else(|| StoreError::UnknownSubset(subset.to_owned()))?;
    let keep_n = (fraction * n as f64).ceil() as usize;
    let mut ranked: Vec<(&str, [u8; 32])> = corpus
        .episodes
        .iter()
        .filter(|e| e.subset == subset)
        .map(|e| (e.id.as_str(), selection_key(seed, &e.id)))
        .collect();
    ranked.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
    let kept: HashSet<&str> = ranked.iter().take(keep_n).map(|(id, _)| *id).collect();
    Ok(Corpus {
        episodes: corpus
            .episodes
            .iter()
            .filter(|e| e.subset != subset || kept.contains(e.id.as_str()))
            .cloned()
            .collect(),
        origin_subset_sizes: corpus.origin_subset_sizes.clone(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub episodes: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub total: Counts,
    pub by_subset: BTreeMap<String, Counts>,
    pub by_split: BTreeMap<Split, Counts>,
    pub by_subset_split: BTreeMap<String, BTreeMap<Split, Counts>>,
    pub action_histogram: BTreeMap<ActionKind, usize>,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut stats = CorpusStats {
        action_histogram: ActionKind::ALL.iter().map(|k| (*k, 0)).collect(),
        by_split: Split::ALL.iter().map(|s| (*s, Counts::default())).collect(),
        ..Default::default()
    };
    for ep in corpus.episodes() {
        let n = ep.len();
        for c in [
            &mut stats.total,
            stats.by_subset.entry(ep.subset.clone()).or_default(),
            stats.by_split.entry(ep.split).or_default(),
            stats
                .by_subset_split
                .entry(ep.subset.clone())
                .or_default()
                .entry(ep.split)
                .or_default(),
        ] {
            c.episodes += 1;
            c.steps += n;
        }
        for s in &ep.steps {
            *stats
                .action_histogram
                .entry(s.gold_action.kind())
                .or_insert(0) += 1;
        }
    }
    stats
}
