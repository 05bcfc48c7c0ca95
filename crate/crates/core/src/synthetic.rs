//! A deterministic simulated phone screen and task generator.
//!
//! Screens are 64x64 grayscale rasters laid out on a 4x4 grid of 16 px
//! cells. Row 0 carries the screen title; widgets occupy rows 1-3 and a
//! thin home indicator sits at the bottom edge. Every label is drawn as a
//! fixed 5x5 bit pattern, so the agent has to read glyphs to find its
//! target.
//!
//! Four task families are generated:
//!
//! * `tap_label` - open an app from the launcher, then complete.
//! * `type_into` - focus a search field, type a word, press enter.
//! * `scroll_find` - swipe through a list until an item shows up, tap it.
//! * `two_step_memory` - add an item to the cart, then check out. Adding
//!   leaves the screen unchanged, so the second step cannot be told apart
//!   from the first without the action history.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{
    classify_gesture, DeviceAction, Gesture, NormalizedPoint, DEFAULT_TAP_THRESHOLD,
};
use crate::episode::{Corpus, Counts, Episode, Split, Step};
use crate::matcher::{actions_match, BBox, MatchConfig};
use crate::raster::Raster;

pub const SCREEN_PX: usize = 64;
const CELL_PX: usize = 16;
const GRID: usize = 4;
const WIDGET_INSET: usize = 3;
const WIDGET_PX: usize = 10;
const LIST_PAGE: usize = 3;
const MAX_EPISODE_STEPS: usize = 12;

const BACKGROUND: u8 = 24;
const TITLE_BAR: u8 = 48;
const GLYPH_ON: u8 = 255;

pub const APP_LABELS: [&str; 12] = [
    "mail", "maps", "news", "shop", "chat", "music", "photos", "clock", "notes", "games", "books",
    "files",
];
pub const ITEM_LABELS: [&str; 12] = [
    "apple", "bread", "milk", "cheese", "coffee", "rice", "pasta", "juice", "honey", "salt",
    "sugar", "tea",
];
const UI_LABELS: [&str; 13] = [
    "apps", "add", "checkout", "search", "query", "results", "list", "paid", "empty", "info",
    "share", "help", "more",
];
const DISTRACTOR_LABELS: [&str; 4] = ["info", "share", "help", "more"];

/// Words typed in `type_into` tasks. They are deliberately absent from the
/// instruction lexicon so they are spelled out character by character.
pub const TYPED_WORDS: [&str; 16] = [
    "cat", "dog", "sun", "car", "box", "pen", "cup", "hat", "bus", "fox", "key", "owl", "jam",
    "ink", "toy", "egg",
];

const VERBS: [&str; 4] = ["open", "type", "find", "buy"];

/// Every label that has a glyph.
pub fn all_labels() -> Vec<&'static str> {
    APP_LABELS
        .iter()
        .chain(ITEM_LABELS.iter())
        .chain(UI_LABELS.iter())
        .copied()
        .collect()
}

/// Whole words that appear in generated instructions.
pub fn instruction_lexicon() -> Vec<&'static str> {
    VERBS.iter().copied().chain(all_labels()).collect()
}

fn glyph_table() -> &'static Vec<u32> {
    static TABLE: OnceLock<Vec<u32>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = all_labels().len();
        let mut out: Vec<u32> = Vec::with_capacity(n);
        let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
        while out.len() < n {
            state = state
                .wrapping_mul(6_364_136_223_846_793_005)
                .wrapping_add(1_442_695_040_888_963_407);
            let cand = ((state >> 33) as u32) & 0x1ff_ffff;
            let ones = cand.count_ones();
            if !(9..=16).contains(&ones) {
                continue;
            }
            if out.iter().all(|g| (g ^ cand).count_ones() >= 5) {
                out.push(cand);
            }
        }
        out
    })
}

/// The 25-bit 5x5 pattern of a label (bit `5 r + c` is row `r`, column `c`).
pub fn glyph(label: &str) -> Option<u32> {
    all_labels()
        .iter()
        .position(|l| *l == label)
        .map(|i| glyph_table()[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    TapLabel,
    TypeInto,
    ScrollFind,
    TwoStepMemory,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 4] = [
        TaskFamily::TapLabel,
        TaskFamily::TypeInto,
        TaskFamily::ScrollFind,
        TaskFamily::TwoStepMemory,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskFamily::TapLabel => "tap_label",
            TaskFamily::TypeInto => "type_into",
            TaskFamily::ScrollFind => "scroll_find",
            TaskFamily::TwoStepMemory => "two_step_memory",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown task family {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WidgetKind {
    Button,
    TextField,
    ListItem,
    HomeIndicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Widget {
    pub kind: WidgetKind,
    pub label: String,
    pub bbox: BBox,
    /// Field contents for text fields, `focused` marker, otherwise empty.
    pub state: String,
}

/// Grid cell `(row, col)`; widgets live in rows 1..=3.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Screen {
    Launcher {
        apps: Vec<(&'static str, Cell)>,
    },
    App {
        label: &'static str,
        buttons: Vec<(&'static str, Cell)>,
    },
    Search {
        field: Cell,
        buttons: Vec<(&'static str, Cell)>,
        text: String,
        focused: bool,
    },
    Results {
        query: String,
    },
    List {
        items: Vec<&'static str>,
    },
    Detail {
        label: &'static str,
    },
    Product {
        item: &'static str,
        add: Cell,
        checkout: Cell,
        buttons: Vec<(&'static str, Cell)>,
    },
    Done,
    EmptyCart,
}

#[derive(Debug, Clone, PartialEq)]
enum TapEffect {
    Nothing,
    Push(Screen),
    AddToCart,
    Checkout,
    Focus,
    Home,
}

const SEARCH_FIELD_SPAN: usize = 3;

/// Pixel rectangle `(top, left, bottom, right)`, half-open.
type PxRect = (usize, usize, usize, usize);

fn cell_rect((row, col): Cell, span: usize) -> PxRect {
    let top = row * CELL_PX + WIDGET_INSET;
    let left = col * CELL_PX + WIDGET_INSET;
    (
        top,
        left,
        top + WIDGET_PX,
        left + span * CELL_PX - 2 * WIDGET_INSET,
    )
}

const HOME_INDICATOR_RECT: PxRect = (62, 24, 64, 40);

fn rect_bbox((top, left, bottom, right): PxRect) -> BBox {
    let s = SCREEN_PX as f64;
    BBox::new(
        (top + bottom) as f64 / 2.0 / s,
        (left + right) as f64 / 2.0 / s,
        (bottom - top) as f64 / s,
        (right - left) as f64 / s,
    )
}

fn px_rect(b: &BBox) -> PxRect {
    let s = SCREEN_PX as f64;
    let top = ((b.center_y - b.height / 2.0) * s).round() as usize;
    let left = ((b.center_x - b.width / 2.0) * s).round() as usize;
    let bottom = ((b.center_y + b.height / 2.0) * s).round() as usize;
    let right = ((b.center_x + b.width / 2.0) * s).round() as usize;
    (top, left, bottom, right)
}

impl Screen {
    pub fn title(&self) -> &str {
        match self {
            Screen::Launcher { .. } => "apps",
            Screen::App { label, .. } | Screen::Detail { label } => label,
            Screen::Search { .. } => "search",
            Screen::Results { .. } => "results",
            Screen::List { .. } => "list",
            Screen::Product { item, .. } => item,
            Screen::Done => "paid",
            Screen::EmptyCart => "empty",
        }
    }

    fn button(label: &str, cell: Cell) -> Widget {
        Widget {
            kind: WidgetKind::Button,
            label: label.to_owned(),
            bbox: rect_bbox(cell_rect(cell, 1)),
            state: String::new(),
        }
    }

    fn layout(&self, scroll_offset: usize) -> Vec<(Widget, TapEffect)> {
        let mut out = Vec::new();
        let distractors = |out: &mut Vec<(Widget, TapEffect)>, buttons: &[(&str, Cell)]| {
            for (l, c) in buttons {
                out.push((Screen::button(l, *c), TapEffect::Nothing));
            }
        };
        match self {
            Screen::Launcher { apps } => {
                for (label, cell) in apps {
                    out.push((
                        Screen::button(label, *cell),
                        TapEffect::Push(Screen::App {
                            label,
                            buttons: Vec::new(),
                        }),
                    ));
                }
            }
            Screen::App { buttons, .. } => distractors(&mut out, buttons),
            Screen::Search {
                field,
                buttons,
                text,
                focused,
            } => {
                let mut state = text.clone();
                if *focused {
                    state.insert_str(0, "focused:");
                }
                out.push((
                    Widget {
                        kind: WidgetKind::TextField,
                        label: "query".into(),
                        bbox: rect_bbox(cell_rect(*field, SEARCH_FIELD_SPAN)),
                        state,
                    },
                    TapEffect::Focus,
                ));
                distractors(&mut out, buttons);
            }
            Screen::List { items } => {
                for (i, label) in items.iter().skip(scroll_offset).take(LIST_PAGE).enumerate() {
                    out.push((
                        Widget {
                            kind: WidgetKind::ListItem,
                            label: (*label).to_owned(),
                            bbox: rect_bbox(cell_rect((1 + i, 0), GRID)),
                            state: String::new(),
                        },
                        TapEffect::Push(Screen::Detail { label }),
                    ));
                }
            }
            Screen::Product {
                add,
                checkout,
                buttons,
                ..
            } => {
                out.push((Screen::button("add", *add), TapEffect::AddToCart));
                out.push((Screen::button("checkout", *checkout), TapEffect::Checkout));
                distractors(&mut out, buttons);
            }
            Screen::Results { .. } | Screen::Detail { .. } | Screen::Done | Screen::EmptyCart => {}
        }
        out.push((
            Widget {
                kind: WidgetKind::HomeIndicator,
                label: String::new(),
                bbox: rect_bbox(HOME_INDICATOR_RECT),
                state: String::new(),
            },
            TapEffect::Home,
        ));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Complete,
    Impossible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    /// Navigation stack; the last screen is visible. Never empty.
    pub screen_stack: Vec<Screen>,
    /// Index of the first visible list item.
    pub scroll_offset: usize,
    /// Items added to the cart. Not rendered.
    pub cart: u32,
    pub terminated: Option<Termination>,
    pub rng_seed: u64,
}

impl DeviceState {
    pub fn new(screen_stack: Vec<Screen>, rng_seed: u64) -> Self {
        assert!(!screen_stack.is_empty(), "screen stack must not be empty");
        Self {
            screen_stack,
            scroll_offset: 0,
            cart: 0,
            terminated: None,
            rng_seed,
        }
    }

    pub fn top(&self) -> &Screen {
        self.screen_stack
            .last()
            .expect("screen stack is never empty")
    }

    fn top_mut(&mut self) -> &mut Screen {
        self.screen_stack
            .last_mut()
            .expect("screen stack is never empty")
    }

    /// Visible widgets of the top screen.
    pub fn widgets(&self) -> Vec<Widget> {
        self.top()
            .layout(self.scroll_offset)
            .into_iter()
            .map(|(w, _)| w)
            .collect()
    }

    pub fn bboxes(&self) -> Vec<BBox> {
        self.widgets().iter().map(|w| w.bbox).collect()
    }

    fn push(&mut self, s: Screen) {
        self.screen_stack.push(s);
        self.scroll_offset = 0;
    }

    fn max_scroll(&self) -> usize {
        match self.top() {
            Screen::List { items } if !items.is_empty() => {
                (items.len() - 1) / LIST_PAGE * LIST_PAGE
            }
            _ => 0,
        }
    }
}

fn draw_glyph(r: &mut Raster, top: usize, left: usize, label: &str) {
    let Some(bits) = glyph(label) else { return };
    for i in 0..25 {
        if bits >> i & 1 == 1 {
            r.set(top + i / 5, left + i % 5, GLYPH_ON);
        }
    }
}

/// Draws the visible screen.
pub fn render(state: &DeviceState) -> Raster {
    let mut r = Raster::filled(SCREEN_PX, SCREEN_PX, BACKGROUND);
    let screen = state.top();
    r.fill_rect(0, 0, CELL_PX, SCREEN_PX, TITLE_BAR);
    draw_glyph(&mut r, 5, 5, screen.title());
    if let Screen::Results { query } = screen {
        draw_text_marks(&mut r, 5, 14, query);
    }
    for w in state.widgets() {
        let (top, left, bottom, right) = px_rect(&w.bbox);
        let fill = match w.kind {
            WidgetKind::Button => 120,
            WidgetKind::TextField if w.state.starts_with("focused:") => 170,
            WidgetKind::TextField => 80,
            WidgetKind::ListItem => 100,
            WidgetKind::HomeIndicator => 220,
        };
        r.fill_rect(top, left, bottom, right, fill);
        if !w.label.is_empty() {
            draw_glyph(&mut r, top + 2, left + 2, &w.label);
        }
        if w.kind == WidgetKind::TextField {
            let text = w.state.strip_prefix("focused:").unwrap_or(&w.state);
            draw_text_marks(&mut r, top + 3, left + 10, text);
        }
    }
    r
}

/// Two-pixel bars whose shade encodes each character.
fn draw_text_marks(r: &mut Raster, top: usize, left: usize, text: &str) {
    for (i, ch) in text.chars().take(8).enumerate() {
        let shade = 40 + (u32::from(ch) % 27) as u8 * 8;
        r.fill_rect(top, left + 3 * i, top + 4, left + 3 * i + 2, shade);
    }
}

/// Applies one action. Taps on empty space and actions after termination
/// are no-ops.
pub fn step(state: &DeviceState, action: &DeviceAction) -> DeviceState {
    let mut next = state.clone();
    if next.terminated.is_some() {
        return next;
    }
    match action {
        DeviceAction::DualPoint { touch, lift } => {
            match classify_gesture(touch, lift, DEFAULT_TAP_THRESHOLD) {
                Gesture::Tap => apply_tap(&mut next, touch),
                Gesture::Swipe => {
                    let dy = lift.y() - touch.y();
                    let dx = lift.x() - touch.x();
                    if dy.abs() >= dx.abs() {
                        if dy < 0.0 {
                            next.scroll_offset =
                                (next.scroll_offset + LIST_PAGE).min(next.max_scroll());
                        } else {
                            next.scroll_offset = next.scroll_offset.saturating_sub(LIST_PAGE);
                        }
                    }
                }
            }
        }
        DeviceAction::TypeText { text } => {
            if let Screen::Search {
                text: field,
                focused: true,
                ..
            } = next.top_mut()
            {
                field.push_str(text);
            }
        }
        DeviceAction::PressBack => {
            if next.screen_stack.len() > 1 {
                next.screen_stack.pop();
                next.scroll_offset = 0;
            }
        }
        DeviceAction::PressHome => {
            next.screen_stack.truncate(1);
            next.scroll_offset = 0;
        }
        DeviceAction::PressEnter => {
            if let Screen::Search { text, .. } = next.top() {
                if !text.is_empty() {
                    let query = text.clone();
                    next.push(Screen::Results { query });
                }
            }
        }
        DeviceAction::TaskComplete => next.terminated = Some(Termination::Complete),
        DeviceAction::TaskImpossible => next.terminated = Some(Termination::Impossible),
    }
    next
}

fn apply_tap(state: &mut DeviceState, p: &NormalizedPoint) {
    let hit = state
        .top()
        .layout(state.scroll_offset)
        .into_iter()
        .find(|(w, _)| w.bbox.contains(p));
    let Some((_, effect)) = hit else { return };
    match effect {
        TapEffect::Nothing => {}
        TapEffect::Push(s) => state.push(s),
        TapEffect::AddToCart => state.cart += 1,
        TapEffect::Checkout => {
            let s = if state.cart > 0 {
                Screen::Done
            } else {
                Screen::EmptyCart
            };
            state.push(s);
        }
        TapEffect::Focus => {
            if let Screen::Search { focused, .. } = state.top_mut() {
                *focused = true;
            }
        }
        TapEffect::Home => {
            state.screen_stack.truncate(1);
            state.scroll_offset = 0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Goal {
    AppOpen(&'static str),
    ResultsFor(String),
    DetailOf(&'static str),
    CheckedOut,
}

impl Goal {
    pub fn reached(&self, state: &DeviceState) -> bool {
        match (self, state.top()) {
            (Goal::AppOpen(a), Screen::App { label, .. }) => a == label,
            (Goal::ResultsFor(w), Screen::Results { query }) => w == query,
            (Goal::DetailOf(a), Screen::Detail { label }) => a == label,
            (Goal::CheckedOut, Screen::Done) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub instruction: String,
    pub initial: DeviceState,
    pub goal: Goal,
}

fn pick_cells(rng: &mut ChaCha8Rng, n: usize, taken: &[Cell]) -> Vec<Cell> {
    let mut free: Vec<Cell> = (1..GRID)
        .flat_map(|r| (0..GRID).map(move |c| (r, c)))
        .filter(|c| !taken.contains(c))
        .collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n.min(free.len()) {
        out.push(free.swap_remove(rng.random_range(0..free.len())));
    }
    out
}

fn pick_labels(rng: &mut ChaCha8Rng, pool: &[&'static str], n: usize) -> Vec<&'static str> {
    let mut pool = pool.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n.min(pool.len()) {
        out.push(pool.swap_remove(rng.random_range(0..pool.len())));
    }
    out
}

fn distractor_buttons(
    rng: &mut ChaCha8Rng,
    taken: &[Cell],
    max: usize,
) -> Vec<(&'static str, Cell)> {
    let n = rng.random_range(0..=max);
    let labels = pick_labels(rng, &DISTRACTOR_LABELS, n);
    let cells = pick_cells(rng, labels.len(), taken);
    labels.into_iter().zip(cells).collect()
}

fn launcher(rng: &mut ChaCha8Rng) -> Screen {
    let n = rng.random_range(3..=6);
    let labels = pick_labels(rng, &APP_LABELS, n);
    let cells = pick_cells(rng, n, &[]);
    Screen::Launcher {
        apps: labels.into_iter().zip(cells).collect(),
    }
}

/// Samples a task of the given family.
pub fn sample_task(family: TaskFamily, rng: &mut ChaCha8Rng) -> TaskSpec {
    let seed = rng.random::<u64>();
    match family {
        TaskFamily::TapLabel => {
            let home = launcher(rng);
            let Screen::Launcher { apps } = &home else {
                unreachable!()
            };
            let target = apps[rng.random_range(0..apps.len())].0;
            TaskSpec {
                family,
                instruction: format!("open {target}"),
                initial: DeviceState::new(vec![home], seed),
                goal: Goal::AppOpen(target),
            }
        }
        TaskFamily::TypeInto => {
            let word = TYPED_WORDS[rng.random_range(0..TYPED_WORDS.len())];
            let field = (
                rng.random_range(1..GRID),
                rng.random_range(0..=GRID - SEARCH_FIELD_SPAN),
            );
            let taken: Vec<Cell> = (0..SEARCH_FIELD_SPAN)
                .map(|i| (field.0, field.1 + i))
                .collect();
            let buttons = distractor_buttons(rng, &taken, 2);
            let search = Screen::Search {
                field,
                buttons,
                text: String::new(),
                focused: false,
            };
            TaskSpec {
                family,
                instruction: format!("type {word}"),
                initial: DeviceState::new(vec![launcher(rng), search], seed),
                goal: Goal::ResultsFor(word.to_owned()),
            }
        }
        TaskFamily::ScrollFind => {
            let n = rng.random_range(3..=9);
            let items = pick_labels(rng, &ITEM_LABELS, n);
            let target = items[rng.random_range(0..n)];
            TaskSpec {
                family,
                instruction: format!("find {target}"),
                initial: DeviceState::new(vec![launcher(rng), Screen::List { items }], seed),
                goal: Goal::DetailOf(target),
            }
        }
        TaskFamily::TwoStepMemory => {
            let item = ITEM_LABELS[rng.random_range(0..ITEM_LABELS.len())];
            let cells = pick_cells(rng, 2, &[]);
            let buttons = distractor_buttons(rng, &cells, 2);
            let product = Screen::Product {
                item,
                add: cells[0],
                checkout: cells[1],
                buttons,
            };
            TaskSpec {
                family,
                instruction: format!("buy {item}"),
                initial: DeviceState::new(vec![launcher(rng), product], seed),
                goal: Goal::CheckedOut,
            }
        }
    }
}

/// A tap inside `bbox`, jittered by up to 1.5 px around its center.
fn jittered_tap(rng: &mut ChaCha8Rng, bbox: &BBox) -> DeviceAction {
    let j = 1.5 / SCREEN_PX as f64;
    let y = bbox.center_y + rng.random_range(-j..=j);
    let x = bbox.center_x + rng.random_range(-j..=j);
    DeviceAction::tap(y, x).expect("jittered tap stays on screen")
}

fn find_widget(state: &DeviceState, label: &str) -> Option<Widget> {
    state.widgets().into_iter().find(|w| w.label == label)
}

/// The scripted expert: next gold action for `task` in `state`.
pub fn expert_action(task: &TaskSpec, state: &DeviceState, rng: &mut ChaCha8Rng) -> DeviceAction {
    if task.goal.reached(state) {
        return DeviceAction::TaskComplete;
    }
    let tap_label = |rng: &mut ChaCha8Rng, label: &str| {
        find_widget(state, label).map(|w| jittered_tap(rng, &w.bbox))
    };
    let action = match (&task.goal, state.top()) {
        (Goal::AppOpen(target), Screen::Launcher { .. }) => tap_label(rng, target),
        (Goal::ResultsFor(word), Screen::Search { text, focused, .. }) => Some(if !focused {
            tap_label(rng, "query").expect("search screen has a field")
        } else if text.is_empty() {
            DeviceAction::type_text(word.clone()).expect("typed words have no newline")
        } else {
            DeviceAction::PressEnter
        }),
        (Goal::DetailOf(target), Screen::List { .. }) => tap_label(rng, target).or_else(|| {
            Some(DeviceAction::swipe((0.8, 0.5), (0.2, 0.5)).expect("constant swipe is valid"))
        }),
        (Goal::CheckedOut, Screen::Product { .. }) => {
            tap_label(rng, if state.cart == 0 { "add" } else { "checkout" })
        }
        _ => None,
    };
    action.unwrap_or(DeviceAction::TaskImpossible)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_episodes: usize,
    pub family_mix: BTreeMap<TaskFamily, f64>,
    pub seed: u64,
    /// Probabilities of train, val and test.
    pub split_fractions: [f64; 3],
}

impl GeneratorConfig {
    pub fn new(n_episodes: usize, seed: u64) -> Self {
        Self {
            n_episodes,
            family_mix: TaskFamily::ALL.iter().map(|f| (*f, 0.25)).collect(),
            seed,
            split_fractions: [0.8, 0.1, 0.1],
        }
    }

    pub fn with_family(mut self, family: TaskFamily) -> Self {
        self.family_mix = BTreeMap::from([(family, 1.0)]);
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split_fractions = match split {
            Split::Train => [1.0, 0.0, 0.0],
            Split::Val => [0.0, 1.0, 0.0],
            Split::Test => [0.0, 0.0, 1.0],
        };
        self
    }

    // `!(x >= 0.0)` style checks also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), String> {
        if self.n_episodes == 0 {
            return Err("n_episodes must be positive".into());
        }
        if self.family_mix.is_empty() || self.family_mix.values().any(|w| !(*w >= 0.0)) {
            return Err("family weights must be non-negative".into());
        }
        let sum: f64 = self.family_mix.values().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(format!("family weights must sum to 1, got {sum}"));
        }
        let ssum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|w| !(*w >= 0.0)) || (ssum - 1.0).abs() > 1e-6 {
            return Err("split fractions must be non-negative and sum to 1".into());
        }
        Ok(())
    }
}

/// Parameters and declared totals of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorManifest {
    pub generator: String,
    pub config: GeneratorConfig,
    pub totals: Counts,
    pub by_family: BTreeMap<String, Counts>,
    pub by_split: BTreeMap<Split, Counts>,
}

fn weighted_pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[(T, f64)]) -> T {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (item, w) in items {
        acc += w;
        if u < acc {
            return *item;
        }
    }
    items
        .iter()
        .rev()
        .find(|(_, w)| *w > 0.0)
        .map(|(i, _)| *i)
        .unwrap_or(items[0].0)
}

/// Rolls out the expert on a task, recording screens and gold actions.
pub fn rollout(task: &TaskSpec, id: &str, rng: &mut ChaCha8Rng) -> (Vec<Step>, DeviceState) {
    let mut state = task.initial.clone();
    let mut steps = Vec::new();
    while state.terminated.is_none() && steps.len() < MAX_EPISODE_STEPS {
        let action = expert_action(task, &state, rng);
        steps.push(Step {
            screen_ref: format!("screens/{id}/{:02}.pgm", steps.len()),
            screen: render(&state),
            screen_height_px: SCREEN_PX as u32,
            screen_width_px: SCREEN_PX as u32,
            bboxes: state.bboxes(),
            gold_action: action.clone(),
        });
        state = step(&state, &action);
    }
    (steps, state)
}

/// Generated episode together with its task, for verification.
#[derive(Debug, Clone)]
pub struct GeneratedEpisode {
    pub episode: Episode,
    pub task: TaskSpec,
}

fn generate_one(cfg: &GeneratorConfig, index: usize) -> GeneratedEpisode {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let mix: Vec<(TaskFamily, f64)> = cfg.family_mix.iter().map(|(f, w)| (*f, *w)).collect();
    let family = weighted_pick(&mut rng, &mix);
    let splits: Vec<(Split, f64)> = Split::ALL.into_iter().zip(cfg.split_fractions).collect();
    let split = weighted_pick(&mut rng, &splits);
    let task = sample_task(family, &mut rng);
    let id = format!("syn-{}-{index:06}", cfg.seed);
    let (steps, _) = rollout(&task, &id, &mut rng);
    GeneratedEpisode {
        episode: Episode {
            id,
            instruction: task.instruction.clone(),
            steps,
            split,
            subset: family.as_str().to_owned(),
        },
        task,
    }
}

/// Generates episodes with their task specs. Each episode draws from its
/// own random stream, so parallel generation gives the same result.
pub fn generate_episodes(cfg: &GeneratorConfig) -> Result<Vec<GeneratedEpisode>, String> {
    cfg.validate()?;
    Ok((0..cfg.n_episodes)
        .into_par_iter()
        .map(|i| generate_one(cfg, i))
        .collect())
}

pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<(Corpus, GeneratorManifest), String> {
    let generated = generate_episodes(cfg)?;
    let corpus = Corpus::new(generated.into_iter().map(|g| g.episode).collect());
    let mut by_family = BTreeMap::new();
    let mut by_split = BTreeMap::new();
    let mut totals = Counts::default();
    for ep in corpus.episodes() {
        for c in [
            &mut totals,
            by_family
                .entry(ep.subset.clone())
                .or_insert_with(Counts::default),
            by_split.entry(ep.split).or_insert_with(Counts::default),
        ] {
            c.episodes += 1;
            c.steps += ep.len();
        }
    }
    let manifest = GeneratorManifest {
        generator: format!("uivlm-synthetic/{}", env!("CARGO_PKG_VERSION")),
        config: cfg.clone(),
        totals,
        by_family,
        by_split,
    };
    Ok((corpus, manifest))
}

/// Replays gold actions from the task's initial state. Returns true when
/// the episode ends with `TaskComplete` in a goal state.
pub fn replay_reaches_goal(task: &TaskSpec, episode: &Episode) -> bool {
    let mut state = task.initial.clone();
    for (i, s) in episode.steps.iter().enumerate() {
        if render(&state) != s.screen {
            return false;
        }
        let done_before = task.goal.reached(&state);
        state = step(&state, &s.gold_action);
        if i + 1 == episode.steps.len() {
            return done_before
                && s.gold_action == DeviceAction::TaskComplete
                && state.terminated == Some(Termination::Complete);
        }
    }
    false
}

/// Pairs of steps `(i, j)` whose single-screen inputs (instruction and
/// screenshot) are identical but whose gold actions do not match.
///
/// A policy that sees only the current screen must get at least one step
/// of each pair wrong.
pub fn single_view_conflicts(episode: &Episode, cfg: &MatchConfig) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for j in 0..episode.steps.len() {
        for i in 0..j {
            let (a, b) = (&episode.steps[i], &episode.steps[j]);
            if a.screen == b.screen
                && !actions_match(&a.gold_action, &b.gold_action, &b.bboxes, cfg).matched
                && !actions_match(&b.gold_action, &a.gold_action, &a.bboxes, cfg).matched
            {
                out.push((i, j));
            }
        }
    }
    out
}
