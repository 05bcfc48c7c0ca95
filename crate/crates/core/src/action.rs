//! Device actions and their natural-language surface form.
//!
//! Every action the agent can take on a touch screen is one of seven
//! variants. Dual-point gestures carry a touch and a lift point in
//! normalized screen coordinates, stored y-first. The textual form bins
//! each coordinate into an integer in `0..=99`:
//!
//! ```text
//! tap at 7 90
//! swipe from 3 44 to 40 48
//! Input text "some text"
//! press back | press home | press enter
//! complete
//! impossible
//! ```
//!
//! Parsing is the left inverse of serialization up to quantization: a
//! parsed coordinate is the center of its bin.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of bins per coordinate axis.
pub const NUM_BINS: u8 = 100;

/// Default euclidean cutoff below which a dual-point gesture is a tap.
pub const DEFAULT_TAP_THRESHOLD: f64 = 0.04;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrammarError {
    #[error("coordinate {0} outside [0, 1]")]
    CoordinateOutOfRange(f64),
    #[error("bin {0} outside 0..=99")]
    BinOutOfRange(u32),
    #[error("typed text contains a newline")]
    NewlineInText,
}

/// A point on screen as fractions of height (`y`) and width (`x`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedPoint {
    y: f64,
    x: f64,
}

impl NormalizedPoint {
    pub fn new(y: f64, x: f64) -> Result<Self, GrammarError> {
        for v in [y, x] {
            if !(0.0..=1.0).contains(&v) {
                return Err(GrammarError::CoordinateOutOfRange(v));
            }
        }
        Ok(Self { y, x })
    }

    /// Clamps both coordinates into `[0, 1]`; NaN maps to 0.
    pub fn clamped(y: f64, x: f64) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        Self { y: c(y), x: c(x) }
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn distance(&self, other: &NormalizedPoint) -> f64 {
        (self.y - other.y).hypot(self.x - other.x)
    }

    pub fn binned(&self) -> BinnedPoint {
        BinnedPoint {
            y_bin: bin_unchecked(self.y),
            x_bin: bin_unchecked(self.x),
        }
    }
}

/// A point quantized to the `0..=99` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BinnedPoint {
    pub y_bin: u8,
    pub x_bin: u8,
}

impl BinnedPoint {
    /// Bin centers of both coordinates.
    pub fn center(&self) -> NormalizedPoint {
        NormalizedPoint {
            y: bin_center(self.y_bin),
            x: bin_center(self.x_bin),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DeviceAction {
    DualPoint {
        touch: NormalizedPoint,
        lift: NormalizedPoint,
    },
    TypeText {
        text: String,
    },
    PressBack,
    PressHome,
    PressEnter,
    TaskComplete,
    TaskImpossible,
}

/// Variant tag of a [`DeviceAction`], used for histograms and type checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    DualPoint,
    TypeText,
    PressBack,
    PressHome,
    PressEnter,
    TaskComplete,
    TaskImpossible,
}

impl ActionKind {
    pub const ALL: [ActionKind; 7] = [
        ActionKind::DualPoint,
        ActionKind::TypeText,
        ActionKind::PressBack,
        ActionKind::PressHome,
        ActionKind::PressEnter,
        ActionKind::TaskComplete,
        ActionKind::TaskImpossible,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ActionKind::DualPoint => "DualPoint",
            ActionKind::TypeText => "TypeText",
            ActionKind::PressBack => "PressBack",
            ActionKind::PressHome => "PressHome",
            ActionKind::PressEnter => "PressEnter",
            ActionKind::TaskComplete => "TaskComplete",
            ActionKind::TaskImpossible => "TaskImpossible",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl DeviceAction {
    pub fn tap(y: f64, x: f64) -> Result<Self, GrammarError> {
        let p = NormalizedPoint::new(y, x)?;
        Ok(DeviceAction::DualPoint { touch: p, lift: p })
    }

    pub fn swipe(touch: (f64, f64), lift: (f64, f64)) -> Result<Self, GrammarError> {
        Ok(DeviceAction::DualPoint {
            touch: NormalizedPoint::new(touch.0, touch.1)?,
            lift: NormalizedPoint::new(lift.0, lift.1)?,
        })
    }

    pub fn type_text(text: impl Into<String>) -> Result<Self, GrammarError> {
        let text = text.into();
        if text.contains(['\n', '\r']) {
            return Err(GrammarError::NewlineInText);
        }
        Ok(DeviceAction::TypeText { text })
    }

    pub fn kind(&self) -> ActionKind {
        match self {
            DeviceAction::DualPoint { .. } => ActionKind::DualPoint,
            DeviceAction::TypeText { .. } => ActionKind::TypeText,
            DeviceAction::PressBack => ActionKind::PressBack,
            DeviceAction::PressHome => ActionKind::PressHome,
            DeviceAction::PressEnter => ActionKind::PressEnter,
            DeviceAction::TaskComplete => ActionKind::TaskComplete,
            DeviceAction::TaskImpossible => ActionKind::TaskImpossible,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(
            self,
            DeviceAction::TaskComplete | DeviceAction::TaskImpossible
        )
    }

    /// Checks invariants that the type system does not enforce.
    pub fn validate(&self) -> Result<(), GrammarError> {
        match self {
            DeviceAction::TypeText { text } if text.contains(['\n', '\r']) => {
                Err(GrammarError::NewlineInText)
            }
            _ => Ok(()),
        }
    }

    /// The action after a serialize/parse round trip: coordinates snapped
    /// to bin centers, taps collapsed so that lift equals touch.
    pub fn quantized(&self, tap_threshold: f64) -> DeviceAction {
        match self {
            DeviceAction::DualPoint { touch, lift } => {
                let (t, l) = (touch.binned().center(), lift.binned().center());
                match classify_gesture(&t, &l, tap_threshold) {
                    Gesture::Tap => DeviceAction::DualPoint { touch: t, lift: t },
                    Gesture::Swipe => DeviceAction::DualPoint { touch: t, lift: l },
                }
            }
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gesture {
    Tap,
    Swipe,
}

fn bin_unchecked(v: f64) -> u8 {
    ((v * 100.0).floor() as i64).clamp(0, 99) as u8
}

fn bin_center(b: u8) -> f64 {
    (f64::from(b) + 0.5) / 100.0
}

/// Maps a coordinate in `[0, 1]` to its bin, `min(floor(100 v), 99)`.
pub fn bin_coordinate(v: f64) -> Result<u8, GrammarError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(GrammarError::CoordinateOutOfRange(v));
    }
    Ok(bin_unchecked(v))
}

/// Center of bin `b`, `(b + 0.5) / 100`.
pub fn unbin_coordinate(b: u32) -> Result<f64, GrammarError> {
    if b >= u32::from(NUM_BINS) {
        return Err(GrammarError::BinOutOfRange(b));
    }
    Ok(bin_center(b as u8))
}

pub fn classify_gesture(
    touch: &NormalizedPoint,
    lift: &NormalizedPoint,
    tap_threshold: f64,
) -> Gesture {
    if touch.distance(lift) <= tap_threshold {
        Gesture::Tap
    } else {
        Gesture::Swipe
    }
}

/// Natural-language form of an action.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionString(String);

impl ActionString {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for ActionString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for ActionString {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Serializes with the default tap/swipe threshold.
pub fn serialize_action(a: &DeviceAction) -> ActionString {
    serialize_action_with(a, DEFAULT_TAP_THRESHOLD)
}

pub fn serialize_action_with(a: &DeviceAction, tap_threshold: f64) -> ActionString {
    let s = match a {
        DeviceAction::DualPoint { touch, lift } => {
            // Classified on the quantized points so that the parsed action
            // classifies the same way.
            let (t, l) = (touch.binned(), lift.binned());
            match classify_gesture(&t.center(), &l.center(), tap_threshold) {
                Gesture::Tap => format!("tap at {} {}", t.y_bin, t.x_bin),
                Gesture::Swipe => {
                    format!(
                        "swipe from {} {} to {} {}",
                        t.y_bin, t.x_bin, l.y_bin, l.x_bin
                    )
                }
            }
        }
        DeviceAction::TypeText { text } => {
            let mut s = String::with_capacity(text.len() + 13);
            s.push_str("Input text \"");
            escape_into(text, &mut s);
            s.push('"');
            s
        }
        DeviceAction::PressBack => "press back".to_owned(),
        DeviceAction::PressHome => "press home".to_owned(),
        DeviceAction::PressEnter => "press enter".to_owned(),
        DeviceAction::TaskComplete => "complete".to_owned(),
        DeviceAction::TaskImpossible => "impossible".to_owned(),
    };
    ActionString(s)
}

/// Escapes `"` and `\` with a leading backslash.
pub fn escape_into(text: &str, out: &mut String) {
    for c in text.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Empty,
    UnknownKeyword(String),
    Expected(&'static str),
    MissingCoordinate(&'static str),
    CoordinateTooLarge(u32),
    UnterminatedQuote,
    BadEscape,
    TrailingInput,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::Empty => f.write_str("empty action string"),
            ParseErrorKind::UnknownKeyword(k) => write!(f, "unknown keyword {k:?}"),
            ParseErrorKind::Expected(what) => write!(f, "expected {what}"),
            ParseErrorKind::MissingCoordinate(which) => write!(f, "missing {which} coordinate"),
            ParseErrorKind::CoordinateTooLarge(v) => write!(f, "coordinate {v} > 99"),
            ParseErrorKind::UnterminatedQuote => f.write_str("unterminated quote"),
            ParseErrorKind::BadEscape => f.write_str("invalid escape sequence"),
            ParseErrorKind::TrailingInput => f.write_str("unexpected trailing input"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at byte {offset}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, kind: ParseErrorKind) -> ParseError {
        ParseError {
            offset: self.pos,
            kind,
        }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn skip_spaces(&mut self) -> bool {
        let n = self.rest().len() - self.rest().trim_start_matches(' ').len();
        self.pos += n;
        n > 0
    }

    fn at_end(&self) -> bool {
        self.pos == self.src.len()
    }

    /// Next whitespace-delimited word, without consuming it.
    fn peek_word(&self) -> &'a str {
        let rest = self.rest();
        let end = rest.find(' ').unwrap_or(rest.len());
        &rest[..end]
    }

    fn word(&mut self) -> &'a str {
        let w = self.peek_word();
        self.pos += w.len();
        w
    }

    fn expect_word(&mut self, word: &'static str) -> Result<(), ParseError> {
        self.skip_spaces();
        if self.peek_word() == word {
            self.word();
            Ok(())
        } else {
            Err(self.err(ParseErrorKind::Expected(word)))
        }
    }

    fn coordinate(&mut self, which: &'static str) -> Result<u8, ParseError> {
        self.skip_spaces();
        let start = self.pos;
        let w = self.peek_word();
        if w.is_empty() {
            return Err(self.err(ParseErrorKind::MissingCoordinate(which)));
        }
        if !w.bytes().all(|b| b.is_ascii_digit()) {
            return Err(self.err(ParseErrorKind::MissingCoordinate(which)));
        }
        self.word();
        let v: u32 = w.parse().unwrap_or(u32::MAX);
        if v > 99 {
            return Err(ParseError {
                offset: start,
                kind: ParseErrorKind::CoordinateTooLarge(v),
            });
        }
        Ok(v as u8)
    }

    fn point(
        &mut self,
        which: (&'static str, &'static str),
    ) -> Result<NormalizedPoint, ParseError> {
        let y_bin = self.coordinate(which.0)?;
        let x_bin = self.coordinate(which.1)?;
        Ok(BinnedPoint { y_bin, x_bin }.center())
    }

    fn quoted(&mut self) -> Result<String, ParseError> {
        self.skip_spaces();
        if !self.rest().starts_with('"') {
            return Err(self.err(ParseErrorKind::Expected("opening quote")));
        }
        let open = self.pos;
        self.pos += 1;
        let mut out = String::new();
        let mut chars = self.rest().char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => match chars.next() {
                    Some((_, e @ ('"' | '\\'))) => out.push(e),
                    Some((j, _)) => {
                        self.pos += j;
                        return Err(self.err(ParseErrorKind::BadEscape));
                    }
                    None => break,
                },
                c => out.push(c),
            }
        }
        Err(ParseError {
            offset: open,
            kind: ParseErrorKind::UnterminatedQuote,
        })
    }
}

/// Parses an action string. Surrounding whitespace is ignored and tokens
/// may be separated by one or more spaces.
pub fn parse_action(s: &str) -> Result<DeviceAction, ParseError> {
    let trimmed_end = s.trim_end_matches(' ');
    let mut c = Cursor {
        src: trimmed_end,
        pos: 0,
    };
    c.skip_spaces();
    if c.at_end() {
        return Err(c.err(ParseErrorKind::Empty));
    }
    let kw_start = c.pos;
    let action = match c.word() {
        "tap" => {
            c.expect_word("at")?;
            let p = c.point(("y", "x"))?;
            DeviceAction::DualPoint { touch: p, lift: p }
        }
        "swipe" => {
            c.expect_word("from")?;
            let touch = c.point(("touch y", "touch x"))?;
            c.expect_word("to")?;
            let lift = c.point(("lift y", "lift x"))?;
            DeviceAction::DualPoint { touch, lift }
        }
        "Input" => {
            c.expect_word("text")?;
            let text = c.quoted()?;
            DeviceAction::TypeText { text }
        }
        "press" => {
            c.skip_spaces();
            let start = c.pos;
            match c.word() {
                "back" => DeviceAction::PressBack,
                "home" => DeviceAction::PressHome,
                "enter" => DeviceAction::PressEnter,
                "" => return Err(c.err(ParseErrorKind::Expected("button name"))),
                other => {
                    return Err(ParseError {
                        offset: start,
                        kind: ParseErrorKind::UnknownKeyword(other.to_owned()),
                    })
                }
            }
        }
        "complete" => DeviceAction::TaskComplete,
        "impossible" => DeviceAction::TaskImpossible,
        other => {
            return Err(ParseError {
                offset: kw_start,
                kind: ParseErrorKind::UnknownKeyword(other.to_owned()),
            })
        }
    };
    c.skip_spaces();
    if !c.at_end() {
        return Err(c.err(ParseErrorKind::TrailingInput));
    }
    Ok(action)
}
