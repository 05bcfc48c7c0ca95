//! Benchmark action matching.
//!
//! Two actions match when their types agree and, for gestures, when the
//! gesture kinds agree as well. Taps additionally need to land close to
//! each other or inside one shared (expanded) element box; swipes need the
//! same dominant axis; typed text compares case-insensitively after
//! trimming.

use serde::{Deserialize, Serialize};

use crate::action::{classify_gesture, DeviceAction, Gesture, NormalizedPoint};

/// Axis-aligned element box in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub center_y: f64,
    pub center_x: f64,
    pub height: f64,
    pub width: f64,
}

impl BBox {
    pub fn new(center_y: f64, center_x: f64, height: f64, width: f64) -> Self {
        Self {
            center_y,
            center_x,
            height,
            width,
        }
    }

    /// Scales height and width by `factor` about the center.
    pub fn expand(&self, factor: f64) -> BBox {
        BBox {
            height: self.height * factor,
            width: self.width * factor,
            ..*self
        }
    }

    /// `(top, left, bottom, right)` clipped to the unit square.
    pub fn clipped_extent(&self) -> (f64, f64, f64, f64) {
        let top = (self.center_y - self.height / 2.0).max(0.0);
        let bottom = (self.center_y + self.height / 2.0).min(1.0);
        let left = (self.center_x - self.width / 2.0).max(0.0);
        let right = (self.center_x + self.width / 2.0).min(1.0);
        (top, left, bottom, right)
    }

    /// Inclusive containment in the box clipped to the screen.
    pub fn contains(&self, p: &NormalizedPoint) -> bool {
        let (top, left, bottom, right) = self.clipped_extent();
        (top..=bottom).contains(&p.y()) && (left..=right).contains(&p.x())
    }

    /// True when the box lies entirely inside the unit square.
    pub fn is_within_screen(&self) -> bool {
        let ok = |c: f64, extent: f64| {
            extent > 0.0
                && extent <= 1.0
                && c - extent / 2.0 >= -1e-9
                && c + extent / 2.0 <= 1.0 + 1e-9
        };
        ok(self.center_y, self.height) && ok(self.center_x, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub tap_distance_threshold: f64,
    pub bbox_expansion_factor: f64,
    pub tap_threshold: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            tap_distance_threshold: 0.14,
            bbox_expansion_factor: 2.4,
            tap_threshold: crate::action::DEFAULT_TAP_THRESHOLD,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("tap_distance_threshold", self.tap_distance_threshold),
            ("bbox_expansion_factor", self.bbox_expansion_factor),
            ("tap_threshold", self.tap_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// Which rule decided a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatchRule {
    TypeMismatch,
    TapDistance,
    TapSameBBox,
    ScrollAxis,
    TextEqual,
    TypeOnlyEqual,
}

impl MatchRule {
    pub const ALL: [MatchRule; 6] = [
        MatchRule::TypeMismatch,
        MatchRule::TapDistance,
        MatchRule::TapSameBBox,
        MatchRule::ScrollAxis,
        MatchRule::TextEqual,
        MatchRule::TypeOnlyEqual,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MatchRule::TypeMismatch => "TypeMismatch",
            MatchRule::TapDistance => "TapDistance",
            MatchRule::TapSameBBox => "TapSameBBox",
            MatchRule::ScrollAxis => "ScrollAxis",
            MatchRule::TextEqual => "TextEqual",
            MatchRule::TypeOnlyEqual => "TypeOnlyEqual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchResult {
    pub matched: bool,
    pub rule: MatchRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScrollAxis {
    Vertical,
    Horizontal,
}

pub fn expand_bbox(b: &BBox, factor: f64) -> BBox {
    b.expand(factor)
}

/// Vertical when the y displacement dominates (ties go to vertical).
pub fn primary_scroll_axis(touch: &NormalizedPoint, lift: &NormalizedPoint) -> ScrollAxis {
    if (lift.y() - touch.y()).abs() >= (lift.x() - touch.x()).abs() {
        ScrollAxis::Vertical
    } else {
        ScrollAxis::Horizontal
    }
}

fn texts_equal(a: &str, b: &str) -> bool {
    a.trim().to_lowercase() == b.trim().to_lowercase()
}

/// Compares a predicted action with the ground truth. `bboxes` are the
/// detected elements of the ground-truth screen.
pub fn actions_match(
    pred: &DeviceAction,
    gt: &DeviceAction,
    bboxes: &[BBox],
    cfg: &MatchConfig,
) -> MatchResult {
    use DeviceAction::*;
    let result = |matched, rule| MatchResult { matched, rule };
    match (pred, gt) {
        (
            DualPoint {
                touch: pt,
                lift: pl,
            },
            DualPoint {
                touch: gt_t,
                lift: gt_l,
            },
        ) => {
            let pk = classify_gesture(pt, pl, cfg.tap_threshold);
            let gk = classify_gesture(gt_t, gt_l, cfg.tap_threshold);
            match (pk, gk) {
                (Gesture::Tap, Gesture::Tap) => {
                    if pt.distance(gt_t) <= cfg.tap_distance_threshold {
                        return result(true, MatchRule::TapDistance);
                    }
                    let same_box = bboxes.iter().any(|b| {
                        let e = b.expand(cfg.bbox_expansion_factor);
                        e.contains(pt) && e.contains(gt_t)
                    });
                    if same_box {
                        result(true, MatchRule::TapSameBBox)
                    } else {
                        result(false, MatchRule::TapDistance)
                    }
                }
                (Gesture::Swipe, Gesture::Swipe) => result(
                    primary_scroll_axis(pt, pl) == primary_scroll_axis(gt_t, gt_l),
                    MatchRule::ScrollAxis,
                ),
                _ => result(false, MatchRule::TypeMismatch),
            }
        }
        (TypeText { text: a }, TypeText { text: b }) => {
            result(texts_equal(a, b), MatchRule::TextEqual)
        }
        (a, b) if a.kind() == b.kind() => result(true, MatchRule::TypeOnlyEqual),
        _ => result(false, MatchRule::TypeMismatch),
    }
}
