//! Periodic stance/swing scheduling.
//!
//! Contact is scheduled, never detected: a [`GaitSchedule`] assigns each
//! foot a periodic list of stance/swing intervals over the unit cycle and
//! carries the swing-foot normal-velocity reference profile. Phase
//! transitions only happen on integrator step boundaries (the caller
//! samples the schedule at step start times).

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::state::Side;
use crate::Result;

/// Contact mode of one foot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContactMode {
    Stance,
    Swing,
}

/// Contact modes of both feet at one instant, `[left, right]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePair {
    pub modes: [ContactMode; 2],
}

impl PhasePair {
    pub const DOUBLE_STANCE: PhasePair = PhasePair {
        modes: [ContactMode::Stance, ContactMode::Stance],
    };

    pub fn new(left: ContactMode, right: ContactMode) -> Self {
        Self { modes: [left, right] }
    }

    #[inline]
    pub fn is_stance(&self, side: Side) -> bool {
        self.modes[side.index()] == ContactMode::Stance
    }

    #[inline]
    pub fn is_swing(&self, side: Side) -> bool {
        self.modes[side.index()] == ContactMode::Swing
    }

    pub fn stance_count(&self) -> usize {
        self.modes.iter().filter(|m| **m == ContactMode::Stance).count()
    }
}

/// One stance or swing interval on the unit gait cycle, `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseInterval {
    pub start: f64,
    pub end: f64,
    pub mode: ContactMode,
}

/// Contiguous support segment of one foot in absolute time, merging
/// intervals across cycle boundaries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SupportSegment {
    /// The foot keeps this mode for the whole cycle.
    Constant(ContactMode),
    /// Maximal segment `[start, end)` containing the query time.
    Bounded { mode: ContactMode, start: f64, end: f64 },
}

/// Per-foot periodic stance/swing timeline plus the swing normal-velocity
/// reference profile (piecewise linear over the swing-local fraction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitSchedule {
    /// Gait period, s.
    pub period: f64,
    /// Interval lists `[left, right]`, each partitioning `[0, 1)`.
    pub feet: [Vec<PhaseInterval>; 2],
    /// Breakpoints `(swing fraction in [0,1], v_z in m/s)` of the swing
    /// normal-velocity reference.
    pub swing_vz_profile: Vec<(f64, f64)>,
}

/// Minimum interval length on the unit cycle. Keeps neighbor lookups and
/// phase sampling robust to floating-point time arithmetic.
const MIN_INTERVAL: f64 = 1e-3;

impl GaitSchedule {
    /// Permanent double stance.
    pub fn standing() -> Self {
        let stance = vec![PhaseInterval {
            start: 0.0,
            end: 1.0,
            mode: ContactMode::Stance,
        }];
        Self {
            period: 1.0,
            feet: [stance.clone(), stance],
            swing_vz_profile: vec![(0.0, 0.0), (1.0, 0.0)],
        }
    }

    /// Alternating single-support stepping with double-support gaps:
    /// left swings on [0.1, 0.4), right on [0.6, 0.9) of the cycle.
    pub fn walk_in_place(period: f64, apex_height: f64) -> Self {
        let swing_duration = 0.3 * period;
        // Triangular v_z: up over the first half of swing, mirrored down.
        let v_peak = 4.0 * apex_height / swing_duration;
        let left = vec![
            PhaseInterval { start: 0.0, end: 0.1, mode: ContactMode::Stance },
            PhaseInterval { start: 0.1, end: 0.4, mode: ContactMode::Swing },
            PhaseInterval { start: 0.4, end: 1.0, mode: ContactMode::Stance },
        ];
        let right = vec![
            PhaseInterval { start: 0.0, end: 0.6, mode: ContactMode::Stance },
            PhaseInterval { start: 0.6, end: 0.9, mode: ContactMode::Swing },
            PhaseInterval { start: 0.9, end: 1.0, mode: ContactMode::Stance },
        ];
        Self {
            period,
            feet: [left, right],
            swing_vz_profile: vec![
                (0.0, 0.0),
                (0.25, v_peak),
                (0.5, 0.0),
                (0.75, -v_peak),
                (1.0, 0.0),
            ],
        }
    }

    /// Check the schedule invariants.
    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0 && self.period.is_finite()) {
            return Err(Error::Config("gait period must be positive".into()));
        }
        for (side, list) in self.feet.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Config(format!("foot {side}: empty interval list")));
            }
            let mut cursor = 0.0;
            for iv in list {
                if (iv.start - cursor).abs() > 1e-12 {
                    return Err(Error::Config(format!(
                        "foot {side}: intervals must partition [0,1) (gap at {cursor})"
                    )));
                }
                if iv.end - iv.start < MIN_INTERVAL {
                    return Err(Error::Config(format!(
                        "foot {side}: interval [{}, {}) shorter than {MIN_INTERVAL}",
                        iv.start, iv.end
                    )));
                }
                cursor = iv.end;
            }
            if (cursor - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "foot {side}: intervals must cover [0,1), end at {cursor}"
                )));
            }
        }
        // No flight phase: at every instant at least one foot in stance.
        let mut boundaries: Vec<f64> = self
            .feet
            .iter()
            .flat_map(|l| l.iter().map(|iv| iv.start))
            .collect();
        boundaries.sort_by(|a, b| a.partial_cmp(b).unwrap());
        boundaries.dedup();
        boundaries.push(1.0);
        for w in boundaries.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let pair = self.phase_at_fraction(mid);
            if pair.stance_count() == 0 {
                return Err(Error::Config(format!("flight phase at cycle fraction {mid}")));
            }
        }
        // Profile fractions must be sorted within [0, 1].
        let p = &self.swing_vz_profile;
        if p.len() < 2
            || p.windows(2).any(|w| w[1].0 <= w[0].0)
            || p.first().is_some_and(|f| f.0 < 0.0)
            || p.last().is_some_and(|l| l.0 > 1.0)
        {
            return Err(Error::Config("swing v_z profile breakpoints must be sorted in [0,1]".into()));
        }
        Ok(())
    }

    #[inline]
    fn fraction(&self, t: f64) -> f64 {
        let f = (t / self.period).rem_euclid(1.0);
        // rem_euclid can return exactly 1.0 for tiny negative inputs.
        if f >= 1.0 {
            0.0
        } else {
            f
        }
    }

    fn interval_index(&self, side: Side, fraction: f64) -> usize {
        let list = &self.feet[side.index()];
        list.iter()
            .position(|iv| fraction >= iv.start && fraction < iv.end)
            .unwrap_or(list.len() - 1)
    }

    pub fn mode_at(&self, side: Side, t: f64) -> ContactMode {
        let f = self.fraction(t);
        self.feet[side.index()][self.interval_index(side, f)].mode
    }

    fn phase_at_fraction(&self, fraction: f64) -> PhasePair {
        PhasePair::new(
            self.feet[0][self.interval_index(Side::Left, fraction)].mode,
            self.feet[1][self.interval_index(Side::Right, fraction)].mode,
        )
    }

    /// Contact modes of both feet at absolute time `t`.
    pub fn phase_at(&self, t: f64) -> PhasePair {
        self.phase_at_fraction(self.fraction(t))
    }

    /// Maximal contiguous same-mode segment containing `t`, in absolute
    /// time, merging intervals that touch across the cycle boundary.
    pub fn support_segment(&self, side: Side, t: f64) -> SupportSegment {
        let list = &self.feet[side.index()];
        let n = list.len();
        let cycle = (t / self.period).div_euclid(1.0);
        let f = self.fraction(t);
        let idx = self.interval_index(side, f);
        let mode = list[idx].mode;

        // Walk backward to the segment start.
        let mut j = idx;
        let mut start_cycle = 0.0;
        let mut visited = 1;
        loop {
            let prev = if j == 0 { n - 1 } else { j - 1 };
            if list[prev].mode != mode || visited >= n {
                break;
            }
            if j == 0 {
                start_cycle -= 1.0;
            }
            j = prev;
            visited += 1;
        }
        if visited >= n && list.iter().all(|iv| iv.mode == mode) {
            return SupportSegment::Constant(mode);
        }
        let start = (cycle + start_cycle + list[j].start) * self.period;

        // Walk forward to the segment end.
        let mut k = idx;
        let mut end_cycle = 0.0;
        loop {
            let next = if k == n - 1 { 0 } else { k + 1 };
            if list[next].mode != mode {
                break;
            }
            if k == n - 1 {
                end_cycle += 1.0;
            }
            k = next;
        }
        let end = (cycle + end_cycle + list[k].end) * self.period;
        SupportSegment::Bounded { mode, start, end }
    }

    /// Half the shortest interval duration, a safe nudge for neighbor
    /// segment lookups.
    pub fn neighbor_nudge(&self) -> f64 {
        let min_len = self
            .feet
            .iter()
            .flat_map(|l| l.iter().map(|iv| iv.end - iv.start))
            .fold(f64::INFINITY, f64::min);
        0.5 * min_len * self.period
    }

    /// Swing-local fraction and duration if `side` is swinging at `t`.
    pub fn swing_progress(&self, side: Side, t: f64) -> Option<(f64, f64)> {
        match self.support_segment(side, t) {
            SupportSegment::Bounded { mode: ContactMode::Swing, start, end } => {
                let duration = end - start;
                Some((((t - start) / duration).clamp(0.0, 1.0), duration))
            }
            SupportSegment::Constant(ContactMode::Swing) => Some((0.0, self.period)),
            _ => None,
        }
    }

    /// Swing normal-velocity reference at swing fraction `f`, m/s.
    pub fn swing_vz(&self, f: f64) -> f64 {
        let p = &self.swing_vz_profile;
        let f = f.clamp(p[0].0, p[p.len() - 1].0);
        for w in p.windows(2) {
            let ((f0, v0), (f1, v1)) = (w[0], w[1]);
            if f <= f1 {
                let s = if f1 > f0 { (f - f0) / (f1 - f0) } else { 0.0 };
                return v0 + s * (v1 - v0);
            }
        }
        p[p.len() - 1].1
    }

    /// Swing-foot height reference: `duration * integral of v_z` up to
    /// swing fraction `f`, exact on the piecewise-linear profile.
    pub fn swing_height(&self, f: f64, duration: f64) -> f64 {
        let p = &self.swing_vz_profile;
        let f = f.clamp(p[0].0, p[p.len() - 1].0);
        let mut area = 0.0;
        for w in p.windows(2) {
            let ((f0, v0), (f1, v1)) = (w[0], w[1]);
            if f <= f0 {
                break;
            }
            let hi = f.min(f1);
            let v_hi = if f1 > f0 {
                v0 + (hi - f0) / (f1 - f0) * (v1 - v0)
            } else {
                v1
            };
            area += 0.5 * (v0 + v_hi) * (hi - f0);
        }
        duration * area
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn standing_is_always_double_stance() {
        let g = GaitSchedule::standing();
        g.validate().unwrap();
        for k in 0..50 {
            let t = k as f64 * 0.173;
            assert_eq!(g.phase_at(t).stance_count(), 2);
        }
        assert_eq!(g.support_segment(Side::Left, 3.7), SupportSegment::Constant(ContactMode::Stance));
    }

    #[test]
    fn walk_in_place_validates_and_alternates() {
        let g = GaitSchedule::walk_in_place(0.8, 0.04);
        g.validate().unwrap();
        // Left swing midpoint.
        assert_eq!(g.mode_at(Side::Left, 0.25 * 0.8), ContactMode::Swing);
        assert_eq!(g.mode_at(Side::Right, 0.25 * 0.8), ContactMode::Stance);
        // Right swing midpoint.
        assert_eq!(g.mode_at(Side::Left, 0.75 * 0.8), ContactMode::Stance);
        assert_eq!(g.mode_at(Side::Right, 0.75 * 0.8), ContactMode::Swing);
        // No flight anywhere on a fine grid.
        for k in 0..400 {
            assert!(g.phase_at(k as f64 * 0.002).stance_count() >= 1);
        }
    }

    #[test]
    fn flight_phase_rejected() {
        let mut g = GaitSchedule::walk_in_place(0.8, 0.04);
        // Make the right foot swing while the left swings too.
        g.feet[1] = vec![
            PhaseInterval { start: 0.0, end: 0.2, mode: ContactMode::Stance },
            PhaseInterval { start: 0.2, end: 0.5, mode: ContactMode::Swing },
            PhaseInterval { start: 0.5, end: 1.0, mode: ContactMode::Stance },
        ];
        assert!(g.validate().is_err());
    }

    #[test]
    fn support_segment_merges_across_cycle_boundary() {
        let g = GaitSchedule::walk_in_place(1.0, 0.04);
        // Left foot stance [0.4, 1.0) + [0.0, 0.1) of the next cycle is one
        // segment [0.4, 1.1).
        match g.support_segment(Side::Left, 0.95) {
            SupportSegment::Bounded { mode, start, end } => {
                assert_eq!(mode, ContactMode::Stance);
                assert_relative_eq!(start, 0.4, epsilon = 1e-12);
                assert_relative_eq!(end, 1.1, epsilon = 1e-12);
            }
            other => panic!("unexpected segment {other:?}"),
        }
        // Query in the wrapped part of the same segment.
        match g.support_segment(Side::Left, 1.05) {
            SupportSegment::Bounded { start, end, .. } => {
                assert_relative_eq!(start, 0.4, epsilon = 1e-12);
                assert_relative_eq!(end, 1.1, epsilon = 1e-12);
            }
            other => panic!("unexpected segment {other:?}"),
        }
    }

    #[test]
    fn swing_height_integrates_profile() {
        let g = GaitSchedule::walk_in_place(0.8, 0.04);
        let (_, duration) = g.swing_progress(Side::Left, 0.25 * 0.8).unwrap();
        assert_relative_eq!(duration, 0.24, epsilon = 1e-12);
        // Apex at mid-swing equals the configured apex height.
        assert_relative_eq!(g.swing_height(0.5, duration), 0.04, epsilon = 1e-12);
        // Full swing returns to the ground.
        assert_relative_eq!(g.swing_height(1.0, duration), 0.0, epsilon = 1e-12);
        // Mid-swing height matches an independent trapezoid sum.
        let f = 0.37;
        let n = 10_000;
        let mut acc = 0.0;
        for i in 0..n {
            let a = f * i as f64 / n as f64;
            let b = f * (i + 1) as f64 / n as f64;
            acc += 0.5 * (g.swing_vz(a) + g.swing_vz(b)) * (b - a);
        }
        assert_relative_eq!(g.swing_height(f, duration), duration * acc, epsilon = 1e-9);
    }

    #[test]
    fn swing_progress_fraction_is_linear() {
        let g = GaitSchedule::walk_in_place(0.8, 0.04);
        let t0 = 0.1 * 0.8;
        let (f, dur) = g.swing_progress(Side::Left, t0 + 0.3 * dur_of(&g)).unwrap();
        assert_relative_eq!(dur, 0.24, epsilon = 1e-12);
        assert_relative_eq!(f, 0.3, epsilon = 1e-9);
    }

    fn dur_of(g: &GaitSchedule) -> f64 {
        g.swing_progress(Side::Left, 0.25 * g.period).unwrap().1
    }
}
