//! Periodic gait timing and contact schedules.
//!
//! A gait is defined by a duty factor `D_f` (stance fraction of the cycle), a
//! step frequency `f_s` (cycles per second), and per-leg phase offsets. Leg
//! `i` is in stance while its leg-local phase `(phase - offset_i) mod 1` lies
//! in `[0, D_f)` and in swing for the rest of the cycle.
//!
//! [`build_schedule`] enumerates every stance change over the next two gait
//! cycles: with four legs that is exactly 16 single-leg events past the
//! initial state. Simultaneous events (diagonal trot pairs) keep separate
//! entries with equal times; the deduplicated change times are available
//! through [`ContactSchedule::merged_times`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const LEG_COUNT: usize = 4;

/// Leg indexing used across the crate: left-front, right-front, left-hind,
/// right-hind.
pub const LEG_NAMES: [&str; LEG_COUNT] = ["LF", "RF", "LH", "RH"];

pub type ContactFlags = [bool; LEG_COUNT];

#[derive(Debug, Error)]
pub enum GaitError {
    #[error("duty factor must lie in (0, 1), got {0}")]
    BadDutyFactor(f64),
    #[error("step frequency must be positive and finite, got {0}")]
    BadStepFrequency(f64),
    #[error("phase offset for leg {leg} must lie in [0, 1), got {value}")]
    BadPhaseOffset { leg: usize, value: f64 },
    #[error("leg {leg}: elapsed swing time {t_sw:.4} s outside [0, {max:.4}] s")]
    BadSwingTime { leg: usize, t_sw: f64, max: f64 },
    #[error("query time {t:.4} s outside schedule span [0, {span:.4}] s")]
    QueryOutsideSpan { t: f64, span: f64 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaitParams {
    pub duty_factor: f64,
    pub step_frequency: f64,
    pub phase_offsets: [f64; LEG_COUNT],
}

impl GaitParams {
    /// Diagonal-pair trot: LF/RH step together, RF/LH half a cycle later.
    pub fn trot(duty_factor: f64, step_frequency: f64) -> Self {
        Self {
            duty_factor,
            step_frequency,
            phase_offsets: [0.0, 0.5, 0.5, 0.0],
        }
    }

    pub fn validate(&self) -> Result<(), GaitError> {
        if !(self.duty_factor.is_finite() && self.duty_factor > 0.0 && self.duty_factor < 1.0) {
            return Err(GaitError::BadDutyFactor(self.duty_factor));
        }
        if !(self.step_frequency.is_finite() && self.step_frequency > 0.0) {
            return Err(GaitError::BadStepFrequency(self.step_frequency));
        }
        for (leg, &o) in self.phase_offsets.iter().enumerate() {
            if !(o.is_finite() && (0.0..1.0).contains(&o)) {
                return Err(GaitError::BadPhaseOffset { leg, value: o });
            }
        }
        Ok(())
    }

    pub fn cycle_time(&self) -> f64 {
        1.0 / self.step_frequency
    }

    pub fn stance_duration(&self) -> f64 {
        self.duty_factor / self.step_frequency
    }

    pub fn swing_duration(&self) -> f64 {
        (1.0 - self.duty_factor) / self.step_frequency
    }

    /// Leg-local phase in [0, 1).
    pub fn leg_phase(&self, phase: f64, leg: usize) -> f64 {
        (phase - self.phase_offsets[leg]).rem_euclid(1.0)
    }

    /// Stance test at a global gait phase. Touchdown (leg phase 0) counts as
    /// stance, lift-off (leg phase `D_f`) as swing.
    pub fn in_stance(&self, phase: f64, leg: usize) -> bool {
        self.leg_phase(phase, leg) < self.duty_factor
    }
}

/// One stance change: `leg` toggles contact at `dt` seconds from now,
/// producing `flags`. The first entry (`leg == None`) carries the current
/// flags at `dt == 0`.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleEvent {
    pub dt: f64,
    pub leg: Option<usize>,
    pub flags: ContactFlags,
}

/// Stance-change timeline over the next two gait cycles.
#[derive(Debug, Clone)]
pub struct ContactSchedule {
    events: Vec<ScheduleEvent>,
    span: f64,
    params: GaitParams,
}

impl ContactSchedule {
    /// All events, starting with the current state at `dt == 0`. Times are
    /// nondecreasing; simultaneous single-leg events carry equal times.
    pub fn events(&self) -> &[ScheduleEvent] {
        &self.events
    }

    /// Number of stance changes past the initial state (16 for four legs
    /// over two cycles).
    pub fn stance_change_count(&self) -> usize {
        self.events.len() - 1
    }

    /// Deduplicated change times (8 for a trot: pair events merge).
    pub fn merged_times(&self) -> Vec<f64> {
        let tol = 1e-12 * self.span.max(1.0);
        let mut out: Vec<f64> = Vec::new();
        for e in &self.events[1..] {
            if out.last().map_or(true, |&t| e.dt - t > tol) {
                out.push(e.dt);
            }
        }
        out
    }

    /// Schedule horizon: two gait cycles.
    pub fn span(&self) -> f64 {
        self.span
    }

    pub fn params(&self) -> &GaitParams {
        &self.params
    }

    /// Index of the last event at or before `t`. Ties from floating-point
    /// arithmetic resolve toward the event (relative slack 1e-9).
    pub fn index_at(&self, t: f64) -> Result<usize, GaitError> {
        let tol = 1e-9 * self.span;
        if !(t >= 0.0) || t > self.span + tol {
            return Err(GaitError::QueryOutsideSpan { t, span: self.span });
        }
        let mut idx = 0;
        for (i, e) in self.events.iter().enumerate() {
            if e.dt <= t + tol {
                idx = i;
            } else {
                break;
            }
        }
        Ok(idx)
    }

    /// Contact flags in effect at `t` seconds from now.
    pub fn flags_at(&self, t: f64) -> Result<ContactFlags, GaitError> {
        Ok(self.events[self.index_at(t)?].flags)
    }
}

/// Builds the stance-change schedule over the next two gait cycles.
///
/// `phase` is the current global gait phase; `swing_times` gives, for each
/// leg currently in swing, the time already spent in the air (ignored for
/// stance legs). The first upcoming touchdown of a swinging leg lands at
/// `(1 - D_f)/f_s - t_sw`; later events follow periodically. Every leg
/// contributes exactly two lift-offs and two touchdowns, so the schedule
/// always holds 16 changes past the initial entry.
pub fn build_schedule(
    params: &GaitParams,
    phase: f64,
    swing_times: &[f64; LEG_COUNT],
) -> Result<ContactSchedule, GaitError> {
    params.validate()?;
    let span = 2.0 * params.cycle_time();
    let stance_d = params.stance_duration();
    let swing_d = params.swing_duration();

    let mut initial = [false; LEG_COUNT];
    let mut changes: Vec<(f64, usize, bool)> = Vec::with_capacity(4 * LEG_COUNT);
    for leg in 0..LEG_COUNT {
        let rho = params.leg_phase(phase, leg);
        let stance_now = rho < params.duty_factor;
        initial[leg] = stance_now;
        let first_dt = if stance_now {
            (params.duty_factor - rho) / params.step_frequency
        } else {
            let t_sw = swing_times[leg];
            if !(0.0..=swing_d).contains(&t_sw) {
                return Err(GaitError::BadSwingTime {
                    leg,
                    t_sw,
                    max: swing_d,
                });
            }
            swing_d - t_sw
        };
        let mut dt = first_dt;
        let mut into_stance = !stance_now;
        for _ in 0..4 {
            changes.push((dt, leg, into_stance));
            dt += if into_stance { stance_d } else { swing_d };
            into_stance = !into_stance;
        }
    }
    changes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut events = Vec::with_capacity(1 + changes.len());
    events.push(ScheduleEvent {
        dt: 0.0,
        leg: None,
        flags: initial,
    });
    let mut flags = initial;
    for (dt, leg, into_stance) in changes {
        flags[leg] = into_stance;
        events.push(ScheduleEvent {
            dt,
            leg: Some(leg),
            flags,
        });
    }
    Ok(ContactSchedule {
        events,
        span,
        params: *params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn trot() -> GaitParams {
        GaitParams::trot(0.6, 1.4)
    }

    #[test]
    fn trot_first_touchdown_and_durations() {
        let p = trot();
        assert_relative_eq!(p.swing_duration(), 0.2857142857142857, epsilon = 1e-12);
        assert_relative_eq!(p.stance_duration(), 0.42857142857142855, epsilon = 1e-12);
        assert_relative_eq!(p.cycle_time(), 0.7142857142857143, epsilon = 1e-12);
        // Leg just lifted: next touchdown one full swing away.
        let s = build_schedule(&p, 0.6, &[0.0; 4]).unwrap();
        let lf_touch = s
            .events()
            .iter()
            .find(|e| e.leg == Some(0) && e.flags[0])
            .unwrap();
        assert_relative_eq!(lf_touch.dt, p.swing_duration(), epsilon = 1e-12);
    }

    #[test]
    fn swing_time_shortens_touchdown() {
        let p = trot();
        // Same phase as above but LF/RH already 0.1 s into their swing.
        let s = build_schedule(&p, 0.6, &[0.1, 0.0, 0.0, 0.1]).unwrap();
        let lf_touch = s
            .events()
            .iter()
            .find(|e| e.leg == Some(0) && e.flags[0])
            .unwrap();
        assert_relative_eq!(lf_touch.dt, p.swing_duration() - 0.1, epsilon = 1e-12);
    }

    #[test]
    fn sixteen_events_nondecreasing_one_leg_each() {
        let s = build_schedule(&trot(), 0.23, &[0.0; 4]).unwrap();
        assert_eq!(s.stance_change_count(), 16);
        assert_eq!(s.events()[0].dt, 0.0);
        assert!(s.events()[0].leg.is_none());
        for w in s.events().windows(2) {
            assert!(w[1].dt >= w[0].dt);
            let flips = (0..LEG_COUNT)
                .filter(|&i| w[0].flags[i] != w[1].flags[i])
                .count();
            assert_eq!(flips, 1);
        }
        let last = s.events().last().unwrap();
        assert!(last.dt <= s.span() + 1e-12);
        assert_relative_eq!(s.span(), 2.0 / 1.4, epsilon = 1e-12);
    }

    #[test]
    fn diagonal_pairs_share_flags() {
        // Pair members change in separate single-leg entries at equal times;
        // the effective flags (after all simultaneous events) keep each
        // diagonal pair synchronized.
        let s = build_schedule(&trot(), 0.0, &[0.0; 4]).unwrap();
        let mut probes = s.merged_times();
        probes.push(0.0);
        for t in probes {
            let f = s.flags_at(t).unwrap();
            assert_eq!(f[0], f[3], "LF/RH at t {t}");
            assert_eq!(f[1], f[2], "RF/LH at t {t}");
        }
        assert_eq!(s.events()[0].flags, [true; 4]);
    }

    #[test]
    fn pairs_complementary_at_half_duty() {
        let p = GaitParams::trot(0.5, 1.4);
        let s = build_schedule(&p, 0.1, &[0.0; 4]).unwrap();
        // With D_f = 0.5 one diagonal pair is always in stance exactly when
        // the other is in swing, except at the shared switch instants.
        for t in [0.05, 0.2, 0.4, 0.6, 0.9, 1.3] {
            let f = s.flags_at(t).unwrap();
            assert_eq!(f[0], !f[1], "t = {t}");
            assert_eq!(f[3], !f[2], "t = {t}");
        }
    }

    #[test]
    fn half_cycle_swaps_pairs() {
        let p = trot();
        let s = build_schedule(&p, 0.0, &[0.0; 4]).unwrap();
        let quarter = 0.25 * p.cycle_time();
        let f0 = s.flags_at(quarter).unwrap();
        let f1 = s.flags_at(quarter + 0.5 * p.cycle_time()).unwrap();
        assert_eq!(f0, [true, false, false, true]);
        assert_eq!(f1, [false, true, true, false]);
    }

    #[test]
    fn second_cycle_repeats_first() {
        let p = trot();
        let s = build_schedule(&p, 0.37, &[0.0; 4]).unwrap();
        let cycle = p.cycle_time();
        for leg in 0..LEG_COUNT {
            let times: Vec<(f64, bool)> = s
                .events()
                .iter()
                .filter(|e| e.leg == Some(leg))
                .map(|e| (e.dt, e.flags[leg]))
                .collect();
            assert_eq!(times.len(), 4);
            assert_relative_eq!(times[2].0 - times[0].0, cycle, epsilon = 1e-12);
            assert_relative_eq!(times[3].0 - times[1].0, cycle, epsilon = 1e-12);
            assert_eq!(times[0].1, times[2].1);
            assert_eq!(times[1].1, times[3].1);
        }
    }

    #[test]
    fn merged_timeline_is_eight_for_trot() {
        let s = build_schedule(&trot(), 0.0, &[0.0; 4]).unwrap();
        assert_eq!(s.stance_change_count(), 16);
        assert_eq!(s.merged_times().len(), 8);
    }

    #[test]
    fn duty_fraction_matches_over_a_cycle() {
        let p = trot();
        let s = build_schedule(&p, 0.81, &[0.0; 4]).unwrap();
        let n = 20_000;
        let dt = p.cycle_time() / n as f64;
        for leg in 0..LEG_COUNT {
            let stance = (0..n)
                .filter(|k| s.flags_at(*k as f64 * dt).unwrap()[leg])
                .count();
            let frac = stance as f64 / n as f64;
            assert!(
                (frac - p.duty_factor).abs() < 2.0 / n as f64 + 1e-9,
                "leg {leg}: {frac}"
            );
        }
    }

    #[test]
    fn bad_inputs_error() {
        let p = trot();
        assert!(matches!(
            build_schedule(&p, 0.6, &[0.5, 0.0, 0.0, 0.0]),
            Err(GaitError::BadSwingTime { leg: 0, .. })
        ));
        let mut bad = p;
        bad.duty_factor = 1.0;
        assert!(matches!(
            build_schedule(&bad, 0.0, &[0.0; 4]),
            Err(GaitError::BadDutyFactor(_))
        ));
        let s = build_schedule(&p, 0.0, &[0.0; 4]).unwrap();
        assert!(s.flags_at(-0.1).is_err());
        assert!(s.flags_at(s.span() + 0.1).is_err());
    }

    proptest! {
        #[test]
        fn schedule_shape_holds_for_any_valid_gait(
            duty in 0.05f64..0.95,
            freq in 0.2f64..5.0,
            phase in 0.0f64..10.0,
            offs in [0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0],
        ) {
            let params = GaitParams { duty_factor: duty, step_frequency: freq, phase_offsets: offs };
            // Swing legs get a consistent elapsed swing time derived from phase.
            let mut t_sw = [0.0; 4];
            for leg in 0..LEG_COUNT {
                let rho = params.leg_phase(phase, leg);
                if rho >= duty {
                    t_sw[leg] = (rho - duty) / freq;
                }
            }
            let s = build_schedule(&params, phase, &t_sw).unwrap();
            prop_assert_eq!(s.stance_change_count(), 16);
            for w in s.events().windows(2) {
                prop_assert!(w[1].dt >= w[0].dt - 1e-12);
            }
            for e in s.events() {
                prop_assert!(e.dt >= 0.0 && e.dt <= s.span() + 1e-9);
            }
            // Flags at dt 0 match the phase test.
            for leg in 0..LEG_COUNT {
                prop_assert_eq!(s.events()[0].flags[leg], params.in_stance(phase, leg));
            }
        }
    }
}
