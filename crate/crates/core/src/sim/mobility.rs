//! Straight-road kinematics with constant acceleration phases.

use super::config::TrafficConfig;

/// Motion of one vehicle since its last change of acceleration, in closed
/// form. Distances are along the direction of travel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub t0_ms: u64,
    /// Distance travelled up to `t0_ms`.
    pub s0: f64,
    pub v0: f64,
    /// Zero or negative; a decelerating vehicle stays put once stopped.
    pub a: f64,
}

impl Kinematics {
    pub fn cruising(v: f64) -> Self {
        Kinematics { t0_ms: 0, s0: 0.0, v0: v, a: 0.0 }
    }

    /// Distance travelled and speed at `t_ms` (not before `t0_ms`).
    pub fn at(&self, t_ms: u64) -> (f64, f64) {
        let dt = t_ms.saturating_sub(self.t0_ms) as f64 / 1000.0;
        if self.a < 0.0 {
            let t_stop = self.v0 / -self.a;
            if dt >= t_stop {
                return (self.s0 + self.v0 * self.v0 / (-2.0 * self.a), 0.0);
            }
        }
        (self.s0 + self.v0 * dt + 0.5 * self.a * dt * dt, self.v0 + self.a * dt)
    }

    /// Same trajectory up to `t_ms`, acceleration `a` afterwards.
    pub fn rebase(&self, t_ms: u64, a: f64) -> Self {
        let (s, v) = self.at(t_ms);
        Kinematics { t0_ms: t_ms, s0: s, v0: v, a: if v > 0.0 { a } else { 0.0 } }
    }

    /// Immediate stop at the current position.
    pub fn halt(&self, t_ms: u64) -> Self {
        let (s, _) = self.at(t_ms);
        Kinematics { t0_ms: t_ms, s0: s, v0: 0.0, a: 0.0 }
    }
}

/// Instantaneous state used by the stepping integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleKinematics {
    pub s: f64,
    pub v: f64,
    pub a: f64,
}

/// One explicit step of `dt_s` seconds: `s += v dt + a dt² / 2`, `v += a dt`,
/// with the step that reaches zero speed cut at the stopping point.
pub fn mobility_step(state: &[VehicleKinematics], dt_s: f64) -> Vec<VehicleKinematics> {
    assert!(dt_s > 0.0, "step must be positive");
    state
        .iter()
        .map(|k| {
            let v = k.v + k.a * dt_s;
            if v < 0.0 {
                VehicleKinematics { s: k.s + k.v * k.v / (-2.0 * k.a), v: 0.0, a: k.a }
            } else {
                VehicleKinematics { s: k.s + k.v * dt_s + 0.5 * k.a * dt_s * dt_s, v, a: k.a }
            }
        })
        .collect()
}

/// Initial placement of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub lane: usize,
    /// 0 for the front vehicle of the lane.
    pub rank: usize,
    pub x0: f64,
    pub y: f64,
    /// +1 or -1 along x.
    pub direction: f64,
    pub speed: f64,
}

impl Placement {
    pub fn heading(&self) -> f32 {
        if self.direction > 0.0 {
            0.0
        } else {
            std::f32::consts::PI
        }
    }

    pub fn position(&self, s: f64) -> (f64, f64) {
        (self.x0 + self.direction * s, self.y)
    }
}

/// Vehicle `i` drives in lane `i % lanes` at rank `i / lanes`. Forward lanes
/// put their front vehicle at x = 0 and the rest behind it; opposite lanes
/// cover the same stretch of road heading the other way.
pub fn layout(t: &TrafficConfig) -> Vec<Placement> {
    let per_lane = |lane: usize| (t.vehicle_count + t.lanes - 1 - lane) / t.lanes;
    (0..t.vehicle_count)
        .map(|i| {
            let lane = i % t.lanes;
            let rank = i / t.lanes;
            let opposite = lane >= t.lanes - t.opposite_lanes;
            let span = per_lane(lane).saturating_sub(1) as f64 * t.initial_headway_m;
            let (x0, direction) = if opposite {
                (-span + rank as f64 * t.initial_headway_m, -1.0)
            } else {
                (-(rank as f64) * t.initial_headway_m, 1.0)
            };
            let speed = match (&t.vehicle_speeds_mps, &t.lane_speeds_mps) {
                (Some(v), _) => v[i],
                (None, Some(l)) => l[lane],
                (None, None) => t.speed_mps,
            };
            Placement { lane, rank, x0, y: lane as f64 * t.lane_spacing_m, direction, speed }
        })
        .collect()
}

/// Vehicle indices per lane, front first.
pub fn lane_order(placements: &[Placement], lanes: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); lanes];
    for (i, p) in placements.iter().enumerate() {
        out[p.lane].push(i);
    }
    for l in &mut out {
        l.sort_by_key(|&i| placements[i].rank);
    }
    out
}
