//! Broadcast radio with range cutoff and load-dependent loss.

use super::config::RadioConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

/// Bytes heard by one node over the trailing load window.
#[derive(Debug, Clone, Default)]
struct LoadWindow {
    entries: VecDeque<(u64, usize)>,
    bytes: usize,
}

impl LoadWindow {
    fn expire(&mut self, now: u64, window_ms: u64) {
        while let Some(&(t, b)) = self.entries.front() {
            if t + window_ms > now {
                break;
            }
            self.entries.pop_front();
            self.bytes -= b;
        }
    }

    fn add(&mut self, now: u64, bytes: usize) {
        self.entries.push_back((now, bytes));
        self.bytes += bytes;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub receiver: usize,
    pub at: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub transmissions: u64,
    pub bytes: u64,
    /// In-range (transmission, receiver) pairs.
    pub attempts: u64,
    pub losses: u64,
}

impl ChannelStats {
    pub fn loss_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.losses as f64 / self.attempts as f64
        }
    }
}

/// Every node within `tx_range_m` of the sender (sender included) counts the
/// frame toward its load window; each other in-range node then receives the
/// frame unless a Bernoulli draw with `p = clamp(p0 + c * L, 0, 1)` says it is
/// lost, where `L` is that receiver's windowed load over the capacity.
#[derive(Debug)]
pub struct Channel {
    cfg: RadioConfig,
    windows: Vec<LoadWindow>,
    rng: ChaCha8Rng,
    stats: ChannelStats,
    in_range: Vec<usize>,
}

impl Channel {
    pub fn new(cfg: RadioConfig, nodes: usize, rng: ChaCha8Rng) -> Self {
        Channel { cfg, windows: vec![LoadWindow::default(); nodes], rng, stats: ChannelStats::default(), in_range: Vec::new() }
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    pub fn loss_probability(&self, load_bytes: usize) -> f64 {
        let l = load_bytes as f64 / self.cfg.capacity_bytes_per_window;
        (self.cfg.base_loss + self.cfg.load_coefficient * l).clamp(0.0, 1.0)
    }

    /// Bytes heard by `node` in the window ending at `now`.
    pub fn load_at(&mut self, node: usize, now: u64) -> usize {
        let w = &mut self.windows[node];
        w.expire(now, self.cfg.load_window_ms);
        w.bytes
    }

    /// Transmits `frame_len` bytes from `sender` and returns the receptions
    /// in receiver order.
    pub fn broadcast(&mut self, sender: usize, frame_len: usize, now: u64, positions: &[(f64, f64)]) -> Vec<Delivery> {
        let (sx, sy) = positions[sender];
        let r2 = self.cfg.tx_range_m * self.cfg.tx_range_m;
        self.in_range.clear();
        for (i, &(x, y)) in positions.iter().enumerate() {
            let (dx, dy) = (x - sx, y - sy);
            if dx * dx + dy * dy <= r2 {
                self.in_range.push(i);
            }
        }
        self.stats.transmissions += 1;
        self.stats.bytes += frame_len as u64;
        for &i in &self.in_range {
            let w = &mut self.windows[i];
            w.expire(now, self.cfg.load_window_ms);
            w.add(now, frame_len);
        }
        let mut out = Vec::with_capacity(self.in_range.len());
        for k in 0..self.in_range.len() {
            let i = self.in_range[k];
            if i == sender {
                continue;
            }
            self.stats.attempts += 1;
            let p = self.loss_probability(self.windows[i].bytes);
            // one draw per receiver regardless of p keeps streams aligned
            let u: f64 = self.rng.gen();
            if u < p {
                self.stats.losses += 1;
            } else {
                out.push(Delivery { receiver: i, at: now + self.cfg.delay_ms });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn radio(base_loss: f64, load_coefficient: f64) -> RadioConfig {
        RadioConfig { base_loss, load_coefficient, ..RadioConfig::default() }
    }

    fn line(n: usize, spacing: f64) -> Vec<(f64, f64)> {
        (0..n).map(|i| (i as f64 * spacing, 0.0)).collect()
    }

    #[test]
    fn lossless_limit_reaches_everyone_in_range() {
        let mut ch = Channel::new(radio(0.0, 0.0), 5, ChaCha8Rng::seed_from_u64(1));
        let pos = line(5, 50.0);
        let d = ch.broadcast(2, 100, 10, &pos);
        assert_eq!(d.iter().map(|d| d.receiver).collect::<Vec<_>>(), vec![0, 1, 3, 4]);
        assert!(d.iter().all(|d| d.at == 12));
    }

    #[test]
    fn out_of_range_never_delivered() {
        let mut ch = Channel::new(radio(0.0, 0.0), 3, ChaCha8Rng::seed_from_u64(1));
        let pos = vec![(0.0, 0.0), (300.0, 0.0), (300.01, 0.0)];
        for t in 0..100 {
            let d = ch.broadcast(0, 50, t, &pos);
            assert_eq!(d, vec![Delivery { receiver: 1, at: t + 2 }]);
        }
    }

    #[test]
    fn loss_probability_clamps_and_grows() {
        let ch = Channel::new(radio(0.1, 2.0), 1, ChaCha8Rng::seed_from_u64(1));
        assert_eq!(ch.loss_probability(0), 0.1);
        assert!(ch.loss_probability(10_000) < ch.loss_probability(20_000));
        assert_eq!(ch.loss_probability(1_000_000), 1.0);
    }

    #[test]
    fn window_forgets_old_bytes() {
        let mut ch = Channel::new(radio(0.0, 0.0), 2, ChaCha8Rng::seed_from_u64(1));
        let pos = line(2, 10.0);
        ch.broadcast(0, 100, 0, &pos);
        ch.broadcast(0, 50, 60, &pos);
        assert_eq!(ch.load_at(1, 99), 150);
        assert_eq!(ch.load_at(1, 100), 50);
        assert_eq!(ch.load_at(0, 160), 0);
    }

    #[test]
    fn same_seed_same_deliveries() {
        let pos = line(20, 20.0);
        let run = || {
            let mut ch = Channel::new(radio(0.2, 1.0), 20, ChaCha8Rng::seed_from_u64(9));
            (0..200).flat_map(|t| ch.broadcast(t % 20, 300, t as u64, &pos)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
