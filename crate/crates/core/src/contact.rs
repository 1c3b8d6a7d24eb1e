//! Per-pair contact bookkeeping: inter-meeting/meeting-duration statistics
//! with renewal-theory delay estimates, last-encounter timers with the
//! transitivity shortcut, and timestamped location gossip.
//!
//! Everything here is what devices could maintain locally and exchange while
//! in contact; the simulator keeps one shared copy per pair because contact
//! events are symmetric.

use crate::error::{Error, Result};
use crate::mobility::DeviceId;
use crate::scalar::Scalar;

/// Online contact statistics for one unordered device pair.
///
/// Inter-meeting time is the gap from the end of one contact to the start of
/// the next; meeting duration is the length of a contact. Gap variance uses
/// the one-pass (Welford) update and reports the *sample* variance, 0 until
/// two gaps have been observed.
#[derive(Debug, Clone, PartialEq)]
pub struct PairStats<F> {
    mean_gap: F,
    gap_m2: F,
    gap_count: u64,
    mean_duration: F,
    duration_count: u64,
    meeting_count: u64,
    in_contact: bool,
    last_transition: Option<F>,
}

impl<F: Scalar> Default for PairStats<F> {
    fn default() -> Self {
        PairStats {
            mean_gap: F::zero(),
            gap_m2: F::zero(),
            gap_count: 0,
            mean_duration: F::zero(),
            duration_count: 0,
            meeting_count: 0,
            in_contact: false,
            last_transition: None,
        }
    }
}

impl<F: Scalar> PairStats<F> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the start of a contact at time `t`. The preceding
    /// out-of-contact gap (if any contact came before) feeds the
    /// inter-meeting statistics.
    pub fn observe_meet(&mut self, t: F) -> Result<()> {
        if self.in_contact {
            return Err(Error::Inconsistent(format!("meet at t = {t} while already in contact")));
        }
        if let Some(parted_at) = self.last_transition {
            let gap = t - parted_at;
            if gap < F::zero() {
                return Err(Error::Inconsistent(format!("meet at t = {t} before the last part")));
            }
            self.gap_count += 1;
            let delta = gap - self.mean_gap;
            self.mean_gap += delta / F::from_n(self.gap_count as usize);
            self.gap_m2 += delta * (gap - self.mean_gap);
        }
        self.meeting_count += 1;
        self.in_contact = true;
        self.last_transition = Some(t);
        Ok(())
    }

    /// Records the end of a contact at time `t`.
    pub fn observe_part(&mut self, t: F) -> Result<()> {
        if !self.in_contact {
            return Err(Error::Inconsistent(format!("part at t = {t} while not in contact")));
        }
        let met_at = self.last_transition.expect("in contact implies a transition");
        let duration = t - met_at;
        if duration < F::zero() {
            return Err(Error::Inconsistent(format!("part at t = {t} before the last meet")));
        }
        self.duration_count += 1;
        self.mean_duration += (duration - self.mean_duration) / F::from_n(self.duration_count as usize);
        self.in_contact = false;
        self.last_transition = Some(t);
        Ok(())
    }

    pub fn in_contact(&self) -> bool {
        self.in_contact
    }

    pub fn meeting_count(&self) -> u64 {
        self.meeting_count
    }

    /// Mean inter-meeting gap; `None` until a full gap has been observed.
    pub fn mean_intermeeting(&self) -> Option<F> {
        (self.gap_count > 0).then_some(self.mean_gap)
    }

    /// Sample variance of the inter-meeting gaps (0 with fewer than 2 gaps).
    pub fn var_intermeeting(&self) -> F {
        if self.gap_count >= 2 {
            self.gap_m2 / F::from_n((self.gap_count - 1) as usize)
        } else {
            F::zero()
        }
    }

    /// Mean meeting duration (0 until a contact has completed).
    pub fn mean_meeting_duration(&self) -> F {
        self.mean_duration
    }

    /// Expected residual wait until the pair next meets, given that they are
    /// out of contact: T/2 + sigma^2 / (2T) for mean gap T and gap variance
    /// sigma^2. `None` while no gap has been observed or the mean gap is 0.
    pub fn residual_time(&self) -> Option<F> {
        let t = self.mean_intermeeting()?;
        if t <= F::zero() {
            return None;
        }
        let two = F::from_f(2.0);
        Some(t / two + self.var_intermeeting() / (two * t))
    }

    /// Estimated one-hop delay: 1 step while the pair is in contact,
    /// otherwise the renewal mixture of "still in a meeting" (delay 1) and
    /// "waiting out a gap" (the residual), weighted by the fractions of time
    /// spent in each. Clamped to >= 1 since any transmission costs one step.
    /// `None` when no gap has been observed yet.
    pub fn one_hop_delay(&self) -> Option<F> {
        if self.in_contact {
            return Some(F::one());
        }
        let t = self.mean_intermeeting()?;
        let r = self.residual_time()?;
        let m = self.mean_duration;
        let d = (m + r * t) / (t + m);
        Some(d.max(F::one()))
    }
}

/// Minimum two-leg relay delay over candidate relays: each item carries the
/// (to-relay, relay-to-destination) one-hop estimates, `None` marking an
/// unavailable leg. Returns `None` when no relay has both legs available.
pub fn two_hop_delay<F: Scalar>(
    legs: impl IntoIterator<Item = (Option<F>, Option<F>)>,
) -> Option<F> {
    legs.into_iter()
        .filter_map(|(a, b)| Some(a? + b?))
        .fold(None, |best, d| Some(best.map_or(d, |b: F| b.min(d))))
}

/// Symmetric table of [`PairStats`] for all unordered device pairs.
#[derive(Debug, Clone)]
pub struct ContactStats<F> {
    n: usize,
    pairs: Vec<PairStats<F>>,
}

impl<F: Scalar> ContactStats<F> {
    pub fn new(device_count: usize) -> Self {
        let pairs = vec![PairStats::default(); device_count * device_count.saturating_sub(1) / 2];
        ContactStats { n: device_count, pairs }
    }

    pub fn device_count(&self) -> usize {
        self.n
    }

    fn index(&self, a: DeviceId, b: DeviceId) -> usize {
        debug_assert!(a != b && a < self.n && b < self.n, "pair ({a}, {b}) invalid");
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        lo * (2 * self.n - lo - 1) / 2 + (hi - lo - 1)
    }

    pub fn pair(&self, a: DeviceId, b: DeviceId) -> &PairStats<F> {
        &self.pairs[self.index(a, b)]
    }

    pub fn pair_mut(&mut self, a: DeviceId, b: DeviceId) -> &mut PairStats<F> {
        let i = self.index(a, b);
        &mut self.pairs[i]
    }

    /// One-hop delay estimate from `v` to `d`. The degenerate self-pair
    /// reports 0: a packet already at its destination has no remaining hop.
    pub fn one_hop_delay(&self, v: DeviceId, d: DeviceId) -> Option<F> {
        if v == d {
            return Some(F::zero());
        }
        self.pair(v, d).one_hop_delay()
    }

    /// Best estimated two-hop delay from `v` to `d` relaying through one of
    /// `neighbors`. `None` when the neighbor set is empty or no relay has
    /// both legs estimable.
    pub fn two_hop_delay(&self, v: DeviceId, d: DeviceId, neighbors: &[DeviceId]) -> Option<F> {
        two_hop_delay(
            neighbors
                .iter()
                .map(|&u| (self.one_hop_delay(v, u), self.one_hop_delay(u, d))),
        )
    }

    /// Feeds contact transitions for a full adjacency snapshot at time `t`.
    pub fn observe_adjacency(&mut self, t: F, neighbors: &[Vec<DeviceId>]) -> Result<()> {
        debug_assert_eq!(neighbors.len(), self.n);
        for v in 0..self.n {
            for &u in &neighbors[v] {
                if u <= v {
                    continue; // handle each unordered pair once
                }
                if !self.pair(v, u).in_contact() {
                    self.pair_mut(v, u).observe_meet(t)?;
                }
            }
        }
        // Pairs still flagged in contact but no longer adjacent have parted.
        for v in 0..self.n {
            for u in (v + 1)..self.n {
                if self.pair(v, u).in_contact() && !neighbors[v].contains(&u) {
                    self.pair_mut(v, u).observe_part(t)?;
                }
            }
        }
        Ok(())
    }
}

/// Seconds since a device last met each destination. The own entry is pinned
/// at 0 and never-met destinations carry an infinity sentinel, which all the
/// comparison rules handle naturally.
#[derive(Debug, Clone, PartialEq)]
pub struct TimerTable<F> {
    own: DeviceId,
    tau: Vec<F>,
}

impl<F: Scalar> TimerTable<F> {
    pub fn new(device_count: usize, own: DeviceId) -> Self {
        let mut tau = vec![F::infinity(); device_count];
        tau[own] = F::zero();
        TimerTable { own, tau }
    }

    pub fn get(&self, d: DeviceId) -> F {
        self.tau[d]
    }

    /// Overwrites one timer directly (fixtures and checkpoint restore).
    pub fn set(&mut self, d: DeviceId, value: F) {
        self.tau[d] = value;
    }

    /// Advances all timers by `dt`, then zeroes the entries for devices met
    /// during the step (and the own entry).
    pub fn tick(&mut self, dt: F, met: &[DeviceId]) {
        for t in &mut self.tau {
            *t += dt; // infinity + dt stays infinity
        }
        for &d in met {
            self.tau[d] = F::zero();
        }
        self.tau[self.own] = F::zero();
    }

    /// Transitivity shortcut on encounter: if a neighbor met `d` more
    /// recently than us by more than the estimated travel time between us,
    /// adopt its timer plus that travel time. Never increases a timer.
    pub fn apply_transitivity(&mut self, neighbor: &TimerTable<F>, dist: F, mean_speed: F) {
        debug_assert!(mean_speed > F::zero());
        let travel = dist / mean_speed;
        for d in 0..self.tau.len() {
            let via = neighbor.tau[d] + travel;
            if via < self.tau[d] {
                self.tau[d] = via;
            }
        }
    }
}

/// A device's last known position of some other device, stamped with the
/// *origin* device's own clock at recording time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationRecord<F> {
    pub x: F,
    pub y: F,
    pub stamp: F,
}

/// One device's table of location records, indexed by device id.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordTable<F> {
    records: Vec<Option<LocationRecord<F>>>,
}

impl<F: Scalar> RecordTable<F> {
    pub fn new(device_count: usize) -> Self {
        RecordTable { records: vec![None; device_count] }
    }

    pub fn get(&self, d: DeviceId) -> Option<LocationRecord<F>> {
        self.records[d]
    }

    pub fn set(&mut self, d: DeviceId, record: LocationRecord<F>) {
        self.records[d] = Some(record);
    }

    /// Gossip merge: for every device keep the record with the larger stamp;
    /// on a tie the local record wins. Stamps come from each origin device's
    /// own clock, so no clock synchronization is assumed.
    pub fn merge_from(&mut self, other: &RecordTable<F>) {
        for (mine, theirs) in self.records.iter_mut().zip(&other.records) {
            if let Some(t) = theirs {
                let newer = match mine {
                    Some(m) => t.stamp > m.stamp,
                    None => true,
                };
                if newer {
                    *mine = Some(*t);
                }
            }
        }
    }
}
