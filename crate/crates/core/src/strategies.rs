//! The non-learned routing strategies: direct transmission, timer-utility
//! routing, seek-and-focus, and the offline optimal oracle.
//!
//! All online strategies deliver immediately when the destination is
//! adjacent; the timer machinery only governs forwarding toward
//! intermediaries. (A holder in contact with the destination has its own
//! timer zeroed that same step, so the utility guard alone could never fire
//! toward an adjacent destination.)

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mobility::{neighbors_from_positions, DeviceId, MobilityTrace};
use crate::scalar::Scalar;
use crate::sim::{DeliveredPacket, Metrics, Packet, PacketId, Strategy, TrafficSchedule, WorldView};

/// Forwards a packet only when its destination is in range: one hop from
/// source to destination, minimal transmissions.
#[derive(Debug, Clone, Copy, Default)]
pub struct DirectTransmission;

impl<F: Scalar> Strategy<F> for DirectTransmission {
    fn name(&self) -> &str {
        "direct"
    }

    fn decide(
        &mut self,
        packet: &Packet,
        holder: DeviceId,
        view: &WorldView<'_, F>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<DeviceId> {
        Ok(if view.neighbors(holder).contains(&packet.destination) {
            packet.destination
        } else {
            holder
        })
    }
}

/// The neighbor with the smallest timer to `destination` (ties to the lowest
/// device id), together with that timer. `None` for an empty neighborhood.
fn best_timer_neighbor<F: Scalar>(
    view: &WorldView<'_, F>,
    neighbors: &[DeviceId],
    destination: DeviceId,
) -> Option<(DeviceId, F)> {
    let mut best: Option<(DeviceId, F)> = None;
    for &u in neighbors {
        let tau = view.timer(u, destination);
        if best.map_or(true, |(_, b)| tau < b) {
            best = Some((u, tau));
        }
    }
    best
}

/// Timer-utility routing: forward to the neighbor with the smallest timer to
/// the destination when the holder's own timer exceeds it by more than the
/// threshold; otherwise keep the packet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityRoute<F> {
    pub threshold: F,
}

impl<F: Scalar> Default for UtilityRoute<F> {
    fn default() -> Self {
        UtilityRoute { threshold: F::from_f(10.0) }
    }
}

impl<F: Scalar> Strategy<F> for UtilityRoute<F> {
    fn name(&self) -> &str {
        "utility"
    }

    fn decide(
        &mut self,
        packet: &Packet,
        holder: DeviceId,
        view: &WorldView<'_, F>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<DeviceId> {
        let neighbors = view.neighbors(holder);
        if neighbors.contains(&packet.destination) {
            return Ok(packet.destination);
        }
        // Never-met timers are +infinity, so the guard fails when no
        // neighbor has ever met the destination.
        if let Some((u, tau_u)) = best_timer_neighbor(view, neighbors, packet.destination) {
            if view.timer(holder, packet.destination) > tau_u + self.threshold {
                return Ok(u);
            }
        }
        Ok(holder)
    }
}

/// Tuning knobs for [`SeekAndFocus`]; defaults are the values tuned for 25
/// devices at 50 m range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeekFocusParams<F> {
    /// Probability of forwarding to a random neighbor per seek/re-seek step.
    pub prob: F,
    /// Utility threshold governing the focus phase.
    pub utility_threshold: F,
    /// Focus threshold: seek while every neighbor's timer exceeds this.
    pub focus_threshold: F,
    /// Steps in focus without a forward before switching to re-seek.
    pub focus_patience: usize,
    /// Maximum steps in re-seek before returning to seek.
    pub seek_patience: usize,
    /// Steps during which a packet may not return to its previous sender.
    pub decoupling: usize,
}

impl<F: Scalar> Default for SeekFocusParams<F> {
    fn default() -> Self {
        SeekFocusParams {
            prob: F::from_f(0.5),
            utility_threshold: F::from_f(100.0),
            focus_threshold: F::from_f(20.0),
            focus_patience: 10,
            seek_patience: 50,
            decoupling: 10,
        }
    }
}

impl<F: Scalar> SeekFocusParams<F> {
    pub fn validate(&self) -> Result<()> {
        if !(self.prob >= F::zero() && self.prob <= F::one()) {
            return Err(Error::config("seek probability must be within [0, 1]"));
        }
        if !(self.utility_threshold > F::zero() && self.focus_threshold > F::zero()) {
            return Err(Error::config("seek-and-focus thresholds must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SeekFocusState {
    /// Set when we forward: (sender, receiver, arrival step); turned into
    /// the blacklist entry at the receiver's first decision.
    forwarded: Option<(DeviceId, DeviceId, usize)>,
    /// (previous sender, step received); the packet may not go back to the
    /// sender until `decoupling` steps have elapsed.
    blacklist: Option<(DeviceId, usize)>,
    /// First step of the current unbroken focus stretch.
    focus_since: Option<usize>,
    /// Entry step of the re-seek phase, while in it.
    reseek_since: Option<usize>,
}

/// Seek-and-focus routing: random forwarding (seek) while every neighbor's
/// timer to the destination is above the focus threshold, timer-utility
/// forwarding (focus) otherwise, and a re-seek escape after a focus stretch
/// makes no progress. A packet never returns to its previous sender within
/// the decoupling window.
#[derive(Debug, Clone)]
pub struct SeekAndFocus<F> {
    pub params: SeekFocusParams<F>,
    states: BTreeMap<PacketId, SeekFocusState>,
}

impl<F: Scalar> SeekAndFocus<F> {
    pub fn new(params: SeekFocusParams<F>) -> Result<Self> {
        params.validate()?;
        Ok(SeekAndFocus { params, states: BTreeMap::new() })
    }

    /// Random forwarding shared by seek and re-seek: with probability `prob`
    /// pick a uniformly random eligible neighbor, else stay.
    fn random_forward(
        &self,
        holder: DeviceId,
        eligible: &[DeviceId],
        rng: &mut ChaCha8Rng,
    ) -> DeviceId {
        if eligible.is_empty() {
            return holder;
        }
        if rng.gen::<f64>() < self.params.prob.as_f64() {
            eligible[rng.gen_range(0..eligible.len())]
        } else {
            holder
        }
    }
}

impl<F: Scalar> Strategy<F> for SeekAndFocus<F> {
    fn name(&self) -> &str {
        "seek_focus"
    }

    fn decide(
        &mut self,
        packet: &Packet,
        holder: DeviceId,
        view: &WorldView<'_, F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DeviceId> {
        let t = view.time;
        let params = self.params;
        let state = self.states.entry(packet.id).or_default();

        // Receipt bookkeeping: the packet arrived where we sent it, so the
        // sender joins the blacklist from the arrival step.
        if let Some((from, to, arrived)) = state.forwarded.take() {
            if to == holder {
                state.blacklist = Some((from, arrived));
            }
        }
        let blocked = |u: DeviceId, state: &SeekFocusState| {
            state.blacklist.is_some_and(|(s, at)| s == u && t < at + params.decoupling)
        };

        let neighbors = view.neighbors(holder);
        if neighbors.contains(&packet.destination) {
            state.forwarded = Some((holder, packet.destination, t + 1));
            return Ok(packet.destination);
        }

        let eligible: Vec<DeviceId> =
            neighbors.iter().copied().filter(|&u| !blocked(u, state)).collect();
        let min_timer = best_timer_neighbor(view, neighbors, packet.destination)
            .map_or(F::infinity(), |(_, tau)| tau);

        // Re-seek: random forwarding until some neighbor timer falls to the
        // focus threshold or the phase times out.
        if let Some(since) = state.reseek_since {
            if min_timer <= params.focus_threshold || t - since >= params.seek_patience {
                state.reseek_since = None; // fall through to seek/focus below
            } else {
                let action = self.random_forward(holder, &eligible, rng);
                let state = self.states.get_mut(&packet.id).expect("state exists");
                if action != holder {
                    state.forwarded = Some((holder, action, t + 1));
                }
                return Ok(action);
            }
        }

        if min_timer > params.focus_threshold {
            // Seek phase.
            state.focus_since = None;
            let action = self.random_forward(holder, &eligible, rng);
            let state = self.states.get_mut(&packet.id).expect("state exists");
            if action != holder {
                state.forwarded = Some((holder, action, t + 1));
            }
            return Ok(action);
        }

        // Focus phase: timer-utility forwarding over eligible neighbors.
        let since = *state.focus_since.get_or_insert(t);
        if t - since >= params.focus_patience {
            // No forward for a full focus stretch: escape via re-seek.
            state.focus_since = None;
            state.reseek_since = Some(t);
            let action = self.random_forward(holder, &eligible, rng);
            let state = self.states.get_mut(&packet.id).expect("state exists");
            if action != holder {
                state.forwarded = Some((holder, action, t + 1));
            }
            return Ok(action);
        }
        if let Some((u, tau_u)) = best_timer_neighbor(view, &eligible, packet.destination) {
            if view.timer(holder, packet.destination) > tau_u + params.utility_threshold {
                state.focus_since = None;
                state.forwarded = Some((holder, u, t + 1));
                return Ok(u);
            }
        }
        Ok(holder)
    }

    fn on_delivered(&mut self, packet: &Packet, _time: usize) {
        self.states.remove(&packet.id);
    }

    fn on_dropped(&mut self, packet: &Packet, _time: usize) {
        self.states.remove(&packet.id);
    }
}

/// Offline per-packet optimum for a known trace and traffic schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleOutcome {
    pub delivered: Vec<DeliveredPacket>,
    /// Packets that cannot reach their destination within the horizon under
    /// any forwarding sequence.
    pub undeliverable: Vec<PacketId>,
    pub created: usize,
}

impl OracleOutcome {
    /// Adapts the outcome to the common metrics shape. The oracle is
    /// idealized: no queues, no TTL, no drops; undeliverable packets appear
    /// as in-flight.
    pub fn metrics<F: Scalar>(&self) -> Metrics<F> {
        Metrics {
            created: self.created,
            delivered: self.delivered.clone(),
            dropped: 0,
            in_flight_at_end: self.undeliverable.len(),
            rounds: Vec::new(),
            avg_queue: F::zero(),
            max_queue: 0,
        }
    }
}

struct ActivePacket {
    id: PacketId,
    created_at: usize,
    destination: DeviceId,
    /// Minimum hop count to occupy each device at the current step
    /// (`u32::MAX` = unreachable).
    hops: Vec<u32>,
}

/// Minimal-delay routing with full knowledge of the trace: for each packet,
/// the earliest possible delivery step under one-hop-per-timestep movement,
/// and the minimal hop count among earliest deliveries. Computed by dynamic
/// programming over the time-expanded contact graph — equivalent to flooding
/// a copy along every edge every step and keeping the cheapest copy per
/// device. Queues and TTL do not constrain the oracle.
pub fn optimal_oracle<F: Scalar>(
    trace: &MobilityTrace<F>,
    schedule: &TrafficSchedule,
    range: F,
    total_steps: usize,
) -> Result<OracleOutcome> {
    let n = trace.device_count();
    if total_steps == 0 {
        return Err(Error::config("oracle horizon must be at least one step"));
    }
    if trace.duration() < F::from_n(total_steps - 1) {
        return Err(Error::config("trace does not cover the oracle horizon"));
    }
    if !schedule.creations.windows(2).all(|w| w[0].step <= w[1].step) {
        return Err(Error::Inconsistent("traffic creations are not sorted by step".into()));
    }

    let mut active: Vec<ActivePacket> = Vec::new();
    let mut delivered = Vec::new();
    let mut next_creation = 0;
    let mut created = 0;

    for t in 0..total_steps {
        while next_creation < schedule.creations.len()
            && schedule.creations[next_creation].step == t
        {
            let c = schedule.creations[next_creation];
            if c.source >= n || c.destination >= n {
                return Err(Error::config("traffic references a device outside the trace"));
            }
            let mut hops = vec![u32::MAX; n];
            hops[c.source] = 0;
            active.push(ActivePacket {
                id: next_creation,
                created_at: t,
                destination: c.destination,
                hops,
            });
            next_creation += 1;
            created += 1;
        }
        if active.is_empty() {
            continue;
        }

        let positions = trace.positions_at(F::from_n(t))?;
        let adjacency = neighbors_from_positions(&positions, range);

        let mut still_active = Vec::with_capacity(active.len());
        for mut packet in active {
            // Moves decided at t land at t + 1: keep every copy in place and
            // spread along every contact.
            let mut next = packet.hops.clone();
            for v in 0..n {
                if packet.hops[v] == u32::MAX {
                    continue;
                }
                let via = packet.hops[v] + 1;
                for &u in &adjacency[v] {
                    if via < next[u] {
                        next[u] = via;
                    }
                }
            }
            packet.hops = next;
            if packet.hops[packet.destination] != u32::MAX {
                delivered.push(DeliveredPacket {
                    id: packet.id,
                    delay: t + 1 - packet.created_at,
                    hops: packet.hops[packet.destination] as usize,
                });
            } else {
                still_active.push(packet);
            }
        }
        active = still_active;
    }

    let undeliverable = active.iter().map(|p| p.id).collect();
    Ok(OracleOutcome { delivered, undeliverable, created })
}
