//! The discrete-time world: traffic generation, per-device queues, contact
//! bookkeeping, per-packet strategy dispatch, delivery/drop accounting, and
//! metrics.
//!
//! Each timestep runs fixed phases: traffic injection, position/neighbor
//! update, contact statistics + timers + gossip, per-packet decisions over
//! the start-of-phase snapshot, simultaneous moves, drops (TTL expiry and
//! queue overflow), then metrics. Decisions made at time t land at time
//! t + 1, so a delivered packet's delay is always at least 1.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};

use crate::contact::{ContactStats, LocationRecord, RecordTable, TimerTable};
use crate::error::{Error, Result};
use crate::features::{self, FeatureBundle, NormalizationTable};
use crate::mobility::{distance, neighbors_from_positions, DeviceId, MobilityTrace};
use crate::scalar::Scalar;

pub type PacketId = usize;

/// RNG sub-stream ids carved out of one run seed.
const STREAM_TRAFFIC: u64 = 0;
const STREAM_DECISIONS: u64 = 1;

/// A single-copy packet. `history` holds the most recently visited device
/// ids, newest first (entry 0 is the current holder), capped at the
/// configured context-history length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub id: PacketId,
    pub source: DeviceId,
    pub destination: DeviceId,
    pub ttl: usize,
    pub history: Vec<DeviceId>,
    pub created_at: usize,
    pub hops: usize,
}

impl Packet {
    fn new(id: PacketId, source: DeviceId, destination: DeviceId, ttl: usize, created_at: usize, n_history: usize) -> Self {
        let mut history = Vec::with_capacity(n_history);
        if n_history > 0 {
            history.push(source);
        }
        Packet { id, source, destination, ttl, history, created_at, hops: 0 }
    }

    fn visit(&mut self, device: DeviceId, n_history: usize) {
        if n_history > 0 {
            self.history.insert(0, device);
            self.history.truncate(n_history);
        }
    }
}

/// One traffic flow: packets are sourced at `source` toward `destination`
/// during `[start, start + duration)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Flow {
    pub source: DeviceId,
    pub destination: DeviceId,
    pub start: usize,
    pub duration: usize,
}

/// One packet creation event; ids are assigned by position in the sorted
/// creation list, so offline consumers of the schedule see the same ids the
/// simulation assigns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketCreation {
    pub step: usize,
    pub source: DeviceId,
    pub destination: DeviceId,
}

/// Pre-drawn traffic for one run: deterministic for a fixed config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficSchedule {
    pub flows: Vec<Flow>,
    /// Sorted by step (stable within a step).
    pub creations: Vec<PacketCreation>,
}

/// Simulation parameters for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig<F> {
    pub device_count: usize,
    /// Transmission range in meters.
    pub range: F,
    /// Per-device queue capacity; arrivals beyond it are dropped.
    pub queue_capacity: usize,
    /// Mean new flows per timestep.
    pub flow_rate: F,
    /// Mean flow duration in timesteps.
    pub flow_duration: F,
    /// Mean packets per flow per timestep.
    pub packet_rate: F,
    /// Initial TTL (hop budget) stamped on new packets.
    pub ttl_initial: usize,
    pub total_steps: usize,
    /// Trailing traffic-free window; no packet is sourced in the final
    /// `cooldown_steps` timesteps.
    pub cooldown_steps: usize,
    /// Metrics cadence: one time-series row per this many steps.
    pub round_steps: usize,
    /// Context-history length carried by packets.
    pub n_history: usize,
    /// Frozen TTL normalization reference (the training TTL).
    pub ttl_reference: F,
    /// Nominal mean device speed, used for the timer-transitivity travel
    /// estimate.
    pub mean_speed: F,
    pub seed: u64,
}

impl<F: Scalar> SimConfig<F> {
    /// Standard testing parameters for `device_count` devices: queue cap
    /// 200, flow rate 0.001·N/25, mean flow duration 5000, packet rate 0.01,
    /// TTL 3000 (reference 300), 100k steps with a 10k cooldown, rounds of
    /// 1000, history 5, mean speed 3 m/s.
    pub fn standard(device_count: usize, range: F, seed: u64) -> Self {
        SimConfig {
            device_count,
            range,
            queue_capacity: 200,
            flow_rate: F::from_f(0.001) * F::from_n(device_count) / F::from_f(25.0),
            flow_duration: F::from_f(5000.0),
            packet_rate: F::from_f(0.01),
            ttl_initial: 3000,
            total_steps: 100_000,
            cooldown_steps: 10_000,
            round_steps: 1000,
            n_history: 5,
            ttl_reference: F::from_f(300.0),
            mean_speed: F::from_f(3.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.device_count < 2 {
            return Err(Error::config("need at least 2 devices for traffic"));
        }
        if !(self.range > F::zero()) {
            return Err(Error::config("transmission range must be positive"));
        }
        if self.queue_capacity == 0 {
            return Err(Error::config("queue capacity must be at least 1"));
        }
        if !(self.flow_rate > F::zero() && self.flow_duration > F::zero() && self.packet_rate > F::zero()) {
            return Err(Error::config("traffic rates must be positive"));
        }
        if self.ttl_initial == 0 {
            return Err(Error::config("initial TTL must be at least 1"));
        }
        if self.cooldown_steps >= self.total_steps {
            return Err(Error::config("cooldown must be shorter than the run"));
        }
        if self.round_steps == 0 {
            return Err(Error::config("round length must be at least 1"));
        }
        if !(self.ttl_reference > F::zero()) {
            return Err(Error::config("TTL normalization reference must be positive"));
        }
        if !(self.mean_speed > F::zero()) {
            return Err(Error::config("mean speed must be positive"));
        }
        Ok(())
    }

    /// Last timestep (exclusive) at which traffic may be sourced.
    pub fn traffic_cutoff(&self) -> usize {
        self.total_steps - self.cooldown_steps
    }
}

/// Draws the full flow and packet schedule for a run. The initial flow count
/// is round(flow_rate · flow_duration) — the stationary number of concurrent
/// flows — all starting at t = 0; subsequent flow arrivals are Poisson per
/// step from t = 1, durations exponential (ceiled to ≥ 1), and per-flow
/// packet counts Poisson per step, all clipped to the traffic cutoff.
pub fn generate_traffic<F: Scalar>(config: &SimConfig<F>) -> Result<TrafficSchedule> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STREAM_TRAFFIC);

    let flow_rate = config.flow_rate.as_f64();
    let flow_duration = config.flow_duration.as_f64();
    let packet_rate = config.packet_rate.as_f64();
    let cutoff = config.traffic_cutoff();

    let duration_dist = Exp::new(1.0 / flow_duration).expect("validated positive mean");
    let arrival_dist = Poisson::new(flow_rate).expect("validated positive rate");
    let packet_dist = Poisson::new(packet_rate).expect("validated positive rate");

    let draw_flow = |start: usize, rng: &mut ChaCha8Rng| {
        let source = rng.gen_range(0..config.device_count);
        let destination = loop {
            let d = rng.gen_range(0..config.device_count);
            if d != source {
                break d;
            }
        };
        let duration = duration_dist.sample(rng).ceil().max(1.0) as usize;
        Flow { source, destination, start, duration }
    };

    let mut flows = Vec::new();
    let initial = (flow_rate * flow_duration).round() as usize;
    for _ in 0..initial {
        flows.push(draw_flow(0, &mut rng));
    }
    for t in 1..cutoff {
        let n = arrival_dist.sample(&mut rng) as usize;
        for _ in 0..n {
            flows.push(draw_flow(t, &mut rng));
        }
    }

    let mut creations = Vec::new();
    for flow in &flows {
        let end = (flow.start + flow.duration).min(cutoff);
        for step in flow.start..end {
            let n = packet_dist.sample(&mut rng) as usize;
            for _ in 0..n {
                creations.push(PacketCreation { step, source: flow.source, destination: flow.destination });
            }
        }
    }
    creations.sort_by_key(|c| c.step);

    Ok(TrafficSchedule { flows, creations })
}

/// A delivered packet's headline numbers. `delay` is the delivery timestep
/// minus the creation timestep; `hops` counts forwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveredPacket {
    pub id: PacketId,
    pub delay: usize,
    pub hops: usize,
}

/// One row of the per-round time series. Delay/forwards are cumulative means
/// over packets delivered so far (`None` before the first delivery).
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow<F> {
    pub step: usize,
    pub mean_delay: Option<F>,
    pub mean_forwards: Option<F>,
    pub avg_queue: F,
    pub max_queue: usize,
    pub delivered: usize,
    pub dropped: usize,
}

/// Full metrics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics<F> {
    pub created: usize,
    pub delivered: Vec<DeliveredPacket>,
    pub dropped: usize,
    pub in_flight_at_end: usize,
    pub rounds: Vec<RoundRow<F>>,
    /// Queue length averaged over all devices and timesteps.
    pub avg_queue: F,
    /// Largest queue length seen at any device at any step.
    pub max_queue: usize,
}

impl<F: Scalar> Metrics<F> {
    pub fn mean_delay(&self) -> Option<F> {
        mean_over(self.delivered.iter().map(|p| p.delay))
    }

    pub fn mean_forwards(&self) -> Option<F> {
        mean_over(self.delivered.iter().map(|p| p.hops))
    }

    /// Fraction of created packets delivered (1.0 when nothing was created).
    pub fn delivery_rate(&self) -> F {
        if self.created == 0 {
            F::one()
        } else {
            F::from_n(self.delivered.len()) / F::from_n(self.created)
        }
    }
}

fn mean_over<F: Scalar>(values: impl Iterator<Item = usize>) -> Option<F> {
    let mut sum = F::zero();
    let mut count = 0usize;
    for v in values {
        sum += F::from_n(v);
        count += 1;
    }
    (count > 0).then(|| sum / F::from_n(count))
}

/// Mean with a 95% confidence half-width (1.96 · stderr, sample std).
/// The half-width is `None` for a single value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiValue<F> {
    pub mean: F,
    pub half_width: Option<F>,
}

/// Normal-approximation mean and confidence half-width over runs.
pub fn mean_ci<F: Scalar>(values: &[F]) -> Result<CiValue<F>> {
    if values.is_empty() {
        return Err(Error::config("cannot aggregate zero values"));
    }
    let n = F::from_n(values.len());
    let mean = values.iter().copied().sum::<F>() / n;
    if values.len() < 2 {
        return Ok(CiValue { mean, half_width: None });
    }
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / (n - F::one());
    let half = F::from_f(1.96) * (var / n).sqrt();
    Ok(CiValue { mean, half_width: Some(half) })
}

/// Cross-run aggregate of per-run summary metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSummary<F> {
    pub runs: usize,
    pub mean_delay: CiValue<F>,
    pub mean_forwards: CiValue<F>,
    pub delivery_rate: CiValue<F>,
    pub avg_queue: CiValue<F>,
    pub dropped: CiValue<F>,
    /// Maximum queue length seen in any of the runs.
    pub max_queue: usize,
}

/// Aggregates per-run metrics: means with 95% CIs, max-queue as the max over
/// runs. Runs that delivered nothing are excluded from the delay/forwards
/// means; at least one run must have delivered.
pub fn aggregate<F: Scalar>(runs: &[Metrics<F>]) -> Result<AggregateSummary<F>> {
    if runs.is_empty() {
        return Err(Error::config("cannot aggregate zero runs"));
    }
    let delays: Vec<F> = runs.iter().filter_map(|m| m.mean_delay()).collect();
    let forwards: Vec<F> = runs.iter().filter_map(|m| m.mean_forwards()).collect();
    if delays.is_empty() {
        return Err(Error::config("no run delivered any packet"));
    }
    Ok(AggregateSummary {
        runs: runs.len(),
        mean_delay: mean_ci(&delays)?,
        mean_forwards: mean_ci(&forwards)?,
        delivery_rate: mean_ci(&runs.iter().map(|m| m.delivery_rate()).collect::<Vec<_>>())?,
        avg_queue: mean_ci(&runs.iter().map(|m| m.avg_queue).collect::<Vec<_>>())?,
        dropped: mean_ci(&runs.iter().map(|m| F::from_n(m.dropped)).collect::<Vec<_>>())?,
        max_queue: runs.iter().map(|m| m.max_queue).max().unwrap_or(0),
    })
}

/// Read-only snapshot handed to strategies for one decision. All contents
/// reflect the start of the decision phase: every decision in a timestep
/// sees the same world.
pub struct WorldView<'w, F: Scalar> {
    pub time: usize,
    pub positions: &'w [(F, F)],
    /// Sorted neighbor lists for every device under the current range.
    pub adjacency: &'w [Vec<DeviceId>],
    pub queues: &'w [Vec<Packet>],
    pub stats: &'w ContactStats<F>,
    pub timers: &'w [TimerTable<F>],
    pub records: &'w [RecordTable<F>],
    pub table: &'w NormalizationTable<F>,
    pub n_history: usize,
    /// Per-destination normalized bundles for every device, filled before
    /// the decision phase when the strategy requests features. Read through
    /// [`WorldView::bundles_for`].
    pub dest_bundles: &'w BTreeMap<DeviceId, Vec<FeatureBundle<F>>>,
}

/// A decision's assembled network inputs: the state vector, the candidate
/// action list (index 0 = stay), and one action vector per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledDecision<F> {
    pub candidates: Vec<DeviceId>,
    pub state: Vec<F>,
    pub actions: Vec<Vec<F>>,
}

impl<'w, F: Scalar> WorldView<'w, F> {
    pub fn neighbors(&self, v: DeviceId) -> &[DeviceId] {
        &self.adjacency[v]
    }

    /// The legal action set for a packet at `v`: stay first, then the sorted
    /// neighbors.
    pub fn candidates(&self, v: DeviceId) -> Vec<DeviceId> {
        let mut c = Vec::with_capacity(1 + self.adjacency[v].len());
        c.push(v);
        c.extend_from_slice(&self.adjacency[v]);
        c
    }

    /// Time since device `v` last met `d` (+∞ when never met, 0 for itself).
    pub fn timer(&self, v: DeviceId, d: DeviceId) -> F {
        self.timers[v].get(d)
    }

    /// Raw feature inputs of device `u` toward destination `d`.
    pub fn raw_bundle(&self, u: DeviceId, d: DeviceId) -> features::RawBundle<F> {
        let record = if u == d {
            Some(self.positions[u])
        } else {
            self.records[u].get(d).map(|r| (r.x, r.y))
        };
        features::RawBundle {
            queue_len: self.queues[u].len(),
            queue_len_dest: self.queues[u].iter().filter(|p| p.destination == d).count(),
            degree: self.adjacency[u].len(),
            position: self.positions[u],
            record_of_dest: record,
            one_hop: self.stats.one_hop_delay(u, d),
            two_hop: self.stats.two_hop_delay(u, d, &self.adjacency[u]),
        }
    }

    /// Normalized bundles of every device toward destination `d`, cached per
    /// step. Present only when the active strategy requested features.
    pub fn bundles_for(&self, d: DeviceId) -> Result<&[FeatureBundle<F>]> {
        self.dest_bundles
            .get(&d)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Inconsistent(format!("no feature bundles prepared for destination {d}")))
    }

    /// Assembles the state vector and per-candidate action vectors for a
    /// packet held at `v`.
    pub fn assemble(&self, packet: &Packet, v: DeviceId) -> Result<AssembledDecision<F>> {
        let bundles = self.bundles_for(packet.destination)?;
        let gather = |ids: &[DeviceId]| ids.iter().map(|&u| bundles[u]).collect::<Vec<_>>();

        let state = features::state_features(self.table, packet.ttl, &bundles[v], &gather(&self.adjacency[v]))?;
        let candidates = self.candidates(v);
        let actions = candidates
            .iter()
            .map(|&u| {
                let context = features::context_bits(&packet.history, u, self.n_history);
                features::action_features(self.table, &bundles[u], &gather(&self.adjacency[u]), &context)
            })
            .collect();
        Ok(AssembledDecision { candidates, state, actions })
    }
}

/// A routing strategy: picks the next hop for each packet each timestep.
pub trait Strategy<F: Scalar> {
    fn name(&self) -> &str;

    /// Whether the world should precompute normalized feature bundles for
    /// the destinations in play before the decision phase.
    fn needs_features(&self) -> bool {
        false
    }

    /// Returns the chosen action: a neighbor of `holder` (the device with
    /// the packet), or `holder` itself to keep the packet.
    fn decide(
        &mut self,
        packet: &Packet,
        holder: DeviceId,
        view: &WorldView<'_, F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DeviceId>;

    /// Called when a packet reaches its destination (after the final hop is
    /// recorded on the packet).
    fn on_delivered(&mut self, _packet: &Packet, _time: usize) {}

    /// Called when a packet is dropped (TTL expiry or queue overflow).
    fn on_dropped(&mut self, _packet: &Packet, _time: usize) {}
}

/// The mutable simulation state for one run.
pub struct World<'a, F: Scalar> {
    trace: &'a MobilityTrace<F>,
    config: SimConfig<F>,
    table: NormalizationTable<F>,
    schedule: TrafficSchedule,
    next_creation: usize,

    time: usize,
    queues: Vec<Vec<Packet>>,
    stats: ContactStats<F>,
    timers: Vec<TimerTable<F>>,
    records: Vec<RecordTable<F>>,
    positions: Vec<(F, F)>,
    adjacency: Vec<Vec<DeviceId>>,
    rng: ChaCha8Rng,

    // Scratch buffers reused across steps.
    timer_snapshot: Vec<TimerTable<F>>,
    record_snapshot: Vec<RecordTable<F>>,
    dest_bundles: BTreeMap<DeviceId, Vec<FeatureBundle<F>>>,

    created: usize,
    delivered: Vec<DeliveredPacket>,
    dropped: usize,
    sum_delay: F,
    sum_hops: F,
    queue_len_sum: F,
    max_queue: usize,
    rounds: Vec<RoundRow<F>>,
}

impl<'a, F: Scalar> World<'a, F> {
    pub fn new(trace: &'a MobilityTrace<F>, config: SimConfig<F>, schedule: TrafficSchedule) -> Result<Self> {
        config.validate()?;
        if trace.device_count() != config.device_count {
            return Err(Error::config(format!(
                "trace has {} devices but config expects {}",
                trace.device_count(),
                config.device_count
            )));
        }
        if trace.duration() < F::from_n(config.total_steps.saturating_sub(1)) {
            return Err(Error::config(format!(
                "trace duration {} does not cover {} steps",
                trace.duration(),
                config.total_steps
            )));
        }
        let n = config.device_count;
        let table = NormalizationTable::new(n, trace.area(), config.ttl_reference)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_DECISIONS);
        Ok(World {
            trace,
            config,
            table,
            schedule,
            next_creation: 0,
            time: 0,
            queues: vec![Vec::new(); n],
            stats: ContactStats::new(n),
            timers: (0..n).map(|v| TimerTable::new(n, v)).collect(),
            records: vec![RecordTable::new(n); n],
            positions: vec![(F::zero(), F::zero()); n],
            adjacency: vec![Vec::new(); n],
            rng,
            timer_snapshot: Vec::new(),
            record_snapshot: Vec::new(),
            dest_bundles: BTreeMap::new(),
            created: 0,
            delivered: Vec::new(),
            dropped: 0,
            sum_delay: F::zero(),
            sum_hops: F::zero(),
            queue_len_sum: F::zero(),
            max_queue: 0,
            rounds: Vec::new(),
        })
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn config(&self) -> &SimConfig<F> {
        &self.config
    }

    fn in_flight(&self) -> usize {
        self.queues.iter().map(Vec::len).sum()
    }

    /// Advances the world by one timestep under `strategy`.
    pub fn step(&mut self, strategy: &mut dyn Strategy<F>) -> Result<()> {
        if self.time >= self.config.total_steps {
            return Err(Error::Inconsistent("stepping past the end of the run".into()));
        }
        let t = self.time;
        let n = self.config.device_count;

        // Traffic injection: new packets join their source queue, subject to
        // the queue cap like any other arrival.
        while self.next_creation < self.schedule.creations.len()
            && self.schedule.creations[self.next_creation].step == t
        {
            let c = self.schedule.creations[self.next_creation];
            let id = self.next_creation;
            self.next_creation += 1;
            self.created += 1;
            let packet = Packet::new(id, c.source, c.destination, self.config.ttl_initial, t, self.config.n_history);
            if self.queues[c.source].len() < self.config.queue_capacity {
                self.queues[c.source].push(packet);
            } else {
                self.dropped += 1;
                strategy.on_dropped(&packet, t);
            }
        }

        // Positions and neighbor sets.
        self.positions = self.trace.positions_at(F::from_n(t))?;
        self.adjacency = neighbors_from_positions(&self.positions, self.config.range);

        // Contact statistics, timers (tick + transitivity), location gossip.
        self.stats.observe_adjacency(F::from_n(t), &self.adjacency)?;
        for v in 0..n {
            self.timers[v].tick(F::one(), &self.adjacency[v]);
        }
        self.timer_snapshot.clone_from(&self.timers);
        for v in 0..n {
            for &u in &self.adjacency[v] {
                let d = distance(self.positions[v], self.positions[u]);
                self.timers[v].apply_transitivity(&self.timer_snapshot[u], d, self.config.mean_speed);
            }
        }
        for v in 0..n {
            let (x, y) = self.positions[v];
            self.records[v].set(v, LocationRecord { x, y, stamp: F::from_n(t) });
        }
        self.record_snapshot.clone_from(&self.records);
        for v in 0..n {
            for &u in &self.adjacency[v] {
                self.records[v].merge_from(&self.record_snapshot[u]);
            }
        }

        // Optional per-destination feature bundles for learned strategies.
        self.dest_bundles.clear();
        if strategy.needs_features() {
            let dests: BTreeSet<DeviceId> =
                self.queues.iter().flatten().map(|p| p.destination).collect();
            // Borrow field-by-field so the view can be built before filling
            // the cache it points at.
            let mut bundles = BTreeMap::new();
            {
                let view = WorldView {
                    time: t,
                    positions: &self.positions,
                    adjacency: &self.adjacency,
                    queues: &self.queues,
                    stats: &self.stats,
                    timers: &self.timers,
                    records: &self.records,
                    table: &self.table,
                    n_history: self.config.n_history,
                    dest_bundles: &self.dest_bundles,
                };
                for d in dests {
                    let per_device = (0..n)
                        .map(|u| self.table.bundle(&view.raw_bundle(u, d)))
                        .collect::<Result<Vec<_>>>()?;
                    bundles.insert(d, per_device);
                }
            }
            self.dest_bundles = bundles;
        }

        // Decisions over the frozen snapshot.
        let view = WorldView {
            time: t,
            positions: &self.positions,
            adjacency: &self.adjacency,
            queues: &self.queues,
            stats: &self.stats,
            timers: &self.timers,
            records: &self.records,
            table: &self.table,
            n_history: self.config.n_history,
            dest_bundles: &self.dest_bundles,
        };
        let mut decisions: Vec<Vec<DeviceId>> = Vec::with_capacity(n);
        for v in 0..n {
            let mut targets = Vec::with_capacity(self.queues[v].len());
            for packet in &self.queues[v] {
                let action = strategy.decide(packet, v, &view, &mut self.rng)?;
                if action != v && !self.adjacency[v].contains(&action) {
                    return Err(Error::Protocol(format!(
                        "strategy {} returned {action} for packet {} at device {v}, outside its action set",
                        strategy.name(),
                        packet.id
                    )));
                }
                targets.push(action);
            }
            decisions.push(targets);
        }

        // Simultaneous moves, then drops (TTL expiry, queue overflow).
        let mut retained: Vec<Vec<Packet>> = (0..n).map(|_| Vec::new()).collect();
        let mut arrivals: Vec<Vec<Packet>> = (0..n).map(|_| Vec::new()).collect();
        for v in 0..n {
            for (packet, &target) in std::mem::take(&mut self.queues[v]).into_iter().zip(&decisions[v]) {
                let mut packet = packet;
                if target == v {
                    retained[v].push(packet);
                    continue;
                }
                packet.hops += 1;
                packet.ttl -= 1;
                packet.visit(target, self.config.n_history);
                if target == packet.destination {
                    // The move lands at t + 1; delay is measured to there.
                    let delay = t + 1 - packet.created_at;
                    self.sum_delay += F::from_n(delay);
                    self.sum_hops += F::from_n(packet.hops);
                    self.delivered.push(DeliveredPacket { id: packet.id, delay, hops: packet.hops });
                    strategy.on_delivered(&packet, t + 1);
                } else if packet.ttl == 0 {
                    self.dropped += 1;
                    strategy.on_dropped(&packet, t + 1);
                } else {
                    arrivals[target].push(packet);
                }
            }
        }
        for u in 0..n {
            arrivals[u].sort_by_key(|p| p.id);
            for packet in arrivals[u].drain(..) {
                if retained[u].len() < self.config.queue_capacity {
                    retained[u].push(packet);
                } else {
                    self.dropped += 1;
                    strategy.on_dropped(&packet, t + 1);
                }
            }
        }
        self.queues = retained;

        debug_assert_eq!(
            self.created,
            self.delivered.len() + self.dropped + self.in_flight(),
            "packet conservation violated at step {t}"
        );

        // Metrics sampling on the end-of-step state.
        let total_queued = self.in_flight();
        self.queue_len_sum += F::from_n(total_queued) / F::from_n(n);
        self.max_queue = self.max_queue.max(self.queues.iter().map(Vec::len).max().unwrap_or(0));
        self.time = t + 1;
        if self.time % self.config.round_steps == 0 || self.time == self.config.total_steps {
            let delivered = self.delivered.len();
            self.rounds.push(RoundRow {
                step: self.time,
                mean_delay: (delivered > 0).then(|| self.sum_delay / F::from_n(delivered)),
                mean_forwards: (delivered > 0).then(|| self.sum_hops / F::from_n(delivered)),
                avg_queue: self.queue_len_sum / F::from_n(self.time),
                max_queue: self.max_queue,
                delivered,
                dropped: self.dropped,
            });
        }
        Ok(())
    }

    /// Runs the remaining steps to the configured end.
    pub fn run_to_end(&mut self, strategy: &mut dyn Strategy<F>) -> Result<()> {
        while self.time < self.config.total_steps {
            self.step(strategy)?;
        }
        Ok(())
    }

    pub fn into_metrics(self) -> Metrics<F> {
        let steps = self.time.max(1);
        Metrics {
            created: self.created,
            in_flight_at_end: self.in_flight(),
            dropped: self.dropped,
            avg_queue: self.queue_len_sum / F::from_n(steps),
            max_queue: self.max_queue,
            rounds: self.rounds,
            delivered: self.delivered,
        }
    }
}

/// Generates traffic from the config and runs a full simulation.
pub fn run<F: Scalar>(
    trace: &MobilityTrace<F>,
    config: SimConfig<F>,
    strategy: &mut dyn Strategy<F>,
) -> Result<Metrics<F>> {
    let schedule = generate_traffic(&config)?;
    let mut world = World::new(trace, config, schedule)?;
    world.run_to_end(strategy)?;
    Ok(world.into_metrics())
}
