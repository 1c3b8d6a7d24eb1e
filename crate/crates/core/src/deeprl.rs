//! Offline reinforcement learning for the routing agent: a small Q-network
//! trained by fitted Q-iteration on experiences collected from the simulator.
//!
//! Staying put for several steps under an unchanged neighborhood is a single
//! temporally-extended decision, so consecutive stay steps collapse into one
//! experience carrying the discounted reward sum and its span; targets then
//! bootstrap with the matching discount power.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features;
use crate::mobility::DeviceId;
use crate::scalar::Scalar;
use crate::mobility::MobilityTrace;
use crate::sim::{
    generate_traffic, Metrics, Packet, PacketId, SimConfig, Strategy, World, WorldView,
};

/// Learning hyperparameters. The optimizer block (hidden sizes, learning
/// rate, batch shape, clip norm) is implementation-defined; everything else
/// mirrors the published training setup.
#[derive(Debug, Clone, PartialEq)]
pub struct RLConfig<F> {
    /// Discount factor.
    pub gamma: F,
    /// Exploration rate while collecting training experience.
    pub epsilon_train: F,
    /// Exploration rate during evaluation (0 = greedy).
    pub epsilon_test: F,
    /// Per-step reward for keeping a packet.
    pub r_stay: F,
    /// Reward for forwarding a packet to a neighbor.
    pub r_transmit: F,
    /// Reward for the forward that reaches the destination.
    pub r_delivery: F,
    /// Fitted-Q iterations per training call (one frozen-target refresh each).
    pub iterations: usize,
    /// Retraining cadence in simulation steps.
    pub t_round: usize,
    /// Hidden-unit dropout rate during training.
    pub dropout: F,
    /// Number of recently visited devices remembered per packet.
    pub n_history: usize,
    /// Hidden layer widths.
    pub hidden: Vec<usize>,
    /// SGD step size.
    pub learning_rate: F,
    pub batch_size: usize,
    /// Mini-batches per fitted-Q iteration.
    pub batches_per_iteration: usize,
    /// Global L2 gradient clip applied per mini-batch.
    pub max_grad_norm: F,
}

impl<F: Scalar> Default for RLConfig<F> {
    fn default() -> Self {
        RLConfig {
            gamma: F::from_f(0.99),
            epsilon_train: F::from_f(0.1),
            epsilon_test: F::zero(),
            r_stay: F::from_f(-1.0),
            r_transmit: F::from_f(-2.0),
            r_delivery: F::zero(),
            iterations: 100,
            t_round: 1000,
            dropout: F::from_f(0.2),
            n_history: 5,
            hidden: vec![64, 64],
            learning_rate: F::from_f(0.03),
            batch_size: 32,
            batches_per_iteration: 32,
            max_grad_norm: F::from_f(20.0),
        }
    }
}

impl<F: Scalar> RLConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > F::zero() && self.gamma < F::one()) {
            return Err(Error::config("gamma must lie strictly inside (0, 1)"));
        }
        for (name, eps) in [("epsilon_train", self.epsilon_train), ("epsilon_test", self.epsilon_test)] {
            if !(eps >= F::zero() && eps <= F::one()) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.dropout >= F::zero() && self.dropout < F::one()) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        for (name, r) in [
            ("r_stay", self.r_stay),
            ("r_transmit", self.r_transmit),
            ("r_delivery", self.r_delivery),
        ] {
            if !r.is_finite() {
                return Err(Error::config(format!("{name} must be finite")));
            }
        }
        if self.iterations == 0 || self.t_round == 0 {
            return Err(Error::config("iterations and t_round must be at least 1"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden layer widths must be at least 1"));
        }
        if !(self.learning_rate > F::zero() && self.max_grad_norm > F::zero()) {
            return Err(Error::config("learning rate and clip norm must be positive"));
        }
        if self.batch_size == 0 || self.batches_per_iteration == 0 {
            return Err(Error::config("batch shape must be at least 1x1"));
        }
        Ok(())
    }

    /// Reward booked when a packet is dropped: the transmit penalty repeated
    /// forever, `r_transmit / (1 - gamma)`.
    pub fn r_drop(&self) -> F {
        self.r_transmit / (F::one() - self.gamma)
    }
}

/// What happened to a packet in one decision step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransitionKind {
    Stay,
    Transmit,
    Delivery,
    Drop,
}

pub fn reward_for<F: Scalar>(kind: TransitionKind, config: &RLConfig<F>) -> F {
    match kind {
        TransitionKind::Stay => config.r_stay,
        TransitionKind::Transmit => config.r_transmit,
        TransitionKind::Delivery => config.r_delivery,
        TransitionKind::Drop => config.r_drop(),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DenseLayer<F> {
    /// Row-major `fan_out x fan_in`.
    w: Vec<F>,
    b: Vec<F>,
    fan_in: usize,
    fan_out: usize,
}

/// Reusable forward/backward buffers; create with [`QNetwork::scratch`].
#[derive(Debug, Clone, Default)]
pub struct Scratch<F> {
    /// Per hidden layer: activations after rectifier and dropout.
    act: Vec<Vec<F>>,
    /// Per hidden layer: dropout scale per unit (only while training).
    scale: Vec<Vec<F>>,
    dropout_active: bool,
    g: Vec<F>,
    g_prev: Vec<F>,
    input: Vec<F>,
}

/// A fully-connected rectifier network mapping a (state, action) feature
/// pair to one Q-value. Evaluation is deterministic; dropout applies only
/// inside training updates.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork<F> {
    layers: Vec<DenseLayer<F>>,
    input_dim: usize,
}

impl<F: Scalar> QNetwork<F> {
    /// Fresh network with weights uniform in ±1/√fan_in and zero biases.
    pub fn new(input_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::config("network input dimension must be at least 1"));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden layer widths must be at least 1"));
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &fan_out in hidden.iter().chain(std::iter::once(&1)) {
            let s = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| F::from_f(rng.gen_range(-s..s)))
                .collect();
            layers.push(DenseLayer { w, b: vec![F::zero(); fan_out], fan_in, fan_out });
            fan_in = fan_out;
        }
        Ok(QNetwork { layers, input_dim })
    }

    pub fn seeded(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        Self::new(input_dim, hidden, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.fan_out).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Start of layer `l`'s weight and bias blocks in the flat parameter
    /// order (per layer: weights row-major, then biases).
    fn offset_of(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for layer in &self.layers[..l] {
            off += layer.w.len() + layer.b.len();
        }
        (off, off + self.layers[l].w.len())
    }

    /// All parameters in a flat, stable order.
    pub fn parameters(&self) -> Vec<F> {
        let mut p = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            p.extend_from_slice(&layer.w);
            p.extend_from_slice(&layer.b);
        }
        p
    }

    pub fn set_parameters(&mut self, params: &[F]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            layer.w.iter_mut().for_each(|w| *w = it.next().expect("length checked"));
            layer.b.iter_mut().for_each(|b| *b = it.next().expect("length checked"));
        }
        Ok(())
    }

    pub fn scratch(&self) -> Scratch<F> {
        Scratch {
            act: self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| vec![F::zero(); l.fan_out])
                .collect(),
            scale: self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| vec![F::zero(); l.fan_out])
                .collect(),
            dropout_active: false,
            g: Vec::new(),
            g_prev: Vec::new(),
            input: Vec::new(),
        }
    }

    /// Forward pass. `dropout` carries the rate and the mask source while
    /// training; pass `None` for evaluation. Dropped units are zeroed and
    /// survivors rescaled by 1/(1-p), so evaluation needs no correction.
    fn forward(&self, x: &[F], dropout: Option<(F, &mut ChaCha8Rng)>, s: &mut Scratch<F>) -> F {
        debug_assert_eq!(x.len(), self.input_dim);
        let hidden_count = self.layers.len() - 1;
        s.dropout_active = false;
        let (p, keep_scale, mut mask_rng) = match dropout {
            Some((p, rng)) if p > F::zero() => {
                s.dropout_active = true;
                (p.as_f64(), F::one() / (F::one() - p), Some(rng))
            }
            _ => (0.0, F::one(), None),
        };

        for l in 0..hidden_count {
            let layer = &self.layers[l];
            // Split so the input of layer l (previous activation) and its
            // output buffer can be borrowed together.
            let (done, rest) = s.act.split_at_mut(l);
            let inp: &[F] = if l == 0 { x } else { &done[l - 1] };
            let out = &mut rest[0];
            for o in 0..layer.fan_out {
                let row = &layer.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                let mut z = layer.b[o];
                for (wi, xi) in row.iter().zip(inp) {
                    z += *wi * *xi;
                }
                let mut a = if z > F::zero() { z } else { F::zero() };
                if let Some(rng) = mask_rng.as_deref_mut() {
                    let sc = if rng.gen::<f64>() < p { F::zero() } else { keep_scale };
                    s.scale[l][o] = sc;
                    a *= sc;
                }
                out[o] = a;
            }
        }

        let outl = &self.layers[hidden_count];
        let inp: &[F] = if hidden_count == 0 { x } else { &s.act[hidden_count - 1] };
        let mut y = outl.b[0];
        for (wi, xi) in outl.w.iter().zip(inp) {
            y += *wi * *xi;
        }
        y
    }

    /// Accumulates d(loss)/d(params) into `grads` (flat parameter order) for
    /// one sample whose forward pass filled `s`, given dy = d(loss)/d(output).
    fn backward(&self, x: &[F], s: &mut Scratch<F>, dy: F, grads: &mut [F]) {
        let nl = self.layers.len();
        let last_in: &[F] = if nl == 1 { x } else { &s.act[nl - 2] };
        let (woff, boff) = self.offset_of(nl - 1);
        for (i, xi) in last_in.iter().enumerate() {
            grads[woff + i] += dy * *xi;
        }
        grads[boff] += dy;
        if nl == 1 {
            return;
        }

        s.g.clear();
        s.g.extend(self.layers[nl - 1].w.iter().map(|&w| w * dy));
        for l in (0..nl - 1).rev() {
            let layer = &self.layers[l];
            let inp: &[F] = if l == 0 { x } else { &s.act[l - 1] };
            let (woff, boff) = self.offset_of(l);
            for o in 0..layer.fan_out {
                // Through dropout and rectifier: a zeroed activation means a
                // dead unit either way, and survivors carry the kept scale.
                let d = if s.act[l][o] > F::zero() {
                    let sc = if s.dropout_active { s.scale[l][o] } else { F::one() };
                    s.g[o] * sc
                } else {
                    F::zero()
                };
                s.g[o] = d;
                if d != F::zero() {
                    for (i, xi) in inp.iter().enumerate() {
                        grads[woff + o * layer.fan_in + i] += d * *xi;
                    }
                    grads[boff + o] += d;
                }
            }
            if l > 0 {
                s.g_prev.clear();
                s.g_prev.resize(layer.fan_in, F::zero());
                for o in 0..layer.fan_out {
                    let d = s.g[o];
                    if d != F::zero() {
                        let row = &layer.w[o * layer.fan_in..(o + 1) * layer.fan_in];
                        for (gp, wi) in s.g_prev.iter_mut().zip(row) {
                            *gp += *wi * d;
                        }
                    }
                }
                std::mem::swap(&mut s.g, &mut s.g_prev);
            }
        }
    }

    fn apply_gradient(&mut self, grads: &[F], lr: F) {
        let mut it = grads.iter().copied();
        for layer in &mut self.layers {
            layer.w.iter_mut().for_each(|w| *w -= lr * it.next().expect("grad length matches"));
            layer.b.iter_mut().for_each(|b| *b -= lr * it.next().expect("grad length matches"));
        }
    }

    /// Q-value of one (state, action) feature pair, evaluation mode.
    pub fn q_value(&self, state: &[F], action: &[F]) -> Result<F> {
        if state.len() + action.len() != self.input_dim {
            return Err(Error::config(format!(
                "state {} + action {} features do not match network input {}",
                state.len(),
                action.len(),
                self.input_dim
            )));
        }
        let mut s = self.scratch();
        s.input.extend_from_slice(state);
        s.input.extend_from_slice(action);
        let x = std::mem::take(&mut s.input);
        Ok(self.forward(&x, None, &mut s))
    }

    /// Q-value of a pre-concatenated input vector, evaluation mode.
    pub fn value(&self, input: &[F]) -> Result<F> {
        if input.len() != self.input_dim {
            return Err(Error::config(format!(
                "input has {} features, network expects {}",
                input.len(),
                self.input_dim
            )));
        }
        Ok(self.forward(input, None, &mut self.scratch()))
    }

    /// Mean squared error over a batch and its analytic gradient in flat
    /// parameter order, evaluation mode (no dropout). The reference point
    /// for finite-difference verification.
    pub fn loss_and_gradient(&self, inputs: &[Vec<F>], targets: &[F]) -> Result<(F, Vec<F>)> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return Err(Error::config("need equally many inputs and targets, at least one"));
        }
        let mut s = self.scratch();
        let mut grads = vec![F::zero(); self.parameter_count()];
        let n = F::from_n(inputs.len());
        let mut loss = F::zero();
        for (x, &t) in inputs.iter().zip(targets) {
            if x.len() != self.input_dim {
                return Err(Error::config("input dimension mismatch in batch"));
            }
            let y = self.forward(x, None, &mut s);
            let e = y - t;
            loss += e * e / n;
            self.backward(x, &mut s, F::from_f(2.0) * e / n, &mut grads);
        }
        Ok((loss, grads))
    }
}

/// Picks a candidate index: with probability `epsilon` uniformly at random,
/// otherwise the highest Q-value (ties to the lowest index).
pub fn select_action<F: Scalar>(
    net: &QNetwork<F>,
    state: &[F],
    actions: &[Vec<F>],
    epsilon: F,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if actions.is_empty() {
        return Err(Error::Inconsistent("action selection over an empty candidate set".into()));
    }
    if epsilon > F::zero() && rng.gen::<f64>() < epsilon.as_f64() {
        return Ok(rng.gen_range(0..actions.len()));
    }
    let mut scratch = net.scratch();
    let mut input = Vec::with_capacity(net.input_dim());
    let mut best = 0;
    let mut best_q = F::neg_infinity();
    for (i, action) in actions.iter().enumerate() {
        if state.len() + action.len() != net.input_dim() {
            return Err(Error::config("candidate action dimension does not match the network"));
        }
        input.clear();
        input.extend_from_slice(state);
        input.extend_from_slice(action);
        let q = net.forward(&input, None, &mut scratch);
        if q > best_q {
            best = i;
            best_q = q;
        }
    }
    Ok(best)
}

/// One training sample: a (possibly multi-step) decision, its discounted
/// reward, and the successor decision point's state and action set (empty
/// when terminal).
#[derive(Debug, Clone, PartialEq)]
pub struct Experience<F> {
    pub state: Vec<F>,
    pub action: Vec<F>,
    pub cumulative_reward: F,
    /// Timesteps spanned; the bootstrap discounts by gamma^k.
    pub k: usize,
    pub next_state: Vec<F>,
    pub next_actions: Vec<Vec<F>>,
    pub terminal: bool,
}

impl<F: Scalar> Experience<F> {
    fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        let ok = self.state.len() == state_dim
            && self.action.len() == action_dim
            && self.k >= 1
            && if self.terminal {
                self.next_state.is_empty() && self.next_actions.is_empty()
            } else {
                self.next_state.len() == state_dim
                    && !self.next_actions.is_empty()
                    && self.next_actions.iter().all(|a| a.len() == action_dim)
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Inconsistent("experience shape does not match the dataset".into()))
        }
    }
}

/// One packet-level event for experience collection.
#[derive(Debug, Clone, PartialEq)]
pub enum PacketEvent<F> {
    /// A decision: the packet at some device saw `state`, the candidate
    /// `actions` (index 0 = stay), and took `chosen`.
    Decision {
        packet: PacketId,
        state: Vec<F>,
        actions: Vec<Vec<F>>,
        chosen: usize,
        neighbors: Vec<DeviceId>,
    },
    Delivered { packet: PacketId },
    Dropped { packet: PacketId },
}

#[derive(Debug, Clone)]
struct PendingSegment<F> {
    state: Vec<F>,
    action: Vec<F>,
    cumulative: F,
    /// Discount to apply to the next accumulated stay reward.
    disc: F,
    k: usize,
    is_stay: bool,
    neighbors: Vec<DeviceId>,
}

/// Streams per-packet decisions into training experiences. Consecutive stays
/// under an unchanged neighbor set extend one open segment; a transmit, a
/// neighbor change, delivery, or a drop closes it. Segments still open when
/// collection stops never become experiences (their successor is unknown).
#[derive(Debug, Clone)]
pub struct ExperienceCollector<F> {
    gamma: F,
    r_stay: F,
    r_transmit: F,
    r_delivery: F,
    r_drop: F,
    pending: BTreeMap<PacketId, PendingSegment<F>>,
    experiences: Vec<Experience<F>>,
}

impl<F: Scalar> ExperienceCollector<F> {
    pub fn new(config: &RLConfig<F>) -> Self {
        ExperienceCollector {
            gamma: config.gamma,
            r_stay: config.r_stay,
            r_transmit: config.r_transmit,
            r_delivery: config.r_delivery,
            r_drop: config.r_drop(),
            pending: BTreeMap::new(),
            experiences: Vec::new(),
        }
    }

    pub fn experiences(&self) -> &[Experience<F>] {
        &self.experiences
    }

    pub fn len(&self) -> usize {
        self.experiences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }

    /// Open segments awaiting their successor decision.
    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn on_decision(
        &mut self,
        packet: PacketId,
        state: &[F],
        actions: &[Vec<F>],
        chosen: usize,
        neighbors: &[DeviceId],
    ) -> Result<()> {
        if chosen >= actions.len() {
            return Err(Error::Inconsistent(format!(
                "chosen action {chosen} outside the {}-candidate set",
                actions.len()
            )));
        }
        let is_stay = chosen == 0;
        if let Some(open) = self.pending.get_mut(&packet) {
            if open.is_stay && is_stay && open.neighbors == neighbors {
                open.cumulative += open.disc * self.r_stay;
                open.disc *= self.gamma;
                open.k += 1;
                return Ok(());
            }
            let open = self.pending.remove(&packet).expect("entry just seen");
            self.experiences.push(Experience {
                state: open.state,
                action: open.action,
                cumulative_reward: open.cumulative,
                k: open.k,
                next_state: state.to_vec(),
                next_actions: actions.to_vec(),
                terminal: false,
            });
        }
        self.pending.insert(
            packet,
            PendingSegment {
                state: state.to_vec(),
                action: actions[chosen].clone(),
                cumulative: if is_stay { self.r_stay } else { self.r_transmit },
                disc: self.gamma,
                k: 1,
                is_stay,
                neighbors: neighbors.to_vec(),
            },
        );
        Ok(())
    }

    fn close_terminal(&mut self, packet: PacketId, reward: F, kind: &str) -> Result<()> {
        match self.pending.remove(&packet) {
            Some(open) if !open.is_stay => {
                self.experiences.push(Experience {
                    state: open.state,
                    action: open.action,
                    cumulative_reward: reward,
                    k: 1,
                    next_state: Vec::new(),
                    next_actions: Vec::new(),
                    terminal: true,
                });
                Ok(())
            }
            Some(_) => Err(Error::Inconsistent(format!(
                "packet {packet} {kind} while its last decision was a stay"
            ))),
            None => Err(Error::Inconsistent(format!("packet {packet} {kind} without a decision"))),
        }
    }

    /// The transmit that reached the destination: terminal delivery reward.
    pub fn on_delivered(&mut self, packet: PacketId) -> Result<()> {
        let r = self.r_delivery;
        self.close_terminal(packet, r, "delivered")
    }

    /// The transmit after which the packet was lost (budget expiry or queue
    /// overflow): terminal drop penalty. Packets dropped at creation never
    /// made a decision and produce nothing.
    pub fn on_dropped(&mut self, packet: PacketId) -> Result<()> {
        if !self.pending.contains_key(&packet) {
            return Ok(());
        }
        let r = self.r_drop;
        self.close_terminal(packet, r, "dropped")
    }
}

/// Batch form of experience collection over a recorded event log.
pub fn collect<F: Scalar>(
    events: &[PacketEvent<F>],
    config: &RLConfig<F>,
) -> Result<Vec<Experience<F>>> {
    config.validate()?;
    let mut collector = ExperienceCollector::new(config);
    for event in events {
        match event {
            PacketEvent::Decision { packet, state, actions, chosen, neighbors } => {
                collector.on_decision(*packet, state, actions, *chosen, neighbors)?;
            }
            PacketEvent::Delivered { packet } => collector.on_delivered(*packet)?,
            PacketEvent::Dropped { packet } => collector.on_dropped(*packet)?,
        }
    }
    Ok(collector.experiences)
}

/// Trains a fresh network by fitted Q-iteration: each iteration freezes the
/// previous iterate, regresses mini-batches onto targets
/// `y = cumulative_reward + gamma^k * max_a' Q_frozen(s', a')` (terminal:
/// `y = cumulative_reward`), and keeps improving the same network.
/// Deterministic for a fixed seed and dataset.
///
/// All rewards here are non-positive, so the true value function is too; the
/// bootstrap term is clamped to ≤ 0, which keeps the fixed point unchanged
/// and prevents positive-feedback drift through approximation error.
pub fn fitted_q_train<F: Scalar>(
    dataset: &[Experience<F>],
    config: &RLConfig<F>,
    seed: u64,
) -> Result<QNetwork<F>> {
    config.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::config("cannot train on an empty experience set"))?;
    let state_dim = first.state.len();
    let action_dim = first.action.len();
    for e in dataset {
        e.validate(state_dim, action_dim)?;
    }
    let input_dim = state_dim + action_dim;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = QNetwork::new(input_dim, &config.hidden, &mut rng)?;
    let mut frozen = net.clone();
    let mut fwd = net.scratch();
    let mut frozen_scratch = net.scratch();
    let mut grads = vec![F::zero(); net.parameter_count()];
    let mut input = Vec::with_capacity(input_dim);
    let batch_len = F::from_n(config.batch_size);

    for _ in 0..config.iterations {
        frozen.clone_from(&net);
        for _ in 0..config.batches_per_iteration {
            grads.iter_mut().for_each(|g| *g = F::zero());
            for _ in 0..config.batch_size {
                let e = &dataset[rng.gen_range(0..dataset.len())];
                let target = if e.terminal {
                    e.cumulative_reward
                } else {
                    let mut best = F::neg_infinity();
                    for a in &e.next_actions {
                        input.clear();
                        input.extend_from_slice(&e.next_state);
                        input.extend_from_slice(a);
                        let q = frozen.forward(&input, None, &mut frozen_scratch);
                        if q > best {
                            best = q;
                        }
                    }
                    e.cumulative_reward
                        + config.gamma.powi(e.k as i32) * best.min(F::zero())
                };
                input.clear();
                input.extend_from_slice(&e.state);
                input.extend_from_slice(&e.action);
                let y = net.forward(&input, Some((config.dropout, &mut rng)), &mut fwd);
                net.backward(&input, &mut fwd, F::from_f(2.0) * (y - target) / batch_len, &mut grads);
            }
            let norm = grads.iter().map(|&g| g * g).sum::<F>().sqrt();
            if norm > config.max_grad_norm {
                let s = config.max_grad_norm / norm;
                grads.iter_mut().for_each(|g| *g *= s);
            }
            net.apply_gradient(&grads, config.learning_rate);
        }
    }
    Ok(net)
}

/// The learned strategy: assembles features, queries the Q-network with
/// epsilon-greedy selection, and (while training) records experiences.
/// Unlike the classical strategies, delivery is not special-cased — reaching
/// for an adjacent destination must come out of the Q-values.
#[derive(Debug, Clone)]
pub struct DeepRlStrategy<F> {
    net: QNetwork<F>,
    pub epsilon: F,
    collector: Option<ExperienceCollector<F>>,
}

impl<F: Scalar> DeepRlStrategy<F> {
    pub fn new(net: QNetwork<F>, epsilon: F) -> Self {
        DeepRlStrategy { net, epsilon, collector: None }
    }

    pub fn with_collector(net: QNetwork<F>, epsilon: F, config: &RLConfig<F>) -> Self {
        DeepRlStrategy { net, epsilon, collector: Some(ExperienceCollector::new(config)) }
    }

    pub fn net(&self) -> &QNetwork<F> {
        &self.net
    }

    pub fn set_net(&mut self, net: QNetwork<F>) {
        self.net = net;
    }

    pub fn collector(&self) -> Option<&ExperienceCollector<F>> {
        self.collector.as_ref()
    }
}

impl<F: Scalar> Strategy<F> for DeepRlStrategy<F> {
    fn name(&self) -> &str {
        "deeprl"
    }

    fn needs_features(&self) -> bool {
        true
    }

    fn decide(
        &mut self,
        packet: &Packet,
        holder: DeviceId,
        view: &WorldView<'_, F>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DeviceId> {
        let decision = view.assemble(packet, holder)?;
        let idx = select_action(&self.net, &decision.state, &decision.actions, self.epsilon, rng)?;
        if let Some(collector) = &mut self.collector {
            collector.on_decision(
                packet.id,
                &decision.state,
                &decision.actions,
                idx,
                view.neighbors(holder),
            )?;
        }
        Ok(decision.candidates[idx])
    }

    fn on_delivered(&mut self, packet: &Packet, _time: usize) {
        if let Some(collector) = &mut self.collector {
            let r = collector.on_delivered(packet.id);
            debug_assert!(r.is_ok(), "delivery bookkeeping: {r:?}");
        }
    }

    fn on_dropped(&mut self, packet: &Packet, _time: usize) {
        if let Some(collector) = &mut self.collector {
            let r = collector.on_dropped(packet.id);
            debug_assert!(r.is_ok(), "drop bookkeeping: {r:?}");
        }
    }
}

/// One row of the training curve, sampled every `t_round` steps. Delay and
/// forwards are cumulative means over everything delivered so far.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRound<F> {
    pub round: usize,
    pub step: usize,
    pub mean_delay: Option<F>,
    pub mean_forwards: Option<F>,
    pub delivered: usize,
    pub dropped: usize,
    /// Experiences accumulated by the end of the round.
    pub experiences: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingOutput<F> {
    pub net: QNetwork<F>,
    pub curves: Vec<TrainingRound<F>>,
    pub metrics: Metrics<F>,
}

/// Runs the training scenario: epsilon-greedy behavior from a fresh network,
/// retrained from scratch every `t_round` steps on all experiences collected
/// so far. Returns the final network and the learning curves.
pub fn training_driver<F: Scalar>(
    trace: &MobilityTrace<F>,
    sim_config: &SimConfig<F>,
    rl: &RLConfig<F>,
    train_seed: u64,
) -> Result<TrainingOutput<F>> {
    rl.validate()?;
    let mut sim_config = sim_config.clone();
    sim_config.n_history = rl.n_history;
    sim_config.round_steps = rl.t_round;
    let schedule = generate_traffic(&sim_config)?;

    let input_dim = features::STATE_DIM + features::action_dim(rl.n_history);
    let net = QNetwork::seeded(input_dim, &rl.hidden, train_seed)?;
    let mut strategy = DeepRlStrategy::with_collector(net, rl.epsilon_train, rl);
    let mut world = World::new(trace, sim_config, schedule)?;
    let total = world.config().total_steps;

    let mut experience_marks: BTreeMap<usize, usize> = BTreeMap::new();
    let mut round = 0;
    for t in 0..total {
        if t > 0 && t % rl.t_round == 0 {
            round += 1;
            let collector = strategy.collector().expect("training strategy collects");
            experience_marks.insert(t, collector.len());
            if !collector.is_empty() {
                let retrained =
                    fitted_q_train(collector.experiences(), rl, train_seed.wrapping_add(round))?;
                strategy.set_net(retrained);
            }
        }
        world.step(&mut strategy)?;
    }

    let total_experiences = strategy.collector().expect("training strategy collects").len();
    let net = strategy.net().clone();
    let metrics = world.into_metrics();
    let curves = metrics
        .rounds
        .iter()
        .enumerate()
        .map(|(i, row)| TrainingRound {
            round: i + 1,
            step: row.step,
            mean_delay: row.mean_delay,
            mean_forwards: row.mean_forwards,
            delivered: row.delivered,
            dropped: row.dropped,
            experiences: experience_marks.get(&row.step).copied().unwrap_or(total_experiences),
        })
        .collect();
    Ok(TrainingOutput { net, curves, metrics })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QGridCell<F> {
    pub x: F,
    pub y: F,
    pub q: F,
}

/// Sweeps two input coordinates over [0, 1] at the given resolution, holding
/// every other coordinate at `fixed`, and evaluates the network at each grid
/// point (x outer, y inner).
pub fn qvalue_grid<F: Scalar>(
    net: &QNetwork<F>,
    axis_x: usize,
    axis_y: usize,
    fixed: &[F],
    resolution: usize,
) -> Result<Vec<QGridCell<F>>> {
    if fixed.len() != net.input_dim() {
        return Err(Error::config(format!(
            "fixed vector has {} entries, network expects {}",
            fixed.len(),
            net.input_dim()
        )));
    }
    if axis_x >= fixed.len() || axis_y >= fixed.len() {
        return Err(Error::OutOfRange("grid axis outside the network input".into()));
    }
    if axis_x == axis_y {
        return Err(Error::config("grid axes must differ"));
    }
    if resolution < 2 {
        return Err(Error::config("grid resolution must be at least 2"));
    }
    let mut input = fixed.to_vec();
    let mut scratch = net.scratch();
    let step = F::one() / F::from_n(resolution - 1);
    let mut cells = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        let x = step * F::from_n(i);
        for j in 0..resolution {
            let y = step * F::from_n(j);
            input[axis_x] = x;
            input[axis_y] = y;
            cells.push(QGridCell { x, y, q: net.forward(&input, None, &mut scratch) });
        }
    }
    Ok(cells)
}

/// Feature-pipeline settings a checkpoint must carry so evaluation matches
/// training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta<F> {
    pub n_history: usize,
    /// TTL normalization reference the network was trained with.
    pub ttl_reference: F,
}

/// Serializes a network and its feature settings as a line-oriented text
/// checkpoint. Floats use the shortest round-tripping form, so save → load →
/// save is byte-stable.
pub fn checkpoint_to_string<F: Scalar>(net: &QNetwork<F>, meta: &CheckpointMeta<F>) -> String {
    let mut out = String::new();
    out.push_str("hopsim-qnet 1\n");
    let _ = writeln!(out, "n_history {}", meta.n_history);
    let _ = writeln!(out, "ttl_reference {}", meta.ttl_reference);
    let mut dims = format!("dims {}", net.input_dim);
    for layer in &net.layers {
        let _ = write!(dims, " {}", layer.fan_out);
    }
    out.push_str(&dims);
    out.push('\n');
    for (l, layer) in net.layers.iter().enumerate() {
        let _ = writeln!(out, "layer {l}");
        for o in 0..layer.fan_out {
            let row = &layer.w[o * layer.fan_in..(o + 1) * layer.fan_in];
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out.push_str("bias");
        for v in &layer.b {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn checkpoint_from_str<F: Scalar>(text: &str) -> Result<(QNetwork<F>, CheckpointMeta<F>)> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    let mut lines = text.lines();
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| Error::Checkpoint(format!("missing {what} line")))
    };

    if next("header")? != "hopsim-qnet 1" {
        return Err(bad("not a version-1 network checkpoint"));
    }
    let n_history = next("n_history")?
        .strip_prefix("n_history ")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| bad("malformed n_history line"))?;
    let ttl_reference = next("ttl_reference")?
        .strip_prefix("ttl_reference ")
        .and_then(|v| v.parse::<f64>().ok())
        .map(F::from_f)
        .ok_or_else(|| bad("malformed ttl_reference line"))?;
    let dims: Vec<usize> = next("dims")?
        .strip_prefix("dims ")
        .map(|v| v.split(' ').map(|d| d.parse::<usize>()).collect::<std::result::Result<_, _>>())
        .transpose()
        .ok()
        .flatten()
        .ok_or_else(|| bad("malformed dims line"))?;
    if dims.len() < 2 || dims.iter().any(|&d| d == 0) || *dims.last().unwrap() != 1 {
        return Err(bad("dims must list input, hidden sizes, and a final 1"));
    }

    let parse_floats = |line: &str, expect: usize, what: &str| -> Result<Vec<F>> {
        let vals: Vec<F> = line
            .split(' ')
            .map(|v| v.parse::<f64>().map(F::from_f))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint(format!("malformed float in {what}")))?;
        if vals.len() != expect {
            return Err(Error::Checkpoint(format!(
                "{what} has {} values, expected {expect}",
                vals.len()
            )));
        }
        Ok(vals)
    };

    let mut layers = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        if next("layer header")? != format!("layer {l}") {
            return Err(bad("layer header out of sequence"));
        }
        let mut w = Vec::with_capacity(fan_in * fan_out);
        for o in 0..fan_out {
            w.extend(parse_floats(next("weight row")?, fan_in, &format!("layer {l} row {o}"))?);
        }
        let bias_line = next("bias line")?;
        let b = parse_floats(
            bias_line.strip_prefix("bias ").ok_or_else(|| bad("missing bias prefix"))?,
            fan_out,
            &format!("layer {l} bias"),
        )?;
        layers.push(DenseLayer { w, b, fan_in, fan_out });
    }
    if lines.next().is_some() {
        return Err(bad("trailing content after the last layer"));
    }
    Ok((QNetwork { layers, input_dim: dims[0] }, CheckpointMeta { n_history, ttl_reference }))
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    net: &QNetwork<F>,
    meta: &CheckpointMeta<F>,
) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(net, meta))?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<(QNetwork<F>, CheckpointMeta<F>)> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> RLConfig<f64> {
        RLConfig { hidden: vec![16], dropout: 0.0, ..RLConfig::default() }
    }

    #[test]
    fn zero_weight_network_outputs_its_bias() {
        let mut net = QNetwork::<f64>::seeded(4, &[3], 7).unwrap();
        let mut params = vec![0.0; net.parameter_count()];
        *params.last_mut().unwrap() = 2.5;
        net.set_parameters(&params).unwrap();
        assert_eq!(net.q_value(&[0.3, 0.9], &[1.0, -2.0]).unwrap(), 2.5);
    }

    #[test]
    fn forward_pass_is_deterministic() {
        let net = QNetwork::<f64>::seeded(6, &[8, 8], 11).unwrap();
        let x = vec![0.1, 0.9, 0.4, 0.2, 0.7, 0.3];
        assert_eq!(net.value(&x).unwrap(), net.value(&x).unwrap());
    }

    #[test]
    fn single_linear_layer_computes_a_dot_product() {
        let mut net = QNetwork::<f64>::seeded(3, &[], 1).unwrap();
        net.set_parameters(&[1.5, -2.0, 0.5, 0.25]).unwrap();
        let q = net.value(&[2.0, 1.0, 4.0]).unwrap();
        assert!((q - (3.0 - 2.0 + 2.0 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = QNetwork::<f64>::seeded(5, &[4], 2).unwrap();
        assert!(net.value(&[0.0; 4]).is_err());
        assert!(net.q_value(&[0.0; 3], &[0.0; 3]).is_err());
        assert!(net.clone().set_parameters(&[0.0; 3]).is_err());
    }

    /// Identity-ish net for action scoring: input = one action feature,
    /// Q = that feature.
    fn scoring_net() -> QNetwork<f64> {
        let mut net = QNetwork::seeded(1, &[], 1).unwrap();
        net.set_parameters(&[1.0, 0.0]).unwrap();
        net
    }

    #[test]
    fn greedy_selection_takes_the_argmax() {
        let net = scoring_net();
        let actions = vec![vec![-3.0], vec![-1.0], vec![-2.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&net, &[], &actions, 0.0, &mut rng).unwrap(), 1);
    }

    #[test]
    fn exact_ties_go_to_the_lowest_index() {
        let net = scoring_net();
        let actions = vec![vec![-1.0], vec![-1.0], vec![-5.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&net, &[], &actions, 0.0, &mut rng).unwrap(), 0);
    }

    #[test]
    fn full_exploration_is_roughly_uniform() {
        let net = scoring_net();
        let actions = vec![vec![-3.0], vec![-1.0], vec![-2.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[select_action(&net, &[], &actions, 1.0, &mut rng).unwrap()] += 1;
        }
        assert!(counts.iter().all(|&c| (850..=1150).contains(&c)), "{counts:?}");
    }

    #[test]
    fn empty_candidate_set_is_an_error() {
        let net = scoring_net();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(select_action(&net, &[], &[], 0.0, &mut rng).is_err());
    }

    #[test]
    fn rewards_follow_the_table() {
        let config = RLConfig::<f64>::default();
        assert_eq!(reward_for(TransitionKind::Stay, &config), -1.0);
        assert_eq!(reward_for(TransitionKind::Transmit, &config), -2.0);
        assert_eq!(reward_for(TransitionKind::Delivery, &config), 0.0);
        let drop = reward_for(TransitionKind::Drop, &config);
        assert!((drop - -200.0).abs() < 1e-9, "{drop}");
    }

    fn decision(
        packet: PacketId,
        tag: f64,
        chosen: usize,
        neighbors: &[DeviceId],
    ) -> PacketEvent<f64> {
        PacketEvent::Decision {
            packet,
            state: vec![tag, 0.5],
            actions: vec![vec![tag, 1.0], vec![tag, 2.0]],
            chosen,
            neighbors: neighbors.to_vec(),
        }
    }

    #[test]
    fn consecutive_stays_collapse_into_one_experience() {
        let config = RLConfig::<f64>::default();
        let events = vec![
            decision(0, 1.0, 0, &[4]),
            decision(0, 2.0, 0, &[4]),
            decision(0, 3.0, 0, &[4]),
            decision(0, 4.0, 1, &[4]),
            PacketEvent::Delivered { packet: 0 },
        ];
        let exp = collect(&events, &config).unwrap();
        assert_eq!(exp.len(), 2);
        assert_eq!(exp[0].k, 3);
        assert!((exp[0].cumulative_reward - -2.9701).abs() < 1e-12);
        assert_eq!(exp[0].state, vec![1.0, 0.5]); // block keeps its first state
        assert_eq!(exp[0].next_state, vec![4.0, 0.5]);
        assert_eq!(exp[0].next_actions.len(), 2);
        assert!(!exp[0].terminal);
        assert!(exp[1].terminal);
        assert_eq!(exp[1].cumulative_reward, 0.0);
        assert_eq!(exp[1].k, 1);
        assert!(exp[1].next_actions.is_empty());
    }

    #[test]
    fn a_neighbor_change_splits_a_stay_block() {
        let config = RLConfig::<f64>::default();
        let events = vec![
            decision(0, 1.0, 0, &[4]),
            decision(0, 2.0, 0, &[4]),
            decision(0, 3.0, 0, &[4, 6]),
            decision(0, 4.0, 1, &[4, 6]),
            PacketEvent::Delivered { packet: 0 },
        ];
        let exp = collect(&events, &config).unwrap();
        assert_eq!(exp.len(), 3);
        assert_eq!(exp[0].k, 2);
        assert!((exp[0].cumulative_reward - -1.99).abs() < 1e-12);
        assert_eq!(exp[1].k, 1);
        assert_eq!(exp[1].cumulative_reward, -1.0);
        assert!(exp[2].terminal);
    }

    #[test]
    fn a_drop_books_the_infinite_transmit_penalty() {
        let config = RLConfig::<f64>::default();
        let events = vec![
            decision(0, 1.0, 1, &[4]),
            PacketEvent::Dropped { packet: 0 },
        ];
        let exp = collect(&events, &config).unwrap();
        assert_eq!(exp.len(), 1);
        assert!(exp[0].terminal);
        assert!((exp[0].cumulative_reward - -200.0).abs() < 1e-9);
    }

    #[test]
    fn a_transmit_gets_its_successor_decision_as_next_state() {
        let config = RLConfig::<f64>::default();
        let events = vec![
            decision(0, 1.0, 1, &[4]),
            decision(0, 2.0, 1, &[9]),
            PacketEvent::Delivered { packet: 0 },
        ];
        let exp = collect(&events, &config).unwrap();
        assert_eq!(exp.len(), 2);
        assert_eq!(exp[0].cumulative_reward, -2.0);
        assert_eq!(exp[0].k, 1);
        assert_eq!(exp[0].next_state, vec![2.0, 0.5]);
        assert_eq!(exp[0].action, vec![1.0, 2.0]); // the chosen candidate's features
    }

    #[test]
    fn open_segments_never_become_experiences() {
        let config = RLConfig::<f64>::default();
        let events =
            vec![decision(0, 1.0, 0, &[4]), decision(0, 2.0, 0, &[4]), decision(1, 5.0, 1, &[2])];
        let mut collector = ExperienceCollector::new(&config);
        for e in &events {
            if let PacketEvent::Decision { packet, state, actions, chosen, neighbors } = e {
                collector.on_decision(*packet, state, actions, *chosen, neighbors).unwrap();
            }
        }
        assert!(collector.is_empty());
        assert_eq!(collector.pending_count(), 2);
    }

    #[test]
    fn malformed_logs_are_rejected() {
        let config = RLConfig::<f64>::default();
        // Delivery without any decision.
        assert!(collect(&[PacketEvent::<f64>::Delivered { packet: 0 }], &config).is_err());
        // Delivery while the last decision was a stay.
        let events = vec![decision(0, 1.0, 0, &[4]), PacketEvent::Delivered { packet: 0 }];
        assert!(collect(&events, &config).is_err());
        // Chosen index outside the candidate set.
        let events = vec![decision(0, 1.0, 7, &[4])];
        assert!(collect(&events, &config).is_err());
        // A creation-time drop (no decision) is fine and yields nothing.
        let exp = collect(&[PacketEvent::<f64>::Dropped { packet: 3 }], &config).unwrap();
        assert!(exp.is_empty());
    }

    /// Replays experiences in order and sums their rewards at the right
    /// discount offsets.
    fn replay_return(experiences: &[Experience<f64>], gamma: f64) -> f64 {
        let mut ret = 0.0;
        let mut disc = 1.0;
        for e in experiences {
            ret += disc * e.cumulative_reward;
            disc *= gamma.powi(e.k as i32);
        }
        ret
    }

    #[test]
    fn collection_preserves_the_discounted_return() {
        let config = RLConfig::<f64>::default();
        // stay stay (nbr change) stay transmit stay stay transmit -> drop
        let events = vec![
            decision(0, 1.0, 0, &[4]),
            decision(0, 2.0, 0, &[4]),
            decision(0, 3.0, 0, &[4, 5]),
            decision(0, 4.0, 1, &[4, 5]),
            decision(0, 5.0, 0, &[9]),
            decision(0, 6.0, 0, &[9]),
            decision(0, 7.0, 1, &[9]),
            PacketEvent::Dropped { packet: 0 },
        ];
        let exp = collect(&events, &config).unwrap();
        let per_step = [-1.0, -1.0, -1.0, -2.0, -1.0, -1.0, -200.0];
        let direct: f64 =
            per_step.iter().enumerate().map(|(i, r)| 0.99f64.powi(i as i32) * r).sum();
        assert!((replay_return(&exp, 0.99) - direct).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = QNetwork::<f64>::seeded(5, &[6, 4], 37).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let inputs: Vec<Vec<f64>> =
            (0..8).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let targets: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..0.0)).collect();
        let (_, analytic) = net.loss_and_gradient(&inputs, &targets).unwrap();

        let params = net.parameters();
        let h = 1e-6;
        for i in 0..params.len() {
            let mut bumped = net.clone();
            let mut p = params.clone();
            p[i] += h;
            bumped.set_parameters(&p).unwrap();
            let (up, _) = bumped.loss_and_gradient(&inputs, &targets).unwrap();
            p[i] -= 2.0 * h;
            bumped.set_parameters(&p).unwrap();
            let (down, _) = bumped.loss_and_gradient(&inputs, &targets).unwrap();
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs());
            if denom > 1e-6 {
                let rel = (analytic[i] - numeric).abs() / denom;
                assert!(rel < 1e-4, "param {i}: analytic {} vs numeric {numeric}", analytic[i]);
            }
        }
    }

    #[test]
    fn dropout_training_pass_differs_but_evaluation_is_clean() {
        let net = QNetwork::<f64>::seeded(4, &[32], 3).unwrap();
        let x = vec![0.5, -0.3, 0.8, 0.1];
        let eval = net.value(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut s = net.scratch();
        let trained = net.forward(&x, Some((0.5, &mut rng)), &mut s);
        assert_ne!(eval, trained);
        // And evaluation right after is unaffected by the mask history.
        assert_eq!(net.value(&x).unwrap(), eval);
    }

    fn terminal_dataset(n: usize, reward: f64, seed: u64) -> Vec<Experience<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Experience {
                state: (0..3).map(|_| rng.gen_range(0.0..1.0)).collect(),
                action: (0..2).map(|_| rng.gen_range(0.0..1.0)).collect(),
                cumulative_reward: reward,
                k: 1,
                next_state: Vec::new(),
                next_actions: Vec::new(),
                terminal: true,
            })
            .collect()
    }

    #[test]
    fn terminal_regression_reaches_the_fixed_point() {
        let dataset = terminal_dataset(64, -200.0, 21);
        let config =
            RLConfig { learning_rate: 0.02, batches_per_iteration: 64, ..small_config() };
        let net = fitted_q_train(&dataset, &config, 5).unwrap();
        for e in &dataset {
            let q = net.q_value(&e.state, &e.action).unwrap();
            assert!((q - -200.0).abs() < 10.0, "q = {q}");
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let dataset = terminal_dataset(32, -5.0, 8);
        let config = small_config();
        let a = fitted_q_train(&dataset, &config, 42).unwrap();
        let b = fitted_q_train(&dataset, &config, 42).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        let c = fitted_q_train(&dataset, &config, 43).unwrap();
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn empty_or_inconsistent_datasets_are_rejected() {
        let config = small_config();
        assert!(fitted_q_train::<f64>(&[], &config, 1).is_err());
        let mut dataset = terminal_dataset(4, -1.0, 2);
        dataset[2].state.push(0.0);
        assert!(fitted_q_train(&dataset, &config, 1).is_err());
        // Terminal experiences must not carry successors.
        let mut dataset = terminal_dataset(4, -1.0, 3);
        dataset[1].next_state = dataset[1].state.clone();
        assert!(fitted_q_train(&dataset, &config, 1).is_err());
    }

    /// Two-state chain: state one-hot [A, B], action one-hot [stay, move].
    /// A: stay keeps A at -1, move reaches B at -2; B: stay keeps B at -1,
    /// move ends the episode at -4. With gamma = 0.9 the exact Q-values are
    /// A-stay -6.04, A-move -5.6, B-stay -4.6, B-move -4.
    fn chain_dataset(copies: usize) -> Vec<Experience<f64>> {
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        let stay = vec![1.0, 0.0];
        let mv = vec![0.0, 1.0];
        let all = vec![stay.clone(), mv.clone()];
        let mut exp = Vec::new();
        for _ in 0..copies {
            exp.push(Experience {
                state: a.clone(),
                action: stay.clone(),
                cumulative_reward: -1.0,
                k: 1,
                next_state: a.clone(),
                next_actions: all.clone(),
                terminal: false,
            });
            exp.push(Experience {
                state: a.clone(),
                action: mv.clone(),
                cumulative_reward: -2.0,
                k: 1,
                next_state: b.clone(),
                next_actions: all.clone(),
                terminal: false,
            });
            exp.push(Experience {
                state: b.clone(),
                action: stay.clone(),
                cumulative_reward: -1.0,
                k: 1,
                next_state: b.clone(),
                next_actions: all.clone(),
                terminal: false,
            });
            exp.push(Experience {
                state: b.clone(),
                action: mv.clone(),
                cumulative_reward: -4.0,
                k: 1,
                next_state: Vec::new(),
                next_actions: Vec::new(),
                terminal: true,
            });
        }
        exp
    }

    #[test]
    fn fitted_q_matches_tabular_value_iteration() {
        let dataset = chain_dataset(32);
        let config = RLConfig {
            gamma: 0.9,
            learning_rate: 0.02,
            batches_per_iteration: 64,
            ..small_config()
        };
        let net = fitted_q_train(&dataset, &config, 17).unwrap();
        let cases = [
            (vec![1.0, 0.0], vec![1.0, 0.0], -6.04),
            (vec![1.0, 0.0], vec![0.0, 1.0], -5.6),
            (vec![0.0, 1.0], vec![1.0, 0.0], -4.6),
            (vec![0.0, 1.0], vec![0.0, 1.0], -4.0),
        ];
        for (state, action, exact) in cases {
            let q = net.q_value(&state, &action).unwrap();
            assert!(
                (q - exact).abs() <= 0.05 * exact.abs(),
                "Q({state:?}, {action:?}) = {q}, want {exact} within 5%"
            );
        }
    }

    #[test]
    fn grid_of_a_constant_network_is_flat() {
        let mut net = QNetwork::<f64>::seeded(4, &[], 2).unwrap();
        net.set_parameters(&[0.0, 0.0, 0.0, 0.0, -1.5]).unwrap();
        let cells = qvalue_grid(&net, 0, 2, &[0.3; 4], 5).unwrap();
        assert_eq!(cells.len(), 25);
        assert!(cells.iter().all(|c| c.q == -1.5));
    }

    #[test]
    fn grid_of_a_linear_network_is_a_plane() {
        let mut net = QNetwork::<f64>::seeded(3, &[], 2).unwrap();
        net.set_parameters(&[2.0, -1.0, 3.0, 0.5]).unwrap();
        let fixed = vec![0.0, 0.25, 0.5];
        let cells = qvalue_grid(&net, 0, 1, &fixed, 3).unwrap();
        // q = 2x - y + 3*0.5 + 0.5 on the swept axes.
        for c in &cells {
            assert!((c.q - (2.0 * c.x - c.y + 2.0)).abs() < 1e-12);
        }
        // Axis order: x outer, y inner.
        assert_eq!((cells[1].x, cells[1].y), (0.0, 0.5));
        assert_eq!((cells[3].x, cells[3].y), (0.5, 0.0));
    }

    #[test]
    fn grid_cells_equal_pointwise_evaluations() {
        let net = QNetwork::<f64>::seeded(5, &[8], 9).unwrap();
        let fixed = vec![0.2, 0.4, 0.6, 0.8, 1.0];
        for cell in qvalue_grid(&net, 1, 3, &fixed, 4).unwrap() {
            let mut input = fixed.clone();
            input[1] = cell.x;
            input[3] = cell.y;
            assert_eq!(cell.q, net.value(&input).unwrap());
        }
    }

    #[test]
    fn grid_rejects_bad_axes() {
        let net = QNetwork::<f64>::seeded(4, &[], 2).unwrap();
        assert!(qvalue_grid(&net, 0, 9, &[0.0; 4], 3).is_err());
        assert!(qvalue_grid(&net, 2, 2, &[0.0; 4], 3).is_err());
        assert!(qvalue_grid(&net, 0, 1, &[0.0; 3], 3).is_err());
        assert!(qvalue_grid(&net, 0, 1, &[0.0; 4], 1).is_err());
    }

    #[test]
    fn checkpoints_round_trip_bytes_and_behavior() {
        let net = QNetwork::<f32>::seeded(7, &[5, 3], 123).unwrap();
        let meta = CheckpointMeta { n_history: 5, ttl_reference: 300.0f32 };
        let text = checkpoint_to_string(&net, &meta);
        let (loaded, got_meta) = checkpoint_from_str::<f32>(&text).unwrap();
        assert_eq!(got_meta, meta);
        assert_eq!(loaded, net);
        assert_eq!(checkpoint_to_string(&loaded, &got_meta), text);
    }

    #[test]
    fn malformed_checkpoints_are_rejected() {
        let net = QNetwork::<f64>::seeded(3, &[2], 4).unwrap();
        let meta = CheckpointMeta { n_history: 0, ttl_reference: 300.0 };
        let good = checkpoint_to_string(&net, &meta);
        assert!(checkpoint_from_str::<f64>("nonsense").is_err());
        assert!(checkpoint_from_str::<f64>(&good.replace("hopsim-qnet 1", "hopsim-qnet 2")).is_err());
        let line_count = good.lines().count();
        let truncated: String =
            good.lines().take(line_count - 1).map(|l| format!("{l}\n")).collect();
        assert!(checkpoint_from_str::<f64>(&truncated).is_err());
        let mut extra = good.clone();
        extra.push_str("junk\n");
        assert!(checkpoint_from_str::<f64>(&extra).is_err());
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut config = RLConfig::<f64>::default();
        config.gamma = 1.0;
        assert!(config.validate().is_err());
        let mut config = RLConfig::<f64>::default();
        config.dropout = 1.0;
        assert!(config.validate().is_err());
        let mut config = RLConfig::<f64>::default();
        config.epsilon_train = 1.5;
        assert!(config.validate().is_err());
        assert!(RLConfig::<f64>::default().validate().is_ok());
    }
}
