//! Random-waypoint mobility: trace generation, parsing and geometric queries.
//!
//! Traces are piecewise-linear waypoint paths, one per device. Generation
//! draws the *initial* leg from the stationary distribution of the
//! random-waypoint process with zero pause time (leg endpoints weighted by
//! their distance, start position uniform along the leg, first-leg speed from
//! the 1/v stationary law), so mobility statistics are unbiased from t = 0
//! instead of converging over a warm-up period. Subsequent legs follow the
//! ordinary dynamics: uniform waypoints, per-leg speed uniform in
//! [mean - delta, mean + delta].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Devices are dense indices `0..device_count`.
pub type DeviceId = usize;

/// Shortest leg the generator will emit, in seconds. Degenerate draws below
/// this are resampled (probability ~1e-6 per leg) so that waypoint timestamps
/// stay strictly increasing even after f32 rounding near t ~ 1e5.
const MIN_LEG_SECONDS: f64 = 0.1;

/// One timestamped stop on a device's path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint<F> {
    pub t: F,
    pub x: F,
    pub y: F,
}

/// Piecewise-linear mobility of a fleet of devices over a rectangular area.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityTrace<F> {
    area: (F, F),
    duration: F,
    waypoints: Vec<Vec<Waypoint<F>>>,
}

/// Parameters for random-waypoint trace generation.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityConfig<F> {
    pub device_count: usize,
    /// Rectangle (d_x, d_y) in meters; positions live in [0, d_x] x [0, d_y].
    pub area: (F, F),
    /// Mean leg speed in m/s; legs draw uniformly from [mean - delta, mean + delta].
    pub mean_speed: F,
    pub speed_delta: F,
    /// Every device's path covers at least [0, duration] seconds.
    pub duration: F,
    pub seed: u64,
}

impl<F: Scalar> MobilityConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.device_count == 0 {
            return Err(Error::config("device_count must be at least 1"));
        }
        if !(self.area.0 > F::zero() && self.area.1 > F::zero()) {
            return Err(Error::config("area dimensions must be positive"));
        }
        if !(self.duration > F::zero()) {
            return Err(Error::config("duration must be positive"));
        }
        if !(self.speed_delta >= F::zero()) {
            return Err(Error::config("speed_delta must be non-negative"));
        }
        if !(self.mean_speed - self.speed_delta > F::zero()) {
            return Err(Error::config("minimum speed (mean_speed - speed_delta) must be positive"));
        }
        Ok(())
    }
}

impl<F: Scalar> MobilityTrace<F> {
    /// Builds a trace from explicit waypoints, checking every invariant:
    /// at least one device, first waypoint of each device at t = 0, strictly
    /// increasing timestamps, coordinates inside the area, and paths covering
    /// the full duration.
    pub fn new(area: (F, F), duration: F, waypoints: Vec<Vec<Waypoint<F>>>) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::config("trace must contain at least one device"));
        }
        if !(area.0 >= F::zero() && area.1 >= F::zero()) {
            return Err(Error::config("area dimensions must be non-negative"));
        }
        for (dev, path) in waypoints.iter().enumerate() {
            let first = path
                .first()
                .ok_or_else(|| Error::config(format!("device {dev} has no waypoints")))?;
            if first.t != F::zero() {
                return Err(Error::config(format!("device {dev}: first waypoint must be at t = 0")));
            }
            let mut prev = None;
            for w in path {
                if !(w.t.is_finite() && w.x.is_finite() && w.y.is_finite()) {
                    return Err(Error::config(format!("device {dev}: non-finite waypoint")));
                }
                if let Some(p) = prev {
                    if w.t <= p {
                        return Err(Error::config(format!(
                            "device {dev}: waypoint times must be strictly increasing"
                        )));
                    }
                }
                if w.x < F::zero() || w.x > area.0 || w.y < F::zero() || w.y > area.1 {
                    return Err(Error::config(format!("device {dev}: waypoint outside the area")));
                }
                prev = Some(w.t);
            }
            if path.last().unwrap().t < duration {
                return Err(Error::config(format!(
                    "device {dev}: path ends before the trace duration"
                )));
            }
        }
        Ok(MobilityTrace { area, duration, waypoints })
    }

    pub fn device_count(&self) -> usize {
        self.waypoints.len()
    }

    pub fn area(&self) -> (F, F) {
        self.area
    }

    pub fn duration(&self) -> F {
        self.duration
    }

    pub fn waypoints(&self, device: DeviceId) -> &[Waypoint<F>] {
        &self.waypoints[device]
    }

    /// Linearly interpolated position of `device` at time `t`.
    /// `t` must lie inside the device's recorded path.
    pub fn position_at(&self, device: DeviceId, t: F) -> Result<(F, F)> {
        let path = self
            .waypoints
            .get(device)
            .ok_or_else(|| Error::OutOfRange(format!("unknown device {device}")))?;
        let last = path.last().expect("validated: non-empty path");
        if t < F::zero() || t > last.t {
            return Err(Error::OutOfRange(format!(
                "t = {t} outside device {device}'s path [0, {}]",
                last.t
            )));
        }
        // First waypoint strictly after t; its predecessor starts the segment.
        let idx = path.partition_point(|w| w.t <= t);
        if idx == path.len() {
            return Ok((last.x, last.y));
        }
        let (a, b) = (&path[idx - 1], &path[idx]);
        let frac = (t - a.t) / (b.t - a.t);
        Ok((a.x + frac * (b.x - a.x), a.y + frac * (b.y - a.y)))
    }

    /// Positions of every device at time `t`.
    pub fn positions_at(&self, t: F) -> Result<Vec<(F, F)>> {
        (0..self.device_count()).map(|d| self.position_at(d, t)).collect()
    }

    /// Devices within `range` of `device` at time `t` (closed ball, excluding
    /// the device itself), sorted by id.
    pub fn neighbors_at(&self, device: DeviceId, t: F, range: F) -> Result<Vec<DeviceId>> {
        let positions = self.positions_at(t)?;
        if device >= positions.len() {
            return Err(Error::OutOfRange(format!("unknown device {device}")));
        }
        let me = positions[device];
        Ok(positions
            .iter()
            .enumerate()
            .filter(|&(other, &p)| other != device && distance(me, p) <= range)
            .map(|(other, _)| other)
            .collect())
    }

    /// Serializes to the plain-text trace format: two header comments
    /// (`# area`, `# duration`) followed by one line per device of repeating
    /// `t x y` triples.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# area {} {}\n", self.area.0, self.area.1));
        out.push_str(&format!("# duration {}\n", self.duration));
        for path in &self.waypoints {
            let mut first = true;
            for w in path {
                if !first {
                    out.push(' ');
                }
                out.push_str(&format!("{} {} {}", w.t, w.x, w.y));
                first = false;
            }
            out.push('\n');
        }
        out
    }
}

pub fn distance<F: Scalar>((ax, ay): (F, F), (bx, by): (F, F)) -> F {
    let (dx, dy) = (ax - bx, ay - by);
    (dx * dx + dy * dy).sqrt()
}

/// Symmetric neighbor lists (closed ball of radius `range`) for a position
/// snapshot; each list is sorted by device id.
pub fn neighbors_from_positions<F: Scalar>(positions: &[(F, F)], range: F) -> Vec<Vec<DeviceId>> {
    let n = positions.len();
    let mut nbrs = vec![Vec::new(); n];
    for v in 0..n {
        for u in (v + 1)..n {
            if distance(positions[v], positions[u]) <= range {
                nbrs[v].push(u);
                nbrs[u].push(v);
            }
        }
    }
    nbrs
}

/// Generates a steady-state random-waypoint trace. Deterministic per config.
pub fn generate_rwp_trace<F: Scalar>(cfg: &MobilityConfig<F>) -> Result<MobilityTrace<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (dx, dy) = (cfg.area.0.as_f64(), cfg.area.1.as_f64());
    let vmin = (cfg.mean_speed - cfg.speed_delta).as_f64();
    let vmax = (cfg.mean_speed + cfg.speed_delta).as_f64();
    let duration = cfg.duration.as_f64();
    let diag = (dx * dx + dy * dy).sqrt();

    let mut all = Vec::with_capacity(cfg.device_count);
    for _ in 0..cfg.device_count {
        let mut path: Vec<Waypoint<F>> = Vec::new();

        // Stationary initial condition: the pair (previous, next) waypoint has
        // density proportional to their distance — rejection-sample against
        // the area diagonal — and the device sits uniformly along that leg.
        let (p0, p1) = loop {
            let a = (rng.gen::<f64>() * dx, rng.gen::<f64>() * dy);
            let b = (rng.gen::<f64>() * dx, rng.gen::<f64>() * dy);
            let d = dist64(a, b);
            if rng.gen::<f64>() * diag < d {
                break (a, b);
            }
        };
        // Stationary (time-weighted) speed law has density ~ 1/v on [vmin, vmax].
        let v0 = vmin * (vmax / vmin).powf(rng.gen::<f64>());
        let start = loop {
            let beta = rng.gen::<f64>();
            let s = (p0.0 + beta * (p1.0 - p0.0), p0.1 + beta * (p1.1 - p0.1));
            if dist64(s, p1) / v0 >= MIN_LEG_SECONDS {
                break s;
            }
        };

        let mut t = 0.0f64;
        let mut cur = start;
        push_waypoint(&mut path, t, cur);
        let mut target = p1;
        let mut speed = v0;
        loop {
            t += dist64(cur, target) / speed;
            cur = target;
            push_waypoint(&mut path, t, cur);
            // The +1 margin keeps the last timestamp at or past the duration
            // even after rounding into F.
            if t >= duration + 1.0 {
                break;
            }
            // Ordinary dynamics: uniform next waypoint, uniform leg speed.
            let (next, v) = loop {
                let c = (rng.gen::<f64>() * dx, rng.gen::<f64>() * dy);
                let v = vmin + rng.gen::<f64>() * (vmax - vmin);
                if dist64(cur, c) / v >= MIN_LEG_SECONDS {
                    break (c, v);
                }
            };
            target = next;
            speed = v;
        }
        all.push(path);
    }
    MobilityTrace::new(cfg.area, cfg.duration, all)
}

fn dist64(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn push_waypoint<F: Scalar>(path: &mut Vec<Waypoint<F>>, t: f64, (x, y): (f64, f64)) {
    path.push(Waypoint { t: F::from_f(t), x: F::from_f(x), y: F::from_f(y) });
}

/// Parses the plain-text trace format produced by [`MobilityTrace::to_text`]:
/// optional `# area d_x d_y` / `# duration T` headers, then one line per
/// device of repeating `t x y` triples. Without headers the area and duration
/// are inferred from the data. Errors carry 1-based line numbers.
pub fn parse_trace<F: Scalar>(text: &str) -> Result<MobilityTrace<F>> {
    let mut area: Option<(F, F)> = None;
    let mut duration: Option<F> = None;
    let mut paths: Vec<Vec<Waypoint<F>>> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            match fields.first().copied() {
                Some("area") if fields.len() == 3 => {
                    let w = parse_number::<F>(fields[1], line_no)?;
                    let h = parse_number::<F>(fields[2], line_no)?;
                    area = Some((w, h));
                }
                Some("duration") if fields.len() == 2 => {
                    duration = Some(parse_number::<F>(fields[1], line_no)?);
                }
                // Unknown comments are ignored so hand-annotated files parse.
                _ => {}
            }
            continue;
        }

        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() % 3 != 0 {
            return Err(Error::parse(
                line_no,
                format!("expected whole t/x/y triples, found {} dangling value(s)", tokens.len() % 3),
            ));
        }
        let mut path = Vec::with_capacity(tokens.len() / 3);
        for chunk in tokens.chunks(3) {
            let t = parse_number::<F>(chunk[0], line_no)?;
            let x = parse_number::<F>(chunk[1], line_no)?;
            let y = parse_number::<F>(chunk[2], line_no)?;
            if let Some(prev) = path.last().map(|w: &Waypoint<F>| w.t) {
                if t <= prev {
                    return Err(Error::parse(line_no, format!("waypoint time {t} not increasing")));
                }
            } else if t != F::zero() {
                return Err(Error::parse(line_no, "first waypoint must be at t = 0"));
            }
            if let Some((w, h)) = area {
                if x < F::zero() || x > w || y < F::zero() || y > h {
                    return Err(Error::parse(line_no, format!("coordinate ({x}, {y}) outside area")));
                }
            } else if x < F::zero() || y < F::zero() {
                return Err(Error::parse(line_no, "coordinates must be non-negative"));
            }
            path.push(Waypoint { t, x, y });
        }
        paths.push(path);
    }

    if paths.is_empty() {
        return Err(Error::parse(0, "trace contains no devices"));
    }
    let area = area.unwrap_or_else(|| {
        let mut w = F::zero();
        let mut h = F::zero();
        for p in paths.iter().flatten() {
            w = w.max(p.x);
            h = h.max(p.y);
        }
        (w, h)
    });
    let duration = duration.unwrap_or_else(|| {
        paths
            .iter()
            .map(|p| p.last().expect("non-empty").t)
            .fold(F::infinity(), F::min)
    });
    MobilityTrace::new(area, duration, paths)
}

fn parse_number<F: Scalar>(token: &str, line_no: usize) -> Result<F> {
    let v: f64 = token
        .parse()
        .map_err(|_| Error::parse(line_no, format!("not a number: {token:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(line_no, format!("non-finite number: {token:?}")));
    }
    Ok(F::from_f(v))
}

/// Snapshot connectivity summary over a set of sample times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConnectivityStats<F> {
    /// Neighbor count averaged over devices and sample times.
    pub mean_degree: F,
    /// |largest connected component| / device_count, averaged over sample times.
    pub mean_largest_component_fraction: F,
}

/// Degree and largest-component statistics of the contact graph induced by
/// `range`, sampled at `sample_times`.
pub fn connectivity_stats<F: Scalar>(
    trace: &MobilityTrace<F>,
    range: F,
    sample_times: &[F],
) -> Result<ConnectivityStats<F>> {
    if sample_times.is_empty() {
        return Err(Error::config("connectivity_stats requires at least one sample time"));
    }
    let n = trace.device_count();
    let mut degree_sum = 0usize;
    let mut fraction_sum = 0.0f64;
    for &t in sample_times {
        let positions = trace.positions_at(t)?;
        let nbrs = neighbors_from_positions(&positions, range);
        degree_sum += nbrs.iter().map(Vec::len).sum::<usize>();
        fraction_sum += largest_component(&nbrs) as f64 / n as f64;
    }
    let samples = sample_times.len();
    Ok(ConnectivityStats {
        mean_degree: F::from_f(degree_sum as f64 / (samples * n) as f64),
        mean_largest_component_fraction: F::from_f(fraction_sum / samples as f64),
    })
}

fn largest_component(nbrs: &[Vec<DeviceId>]) -> usize {
    let n = nbrs.len();
    let mut seen = vec![false; n];
    let mut best = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        while let Some(v) = stack.pop() {
            size += 1;
            for &u in &nbrs[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        best = best.max(size);
    }
    best
}
