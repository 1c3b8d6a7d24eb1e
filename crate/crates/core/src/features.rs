//! Relational feature computation and normalization for the learned router.
//!
//! Every feature is normalized as `(raw + 1) / (denominator + 1)` so inputs
//! never hit exactly zero. Denominators are fixed per feature; the ones tied
//! to network properties (device count, area size) adapt per scenario, while
//! the TTL reference is frozen at its training value so train- and test-time
//! inputs stay on the same scale.
//!
//! ## Feature lexicon
//!
//! Per-device *bundle* (7 values, destination-specific), in order:
//!
//! | # | name        | raw value                              | denominator |
//! |---|-------------|----------------------------------------|-------------|
//! | 0 | queue_len   | packets queued at the device           | 30          |
//! | 1 | queue_dest  | queued packets bound for the dest      | 30          |
//! | 2 | degree      | neighbor count                         | 10          |
//! | 3 | density     | neighbor count / device count          | N           |
//! | 4 | one_hop     | estimated one-hop delay to the dest    | 1000        |
//! | 5 | two_hop     | estimated best two-hop delay           | 1000        |
//! | 6 | distance    | Euclidean distance on area-scaled      | 2           |
//! |   |             | coordinates to the last known position |             |
//!
//! Delay features are capped at normalized 1.0, and unavailable estimates
//! (no contact history, no location record) take that same pessimistic
//! ceiling. Coordinates are divided by the area dimensions before the
//! distance is taken, bounding the raw distance by sqrt(2).
//!
//! *State vector* (29): normalized TTL, the deciding device's bundle, then
//! neighborhood aggregates — the per-feature minimum block (7), maximum
//! block (7), and mean block (7) over the device's neighbors.
//!
//! *Action vector* (28 + H): the candidate's bundle, the candidate's own
//! neighborhood aggregates, then H recently-visited context bits where bit i
//! is 1 iff the candidate is the i-th most recent device on the packet's
//! path (bit 0 = the current holder).

use crate::error::{Error, Result};
use crate::mobility::{distance, DeviceId};
use crate::scalar::Scalar;

/// Number of values in one per-device feature bundle.
pub const BUNDLE_DIM: usize = 7;
/// Number of neighborhood aggregate values (min/max/mean of each bundle entry).
pub const AGGREGATE_DIM: usize = 3 * BUNDLE_DIM;
/// State-vector dimension: TTL + own bundle + aggregates.
pub const STATE_DIM: usize = 1 + BUNDLE_DIM + AGGREGATE_DIM;

/// Action-vector dimension for a given context-history length.
pub const fn action_dim(n_history: usize) -> usize {
    BUNDLE_DIM + AGGREGATE_DIM + n_history
}

/// Normalizes one raw feature: `(raw + 1) / (denom + 1)`.
pub fn normalize<F: Scalar>(raw: F, denom: F) -> Result<F> {
    if raw < F::zero() {
        return Err(Error::OutOfRange(format!("negative raw feature value {raw}")));
    }
    debug_assert!(denom > F::zero());
    Ok((raw + F::one()) / (denom + F::one()))
}

/// Fixed per-feature denominators plus the scenario quantities that some of
/// them derive from. Identical values must be used in training and testing.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationTable<F> {
    /// TTL denominator, frozen at the training TTL.
    pub ttl_reference: F,
    /// Queue-length denominator (both total and per-destination).
    pub queue: F,
    /// Node-degree denominator.
    pub degree: F,
    /// Device count; denominator for the density fraction.
    pub device_count: F,
    /// One- and two-hop delay denominator.
    pub delay: F,
    /// Area dimensions (d_x, d_y); coordinates are divided by these before
    /// the distance feature is computed.
    pub area: (F, F),
    /// Euclidean-distance denominator.
    pub distance: F,
}

impl<F: Scalar> NormalizationTable<F> {
    /// Standard table for a scenario with `device_count` devices on an
    /// `area`-sized field, with the frozen TTL reference.
    pub fn new(device_count: usize, area: (F, F), ttl_reference: F) -> Result<Self> {
        let table = NormalizationTable {
            ttl_reference,
            queue: F::from_f(30.0),
            degree: F::from_f(10.0),
            device_count: F::from_n(device_count),
            delay: F::from_f(1000.0),
            area,
            distance: F::from_f(2.0),
        };
        if !(table.ttl_reference > F::zero()
            && table.device_count > F::zero()
            && table.area.0 > F::zero()
            && table.area.1 > F::zero())
        {
            return Err(Error::config("normalization denominators must be positive"));
        }
        Ok(table)
    }

    /// Delay estimate to normalized form: unavailable estimates and anything
    /// beyond the denominator map to the pessimistic ceiling 1.0.
    pub fn normalize_delay(&self, raw: Option<F>) -> Result<F> {
        match raw {
            None => Ok(F::one()),
            Some(d) => Ok(normalize(d, self.delay)?.min(F::one())),
        }
    }

    /// Distance on area-scaled coordinates to normalized form; a missing
    /// location record takes the pessimistic ceiling 1.0.
    pub fn normalize_distance(
        &self,
        position: (F, F),
        record: Option<(F, F)>,
    ) -> Result<F> {
        match record {
            None => Ok(F::one()),
            Some(r) => {
                let scaled_self = (position.0 / self.area.0, position.1 / self.area.1);
                let scaled_rec = (r.0 / self.area.0, r.1 / self.area.1);
                normalize(distance(scaled_self, scaled_rec), self.distance)
            }
        }
    }

    /// Builds the normalized 7-value bundle from raw inputs. Queue and degree
    /// values saturate at 1.0 once the raw input reaches the denominator, so
    /// deep queues and dense neighborhoods never push the vector outside the
    /// unit box the estimators are trained in.
    pub fn bundle(&self, raw: &RawBundle<F>) -> Result<FeatureBundle<F>> {
        let degree = F::from_n(raw.degree);
        Ok(FeatureBundle {
            queue_len: normalize(F::from_n(raw.queue_len), self.queue)?.min(F::one()),
            queue_len_dest: normalize(F::from_n(raw.queue_len_dest), self.queue)?.min(F::one()),
            degree: normalize(degree, self.degree)?.min(F::one()),
            density: normalize(degree / self.device_count, self.device_count)?,
            one_hop: self.normalize_delay(raw.one_hop)?,
            two_hop: self.normalize_delay(raw.two_hop)?,
            distance: self.normalize_distance(raw.position, raw.record_of_dest)?,
        })
    }

    /// Bundle substituted for an empty neighborhood: queue/degree/density at
    /// their normalized-zero floor, delays and distance at the pessimistic
    /// ceiling.
    pub fn empty_neighborhood_bundle(&self) -> FeatureBundle<F> {
        let zero = |denom| normalize(F::zero(), denom).expect("zero is non-negative");
        FeatureBundle {
            queue_len: zero(self.queue),
            queue_len_dest: zero(self.queue),
            degree: zero(self.degree),
            density: zero(self.device_count),
            one_hop: F::one(),
            two_hop: F::one(),
            distance: F::one(),
        }
    }
}

/// Raw, unnormalized inputs for one device's bundle toward one destination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawBundle<F> {
    pub queue_len: usize,
    pub queue_len_dest: usize,
    pub degree: usize,
    /// The device's own current position, in meters.
    pub position: (F, F),
    /// Last known position of the destination (possibly stale), in meters;
    /// `None` when the device holds no record.
    pub record_of_dest: Option<(F, F)>,
    /// Estimated one-hop delay to the destination; `None` when unavailable.
    pub one_hop: Option<F>,
    /// Estimated best two-hop delay; `None` when unavailable.
    pub two_hop: Option<F>,
}

/// One device's normalized feature bundle toward one destination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureBundle<F> {
    pub queue_len: F,
    pub queue_len_dest: F,
    pub degree: F,
    pub density: F,
    pub one_hop: F,
    pub two_hop: F,
    pub distance: F,
}

impl<F: Scalar> FeatureBundle<F> {
    pub fn as_array(&self) -> [F; BUNDLE_DIM] {
        [
            self.queue_len,
            self.queue_len_dest,
            self.degree,
            self.density,
            self.one_hop,
            self.two_hop,
            self.distance,
        ]
    }
}

/// Per-feature (min-block, max-block, mean-block) over a neighborhood's
/// bundles. An empty neighborhood takes `default` for every aggregate.
pub fn neighborhood_aggregates<F: Scalar>(
    bundles: &[FeatureBundle<F>],
    default: &FeatureBundle<F>,
) -> [F; AGGREGATE_DIM] {
    let mut out = [F::zero(); AGGREGATE_DIM];
    if bundles.is_empty() {
        let d = default.as_array();
        for i in 0..BUNDLE_DIM {
            out[i] = d[i];
            out[BUNDLE_DIM + i] = d[i];
            out[2 * BUNDLE_DIM + i] = d[i];
        }
        return out;
    }
    let count = F::from_n(bundles.len());
    for (k, bundle) in bundles.iter().enumerate() {
        let values = bundle.as_array();
        for i in 0..BUNDLE_DIM {
            if k == 0 {
                out[i] = values[i];
                out[BUNDLE_DIM + i] = values[i];
            } else {
                out[i] = out[i].min(values[i]);
                out[BUNDLE_DIM + i] = out[BUNDLE_DIM + i].max(values[i]);
            }
            out[2 * BUNDLE_DIM + i] += values[i] / count;
        }
    }
    out
}

/// Assembles the 29-value state vector: normalized TTL, the deciding
/// device's own bundle, then its neighborhood aggregates. The TTL entry
/// saturates at 1.0 — runs configured with a larger hop budget than the
/// normalization reference read as "fresh" rather than as out-of-range
/// inputs.
pub fn state_features<F: Scalar>(
    table: &NormalizationTable<F>,
    ttl: usize,
    own: &FeatureBundle<F>,
    neighbor_bundles: &[FeatureBundle<F>],
) -> Result<Vec<F>> {
    let mut out = Vec::with_capacity(STATE_DIM);
    out.push(normalize(F::from_n(ttl), table.ttl_reference)?.min(F::one()));
    out.extend_from_slice(&own.as_array());
    out.extend_from_slice(&neighborhood_aggregates(
        neighbor_bundles,
        &table.empty_neighborhood_bundle(),
    ));
    debug_assert_eq!(out.len(), STATE_DIM);
    Ok(out)
}

/// Assembles the (28 + H)-value action vector for one candidate: the
/// candidate's bundle, the candidate's neighborhood aggregates, then the
/// recently-visited context bits.
pub fn action_features<F: Scalar>(
    table: &NormalizationTable<F>,
    candidate: &FeatureBundle<F>,
    candidate_neighbor_bundles: &[FeatureBundle<F>],
    context: &[bool],
) -> Vec<F> {
    let mut out = Vec::with_capacity(action_dim(context.len()));
    out.extend_from_slice(&candidate.as_array());
    out.extend_from_slice(&neighborhood_aggregates(
        candidate_neighbor_bundles,
        &table.empty_neighborhood_bundle(),
    ));
    out.extend(context.iter().map(|&b| if b { F::one() } else { F::zero() }));
    debug_assert_eq!(out.len(), action_dim(context.len()));
    out
}

/// Context bits for a candidate against a packet's visit history
/// (recent-first; entry 0 is the current holder): bit i is set iff the
/// candidate is the i-th most recent visited device. Several bits may be set
/// when the candidate was visited repeatedly.
pub fn context_bits(history: &[DeviceId], candidate: DeviceId, n_history: usize) -> Vec<bool> {
    (0..n_history)
        .map(|i| history.get(i) == Some(&candidate))
        .collect()
}

/// Column names of a bundle, prefixed (e.g. `"s"` -> `s_queue_len`, ...).
fn bundle_names(prefix: &str) -> Vec<String> {
    ["queue_len", "queue_dest", "degree", "density", "one_hop", "two_hop", "distance"]
        .iter()
        .map(|n| format!("{prefix}_{n}"))
        .collect()
}

fn aggregate_names(prefix: &str) -> Vec<String> {
    let mut names = Vec::with_capacity(AGGREGATE_DIM);
    for block in ["min", "max", "mean"] {
        names.extend(bundle_names(&format!("{prefix}_nbr_{block}")));
    }
    names
}

/// Column names of the state vector, in assembly order.
pub fn state_feature_names() -> Vec<String> {
    let mut names = Vec::with_capacity(STATE_DIM);
    names.push("s_ttl".to_string());
    names.extend(bundle_names("s"));
    names.extend(aggregate_names("s"));
    names
}

/// Column names of the action vector, in assembly order.
pub fn action_feature_names(n_history: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(action_dim(n_history));
    names.extend(bundle_names("a"));
    names.extend(aggregate_names("a"));
    names.extend((0..n_history).map(|i| format!("a_visited_{i}")));
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> NormalizationTable<f64> {
        NormalizationTable::new(25, (500.0, 500.0), 300.0).unwrap()
    }

    #[test]
    fn normalization_formula() {
        assert_eq!(normalize(300.0, 300.0).unwrap(), 1.0);
        assert_eq!(normalize(0.0, 30.0).unwrap(), 1.0 / 31.0);
        assert_eq!(normalize(10.0, 10.0).unwrap(), 1.0);
        assert!(matches!(normalize(-0.5, 30.0), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn bundle_normalizes_each_entry() {
        let raw = RawBundle {
            queue_len: 5,
            queue_len_dest: 2,
            degree: 3,
            position: (0.0, 0.0),
            record_of_dest: Some((500.0, 500.0)),
            one_hop: Some(99.0),
            two_hop: None,
        };
        let b = table().bundle(&raw).unwrap();
        assert_eq!(b.queue_len, 6.0 / 31.0);
        assert_eq!(b.queue_len_dest, 3.0 / 31.0);
        assert_eq!(b.degree, 4.0 / 11.0);
        assert_eq!(b.density, (3.0 / 25.0 + 1.0) / 26.0);
        assert_eq!(b.one_hop, 100.0 / 1001.0);
        assert_eq!(b.two_hop, 1.0); // unavailable -> pessimistic ceiling
        // Opposite corners scale to (0,0) vs (1,1): raw distance sqrt(2).
        assert!((b.distance - (2f64.sqrt() + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn oversized_inputs_saturate_at_one() {
        let t = table();
        // A full 200-packet queue, a denser neighborhood than the denominator
        // anticipates, and a hop budget ten times the reference all pin at 1.
        let raw = RawBundle {
            queue_len: 200,
            queue_len_dest: 200,
            degree: 24,
            position: (0.0, 0.0),
            record_of_dest: None,
            one_hop: None,
            two_hop: None,
        };
        let b = t.bundle(&raw).unwrap();
        assert_eq!(b.queue_len, 1.0);
        assert_eq!(b.queue_len_dest, 1.0);
        assert_eq!(b.degree, 1.0);
        let s = state_features(&t, 3000, &b, &[]).unwrap();
        assert_eq!(s[0], 1.0);
        // Every entry of the assembled vector respects the unit cap except
        // none: distance and density are bounded by construction.
        for (i, value) in s.iter().enumerate() {
            assert!(*value > 0.0 && *value <= 1.0, "entry {i} = {value}");
        }
    }

    #[test]
    fn delay_estimates_cap_at_one() {
        let t = table();
        assert_eq!(t.normalize_delay(Some(1000.0)).unwrap(), 1.0);
        assert_eq!(t.normalize_delay(Some(5000.0)).unwrap(), 1.0);
        assert_eq!(t.normalize_delay(None).unwrap(), 1.0);
        assert!(t.normalize_delay(Some(999.0)).unwrap() < 1.0);
    }

    #[test]
    fn destination_at_own_position_has_floor_distance() {
        let t = table();
        let d = t.normalize_distance((120.0, 80.0), Some((120.0, 80.0))).unwrap();
        assert_eq!(d, 1.0 / 3.0); // raw 0 under denominator 2
        assert_eq!(t.normalize_distance((120.0, 80.0), None).unwrap(), 1.0);
    }

    #[test]
    fn aggregates_are_min_max_mean_blocks() {
        let t = table();
        let mk = |deg: usize| {
            t.bundle(&RawBundle {
                queue_len: 0,
                queue_len_dest: 0,
                degree: deg,
                position: (0.0, 0.0),
                record_of_dest: None,
                one_hop: None,
                two_hop: None,
            })
            .unwrap()
        };
        // Raw degrees chosen so the normalized values are easy to identify.
        let bundles = [mk(2), mk(5), mk(8)];
        let agg = neighborhood_aggregates(&bundles, &t.empty_neighborhood_bundle());
        let degree_idx = 2;
        assert_eq!(agg[degree_idx], 3.0 / 11.0); // min block
        assert_eq!(agg[BUNDLE_DIM + degree_idx], 9.0 / 11.0); // max block
        assert!((agg[2 * BUNDLE_DIM + degree_idx] - 6.0 / 11.0).abs() < 1e-12); // mean

        // min <= mean <= max for every feature.
        for i in 0..BUNDLE_DIM {
            assert!(agg[i] <= agg[2 * BUNDLE_DIM + i] + 1e-12);
            assert!(agg[2 * BUNDLE_DIM + i] <= agg[BUNDLE_DIM + i] + 1e-12);
        }

        // A single neighbor collapses min = max = mean.
        let one = neighborhood_aggregates(&bundles[..1], &t.empty_neighborhood_bundle());
        for i in 0..BUNDLE_DIM {
            assert_eq!(one[i], one[BUNDLE_DIM + i]);
            assert_eq!(one[i], one[2 * BUNDLE_DIM + i]);
        }
    }

    #[test]
    fn empty_neighborhood_uses_defaults() {
        let t = table();
        let agg = neighborhood_aggregates::<f64>(&[], &t.empty_neighborhood_bundle());
        let d = t.empty_neighborhood_bundle().as_array();
        assert_eq!(d[4], 1.0); // one_hop pessimistic
        assert_eq!(d[6], 1.0); // distance pessimistic
        assert_eq!(d[0], 1.0 / 31.0); // queue floor
        for i in 0..BUNDLE_DIM {
            assert_eq!(agg[i], d[i]);
            assert_eq!(agg[BUNDLE_DIM + i], d[i]);
            assert_eq!(agg[2 * BUNDLE_DIM + i], d[i]);
        }
    }

    #[test]
    fn vector_dimensions_are_fixed() {
        let t = table();
        let own = t.empty_neighborhood_bundle();
        let s = state_features(&t, 300, &own, &[]).unwrap();
        assert_eq!(s.len(), 29);
        assert_eq!(s[0], 1.0); // TTL 300 under reference 300

        let a = action_features(&t, &own, &[], &[false; 5]);
        assert_eq!(a.len(), 33);
        let a = action_features(&t, &own, &[], &[]);
        assert_eq!(a.len(), 28); // no-context configuration

        assert_eq!(state_feature_names().len(), 29);
        assert_eq!(action_feature_names(5).len(), 33);
        assert_eq!(action_feature_names(0).len(), 28);
    }

    #[test]
    fn context_bits_mark_visit_positions() {
        // History recent-first: current holder 4, then 7, then 2.
        let history = [4, 7, 2];
        assert_eq!(context_bits(&history, 2, 5), vec![false, false, true, false, false]);
        assert_eq!(context_bits(&history, 9, 5), vec![false; 5]);
        assert_eq!(context_bits(&history, 4, 5), vec![true, false, false, false, false]);
        // Repeat visits set several bits.
        assert_eq!(context_bits(&[3, 1, 3], 3, 3), vec![true, false, true]);
        // History shorter than the window leaves trailing bits clear.
        assert_eq!(context_bits(&[5], 5, 3), vec![true, false, false]);
    }

    #[test]
    fn names_align_with_vector_layout() {
        let names = state_feature_names();
        assert_eq!(names[0], "s_ttl");
        assert_eq!(names[1], "s_queue_len");
        assert_eq!(names[8], "s_nbr_min_queue_len");
        assert_eq!(names[15], "s_nbr_max_queue_len");
        assert_eq!(names[22], "s_nbr_mean_queue_len");
        let names = action_feature_names(2);
        assert_eq!(names[0], "a_queue_len");
        assert_eq!(names[28], "a_visited_0");
        assert_eq!(names[29], "a_visited_1");
    }
}
