//! Cyclic intermediate-domain filtering.
//!
//! Target samples whose features lie closest (cosine distance) to a class
//! prototype are taken as pseudo-labelled "intermediate" samples. The
//! prototypes are the columns of the bias-free classifier weight. The set is
//! re-filtered on a cyclic schedule as the encoder adapts.
//!
//! Selection rules, in order:
//! * each class takes its `n_m` nearest samples, ordered by `(distance, id)`;
//! * a sample may belong to one class only: it goes to the class it is
//!   strictly nearer to, exact ties going to the lower class index;
//! * the class that loses a sample backfills with its next-nearest
//!   unclaimed sample.
//!
//! This is the same as walking all `(distance, class, id)` triples in
//! ascending order and claiming greedily while a class still has room.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::cmp::Reverse;
use std::io::Write;

use crate::autodiff::{cosine_distance, Matrix, Tape, Var};
use crate::data::{format_f64, TargetView};
use crate::error::{Error, Result};
use crate::network::{EncoderPath, ModelBundle, ParamKey};
use crate::par::{self, Exec};
use crate::pretrain::{smooth_labels, smoothed_ce_loss};

/// `D x K` matrix whose column `k` is the class-`k` prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMatrix(Matrix);

impl PrototypeMatrix {
    pub fn new(weights: Matrix) -> Result<Self> {
        for k in 0..weights.cols() {
            if crate::autodiff::norm(&weights.column(k)) <= crate::autodiff::NORM_FLOOR {
                return Err(Error::DegenerateVector { op: "prototype" });
            }
        }
        Ok(PrototypeMatrix(weights))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn class_count(&self) -> usize {
        self.0.cols()
    }

    pub fn prototype(&self, k: usize) -> Vec<f64> {
        self.0.column(k)
    }
}

pub fn extract_prototypes(bundle: &ModelBundle) -> Result<PrototypeMatrix> {
    PrototypeMatrix::new(bundle.classifier_weights().clone())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selected {
    pub id: usize,
    pub class: usize,
    pub distance: f64,
}

/// Selected target ids with their assigned class, and the epoch they were
/// filtered at.
#[derive(Clone, Debug, PartialEq)]
pub struct IntermediateSet {
    per_class: Vec<Vec<Selected>>,
    epoch_selected: usize,
}

impl IntermediateSet {
    pub fn empty(class_count: usize) -> Self {
        IntermediateSet {
            per_class: vec![Vec::new(); class_count],
            epoch_selected: 0,
        }
    }

    pub fn epoch_selected(&self) -> usize {
        self.epoch_selected
    }

    pub fn with_epoch(mut self, epoch: usize) -> Self {
        self.epoch_selected = epoch;
        self
    }

    pub fn class_count(&self) -> usize {
        self.per_class.len()
    }

    /// Selections for class `k`, nearest first.
    pub fn class(&self, k: usize) -> &[Selected] {
        &self.per_class[k]
    }

    pub fn entries(&self) -> impl Iterator<Item = &Selected> {
        self.per_class.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.per_class.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries().map(|s| s.id).collect()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.entries().any(|s| s.id == id)
    }

    /// Fraction of selections whose assigned class matches `labels[id]`.
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let hits = self.entries().filter(|s| labels[s.id] == s.class).count();
        hits as f64 / self.len() as f64
    }

    pub fn write_dump<W: Write>(&self, out: &mut W, header: bool) -> Result<()> {
        if header {
            writeln!(out, "epoch,class,sample_id,distance")?;
        }
        for s in self.entries() {
            writeln!(out, "{},{},{},{}", self.epoch_selected, s.class, s.id, format_f64(s.distance))?;
        }
        Ok(())
    }
}

/// Cosine distances of every feature row to every prototype, `n x K`.
pub fn prototype_distances(features: &Matrix, prototypes: &PrototypeMatrix, exec: Exec) -> Result<Matrix> {
    if features.cols() != prototypes.matrix().rows() {
        return Err(Error::shape("prototype_distances", features.shape(), prototypes.matrix().shape()));
    }
    let k = prototypes.class_count();
    let protos: Vec<Vec<f64>> = (0..k).map(|c| prototypes.prototype(c)).collect();
    let rows: Vec<Result<Vec<f64>>> = par::map_range(exec, features.rows(), |i| {
        protos.iter().map(|p| cosine_distance(features.row(i), p)).collect()
    });
    let mut data = Vec::with_capacity(features.rows() * k);
    for r in rows {
        data.extend(r?);
    }
    Matrix::new(features.rows(), k, data)
}

#[derive(PartialEq)]
struct Candidate {
    distance: f64,
    class: usize,
    id: usize,
    rank: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.class.cmp(&other.class))
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Selection from a precomputed `n x K` distance matrix.
///
/// Each class keeps a list of samples sorted by `(distance, id)`; a min-heap
/// holds every open class's next candidate, so the globally nearest
/// remaining pair is always claimed next.
pub fn select_from_distances(distances: &Matrix, n_m: usize) -> Result<IntermediateSet> {
    if n_m == 0 {
        return Err(Error::config("n_m", "must be >= 1"));
    }
    let (n, k) = distances.shape();
    if n == 0 {
        return Err(Error::Contract("target set is empty".into()));
    }
    let ranked: Vec<Vec<usize>> = par::map_range(Exec::default(), k, |c| {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            distances
                .get(a, c)
                .total_cmp(&distances.get(b, c))
                .then(a.cmp(&b))
        });
        order
    });

    let mut claimed = vec![false; n];
    let mut set = IntermediateSet::empty(k);
    let mut heap = BinaryHeap::new();
    for (c, order) in ranked.iter().enumerate() {
        heap.push(Reverse(Candidate {
            distance: distances.get(order[0], c),
            class: c,
            id: order[0],
            rank: 0,
        }));
    }
    while let Some(Reverse(cand)) = heap.pop() {
        let c = cand.class;
        if !claimed[cand.id] {
            claimed[cand.id] = true;
            set.per_class[c].push(Selected {
                id: cand.id,
                class: c,
                distance: cand.distance,
            });
            if set.per_class[c].len() == n_m {
                continue;
            }
        }
        // advance this class to its next unclaimed sample
        let order = &ranked[c];
        let mut rank = cand.rank + 1;
        while rank < n && claimed[order[rank]] {
            rank += 1;
        }
        if rank < n {
            heap.push(Reverse(Candidate {
                distance: distances.get(order[rank], c),
                class: c,
                id: order[rank],
                rank,
            }));
        }
    }
    Ok(set)
}

/// Filters the intermediate set with the current encoder.
pub fn select_intermediate(
    bundle: &ModelBundle,
    target: &TargetView,
    prototypes: &PrototypeMatrix,
    n_m: usize,
) -> Result<IntermediateSet> {
    if target.is_empty() {
        return Err(Error::Contract("target set is empty".into()));
    }
    let features = bundle.encode_plain(target.features(), EncoderPath::Main)?;
    let distances = prototype_distances(&features, prototypes, Exec::default())?;
    select_from_distances(&distances, n_m)
}

/// Refresh epochs `T = e * alpha * E`, `e = 1..floor(1/alpha)`, kept when `0 < T < E`.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleSchedule {
    pub epochs: usize,
    pub alpha: f64,
    refresh_epochs: BTreeSet<usize>,
}

impl CycleSchedule {
    pub fn new(epochs: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::config("alpha", format!("{alpha} is outside (0, 1]")));
        }
        // 1e-9 absorbs representation error, e.g. 1/0.2 = 4.999...
        let cycles = (1.0 / alpha + 1e-9).floor() as usize;
        let refresh_epochs = (1..=cycles)
            .map(|e| (e as f64 * alpha * epochs as f64).round() as usize)
            .filter(|&t| t > 0 && t < epochs)
            .collect();
        Ok(CycleSchedule {
            epochs,
            alpha,
            refresh_epochs,
        })
    }

    pub fn refresh_epochs(&self) -> &BTreeSet<usize> {
        &self.refresh_epochs
    }

    pub fn cycle_count(&self) -> usize {
        (1.0 / self.alpha + 1e-9).floor() as usize
    }
}

pub fn refresh_due(schedule: &CycleSchedule, epoch: usize) -> bool {
    schedule.refresh_epochs.contains(&epoch)
}

/// `gamma` times the label-smoothed cross-entropy on intermediate samples.
/// An empty batch contributes zero.
pub fn intermediate_loss(
    bundle: &ModelBundle,
    tape: &mut Tape<ParamKey>,
    x_m: &Matrix,
    y_m: &[usize],
    tau: f64,
    gamma: f64,
) -> Result<Var> {
    if y_m.is_empty() {
        log::warn!("intermediate loss requested before any samples were selected");
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let targets = smooth_labels(y_m, bundle.arch().class_count, tau)?;
    let x = tape.constant(x_m.clone());
    let z = bundle.encode(tape, x, EncoderPath::Main)?;
    let logits = bundle.classify(tape, z)?;
    let ce = smoothed_ce_loss(tape, logits, &targets)?;
    Ok(tape.scale(ce, gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ArchSpec, Component, ParamStore};

    #[test]
    fn schedule_examples() {
        let s = CycleSchedule::new(100, 0.3).unwrap();
        assert_eq!(s.refresh_epochs(), &BTreeSet::from([30, 60, 90]));
        assert_eq!(s.cycle_count(), 3);
        assert!(CycleSchedule::new(100, 1.0).unwrap().refresh_epochs().is_empty());
        assert_eq!(CycleSchedule::new(40, 0.5).unwrap().refresh_epochs(), &BTreeSet::from([20]));
        assert!(refresh_due(&s, 60));
        assert!(!refresh_due(&s, 61));
        assert!(matches!(CycleSchedule::new(10, 0.0), Err(Error::Config { field: "alpha", .. })));
        assert!(matches!(CycleSchedule::new(10, 1.5), Err(Error::Config { field: "alpha", .. })));
    }

    #[test]
    fn prototypes_alias_classifier() {
        let arch = ArchSpec {
            feature_dim: 3,
            class_count: 3,
            ..ArchSpec::default()
        };
        let mut b = ModelBundle::init(arch, 0).unwrap();
        let key = ParamKey::weight(Component::Classifier, 0);
        b.set_params(&ParamStore::from([(key, Matrix::identity(3))])).unwrap();
        let p = extract_prototypes(&b).unwrap();
        assert_eq!(p.prototype(1), vec![0.0, 1.0, 0.0]);

        let w = Matrix::from_rows(&[[1.0, -2.0], [0.5, 0.25], [3.0, 4.0]]).unwrap();
        let arch = ArchSpec {
            feature_dim: 3,
            class_count: 2,
            ..ArchSpec::default()
        };
        let mut b = ModelBundle::init(arch, 0).unwrap();
        b.set_params(&ParamStore::from([(key, w.clone())])).unwrap();
        assert_eq!(extract_prototypes(&b).unwrap().matrix(), &w);
    }

    #[test]
    fn aligned_samples_selected_for_their_class() {
        let protos = PrototypeMatrix::new(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
        let feats = Matrix::from_rows(&[[0.0, 2.0], [3.0, 0.0], [1.0, 1.0]]).unwrap();
        let d = prototype_distances(&feats, &protos, Exec::Sequential).unwrap();
        let set = select_from_distances(&d, 1).unwrap();
        assert_eq!(set.class(0)[0].id, 1);
        assert_eq!(set.class(1)[0].id, 0);
        assert_eq!(set.class(0)[0].distance, 0.0);
    }

    #[test]
    fn single_class_selects_everything() {
        let d = Matrix::from_rows(&[[0.3], [0.1], [0.2]]).unwrap();
        let set = select_from_distances(&d, 10).unwrap();
        let ids: Vec<_> = set.class(0).iter().map(|s| s.id).collect();
        assert_eq!(ids, vec![1, 2, 0]);
    }

    #[test]
    fn collision_goes_to_nearer_class_and_loser_backfills() {
        // sample 0 is nearest for both classes, nearer to class 1
        let d = Matrix::from_rows(&[[0.1, 0.05], [0.2, 0.9], [0.3, 0.8]]).unwrap();
        let set = select_from_distances(&d, 1).unwrap();
        assert_eq!(set.class(1)[0].id, 0);
        assert_eq!(set.class(0)[0].id, 1);
    }

    #[test]
    fn exact_tie_goes_to_lower_class() {
        let d = Matrix::from_rows(&[[0.1, 0.1], [0.5, 0.6], [0.7, 0.2]]).unwrap();
        let set = select_from_distances(&d, 1).unwrap();
        assert_eq!(set.class(0)[0].id, 0);
        assert_eq!(set.class(1)[0].id, 2);
    }

    #[test]
    fn within_class_ties_use_lower_id() {
        let d = Matrix::from_rows(&[[0.4], [0.2], [0.2], [0.2]]).unwrap();
        let set = select_from_distances(&d, 2).unwrap();
        let ids: Vec<_> = set.class(0).iter().map(|s| s.id).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn too_few_samples_leave_classes_short() {
        let d = Matrix::from_rows(&[[0.1, 0.2], [0.3, 0.1], [0.5, 0.6]]).unwrap();
        let set = select_from_distances(&d, 2).unwrap();
        assert_eq!(set.len(), 3);
        let mut ids = set.ids();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn accuracy_and_dump() {
        let d = Matrix::from_rows(&[[0.1, 0.9], [0.8, 0.2]]).unwrap();
        let set = select_from_distances(&d, 1).unwrap().with_epoch(30);
        assert_eq!(set.accuracy(&[0, 1]), 1.0);
        assert_eq!(set.accuracy(&[1, 1]), 0.5);
        let mut buf = Vec::new();
        set.write_dump(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,class,sample_id,distance\n30,0,0,"));
    }

    #[test]
    fn zero_n_m_rejected() {
        let d = Matrix::from_rows(&[[0.1]]).unwrap();
        assert!(matches!(select_from_distances(&d, 0), Err(Error::Config { field: "n_m", .. })));
    }

    #[test]
    fn intermediate_loss_scales_by_gamma() {
        let b = ModelBundle::init(ArchSpec::default(), 3).unwrap();
        let x = Matrix::from_rows(&[[0.5, -1.0], [1.5, 0.2], [-0.3, 0.9]]).unwrap();
        let y = [1, 0, 1];
        let value = |gamma: f64| {
            let mut tape = Tape::new();
            let v = intermediate_loss(&b, &mut tape, &x, &y, 0.1, gamma).unwrap();
            tape.scalar(v)
        };
        assert_eq!(value(0.0), 0.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = b.encode(&mut tape, xv, EncoderPath::Main).unwrap();
        let logits = b.classify(&mut tape, z).unwrap();
        let ce = smoothed_ce_loss(&mut tape, logits, &smooth_labels(&y, 2, 0.1).unwrap()).unwrap();
        assert!((value(0.1) - 0.1 * tape.scalar(ce)).abs() < 1e-15);

        let mut tape = Tape::new();
        let empty = intermediate_loss(&b, &mut tape, &Matrix::zeros(0, 2), &[], 0.1, 0.1).unwrap();
        assert_eq!(tape.scalar(empty), 0.0);
    }
}
