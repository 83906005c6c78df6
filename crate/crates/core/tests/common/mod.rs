//! Brute-force oracles and random instances shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use side_core::autodiff::cosine_distance;
use side_core::cidf::IntermediateSet;
use side_core::data::TargetView;
use side_core::network::{ArchSpec, Component, ModelBundle, ParamKey};
use side_core::Matrix;

pub fn rng(seed: u64) -> side_core::rng::StreamRng {
    side_core::rng::stream(seed, 777)
}

/// Every `(distance, class, id)` triple sorted ascending, claimed greedily
/// while the sample is free and the class has room. Returns per-class
/// `(id, distance)` lists in claim order.
pub fn oracle_select(features: &Matrix, prototypes: &Matrix, n_m: usize) -> Vec<Vec<(usize, f64)>> {
    let k = prototypes.cols();
    let mut triples = Vec::new();
    for id in 0..features.rows() {
        for c in 0..k {
            let d = cosine_distance(features.row(id), &prototypes.column(c)).unwrap();
            triples.push((d, c, id));
        }
    }
    triples.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken = vec![false; features.rows()];
    let mut out = vec![Vec::new(); k];
    for (d, c, id) in triples {
        if !taken[id] && out[c].len() < n_m {
            taken[id] = true;
            out[c].push((id, d));
        }
    }
    out
}

pub fn as_lists(set: &IntermediateSet) -> Vec<Vec<(usize, f64)>> {
    (0..set.class_count())
        .map(|c| set.class(c).iter().map(|s| (s.id, s.distance)).collect())
        .collect()
}

/// Full sort of the bank by `(distance, id)`, own row skipped, first `r`
/// scores averaged.
pub fn oracle_soft_vote(bank: &Matrix, scores: &Matrix, query: &[f64], r: usize, exclude: Option<usize>) -> Vec<f64> {
    let mut all: Vec<(f64, usize)> = (0..bank.rows())
        .filter(|&i| Some(i) != exclude)
        .map(|i| (cosine_distance(query, bank.row(i)).unwrap(), i))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut q = vec![0.0; scores.cols()];
    for &(_, i) in &all[..r] {
        for (j, v) in q.iter_mut().enumerate() {
            *v += scores.get(i, j);
        }
    }
    q.iter().map(|v| v / r as f64).collect()
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

/// Random row-stochastic matrix.
pub fn distributions(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    gaussian(rng, rows, cols).scale(2.0).softmax_rows()
}

/// Random selection instance: a small model, a target view that may repeat
/// rows (exact ties between ids), and a classifier that may repeat a
/// prototype column (exact ties between classes).
pub struct SelectionCase {
    pub model: ModelBundle,
    pub target: TargetView,
    pub n_m: usize,
}

pub fn selection_case(seed: u64) -> SelectionCase {
    let mut rng = rng(seed);
    let k = rng.random_range(2..=5);
    let arch = ArchSpec {
        input_dim: 2,
        encoder_hidden: vec![8],
        feature_dim: rng.random_range(2..=6),
        class_count: k,
        projector_hidden: 4,
        projector_out: 4,
    };
    let mut model = ModelBundle::init(arch, seed).unwrap();
    if rng.random_bool(0.4) {
        let key = ParamKey::weight(Component::Classifier, 0);
        let w = model.param_mut(&key).unwrap();
        let (src, dst) = (rng.random_range(0..k), rng.random_range(0..k));
        for r in 0..w.rows() {
            let v = w.get(r, src);
            w.set(r, dst, v);
        }
    }
    let n = rng.random_range(1..=200);
    let mut x = gaussian(&mut rng, n, 2);
    if rng.random_bool(0.5) {
        for _ in 0..n / 4 {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            let row = x.row(a).to_vec();
            x.row_mut(b).copy_from_slice(&row);
        }
    }
    SelectionCase {
        model,
        target: TargetView::new(x),
        n_m: rng.random_range(1..=10),
    }
}

/// `omega^k theta0 + (1 - omega^k) theta` elementwise.
pub fn ema_closed_form(theta0: &Matrix, theta: &Matrix, omega: f64, k: i32) -> Matrix {
    let w = omega.powi(k);
    theta0.zip_map(theta, "ema", |a, b| w * a + (1.0 - w) * b).unwrap()
}
