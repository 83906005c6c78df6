//! Inter-domain gap transition: memory banks, neighbour soft voting, mixup
//! of intermediate with target samples, and the KL gap loss.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::autodiff::{cosine_distance, Matrix, Tape, Var};
use crate::data::TargetView;
use crate::error::{Error, Result};
use crate::network::{EncoderPath, ModelBundle, ParamKey};
use crate::par::{self, Exec};

/// Per-target-sample history: encoder features and softmax scores.
/// Row `i` belongs to target id `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBanks {
    features: Matrix,
    scores: Matrix,
}

impl MemoryBanks {
    pub fn new(features: Matrix, scores: Matrix) -> Result<Self> {
        if features.rows() != scores.rows() {
            return Err(Error::shape("memory_banks", features.shape(), scores.shape()));
        }
        Ok(MemoryBanks { features, scores })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    /// Replaces rows `ids` wholesale.
    pub fn update(&mut self, ids: &[usize], z: &Matrix, p: &Matrix) -> Result<()> {
        if z.rows() != ids.len() || z.cols() != self.features.cols() {
            return Err(Error::shape("update_banks", z.shape(), (ids.len(), self.features.cols())));
        }
        if p.rows() != ids.len() || p.cols() != self.scores.cols() {
            return Err(Error::shape("update_banks", p.shape(), (ids.len(), self.scores.cols())));
        }
        let mut seen = vec![false; self.len()];
        for &id in ids {
            if id >= self.len() {
                return Err(Error::Contract(format!("bank id {id} out of range 0..{}", self.len())));
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::Contract(format!("duplicate id {id} in one bank update")));
            }
        }
        for (r, &id) in ids.iter().enumerate() {
            self.features.row_mut(id).copy_from_slice(z.row(r));
            self.scores.row_mut(id).copy_from_slice(p.row(r));
        }
        Ok(())
    }

    /// Ids of the `r` rows nearest to `query` by cosine distance, nearest
    /// first, ties broken by lower id.
    pub fn nearest(&self, query: &[f64], r: usize, exclude: Option<usize>) -> Result<Vec<usize>> {
        let available = self.len() - usize::from(exclude.is_some_and(|e| e < self.len()));
        if r == 0 || r > available {
            return Err(Error::config("r", format!("{r} neighbours requested, {available} rows available")));
        }
        let mut scored = Vec::with_capacity(available);
        for (id, row) in self.features.row_iter().enumerate() {
            if Some(id) == exclude {
                continue;
            }
            scored.push((cosine_distance(query, row)?, id));
        }
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if r < scored.len() {
            scored.select_nth_unstable_by(r - 1, by_distance);
            scored.truncate(r);
        }
        scored.sort_by(by_distance);
        Ok(scored.into_iter().map(|(_, id)| id).collect())
    }

    /// Mean stored score of the `r` nearest bank rows.
    pub fn soft_vote(&self, query: &[f64], r: usize, exclude: Option<usize>) -> Result<Vec<f64>> {
        let ids = self.nearest(query, r, exclude)?;
        let mut q = vec![0.0; self.scores.cols()];
        for id in &ids {
            q.iter_mut().zip(self.scores.row(*id)).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / ids.len() as f64;
        q.iter_mut().for_each(|v| *v *= inv);
        Ok(q)
    }

    /// Soft votes for each query row; `exclude[i]` is the bank id of query `i`.
    pub fn soft_vote_batch(
        &self,
        queries: &Matrix,
        r: usize,
        exclude: &[Option<usize>],
        exec: Exec,
    ) -> Result<Matrix> {
        if exclude.len() != queries.rows() {
            return Err(Error::Contract("one exclude entry per query required".into()));
        }
        let rows = par::map_range(exec, queries.rows(), |i| self.soft_vote(queries.row(i), r, exclude[i]));
        let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
        let k = self.scores.cols();
        Matrix::new(rows.len(), k, rows.concat())
    }
}

/// Fills both banks with one forward pass over the whole target set.
pub fn init_banks(bundle: &ModelBundle, target: &TargetView) -> Result<MemoryBanks> {
    let z = bundle.encode_plain(target.features(), EncoderPath::Main)?;
    let p = bundle.classify_plain(&z)?.softmax_rows();
    MemoryBanks::new(z, p)
}

/// Mixed inputs and soft labels; row `i` was mixed with `lambdas[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub inputs: Matrix,
    pub soft_labels: Matrix,
    pub lambdas: Vec<f64>,
}

/// Row-wise `lambda * (x_m, q_m) + (1 - lambda) * (x_t, q_t)`.
pub fn mixup(x_m: &Matrix, q_m: &Matrix, x_t: &Matrix, q_t: &Matrix, lambdas: &[f64]) -> Result<MixedBatch> {
    if x_m.shape() != x_t.shape() {
        return Err(Error::shape("mixup", x_m.shape(), x_t.shape()));
    }
    if q_m.shape() != q_t.shape() || q_m.rows() != x_m.rows() {
        return Err(Error::shape("mixup", q_m.shape(), q_t.shape()));
    }
    if lambdas.len() != x_m.rows() {
        return Err(Error::Contract(format!("{} lambdas for {} rows", lambdas.len(), x_m.rows())));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Contract(format!("mixup lambda {bad} outside [0, 1]")));
    }
    let mix = |a: &Matrix, b: &Matrix| {
        let mut out = a.clone();
        for (r, &lam) in lambdas.iter().enumerate() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.row(r)) {
                *o = lam * *o + (1.0 - lam) * bv;
            }
        }
        out
    };
    Ok(MixedBatch {
        inputs: mix(x_m, x_t),
        soft_labels: mix(q_m, q_t),
        lambdas: lambdas.to_vec(),
    })
}

/// One `Beta(beta, beta)` draw per mixed pair.
pub fn sample_lambdas(rng: &mut impl Rng, beta: f64, n: usize) -> Result<Vec<f64>> {
    let dist = Beta::new(beta, beta).map_err(|e| Error::config("beta", e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Batch mean of `KL(q || softmax(f(x_hat)))`, with `0 log 0 = 0`. The
/// soft labels are constants.
pub fn gap_loss(bundle: &ModelBundle, tape: &mut Tape<ParamKey>, mixed: &MixedBatch) -> Result<Var> {
    let n = mixed.inputs.rows();
    if n == 0 {
        return Err(Error::Contract("gap loss of an empty batch".into()));
    }
    let x = tape.constant(mixed.inputs.clone());
    let z = bundle.encode(tape, x, EncoderPath::Main)?;
    let logits = bundle.classify(tape, z)?;
    kl_to_softmax(tape, &mixed.soft_labels, logits)
}

/// `mean_i sum_k q_ik (log q_ik - log_softmax(logits)_ik)`.
pub fn kl_to_softmax<K: Ord + Clone>(tape: &mut Tape<K>, q: &Matrix, logits: Var) -> Result<Var> {
    let n = q.rows() as f64;
    let neg_entropy: f64 = q
        .as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum();
    let log_p = tape.log_softmax_rows(logits);
    let qv = tape.constant(q.clone());
    let cross = tape.mul(qv, log_p)?;
    let cross = tape.sum(cross);
    let neg_cross_mean = tape.scale(cross, -1.0 / n);
    Ok(tape.add_scalar(neg_cross_mean, neg_entropy / n))
}
