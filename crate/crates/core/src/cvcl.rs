//! Cross-view consistency: two random views of each target sample,
//! an instance-level normalized-MSE term through the projector, a
//! class-level cross-correlation term, and the moving-average update of the
//! momentum encoder.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::network::{Component, EncoderPath, ModelBundle, ParamKey};

/// Random view: `scale * rotate(x) + noise`. Rotation applies to 2-D inputs only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugSpec {
    pub jitter_sigma: f64,
    /// scale factor drawn from `[1 - scale_range, 1 + scale_range]`
    pub scale_range: f64,
    pub rotation_max_deg: f64,
}

impl Default for AugSpec {
    fn default() -> Self {
        AugSpec {
            jitter_sigma: 0.05,
            scale_range: 0.1,
            rotation_max_deg: 10.0,
        }
    }
}

impl AugSpec {
    pub fn identity() -> Self {
        AugSpec {
            jitter_sigma: 0.0,
            scale_range: 0.0,
            rotation_max_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::config("jitter_sigma", "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.scale_range) {
            return Err(Error::config("scale_range", "must lie in [0, 1)"));
        }
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg.is_finite()) {
            return Err(Error::config("rotation_max_deg", "must be finite and >= 0"));
        }
        Ok(())
    }

    fn view(&self, x: &Matrix, rng: &mut impl Rng, noise: &Normal<f64>) -> Matrix {
        let mut out = x.clone();
        let rotate = x.cols() == 2 && self.rotation_max_deg > 0.0;
        for r in 0..out.rows() {
            let scale = if self.scale_range > 0.0 {
                rng.random_range(1.0 - self.scale_range..=1.0 + self.scale_range)
            } else {
                1.0
            };
            let row = out.row_mut(r);
            if rotate {
                let angle = rng
                    .random_range(-self.rotation_max_deg..=self.rotation_max_deg)
                    .to_radians();
                let (s, c) = angle.sin_cos();
                let (a, b) = (row[0], row[1]);
                row[0] = c * a - s * b;
                row[1] = s * a + c * b;
            }
            for v in row.iter_mut() {
                *v *= scale;
                if self.jitter_sigma > 0.0 {
                    *v += noise.sample(rng);
                }
            }
        }
        out
    }
}

/// Two independent views of every row of `x`. View A is drawn in full
/// before view B.
pub fn augment_views(x: &Matrix, spec: &AugSpec, rng: &mut impl Rng) -> Result<(Matrix, Matrix)> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.jitter_sigma).map_err(|e| Error::config("jitter_sigma", e.to_string()))?;
    let a = spec.view(x, rng, &noise);
    let b = spec.view(x, rng, &noise);
    Ok((a, b))
}

/// Batch mean of `||xi(a) - xi(b)||^2`, with `xi` row-wise L2 normalization.
pub fn nmse<K: Ord + Clone>(tape: &mut Tape<K>, a: Var, b: Var) -> Result<Var> {
    let n = tape.value(a).rows().max(1) as f64;
    let na = tape.l2_normalize_rows(a)?;
    let nb = tape.l2_normalize_rows(b)?;
    let diff = tape.sub(na, nb)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / n))
}

/// `D(p(g(x_a)), p(g'(x_b))) + D(p(g'(x_a)), p(g(x_b)))`. Momentum features
/// enter as constants; the projector is trained through both terms.
pub fn sample_consistency_loss(
    bundle: &ModelBundle,
    tape: &mut Tape<ParamKey>,
    x_a: &Matrix,
    x_b: &Matrix,
) -> Result<Var> {
    if x_a.shape() != x_b.shape() {
        return Err(Error::shape("sample_consistency_loss", x_a.shape(), x_b.shape()));
    }
    let xa = tape.constant(x_a.clone());
    let xb = tape.constant(x_b.clone());
    let za = bundle.encode(tape, xa, EncoderPath::Main)?;
    let zb = bundle.encode(tape, xb, EncoderPath::Main)?;
    let za_m = tape.constant(bundle.encode_plain(x_a, EncoderPath::Momentum)?);
    let zb_m = tape.constant(bundle.encode_plain(x_b, EncoderPath::Momentum)?);

    let pa = bundle.project(tape, za)?;
    let pb_m = bundle.project(tape, zb_m)?;
    let pa_m = bundle.project(tape, za_m)?;
    let pb = bundle.project(tape, zb)?;
    let first = nmse(tape, pa, pb_m)?;
    let second = nmse(tape, pa_m, pb)?;
    tape.add(first, second)
}

/// `[L1(xi(M), I) + L1(xi(M^T), I)] / 2K` with `M = P_a^T P_b`, `xi` the
/// row-wise L2 normalization and `L1` the summed absolute difference.
pub fn class_consistency_loss<K: Ord + Clone>(tape: &mut Tape<K>, p_a: Var, p_b: Var) -> Result<Var> {
    let k = tape.value(p_a).cols();
    if tape.value(p_b).shape() != tape.value(p_a).shape() {
        return Err(Error::shape("class_consistency_loss", tape.value(p_a).shape(), tape.value(p_b).shape()));
    }
    let pa_t = tape.transpose(p_a);
    let m = tape.matmul(pa_t, p_b)?;
    let m_t = tape.transpose(m);
    let eye = tape.constant(Matrix::identity(k));
    let mut total = None;
    for side in [m, m_t] {
        let normed = tape.l2_normalize_rows(side)?;
        let diff = tape.sub(normed, eye)?;
        let abs = tape.abs(diff);
        let l1 = tape.sum(abs);
        total = Some(match total {
            None => l1,
            Some(t) => tape.add(t, l1)?,
        });
    }
    Ok(tape.scale(total.expect("two terms"), 1.0 / (2.0 * k as f64)))
}

/// Class-level loss of two fixed prediction matrices.
pub fn class_consistency_value(p_a: &Matrix, p_b: &Matrix) -> Result<f64> {
    let mut tape: Tape<()> = Tape::new();
    let a = tape.constant(p_a.clone());
    let b = tape.constant(p_b.clone());
    let v = class_consistency_loss(&mut tape, a, b)?;
    Ok(tape.scalar(v))
}

/// Handles to the pieces of the consistency objective on one tape.
#[derive(Clone, Copy, Debug)]
pub struct ConsistencyTerms {
    pub total: Var,
    pub sample: Var,
    pub class: Var,
}

/// `softmax(h(g'(x)))`: momentum-branch predictions, used as a fixed target.
pub fn momentum_predictions(bundle: &ModelBundle, x: &Matrix) -> Result<Matrix> {
    let z = bundle.encode_plain(x, EncoderPath::Momentum)?;
    Ok(bundle.classify_plain(&z)?.softmax_rows())
}

/// `L_sam + epsilon * L_cls`, with `P_a = softmax(h(g(x_a)))` traced and
/// `p_b` (see [`momentum_predictions`]) held constant.
pub fn consistency_loss(
    bundle: &ModelBundle,
    tape: &mut Tape<ParamKey>,
    x_a: &Matrix,
    x_b: &Matrix,
    p_b: &Matrix,
    epsilon: f64,
) -> Result<ConsistencyTerms> {
    let sample = sample_consistency_loss(bundle, tape, x_a, x_b)?;
    let xa = tape.constant(x_a.clone());
    let za = bundle.encode(tape, xa, EncoderPath::Main)?;
    let logits_a = bundle.classify(tape, za)?;
    let p_a = tape.softmax_rows(logits_a);
    let p_b = tape.constant(p_b.clone());
    let class = class_consistency_loss(tape, p_a, p_b)?;
    let weighted = tape.scale(class, epsilon);
    let total = tape.add(sample, weighted)?;
    Ok(ConsistencyTerms { total, sample, class })
}

/// `theta' <- omega * theta' + (1 - omega) * theta` for every encoder parameter.
pub fn momentum_update(bundle: &mut ModelBundle, omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::config("omega", format!("{omega} is outside [0, 1]")));
    }
    let encoder: Vec<(ParamKey, Matrix)> = bundle
        .component(Component::Encoder)
        .map(|(k, v)| (*k, v.clone()))
        .collect();
    for (key, theta) in encoder {
        let mkey = ParamKey {
            component: Component::Momentum,
            ..key
        };
        let shadow = bundle
            .param_mut(&mkey)
            .ok_or_else(|| Error::Contract(format!("momentum encoder lacks {mkey}")))?;
        for (s, t) in shadow.as_mut_slice().iter_mut().zip(theta.as_slice()) {
            *s = omega * *s + (1.0 - omega) * t;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ArchSpec;

    #[test]
    fn identity_augmentation_returns_input() {
        let x = Matrix::from_fn(5, 2, |i, j| i as f64 - j as f64 * 0.5);
        let mut rng = crate::rng::stream(1, 2);
        let (a, b) = augment_views(&x, &AugSpec::identity(), &mut rng).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn augmentation_is_reproducible_and_views_differ() {
        let x = Matrix::from_fn(4, 2, |i, j| (i + j) as f64);
        let spec = AugSpec::default();
        let v1 = augment_views(&x, &spec, &mut crate::rng::stream(3, 23)).unwrap();
        let v2 = augment_views(&x, &spec, &mut crate::rng::stream(3, 23)).unwrap();
        assert_eq!(v1, v2);
        assert_ne!(v1.0, v1.1);
    }

    #[test]
    fn bad_aug_spec_rejected() {
        let spec = AugSpec {
            scale_range: 1.0,
            ..AugSpec::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config { field: "scale_range", .. })));
    }

    #[test]
    fn nmse_geometric_identity() {
        let mut tape: Tape<()> = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[[1.0, 0.0]]).unwrap());
        let b = tape.constant(Matrix::from_rows(&[[0.0, 5.0]]).unwrap());
        let v = nmse(&mut tape, a, b).unwrap();
        assert!((tape.scalar(v) - 2.0).abs() < 1e-15);

        let theta: f64 = 0.7;
        let mut tape: Tape<()> = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[[1.0, 0.0]]).unwrap());
        let b = tape.constant(Matrix::from_rows(&[[theta.cos(), theta.sin()]]).unwrap());
        let v = nmse(&mut tape, a, b).unwrap();
        assert!((tape.scalar(v) - (2.0 - 2.0 * theta.cos())).abs() < 1e-15);
    }

    #[test]
    fn class_loss_all_ones_matrix_is_one() {
        // M = P_a^T P_b = [[1,1],[1,1]]
        let pa = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let pb = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let v = class_consistency_value(&pa, &pb).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn class_loss_zero_on_balanced_one_hot() {
        let p = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]).unwrap();
        let p2 = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert!(class_consistency_value(&p2, &p2).unwrap().abs() < 1e-15);
        // unequal counts still give a diagonal M
        assert!(class_consistency_value(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn class_loss_positive_for_permutation() {
        let pa = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let pb = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert!(class_consistency_value(&pa, &pb).unwrap() > 0.5);
    }

    #[test]
    fn class_loss_zero_row_is_degenerate() {
        let pa = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        assert!(matches!(class_consistency_value(&pa, &pa), Err(Error::DegenerateRow { .. })));
    }

    #[test]
    fn momentum_fixed_point_and_copy() {
        let mut b = ModelBundle::init(ArchSpec::default(), 0).unwrap();
        let key = ParamKey::weight(Component::Encoder, 0);
        let shifted = b.param(&key).unwrap().map(|v| v + 1.0);
        b.set_params(&crate::network::ParamStore::from([(key, shifted.clone())])).unwrap();
        let before = b.clone();
        momentum_update(&mut b, 1.0).unwrap();
        assert_eq!(b, before);
        momentum_update(&mut b, 0.0).unwrap();
        let mkey = ParamKey::weight(Component::Momentum, 0);
        assert_eq!(b.param(&mkey).unwrap(), &shifted);
        assert!(matches!(momentum_update(&mut b, 1.01), Err(Error::Config { field: "omega", .. })));
    }

    #[test]
    fn sample_loss_zero_for_identical_views() {
        let b = ModelBundle::init(ArchSpec::default(), 5).unwrap();
        let x = Matrix::from_fn(6, 2, |i, j| (i as f64 * 0.4 - 1.0) * (j as f64 + 1.0));
        let mut tape = Tape::new();
        let v = sample_consistency_loss(&b, &mut tape, &x, &x).unwrap();
        assert!(tape.scalar(v).abs() < 1e-10);
    }

    #[test]
    fn consistency_is_sum_of_parts() {
        let b = ModelBundle::init(ArchSpec::default(), 5).unwrap();
        let x = Matrix::from_fn(6, 2, |i, j| (i as f64 * 0.4 - 1.0) * (j as f64 + 1.0));
        let (xa, xb) = augment_views(&x, &AugSpec::default(), &mut crate::rng::stream(0, 1)).unwrap();
        let p_b = momentum_predictions(&b, &xb).unwrap();
        let mut tape = Tape::new();
        let terms = consistency_loss(&b, &mut tape, &xa, &xb, &p_b, 0.01).unwrap();
        let manual = tape.scalar(terms.sample) + 0.01 * tape.scalar(terms.class);
        assert!((tape.scalar(terms.total) - manual).abs() < 1e-12);

        let mut tape = Tape::new();
        let terms0 = consistency_loss(&b, &mut tape, &xa, &xb, &p_b, 0.0).unwrap();
        let mut tape2 = Tape::new();
        let sam = sample_consistency_loss(&b, &mut tape2, &xa, &xb).unwrap();
        assert_eq!(tape.scalar(terms0.total), tape2.scalar(sam));
    }
}
