//! The model family `f = h(g(x))`, the projection head, and the momentum
//! copy of the encoder.
//!
//! All parameters live in one ordered map keyed by [`ParamKey`]. Forward
//! passes come in two flavours: traced ones that record on a [`Tape`]
//! (the main encoder, classifier and projector register as trainable
//! leaves; the momentum encoder is always a constant), and plain ones used
//! for evaluation, banks and selection.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub class_count: usize,
    pub projector_hidden: usize,
    pub projector_out: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            input_dim: 2,
            encoder_hidden: vec![64],
            feature_dim: 16,
            class_count: 2,
            projector_hidden: 16,
            projector_out: 16,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("input_dim", self.input_dim),
            ("feature_dim", self.feature_dim),
            ("class_count", self.class_count),
            ("projector_hidden", self.projector_hidden),
            ("projector_out", self.projector_out),
        ];
        for (field, w) in widths {
            if w == 0 {
                return Err(Error::config(field, "width must be >= 1"));
            }
        }
        if self.encoder_hidden.contains(&0) {
            return Err(Error::config("encoder_hidden", "width must be >= 1"));
        }
        Ok(())
    }

    /// Layer widths of the encoder, input first.
    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.encoder_hidden);
        dims.push(self.feature_dim);
        dims
    }

    pub fn projector_dims(&self) -> [usize; 3] {
        [self.feature_dim, self.projector_hidden, self.projector_out]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Classifier,
    Projector,
    Momentum,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Classifier => "classifier",
            Component::Projector => "projector",
            Component::Momentum => "momentum_encoder",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "encoder" => Component::Encoder,
            "classifier" => Component::Classifier,
            "projector" => Component::Projector,
            "momentum_encoder" => Component::Momentum,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Weight,
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub component: Component,
    pub layer: usize,
    pub slot: Slot,
}

impl ParamKey {
    pub fn weight(component: Component, layer: usize) -> Self {
        ParamKey {
            component,
            layer,
            slot: Slot::Weight,
        }
    }

    pub fn bias(component: Component, layer: usize) -> Self {
        ParamKey {
            component,
            layer,
            slot: Slot::Bias,
        }
    }

    /// Layer name used in checkpoints, e.g. `layer0.weight`.
    pub fn layer_name(&self) -> String {
        let slot = match self.slot {
            Slot::Weight => "weight",
            Slot::Bias => "bias",
        };
        format!("layer{}.{slot}", self.layer)
    }

    fn parse(component: Component, layer_name: &str) -> Option<Self> {
        let rest = layer_name.strip_prefix("layer")?;
        let (idx, slot) = rest.split_once('.')?;
        let slot = match slot {
            "weight" => Slot::Weight,
            "bias" => Slot::Bias,
            _ => return None,
        };
        Some(ParamKey {
            component,
            layer: idx.parse().ok()?,
            slot,
        })
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.component.name(), self.layer_name())
    }
}

pub type ParamStore = BTreeMap<ParamKey, Matrix>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderPath {
    Main,
    Momentum,
}

impl EncoderPath {
    fn component(self) -> Component {
        match self {
            EncoderPath::Main => Component::Encoder,
            EncoderPath::Momentum => Component::Momentum,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub encoder: f64,
    pub classifier: f64,
    pub projector: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    arch: ArchSpec,
    seed: u64,
    params: ParamStore,
}

fn uniform_fan_in(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

fn init_mlp(params: &mut ParamStore, component: Component, dims: &[usize], rng: &mut impl Rng) {
    for (layer, w) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        params.insert(ParamKey::weight(component, layer), uniform_fan_in(rng, fan_in, fan_out, fan_in));
        params.insert(ParamKey::bias(component, layer), uniform_fan_in(rng, 1, fan_out, fan_in));
    }
}

impl ModelBundle {
    /// Fresh model: weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// momentum encoder an exact copy of the encoder.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, streams::MODEL_INIT);
        let mut params = ParamStore::new();
        init_mlp(&mut params, Component::Encoder, &arch.encoder_dims(), &mut rng);
        params.insert(
            ParamKey::weight(Component::Classifier, 0),
            uniform_fan_in(&mut rng, arch.feature_dim, arch.class_count, arch.feature_dim),
        );
        let mut bundle = ModelBundle { arch, seed, params };
        bundle.reinit_projector(seed);
        bundle.sync_momentum();
        Ok(bundle)
    }

    pub fn reinit_projector(&mut self, seed: u64) {
        let mut rng = rng::stream(seed, streams::PROJECTOR_INIT);
        self.params.retain(|k, _| k.component != Component::Projector);
        let dims = self.arch.projector_dims();
        init_mlp(&mut self.params, Component::Projector, &dims, &mut rng);
    }

    /// Copies the encoder into the momentum encoder.
    pub fn sync_momentum(&mut self) {
        self.params.retain(|k, _| k.component != Component::Momentum);
        let copies: Vec<_> = self
            .params
            .iter()
            .filter(|(k, _)| k.component == Component::Encoder)
            .map(|(k, v)| {
                (
                    ParamKey {
                        component: Component::Momentum,
                        ..*k
                    },
                    v.clone(),
                )
            })
            .collect();
        self.params.extend(copies);
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn param(&self, key: &ParamKey) -> Option<&Matrix> {
        self.params.get(key)
    }

    pub fn param_mut(&mut self, key: &ParamKey) -> Option<&mut Matrix> {
        self.params.get_mut(key)
    }

    /// Parameters of one component, in key order.
    pub fn component(&self, component: Component) -> impl Iterator<Item = (&ParamKey, &Matrix)> {
        self.params.iter().filter(move |(k, _)| k.component == component)
    }

    /// Parameters that receive gradients (everything except the momentum encoder).
    pub fn trainable_params(&self) -> ParamStore {
        self.params
            .iter()
            .filter(|(k, _)| k.component != Component::Momentum)
            .map(|(k, v)| (*k, v.clone()))
            .collect()
    }

    /// Replaces the values of the given parameters; keys and shapes must exist.
    pub fn set_params(&mut self, values: &ParamStore) -> Result<()> {
        for (k, v) in values {
            let slot = self
                .params
                .get_mut(k)
                .ok_or_else(|| Error::Contract(format!("unknown parameter {k}")))?;
            if slot.shape() != v.shape() {
                return Err(Error::shape("set_params", slot.shape(), v.shape()));
            }
            *slot = v.clone();
        }
        Ok(())
    }

    pub fn with_params(&self, values: &ParamStore) -> Result<Self> {
        let mut out = self.clone();
        out.set_params(values)?;
        Ok(out)
    }

    /// Column `k` is the class-`k` prototype.
    pub fn classifier_weights(&self) -> &Matrix {
        &self.params[&ParamKey::weight(Component::Classifier, 0)]
    }

    fn leaf(&self, tape: &mut Tape<ParamKey>, key: ParamKey) -> Var {
        let value = &self.params[&key];
        if key.component == Component::Momentum {
            tape.constant(value.clone())
        } else {
            tape.param(key, value)
        }
    }

    fn check_input(&self, op: &'static str, got: (usize, usize), want_cols: usize) -> Result<()> {
        if got.1 != want_cols {
            return Err(Error::shape(op, got, (got.0, want_cols)));
        }
        Ok(())
    }

    fn mlp_traced(&self, tape: &mut Tape<ParamKey>, component: Component, layers: usize, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in 0..layers {
            let w = self.leaf(tape, ParamKey::weight(component, layer));
            let b = self.leaf(tape, ParamKey::bias(component, layer));
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if layer + 1 < layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn mlp_plain(&self, component: Component, layers: usize, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for layer in 0..layers {
            h = h
                .matmul(&self.params[&ParamKey::weight(component, layer)])?
                .add_row(&self.params[&ParamKey::bias(component, layer)])?;
            if layer + 1 < layers {
                h = h.relu();
            }
        }
        Ok(h)
    }

    fn encoder_layers(&self) -> usize {
        self.arch.encoder_hidden.len() + 1
    }

    /// `g(x)` on the tape. The momentum path is recorded as constants.
    pub fn encode(&self, tape: &mut Tape<ParamKey>, x: Var, path: EncoderPath) -> Result<Var> {
        self.check_input("encode", tape.value(x).shape(), self.arch.input_dim)?;
        self.mlp_traced(tape, path.component(), self.encoder_layers(), x)
    }

    /// Bias-free linear classifier: logits = `z W`.
    pub fn classify(&self, tape: &mut Tape<ParamKey>, z: Var) -> Result<Var> {
        self.check_input("classify", tape.value(z).shape(), self.arch.feature_dim)?;
        let w = self.leaf(tape, ParamKey::weight(Component::Classifier, 0));
        tape.matmul(z, w)
    }

    pub fn project(&self, tape: &mut Tape<ParamKey>, z: Var) -> Result<Var> {
        self.check_input("project", tape.value(z).shape(), self.arch.feature_dim)?;
        self.mlp_traced(tape, Component::Projector, 2, z)
    }

    pub fn encode_plain(&self, x: &Matrix, path: EncoderPath) -> Result<Matrix> {
        self.check_input("encode", x.shape(), self.arch.input_dim)?;
        self.mlp_plain(path.component(), self.encoder_layers(), x)
    }

    pub fn classify_plain(&self, z: &Matrix) -> Result<Matrix> {
        self.check_input("classify", z.shape(), self.arch.feature_dim)?;
        z.matmul(self.classifier_weights())
    }

    pub fn project_plain(&self, z: &Matrix) -> Result<Matrix> {
        self.check_input("project", z.shape(), self.arch.feature_dim)?;
        self.mlp_plain(Component::Projector, 2, z)
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.classify_plain(&self.encode_plain(x, EncoderPath::Main)?)
    }

    pub fn predict_proba(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.logits(x)?.softmax_rows())
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }
}

/// Plain SGD, `theta <- theta - lr * grad`, with the learning rate chosen by
/// component. Gradients for the momentum encoder are a contract violation.
pub fn sgd_step(bundle: &mut ModelBundle, grads: &Gradients<ParamKey>, lrs: &LearningRates) -> Result<()> {
    if let Some(k) = grads.keys().find(|k| k.component == Component::Momentum) {
        return Err(Error::Contract(format!(
            "gradient for momentum encoder parameter {k}; it is updated by moving average only"
        )));
    }
    for (key, g) in grads {
        let lr = match key.component {
            Component::Encoder => lrs.encoder,
            Component::Classifier => lrs.classifier,
            Component::Projector => lrs.projector,
            Component::Momentum => unreachable!(),
        };
        let theta = bundle
            .params
            .get_mut(key)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {key}")))?;
        if theta.shape() != g.shape() {
            return Err(Error::shape("sgd_step", theta.shape(), g.shape()));
        }
        if lr == 0.0 {
            continue;
        }
        for (t, gv) in theta.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *t -= lr * gv;
        }
    }
    Ok(())
}

// ---- checkpoint ----

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    arch: ArchSpec,
    seed: u64,
    components: BTreeMap<String, BTreeMap<String, LayerRecord>>,
}

impl ModelBundle {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        let mut components: BTreeMap<String, BTreeMap<String, LayerRecord>> = BTreeMap::new();
        for (k, v) in &self.params {
            components.entry(k.component.name().to_string()).or_default().insert(
                k.layer_name(),
                LayerRecord {
                    shape: [v.rows(), v.cols()],
                    values: v.as_slice().to_vec(),
                },
            );
        }
        let file = CheckpointFile {
            arch: self.arch.clone(),
            seed: self.seed,
            components,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_checkpoint_json(json: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(json)?;
        let reference = ModelBundle::init(file.arch.clone(), file.seed)?;
        let mut params = ParamStore::new();
        for (cname, layers) in file.components {
            let component = Component::from_name(&cname)
                .ok_or_else(|| Error::Contract(format!("unknown component `{cname}` in checkpoint")))?;
            for (lname, rec) in layers {
                let key = ParamKey::parse(component, &lname)
                    .ok_or_else(|| Error::Contract(format!("bad layer name `{lname}` in {cname}")))?;
                let m = Matrix::new(rec.shape[0], rec.shape[1], rec.values)?;
                let want = reference
                    .param(&key)
                    .ok_or_else(|| Error::Contract(format!("unexpected parameter {key} in checkpoint")))?;
                if want.shape() != m.shape() {
                    return Err(Error::shape("checkpoint", want.shape(), m.shape()));
                }
                params.insert(key, m);
            }
        }
        if let Some(missing) = reference.params.keys().find(|k| !params.contains_key(k)) {
            return Err(Error::Contract(format!("checkpoint lacks parameter {missing}")));
        }
        Ok(ModelBundle {
            arch: file.arch,
            seed: file.seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_json(&fs::read_to_string(path)?)
    }
}
