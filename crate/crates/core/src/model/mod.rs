//! Per-view autoencoders, the shared classifier and the view quality discriminator.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{fuse, fuse_baseline};
use crate::nd::{Matrix, RngStream, Tape, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    None,
    Sigmoid,
    Softmax,
}

/// Layer widths from input to output. Hidden layers use relu.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, output: OutputActivation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::contract("an MLP needs at least one layer"));
        }
        if widths.contains(&0) {
            return Err(Error::contract(format!(
                "MLP widths must be positive: {widths:?}"
            )));
        }
        Ok(MlpSpec { widths, output })
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_in x fan_out`
    pub weight: Matrix,
    /// `1 x fan_out`
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: MlpSpec, rng: &mut RngStream) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = glorot_bound(fan_in, fan_out);
                Linear {
                    weight: rng.uniform_matrix(fan_in, fan_out, -bound, bound),
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        Mlp { spec, layers }
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Linear>) -> Result<Self> {
        if layers.len() != spec.widths.len() - 1 {
            return Err(Error::contract(format!(
                "{} layers for widths {:?}",
                layers.len(),
                spec.widths
            )));
        }
        for (l, (layer, w)) in layers.iter().zip(spec.widths.windows(2)).enumerate() {
            if layer.weight.shape() != (w[0], w[1]) || layer.bias.shape() != (1, w[1]) {
                return Err(Error::contract(format!(
                    "layer {l}: weight {:?} / bias {:?} do not match widths {w:?}",
                    layer.weight.shape(),
                    layer.bias.shape()
                )));
            }
        }
        Ok(Mlp { spec, layers })
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// How the fused embedding is formed from the per-view embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Discriminator scores as per-sample weights.
    Dynamic,
    /// Average over the available views only.
    MaskedAverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub view_dims: Vec<usize>,
    /// Encoder hidden widths; decoders mirror them.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub classes: usize,
    /// Defaults to `max(64, m * embed_dim / 4)`.
    pub disc_hidden: Option<usize>,
    pub fusion: Fusion,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(view_dims: Vec<usize>, classes: usize, seed: u64) -> Self {
        ModelConfig {
            view_dims,
            hidden: vec![512, 256],
            embed_dim: 128,
            classes,
            disc_hidden: None,
            fusion: Fusion::Dynamic,
            seed,
        }
    }

    pub fn disc_hidden_width(&self) -> usize {
        self.disc_hidden
            .unwrap_or_else(|| 64.max(self.view_dims.len() * self.embed_dim / 4))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder(usize),
    Decoder(usize),
    Classifier,
    Discriminator,
}

/// All trainable parameters of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct RankModel {
    pub config: ModelConfig,
    pub encoders: Vec<Mlp>,
    pub decoders: Vec<Mlp>,
    pub classifier: Mlp,
    pub discriminator: Mlp,
}

impl RankModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let m = config.view_dims.len();
        if m == 0 {
            return Err(Error::contract("model needs at least one view"));
        }
        let mut rng = RngStream::new(config.seed);
        let mut encoders = Vec::with_capacity(m);
        let mut decoders = Vec::with_capacity(m);
        for &d in &config.view_dims {
            let mut widths = vec![d];
            widths.extend(&config.hidden);
            widths.push(config.embed_dim);
            let enc = MlpSpec::new(widths.clone(), OutputActivation::None)?;
            widths.reverse();
            let dec = MlpSpec::new(widths, OutputActivation::None)?;
            encoders.push(Mlp::init(enc, &mut rng));
            decoders.push(Mlp::init(dec, &mut rng));
        }
        let classifier = Mlp::init(
            MlpSpec::new(
                vec![config.embed_dim, config.classes],
                OutputActivation::Sigmoid,
            )?,
            &mut rng,
        );
        let discriminator = Mlp::init(
            MlpSpec::new(
                vec![m * config.embed_dim, config.disc_hidden_width(), m],
                OutputActivation::Softmax,
            )?,
            &mut rng,
        );
        Ok(RankModel {
            config,
            encoders,
            decoders,
            classifier,
            discriminator,
        })
    }

    pub fn n_views(&self) -> usize {
        self.encoders.len()
    }

    fn parts(&self) -> Vec<(String, ParamGroup, &Mlp)> {
        let mut parts = Vec::new();
        for (v, e) in self.encoders.iter().enumerate() {
            parts.push((format!("enc{v}"), ParamGroup::Encoder(v), e));
        }
        for (v, d) in self.decoders.iter().enumerate() {
            parts.push((format!("dec{v}"), ParamGroup::Decoder(v), d));
        }
        parts.push(("cls".into(), ParamGroup::Classifier, &self.classifier));
        parts.push((
            "disc".into(),
            ParamGroup::Discriminator,
            &self.discriminator,
        ));
        parts
    }

    /// `(name, group)` for every parameter matrix, in [`params`](Self::params) order.
    pub fn param_info(&self) -> Vec<(String, ParamGroup)> {
        let mut out = Vec::new();
        for (prefix, group, mlp) in self.parts() {
            for l in 0..mlp.layers.len() {
                out.push((format!("{prefix}_w{l}"), group));
                out.push((format!("{prefix}_b{l}"), group));
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.parts()
            .into_iter()
            .flat_map(|(_, _, mlp)| mlp.layers.iter().flat_map(|l| [&l.weight, &l.bias]))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        let mlps = self
            .encoders
            .iter_mut()
            .chain(self.decoders.iter_mut())
            .chain(std::iter::once(&mut self.classifier))
            .chain(std::iter::once(&mut self.discriminator));
        for mlp in mlps {
            for l in mlp.layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    /// Registers every parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t> {
        let vars: Vec<Var<'t>> = self
            .params()
            .into_iter()
            .map(|p| tape.param(p.clone()))
            .collect();
        self.bind_vars(&vars).expect("one var per parameter")
    }

    /// Uses `vars` (in [`params`](Self::params) order) in place of the stored parameters.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> Result<BoundModel<'t>> {
        let expected = self.params();
        if vars.len() != expected.len() {
            return Err(Error::contract(format!(
                "{} vars for {} parameters",
                vars.len(),
                expected.len()
            )));
        }
        if let Some(k) = (0..vars.len()).find(|&k| vars[k].shape() != expected[k].shape()) {
            return Err(Error::contract(format!(
                "var {k} has shape {:?}, parameter has {:?}",
                vars[k].shape(),
                expected[k].shape()
            )));
        }
        let mut it = vars.iter().copied();
        let mut take = |mlp: &Mlp| BoundMlp {
            spec: mlp.spec.clone(),
            layers: mlp
                .layers
                .iter()
                .map(|_| (it.next().expect("counted"), it.next().expect("counted")))
                .collect(),
        };
        Ok(BoundModel {
            encoders: self.encoders.iter().map(&mut take).collect(),
            decoders: self.decoders.iter().map(&mut take).collect(),
            classifier: take(&self.classifier),
            discriminator: take(&self.discriminator),
            fusion: self.config.fusion,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BoundMlp<'t> {
    pub spec: MlpSpec,
    pub layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        if x.shape().1 != self.spec.input() {
            return Err(Error::Dimension {
                op: "mlp input",
                lhs: x.shape(),
                rhs: (self.spec.input(), self.spec.output_width()),
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add(b)?;
            if l < last {
                h = h.relu();
            }
        }
        Ok(match self.spec.output {
            OutputActivation::None => h,
            OutputActivation::Sigmoid => h.sigmoid(),
            OutputActivation::Softmax => h.softmax_rows(),
        })
    }

    fn vars(&self) -> impl Iterator<Item = Var<'t>> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// A [`RankModel`] whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel<'t> {
    pub encoders: Vec<BoundMlp<'t>>,
    pub decoders: Vec<BoundMlp<'t>>,
    pub classifier: BoundMlp<'t>,
    pub discriminator: BoundMlp<'t>,
    pub fusion: Fusion,
}

impl<'t> BoundModel<'t> {
    /// Parameter vars in [`RankModel::params`] order.
    pub fn param_vars(&self) -> Vec<Var<'t>> {
        self.encoders
            .iter()
            .chain(&self.decoders)
            .chain([&self.classifier, &self.discriminator])
            .flat_map(|m| m.vars().collect::<Vec<_>>())
            .collect()
    }

    fn view(&self, v: usize) -> Result<()> {
        if v >= self.encoders.len() {
            return Err(Error::contract(format!(
                "view {v} out of range for {} views",
                self.encoders.len()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, v: usize, x: Var<'t>) -> Result<Var<'t>> {
        self.view(v)?;
        self.encoders[v].forward(x)
    }

    pub fn decode(&self, v: usize, z: Var<'t>) -> Result<Var<'t>> {
        self.view(v)?;
        self.decoders[v].forward(z)
    }

    /// Quality scores `B`, one row-stochastic row per sample.
    pub fn discriminate(&self, embeddings: &[Var<'t>]) -> Result<Var<'t>> {
        if embeddings.len() != self.encoders.len() {
            return Err(Error::contract(format!(
                "discriminator expects {} embeddings, got {}",
                self.encoders.len(),
                embeddings.len()
            )));
        }
        self.discriminator.forward(Var::concat_cols(embeddings)?)
    }

    /// Label probabilities in `[EPS, 1 - EPS]`.
    pub fn classify(&self, z: Var<'t>) -> Result<Var<'t>> {
        self.classifier.forward(z)
    }

    /// Encodes every view, fuses the embeddings and classifies the result.
    ///
    /// Dynamic fusion feeds the discriminator detached embeddings and fuses
    /// with detached scores; masked averaging uses `view_mask` instead.
    pub fn forward(&self, views: &[Var<'t>], view_mask: &Matrix) -> Result<ForwardBundle<'t>> {
        self.forward_frozen(views, view_mask, None)
    }

    /// [`forward`](Self::forward) with the detached discriminator inputs and
    /// fusion scores replaced by fixed values.
    pub fn forward_frozen(
        &self,
        views: &[Var<'t>],
        view_mask: &Matrix,
        frozen: Option<&FrozenFusion>,
    ) -> Result<ForwardBundle<'t>> {
        if views.len() != self.encoders.len() {
            return Err(Error::contract(format!(
                "model has {} views, batch has {}",
                self.encoders.len(),
                views.len()
            )));
        }
        let embeddings = views
            .iter()
            .enumerate()
            .map(|(v, &x)| self.encode(v, x))
            .collect::<Result<Vec<_>>>()?;
        let (scores, fused) = match self.fusion {
            Fusion::Dynamic => {
                let tape = embeddings[0].tape();
                let disc_inputs: Vec<Var<'t>> = match frozen {
                    Some(f) => f
                        .disc_inputs
                        .iter()
                        .map(|z| tape.constant(z.clone()))
                        .collect(),
                    None => embeddings.iter().map(|z| z.detach()).collect(),
                };
                let b = self.discriminate(&disc_inputs)?;
                let weights = match frozen {
                    Some(f) => tape.constant(f.scores.clone()),
                    None => b,
                };
                (Some(b), fuse(&embeddings, weights)?)
            }
            Fusion::MaskedAverage => (None, fuse_baseline(&embeddings, view_mask)?),
        };
        let prediction = self.classify(fused)?;
        Ok(ForwardBundle {
            embeddings,
            scores,
            fused,
            prediction,
        })
    }
}

/// Values that a forward pass treats as constants under dynamic fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenFusion {
    pub disc_inputs: Vec<Matrix>,
    pub scores: Matrix,
}

impl ForwardBundle<'_> {
    /// Snapshot of the detached quantities of this pass.
    pub fn frozen_fusion(&self) -> Option<FrozenFusion> {
        let scores = self.scores?;
        Some(FrozenFusion {
            disc_inputs: self
                .embeddings
                .iter()
                .map(|z| (*z.value()).clone())
                .collect(),
            scores: (*scores.value()).clone(),
        })
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardBundle<'t> {
    pub embeddings: Vec<Var<'t>>,
    /// Discriminator scores, present under dynamic fusion.
    pub scores: Option<Var<'t>>,
    pub fused: Var<'t>,
    pub prediction: Var<'t>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::grad_check;

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::new(vec![5, 3], 4, 7);
        cfg.hidden = vec![6];
        cfg.embed_dim = 4;
        cfg
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = RankModel::init(tiny()).unwrap();
        let b = RankModel::init(tiny()).unwrap();
        assert_eq!(a, b);
        for (name, _) in a.param_info().iter().filter(|(n, _)| n.contains("_b")) {
            let idx = a.param_info().iter().position(|(n, _)| n == name).unwrap();
            assert!(a.params()[idx].data().iter().all(|&x| x == 0.0), "{name}");
        }
    }

    #[test]
    fn weights_respect_glorot_bound() {
        let model = RankModel::init(tiny()).unwrap();
        for mlp in model.encoders.iter().chain(&model.decoders) {
            for l in &mlp.layers {
                let bound = glorot_bound(l.weight.rows(), l.weight.cols());
                assert!(l.weight.max_abs() <= bound);
            }
        }
    }

    #[test]
    fn default_architecture() {
        let cfg = ModelConfig::new(vec![100, 50, 20], 10, 0);
        assert_eq!(cfg.embed_dim, 128);
        assert_eq!(cfg.disc_hidden_width(), 96);
        let model = RankModel::init(cfg).unwrap();
        assert_eq!(model.encoders[1].spec.widths, vec![50, 512, 256, 128]);
        assert_eq!(model.decoders[1].spec.widths, vec![128, 256, 512, 50]);
        assert_eq!(model.discriminator.spec.widths, vec![384, 96, 3]);
        assert_eq!(model.params().len(), model.param_info().len());
        assert_eq!(model.params().len(), 3 * 6 * 2 + 2 + 4);
    }

    #[test]
    fn zero_input_gives_zero_preactivation() {
        let model = RankModel::init(tiny()).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let x = tape.constant(Matrix::zeros(2, 5));
        let (w, b) = bound.encoders[0].layers[0];
        let pre = x.matmul(w).unwrap().add(b).unwrap();
        assert!(pre.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_autoencoder_recovers_input() {
        let spec = MlpSpec::new(vec![3, 3], OutputActivation::None).unwrap();
        let ident = || {
            Mlp::from_layers(
                spec.clone(),
                vec![Linear {
                    weight: Matrix::identity(3),
                    bias: Matrix::zeros(1, 3),
                }],
            )
            .unwrap()
        };
        let mut cfg = ModelConfig::new(vec![3], 2, 0);
        cfg.hidden = vec![];
        cfg.embed_dim = 3;
        let mut model = RankModel::init(cfg).unwrap();
        model.encoders[0] = ident();
        model.decoders[0] = ident();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]]);
        let z = bound.encode(0, tape.constant(x.clone())).unwrap();
        let back = bound.decode(0, z).unwrap();
        assert_eq!(*back.value(), x);
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let model = RankModel::init(tiny()).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        assert!(matches!(
            bound.encode(0, tape.constant(Matrix::zeros(2, 3))),
            Err(Error::Dimension { .. })
        ));
        assert!(bound.encode(5, tape.constant(Matrix::zeros(2, 5))).is_err());
    }

    #[test]
    fn discriminator_rows_sum_to_one() {
        let model = RankModel::init(tiny()).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let mut rng = RngStream::new(3);
        let z: Vec<Var<'_>> = (0..2)
            .map(|_| tape.constant(rng.normal_matrix(5, 4).map(|x| 10.0 * x)))
            .collect();
        let b = bound.discriminate(&z).unwrap().value();
        for row in b.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_view_discriminator_outputs_ones() {
        let mut cfg = tiny();
        cfg.view_dims = vec![5];
        let model = RankModel::init(cfg).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let z = tape.constant(RngStream::new(1).normal_matrix(4, 4));
        assert_eq!(
            *bound.discriminate(&[z]).unwrap().value(),
            Matrix::ones(4, 1)
        );
    }

    #[test]
    fn symmetric_discriminator_scores_identical_views_equally() {
        // Hidden units see both view blocks through the same weights, and the
        // two output columns read the hidden layer identically.
        let mut model = RankModel::init(tiny()).unwrap();
        let mut rng = RngStream::new(9);
        let half = rng.normal_matrix(4, 8);
        let first = Matrix::hstack(&[&half, &half]).unwrap();
        let w0 = Matrix::from_fn(8, 16, |i, j| first[(i % 4, j)]);
        let col = rng.normal_matrix(16, 1);
        let w1 = Matrix::hstack(&[&col, &col]).unwrap();
        model.discriminator = Mlp::from_layers(
            MlpSpec::new(vec![8, 16, 2], OutputActivation::Softmax).unwrap(),
            vec![
                Linear {
                    weight: w0,
                    bias: Matrix::zeros(1, 16),
                },
                Linear {
                    weight: w1,
                    bias: Matrix::zeros(1, 2),
                },
            ],
        )
        .unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let z = tape.constant(rng.normal_matrix(3, 4));
        let b = bound.discriminate(&[z, z]).unwrap().value();
        for row in b.iter_rows() {
            assert_eq!(row[0], row[1]);
        }
    }

    #[test]
    fn zero_classifier_predicts_half() {
        let mut model = RankModel::init(tiny()).unwrap();
        for l in &mut model.classifier.layers {
            l.weight = Matrix::zeros(l.weight.rows(), l.weight.cols());
        }
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let z = tape.constant(RngStream::new(2).normal_matrix(3, 4));
        assert_eq!(
            *bound.classify(z).unwrap().value(),
            Matrix::filled(3, 4, 0.5)
        );
    }

    #[test]
    fn per_view_predictions_share_classifier_parameters() {
        let model = RankModel::init(tiny()).unwrap();
        let mut rng = RngStream::new(4);
        let z0 = rng.normal_matrix(3, 4);
        let z1 = rng.normal_matrix(3, 4);
        let classifier_grad = |inputs: &[&Matrix]| {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let mut loss = tape.scalar(0.0);
            for z in inputs {
                let p = bound.classify(tape.constant((*z).clone())).unwrap();
                loss = loss.add(p.sum()).unwrap();
            }
            let grads = tape.backward(loss).unwrap();
            grads.get_or_zeros(bound.classifier.layers[0].0)
        };
        let both = classifier_grad(&[&z0, &z1]);
        let sum = classifier_grad(&[&z0])
            .zip_map(&classifier_grad(&[&z1]), |a, b| a + b)
            .unwrap();
        for (a, b) in both.data().iter().zip(sum.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_passes_pass_gradient_check() {
        let model = RankModel::init(tiny()).unwrap();
        let x = RngStream::new(8).normal_matrix(3, 5);
        let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
        let report = grad_check(
            &params,
            |t, vars| {
                let b = model.bind_vars(vars)?;
                let z = b.encode(0, t.constant(x.clone()))?;
                let xr = b.decode(0, z)?;
                let p = b.classify(z)?;
                let q = b.discriminate(&[z, z.scale(0.5)])?;
                xr.mean().add(p.log().mean())?.add(q.log().mean())
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn bind_vars_checks_count_and_shape() {
        let model = RankModel::init(tiny()).unwrap();
        let tape = Tape::new();
        assert!(model.bind_vars(&[tape.scalar(1.0)]).is_err());
        let mut vars: Vec<Var<'_>> = model
            .params()
            .into_iter()
            .map(|p| tape.param(p.clone()))
            .collect();
        vars[0] = tape.param(Matrix::zeros(1, 1));
        assert!(model.bind_vars(&vars).is_err());
    }
}
