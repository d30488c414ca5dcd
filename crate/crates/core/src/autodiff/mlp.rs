use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AdError, Gradients, Tape, Tensor, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    pub fn code(self) -> f64 {
        match self {
            Activation::None => 0.0,
            Activation::Relu => 1.0,
            Activation::Tanh => 2.0,
        }
    }

    pub fn from_code(c: f64) -> Option<Self> {
        match c as i64 {
            0 => Some(Activation::None),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply<'t>(self, v: Value<'t>) -> Value<'t> {
        match self {
            Activation::Relu => v.relu(),
            Activation::Tanh => v.tanh(),
            Activation::None => v,
        }
    }
}

/// One affine layer: `weight` is `[out x in]`, `bias` is `[1 x out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// `dims = [in, h1, ..., out]`. Hidden layers use `hidden`, the last
    /// layer `output`. Weights are uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init(dims: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..out * fan_in).map(|_| rng.gen_range(-bound..=bound)).collect();
                Layer {
                    weight: Tensor::from_vec(out, fan_in, data).expect("sized"),
                    bias: Tensor::zeros(1, out),
                    activation: if i + 2 == dims.len() { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    /// Validates that consecutive layers chain and all entries are finite.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, AdError> {
        if layers.is_empty() {
            return Err(AdError::Layout("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != [1, l.weight.rows()] {
                return Err(AdError::Layout(format!(
                    "layer {i}: bias {:?} vs weight {:?}",
                    l.bias.shape(),
                    l.weight.shape()
                )));
            }
            if !l.weight.all_finite() || !l.bias.all_finite() {
                return Err(AdError::Layout(format!("layer {i}: non-finite entries")));
            }
            if i > 0 && layers[i - 1].weight.rows() != l.weight.cols() {
                return Err(AdError::Layout(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.weight.cols(),
                    i - 1,
                    layers[i - 1].weight.rows()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.rows()
    }

    /// `[in, h1, ..., out]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(|l| l.weight.rows()))
            .collect()
    }

    /// Zeroes the last layer so a tanh/linear head outputs exactly 0.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.scale_in_place(0.0);
        last.bias.scale_in_place(0.0);
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Tensor::zeros(l.weight.rows(), l.weight.cols()),
                    bias: Tensor::zeros(1, l.bias.cols()),
                    activation: l.activation,
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight);
            a.bias.add_assign(&b.bias);
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.scale_in_place(s);
            l.bias.scale_in_place(s);
        }
    }

    /// `(name, tensor)` pairs in a fixed order: weight then bias per layer.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("layer{i}.weight"), &l.weight),
                    (format!("layer{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// FNV-1a over the raw bits of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named_tensors() {
            for x in t.data() {
                for b in x.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Places the parameters on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundMlp {
            weights: self.layers.iter().map(|l| put(&l.weight)).collect(),
            biases: self.layers.iter().map(|l| put(&l.bias)).collect(),
            activations: self.layers.iter().map(|l| l.activation).collect(),
        }
    }
}

/// Parameters of one MLP living on a tape.
pub struct BoundMlp<'t> {
    weights: Vec<Value<'t>>,
    biases: Vec<Value<'t>>,
    activations: Vec<Activation>,
}

impl<'t> BoundMlp<'t> {
    /// Network over caller-provided weight and bias values, one pair per layer.
    pub fn from_values(
        weights: Vec<Value<'t>>,
        biases: Vec<Value<'t>>,
        activations: Vec<Activation>,
    ) -> Result<Self, AdError> {
        if weights.is_empty() || weights.len() != biases.len() || weights.len() != activations.len() {
            return Err(AdError::Layout(format!(
                "{} weights, {} biases, {} activations",
                weights.len(),
                biases.len(),
                activations.len()
            )));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if b.shape() != [1, w.rows()] || (i > 0 && w.cols() != weights[i - 1].rows()) {
                return Err(AdError::Layout(format!(
                    "layer {i}: weight {:?}, bias {:?}",
                    w.shape(),
                    b.shape()
                )));
            }
        }
        Ok(Self {
            weights,
            biases,
            activations,
        })
    }

    fn layer(&self, i: usize, x: Value<'t>) -> Result<Value<'t>, AdError> {
        let h = x.matmul_t(&self.weights[i])?.add(&self.biases[i])?;
        Ok(self.activations[i].apply(h))
    }

    /// Row-wise forward pass on a `[batch x in]` input.
    pub fn forward(&self, x: Value<'t>) -> Result<Value<'t>, AdError> {
        let mut h = x;
        for i in 0..self.weights.len() {
            h = self.layer(i, h)?;
        }
        Ok(h)
    }

    /// Forward pass on `concat(points, feature)` for every row of `points`,
    /// where the same `[1 x F]` feature is attached to each row.
    ///
    /// The first layer is split as `points * Wp^T + (feature * Wf^T + b)`, so
    /// the feature projection is computed once instead of once per row.
    pub fn forward_conditioned(&self, points: Value<'t>, feature: Value<'t>) -> Result<Value<'t>, AdError> {
        let w = &self.weights[0];
        let (p, f) = (points.cols(), feature.cols());
        if feature.rows() != 1 || w.cols() != p + f {
            return Err(AdError::ShapeMismatch {
                op: "forward_conditioned",
                lhs: [points.rows(), p + f],
                rhs: w.shape(),
            });
        }
        let wp = w.slice_cols(0, p)?;
        let wf = w.slice_cols(p, f)?;
        let shared = feature.matmul_t(&wf)?.add(&self.biases[0])?;
        let mut h = self.activations[0].apply(points.matmul_t(&wp)?.add(&shared)?);
        for i in 1..self.weights.len() {
            h = self.layer(i, h)?;
        }
        Ok(h)
    }

    /// Gradients shaped like the parameters; zeros where nothing flowed.
    pub fn grads(&self, g: &Gradients) -> MlpParams {
        MlpParams {
            layers: self
                .weights
                .iter()
                .zip(&self.biases)
                .zip(&self.activations)
                .map(|((w, b), &activation)| Layer {
                    weight: g.wrt(w),
                    bias: g.wrt(b),
                    activation,
                })
                .collect(),
        }
    }
}

/// Affine map plus activation for every layer of `params`, applied to each
/// row of `input`.
pub fn mlp_forward<'t>(
    params: &MlpParams,
    tape: &'t Tape,
    input: Value<'t>,
    trainable: bool,
) -> Result<(Value<'t>, BoundMlp<'t>), AdError> {
    if input.cols() != params.in_dim() {
        return Err(AdError::ShapeMismatch {
            op: "mlp_forward",
            lhs: input.shape(),
            rhs: [params.layers[0].weight.rows(), params.in_dim()],
        });
    }
    let bound = params.bind(tape, trainable);
    let out = bound.forward(input)?;
    Ok((out, bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_through() {
        let mut eye = Tensor::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        let p = MlpParams::from_layers(vec![Layer {
            weight: eye,
            bias: Tensor::zeros(1, 3),
            activation: Activation::None,
        }])
        .unwrap();
        let tape = Tape::new();
        let x = Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -7.0]).unwrap();
        let (y, _) = mlp_forward(&p, &tape, tape.constant(x.clone()), false).unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn deform_layout_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MlpParams::init(
            &[1027, 1024, 512, 256, 128, 3],
            Activation::Relu,
            Activation::Tanh,
            &mut rng,
        );
        assert_eq!(p.dims(), vec![1027, 1024, 512, 256, 128, 3]);
        assert_eq!(p.layers[4].activation, Activation::Tanh);
        assert!(p.layers[..4].iter().all(|l| l.activation == Activation::Relu));
        let tape = Tape::new();
        let pts = tape.constant(Tensor::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap());
        let feat = tape.constant(Tensor::from_vec(1, 1024, (0..1024).map(|i| (i as f64).sin()).collect()).unwrap());
        let out = p.bind(&tape, false).forward_conditioned(pts, feat).unwrap();
        assert_eq!(out.shape(), [4, 3]);
        assert!(out.value().data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn conditioned_equals_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MlpParams::init(&[3 + 5, 7, 4, 2], Activation::Relu, Activation::Tanh, &mut rng);
        let tape = Tape::new();
        let pts = Tensor::from_vec(6, 3, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let feat = Tensor::from_vec(1, 5, (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = p.bind(&tape, false);
        let a = b
            .forward_conditioned(tape.constant(pts.clone()), tape.constant(feat.clone()))
            .unwrap();
        let rep = tape.constant(feat).repeat_rows(6).unwrap();
        let cat = tape.concat_cols(&[tape.constant(pts), rep]).unwrap();
        let c = b.forward(cat).unwrap();
        for (x, y) in a.value().data().iter().zip(c.value().data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layout_validation() {
        let l = |o: usize, i: usize| Layer {
            weight: Tensor::zeros(o, i),
            bias: Tensor::zeros(1, o),
            activation: Activation::Relu,
        };
        assert!(MlpParams::from_layers(vec![l(4, 3), l(2, 4)]).is_ok());
        assert!(matches!(
            MlpParams::from_layers(vec![l(4, 3), l(2, 5)]),
            Err(AdError::Layout(_))
        ));
        let mut bad = l(2, 2);
        bad.weight.set(0, 0, f64::NAN);
        assert!(MlpParams::from_layers(vec![bad]).is_err());
        let p = MlpParams::from_layers(vec![l(4, 3)]).unwrap();
        let tape = Tape::new();
        assert!(mlp_forward(&p, &tape, tape.constant(Tensor::zeros(1, 2)), false).is_err());
    }
}
