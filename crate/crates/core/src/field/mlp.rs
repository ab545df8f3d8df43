//! Batched MLP forward pass with a recorded tape and its exact reverse pass.

use std::fmt::Debug;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoding::{encoded_len, EncodingConfig};
use crate::error::{Error, Result};

/// Scalar type the field can be evaluated in.
pub trait Real:
    Float + LinalgScalar + ScalarOperand + FromPrimitive + Default + Debug + Send + Sync + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal fits")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
}

impl Activation {
    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Softplus => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Softplus),
            _ => None,
        }
    }

    fn apply<F: Real>(self, z: &mut Array2<F>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(F::zero())),
            Activation::Softplus => z.mapv_inplace(softplus),
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output<F: Real>(self, out: F) -> F {
        match self {
            Activation::Relu => {
                if out > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            // softplus' = sigmoid(z) = 1 - exp(-softplus(z))
            Activation::Softplus => -(-out).exp_m1(),
        }
    }
}

pub(crate) fn softplus<F: Real>(z: F) -> F {
    z.max(F::zero()) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Layer shapes shared by the coarse and fine networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    /// Number of trunk layers.
    pub depth: usize,
    pub width: usize,
    /// The encoded position is concatenated to the output of this trunk
    /// layer. `-1` in config files disables the skip connection.
    #[serde(with = "skip_serde")]
    pub skip: Option<usize>,
    /// Width of the direction-conditioned color layer.
    pub color_width: usize,
    pub activation: Activation,
    pub encoding: EncodingConfig,
}

mod skip_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(v.map_or(-1, |k| k as i64))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        let v = i64::deserialize(d)?;
        Ok((v >= 0).then_some(v as usize))
    }
}

impl Default for Architecture {
    /// Eight 256-wide layers with the encoded input re-injected after layer 4.
    fn default() -> Self {
        Self {
            depth: 8,
            width: 256,
            skip: Some(4),
            color_width: 128,
            activation: Activation::Relu,
            encoding: EncodingConfig::default(),
        }
    }
}

impl Architecture {
    /// Four 128-wide layers, the size used for laptop-scale runs.
    pub fn desk() -> Self {
        Self {
            depth: 4,
            width: 128,
            skip: None,
            color_width: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.color_width == 0 {
            return Err(Error::Config("field depth and widths must be positive".into()));
        }
        if let Some(k) = self.skip {
            if k + 1 >= self.depth {
                return Err(Error::Config(format!(
                    "skip after layer {k} needs at least {} trunk layers",
                    k + 2
                )));
            }
        }
        Ok(())
    }

    pub fn pos_dim(&self) -> usize {
        encoded_len(3, self.encoding.pos_freqs, self.encoding.include_input)
    }

    pub fn dir_dim(&self) -> usize {
        encoded_len(3, self.encoding.dir_freqs, self.encoding.include_input)
    }

    fn trunk_in_dim(&self, i: usize) -> usize {
        match i {
            0 => self.pos_dim(),
            _ if self.skip == Some(i - 1) => self.width + self.pos_dim(),
            _ => self.width,
        }
    }
}

/// Dense layer `y = x W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = || F::lit(rng.random_range(-bound..bound));
        let weight = Array2::from_shape_simple_fn((fan_in, fan_out), &mut draw);
        let bias = Array1::from_shape_simple_fn(fan_out, &mut draw);
        Self { weight, bias }
    }

    fn forward(&self, x: ArrayView2<'_, F>) -> Array2<F> {
        let mut y = self
            .bias
            .broadcast((x.nrows(), self.bias.len()))
            .expect("bias broadcasts over rows")
            .to_owned();
        general_mat_mul(F::one(), &x, &self.weight, F::one(), &mut y);
        y
    }

    /// Accumulates `dW += xᵀ dy` and `db += Σ dy`.
    fn accumulate(&mut self, x: ArrayView2<'_, F>, dy: ArrayView2<'_, F>) {
        general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut self.weight);
        Zip::from(&mut self.bias)
            .and(&dy.sum_axis(Axis(0)))
            .for_each(|b, &g| *b = *b + g);
    }
}

/// One branch (coarse or fine) of the radiance field.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub trunk: Vec<Linear<F>>,
    pub sigma: Linear<F>,
    pub feature: Linear<F>,
    pub color_hidden: Linear<F>,
    pub color_out: Linear<F>,
}

/// Activations recorded by [`Mlp::forward`] for the reverse pass.
#[derive(Debug)]
pub struct MlpTape<F> {
    /// Input of every trunk layer; `inputs[0]` is the encoded position.
    inputs: Vec<Array2<F>>,
    trunk_out: Array2<F>,
    sigma_pre: Array1<F>,
    color_in: Array2<F>,
    color_hidden: Array2<F>,
    pub sigma: Array1<F>,
    pub color: Array2<F>,
}

fn check_finite<F: Real>(a: &Array2<F>, block: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { block: block() })
    }
}

impl<F: Real> Mlp<F> {
    pub fn zeros(arch: &Architecture) -> Self {
        Self::build(arch, Linear::zeros)
    }

    pub fn init(arch: &Architecture, rng: &mut impl Rng) -> Self {
        Self::build(arch, |i, o| Linear::init(i, o, rng))
    }

    fn build(arch: &Architecture, mut layer: impl FnMut(usize, usize) -> Linear<F>) -> Self {
        let trunk = (0..arch.depth)
            .map(|i| layer(arch.trunk_in_dim(i), arch.width))
            .collect();
        Self {
            trunk,
            sigma: layer(arch.width, 1),
            feature: layer(arch.width, arch.width),
            color_hidden: layer(arch.width + arch.dir_dim(), arch.color_width),
            color_out: layer(arch.color_width, 3),
        }
    }

    fn layers(&self) -> Vec<(String, &Linear<F>)> {
        let mut v: Vec<_> = self
            .trunk
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("trunk.{i}"), l))
            .collect();
        v.push(("sigma".into(), &self.sigma));
        v.push(("feature".into(), &self.feature));
        v.push(("color_hidden".into(), &self.color_hidden));
        v.push(("color_out".into(), &self.color_out));
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear<F>> {
        let mut v: Vec<_> = self.trunk.iter_mut().collect();
        v.push(&mut self.sigma);
        v.push(&mut self.feature);
        v.push(&mut self.color_hidden);
        v.push(&mut self.color_out);
        v
    }

    /// Parameter blocks in serialization order: per layer, weight then bias.
    pub fn blocks(&self) -> Vec<(String, &[F])> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), l.weight.as_slice().expect("standard layout")),
                    (format!("{name}.bias"), l.bias.as_slice().expect("standard layout")),
                ]
            })
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [F]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Forward pass over `M` encoded samples.
    ///
    /// `enc_pos` is `M × pos_dim`, `enc_dir` is `M × dir_dim`. `name` prefixes
    /// the block reported when an intermediate turns non-finite.
    pub fn forward(
        &self,
        arch: &Architecture,
        enc_pos: Array2<F>,
        enc_dir: ArrayView2<'_, F>,
        name: &str,
    ) -> Result<MlpTape<F>> {
        let m = enc_pos.nrows();
        let w = arch.width;
        let mut inputs = Vec::with_capacity(arch.depth);
        inputs.push(enc_pos);
        let mut trunk_out = None;
        for (i, layer) in self.trunk.iter().enumerate() {
            let mut h = layer.forward(inputs[i].view());
            check_finite(&h, || format!("{name}.trunk.{i}"))?;
            arch.activation.apply(&mut h);
            if i + 1 == arch.depth {
                trunk_out = Some(h);
            } else if arch.skip == Some(i) {
                let mut cat = Array2::zeros((m, w + arch.pos_dim()));
                cat.slice_mut(s![.., ..w]).assign(&h);
                cat.slice_mut(s![.., w..]).assign(&inputs[0]);
                inputs.push(cat);
            } else {
                inputs.push(h);
            }
        }
        let h = trunk_out.expect("depth >= 1");

        let sigma_pre = self.sigma.forward(h.view()).remove_axis(Axis(1));
        let sigma = sigma_pre.mapv(softplus);
        let feat = self.feature.forward(h.view());
        let mut color_in = Array2::zeros((m, w + enc_dir.ncols()));
        color_in.slice_mut(s![.., ..w]).assign(&feat);
        color_in.slice_mut(s![.., w..]).assign(&enc_dir);
        let mut color_hidden = self.color_hidden.forward(color_in.view());
        check_finite(&feat, || format!("{name}.feature"))?;
        check_finite(&color_hidden, || format!("{name}.color_hidden"))?;
        arch.activation.apply(&mut color_hidden);
        let color = self.color_out.forward(color_hidden.view()).mapv(sigmoid);
        check_finite(&color, || format!("{name}.color_out"))?;
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                block: format!("{name}.sigma"),
            });
        }
        Ok(MlpTape {
            inputs,
            trunk_out: h,
            sigma_pre,
            color_in,
            color_hidden,
            sigma,
            color,
        })
    }

    /// Reverse pass: accumulates parameter gradients into `grads` given
    /// `dL/dsigma` (length `M`) and `dL/dcolor` (`M × 3`).
    pub fn backward(
        &self,
        arch: &Architecture,
        tape: &MlpTape<F>,
        d_sigma: ArrayView1<'_, F>,
        d_color: ArrayView2<'_, F>,
        grads: &mut Mlp<F>,
    ) {
        let w = arch.width;
        let act = arch.activation;

        let mut d_craw = d_color.to_owned();
        Zip::from(&mut d_craw)
            .and(&tape.color)
            .for_each(|g, &c| *g = *g * c * (F::one() - c));
        grads
            .color_out
            .accumulate(tape.color_hidden.view(), d_craw.view());

        let mut d_ch = d_craw.dot(&self.color_out.weight.t());
        Zip::from(&mut d_ch)
            .and(&tape.color_hidden)
            .for_each(|g, &o| *g = *g * act.grad_from_output(o));
        grads
            .color_hidden
            .accumulate(tape.color_in.view(), d_ch.view());

        let d_feat = d_ch.dot(&self.color_hidden.weight.slice(s![..w, ..]).t());
        grads
            .feature
            .accumulate(tape.trunk_out.view(), d_feat.view());

        let mut d_sig_pre = Array2::zeros((d_sigma.len(), 1));
        Zip::from(d_sig_pre.column_mut(0))
            .and(&d_sigma)
            .and(&tape.sigma_pre)
            .for_each(|g, &ds, &z| *g = ds * sigmoid(z));
        grads
            .sigma
            .accumulate(tape.trunk_out.view(), d_sig_pre.view());

        let mut d_h = d_feat.dot(&self.feature.weight.t());
        general_mat_mul(
            F::one(),
            &d_sig_pre,
            &self.sigma.weight.t(),
            F::one(),
            &mut d_h,
        );

        for i in (0..arch.depth).rev() {
            let out = if i + 1 == arch.depth {
                tape.trunk_out.view()
            } else {
                tape.inputs[i + 1].slice(s![.., ..w])
            };
            Zip::from(&mut d_h)
                .and(&out)
                .for_each(|g, &o| *g = *g * act.grad_from_output(o));
            grads.trunk[i].accumulate(tape.inputs[i].view(), d_h.view());
            if i > 0 {
                d_h = d_h.dot(&self.trunk[i].weight.slice(s![..w, ..]).t());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert_eq!(softplus(0.0f64), std::f64::consts::LN_2);
        assert!(softplus(-800.0f64) >= 0.0);
        assert_eq!(softplus(800.0f64), 800.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64).is_finite());
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::default().validate().is_ok());
        assert!(Architecture::desk().validate().is_ok());
        let bad = Architecture {
            skip: Some(3),
            ..Architecture::desk()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn blocks_cover_all_parameters() {
        let arch = Architecture::desk();
        let mlp = Mlp::<f64>::zeros(&arch);
        let pos = arch.pos_dim();
        let dir = arch.dir_dim();
        let expected = (pos * 128 + 128)
            + 3 * (128 * 128 + 128)
            + (128 + 1)
            + (128 * 128 + 128)
            + ((128 + dir) * 32 + 32)
            + (32 * 3 + 3);
        assert_eq!(mlp.param_count(), expected);
        assert_eq!(mlp.blocks().len(), 2 * (arch.depth + 4));
    }
}
