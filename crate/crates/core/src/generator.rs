//! MLP generator with hand-written reverse mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `log(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            activation,
        }
    }

    fn num_params(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

/// Builds a chain `noise_dim -> hidden... -> out_dim`.
pub fn mlp_layers(
    noise_dim: usize,
    hidden: &[usize],
    hidden_activation: Activation,
    out_dim: usize,
    output_activation: Activation,
) -> Vec<LayerSpec> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut prev = noise_dim;
    for &h in hidden {
        layers.push(LayerSpec::new(prev, h, hidden_activation));
        prev = h;
    }
    layers.push(LayerSpec::new(prev, out_dim, output_activation));
    layers
}

/// Affine layers with per-layer activations. Parameters live in one flat
/// buffer: for each layer, the row-major `outputs x inputs` weights followed
/// by the biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeneratorRepr", into = "GeneratorRepr")]
pub struct Generator {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer; `inputs[0]` is the noise vector.
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn pre_activations(&self, layer: usize) -> &[f64] {
        &self.pre_activations[layer]
    }
}

fn layout(layers: &[LayerSpec]) -> Result<Vec<usize>> {
    if layers.is_empty() {
        return Err(Error::Config("generator needs at least one layer".into()));
    }
    let mut offsets = Vec::with_capacity(layers.len() + 1);
    let mut off = 0;
    for (k, l) in layers.iter().enumerate() {
        if l.inputs == 0 || l.outputs == 0 {
            return Err(Error::Config(format!("layer {k} has a zero dimension")));
        }
        if k > 0 && layers[k - 1].outputs != l.inputs {
            return Err(Error::Config(format!(
                "layer {k} expects {} inputs but layer {} produces {}",
                l.inputs,
                k - 1,
                layers[k - 1].outputs
            )));
        }
        offsets.push(off);
        off += l.num_params();
    }
    offsets.push(off);
    Ok(offsets)
}

impl Generator {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn new(layers: &[LayerSpec], seed: u64) -> Result<Self> {
        let offsets = layout(layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; *offsets.last().unwrap()];
        for (l, &off) in layers.iter().zip(&offsets) {
            let std = (l.inputs as f64).sqrt().recip();
            for w in &mut params[off..off + l.inputs * l.outputs] {
                let n: f64 = StandardNormal.sample(&mut rng);
                *w = std * n;
            }
        }
        Ok(Self {
            layers: layers.to_vec(),
            offsets,
            params,
        })
    }

    pub fn from_params(layers: &[LayerSpec], params: Vec<f64>) -> Result<Self> {
        let offsets = layout(layers)?;
        check_len("generator parameters", *offsets.last().unwrap(), params.len())?;
        check_finite("generator parameters", &params)?;
        Ok(Self {
            layers: layers.to_vec(),
            offsets,
            params,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn noise_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Splits a flat parameter-shaped buffer into `(weights, bias)` of layer `k`.
    pub fn layer_slices<'a>(&self, flat: &'a [f64], k: usize) -> (&'a [f64], &'a [f64]) {
        let l = &self.layers[k];
        let off = self.offsets[k];
        let w_end = off + l.inputs * l.outputs;
        (&flat[off..w_end], &flat[w_end..self.offsets[k + 1]])
    }

    pub fn forward(&self, z: &[f64]) -> Result<(Vec<f64>, Tape)> {
        check_len("noise vector", self.noise_dim(), z.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut h = z.to_vec();
        for (k, l) in self.layers.iter().enumerate() {
            let (w, b) = self.layer_slices(&self.params, k);
            let pre: Vec<f64> = w
                .chunks_exact(l.inputs)
                .zip(b)
                .map(|(row, bi)| bi + row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>())
                .collect();
            let out: Vec<f64> = pre.iter().map(|&p| l.activation.apply(p)).collect();
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("generator layer {k} output")));
            }
            inputs.push(std::mem::replace(&mut h, out));
            pre_activations.push(pre);
        }
        Ok((
            h,
            Tape {
                inputs,
                pre_activations,
            },
        ))
    }

    pub fn output(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.forward(z).map(|(out, _)| out)
    }

    /// Gradient of `d_out . G(z)` with respect to every parameter, in the
    /// flat parameter layout.
    pub fn backward(&self, tape: &Tape, d_out: &[f64]) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; self.params.len()];
        self.backward_into(tape, d_out, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Generator::backward`] but adds into `grads`.
    pub fn backward_into(&self, tape: &Tape, d_out: &[f64], grads: &mut [f64]) -> Result<()> {
        check_len("generator gradient buffer", self.params.len(), grads.len())?;
        if tape.inputs.len() != self.layers.len()
            || tape
                .pre_activations
                .iter()
                .zip(&self.layers)
                .any(|(p, l)| p.len() != l.outputs)
        {
            return Err(Error::Config("tape does not match generator".into()));
        }
        check_len("output cotangent", self.out_dim(), d_out.len())?;

        let mut delta = d_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let l = self.layers[k];
            for (d, p) in delta.iter_mut().zip(&tape.pre_activations[k]) {
                *d *= l.activation.derivative(*p);
            }
            let off = self.offsets[k];
            let w_end = off + l.inputs * l.outputs;
            let input = &tape.inputs[k];
            {
                let (gw, gb) = grads[off..self.offsets[k + 1]].split_at_mut(w_end - off);
                for ((row, d), b) in gw.chunks_exact_mut(l.inputs).zip(&delta).zip(gb) {
                    *b += d;
                    if *d != 0.0 {
                        for (g, x) in row.iter_mut().zip(input) {
                            *g += d * x;
                        }
                    }
                }
            }
            if k > 0 {
                let w = &self.params[off..w_end];
                let mut prev = vec![0.0; l.inputs];
                for (row, d) in w.chunks_exact(l.inputs).zip(&delta) {
                    if *d != 0.0 {
                        for (p, a) in prev.iter_mut().zip(row) {
                            *p += d * a;
                        }
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GeneratorRepr {
    noise_dim: usize,
    out_dim: usize,
    layers: Vec<LayerRepr>,
}

impl From<Generator> for GeneratorRepr {
    fn from(g: Generator) -> Self {
        let layers = (0..g.layers.len())
            .map(|k| {
                let l = g.layers[k];
                let (w, b) = g.layer_slices(&g.params, k);
                LayerRepr {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    activation: l.activation,
                    weights: w.to_vec(),
                    bias: b.to_vec(),
                }
            })
            .collect();
        GeneratorRepr {
            noise_dim: g.noise_dim(),
            out_dim: g.out_dim(),
            layers,
        }
    }
}

impl TryFrom<GeneratorRepr> for Generator {
    type Error = Error;

    fn try_from(r: GeneratorRepr) -> Result<Self> {
        let specs: Vec<LayerSpec> = r
            .layers
            .iter()
            .map(|l| LayerSpec::new(l.inputs, l.outputs, l.activation))
            .collect();
        let mut params = Vec::new();
        for l in &r.layers {
            check_len("layer weights", l.inputs * l.outputs, l.weights.len())?;
            check_len("layer bias", l.outputs, l.bias.len())?;
            params.extend_from_slice(&l.weights);
            params.extend_from_slice(&l.bias);
        }
        let g = Generator::from_params(&specs, params)?;
        check_len("generator noise dimension", g.noise_dim(), r.noise_dim)?;
        check_len("generator output dimension", g.out_dim(), r.out_dim)?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Each coordinate uniform on `[-1, 1)`.
    Uniform,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub dim: usize,
}

impl NoiseSpec {
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::Empty("noise sample count"));
        }
        Ok((0..n)
            .map(|_| {
                (0..self.dim)
                    .map(|_| match self.kind {
                        NoiseKind::Uniform => rng.random_range(-1.0..1.0),
                        NoiseKind::Normal => StandardNormal.sample(rng),
                    })
                    .collect()
            })
            .collect())
    }
}

/// `n` i.i.d. noise vectors.
pub fn sample_noise<R: Rng>(spec: &NoiseSpec, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    spec.sample(n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fd_check(g: &Generator, z: &[f64], u: &[f64], h: f64, tol: f64) {
        let (_, tape) = g.forward(z).unwrap();
        let analytic = g.backward(&tape, u).unwrap();
        let s = |p: &[f64]| {
            let gg = Generator::from_params(g.layers(), p.to_vec()).unwrap();
            let out = gg.output(z).unwrap();
            out.iter().zip(u).map(|(a, b)| a * b).sum::<f64>()
        };
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
        for i in 0..g.num_params() {
            let mut pp = g.params().to_vec();
            let mut pm = pp.clone();
            pp[i] += h;
            pm[i] -= h;
            let num = (s(&pp) - s(&pm)) / (2.0 * h);
            assert!(
                (num - analytic[i]).abs() <= tol * scale,
                "param {i}: {num} vs {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn synthetic_architecture() {
        let layers = mlp_layers(1, &[30, 30], Activation::Softplus, 1, Activation::Identity);
        let g = Generator::new(&layers, 0).unwrap();
        assert_eq!(g.noise_dim(), 1);
        assert_eq!(g.out_dim(), 1);
        assert_eq!(g.num_params(), 30 * 2 + 30 * 31 + 31);
    }

    #[test]
    fn mnist_architecture() {
        let layers = mlp_layers(
            10,
            &[1000, 1000, 1000, 1000],
            Activation::Softplus,
            784,
            Activation::Sigmoid,
        );
        let g = Generator::new(&layers, 1).unwrap();
        assert_eq!(g.out_dim(), 784);
        let out = g.output(&[0.3; 10]).unwrap();
        assert!(out.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn chain_mismatch_rejected() {
        let layers = [
            LayerSpec::new(2, 3, Activation::Softplus),
            LayerSpec::new(4, 1, Activation::Identity),
        ];
        assert!(matches!(Generator::new(&layers, 0), Err(Error::Config(_))));
        assert!(Generator::new(&[], 0).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let layers = mlp_layers(3, &[8], Activation::Softplus, 2, Activation::Identity);
        let a = Generator::new(&layers, 9).unwrap();
        let b = Generator::new(&layers, 9).unwrap();
        assert_eq!(a, b);
        let (_, bias) = a.layer_slices(a.params(), 0);
        assert!(bias.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn affine_generator() {
        let layers = [LayerSpec::new(2, 2, Activation::Identity)];
        let eye = Generator::from_params(&layers, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(eye.output(&[0.25, -3.0]).unwrap(), vec![0.25, -3.0]);

        let g = Generator::from_params(&layers, vec![1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        assert_eq!(g.output(&[1.0, 1.0]).unwrap(), vec![3.5, 6.5]);
    }

    #[test]
    fn softplus_at_zero_and_extremes() {
        let layers = [
            LayerSpec::new(1, 1, Activation::Softplus),
            LayerSpec::new(1, 1, Activation::Identity),
        ];
        let g = Generator::from_params(&layers, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let out = g.output(&[0.7]).unwrap();
        assert!((out[0] - std::f64::consts::LN_2).abs() < 1e-15);

        assert_eq!(softplus(1e4), 1e4);
        assert!(softplus(-1e4) >= 0.0 && softplus(-1e4) < 1e-300);
        assert!((softplus(40.0) - 40.0).abs() < 1e-15);
        assert!(sigmoid(-1e4) >= 0.0 && sigmoid(1e4) <= 1.0);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let layers = mlp_layers(2, &[5, 4], Activation::Softplus, 3, Activation::Sigmoid);
        let g = Generator::new(&layers, 4).unwrap();
        let (_, tape) = g.forward(&[0.1, -0.6]).unwrap();
        assert!(g.backward(&tape, &[0.0; 3]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let layers = [LayerSpec::new(3, 2, Activation::Identity)];
        let g = Generator::new(&layers, 2).unwrap();
        let z = [0.5, -1.0, 2.0];
        let u = [3.0, -0.25];
        let (_, tape) = g.forward(&z).unwrap();
        let grads = g.backward(&tape, &u).unwrap();
        let (gw, gb) = g.layer_slices(&grads, 0);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(gw[i * 3 + j], u[i] * z[j]);
            }
        }
        assert_eq!(gb, &u);
    }

    #[test]
    fn two_layer_softplus_matches_central_differences() {
        let layers = mlp_layers(3, &[6, 5], Activation::Softplus, 2, Activation::Identity);
        let g = Generator::new(&layers, 17).unwrap();
        fd_check(&g, &[0.3, -0.8, 0.1], &[1.5, -0.7], 1e-4, 1e-4);
    }

    #[test]
    fn tape_mismatch_rejected() {
        let a = Generator::new(&mlp_layers(2, &[4], Activation::Softplus, 1, Activation::Identity), 0)
            .unwrap();
        let b = Generator::new(&mlp_layers(2, &[3], Activation::Softplus, 1, Activation::Identity), 0)
            .unwrap();
        let (_, tape) = b.forward(&[0.0, 0.0]).unwrap();
        assert!(a.backward(&tape, &[1.0]).is_err());
        let (_, tape) = a.forward(&[0.0, 0.0]).unwrap();
        assert!(a.backward(&tape, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn serde_roundtrip() {
        let g = Generator::new(&mlp_layers(2, &[3], Activation::Softplus, 2, Activation::Sigmoid), 5)
            .unwrap();
        let json = serde_json::to_string(&g).unwrap();
        let back: Generator = serde_json::from_str(&json).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn noise_support_mean_and_determinism() {
        use rand::SeedableRng;
        let spec = NoiseSpec {
            kind: NoiseKind::Uniform,
            dim: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zs = sample_noise(&spec, 100_000, &mut rng).unwrap();
        assert!(zs.iter().all(|z| (-1.0..=1.0).contains(&z[0])));
        // std of U(-1,1) is 1/sqrt(3); 3 sigma / sqrt(n) ~ 0.0055
        let mean = zs.iter().map(|z| z[0]).sum::<f64>() / zs.len() as f64;
        assert!(mean.abs() < 0.02);

        let a = sample_noise(&spec, 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_noise(&spec, 16, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(sample_noise(&spec, 0, &mut rng).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn backprop_matches_finite_differences(
            seed in 0u64..1000,
            depth in 0usize..3,
            width in 1usize..17,
            noise_dim in 1usize..4,
            out_dim in 1usize..4,
            sigmoid_out in any::<bool>(),
            z in proptest::collection::vec(-1.0f64..1.0, 3),
            u in proptest::collection::vec(-2.0f64..2.0, 3),
        ) {
            let hidden = vec![width; depth];
            let out_act = if sigmoid_out { Activation::Sigmoid } else { Activation::Identity };
            let layers = mlp_layers(noise_dim, &hidden, Activation::Softplus, out_dim, out_act);
            let g = Generator::new(&layers, seed).unwrap();
            fd_check(&g, &z[..noise_dim], &u[..out_dim], 1e-5, 1e-4);
        }

        #[test]
        fn forward_is_pure(seed in 0u64..100, z in proptest::collection::vec(-1.0f64..1.0, 2)) {
            let g = Generator::new(&mlp_layers(2, &[7], Activation::Softplus, 2, Activation::Identity), seed).unwrap();
            prop_assert_eq!(g.output(&z).unwrap(), g.output(&z).unwrap());
        }
    }
}
