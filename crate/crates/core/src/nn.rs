//! Dense feed-forward networks with analytic gradients.
//!
//! A [`DenseNet`] is the building block for every learned map in the crate:
//! per-view reconstruction nets, generators and discriminators. Besides the
//! usual parameter gradients, [`DenseNet::backward`] also returns the gradient
//! with respect to the input batch, which is what latent-representation
//! updates are driven by.
//!
//! Conventions: weights are `out x in`, inputs are row-major batches
//! (`batch x in`). `backward` is the exact derivative of
//! `sum(upstream * forward(x)) + regularization()`; any averaging over the
//! batch is carried by the upstream gradient the caller supplies.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"PMVLNET1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Sigmoid on hidden layers, identity on the output layer.
    SigmoidHidden,
    /// Sigmoid on every layer, output included.
    SigmoidAll,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::SigmoidHidden => 0,
            Activation::SigmoidAll => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::SigmoidHidden),
            1 => Ok(Activation::SigmoidAll),
            other => Err(Error::Checkpoint(format!("unknown activation code {other}"))),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    activation: Activation,
    l2: f64,
}

/// Gradients of a scalar loss with respect to every parameter and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_weights: Vec<Array2<f64>>,
    pub d_biases: Vec<Array1<f64>>,
    pub d_input: Array2<f64>,
}

impl GradientBundle {
    pub fn zeros_like(net: &DenseNet, batch: usize) -> Self {
        GradientBundle {
            d_weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            d_biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
            d_input: Array2::zeros((batch, net.input_dim())),
        }
    }

    /// Adds another bundle's parameter gradients into this one. Input
    /// gradients are only summed when the batch shapes agree.
    pub fn accumulate(&mut self, other: &GradientBundle) -> Result<()> {
        if self.d_weights.len() != other.d_weights.len() {
            return Err(Error::dim("gradient layers", self.d_weights.len(), other.d_weights.len()));
        }
        for (layer, (a, b)) in self.d_weights.iter_mut().zip(&other.d_weights).enumerate() {
            if a.dim() != b.dim() {
                return Err(Error::dim(format!("gradient layer {layer} weights"), a.len(), b.len()));
            }
            *a += b;
        }
        for (layer, (a, b)) in self.d_biases.iter_mut().zip(&other.d_biases).enumerate() {
            if a.len() != b.len() {
                return Err(Error::dim(format!("gradient layer {layer} biases"), a.len(), b.len()));
            }
            *a += b;
        }
        if self.d_input.dim() == other.d_input.dim() {
            self.d_input += &other.d_input;
        }
        Ok(())
    }
}

impl DenseNet {
    /// Builds a network with uniform Glorot initialisation and zero biases.
    pub fn new_random<R: Rng + ?Sized>(
        layer_dims: &[usize],
        activation: Activation,
        l2: f64,
        rng: &mut R,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        validate_l2(l2)?;
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-r..r)));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(DenseNet {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
            l2,
        })
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation, l2: f64) -> Result<Self> {
        validate_dims(layer_dims)?;
        validate_l2(l2)?;
        let weights = layer_dims
            .windows(2)
            .map(|p| Array2::zeros((p[1], p[0])))
            .collect();
        let biases = layer_dims.windows(2).map(|p| Array1::zeros(p[1])).collect();
        Ok(DenseNet {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
            l2,
        })
    }

    /// Assembles a network from explicit parameters, checking every shape.
    pub fn from_parameters(
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
        activation: Activation,
        l2: f64,
    ) -> Result<Self> {
        validate_l2(l2)?;
        if weights.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        if weights.len() != biases.len() {
            return Err(Error::dim("bias layer count", weights.len(), biases.len()));
        }
        let mut layer_dims = vec![weights[0].ncols()];
        for (layer, (w, b)) in weights.iter().zip(&biases).enumerate() {
            let expected_in = *layer_dims.last().unwrap();
            if w.ncols() != expected_in {
                return Err(Error::dim(format!("layer {layer} weight columns"), expected_in, w.ncols()));
            }
            if b.len() != w.nrows() {
                return Err(Error::dim(format!("layer {layer} bias length"), w.nrows(), b.len()));
            }
            layer_dims.push(w.nrows());
        }
        validate_dims(&layer_dims)?;
        Ok(DenseNet {
            layer_dims,
            weights,
            biases,
            activation,
            l2,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    fn squashes(&self, layer: usize) -> bool {
        layer + 1 < self.n_layers() || self.activation == Activation::SigmoidAll
    }

    /// `0.5 * l2 * sum ||W||^2`; biases are not penalised.
    pub fn regularization(&self) -> f64 {
        0.5 * self.l2 * self.weights.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(input)?.pop().unwrap())
    }

    /// Activations of every layer, input first.
    fn forward_trace(&self, input: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        if input.ncols() != self.input_dim() {
            return Err(Error::dim("layer 0 input", self.input_dim(), input.ncols()));
        }
        let mut acts = Vec::with_capacity(self.n_layers() + 1);
        acts.push(input.to_owned());
        for layer in 0..self.n_layers() {
            let mut z = acts[layer].dot(&self.weights[layer].t());
            z += &self.biases[layer];
            if self.squashes(layer) {
                z.mapv_inplace(sigmoid);
            }
            acts.push(z);
        }
        Ok(acts)
    }

    pub fn backward(&self, input: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<GradientBundle> {
        self.backprop(input, upstream, true)
    }

    /// Gradient with respect to the input batch only; skips parameter
    /// gradients.
    pub fn input_gradient(&self, input: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.backprop(input, upstream, false)?.d_input)
    }

    fn backprop(&self, input: ArrayView2<f64>, upstream: ArrayView2<f64>, params: bool) -> Result<GradientBundle> {
        if upstream.ncols() != self.output_dim() {
            return Err(Error::dim(
                format!("layer {} upstream gradient columns", self.n_layers() - 1),
                self.output_dim(),
                upstream.ncols(),
            ));
        }
        if upstream.nrows() != input.nrows() {
            return Err(Error::dim("upstream gradient rows", input.nrows(), upstream.nrows()));
        }
        let acts = self.forward_trace(input)?;
        let n_layers = self.n_layers();
        let mut d_weights = Vec::new();
        let mut d_biases = Vec::new();

        let mut delta = upstream.to_owned();
        for layer in (0..n_layers).rev() {
            if self.squashes(layer) {
                let out = &acts[layer + 1];
                ndarray::Zip::from(&mut delta)
                    .and(out)
                    .for_each(|d, &a| *d *= a * (1.0 - a));
            }
            if params {
                let mut dw = delta.t().dot(&acts[layer]);
                if self.l2 > 0.0 {
                    dw.scaled_add(self.l2, &self.weights[layer]);
                }
                d_weights.push(dw);
                d_biases.push(delta.sum_axis(Axis(0)));
            }
            delta = delta.dot(&self.weights[layer]);
        }
        d_weights.reverse();
        d_biases.reverse();
        Ok(GradientBundle {
            d_weights,
            d_biases,
            d_input: delta,
        })
    }

    fn check_bundle(&self, bundle: &GradientBundle) -> Result<()> {
        if bundle.d_weights.len() != self.n_layers() || bundle.d_biases.len() != self.n_layers() {
            return Err(Error::dim("gradient layer count", self.n_layers(), bundle.d_weights.len()));
        }
        for layer in 0..self.n_layers() {
            if bundle.d_weights[layer].dim() != self.weights[layer].dim() {
                return Err(Error::dim(
                    format!("layer {layer} weight gradient"),
                    self.weights[layer].len(),
                    bundle.d_weights[layer].len(),
                ));
            }
            if bundle.d_biases[layer].len() != self.biases[layer].len() {
                return Err(Error::dim(
                    format!("layer {layer} bias gradient"),
                    self.biases[layer].len(),
                    bundle.d_biases[layer].len(),
                ));
            }
        }
        Ok(())
    }

    /// In-place gradient descent step.
    pub fn apply_gradients(&mut self, bundle: &GradientBundle, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        self.check_bundle(bundle)?;
        for (w, dw) in self.weights.iter_mut().zip(&bundle.d_weights) {
            w.scaled_add(-lr, dw);
        }
        for (b, db) in self.biases.iter_mut().zip(&bundle.d_biases) {
            b.scaled_add(-lr, db);
        }
        Ok(())
    }

    pub fn sgd_step(&self, bundle: &GradientBundle, lr: f64) -> Result<DenseNet> {
        let mut next = self.clone();
        next.apply_gradients(bundle, lr)?;
        Ok(next)
    }

    /// Binary checkpoint: magic, activation code, l2, layer count and dims,
    /// then per layer the row-major weights followed by the biases. All
    /// integers are little-endian u64 (activation u32), floats little-endian f64.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&self.activation.code().to_le_bytes())?;
        out.write_all(&self.l2.to_le_bytes())?;
        out.write_all(&(self.layer_dims.len() as u64).to_le_bytes())?;
        for &d in &self.layer_dims {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
            for v in b.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a network checkpoint".into()));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        let activation = Activation::from_code(u32::from_le_bytes(u32buf))?;
        let l2 = read_f64(&mut input)?;
        let n_dims = read_u64(&mut input)? as usize;
        if !(2..=1024).contains(&n_dims) {
            return Err(Error::Checkpoint(format!("implausible layer count {n_dims}")));
        }
        let dims = (0..n_dims)
            .map(|_| read_u64(&mut input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        validate_dims(&dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = read_f64_vec(&mut input, fan_in * fan_out)?;
            weights.push(Array2::from_shape_vec((fan_out, fan_in), w).expect("shape checked"));
            biases.push(Array1::from(read_f64_vec(&mut input, fan_out)?));
        }
        DenseNet::from_parameters(weights, biases, activation, l2)
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "a network needs input and output dims, got {} entries",
            dims.len()
        )));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(Error::Config(format!("layer dim {pos} is zero")));
    }
    Ok(())
}

fn validate_l2(l2: f64) -> Result<()> {
    if !(l2 >= 0.0) || !l2.is_finite() {
        return Err(Error::Config(format!("l2 coefficient must be >= 0, got {l2}")));
    }
    Ok(())
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub(crate) fn read_f64_vec<R: Read>(input: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    input.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, s};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(dims: &[usize], act: Activation, l2: f64, seed: u64) -> DenseNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = DenseNet::new_random(dims, act, l2, &mut rng).unwrap();
        for b in net.biases_mut() {
            b.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        net
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    // Deliberately naive: explicit loops, no ndarray products.
    fn naive_forward(net: &DenseNet, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), net.output_dim()));
        for r in 0..x.nrows() {
            let mut a: Vec<f64> = x.row(r).to_vec();
            for l in 0..net.n_layers() {
                let w = &net.weights()[l];
                let mut next = vec![0.0; w.nrows()];
                for (i, slot) in next.iter_mut().enumerate() {
                    let mut acc = net.biases()[l][i];
                    for (j, aj) in a.iter().enumerate() {
                        acc += w[[i, j]] * aj;
                    }
                    let last = l + 1 == net.n_layers();
                    *slot = if !last || net.activation() == Activation::SigmoidAll {
                        1.0 / (1.0 + (-acc).exp())
                    } else {
                        acc
                    };
                }
                a = next;
            }
            for (c, v) in a.into_iter().enumerate() {
                out[[r, c]] = v;
            }
        }
        out
    }

    #[test]
    fn zero_net_outputs_one_half() {
        let net = DenseNet::zeros(&[3, 4, 2], Activation::SigmoidAll, 0.0).unwrap();
        let out = net.forward(random_matrix(5, 3, 1).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_linear_layer() {
        let net = DenseNet::from_parameters(
            vec![Array2::eye(3)],
            vec![Array1::zeros(3)],
            Activation::SigmoidHidden,
            0.0,
        )
        .unwrap();
        let x = random_matrix(4, 3, 2);
        assert_eq!(net.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        for act in [Activation::SigmoidHidden, Activation::SigmoidAll] {
            let net = random_net(&[2, 3, 2], act, 0.0, 0);
            let x = random_matrix(6, 2, 0);
            let fast = net.forward(x.view()).unwrap();
            let slow = naive_forward(&net, &x);
            for (a, b) in fast.iter().zip(slow.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = DenseNet::zeros(&[3, 2], Activation::SigmoidAll, 0.0).unwrap();
        let err = net.forward(Array2::zeros((1, 4)).view()).unwrap_err();
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(DenseNet::zeros(&[3], Activation::SigmoidAll, 0.0).is_err());
        assert!(DenseNet::zeros(&[3, 0, 2], Activation::SigmoidAll, 0.0).is_err());
        assert!(DenseNet::zeros(&[3, 2], Activation::SigmoidAll, -1.0).is_err());
        let bad = DenseNet::from_parameters(
            vec![Array2::zeros((2, 3)), Array2::zeros((2, 3))],
            vec![Array1::zeros(2), Array1::zeros(2)],
            Activation::SigmoidAll,
            0.0,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn zero_upstream_zero_bundle() {
        let net = random_net(&[3, 4, 2], Activation::SigmoidHidden, 0.0, 3);
        let x = random_matrix(5, 3, 3);
        let g = net.backward(x.view(), Array2::zeros((5, 2)).view()).unwrap();
        assert!(g.d_weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(g.d_biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(g.d_input.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradients() {
        let w = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]];
        let net = DenseNet::from_parameters(vec![w.clone()], vec![Array1::zeros(3)], Activation::SigmoidHidden, 0.0)
            .unwrap();
        let x = array![[1.0, -1.0], [2.0, 0.5]];
        let g = array![[0.1, 0.2, 0.3], [-0.4, 0.0, 1.0]];
        let bundle = net.backward(x.view(), g.view()).unwrap();
        assert_eq!(bundle.d_weights[0], g.t().dot(&x));
        assert_eq!(bundle.d_biases[0], g.sum_axis(Axis(0)));
        assert_eq!(bundle.d_input, g.dot(&w));
        assert_eq!(net.input_gradient(x.view(), g.view()).unwrap(), bundle.d_input);
    }

    #[test]
    fn backward_rejects_bad_upstream() {
        let net = random_net(&[3, 2], Activation::SigmoidAll, 0.0, 1);
        let x = random_matrix(2, 3, 1);
        assert!(net.backward(x.view(), Array2::zeros((2, 3)).view()).is_err());
        assert!(net.backward(x.view(), Array2::zeros((3, 2)).view()).is_err());
    }

    /// Scalar loss 0.5 ||f(x) - t||^2 + regularization.
    fn half_sq_loss(net: &DenseNet, x: &Array2<f64>, t: &Array2<f64>) -> f64 {
        let out = net.forward(x.view()).unwrap();
        0.5 * (&out - t).mapv(|v| v * v).sum() + net.regularization()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
    }

    fn check_fd(net: &DenseNet, x: &Array2<f64>, t: &Array2<f64>) {
        let eps = 1e-5;
        let out = net.forward(x.view()).unwrap();
        let bundle = net.backward(x.view(), (&out - t).view()).unwrap();
        for l in 0..net.n_layers() {
            for idx in 0..net.weights()[l].len() {
                let (r, c) = (idx / net.weights()[l].ncols(), idx % net.weights()[l].ncols());
                let mut plus = net.clone();
                plus.weights_mut()[l][[r, c]] += eps;
                let mut minus = net.clone();
                minus.weights_mut()[l][[r, c]] -= eps;
                let fd = (half_sq_loss(&plus, x, t) - half_sq_loss(&minus, x, t)) / (2.0 * eps);
                assert!(rel_err(fd, bundle.d_weights[l][[r, c]]) < 1e-4, "w{l}[{r},{c}]");
            }
            for i in 0..net.biases()[l].len() {
                let mut plus = net.clone();
                plus.biases_mut()[l][i] += eps;
                let mut minus = net.clone();
                minus.biases_mut()[l][i] -= eps;
                let fd = (half_sq_loss(&plus, x, t) - half_sq_loss(&minus, x, t)) / (2.0 * eps);
                assert!(rel_err(fd, bundle.d_biases[l][i]) < 1e-4, "b{l}[{i}]");
            }
        }
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[r, c]] += eps;
                let mut xm = x.clone();
                xm[[r, c]] -= eps;
                let fd = (half_sq_loss(net, &xp, t) - half_sq_loss(net, &xm, t)) / (2.0 * eps);
                assert!(rel_err(fd, bundle.d_input[[r, c]]) < 1e-4, "x[{r},{c}]");
            }
        }
    }

    #[test]
    fn three_layer_gradients_match_finite_differences() {
        for (seed, act) in [(0, Activation::SigmoidHidden), (1, Activation::SigmoidAll)] {
            let net = random_net(&[3, 5, 4, 2], act, 0.01, seed);
            let x = random_matrix(4, 3, seed + 10);
            let t = random_matrix(4, 2, seed + 20);
            check_fd(&net, &x, &t);
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let net = random_net(&[2, 3], Activation::SigmoidHidden, 0.0, 5);
        let zero = GradientBundle::zeros_like(&net, 1);
        assert_eq!(net.sgd_step(&zero, 0.3).unwrap(), net);

        let mut bundle = GradientBundle::zeros_like(&net, 1);
        bundle.d_weights[0][[1, 1]] = 0.25;
        bundle.d_biases[0][2] = -1.0;
        let stepped = net.sgd_step(&bundle, 1.0).unwrap();
        assert_eq!(stepped.weights()[0][[1, 1]], net.weights()[0][[1, 1]] - 0.25);
        assert_eq!(stepped.biases()[0][2], net.biases()[0][2] + 1.0);

        assert!(net.sgd_step(&bundle, 0.0).is_err());
        assert!(net.sgd_step(&bundle, -0.1).is_err());
    }

    #[test]
    fn two_steps_equal_one_summed_step() {
        let net = random_net(&[3, 4, 2], Activation::SigmoidHidden, 0.0, 7);
        let x = random_matrix(3, 3, 7);
        let g = random_matrix(3, 2, 8);
        let bundle = net.backward(x.view(), g.view()).unwrap();
        let twice = net.sgd_step(&bundle, 0.1).unwrap().sgd_step(&bundle, 0.1).unwrap();
        let mut doubled = bundle.clone();
        doubled.accumulate(&bundle).unwrap();
        let once = net.sgd_step(&doubled, 0.1).unwrap();
        for (a, b) in twice.weights().iter().zip(once.weights()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn batching_equals_stacked_rows() {
        let net = random_net(&[4, 6, 3], Activation::SigmoidHidden, 0.0, 11);
        let x = random_matrix(5, 4, 12);
        let batched = net.forward(x.view()).unwrap();
        for r in 0..5 {
            let single = net.forward(x.slice(s![r..r + 1, ..])).unwrap();
            for c in 0..3 {
                assert!((single[[0, c]] - batched[[r, c]]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = random_net(&[5, 7, 3], Activation::SigmoidAll, 0.001, 13);
        let mut bytes = Vec::new();
        net.write_checkpoint(&mut bytes).unwrap();
        // header: magic + activation + l2 + count + dims
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(bytes.len(), 8 + 4 + 8 + 8 + 3 * 8 + (5 * 7 + 7 + 7 * 3 + 3) * 8);
        let back = DenseNet::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, net);
        assert!(DenseNet::read_checkpoint(&b"garbage!"[..]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn random_nets_pass_gradient_check(
                d_in in 1usize..=8, hidden in 1usize..=8, d_out in 1usize..=8,
                batch in 1usize..=4, seed in 0u64..1000, all in any::<bool>(),
            ) {
                let act = if all { Activation::SigmoidAll } else { Activation::SigmoidHidden };
                let net = random_net(&[d_in, hidden, d_out], act, 0.001, seed);
                let x = random_matrix(batch, d_in, seed + 1);
                let t = random_matrix(batch, d_out, seed + 2);
                check_fd(&net, &x, &t);
            }

            #[test]
            fn sigmoid_outputs_in_open_interval(seed in 0u64..1000, scale in 0.1f64..20.0) {
                let net = random_net(&[3, 4, 2], Activation::SigmoidAll, 0.0, seed);
                let x = random_matrix(4, 3, seed) * scale;
                let out = net.forward(x.view()).unwrap();
                prop_assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }
}
