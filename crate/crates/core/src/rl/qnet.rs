//! Fully connected Q-network with ReLU hidden layers and a linear head.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RlError;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    pub layers: Vec<Dense>,
}

/// Gradients laid out like [`QNetwork::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
}

impl QNetwork {
    /// He-uniform hidden layers, Glorot-uniform output layer, zero biases.
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| {
                let (fan_in, fan_out) = (d[0], d[1]);
                let limit = if k == last {
                    (6.0 / (fan_in + fan_out) as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                Dense {
                    w: Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit)),
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        QNetwork { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        QNetwork {
            layers: dims
                .windows(2)
                .map(|d| Dense { w: Array2::zeros((d[1], d[0])), b: Array1::zeros(d[1]) })
                .collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.b.len()));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty network").b.len()
    }

    /// Batch forward pass; rows of `x` are states.
    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = a.dot(&l.w.t());
            z += &l.b;
            if k < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        a
    }

    /// Q-values of a single state.
    pub fn q_values(&self, s: &[f64]) -> Result<Vec<f64>, RlError> {
        if s.len() != self.input_dim() {
            return Err(RlError::Shape { expected: self.input_dim(), actual: s.len() });
        }
        let x = ArrayView2::from_shape((1, s.len()), s).expect("row vector");
        Ok(self.forward(x).row(0).to_vec())
    }

    /// Mean squared TD error on the taken actions and its gradient; targets
    /// are constants.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, actions: &[usize], targets: &[f64]) -> (f64, Grads) {
        let batch = x.nrows();
        let last = self.layers.len() - 1;
        // post-activations a_0 = x, a_1, …, a_L
        let mut acts: Vec<Array2<f64>> = vec![x.to_owned()];
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = acts[k].dot(&l.w.t());
            z += &l.b;
            if k < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        let q = &acts[last + 1];
        let mut delta = Array2::<f64>::zeros(q.raw_dim());
        let mut loss = 0.0;
        for (r, (&a, &y)) in actions.iter().zip(targets).enumerate() {
            let diff = q[[r, a]] - y;
            loss += diff * diff;
            delta[[r, a]] = 2.0 * diff / batch as f64;
        }
        loss /= batch as f64;

        let mut gw = vec![Array2::zeros((0, 0)); self.layers.len()];
        let mut gb = vec![Array1::zeros(0); self.layers.len()];
        for k in (0..self.layers.len()).rev() {
            gw[k] = delta.t().dot(&acts[k]);
            gb[k] = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut back = delta.dot(&self.layers[k].w);
                // ReLU derivative from the post-activation
                ndarray::Zip::from(&mut back).and(&acts[k]).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = back;
            }
        }
        (loss, Grads { w: gw, b: gb })
    }

    pub fn loss(&self, x: ArrayView2<f64>, actions: &[usize], targets: &[f64]) -> f64 {
        let q = self.forward(x);
        actions.iter().zip(targets).enumerate().map(|(r, (&a, &y))| (q[[r, a]] - y).powi(2)).sum::<f64>()
            / x.nrows() as f64
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn locate(&self, mut k: usize) -> (usize, bool, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            if k < l.w.len() {
                return (li, true, k);
            }
            k -= l.w.len();
            if k < l.b.len() {
                return (li, false, k);
            }
            k -= l.b.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access (layer by layer, weights row-major then bias).
    pub fn param(&self, k: usize) -> f64 {
        let (li, is_w, j) = self.locate(k);
        let l = &self.layers[li];
        if is_w {
            l.w.as_slice().expect("standard layout")[j]
        } else {
            l.b[j]
        }
    }

    pub fn set_param(&mut self, k: usize, v: f64) {
        let (li, is_w, j) = self.locate(k);
        let l = &mut self.layers[li];
        if is_w {
            l.w.as_slice_mut().expect("standard layout")[j] = v;
        } else {
            l.b[j] = v;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

impl Grads {
    pub fn get(&self, net: &QNetwork, k: usize) -> f64 {
        let (li, is_w, j) = net.locate(k);
        if is_w {
            self.w[li].as_slice().expect("standard layout")[j]
        } else {
            self.b[li][j]
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(net: &QNetwork, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zero = Grads {
            w: net.layers.iter().map(|l| Array2::zeros(l.w.raw_dim())).collect(),
            b: net.layers.iter().map(|l| Array1::zeros(l.b.raw_dim())).collect(),
        };
        Adam { lr, beta1, beta2, eps, t: 0, m: zero.clone(), v: zero }
    }

    pub fn step(&mut self, net: &mut QNetwork, g: &Grads) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        for k in 0..net.layers.len() {
            ndarray::Zip::from(&mut net.layers[k].w)
                .and(&mut self.m.w[k])
                .and(&mut self.v.w[k])
                .and(&g.w[k])
                .for_each(|p, m, v, &gr| {
                    *m = b1 * *m + (1.0 - b1) * gr;
                    *v = b2 * *v + (1.0 - b2) * gr * gr;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            ndarray::Zip::from(&mut net.layers[k].b)
                .and(&mut self.m.b[k])
                .and(&mut self.v.b[k])
                .and(&g.b[k])
                .for_each(|p, m, v, &gr| {
                    *m = b1 * *m + (1.0 - b1) * gr;
                    *v = b2 * *v + (1.0 - b2) * gr * gr;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Model file layout: widths plus row-major weights per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRecord {
    pub dims: Vec<usize>,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl From<&QNetwork> for ModelRecord {
    fn from(net: &QNetwork) -> Self {
        ModelRecord {
            dims: net.dims(),
            layers: net
                .layers
                .iter()
                .map(|l| LayerRecord { weights: l.w.iter().copied().collect(), bias: l.b.to_vec() })
                .collect(),
        }
    }
}

impl TryFrom<ModelRecord> for QNetwork {
    type Error = RlError;

    fn try_from(r: ModelRecord) -> Result<Self, RlError> {
        if r.dims.len() != r.layers.len() + 1 {
            return Err(RlError::Model(format!("{} widths for {} layers", r.dims.len(), r.layers.len())));
        }
        let layers = r
            .layers
            .into_iter()
            .enumerate()
            .map(|(k, l)| {
                let (fin, fout) = (r.dims[k], r.dims[k + 1]);
                let w = Array2::from_shape_vec((fout, fin), l.weights)
                    .map_err(|e| RlError::Model(format!("layer {k}: {e}")))?;
                if l.bias.len() != fout {
                    return Err(RlError::Model(format!("layer {k}: bias has {} entries, expected {fout}", l.bias.len())));
                }
                Ok(Dense { w, b: Array1::from(l.bias) })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(QNetwork { layers })
    }
}

impl Serialize for QNetwork {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ModelRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for QNetwork {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        QNetwork::try_from(ModelRecord::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> (Array2<f64>, Vec<usize>, Vec<f64>) {
        let x = Array2::from_shape_fn((b, d), |_| rng.random_range(-1.0..1.0));
        let a = (0..b).map(|_| rng.random_range(0..9)).collect();
        let y = (0..b).map(|_| rng.random_range(-2.0..2.0)).collect();
        (x, a, y)
    }

    /// Straight-line oracle: explicit loops, no ndarray products.
    fn oracle_forward(net: &QNetwork, s: &[f64]) -> Vec<f64> {
        let mut a = s.to_vec();
        for (k, l) in net.layers.iter().enumerate() {
            let mut z = vec![0.0; l.b.len()];
            for (o, zo) in z.iter_mut().enumerate() {
                let mut acc = l.b[o];
                for (i, ai) in a.iter().enumerate() {
                    acc += l.w[[o, i]] * ai;
                }
                *zo = if k + 1 < net.layers.len() { acc.max(0.0) } else { acc };
            }
            a = z;
        }
        a
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = QNetwork::zeros(&[12, 256, 256, 9]);
        assert_eq!(net.q_values(&[0.3; 12]).unwrap(), vec![0.0; 9]);
    }

    #[test]
    fn input_width_is_four_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = QNetwork::new(&[4 * 143, 256, 256, 9], &mut rng);
        assert_eq!(net.input_dim(), 572);
        assert_eq!(net.output_dim(), 9);
        assert!(matches!(net.q_values(&[0.0; 571]), Err(RlError::Shape { expected: 572, actual: 571 })));
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = QNetwork::new(&[20, 256, 256, 9], &mut rng);
        for l in &mut net.layers {
            l.b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        let s: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = net.q_values(&s).unwrap();
        let o = oracle_forward(&net, &s);
        for (a, b) in q.iter().zip(&o) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        assert_eq!(net.q_values(&s).unwrap(), q);
    }

    #[test]
    fn two_parameter_net_gradient_is_analytic() {
        // Q(s) = w·s + b with a single output; loss (Q - y)^2.
        let mut net = QNetwork::zeros(&[1, 1]);
        net.layers[0].w[[0, 0]] = 0.7;
        net.layers[0].b[0] = -0.2;
        let x = Array2::from_elem((1, 1), 1.5);
        let (loss, g) = net.loss_and_grad(x.view(), &[0], &[2.0]);
        let q = 0.7 * 1.5 - 0.2;
        assert!((loss - (q - 2.0f64).powi(2)).abs() < 1e-15);
        assert!((g.w[0][[0, 0]] - 2.0 * (q - 2.0) * 1.5).abs() < 1e-15);
        assert!((g.b[0][0] - 2.0 * (q - 2.0)).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = QNetwork::new(&[16, 32, 32, 9], &mut rng);
        for l in &mut net.layers {
            l.b.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        let (x, a, y) = random_batch(&mut rng, 8, 16);
        let (_, g) = net.loss_and_grad(x.view(), &a, &y);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for _ in 0..60 {
            let k = rng.random_range(0..net.num_params());
            let p = net.param(k);
            net.set_param(k, p + h);
            let up = net.loss(x.view(), &a, &y);
            net.set_param(k, p - h);
            let down = net.loss(x.view(), &a, &y);
            net.set_param(k, p);
            let num = (up - down) / (2.0 * h);
            let ana = g.get(&net, k);
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-7);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn zero_residual_leaves_parameters_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = QNetwork::new(&[6, 8, 8, 9], &mut rng);
        let (x, a, _) = random_batch(&mut rng, 5, 6);
        let q = net.forward(x.view());
        let y: Vec<f64> = a.iter().enumerate().map(|(r, &ai)| q[[r, ai]]).collect();
        let (loss, g) = net.loss_and_grad(x.view(), &a, &y);
        assert_eq!(loss, 0.0);
        let before = net.clone();
        let mut adam = Adam::new(&net, 1e-4, 0.9, 0.999, 1e-8);
        adam.step(&mut net, &g);
        assert_eq!(net, before);
    }

    #[test]
    fn small_step_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let mut net = QNetwork::new(&[10, 32, 32, 9], &mut rng);
            let (x, a, y) = random_batch(&mut rng, 16, 10);
            let (loss, g) = net.loss_and_grad(x.view(), &a, &y);
            assert!(loss > 0.0);
            let mut adam = Adam::new(&net, 1e-4, 0.9, 0.999, 1e-8);
            adam.step(&mut net, &g);
            assert!(net.loss(x.view(), &a, &y) < loss);
        }
    }

    #[test]
    fn model_record_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = QNetwork::new(&[5, 7, 9], &mut rng);
        let json = serde_json::to_string(&net).unwrap();
        let back: QNetwork = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
        let bad = r#"{"dims":[2,3],"layers":[{"weights":[1,2,3],"bias":[0,0,0]}]}"#;
        assert!(serde_json::from_str::<QNetwork>(bad).is_err());
    }
}
