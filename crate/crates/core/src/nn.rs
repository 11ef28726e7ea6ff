//! Dense feed-forward networks with exact backpropagation, quantile losses
//! and first-order optimizers.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Linear => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    fn grad(self, z: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Activation::Linear),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            _ => Err(Error::InvalidArgument(format!("unknown activation {s:?}"))),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fully connected network. Parameters live in one flat vector, layer by
/// layer, each layer as its `out x in` row-major weights then its biases.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    hidden: Activation,
    output: Activation,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, needed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer; the last entry is the network output.
    activations: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("non-empty cache")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same layout as [`DenseNet::params`].
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

impl DenseNet {
    /// He-uniform weights, zero biases.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let (i, o) = (w[0], w[1]);
            let bound = (6.0 / i as f64).sqrt();
            for p in &mut net.params[off..off + i * o] {
                *p = rng.random_range(-bound..bound);
            }
            off += i * o + o;
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(DenseNet {
            sizes: sizes.to_vec(),
            hidden,
            output,
            params: vec![0.0; n],
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activations(&self) -> (Activation, Activation) {
        (self.hidden, self.output)
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated sizes")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::Shape {
                expected: self.params.len(),
                got: p.len(),
            });
        }
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        self.params.copy_from_slice(p);
        Ok(())
    }

    /// Offsets of `(weights, biases)` of layer `l` in the flat vector.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self.sizes[..l + 1]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    fn act(&self, layer: usize) -> Activation {
        if layer + 2 == self.sizes.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.activations.pop().expect("output"))
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.sizes.len());
        let mut pre = Vec::with_capacity(self.sizes.len() - 1);
        activations.push(x.to_vec());
        let mut off = 0;
        for l in 0..self.sizes.len() - 1 {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + i * o];
            let b = &self.params[off + i * o..off + i * o + o];
            let input = &activations[l];
            let z: Vec<f64> = (0..o)
                .map(|r| {
                    let row = &w[r * i..(r + 1) * i];
                    b[r] + row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>()
                })
                .collect();
            let act = self.act(l);
            activations.push(z.iter().map(|&v| act.apply(v)).collect());
            pre.push(z);
            off += i * o + o;
        }
        Ok(ForwardCache { activations, pre })
    }

    /// Backpropagates `upstream` (dL/d output) through the pass recorded in
    /// `cache`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Gradients> {
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        let mut delta: Vec<f64> = upstream.to_vec();
        for l in (0..self.sizes.len() - 1).rev() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let act = self.act(l);
            for (d, z) in delta.iter_mut().zip(&cache.pre[l]) {
                *d *= act.grad(*z);
            }
            let input = &cache.activations[l];
            for r in 0..o {
                grads[b_off + r] += delta[r];
                if delta[r] != 0.0 {
                    let g = &mut grads[w_off + r * i..w_off + (r + 1) * i];
                    for (gi, xi) in g.iter_mut().zip(input) {
                        *gi += delta[r] * xi;
                    }
                }
            }
            let w = &self.params[w_off..w_off + i * o];
            let mut next = vec![0.0; i];
            for r in 0..o {
                if delta[r] != 0.0 {
                    for (n, a) in next.iter_mut().zip(&w[r * i..(r + 1) * i]) {
                        *n += delta[r] * a;
                    }
                }
            }
            delta = next;
        }
        Ok(Gradients {
            params: grads,
            input: delta,
        })
    }
}

/// `rho_tau(u) = u * (tau - 1{u < 0})`.
pub fn quantile_loss(tau: f64, u: f64) -> f64 {
    u * (tau - if u < 0.0 { 1.0 } else { 0.0 })
}

/// Huber function: quadratic on `[-kappa, kappa]`, linear outside.
pub fn huber(u: f64, kappa: f64) -> f64 {
    if u.abs() <= kappa {
        0.5 * u * u
    } else {
        kappa * (u.abs() - 0.5 * kappa)
    }
}

/// Asymmetric Huber loss `|tau - 1{u<0}| * huber(u) / kappa`.
pub fn quantile_huber_loss(tau: f64, u: f64, kappa: f64) -> f64 {
    (tau - if u < 0.0 { 1.0 } else { 0.0 }).abs() * huber(u, kappa) / kappa
}

/// d/du of [`quantile_huber_loss`].
pub fn quantile_huber_grad(tau: f64, u: f64, kappa: f64) -> f64 {
    let w = (tau - if u < 0.0 { 1.0 } else { 0.0 }).abs();
    let dj = if u.abs() <= kappa { u } else { kappa * u.signum() };
    w * dj / kappa
}

fn check_grads(params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    Ok(())
}

/// Plain gradient descent: `p -= lr * g`.
pub fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    check_grads(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// Bias-corrected Adam step. A zero gradient leaves untouched any
    /// parameter that has never seen a non-zero one.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_grads(params, grads)?;
        if self.m.len() != params.len() {
            return Err(Error::Shape {
                expected: self.m.len(),
                got: params.len(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Strictly increasing quantile levels in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileSet {
    taus: Vec<f64>,
}

impl QuantileSet {
    pub fn new(taus: Vec<f64>) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::InvalidArgument("empty quantile set".into()));
        }
        if taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidArgument("quantile levels must lie in (0, 1)".into()));
        }
        if taus.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("quantile levels must be strictly increasing".into()));
        }
        Ok(QuantileSet { taus })
    }

    /// Builds the set and checks that `alpha` is one of its levels.
    pub fn with_alpha(taus: Vec<f64>, alpha: f64) -> Result<Self> {
        let set = Self::new(taus)?;
        set.index_of(alpha)?;
        Ok(set)
    }

    /// 0.05, 0.10, ..., 0.95 and 0.995.
    pub fn default_grid() -> Self {
        let mut taus: Vec<f64> = (1..=19).map(|k| k as f64 * 0.05).collect();
        taus.push(0.995);
        QuantileSet { taus }
    }

    pub fn taus(&self) -> &[f64] {
        &self.taus
    }

    pub fn len(&self) -> usize {
        self.taus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taus.is_empty()
    }

    pub fn index_of(&self, alpha: f64) -> Result<usize> {
        self.taus
            .iter()
            .position(|t| (t - alpha).abs() < 1e-9)
            .ok_or(Error::MissingQuantile(alpha))
    }
}

/// Writes `<stem>.bin` (little-endian f64 parameters of all networks, in
/// order) and `<stem>.manifest` (one line per network: name, layer sizes,
/// activations, parameter count).
pub fn save_checkpoint(stem: impl AsRef<Path>, nets: &[(&str, &DenseNet)]) -> Result<()> {
    let (bin, manifest) = checkpoint_paths(stem.as_ref());
    let mut bytes = Vec::new();
    let mut text = String::from("# name sizes hidden output n_params\n");
    for (name, net) in nets {
        if name.contains(char::is_whitespace) || name.is_empty() {
            return Err(Error::InvalidArgument(format!("bad network name {name:?}")));
        }
        for p in net.params() {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        let sizes: Vec<String> = net.sizes().iter().map(usize::to_string).collect();
        text.push_str(&format!(
            "{name} {} {} {} {}\n",
            sizes.join(","),
            net.hidden,
            net.output,
            net.params().len()
        ));
    }
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))
}

pub fn load_checkpoint(stem: impl AsRef<Path>) -> Result<Vec<(String, DenseNet)>> {
    let (bin, manifest) = checkpoint_paths(stem.as_ref());
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse {
            path: bin,
            line: 0,
            msg: "length is not a multiple of 8 bytes".into(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let perr = |line: usize, msg: String| Error::Parse {
        path: manifest.clone(),
        line,
        msg,
    };
    let mut out = Vec::new();
    let mut off = 0;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(perr(i + 1, "expected 5 fields".into()));
        }
        let sizes = f[1]
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| perr(i + 1, e.to_string()))?;
        let mut net = DenseNet::zeros(&sizes, f[2].parse()?, f[3].parse()?)?;
        let n: usize = f[4].parse().map_err(|e| perr(i + 1, format!("{e}")))?;
        if n != net.params().len() || off + n > values.len() {
            return Err(perr(i + 1, "parameter count disagrees with shapes or data".into()));
        }
        net.set_params(&values[off..off + n])?;
        off += n;
        out.push((f[0].to_string(), net));
    }
    if off != values.len() {
        return Err(perr(0, format!("{} trailing parameters", values.len() - off)));
    }
    Ok(out)
}

fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("manifest"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    /// Central finite differences of `sum(w_i * out_i)` w.r.t. parameters.
    fn fd_param_grads(net: &DenseNet, x: &[f64], w: &[f64], h: f64) -> Vec<f64> {
        let f = |n: &DenseNet| -> f64 { n.forward(x).unwrap().iter().zip(w).map(|(a, b)| a * b).sum() };
        (0..net.params().len())
            .map(|k| {
                let mut p = net.clone();
                p.params_mut()[k] += h;
                let up = f(&p);
                p.params_mut()[k] -= 2.0 * h;
                (up - f(&p)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn identity_layer() {
        let mut net = DenseNet::zeros(&[3, 3], Activation::Relu, Activation::Linear).unwrap();
        for i in 0..3 {
            net.params_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(net.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn square_through_chain_rule() {
        // f(x) = (w x)^2 with w = 1: upstream 2*y gives df/dx = 2 at x = 1.
        let mut net = DenseNet::zeros(&[1, 1], Activation::Relu, Activation::Linear).unwrap();
        net.params_mut()[0] = 1.0;
        let c = net.forward_cached(&[1.0]).unwrap();
        let y = c.output()[0];
        let g = net.backward(&c, &[2.0 * y]).unwrap();
        assert_eq!(g.input, vec![2.0]);
    }

    #[test]
    fn shape_errors() {
        let net = DenseNet::zeros(&[2, 3], Activation::Relu, Activation::Linear).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape { .. })));
        let c = net.forward_cached(&[1.0, 2.0]).unwrap();
        assert!(net.backward(&c, &[1.0]).is_err());
    }

    #[test]
    fn random_net_matches_finite_differences() {
        let mut r = rng();
        for (sizes, out) in [
            (vec![4, 7, 5, 3], Activation::Linear),
            (vec![6, 8, 1], Activation::Sigmoid),
            (vec![3, 5, 5, 5, 2], Activation::Linear),
        ] {
            let net = DenseNet::new(&sizes, Activation::Relu, out, &mut r).unwrap();
            let x: Vec<f64> = (0..sizes[0]).map(|_| r.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| r.random_range(-1.0..1.0)).collect();
            let c = net.forward_cached(&x).unwrap();
            let g = net.backward(&c, &w).unwrap();
            let fd = fd_param_grads(&net, &x, &w, 1e-5);
            for (a, b) in g.params.iter().zip(&fd) {
                assert!(rel_err(*a, *b) < 1e-4 || (a - b).abs() < 1e-9, "{a} vs {b}");
            }
            let f = |x: &[f64]| -> f64 { net.forward(x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum() };
            for k in 0..x.len() {
                let (mut up, mut dn) = (x.clone(), x.clone());
                up[k] += 1e-5;
                dn[k] -= 1e-5;
                let fd = (f(&up) - f(&dn)) / 2e-5;
                assert!(rel_err(g.input[k], fd) < 1e-4 || (g.input[k] - fd).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn quantile_loss_examples() {
        assert_eq!(quantile_loss(0.5, 0.0), 0.0);
        assert!((quantile_loss(0.9, 1.0) - 0.9).abs() < 1e-15);
        assert!((quantile_loss(0.9, -1.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn quantile_huber_examples() {
        assert!((quantile_huber_loss(0.5, 0.5, 1.0) - 0.0625).abs() < 1e-15);
        assert!((quantile_huber_loss(0.9, -2.0, 1.0) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn huber_reverts_to_quantile_loss() {
        let kappa = 1e-4;
        for tau in [0.05, 0.3, 0.5, 0.9, 0.995] {
            for u in [-3.0, -1.0, -0.2, 0.0, 0.01, 0.7, 2.5] {
                let a = quantile_huber_loss(tau, u, kappa);
                let b = quantile_loss(tau, u);
                assert!((a - b).abs() < 1e-3, "tau {tau} u {u}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn huber_gradient_matches_fd() {
        for tau in [0.1, 0.5, 0.995] {
            for u in [-2.0, -0.5, 0.3, 1.7] {
                let h = 1e-6;
                let fd = (quantile_huber_loss(tau, u + h, 1.0) - quantile_huber_loss(tau, u - h, 1.0)) / (2.0 * h);
                assert!((quantile_huber_grad(tau, u, 1.0) - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn optimizer_examples() {
        let mut w = [1.0];
        let g = [2.0 * w[0]];
        sgd_update(&mut w, &g, 0.1).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-15);
        let mut p = [0.3, -1.2];
        sgd_update(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, [0.3, -1.2]);
        sgd_update(&mut p, &[5.0, 1.0], 0.0).unwrap();
        assert_eq!(p, [0.3, -1.2]);
        let mut adam = Adam::new(2, 0.01);
        adam.update(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, [0.3, -1.2]);
        assert!(matches!(sgd_update(&mut p, &[f64::NAN, 0.0], 0.1), Err(Error::NonFinite(_))));
        assert!(adam.update(&mut p, &[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn quantile_set_rules() {
        let t = QuantileSet::default_grid();
        assert_eq!(t.len(), 20);
        assert_eq!(t.index_of(0.995).unwrap(), 19);
        assert!(QuantileSet::with_alpha(vec![0.1, 0.5], 0.9).is_err());
        assert!(QuantileSet::new(vec![0.5, 0.5]).is_err());
        assert!(QuantileSet::new(vec![0.0, 0.5]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng();
        let a = DenseNet::new(&[3, 4, 2], Activation::Relu, Activation::Linear, &mut r).unwrap();
        let b = DenseNet::new(&[5, 1], Activation::Relu, Activation::Sigmoid, &mut r).unwrap();
        let stem = dir.path().join("ckpt");
        save_checkpoint(&stem, &[("a", &a), ("b", &b)]).unwrap();
        let back = load_checkpoint(&stem).unwrap();
        assert_eq!(back[0], ("a".to_string(), a));
        assert_eq!(back[1], ("b".to_string(), b));
    }

    /// Sort-based empirical quantile: the smallest order statistic whose
    /// empirical CDF reaches tau.
    fn sort_quantile(xs: &[f64], tau: f64) -> f64 {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        let k = ((tau * v.len() as f64).ceil() as usize).max(1) - 1;
        v[k]
    }

    proptest! {
        #[test]
        fn pinball_minimizer_is_empirical_quantile(
            xs in prop::collection::vec(-100.0f64..100.0, 1..40),
            tau in 0.01f64..0.99,
        ) {
            let loss = |q: f64| xs.iter().map(|x| quantile_loss(tau, x - q)).sum::<f64>();
            // The objective is piecewise linear with kinks at the samples, so
            // a minimizer is attained at a sample.
            let best = xs.iter().copied().fold(f64::INFINITY, |b, q| b.min(loss(q)));
            let oracle = sort_quantile(&xs, tau);
            prop_assert!((loss(oracle) - best).abs() <= 1e-9 * (1.0 + best.abs()));
        }

        #[test]
        fn huber_nonneg_and_zero_only_at_origin(tau in 0.01f64..0.99, u in -50.0f64..50.0, kappa in 0.01f64..5.0) {
            let l = quantile_huber_loss(tau, u, kappa);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, u == 0.0);
        }
    }
}
