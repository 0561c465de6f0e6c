//! Classifiers split into a representation trunk, a linear content head and
//! a style pathway that reads the same representation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::causal_align::{orthogonal_style_map, orthogonality_residual, realign_style_map, CovarianceEstimate};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    MnistCnn,
    Mlp,
}

/// Layer layout of a classifier.
///
/// For `mnist_cnn`, each entry of `conv_blocks` is a run of 3x3 convolutions
/// (with ReLU) followed by a 2x2 max pool. `hidden` are the fully connected
/// widths; the last one is the representation dimension `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub arch: Architecture,
    /// `[c, h, w]` for `mnist_cnn`, `[features]` for `mlp`.
    pub input: Vec<usize>,
    #[serde(default)]
    pub conv_blocks: Vec<Vec<usize>>,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub style_dim: usize,
    /// Style noise scale.
    pub sigma: f64,
    /// Width of the hidden layer of a non-linear style classifier; linear when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style_hidden: Option<usize>,
}

/// Default style dimension for representation width `d` and `k` classes.
pub fn default_style_dim(d: usize, k: usize) -> usize {
    64.min(d.saturating_sub(k))
}

impl NetworkSpec {
    /// conv 32-32-pool-64-64-pool, fc 200-200, 10 classes.
    pub fn mnist_cnn() -> Self {
        Self::cnn(vec![vec![32, 32], vec![64, 64]], vec![200, 200])
    }

    /// Narrow MNIST network used for desk-scale runs: conv 16-pool-32-pool, fc 128.
    pub fn mnist_desk() -> Self {
        Self::cnn(vec![vec![16], vec![32]], vec![128])
    }

    fn cnn(conv_blocks: Vec<Vec<usize>>, hidden: Vec<usize>) -> Self {
        let d = *hidden.last().expect("non-empty");
        NetworkSpec {
            arch: Architecture::MnistCnn,
            input: vec![1, 28, 28],
            conv_blocks,
            hidden,
            classes: 10,
            style_dim: default_style_dim(d, 10),
            sigma: 1.0,
            style_hidden: None,
        }
    }

    pub fn mlp(input: usize, hidden: Vec<usize>, classes: usize) -> Self {
        let d = hidden.last().copied().unwrap_or(input);
        NetworkSpec {
            arch: Architecture::Mlp,
            input: vec![input],
            conv_blocks: Vec::new(),
            hidden,
            classes,
            style_dim: default_style_dim(d, classes).max(1),
            sigma: 1.0,
            style_hidden: None,
        }
    }

    pub fn with_style_dim(mut self, style_dim: usize) -> Self {
        self.style_dim = style_dim;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn repr_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or_else(|| self.flat_features())
    }

    pub fn input_numel(&self) -> usize {
        self.input.iter().product()
    }

    /// Width of the trunk output before the fully connected layers.
    fn flat_features(&self) -> usize {
        match self.arch {
            Architecture::Mlp => self.input_numel(),
            Architecture::MnistCnn => {
                let (mut c, mut h, mut w) = (self.input[0], self.input[1], self.input[2]);
                for block in &self.conv_blocks {
                    for &f in block {
                        c = f;
                        h = h.saturating_sub(2);
                        w = w.saturating_sub(2);
                    }
                    h /= 2;
                    w /= 2;
                }
                c * h * w
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.style_dim == 0 {
            return bad("style dimension must be >= 1".into());
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("style noise scale must be >= 0, got {}", self.sigma));
        }
        if self.hidden.iter().any(|&h| h == 0) || self.style_hidden == Some(0) {
            return bad("layer widths must be positive".into());
        }
        match self.arch {
            Architecture::Mlp => {
                if self.input.len() != 1 || self.input[0] == 0 || !self.conv_blocks.is_empty() {
                    return bad(format!("mlp needs a 1-d input and no conv blocks, got {:?}", self.input));
                }
            }
            Architecture::MnistCnn => {
                if self.input.len() != 3 || self.input.contains(&0) {
                    return bad(format!("mnist_cnn needs a [c, h, w] input, got {:?}", self.input));
                }
                if self.conv_blocks.iter().any(|b| b.is_empty() || b.contains(&0)) {
                    return bad("conv blocks must be non-empty with positive widths".into());
                }
                let (mut h, mut w) = (self.input[1], self.input[2]);
                for block in &self.conv_blocks {
                    for _ in block {
                        if h < 3 || w < 3 {
                            return bad(format!("input {:?} too small for the conv stack", self.input));
                        }
                        h -= 2;
                        w -= 2;
                    }
                    if h < 2 || w < 2 {
                        return bad(format!("input {:?} too small for the conv stack", self.input));
                    }
                    h /= 2;
                    w /= 2;
                }
            }
        }
        let (d, k) = (self.repr_dim(), self.classes);
        if self.style_dim + k > d {
            return Err(Error::StyleDim {
                requested: self.style_dim,
                available: d.saturating_sub(k),
            });
        }
        Ok(())
    }
}

/// Weight and bias of an affine or convolutional layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Layer<T> {
    /// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
    fn he_uniform(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let out = shape[0];
        Layer {
            weight: Tensor::uniform(shape, -bound, bound, rng),
            bias: Tensor::zeros([out]),
        }
    }
}

/// Trainable parameters and derived style quantities of a classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T: Real = f64> {
    spec: NetworkSpec,
    pub convs: Vec<Layer<T>>,
    pub fcs: Vec<Layer<T>>,
    /// Content head `W_c` (`k x d`) and bias.
    pub head: Layer<T>,
    /// Hidden layer of a non-linear style classifier.
    pub style_hidden: Option<Layer<T>>,
    /// Style classifier `W_g` (`k x d_s`, or `k x hidden` when non-linear).
    pub style_cls: Tensor<T>,
    style_map: Tensor<f64>,
    covariance: CovarianceEstimate,
}

/// Graph handles of a classifier's parameters, in [`Classifier::params`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub ids: Vec<NodeId>,
    pub style_map: NodeId,
}

impl BoundParams {
    pub fn content_head(&self, c: &Classifier<impl Real>) -> NodeId {
        self.ids[2 * (c.convs.len() + c.fcs.len())]
    }

    pub fn style_cls(&self) -> NodeId {
        *self.ids.last().expect("style classifier is always bound")
    }
}

/// Graph outputs of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub repr: NodeId,
    pub logits: NodeId,
}

pub const COVARIANCE_EMA: f64 = 0.99;
pub const COVARIANCE_SHRINKAGE: f64 = 0.1;

pub fn build_classifier<T: Real>(spec: NetworkSpec, seed: u64) -> Result<Classifier<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut convs = Vec::new();
    let mut fcs = Vec::new();
    let mut fan_in = match spec.arch {
        Architecture::Mlp => spec.input[0],
        Architecture::MnistCnn => {
            let mut c = spec.input[0];
            for &f in spec.conv_blocks.iter().flatten() {
                convs.push(Layer::he_uniform(vec![f, c, 3, 3], &mut rng));
                c = f;
            }
            spec.flat_features()
        }
    };
    for &h in &spec.hidden {
        fcs.push(Layer::he_uniform(vec![h, fan_in], &mut rng));
        fan_in = h;
    }
    let (d, k, ds) = (spec.repr_dim(), spec.classes, spec.style_dim);
    let head = Layer::he_uniform(vec![k, d], &mut rng);
    let style_hidden = spec.style_hidden.map(|h| Layer::he_uniform(vec![h, ds], &mut rng));
    let g_in = spec.style_hidden.unwrap_or(ds);
    let style_cls = Layer::<T>::he_uniform(vec![k, g_in], &mut rng).weight;
    let covariance = CovarianceEstimate::identity(d, COVARIANCE_EMA, COVARIANCE_SHRINKAGE)?;
    let style_map = orthogonal_style_map(&head.weight.cast(), &covariance, ds)?;
    Ok(Classifier {
        spec,
        convs,
        fcs,
        head,
        style_hidden,
        style_cls,
        style_map,
        covariance,
    })
}

impl<T: Real> Classifier<T> {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn style_map(&self) -> &Tensor<f64> {
        &self.style_map
    }

    pub fn covariance(&self) -> &CovarianceEstimate {
        &self.covariance
    }

    pub fn sigma(&self) -> f64 {
        self.spec.sigma
    }

    /// All trainable tensors: trunk layers, content head, style pathway.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for l in self.convs.iter().chain(&self.fcs).chain([&self.head]).chain(&self.style_hidden) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.style_cls);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in self
            .convs
            .iter_mut()
            .chain(self.fcs.iter_mut())
            .chain([&mut self.head])
            .chain(self.style_hidden.iter_mut())
        {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.style_cls);
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        let layers = (0..self.convs.len())
            .map(|i| format!("conv{i}"))
            .chain((0..self.fcs.len()).map(|i| format!("fc{i}")))
            .chain(["content_head".to_string()])
            .chain(self.style_hidden.iter().map(|_| "style_hidden".to_string()));
        for name in layers {
            out.push(format!("{name}.weight"));
            out.push(format!("{name}.bias"));
        }
        out.push("style_cls.weight".into());
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Registers parameters on a graph as differentiable leaves (`trainable`)
    /// or as constants. The style map is always a constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let ids = self
            .params()
            .into_iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BoundParams {
            ids,
            style_map: g.constant(self.style_map.cast()),
        }
    }

    /// Records the trunk and content head on `g`.
    pub fn forward(&self, g: &mut Graph<T>, p: &BoundParams, x: NodeId) -> Result<Forward> {
        let xs = g.value(x).shape();
        let expect: Vec<usize> = std::iter::once(xs.first().copied().unwrap_or(0))
            .chain(self.spec.input.iter().copied())
            .collect();
        if xs != expect.as_slice() {
            return Err(Error::shape("forward", format!("input {xs:?}, model expects [n, {:?}]", self.spec.input)));
        }
        let mut ids = p.ids.iter().copied();
        let mut next = || ids.next().expect("bound parameter count matches layout");
        let mut h = x;
        if self.spec.arch == Architecture::MnistCnn {
            for block in &self.spec.conv_blocks {
                for _ in block {
                    let (w, b) = (next(), next());
                    h = g.conv2d(h, w, Some(b), 0)?;
                    h = g.relu(h)?;
                }
                h = g.maxpool2x2(h)?;
            }
            h = g.flatten(h)?;
        }
        for _ in &self.fcs {
            let (w, b) = (next(), next());
            h = g.linear(h, w, Some(b))?;
            h = g.relu(h)?;
        }
        let (w, b) = (next(), next());
        let logits = g.linear(h, w, Some(b))?;
        Ok(Forward { repr: h, logits })
    }

    /// Style mean `mu = R W_s^T`.
    pub fn style_mean(&self, g: &mut Graph<T>, p: &BoundParams, repr: NodeId) -> Result<NodeId> {
        g.linear(repr, p.style_map, None)
    }

    /// Logits without a gradient tape.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.eval(x)?.1)
    }

    /// `(representation, logits)` without a gradient tape.
    pub fn eval(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let f = self.forward(&mut g, &p, xn)?;
        Ok((g.value(f.repr).clone(), g.value(f.logits).clone()))
    }

    /// Arg-max class per row.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Rebuilds `W_s` from the current content head and covariance estimate.
    /// Re-projects `W_s` onto the current `null(W_c M)`, staying as close as
    /// possible to the previous map.
    pub fn reproject_style(&mut self) -> Result<()> {
        self.style_map = realign_style_map(&self.style_map, &self.head.weight.cast(), &self.covariance)?;
        Ok(())
    }

    pub fn update_covariance(&mut self, reprs: &Tensor<T>) -> Result<()> {
        self.covariance.update(reprs)
    }

    /// `max |W_s M W_c^T|` for the current state.
    pub fn orthogonality_residual(&self) -> f64 {
        orthogonality_residual(&self.style_map, &self.head.weight.cast(), &self.covariance.cov)
    }

    /// Precision conversion of every tensor.
    pub fn cast<U: Real>(&self) -> Classifier<U> {
        let layer = |l: &Layer<T>| Layer {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        Classifier {
            spec: self.spec.clone(),
            convs: self.convs.iter().map(layer).collect(),
            fcs: self.fcs.iter().map(layer).collect(),
            head: layer(&self.head),
            style_hidden: self.style_hidden.as_ref().map(layer),
            style_cls: self.style_cls.cast(),
            style_map: self.style_map.clone(),
            covariance: self.covariance.clone(),
        }
    }

    /// Reassembles a classifier from stored parts, checking every shape.
    pub fn from_parts(
        spec: NetworkSpec,
        params: Vec<Tensor<T>>,
        style_map: Tensor<f64>,
        covariance: CovarianceEstimate,
    ) -> Result<Self> {
        let mut c = build_classifier::<T>(spec, 0)?;
        if params.len() != c.params().len() {
            return Err(Error::Format(format!("expected {} parameter tensors, got {}", c.params().len(), params.len())));
        }
        for (slot, t) in c.params_mut().into_iter().zip(params) {
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!("parameter shape {:?} vs {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        let (d, ds) = (c.spec.repr_dim(), c.spec.style_dim);
        if style_map.shape() != [ds, d] || covariance.cov.shape() != [d, d] || covariance.mean.len() != d {
            return Err(Error::Format("style map or covariance shape does not match the network".into()));
        }
        c.style_map = style_map;
        c.covariance = covariance;
        Ok(c)
    }
}

pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().expect("logits have a class dimension");
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_cnn_layout() {
        let c = build_classifier::<f64>(NetworkSpec::mnist_cnn(), 0).unwrap();
        let widths: Vec<usize> = c.convs.iter().map(|l| l.weight.shape()[0]).collect();
        assert_eq!(widths, [32, 32, 64, 64]);
        assert_eq!(c.fcs[0].weight.shape(), &[200, 64 * 4 * 4]);
        assert_eq!(c.fcs[1].weight.shape(), &[200, 200]);
        assert_eq!(c.head.weight.shape(), &[10, 200]);
        assert_eq!(c.style_map().shape(), &[64, 200]);
    }

    #[test]
    fn mnist_cnn_representation_shape() {
        let c = build_classifier::<f32>(NetworkSpec::mnist_cnn(), 1).unwrap();
        let (r, z) = c.eval(&Tensor::zeros([1, 1, 28, 28])).unwrap();
        assert_eq!(r.shape(), &[1, 200]);
        assert_eq!(z.shape(), &[1, 10]);
    }

    #[test]
    fn mlp_style_map_orthogonal_at_identity() {
        let spec = NetworkSpec::mlp(4, vec![8], 3).with_style_dim(5);
        let c = build_classifier::<f64>(spec, 2).unwrap();
        assert_eq!(c.style_map().shape(), &[5, 8]);
        assert!(c.orthogonality_residual() < 1e-12);
    }

    #[test]
    fn style_dim_too_large() {
        let spec = NetworkSpec::mlp(4, vec![8], 3).with_style_dim(6);
        assert!(matches!(
            build_classifier::<f64>(spec, 0),
            Err(Error::StyleDim { requested: 6, available: 5 })
        ));
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let a = build_classifier::<f64>(NetworkSpec::mnist_desk(), 7).unwrap();
        let b = build_classifier::<f64>(NetworkSpec::mnist_desk(), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_head_gives_bias_logits() {
        let mut c = build_classifier::<f64>(NetworkSpec::mlp(3, vec![6], 2).with_style_dim(2), 0).unwrap();
        c.head.weight = Tensor::zeros([2, 6]);
        c.head.bias = Tensor::from_vec(vec![0.5, -1.5]);
        let z = c.logits(&Tensor::full([4, 3], 0.3)).unwrap();
        for row in z.data().chunks(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let c = build_classifier::<f64>(NetworkSpec::mlp(3, vec![6], 2).with_style_dim(2), 0).unwrap();
        assert!(c.logits(&Tensor::zeros([4, 5])).is_err());
    }

    #[test]
    fn round_trip_parts() {
        let c = build_classifier::<f64>(NetworkSpec::mlp(3, vec![6], 2).with_style_dim(2), 4).unwrap();
        let params = c.params().into_iter().cloned().collect();
        let back = Classifier::from_parts(c.spec().clone(), params, c.style_map().clone(), c.covariance().clone()).unwrap();
        assert_eq!(back, c);
    }
}
