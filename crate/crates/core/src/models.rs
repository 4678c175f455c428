//! Surrogate and target networks.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datastore::DatasetSplit;
use crate::diff::{Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::SeedTree;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Flatten, then `hidden` ReLU layers, then a linear classifier.
    Mlp { hidden: Vec<usize> },
    /// Per entry of `channels`: 3×3 conv (pad 1), ReLU, 2×2 average pool.
    /// Then one ReLU dense layer of width `dense` and a linear classifier.
    SmallCnn { channels: Vec<usize>, dense: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input: InputShape,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn small_cnn(input: InputShape, num_classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::SmallCnn { channels: vec![8, 16], dense: 64 },
            input,
            num_classes,
        }
    }

    pub fn mlp(input: InputShape, num_classes: usize) -> Self {
        ModelSpec { architecture: Architecture::Mlp { hidden: vec![128, 64] }, input, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Domain(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        let InputShape { channels, height, width } = self.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Domain("input extents must be positive".into()));
        }
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                if hidden.contains(&0) {
                    return Err(Error::Domain("mlp widths must be at least 1".into()));
                }
            }
            Architecture::SmallCnn { channels, dense } => {
                if channels.is_empty() || channels.contains(&0) || *dense == 0 {
                    return Err(Error::Domain("small_cnn widths must be at least 1".into()));
                }
                let f = 1usize << channels.len();
                if height % f != 0 || width % f != 0 {
                    return Err(Error::Domain(format!(
                        "input {height}x{width} not divisible by {f} for {} pooling stages",
                        channels.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn layers(&self) -> Vec<Layer> {
        let InputShape { channels, height, width } = self.input;
        let mut out = Vec::new();
        match &self.architecture {
            Architecture::Mlp { hidden } => {
                let mut din = channels * height * width;
                for (i, &h) in hidden.iter().enumerate() {
                    out.push(Layer::Dense { name: format!("fc{i}"), din, dout: h, relu: true });
                    din = h;
                }
                out.push(Layer::Dense { name: "head".into(), din, dout: self.num_classes, relu: false });
            }
            Architecture::SmallCnn { channels: widths, dense } => {
                let (mut c, mut h, mut w) = (channels, height, width);
                for (i, &k) in widths.iter().enumerate() {
                    out.push(Layer::Conv { name: format!("conv{i}"), cin: c, cout: k });
                    c = k;
                    h /= 2;
                    w /= 2;
                }
                let din = c * h * w;
                out.push(Layer::Dense { name: "fc0".into(), din, dout: *dense, relu: true });
                out.push(Layer::Dense { name: "head".into(), din: *dense, dout: self.num_classes, relu: false });
            }
        }
        out
    }

    pub fn input_example_shape(&self, n: usize) -> Shape {
        Shape::new(n, self.input.channels, self.input.height, self.input.width)
    }
}

enum Layer {
    Conv { name: String, cin: usize, cout: usize },
    Dense { name: String, din: usize, dout: usize, relu: bool },
}

impl Layer {
    fn name(&self) -> &str {
        match self {
            Layer::Conv { name, .. } | Layer::Dense { name, .. } => name,
        }
    }

    fn param_shapes(&self) -> (Shape, Shape, usize) {
        match *self {
            Layer::Conv { cin, cout, .. } => (Shape::new(cout, cin, 3, 3), Shape::flat(1, cout), cin * 9),
            Layer::Dense { din, dout, .. } => (Shape::new(1, 1, din, dout), Shape::flat(1, dout), din),
        }
    }
}

/// Parameters plus momentum buffers, keyed `<layer>.weight` / `<layer>.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub spec: ModelSpec,
    pub params: BTreeMap<String, Tensor<T>>,
    pub momentum: BTreeMap<String, Tensor<T>>,
}

pub type ParamGrads<T> = BTreeMap<String, Tensor<T>>;

/// Kaiming-uniform weights (`U(−√(6/fan_in), √(6/fan_in))`), zero biases.
pub fn init_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ModelState<T>> {
    spec.validate()?;
    let tree = SeedTree::new(seed).child("init");
    let mut params = BTreeMap::new();
    for layer in spec.layers() {
        let (ws, bs, fan_in) = layer.param_shapes();
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut rng = tree.child(layer.name()).rng();
        let w = Tensor::from_fn(ws, |_| T::of(rng.random_range(-bound..bound)));
        params.insert(format!("{}.weight", layer.name()), w);
        params.insert(format!("{}.bias", layer.name()), Tensor::zeros(bs));
    }
    let momentum = params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
    Ok(ModelState { spec: spec.clone(), params, momentum })
}

/// Heavy-ball update: `v ← μ·v + g`, `θ ← θ − lr·v`.
pub fn sgd_step<T: Scalar>(mut state: ModelState<T>, grads: &ParamGrads<T>, lr: T, momentum: T) -> Result<ModelState<T>> {
    state.sgd_step(grads, lr, momentum)?;
    Ok(state)
}

/// Forward result of [`ModelState::forward`].
pub struct Forward {
    pub logits: NodeId,
    pub params: Vec<(String, NodeId)>,
}

impl<T: Scalar> ModelState<T> {
    pub fn sgd_step(&mut self, grads: &ParamGrads<T>, lr: T, momentum: T) -> Result<()> {
        if let Some(k) = grads.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::State(format!("gradient for unknown parameter {k}")));
        }
        for (name, p) in self.params.iter_mut() {
            let v = self.momentum.get_mut(name).expect("momentum keys mirror params");
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shapes("sgd_step", p.shape(), g.shape()));
                }
            }
            for (i, (vi, pi)) in v.data_mut().iter_mut().zip(p.data_mut()).enumerate() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                *vi = momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }

    /// Records the network on `graph` starting from input node `x`.
    pub fn forward(&self, graph: &mut Graph<T>, x: NodeId, track_params: bool) -> Result<Forward> {
        let mut ids = Vec::new();
        let mut h = x;
        for layer in self.spec.layers() {
            let wname = format!("{}.weight", layer.name());
            let bname = format!("{}.bias", layer.name());
            let w = graph.leaf(self.params[&wname].clone(), track_params);
            let b = graph.leaf(self.params[&bname].clone(), track_params);
            ids.push((wname, w));
            ids.push((bname, b));
            match layer {
                Layer::Conv { .. } => {
                    h = graph.conv2d(h, w, b, 1, 1)?;
                    h = graph.relu(h)?;
                    h = graph.avg_pool2(h)?;
                }
                Layer::Dense { relu, .. } => {
                    if graph.value(h).shape().c != 1 || graph.value(h).shape().h != 1 {
                        h = graph.flatten(h)?;
                    }
                    h = graph.dense(h, w, b)?;
                    if relu {
                        h = graph.relu(h)?;
                    }
                }
            }
        }
        Ok(Forward { logits: h, params: ids })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let want = self.spec.input_example_shape(x.shape().n);
        if x.shape() != want {
            return Err(Error::shapes("model input", want, x.shape()));
        }
        Ok(())
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xi = g.leaf(x.clone(), false);
        let f = self.forward(&mut g, xi, false)?;
        Ok(g.value(f.logits).clone())
    }

    /// Mean loss and its gradient with respect to the input batch.
    pub fn input_gradient(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xi = g.leaf(x.clone(), true);
        let f = self.forward(&mut g, xi, false)?;
        let (loss_id, ce) = g.cross_entropy(f.logits, labels)?;
        let mut grads = g.backward(loss_id, T::one())?;
        let dx = grads.take(xi).expect("input requires grad");
        Ok((ce.loss, dx))
    }

    /// Mean loss and gradients for every parameter.
    pub fn param_gradients(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(f64, ParamGrads<T>)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xi = g.leaf(x.clone(), false);
        let f = self.forward(&mut g, xi, true)?;
        let (loss_id, ce) = g.cross_entropy(f.logits, labels)?;
        let mut grads = g.backward(loss_id, T::one())?;
        let out = f
            .params
            .into_iter()
            .map(|(name, id)| (name, grads.take(id).expect("params require grad")))
            .collect();
        Ok((ce.loss, out))
    }

    pub fn per_example_loss(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>> {
        let logits = self.logits(x)?;
        Ok(crate::diff::softmax_cross_entropy(&logits, labels)?.per_example)
    }

    pub fn loss(&self, x: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(x)?;
        Ok(crate::diff::softmax_cross_entropy(&logits, labels)?.loss)
    }

    /// Argmax class per example; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        let k = logits.shape().w;
        Ok(logits.data().chunks_exact(k).map(argmax).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }

    /// Bit-level fingerprint of all parameters in key order.
    pub fn fingerprint(&self) -> u64 {
        self.params
            .values()
            .fold(0u64, |h, t| h.rotate_left(5) ^ crate::diff::fingerprint(t))
    }
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 256;

/// Mean loss over a split, evaluated in chunks.
pub fn mean_loss<T: Scalar>(state: &ModelState<T>, split: &DatasetSplit<T>) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Domain("loss of an empty split".into()));
    }
    let mut total = 0.0;
    for chunk in (0..split.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
        let x = split.images.select(chunk);
        let y: Vec<usize> = chunk.iter().map(|&i| split.labels[i]).collect();
        total += state.per_example_loss(&x, &y)?.iter().sum::<f64>();
    }
    Ok(total / split.len() as f64)
}

/// Fraction of examples whose argmax logit equals the label.
pub fn accuracy<T: Scalar>(state: &ModelState<T>, split: &DatasetSplit<T>) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Domain("accuracy of an empty split".into()));
    }
    let mut correct = 0usize;
    for chunk in (0..split.len()).collect::<Vec<_>>().chunks(EVAL_CHUNK) {
        let x = split.images.select(chunk);
        let pred = state.predict(&x)?;
        correct += chunk.iter().zip(pred).filter(|(&i, p)| split.labels[i] == *p).count();
    }
    Ok(correct as f64 / split.len() as f64)
}
