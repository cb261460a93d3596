//! Model bodies with hand-written backprop: a tanh MLP classifier and a
//! single-layer Elman RNN for per-position sequence labelling.
//!
//! Parameters live in one flat slice in the order given by
//! [`Network::manifest`]; every matrix is row-major `(out, in)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::Input;
use crate::error::{Error, Result};
use crate::registry::{Forward, ParamManifest};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    SeqTransduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    /// Feature dimension for classification; ignored for sequences, whose
    /// input vocabulary is the class set.
    #[serde(default)]
    pub input_dim: usize,
    /// Hidden layer widths. The RNN takes exactly one.
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("model.classes must be at least 2, got {}", self.classes)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("model.hidden sizes must be positive"));
        }
        match self.task {
            Task::Classification if self.input_dim == 0 => {
                Err(Error::invalid("model.input_dim must be positive for classification"))
            }
            Task::SeqTransduction if self.hidden.len() != 1 => Err(Error::invalid(format!(
                "model.hidden must list exactly one size for the recurrent model, got {}",
                self.hidden.len()
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Network {
    /// Layer widths from input to output.
    Mlp { sizes: Vec<usize> },
    Rnn { vocab: usize, hidden: usize, classes: usize },
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// MLP: input then every hidden activation. RNN: hidden state per step.
    states: Vec<Vec<T>>,
    tokens: Vec<usize>,
    pub logits: Vec<Vec<T>>,
}

fn matvec_add<T: Scalar>(w: &[T], x: &[T], out: &mut [T]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>();
    }
}

/// `out += w^T d`
fn matvec_t_add<T: Scalar>(w: &[T], d: &[T], out: &mut [T]) {
    let cols = out.len();
    for (&di, row) in d.iter().zip(w.chunks_exact(cols)) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * di;
        }
    }
}

/// `g += d x^T`
fn outer_add<T: Scalar>(g: &mut [T], d: &[T], x: &[T]) {
    let cols = x.len();
    for (&di, row) in d.iter().zip(g.chunks_exact_mut(cols)) {
        for (gi, &xi) in row.iter_mut().zip(x) {
            *gi += di * xi;
        }
    }
}

impl Network {
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.task {
            Task::Classification => {
                let mut sizes = vec![cfg.input_dim];
                sizes.extend(&cfg.hidden);
                sizes.push(cfg.classes);
                Network::Mlp { sizes }
            }
            Task::SeqTransduction => Network::Rnn {
                vocab: cfg.classes,
                hidden: cfg.hidden[0],
                classes: cfg.classes,
            },
        })
    }

    pub fn classes(&self) -> usize {
        match self {
            Network::Mlp { sizes } => *sizes.last().expect("at least two layers"),
            Network::Rnn { classes, .. } => *classes,
        }
    }

    pub fn manifest(&self) -> ParamManifest {
        let tensors = match self {
            Network::Mlp { sizes } => sizes
                .windows(2)
                .enumerate()
                .flat_map(|(l, w)| {
                    [
                        (format!("layer{l}.weight"), vec![w[1], w[0]]),
                        (format!("layer{l}.bias"), vec![w[1]]),
                    ]
                })
                .collect(),
            Network::Rnn { vocab, hidden, classes } => vec![
                ("rnn.input_weight".into(), vec![*hidden, *vocab]),
                ("rnn.recurrent_weight".into(), vec![*hidden, *hidden]),
                ("rnn.bias".into(), vec![*hidden]),
                ("output.weight".into(), vec![*classes, *hidden]),
                ("output.bias".into(), vec![*classes]),
            ],
        };
        ParamManifest { tensors }
    }

    pub fn param_count(&self) -> usize {
        self.manifest().param_count()
    }

    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn init<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(super::INIT_STREAM);
        let mut params = Vec::with_capacity(self.param_count());
        for (name, shape) in self.manifest().tensors {
            let n: usize = shape.iter().product();
            if name.ends_with("bias") {
                params.extend(std::iter::repeat_n(T::zero(), n));
            } else {
                let normal = Normal::new(0.0, 1.0 / (shape[1] as f64).sqrt()).expect("positive std");
                params.extend((0..n).map(|_| T::of(normal.sample(&mut rng))));
            }
        }
        params
    }

    fn check_params<T>(&self, params: &[T]) {
        assert_eq!(params.len(), self.param_count(), "parameter slice does not match the network");
    }

    pub fn forward_cached<T: Scalar>(&self, params: &[T], input: &Input) -> Result<ForwardCache<T>> {
        self.check_params(params);
        match (self, input) {
            (Network::Mlp { sizes }, Input::Features(x)) => {
                if x.len() != sizes[0] {
                    return Err(Error::invalid(format!(
                        "input has {} features, model expects {}",
                        x.len(),
                        sizes[0]
                    )));
                }
                let mut states = vec![x.iter().map(|&v| T::of(f64::from(v))).collect::<Vec<T>>()];
                let mut offset = 0;
                let layers = sizes.len() - 1;
                let mut logits = Vec::new();
                for l in 0..layers {
                    let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                    let w = &params[offset..offset + fan_in * fan_out];
                    let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
                    offset += fan_in * fan_out + fan_out;
                    let mut a = b.to_vec();
                    matvec_add(w, states.last().expect("input state"), &mut a);
                    if l + 1 == layers {
                        logits = a;
                    } else {
                        a.iter_mut().for_each(|v| *v = v.tanh());
                        states.push(a);
                    }
                }
                Ok(ForwardCache {
                    states,
                    tokens: Vec::new(),
                    logits: vec![logits],
                })
            }
            (Network::Rnn { vocab, hidden, classes }, Input::Tokens(tokens)) => {
                let (v, h, c) = (*vocab, *hidden, *classes);
                if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
                    return Err(Error::invalid(format!("token {bad} outside vocabulary of {v}")));
                }
                let (w_xh, rest) = params.split_at(h * v);
                let (w_hh, rest) = rest.split_at(h * h);
                let (b_h, rest) = rest.split_at(h);
                let (w_hy, b_y) = rest.split_at(c * h);
                let mut states: Vec<Vec<T>> = Vec::with_capacity(tokens.len());
                let mut logits = Vec::with_capacity(tokens.len());
                let zero = vec![T::zero(); h];
                for &tok in tokens {
                    let prev = states.last().unwrap_or(&zero);
                    let mut a = b_h.to_vec();
                    for (i, ai) in a.iter_mut().enumerate() {
                        *ai += w_xh[i * v + tok];
                    }
                    matvec_add(w_hh, prev, &mut a);
                    a.iter_mut().for_each(|x| *x = x.tanh());
                    let mut y = b_y.to_vec();
                    matvec_add(w_hy, &a, &mut y);
                    logits.push(y);
                    states.push(a);
                }
                Ok(ForwardCache {
                    states,
                    tokens: tokens.clone(),
                    logits,
                })
            }
            _ => Err(Error::invalid("input kind does not match the network")),
        }
    }

    /// Logits per output position.
    pub fn logits<T: Scalar>(&self, params: &[T], input: &Input) -> Result<Vec<Vec<T>>> {
        self.forward_cached(params, input).map(|c| c.logits)
    }

    /// Adds the parameter gradient for upstream logit gradients `dlogits`
    /// (one vector per position) into `grad`.
    pub fn backward<T: Scalar>(&self, params: &[T], cache: &ForwardCache<T>, dlogits: &[Vec<T>], grad: &mut [T]) {
        self.check_params(params);
        assert_eq!(grad.len(), params.len());
        assert_eq!(dlogits.len(), cache.logits.len());
        match self {
            Network::Mlp { sizes } => {
                let layers = sizes.len() - 1;
                let mut offsets = Vec::with_capacity(layers);
                let mut o = 0;
                for w in sizes.windows(2) {
                    offsets.push(o);
                    o += w[0] * w[1] + w[1];
                }
                let mut delta = dlogits[0].clone();
                for l in (0..layers).rev() {
                    let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                    let off = offsets[l];
                    let input = &cache.states[l];
                    let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                    outer_add(gw, &delta, input);
                    gb.iter_mut().zip(&delta).for_each(|(g, &d)| *g += d);
                    if l > 0 {
                        let mut prev = vec![T::zero(); fan_in];
                        matvec_t_add(&params[off..off + fan_in * fan_out], &delta, &mut prev);
                        for (p, &a) in prev.iter_mut().zip(input) {
                            *p *= T::one() - a * a;
                        }
                        delta = prev;
                    }
                }
            }
            Network::Rnn { vocab, hidden, classes } => {
                let (v, h, c) = (*vocab, *hidden, *classes);
                let w_hh = &params[h * v..h * v + h * h];
                let w_hy = &params[h * v + h * h + h..h * v + h * h + h + c * h];
                let (g_xh, rest) = grad.split_at_mut(h * v);
                let (g_hh, rest) = rest.split_at_mut(h * h);
                let (g_bh, rest) = rest.split_at_mut(h);
                let (g_hy, g_by) = rest.split_at_mut(c * h);
                let zero = vec![T::zero(); h];
                let mut dh_next = vec![T::zero(); h];
                for t in (0..cache.tokens.len()).rev() {
                    let ht = &cache.states[t];
                    let prev = if t == 0 { &zero } else { &cache.states[t - 1] };
                    let dy = &dlogits[t];
                    outer_add(g_hy, dy, ht);
                    g_by.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
                    let mut dh = dh_next;
                    matvec_t_add(w_hy, dy, &mut dh);
                    for (d, &a) in dh.iter_mut().zip(ht) {
                        *d *= T::one() - a * a;
                    }
                    let tok = cache.tokens[t];
                    for (i, &d) in dh.iter().enumerate() {
                        g_xh[i * v + tok] += d;
                    }
                    outer_add(g_hh, &dh, prev);
                    g_bh.iter_mut().zip(&dh).for_each(|(g, &d)| *g += d);
                    let mut next = vec![T::zero(); h];
                    matvec_t_add(w_hh, &dh, &mut next);
                    dh_next = next;
                }
            }
        }
    }
}

impl Forward for Network {
    type Input = Input;

    fn forward(&self, params: &[f32], input: &Input) -> Vec<Vec<f32>> {
        self.logits(params, input).expect("teacher input matches the network")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp() -> Network {
        Network::from_config(&ModelConfig {
            task: Task::Classification,
            input_dim: 3,
            hidden: vec![4],
            classes: 2,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn manifest_counts() {
        assert_eq!(mlp().param_count(), 3 * 4 + 4 + 4 * 2 + 2);
        let rnn = Network::Rnn {
            vocab: 5,
            hidden: 3,
            classes: 5,
        };
        assert_eq!(rnn.param_count(), 15 + 9 + 3 + 15 + 5);
        assert_eq!(rnn.init::<f32>(1).len(), rnn.param_count());
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig {
            task: Task::SeqTransduction,
            input_dim: 0,
            hidden: vec![4, 4],
            classes: 5,
            seed: 0,
        };
        assert!(Network::from_config(&cfg).is_err());
        cfg.hidden = vec![4];
        assert!(Network::from_config(&cfg).is_ok());
        cfg.classes = 1;
        assert!(Network::from_config(&cfg).is_err());
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let net = mlp();
        let mut p = vec![0.0f64; net.param_count()];
        let n = p.len();
        p[n - 2] = 0.5;
        p[n - 1] = -1.0;
        let out = net.logits(&p, &Input::Features(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(out, vec![vec![0.5, -1.0]]);
    }

    #[test]
    fn mismatched_input_is_rejected() {
        let net = mlp();
        let p = net.init::<f64>(0);
        assert!(net.logits(&p, &Input::Tokens(vec![0])).is_err());
        assert!(net.logits(&p, &Input::Features(vec![1.0])).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let net = mlp();
        assert_eq!(net.init::<f32>(7), net.init::<f32>(7));
        assert_ne!(net.init::<f32>(7), net.init::<f32>(8));
    }
}
