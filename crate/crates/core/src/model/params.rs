use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Encoder hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of transformer layers (`L`).
    pub layers: usize,
    /// Hidden size (`d`).
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    /// Number of attribute classes (`|Z|`).
    pub num_attributes: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// Two layers, width 32, two heads, FFN 64, up to 48 positions.
    pub fn desk_scale(vocab_size: usize, num_attributes: usize) -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 2,
            ffn: 64,
            vocab_size,
            num_attributes,
            max_len: 48,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("vocab_size", self.vocab_size),
            ("num_attributes", self.num_attributes),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Width of the attribute head input: one `[CLS]` state per layer,
    /// embedding layer included.
    pub fn attribute_input_dim(&self) -> usize {
        (self.layers + 1) * self.hidden
    }
}

/// One post-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub attn_norm_gain: T,
    pub attn_norm_bias: T,
    pub ffn_in: T,
    pub ffn_in_bias: T,
    pub ffn_out: T,
    pub ffn_out_bias: T,
    pub ffn_norm_gain: T,
    pub ffn_norm_bias: T,
}

const LAYER_FIELDS: [&str; 16] = [
    "wq",
    "bq",
    "wk",
    "bk",
    "wv",
    "bv",
    "wo",
    "bo",
    "attn_norm_gain",
    "attn_norm_bias",
    "ffn_in",
    "ffn_in_bias",
    "ffn_out",
    "ffn_out_bias",
    "ffn_norm_gain",
    "ffn_norm_bias",
];

impl<T> Layer<T> {
    fn fields(&self) -> [&T; 16] {
        [
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.attn_norm_gain,
            &self.attn_norm_bias,
            &self.ffn_in,
            &self.ffn_in_bias,
            &self.ffn_out,
            &self.ffn_out_bias,
            &self.ffn_norm_gain,
            &self.ffn_norm_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.attn_norm_gain,
            &mut self.attn_norm_bias,
            &mut self.ffn_in,
            &mut self.ffn_in_bias,
            &mut self.ffn_out,
            &mut self.ffn_out_bias,
            &mut self.ffn_norm_gain,
            &mut self.ffn_norm_bias,
        ]
    }

    fn from_fields(mut it: impl Iterator<Item = T>) -> Self {
        let mut next = || it.next().expect("layer field count");
        Self {
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            attn_norm_gain: next(),
            attn_norm_bias: next(),
            ffn_in: next(),
            ffn_in_bias: next(),
            ffn_out: next(),
            ffn_out_bias: next(),
            ffn_norm_gain: next(),
            ffn_norm_bias: next(),
        }
    }
}

/// Every weight of the encoder and both heads. Instantiated with
/// [`Tensor`] for stored parameters and with [`Var`] once registered on a
/// [`Graph`].
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub embed_norm_gain: T,
    pub embed_norm_bias: T,
    pub layers: Vec<Layer<T>>,
    /// `W_LM`, shape `[d, |V|]`.
    pub lm_head: T,
    /// `W_Att`, shape `[(L+1)·d, |Z|]`.
    pub attribute_head: T,
}

impl<T> Weights<T> {
    /// All weights in a fixed canonical order.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [
            &self.token_embedding,
            &self.position_embedding,
            &self.embed_norm_gain,
            &self.embed_norm_bias,
        ]
        .into_iter()
        .chain(self.layers.iter().flat_map(|l| l.fields()))
        .chain([&self.lm_head, &self.attribute_head])
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        [
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.embed_norm_gain,
            &mut self.embed_norm_bias,
        ]
        .into_iter()
        .chain(self.layers.iter_mut().flat_map(|l| l.fields_mut()))
        .chain([&mut self.lm_head, &mut self.attribute_head])
    }

    /// Rebuilds from items in canonical order.
    fn from_ordered(items: Vec<T>, layers: usize) -> Self {
        let mut it = items.into_iter();
        let token_embedding = it.next().expect("weight count");
        let position_embedding = it.next().expect("weight count");
        let embed_norm_gain = it.next().expect("weight count");
        let embed_norm_bias = it.next().expect("weight count");
        let layer_list = (0..layers)
            .map(|_| {
                Layer::from_fields(
                    it.by_ref()
                        .take(LAYER_FIELDS.len())
                        .collect::<Vec<_>>()
                        .into_iter(),
                )
            })
            .collect();
        let lm_head = it.next().expect("weight count");
        let attribute_head = it.next().expect("weight count");
        Self {
            token_embedding,
            position_embedding,
            embed_norm_gain,
            embed_norm_bias,
            layers: layer_list,
            lm_head,
            attribute_head,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Weights<U> {
        let items: Vec<U> = self.iter().map(&mut f).collect();
        Weights::from_ordered(items, self.layers.len())
    }
}

/// Parameter names and shapes in canonical order.
pub fn weight_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f, p) = (config.vocab_size, config.hidden, config.ffn, config.max_len);
    let mut out = vec![
        ("token_embedding".to_string(), vec![v, d]),
        ("position_embedding".to_string(), vec![p, d]),
        ("embed_norm_gain".to_string(), vec![d]),
        ("embed_norm_bias".to_string(), vec![d]),
    ];
    for l in 0..config.layers {
        let shapes: [Vec<usize>; 16] = [
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
            vec![d],
            vec![d],
        ];
        for (name, shape) in LAYER_FIELDS.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("lm_head".to_string(), vec![d, v]));
    out.push((
        "attribute_head".to_string(),
        vec![config.attribute_input_dim(), config.num_attributes],
    ));
    out
}

/// Stored model parameters together with the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    weights: Weights<Tensor>,
}

const EMBED_STD: f64 = 0.1;
const HEAD_STD: f64 = 0.02;

impl ModelParams {
    /// Gaussian initialization, deterministic per seed. Matrices use
    /// `std = 1/sqrt(fan_in)`, embeddings 0.1, heads 0.02; norm gains
    /// start at 1 and biases at 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for (name, shape) in weight_layout(config) {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let data = if leaf.ends_with("gain") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let std = match leaf {
                    "token_embedding" | "position_embedding" => EMBED_STD,
                    "lm_head" | "attribute_head" => HEAD_STD,
                    _ => 1.0 / (shape[0] as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            tensors.push(Tensor::new(shape, data)?);
        }
        Self::from_tensors(config.clone(), tensors)
    }

    /// Assembles parameters from tensors in [`weight_layout`] order,
    /// checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = weight_layout(&config);
        if layout.len() != tensors.len() {
            return Err(Error::Mismatch(format!(
                "expected {} weight tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Mismatch(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        let weights = Weights::from_ordered(tensors, config.layers);
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &Weights<Tensor> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights<Tensor> {
        &mut self.weights
    }

    pub fn num_values(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    /// Registers every weight as a graph leaf.
    pub fn register(&self, graph: &mut Graph, trainable: bool) -> Weights<Var> {
        self.weights.map(|t| graph.leaf(t.clone(), trainable))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk_scale(50, 2).validate().is_ok());
        let mut c = ModelConfig::desk_scale(50, 2);
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        c.heads = 0;
        assert!(c.validate().is_err());
        assert!(ModelParams::init(&c, 1).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let c = ModelConfig::desk_scale(30, 2);
        let a = ModelParams::init(&c, 11).unwrap();
        let b = ModelParams::init(&c, 11).unwrap();
        let other = ModelParams::init(&c, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
    }

    #[test]
    fn shapes_follow_config() {
        let c = ModelConfig::desk_scale(30, 3);
        let p = ModelParams::init(&c, 0).unwrap();
        let w = p.weights();
        assert_eq!(w.token_embedding.shape(), &[30, 32]);
        assert_eq!(w.position_embedding.shape(), &[48, 32]);
        assert_eq!(w.lm_head.shape(), &[32, 30]);
        assert_eq!(w.attribute_head.shape(), &[96, 3]);
        assert_eq!(w.layers.len(), 2);
        assert_eq!(w.layers[1].ffn_in.shape(), &[32, 64]);
        let layout = weight_layout(&c);
        for ((_, shape), t) in layout.iter().zip(w.iter()) {
            assert_eq!(shape.as_slice(), t.shape());
        }
    }

    #[test]
    fn from_tensors_rejects_wrong_shapes() {
        let c = ModelConfig::desk_scale(30, 2);
        let p = ModelParams::init(&c, 0).unwrap();
        let mut tensors: Vec<Tensor> = p.weights().iter().cloned().collect();
        tensors[0] = Tensor::zeros(&[31, 32]);
        assert!(matches!(
            ModelParams::from_tensors(c.clone(), tensors),
            Err(Error::Mismatch(_))
        ));
        let tensors: Vec<Tensor> = p.weights().iter().skip(1).cloned().collect();
        assert!(ModelParams::from_tensors(c, tensors).is_err());
    }
}
