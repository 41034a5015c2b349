use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{Layer, ModelConfig, ModelParams, Weights};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::tokenizer::{TokenId, TokenSequence};

const NORM_EPS: f64 = 1e-5;

/// Per-layer, per-position hidden states `H[l][t]`, `l = 0..=L`, where
/// layer 0 is the (normalized) embedding layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenStateStack {
    layers: Vec<Tensor>,
}

impl HiddenStateStack {
    pub fn new(layers: Vec<Tensor>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| {
            Error::InvalidArgument("hidden-state stack needs at least one layer".into())
        })?;
        let shape = first.shape().to_vec();
        if shape.len() != 2 || layers.iter().any(|l| l.shape() != shape.as_slice()) {
            return Err(Error::InvalidArgument(
                "hidden-state layers must share one [T, d] shape".into(),
            ));
        }
        Ok(Self { layers })
    }

    /// Number of layers including the embedding layer (`L + 1`).
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers[0].shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].shape()[1]
    }

    pub fn layer(&self, l: usize) -> &Tensor {
        &self.layers[l]
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn state(&self, l: usize, t: usize) -> &[f64] {
        self.layers[l].row(t)
    }

    /// The `L + 1` vectors at position `t`, bottom layer first.
    pub fn column(&self, t: usize) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.row(t).to_vec()).collect()
    }

    /// L2 norm over every value of every layer.
    pub fn global_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

/// Fixed per-layer vectors for some positions: `position -> [H^0, ..., H^L]`.
pub type ClampMap = BTreeMap<usize, Vec<Vec<f64>>>;

/// Clamp every position of `stack` outside `[start, start + len)`.
pub fn clamp_outside(stack: &HiddenStateStack, start: usize, len: usize) -> ClampMap {
    (0..stack.seq_len())
        .filter(|&t| t < start || t >= start + len)
        .map(|t| (t, stack.column(t)))
        .collect()
}

fn check_length(config: &ModelConfig, len: usize) -> Result<()> {
    if len > config.max_len {
        return Err(Error::Overlength {
            len,
            max: config.max_len,
        });
    }
    Ok(())
}

fn check_ids(config: &ModelConfig, ids: &[TokenId]) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::InvalidSequence(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    Ok(())
}

fn clamp_layer(graph: &mut Graph, h: Var, clamp: Option<&ClampMap>, layer: usize) -> Result<Var> {
    match clamp {
        Some(map) if !map.is_empty() => {
            let rows: Vec<(usize, &[f64])> = map
                .iter()
                .map(|(&t, col)| (t, col[layer].as_slice()))
                .collect();
            Ok(graph.overwrite_rows(h, &rows)?)
        }
        _ => Ok(h),
    }
}

/// Records the encoder on `graph` and returns one `[T, d]` variable per
/// layer, embedding layer first.
///
/// With a clamp map, the states at clamped positions are overwritten right
/// after each layer is computed (after residual and normalization), so the
/// next layer attends to the supplied values.
pub fn encode(
    graph: &mut Graph,
    config: &ModelConfig,
    w: &Weights<Var>,
    ids: &[TokenId],
    clamp: Option<&ClampMap>,
) -> Result<Vec<Var>> {
    check_length(config, ids.len())?;
    check_ids(config, ids)?;
    if let Some(map) = clamp {
        for (&t, column) in map {
            if t >= ids.len() {
                return Err(Error::InvalidArgument(format!(
                    "clamp position {t} outside sequence of length {}",
                    ids.len()
                )));
            }
            if column.len() != config.layers + 1 || column.iter().any(|v| v.len() != config.hidden)
            {
                return Err(Error::InvalidArgument(format!(
                    "clamp at position {t} must hold {} vectors of size {}",
                    config.layers + 1,
                    config.hidden
                )));
            }
        }
    }
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let tok = graph.gather_rows(w.token_embedding, &idx)?;
    let pos = graph.slice_rows(w.position_embedding, 0, ids.len())?;
    let sum = graph.add(tok, pos)?;
    let h0 = graph.layer_norm(sum, w.embed_norm_gain, w.embed_norm_bias, NORM_EPS)?;
    let mut h = clamp_layer(graph, h0, clamp, 0)?;
    let mut out = Vec::with_capacity(config.layers + 1);
    out.push(h);
    for (l, layer) in w.layers.iter().enumerate() {
        let next = block(graph, config, layer, h)?;
        h = clamp_layer(graph, next, clamp, l + 1)?;
        out.push(h);
    }
    Ok(out)
}

fn block(graph: &mut Graph, config: &ModelConfig, p: &Layer<Var>, x: Var) -> Result<Var> {
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = graph.matmul(x, p.wq)?;
    let q = graph.add_row(q, p.bq)?;
    let k = graph.matmul(x, p.wk)?;
    let k = graph.add_row(k, p.bk)?;
    let v = graph.matmul(x, p.wv)?;
    let v = graph.add_row(v, p.bv)?;
    let mut heads = Vec::with_capacity(config.heads);
    for hd in 0..config.heads {
        let qh = graph.slice_cols(q, hd * dh, dh)?;
        let kh = graph.slice_cols(k, hd * dh, dh)?;
        let vh = graph.slice_cols(v, hd * dh, dh)?;
        let scores = graph.matmul_nt(qh, kh)?;
        let scores = graph.scale(scores, scale)?;
        let attn = graph.softmax(scores, 1)?;
        heads.push(graph.matmul(attn, vh)?);
    }
    let ctx = if heads.len() == 1 {
        heads[0]
    } else {
        graph.concat_cols(&heads)?
    };
    let o = graph.matmul(ctx, p.wo)?;
    let o = graph.add_row(o, p.bo)?;
    let r = graph.add(x, o)?;
    let x1 = graph.layer_norm(r, p.attn_norm_gain, p.attn_norm_bias, NORM_EPS)?;
    let f = graph.matmul(x1, p.ffn_in)?;
    let f = graph.add_row(f, p.ffn_in_bias)?;
    let f = graph.gelu(f)?;
    let f = graph.matmul(f, p.ffn_out)?;
    let f = graph.add_row(f, p.ffn_out_bias)?;
    let r = graph.add(x1, f)?;
    Ok(graph.layer_norm(r, p.ffn_norm_gain, p.ffn_norm_bias, NORM_EPS)?)
}

/// Runs layers `from + 1 ..= L` on top of a given layer-`from` state.
/// Used to evaluate the attribute loss as a function of an intermediate
/// layer.
pub fn encode_from(
    graph: &mut Graph,
    config: &ModelConfig,
    w: &Weights<Var>,
    from: usize,
    h: Var,
) -> Result<Vec<Var>> {
    if from > config.layers {
        return Err(Error::InvalidArgument(format!(
            "layer {from} beyond {}",
            config.layers
        )));
    }
    let mut out = vec![h];
    let mut cur = h;
    for layer in &w.layers[from..] {
        cur = block(graph, config, layer, cur)?;
        out.push(cur);
    }
    Ok(out)
}

/// Attribute logits `W_Att^T [H_0^0; ...; H_0^L]` as a `[1, |Z|]` variable.
pub fn attribute_logits(graph: &mut Graph, w: &Weights<Var>, layers: &[Var]) -> Result<Var> {
    let rows: Vec<Var> = layers
        .iter()
        .map(|&h| graph.slice_rows(h, 0, 1))
        .collect::<Result<_, _>>()?;
    let cat = graph.concat_cols(&rows)?;
    Ok(graph.matmul(cat, w.attribute_head)?)
}

/// LM logits `W_LM^T H_t^L` for the given positions, one row per position.
pub fn lm_logits(
    graph: &mut Graph,
    w: &Weights<Var>,
    top: Var,
    positions: &[usize],
) -> Result<Var> {
    let rows = graph.gather_rows(top, positions)?;
    Ok(graph.matmul(rows, w.lm_head)?)
}

fn stack_from(graph: &Graph, vars: &[Var]) -> Result<HiddenStateStack> {
    HiddenStateStack::new(vars.iter().map(|&v| graph.value(v).clone()).collect())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

impl ModelParams {
    /// Full encoder pass; returns all `L + 1` layers.
    pub fn forward(&self, seq: &TokenSequence) -> Result<HiddenStateStack> {
        self.forward_clamped(seq, &ClampMap::new())
    }

    /// Encoder pass with the states at clamped positions fixed at every
    /// layer. Unclamped positions attend to the clamped values.
    pub fn forward_clamped(
        &self,
        seq: &TokenSequence,
        clamp: &ClampMap,
    ) -> Result<HiddenStateStack> {
        let mut graph = Graph::new();
        let w = self.register(&mut graph, false);
        let layers = encode(&mut graph, self.config(), &w, seq.ids(), Some(clamp))?;
        stack_from(&graph, &layers)
    }

    /// `Softmax(W_LM^T h)` over the whole vocabulary.
    pub fn lm_distribution(&self, h: &[f64]) -> Result<Vec<f64>> {
        let lm = &self.weights().lm_head;
        let (d, v) = (lm.shape()[0], lm.shape()[1]);
        if h.len() != d {
            return Err(Error::InvalidArgument(format!(
                "expected a vector of size {d}, got {}",
                h.len()
            )));
        }
        let mut logits = vec![0.0; v];
        for (i, &hv) in h.iter().enumerate() {
            for (o, wv) in logits.iter_mut().zip(lm.row(i)) {
                *o += hv * wv;
            }
        }
        Ok(softmax(&logits))
    }

    /// `Softmax(W_Att^T [H_0^0; ...; H_0^L])`.
    pub fn attribute_distribution(&self, stack: &HiddenStateStack) -> Result<Vec<f64>> {
        let expected = self.config().layers + 1;
        if stack.num_layers() != expected || stack.hidden() != self.config().hidden {
            return Err(Error::InvalidArgument(format!(
                "attribute head expects {expected} layers of width {}, got {} of width {}",
                self.config().hidden,
                stack.num_layers(),
                stack.hidden()
            )));
        }
        let head = &self.weights().attribute_head;
        let z = head.shape()[1];
        let mut logits = vec![0.0; z];
        let mut row = 0;
        for l in 0..stack.num_layers() {
            for &hv in stack.state(l, 0) {
                for (o, wv) in logits.iter_mut().zip(head.row(row)) {
                    *o += hv * wv;
                }
                row += 1;
            }
        }
        Ok(softmax(&logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::{CLS, SEP};

    fn params() -> ModelParams {
        ModelParams::init(&ModelConfig::desk_scale(20, 2), 5).unwrap()
    }

    fn seq(ids: &[TokenId]) -> TokenSequence {
        TokenSequence::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn forward_returns_every_layer() {
        let p = params();
        let s = p.forward(&seq(&[CLS, 7, 8, 9, SEP])).unwrap();
        assert_eq!(s.num_layers(), 3);
        assert_eq!(s.seq_len(), 5);
        assert_eq!(s.hidden(), 32);
        assert_eq!(s, p.forward(&seq(&[CLS, 7, 8, 9, SEP])).unwrap());
    }

    #[test]
    fn embedding_layer_is_local() {
        let p = params();
        let a = p.forward(&seq(&[CLS, 7, 8, 9, SEP])).unwrap();
        let b = p.forward(&seq(&[CLS, 7, 12, 9, SEP])).unwrap();
        for t in [0, 1, 3, 4] {
            assert_eq!(a.state(0, t), b.state(0, t));
        }
        assert_ne!(a.state(0, 2), b.state(0, 2));
    }

    #[test]
    fn order_matters() {
        let p = params();
        let a = p.forward(&seq(&[CLS, 7, 8, 9, SEP])).unwrap();
        let b = p.forward(&seq(&[CLS, 8, 7, 9, SEP])).unwrap();
        assert_ne!(a.layer(2), b.layer(2));
    }

    #[test]
    fn overlength_and_bad_ids_rejected() {
        let p = params();
        let mut ids = vec![CLS];
        ids.extend(std::iter::repeat(7).take(48));
        assert!(matches!(
            p.forward(&seq(&ids)),
            Err(Error::Overlength { len: 49, max: 48 })
        ));
        assert!(matches!(
            p.forward(&seq(&[CLS, 99, SEP])),
            Err(Error::InvalidSequence(_))
        ));
    }

    #[test]
    fn lm_distribution_properties() {
        let p = params();
        let s = p.forward(&seq(&[CLS, 7, 8, SEP])).unwrap();
        let h = s.state(2, 1);
        let dist = p.lm_distribution(h).unwrap();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // argmax of probabilities equals argmax of raw logits
        let lm = &p.weights().lm_head;
        let logits: Vec<f64> = (0..20)
            .map(|j| (0..32).map(|i| h[i] * lm.data()[i * 20 + j]).sum())
            .collect();
        let am = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        assert_eq!(am(&dist), am(&logits));

        let mut zeroed = p.clone();
        zeroed
            .weights_mut()
            .lm_head
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let uniform = zeroed.lm_distribution(h).unwrap();
        assert!(uniform.iter().all(|&x| (x - 0.05).abs() < 1e-12));
        assert!(p.lm_distribution(&[0.0; 31]).is_err());
    }

    #[test]
    fn attribute_distribution_properties() {
        let p = params();
        let s = p.forward(&seq(&[CLS, 7, 8, SEP])).unwrap();
        let dist = p.attribute_distribution(&s).unwrap();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let mut zeroed = p.clone();
        zeroed
            .weights_mut()
            .attribute_head
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        assert_eq!(zeroed.attribute_distribution(&s).unwrap(), vec![0.5, 0.5]);

        // Only position 0 feeds the head.
        let mut layers: Vec<Tensor> = s.layers().to_vec();
        for l in &mut layers {
            l.row_mut(2).iter_mut().for_each(|v| *v += 3.0);
        }
        let moved = HiddenStateStack::new(layers).unwrap();
        assert_eq!(p.attribute_distribution(&moved).unwrap(), dist);

        let short = HiddenStateStack::new(s.layers()[..2].to_vec()).unwrap();
        assert!(p.attribute_distribution(&short).is_err());
    }

    #[test]
    fn attribute_head_is_linear_in_cls_states() {
        let p = params();
        let s = p.forward(&seq(&[CLS, 7, 8, SEP])).unwrap();
        let head = &p.weights().attribute_head;
        let logits = |stack: &HiddenStateStack| -> Vec<f64> {
            let mut g = Graph::new();
            let w = p.register(&mut g, false);
            let vars: Vec<Var> = stack
                .layers()
                .iter()
                .map(|l| g.constant(l.clone()))
                .collect();
            let out = attribute_logits(&mut g, &w, &vars).unwrap();
            g.value(out).data().to_vec()
        };
        let base = logits(&s);
        for (l, c) in [(0, 3), (1, 0), (2, 31)] {
            let mut layers = s.layers().to_vec();
            layers[l].row_mut(0)[c] += 1.0;
            let moved = logits(&HiddenStateStack::new(layers).unwrap());
            let row = head.row(l * 32 + c);
            for z in 0..2 {
                assert!((moved[z] - base[z] - row[z]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clamping_contracts() {
        let p = params();
        let s = seq(&[CLS, 7, 8, 9, SEP]);
        let plain = p.forward(&s).unwrap();
        assert_eq!(p.forward_clamped(&s, &ClampMap::new()).unwrap(), plain);

        // Clamp everything to a different sequence's stack: fixed point.
        let other = p.forward(&seq(&[CLS, 10, 11, 12, SEP])).unwrap();
        let all = clamp_outside(&other, 0, 0);
        let out = p.forward_clamped(&s, &all).unwrap();
        assert_eq!(out, other);
        assert_eq!(
            p.forward_clamped(&s, &clamp_outside(&out, 0, 0)).unwrap(),
            out
        );

        // Partial clamp: clamped rows equal supplied values exactly,
        // unclamped rows still see them.
        let mut clamp = ClampMap::new();
        clamp.insert(1, other.column(1));
        let out = p.forward_clamped(&s, &clamp).unwrap();
        for l in 0..3 {
            assert_eq!(out.state(l, 1), other.state(l, 1));
        }
        assert_ne!(out.state(2, 2), plain.state(2, 2));
        assert_eq!(out.state(0, 2), plain.state(0, 2));
    }

    #[test]
    fn clamp_validation() {
        let p = params();
        let s = seq(&[CLS, 7, SEP]);
        let mut bad = ClampMap::new();
        bad.insert(1, vec![vec![0.0; 31]; 3]);
        assert!(p.forward_clamped(&s, &bad).is_err());
        let mut bad = ClampMap::new();
        bad.insert(5, vec![vec![0.0; 32]; 3]);
        assert!(p.forward_clamped(&s, &bad).is_err());
    }
}
