//! Conditioned radiance-field decoder: (embedding, point) -> (r,g,b,σ).
//!
//! The input is the frequency encoding of the point concatenated with the
//! embedding; a stack of ReLU hidden layers with a single skip path
//! (ReLU(linear(input)) summed into a mid-stack activation) feeds the same
//! sigmoid/softplus heads the NeRF fields use, so decoder outputs live in
//! the fields' output space.

use std::sync::Arc;

use adkernel::{Activation, ComboTerm, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fields::freq_encode;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    /// Frequency-encoding width (6 bands per entry group); 144 at
    /// reference scale.
    pub freq_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    /// Hidden layer whose output receives the skip path (1-based).
    pub skip_into_layer: usize,
    pub embed_dim: usize,
}

impl DecoderConfig {
    pub fn desk(embed_dim: usize) -> Self {
        Self { freq_dim: 144, hidden_dim: 256, hidden_layers: 4, skip_into_layer: 2, embed_dim }
    }

    pub fn paper() -> Self {
        Self { freq_dim: 144, hidden_dim: 1024, hidden_layers: 4, skip_into_layer: 2, embed_dim: 1024 }
    }

    pub fn num_freqs(&self) -> usize {
        self.freq_dim / 6
    }

    pub fn input_width(&self) -> usize {
        self.freq_dim + self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.freq_dim == 0 || self.freq_dim % 6 != 0 {
            return Err(Error::Config("decoder freq_dim must be a positive multiple of 6".into()));
        }
        if self.skip_into_layer == 0 || self.skip_into_layer > self.hidden_layers {
            return Err(Error::Config(format!(
                "decoder skip layer {} outside 1..={}",
                self.skip_into_layer, self.hidden_layers
            )));
        }
        if self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("decoder dims must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams<T> {
    pub cfg: DecoderConfig,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: adkernel::Real> DecoderParams<T> {
    pub fn init(cfg: &DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let input = cfg.input_width();
        let mut t: Vec<(String, Tensor<T>)> = Vec::new();
        // first layer and skip both read the full input, split into a
        // frequency block and an embedding block
        for name in ["layer0", "skip"] {
            t.push((format!("{name}.wf"), Tensor::uniform(&[h, cfg.freq_dim], (6.0 / input as f64).sqrt(), rng)));
            t.push((format!("{name}.we"), Tensor::uniform(&[h, cfg.embed_dim], (6.0 / input as f64).sqrt(), rng)));
            t.push((format!("{name}.b"), Tensor::zeros(&[1, h])));
        }
        for l in 1..cfg.hidden_layers {
            t.push((format!("layer{l}.w"), Tensor::kaiming(h, h, rng)));
            t.push((format!("layer{l}.b"), Tensor::zeros(&[1, h])));
        }
        t.push(("out.w".into(), Tensor::kaiming(4, h, rng)));
        t.push(("out.b".into(), Tensor::zeros(&[1, 4])));
        Ok(Self { cfg: cfg.clone(), tensors: t })
    }
}

pub struct DecoderVars {
    vars: Vec<(String, Var)>,
}

impl DecoderVars {
    pub fn var(&self, name: &str) -> Var {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v).expect("decoder tensor")
    }
}

pub fn register_decoder<T: adkernel::Real>(
    g: &mut Graph<T>,
    params: &DecoderParams<T>,
    trainable: bool,
) -> DecoderVars {
    DecoderVars { vars: params.tensors.iter().map(|(n, t)| (n.clone(), g.leaf(t.clone(), trainable))).collect() }
}

/// Batched decode: each point row gathers its embedding row through
/// `point_to_emb`. Returns (color `[P,3]`, sigma `[P,1]`).
pub fn decode_batch<T: adkernel::Real>(
    g: &mut Graph<T>,
    vars: &DecoderVars,
    cfg: &DecoderConfig,
    points: &[[f64; 3]],
    embeddings: Var,
    point_to_emb: Arc<Vec<u32>>,
) -> Result<(Var, Var)> {
    if points.is_empty() {
        return Err(Error::Invalid("decode_batch: empty point batch".into()));
    }
    if points.len() != point_to_emb.len() {
        return Err(Error::Invalid(format!(
            "decode_batch: {} points vs {} embedding indices",
            points.len(),
            point_to_emb.len()
        )));
    }
    let (erows, edim) = g.value(embeddings).dims2().map_err(crate::Error::from)?;
    let _ = erows;
    if edim != cfg.embed_dim {
        return Err(Error::Invalid(format!("decode_batch: embedding dim {edim}, config {}", cfg.embed_dim)));
    }
    let freqs = {
        let nf = cfg.num_freqs();
        let mut data = Vec::with_capacity(points.len() * cfg.freq_dim);
        for &p in points {
            data.extend(freq_encode(p, nf).into_iter().map(T::from_f64));
        }
        g.constant(Tensor::from_vec(data, &[points.len(), cfg.freq_dim]).map_err(crate::Error::from)?)
    };
    let input_terms = |wf: Var, we: Var| {
        vec![
            ComboTerm { x: freqs, gather: None, weight: wf },
            ComboTerm { x: embeddings, gather: Some(Arc::clone(&point_to_emb)), weight: we },
        ]
    };
    let mut h = g.linear_combo(
        &input_terms(vars.var("layer0.wf"), vars.var("layer0.we")),
        Some(vars.var("layer0.b")),
        Activation::Relu,
    )?;
    if cfg.skip_into_layer == 1 {
        let skip = g.linear_combo(
            &input_terms(vars.var("skip.wf"), vars.var("skip.we")),
            Some(vars.var("skip.b")),
            Activation::Relu,
        )?;
        h = g.add(h, skip)?;
    }
    for l in 1..cfg.hidden_layers {
        h = g.linear(h, vars.var(&format!("layer{l}.w")), Some(vars.var(&format!("layer{l}.b"))), Activation::Relu)?;
        if l + 1 == cfg.skip_into_layer {
            let skip = g.linear_combo(
                &input_terms(vars.var("skip.wf"), vars.var("skip.we")),
                Some(vars.var("skip.b")),
                Activation::Relu,
            )?;
            h = g.add(h, skip)?;
        }
    }
    let raw = g.linear(h, vars.var("out.w"), Some(vars.var("out.b")), Activation::None)?;
    let color_raw = g.slice_cols(raw, 0, 3)?;
    let sigma_raw = g.slice_cols(raw, 3, 1)?;
    Ok((g.sigmoid(color_raw), g.softplus(sigma_raw)))
}

/// Single-point convenience call.
pub fn decode<T: adkernel::Real>(
    params: &DecoderParams<T>,
    embedding: &[T],
    p: [f64; 3],
) -> Result<([T; 3], T)> {
    let mut g = Graph::new();
    let vars = register_decoder(&mut g, params, false);
    let emb = g.constant(Tensor::from_vec(embedding.to_vec(), &[1, embedding.len()]).map_err(crate::Error::from)?);
    let (c, s) = decode_batch(&mut g, &vars, &params.cfg, &[p], emb, Arc::new(vec![0]))?;
    let cd = g.value(c).data();
    Ok(([cd[0], cd[1], cd[2]], g.value(s).data()[0]))
}
