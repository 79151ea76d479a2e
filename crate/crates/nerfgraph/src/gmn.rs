//! Message-passing graph meta-network encoder: parameter graph in, fixed
//! length embedding out.
//!
//! Raw integer node/edge attributes are normalized by their per-graph
//! maxima and linearly lifted (the pre-encoder); each round sends one
//! message along and one against every directed edge through separate
//! functions, updates nodes and then edges with residual MLPs; readout
//! runs per-edge MLP layers, maps to the embedding width with a single
//! linear layer, and mean-pools over edges.

use std::sync::Arc;

use adkernel::{Activation, ComboTerm, Graph, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::paramgraph::ParamGraph;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub readout_layers: usize,
    pub embed_dim: usize,
    pub directed: bool,
}

impl EncoderConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self { hidden_dim: 64, num_layers: 4, readout_layers: 2, embed_dim: 256, directed: true }
    }

    /// Reference-scale dimensions.
    pub fn paper() -> Self {
        Self { hidden_dim: 128, num_layers: 4, readout_layers: 2, embed_dim: 1024, directed: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_layers == 0 || self.readout_layers == 0 || self.embed_dim == 0 {
            return Err(Error::Config("encoder dims must be >= 1".into()));
        }
        Ok(())
    }
}

pub const NODE_RAW_DIM: usize = 6;
pub const EDGE_RAW_DIM: usize = 11;

/// Constant per-graph inputs to the encoder.
pub struct GraphTensors<T> {
    pub node_raw: Tensor<T>,
    pub edge_raw: Tensor<T>,
    pub src: Arc<Vec<u32>>,
    pub dst: Arc<Vec<u32>>,
}

impl<T: adkernel::Real> GraphTensors<T> {
    pub fn n_nodes(&self) -> usize {
        self.node_raw.shape()[0]
    }

    pub fn n_edges(&self) -> usize {
        self.src.len()
    }
}

/// Normalized featurization: integers scaled into [0,1] by per-graph
/// maxima, one-hot type slots, raw weight scalar, raw ijk.
pub fn graph_tensors<T: adkernel::Real>(pg: &ParamGraph<T>) -> GraphTensors<T> {
    let max_layer = pg.nodes.iter().map(|n| n.layer).max().unwrap_or(0).max(1) as f64;
    let max_neuron = pg.nodes.iter().map(|n| n.neuron).max().unwrap_or(0).max(1) as f64;
    let max_table = pg.edges.iter().map(|e| e.table_index).max().unwrap_or(0).max(1) as f64;
    let max_entry = pg.edges.iter().map(|e| e.entry_index).max().unwrap_or(0).max(1) as f64;

    let mut node_raw = Vec::with_capacity(pg.nodes.len() * NODE_RAW_DIM);
    for n in &pg.nodes {
        node_raw.push(T::from_f64(n.layer as f64 / max_layer));
        node_raw.push(T::from_f64(n.neuron as f64 / max_neuron));
        let mut onehot = [T::zero(); 4];
        onehot[n.node_type as usize] = T::one();
        node_raw.extend_from_slice(&onehot);
    }
    let mut edge_raw = Vec::with_capacity(pg.edges.len() * EDGE_RAW_DIM);
    let mut src = Vec::with_capacity(pg.edges.len());
    let mut dst = Vec::with_capacity(pg.edges.len());
    for e in &pg.edges {
        edge_raw.push(e.weight);
        edge_raw.push(T::from_f64(e.layer as f64 / max_layer));
        let mut onehot = [T::zero(); 4];
        onehot[e.edge_type as usize] = T::one();
        edge_raw.extend_from_slice(&onehot);
        edge_raw.extend(e.ijk.iter().map(|&v| T::from_f64(v)));
        edge_raw.push(T::from_f64(e.table_index as f64 / max_table));
        edge_raw.push(T::from_f64(e.entry_index as f64 / max_entry));
        src.push(e.src);
        dst.push(e.dst);
    }
    GraphTensors {
        node_raw: Tensor::from_vec(node_raw, &[pg.nodes.len(), NODE_RAW_DIM]).expect("node raw"),
        edge_raw: Tensor::from_vec(edge_raw, &[pg.edges.len(), EDGE_RAW_DIM]).expect("edge raw"),
        src: Arc::new(src),
        dst: Arc::new(dst),
    }
}

/// Flat named parameter collection, initialized per config.
#[derive(Debug, Clone)]
pub struct GmnParams<T> {
    pub cfg: EncoderConfig,
    pub tensors: Vec<(String, Tensor<T>)>,
}

fn uniform_fan<T: adkernel::Real>(out: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::uniform(&[out, fan_in], (6.0 / fan_in as f64).sqrt(), rng)
}

impl<T: adkernel::Real> GmnParams<T> {
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden_dim;
        let mut t: Vec<(String, Tensor<T>)> = Vec::new();
        t.push(("pre.node.w".into(), uniform_fan(h, NODE_RAW_DIM, rng)));
        t.push(("pre.node.b".into(), Tensor::zeros(&[1, h])));
        t.push(("pre.edge.w".into(), uniform_fan(h, EDGE_RAW_DIM, rng)));
        t.push(("pre.edge.b".into(), Tensor::zeros(&[1, h])));
        for l in 0..cfg.num_layers {
            for dir in ["msg_in", "msg_out"] {
                t.push((format!("layer{l}.{dir}.wh"), Tensor::uniform(&[h, h], (6.0 / (2 * h) as f64).sqrt(), rng)));
                t.push((format!("layer{l}.{dir}.we"), Tensor::uniform(&[h, h], (6.0 / (2 * h) as f64).sqrt(), rng)));
                t.push((format!("layer{l}.{dir}.b"), Tensor::zeros(&[1, h])));
            }
            t.push((format!("layer{l}.node.wh"), Tensor::uniform(&[h, h], (6.0 / (2 * h) as f64).sqrt(), rng)));
            t.push((format!("layer{l}.node.wm"), Tensor::uniform(&[h, h], (6.0 / (2 * h) as f64).sqrt(), rng)));
            t.push((format!("layer{l}.node.b1"), Tensor::zeros(&[1, h])));
            t.push((format!("layer{l}.node.w2"), uniform_fan(h, h, rng)));
            t.push((format!("layer{l}.node.b2"), Tensor::zeros(&[1, h])));
            t.push((format!("layer{l}.edge.we"), Tensor::uniform(&[h, h], (6.0 / (3 * h) as f64).sqrt(), rng)));
            t.push((format!("layer{l}.edge.wsrc"), Tensor::uniform(&[h, h], (6.0 / (3 * h) as f64).sqrt(), rng)));
            t.push((format!("layer{l}.edge.wdst"), Tensor::uniform(&[h, h], (6.0 / (3 * h) as f64).sqrt(), rng)));
            t.push((format!("layer{l}.edge.b1"), Tensor::zeros(&[1, h])));
            t.push((format!("layer{l}.edge.w2"), uniform_fan(h, h, rng)));
            t.push((format!("layer{l}.edge.b2"), Tensor::zeros(&[1, h])));
        }
        for r in 0..cfg.readout_layers {
            t.push((format!("readout{r}.w"), uniform_fan(h, h, rng)));
            t.push((format!("readout{r}.b"), Tensor::zeros(&[1, h])));
        }
        t.push(("out.w".into(), uniform_fan(cfg.embed_dim, h, rng)));
        t.push(("out.b".into(), Tensor::zeros(&[1, cfg.embed_dim])));
        Ok(Self { cfg: cfg.clone(), tensors: t })
    }
}

/// Tape handles for one registration of the parameters.
pub struct GmnVars {
    vars: Vec<(String, Var)>,
}

impl GmnVars {
    pub fn var(&self, name: &str) -> Var {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| *v).expect("gmn tensor")
    }
}

pub fn register_gmn<T: adkernel::Real>(g: &mut Graph<T>, params: &GmnParams<T>, trainable: bool) -> GmnVars {
    GmnVars { vars: params.tensors.iter().map(|(n, t)| (n.clone(), g.leaf(t.clone(), trainable))).collect() }
}

/// Linear lift of raw node and edge features into hidden states.
pub fn pre_encode<T: adkernel::Real>(
    g: &mut Graph<T>,
    vars: &GmnVars,
    gt: &GraphTensors<T>,
) -> Result<(Var, Var)> {
    let node_raw = g.constant(gt.node_raw.clone());
    let edge_raw = g.constant(gt.edge_raw.clone());
    let h = g.linear(node_raw, vars.var("pre.node.w"), Some(vars.var("pre.node.b")), Activation::None)?;
    let e = g.linear(edge_raw, vars.var("pre.edge.w"), Some(vars.var("pre.edge.b")), Activation::None)?;
    Ok((h, e))
}

/// One round: aggregate in/out messages, residual node update, residual
/// edge update from the refreshed endpoint states.
pub fn message_pass<T: adkernel::Real>(
    g: &mut Graph<T>,
    vars: &GmnVars,
    gt: &GraphTensors<T>,
    cfg: &EncoderConfig,
    layer: usize,
    h: Var,
    e: Var,
) -> Result<(Var, Var)> {
    let n = gt.n_nodes();
    let l = layer;
    let msg_in = g.linear_combo(
        &[
            ComboTerm { x: h, gather: Some(Arc::clone(&gt.src)), weight: vars.var(&format!("layer{l}.msg_in.wh")) },
            ComboTerm { x: e, gather: None, weight: vars.var(&format!("layer{l}.msg_in.we")) },
        ],
        Some(vars.var(&format!("layer{l}.msg_in.b"))),
        Activation::Relu,
    )?;
    let mut m = g.scatter_add_rows(msg_in, Arc::clone(&gt.dst), n)?;
    // reverse-direction messages; undirected graphs reuse the forward
    // message function
    let dir = if cfg.directed { "msg_out" } else { "msg_in" };
    let msg_out = g.linear_combo(
        &[
            ComboTerm { x: h, gather: Some(Arc::clone(&gt.dst)), weight: vars.var(&format!("layer{l}.{dir}.wh")) },
            ComboTerm { x: e, gather: None, weight: vars.var(&format!("layer{l}.{dir}.we")) },
        ],
        Some(vars.var(&format!("layer{l}.{dir}.b"))),
        Activation::Relu,
    )?;
    let agg_out = g.scatter_add_rows(msg_out, Arc::clone(&gt.src), n)?;
    m = g.add(m, agg_out)?;
    let nh = g.linear_combo(
        &[
            ComboTerm { x: h, gather: None, weight: vars.var(&format!("layer{l}.node.wh")) },
            ComboTerm { x: m, gather: None, weight: vars.var(&format!("layer{l}.node.wm")) },
        ],
        Some(vars.var(&format!("layer{l}.node.b1"))),
        Activation::Relu,
    )?;
    let nh2 =
        g.linear(nh, vars.var(&format!("layer{l}.node.w2")), Some(vars.var(&format!("layer{l}.node.b2"))), Activation::None)?;
    let h_new = g.add(h, nh2)?;
    let eh = g.linear_combo(
        &[
            ComboTerm { x: e, gather: None, weight: vars.var(&format!("layer{l}.edge.we")) },
            ComboTerm { x: h_new, gather: Some(Arc::clone(&gt.src)), weight: vars.var(&format!("layer{l}.edge.wsrc")) },
            ComboTerm { x: h_new, gather: Some(Arc::clone(&gt.dst)), weight: vars.var(&format!("layer{l}.edge.wdst")) },
        ],
        Some(vars.var(&format!("layer{l}.edge.b1"))),
        Activation::Relu,
    )?;
    let eh2 =
        g.linear(eh, vars.var(&format!("layer{l}.edge.w2")), Some(vars.var(&format!("layer{l}.edge.b2"))), Activation::None)?;
    let e_new = g.add(e, eh2)?;
    Ok((h_new, e_new))
}

/// Full encoder: pre-encode, message rounds, per-edge readout, linear map
/// to the embedding width, mean pool over edges. Output is `[1, embed]`.
pub fn encode<T: adkernel::Real>(
    g: &mut Graph<T>,
    vars: &GmnVars,
    cfg: &EncoderConfig,
    gt: &GraphTensors<T>,
) -> Result<Var> {
    if gt.n_edges() == 0 {
        return Err(Error::Invalid("encode: empty graph".into()));
    }
    let (mut h, mut e) = pre_encode(g, vars, gt)?;
    for l in 0..cfg.num_layers {
        let (h2, e2) = message_pass(g, vars, gt, cfg, l, h, e)?;
        h = h2;
        e = e2;
    }
    for r in 0..cfg.readout_layers {
        e = g.linear(e, vars.var(&format!("readout{r}.w")), Some(vars.var(&format!("readout{r}.b"))), Activation::Relu)?;
    }
    let pooled = g.mean_axis0(e)?;
    let emb = g.linear(pooled, vars.var("out.w"), Some(vars.var("out.b")), Activation::None)?;
    Ok(emb)
}

/// One-shot evaluation into a plain vector.
pub fn encode_value<T: adkernel::Real>(params: &GmnParams<T>, gt: &GraphTensors<T>) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let vars = register_gmn(&mut g, params, false);
    let emb = encode(&mut g, &vars, &params.cfg, gt)?;
    Ok(g.value(emb).data().to_vec())
}
