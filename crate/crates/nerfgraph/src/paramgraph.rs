//! Checkpoint-to-parameter-graph conversion.
//!
//! Every trainable scalar lands on exactly one directed edge. Linear layers
//! reuse the computation graph plus one bias node per non-input layer;
//! tri-planes get one node per spatial location and one per channel with
//! spatial -> channel edges; hash tables get one node per table entry and
//! one per feature dimension with entry -> feature edges, giving N(T+F)
//! nodes and NTF edges per table stack. Parameters always flow
//! input -> output.

use std::io::Write;
use std::path::Path;

use adkernel::Tensor;

use crate::fields::{ArchDescriptor, Family, NerfCheckpoint, PlaneAxis};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeType {
    Neuron = 0,
    Bias = 1,
    Triplanar = 2,
    HashTable = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeType {
    LinearWeight = 0,
    LinearBias = 1,
    Triplanar = 2,
    HashTable = 3,
}

#[derive(Debug, Clone, Copy)]
pub struct NodeFeature {
    pub layer: u32,
    pub neuron: u32,
    pub node_type: NodeType,
}

#[derive(Debug, Clone, Copy)]
pub struct EdgeFeature<T> {
    pub src: u32,
    pub dst: u32,
    pub weight: T,
    pub layer: u32,
    pub edge_type: EdgeType,
    /// Spatial position, tri-planar edges only (zero elsewhere).
    pub ijk: [f64; 3],
    /// Hash edges only (zero elsewhere).
    pub table_index: u32,
    pub entry_index: u32,
}

#[derive(Debug, Clone)]
pub struct ParamGraph<T> {
    pub nodes: Vec<NodeFeature>,
    pub edges: Vec<EdgeFeature<T>>,
}

impl<T: adkernel::Real> ParamGraph<T> {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn count_nodes_of(&self, t: NodeType) -> usize {
        self.nodes.iter().filter(|n| n.node_type == t).count()
    }

    pub fn count_edges_of(&self, t: EdgeType) -> usize {
        self.edges.iter().filter(|e| e.edge_type == t).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len() as u32;
        for e in &self.edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::Invalid(format!("edge {}->{} out of {} nodes", e.src, e.dst, n)));
            }
        }
        Ok(())
    }

    /// Debug dump: one row per edge.
    pub fn write_edge_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(Error::io(path))?);
        writeln!(f, "src,dst,weight,edge_type,layer,i,j,k,table,entry").map_err(Error::io(path))?;
        for e in &self.edges {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{}",
                e.src,
                e.dst,
                adkernel::Real::to_f64(e.weight),
                e.edge_type as u32,
                e.layer,
                e.ijk[0],
                e.ijk[1],
                e.ijk[2],
                e.table_index,
                e.entry_index
            )
            .map_err(Error::io(path))?;
        }
        Ok(())
    }
}

fn lin_coord(a: usize, r: usize) -> f64 {
    if r <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * a as f64 / (r - 1) as f64
    }
}

/// (i, j, k) of grid cell (a, b) of one plane: the missing axis stays 0.
fn plane_ijk(axis: PlaneAxis, a: usize, b: usize, r: usize) -> [f64; 3] {
    let (la, lb) = (lin_coord(a, r), lin_coord(b, r));
    match axis {
        PlaneAxis::Xy => [la, lb, 0.0],
        PlaneAxis::Xz => [la, 0.0, lb],
        PlaneAxis::Yz => [0.0, la, lb],
    }
}

struct Builder<T> {
    nodes: Vec<NodeFeature>,
    edges: Vec<EdgeFeature<T>>,
}

impl<T: adkernel::Real> Builder<T> {
    fn new() -> Self {
        Self { nodes: Vec::new(), edges: Vec::new() }
    }

    fn node(&mut self, layer: u32, neuron: u32, node_type: NodeType) -> u32 {
        self.nodes.push(NodeFeature { layer, neuron, node_type });
        (self.nodes.len() - 1) as u32
    }

    fn edge(&mut self, src: u32, dst: u32, weight: T, layer: u32, edge_type: EdgeType) -> &mut EdgeFeature<T> {
        self.edges.push(EdgeFeature {
            src,
            dst,
            weight,
            layer,
            edge_type,
            ijk: [0.0; 3],
            table_index: 0,
            entry_index: 0,
        });
        self.edges.last_mut().unwrap()
    }

    /// MLP layers on top of an existing input-node row. Weight edges are
    /// appended in (layer, out, in) order, then the layer's bias edges.
    fn append_mlp(&mut self, ckpt: &NerfCheckpoint<T>, input_nodes: &[u32], first_layer_index: u32) {
        let widths = ckpt.arch.mlp_widths();
        let mut prev: Vec<u32> = input_nodes.to_vec();
        for (li, w) in widths.windows(2).enumerate() {
            let layer = first_layer_index + li as u32;
            let (n_in, n_out) = (w[0], w[1]);
            let cur: Vec<u32> = (0..n_out).map(|i| self.node(layer, i as u32, NodeType::Neuron)).collect();
            let bias_node = self.node(layer, 0, NodeType::Bias);
            let weight = ckpt.tensor(&format!("mlp.layer{li}.weight")).expect("mlp weight").data();
            for i in 0..n_out {
                for j in 0..n_in {
                    self.edge(prev[j], cur[i], weight[i * n_in + j], layer, EdgeType::LinearWeight);
                }
            }
            let bias = ckpt.tensor(&format!("mlp.layer{li}.bias")).expect("mlp bias").data();
            for i in 0..n_out {
                self.edge(bias_node, cur[i], bias[i], layer, EdgeType::LinearBias);
            }
            prev = cur;
        }
    }
}

/// MLP family: coordinate neurons (one per frequency-encoding entry) form
/// layer 0, then the computation graph plus bias nodes.
pub fn mlp_to_graph<T: adkernel::Real>(ckpt: &NerfCheckpoint<T>) -> ParamGraph<T> {
    let mut b = Builder::new();
    let input_width = ckpt.arch.mlp_input_width();
    let inputs: Vec<u32> = (0..input_width).map(|j| b.node(0, j as u32, NodeType::Neuron)).collect();
    b.append_mlp(ckpt, &inputs, 1);
    ParamGraph { nodes: b.nodes, edges: b.edges }
}

/// Tri-plane family: spatial nodes at layer 0; the shared channel nodes
/// plus the coordinate neurons form the MLP's first layer.
pub fn triplane_to_graph<T: adkernel::Real>(ckpt: &NerfCheckpoint<T>) -> ParamGraph<T> {
    let arch = &ckpt.arch;
    let r = arch.tri_resolution.unwrap();
    let c = arch.tri_channels.unwrap();
    let f6 = 6 * arch.num_freqs();
    let mut b = Builder::new();
    let mut spatial = Vec::with_capacity(3 * r * r);
    for (pi, _axis) in PlaneAxis::ALL.iter().enumerate() {
        for a in 0..r {
            for bb in 0..r {
                spatial.push(b.node(0, (pi * r * r + a * r + bb) as u32, NodeType::Triplanar));
            }
        }
    }
    // MLP input layer: coordinate neurons then channel nodes, matching the
    // first-layer column order freq || tri.
    let mut inputs: Vec<u32> = (0..f6).map(|j| b.node(1, j as u32, NodeType::Neuron)).collect();
    let channels: Vec<u32> = (0..c).map(|ci| b.node(1, (f6 + ci) as u32, NodeType::Triplanar)).collect();
    inputs.extend_from_slice(&channels);
    for (pi, axis) in PlaneAxis::ALL.into_iter().enumerate() {
        let plane = ckpt.tensor(&format!("tri.plane_{}", axis.name())).expect("plane").data();
        for a in 0..r {
            for bb in 0..r {
                let snode = spatial[pi * r * r + a * r + bb];
                let ijk = plane_ijk(axis, a, bb, r);
                for (ci, &cnode) in channels.iter().enumerate() {
                    let e = b.edge(snode, cnode, plane[(a * r + bb) * c + ci], 1, EdgeType::Triplanar);
                    e.ijk = ijk;
                }
            }
        }
    }
    b.append_mlp(ckpt, &inputs, 2);
    ParamGraph { nodes: b.nodes, edges: b.edges }
}

/// Hash family: per level, T entry nodes and F feature nodes fully
/// connected entry -> feature; the concatenated feature nodes are the
/// MLP's first layer.
pub fn hash_to_graph<T: adkernel::Real>(ckpt: &NerfCheckpoint<T>) -> ParamGraph<T> {
    let arch = &ckpt.arch;
    let levels = arch.hash_levels.unwrap();
    let tsize = arch.hash_table_size();
    let fdim = arch.hash_features_per_entry.unwrap();
    let mut b = Builder::new();
    let mut entries = Vec::with_capacity(levels * tsize);
    for l in 0..levels {
        for row in 0..tsize {
            entries.push(b.node(0, (l * tsize + row) as u32, NodeType::HashTable));
        }
    }
    let features: Vec<u32> = (0..levels * fdim).map(|j| b.node(1, j as u32, NodeType::HashTable)).collect();
    for l in 0..levels {
        let table = ckpt.tensor(&format!("hash.level{l}.table")).expect("table").data();
        for row in 0..tsize {
            for f in 0..fdim {
                let e = b.edge(
                    entries[l * tsize + row],
                    features[l * fdim + f],
                    table[row * fdim + f],
                    1,
                    EdgeType::HashTable,
                );
                e.table_index = l as u32;
                e.entry_index = row as u32;
            }
        }
    }
    b.append_mlp(ckpt, &features, 2);
    ParamGraph { nodes: b.nodes, edges: b.edges }
}

/// Family dispatch.
pub fn checkpoint_to_graph<T: adkernel::Real>(ckpt: &NerfCheckpoint<T>) -> Result<ParamGraph<T>> {
    ckpt.validate()?;
    let pg = match ckpt.arch.family {
        Family::Mlp => mlp_to_graph(ckpt),
        Family::Tri => triplane_to_graph(ckpt),
        Family::Hash => hash_to_graph(ckpt),
    };
    debug_assert_eq!(pg.edges.len(), ckpt.param_count());
    Ok(pg)
}

/// Inverse of the conversion: reassemble the checkpoint tensors from edge
/// weights, relying on construction order within each edge type.
pub fn graph_to_tensors<T: adkernel::Real>(
    pg: &ParamGraph<T>,
    arch: &ArchDescriptor,
) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out = Vec::new();
    let tri: Vec<T> = pg.edges.iter().filter(|e| e.edge_type == EdgeType::Triplanar).map(|e| e.weight).collect();
    let hash: Vec<T> = pg.edges.iter().filter(|e| e.edge_type == EdgeType::HashTable).map(|e| e.weight).collect();
    let mut weights: Vec<T> = pg.edges.iter().filter(|e| e.edge_type == EdgeType::LinearWeight).map(|e| e.weight).collect();
    let mut biases: Vec<T> = pg.edges.iter().filter(|e| e.edge_type == EdgeType::LinearBias).map(|e| e.weight).collect();
    let mut tri_off = 0;
    let mut hash_off = 0;
    let mut widx = 0;
    let mut bidx = 0;
    for (name, shape) in arch.expected_tensors() {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = if name.starts_with("tri.") {
            tri_off += numel;
            tri[tri_off - numel..tri_off].to_vec()
        } else if name.starts_with("hash.") {
            hash_off += numel;
            hash[hash_off - numel..hash_off].to_vec()
        } else if name.ends_with(".weight") {
            widx += numel;
            weights[widx - numel..widx].to_vec()
        } else {
            bidx += numel;
            biases[bidx - numel..bidx].to_vec()
        };
        out.push((name, Tensor::from_vec(data, &shape).map_err(crate::Error::from)?));
    }
    weights.clear();
    biases.clear();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{desk_preset, paper_preset, CheckpointMeta};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ckpt(name: &str, set: &str) -> NerfCheckpoint<f64> {
        let arch = crate::fields::preset(set, name).unwrap();
        NerfCheckpoint::init(
            &arch,
            CheckpointMeta { scene_id: "s".into(), family: name.into(), ..Default::default() },
            &mut ChaCha8Rng::seed_from_u64(42),
        )
        .unwrap()
    }

    #[test]
    fn test_mlp_counts_match_hand_enumeration() {
        // num_freqs=1, hidden [3], output 4: input 6 neurons, 3+4 neurons,
        // 2 bias nodes; 6*3 + 3*4 weight edges + 3+4 bias edges.
        let arch = ArchDescriptor {
            family: Family::Mlp,
            mlp_hidden_layers: 1,
            mlp_hidden_dim: 3,
            activation: crate::fields::MlpActivation::ReLU,
            frequency_encoding: true,
            num_freqs: Some(1),
            tri_resolution: None,
            tri_channels: None,
            hash_levels: None,
            hash_table_size_log2: None,
            hash_features_per_entry: None,
            hash_min_resolution: None,
            hash_max_resolution: None,
        };
        let c = NerfCheckpoint::<f64>::init(&arch, CheckpointMeta::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let pg = mlp_to_graph(&c);
        assert_eq!(pg.node_count(), 6 + 3 + 4 + 2);
        assert_eq!(pg.edge_count(), 6 * 3 + 3 * 4 + 3 + 4);
        assert_eq!(pg.count_nodes_of(NodeType::Bias), 2);
        // weights read back in (layer, out, in) order reproduce the tensors
        let w: Vec<f64> =
            pg.edges.iter().filter(|e| e.edge_type == EdgeType::LinearWeight).map(|e| e.weight).collect();
        let mut expect = c.tensor("mlp.layer0.weight").unwrap().data().to_vec();
        expect.extend_from_slice(c.tensor("mlp.layer1.weight").unwrap().data());
        assert_eq!(w, expect);
    }

    #[test]
    fn test_reference_hash_counts() {
        // N=4, T=2^12, F=2: hash subgraph has 4*(4096+2) nodes, 4*4096*2 edges
        let c = ckpt("HASH", "paper");
        let pg = hash_to_graph(&c);
        assert_eq!(pg.count_nodes_of(NodeType::HashTable), 4 * (4096 + 2));
        assert_eq!(pg.count_nodes_of(NodeType::HashTable), 16392);
        assert_eq!(pg.count_edges_of(EdgeType::HashTable), 4 * 4096 * 2);
        assert_eq!(pg.count_edges_of(EdgeType::HashTable), 32768);
        // much smaller than the voxel alternative N(R^3 + F)
        assert!(16392 < 4 * ((1usize << 21) + 2));
        // total edges conserve the parameter count
        assert_eq!(pg.edge_count(), c.param_count());
        pg.validate().unwrap();
    }

    #[test]
    fn test_reference_tri_counts() {
        // R=32, C=16: 3*1024 spatial + 16 channel nodes, 49152 tri edges
        let c = ckpt("TRI", "paper");
        let pg = triplane_to_graph(&c);
        assert_eq!(pg.count_nodes_of(NodeType::Triplanar), 3 * 32 * 32 + 16);
        assert_eq!(pg.count_edges_of(EdgeType::Triplanar), 3 * 32 * 32 * 16);
        assert_eq!(pg.count_edges_of(EdgeType::Triplanar), 49152);
        assert_eq!(pg.edge_count(), c.param_count());
    }

    #[test]
    fn test_minimal_hash_counts() {
        // N=1, T=1, F=1 -> 2 nodes, 1 edge in the hash subgraph
        let mut arch = paper_preset("HASH").unwrap();
        arch.hash_levels = Some(1);
        arch.hash_table_size_log2 = Some(0);
        arch.hash_features_per_entry = Some(1);
        let c = NerfCheckpoint::<f64>::init(&arch, CheckpointMeta::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let pg = hash_to_graph(&c);
        assert_eq!(pg.count_nodes_of(NodeType::HashTable), 2);
        assert_eq!(pg.count_edges_of(EdgeType::HashTable), 1);
    }

    #[test]
    fn test_tri_small_construction() {
        // R=2, C=2 without MLP contributions: 12 spatial + 2 channel nodes, 24 tri edges
        let mut arch = desk_preset("TRI").unwrap();
        arch.tri_resolution = Some(2);
        arch.tri_channels = Some(2);
        let c = NerfCheckpoint::<f64>::init(
            &arch,
            CheckpointMeta::default(),
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        let pg = triplane_to_graph(&c);
        assert_eq!(pg.count_nodes_of(NodeType::Triplanar), 3 * 4 + 2);
        assert_eq!(pg.count_edges_of(EdgeType::Triplanar), 3 * 4 * 2);
        // corner cell of the xy plane carries k = 0
        let e0 = pg.edges.iter().find(|e| e.edge_type == EdgeType::Triplanar).unwrap();
        assert_eq!(e0.ijk[2], 0.0);
        assert_eq!(e0.ijk[0], -1.0);
        assert_eq!(e0.ijk[1], -1.0);
        // xz-plane edges carry j = 0, yz-plane edges carry i = 0
        let tri_edges: Vec<_> = pg.edges.iter().filter(|e| e.edge_type == EdgeType::Triplanar).collect();
        for e in &tri_edges[8..16] {
            assert_eq!(e.ijk[1], 0.0);
        }
        for e in &tri_edges[16..24] {
            assert_eq!(e.ijk[0], 0.0);
        }
        // evenly spaced endpoints
        assert!(tri_edges.iter().all(|e| e.ijk.iter().all(|&v| v == -1.0 || v == 1.0 || v == 0.0)));
    }

    #[test]
    fn test_roundtrip_all_sweep_archs() {
        let paper = ["MLP", "TRI", "HASH", "MLP-2L", "MLP-32H", "TRI-2L", "TRI-32H", "TRI-16W", "TRI-8C", "HASH-2L", "HASH-32H", "HASH-3N", "HASH-11T"];
        let desk = ["MLP", "TRI", "HASH", "MLP-1L", "TRI-16H", "HASH-3N"];
        for (set, names) in [("paper", &paper[..]), ("desk", &desk[..])] {
            for name in names {
                let c = ckpt(name, set);
                let pg = checkpoint_to_graph(&c).unwrap();
                // conservation
                assert_eq!(pg.edge_count(), c.param_count(), "{set}/{name}");
                // lossless round trip
                let tensors = graph_to_tensors(&pg, &c.arch).unwrap();
                assert_eq!(tensors.len(), c.tensors.len());
                for ((n1, t1), (n2, t2)) in tensors.iter().zip(&c.tensors) {
                    assert_eq!(n1, n2);
                    assert_eq!(t1.shape(), t2.shape());
                    assert_eq!(t1.data(), t2.data(), "{set}/{name}/{n1}");
                }
                // node ids dense and edges valid
                pg.validate().unwrap();
            }
        }
    }

    #[test]
    fn test_hash_mlp_first_layer_matches_field_width() {
        let c = ckpt("HASH", "desk");
        let pg = checkpoint_to_graph(&c).unwrap();
        // the MLP's first linear layer consumes exactly N*F feature nodes
        let first_weight_edges =
            pg.edges.iter().filter(|e| e.edge_type == EdgeType::LinearWeight && e.layer == 2).count();
        assert_eq!(first_weight_edges, c.arch.mlp_input_width() * c.arch.mlp_hidden_dim);
        assert_eq!(c.arch.mlp_input_width(), 8);
    }

    #[test]
    fn test_edge_csv_dump() {
        let c = ckpt("MLP", "desk");
        let pg = checkpoint_to_graph(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.csv");
        pg.write_edge_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), pg.edge_count() + 1);
        assert!(text.starts_with("src,dst,weight"));
    }
}
