//! Frozen-encoder evaluation: embedding stores, the block classifier, and
//! exact nearest-neighbor instance retrieval with recall@k.

use std::collections::BTreeMap;
use std::path::Path;

use adkernel::nn::{dropout_train, BatchNorm};
use adkernel::{onecycle_lr, Activation, AdamW, AdamWConfig, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::gmn::{encode_value, graph_tensors, GmnParams};
use crate::ngc::Container;
use crate::paramgraph::checkpoint_to_graph;
use crate::{mix, rng_stream, Error, Result};

// ─── embedding store ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbeddingRow {
    pub checkpoint: String,
    pub scene_id: String,
    pub class_label: String,
    pub family: String,
    pub split: String,
}

/// One embedding per checkpoint, `[N, D]` f32 plus a JSON row index.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    pub embed_dim: usize,
    pub rows: Vec<EmbeddingRow>,
    pub values: Vec<f32>,
}

impl EmbeddingStore {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.values[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new("EMB");
        c.metadata = serde_json::json!({"rows": self.rows});
        c.tensors.push((
            "embeddings".into(),
            Tensor::from_vec(self.values.clone(), &[self.rows.len(), self.embed_dim]).map_err(crate::Error::from)?,
        ));
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.kind != "EMB" {
            return Err(Error::Format(format!("{}: kind {} is not EMB", path.display(), c.kind)));
        }
        let rows: Vec<EmbeddingRow> = serde_json::from_value(
            c.metadata.get("rows").cloned().ok_or_else(|| Error::Format("embedding store missing rows".into()))?,
        )?;
        let t = c.tensor("embeddings").ok_or_else(|| Error::Format("embedding store missing matrix".into()))?;
        let embed_dim = t.shape()[1];
        if t.shape()[0] != rows.len() {
            return Err(Error::Format(format!("{} rows vs {:?} matrix", rows.len(), t.shape())));
        }
        Ok(Self { embed_dim, rows, values: t.data().to_vec() })
    }

    pub fn filter(&self, pred: impl Fn(&EmbeddingRow) -> bool) -> EmbeddingStore {
        let mut out = EmbeddingStore { embed_dim: self.embed_dim, rows: Vec::new(), values: Vec::new() };
        for (i, r) in self.rows.iter().enumerate() {
            if pred(r) {
                out.rows.push(r.clone());
                out.values.extend_from_slice(self.vector(i));
            }
        }
        out
    }
}

/// Embed every checkpoint of the given families (training families plus
/// variants when present) with a frozen encoder.
pub fn embed_dataset(dataset: &Dataset, encoder: &GmnParams<f32>, families: &[String]) -> Result<EmbeddingStore> {
    let mut jobs = Vec::new();
    for scene in &dataset.manifest.scenes {
        for fam in families {
            if scene.checkpoints.contains_key(fam) {
                jobs.push((scene, fam.clone()));
            }
        }
    }
    let results: Vec<Result<(EmbeddingRow, Vec<f32>)>> = adkernel::par::map_indexed(jobs.len(), |i| {
        let (scene, fam) = &jobs[i];
        let ckpt = dataset.checkpoint(scene, fam)?;
        let gt = graph_tensors(&checkpoint_to_graph(&ckpt)?);
        let emb = encode_value(encoder, &gt)?;
        Ok((
            EmbeddingRow {
                checkpoint: scene.checkpoints[fam].clone(),
                scene_id: scene.id.clone(),
                class_label: scene.class_label.clone(),
                family: fam.clone(),
                split: scene.split.clone(),
            },
            emb,
        ))
    });
    let mut store = EmbeddingStore { embed_dim: encoder.cfg.embed_dim, rows: Vec::new(), values: Vec::new() };
    for r in results {
        let (row, emb) = r?;
        store.rows.push(row);
        store.values.extend(emb);
    }
    Ok(store)
}

// ─── classifier ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Hidden widths of the three (linear, batch-norm, ReLU, dropout)
    /// blocks; empty means scale from the embedding width (D, D/2, D/4).
    pub block_dims: Vec<usize>,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { block_dims: Vec::new(), dropout: 0.2, epochs: 150, batch_size: 256, max_lr: 1e-4, weight_decay: 1e-2 }
    }
}

impl ClassifierConfig {
    pub fn dims_for(&self, embed_dim: usize) -> Vec<usize> {
        if self.block_dims.is_empty() {
            vec![embed_dim, (embed_dim / 2).max(1), (embed_dim / 4).max(1)]
        } else {
            self.block_dims.clone()
        }
    }
}

/// Blocks of linear -> batch-norm -> ReLU -> dropout, then a final linear
/// to the class logits.
pub struct Classifier {
    pub classes: Vec<String>,
    pub weights: Vec<(String, Tensor<f32>)>,
    pub norms: Vec<BatchNorm<f32>>,
    pub dims: Vec<usize>,
}

impl Classifier {
    fn tensor(&self, name: &str) -> &Tensor<f32> {
        &self.weights.iter().find(|(n, _)| n == name).expect("classifier tensor").1
    }

    /// Deterministic eval-mode logits.
    pub fn logits(&self, x: &[f32], rows: usize) -> Result<Vec<f32>> {
        let dim = x.len() / rows.max(1);
        let mut g = Graph::<f32>::new();
        let mut h = g.constant(Tensor::from_vec(x.to_vec(), &[rows, dim]).map_err(crate::Error::from)?);
        for (bi, bn) in self.norms.iter().enumerate() {
            let w = g.constant(self.tensor(&format!("block{bi}.w")).clone());
            let b = g.constant(self.tensor(&format!("block{bi}.b")).clone());
            let lin = g.linear(h, w, Some(b), Activation::None)?;
            let gamma = g.constant(bn.gamma.clone());
            let beta = g.constant(bn.beta.clone());
            let normed = bn.forward_eval(&mut g, lin, gamma, beta)?;
            h = g.relu(normed);
        }
        let w = g.constant(self.tensor("out.w").clone());
        let b = g.constant(self.tensor("out.b").clone());
        let out = g.linear(h, w, Some(b), Activation::None)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn predict(&self, x: &[f32], rows: usize) -> Result<Vec<usize>> {
        let k = self.classes.len();
        let logits = self.logits(x, rows)?;
        Ok((0..rows)
            .map(|r| {
                let row = &logits[r * k..(r + 1) * k];
                row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0))).unwrap().0
            })
            .collect())
    }
}

/// Softmax cross-entropy training with AdamW and a one-cycle schedule.
pub fn train_classifier(
    store: &EmbeddingStore,
    classes: &[String],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<Classifier> {
    if store.is_empty() {
        return Err(Error::Invalid("train_classifier: empty embedding set".into()));
    }
    let distinct: std::collections::BTreeSet<&str> = store.rows.iter().map(|r| r.class_label.as_str()).collect();
    if distinct.len() < 2 {
        return Err(Error::Invalid(format!(
            "train_classifier: needs >= 2 classes, got {:?}",
            distinct
        )));
    }
    let k = classes.len();
    let dim = store.embed_dim;
    let labels: Vec<usize> = store
        .rows
        .iter()
        .map(|r| {
            classes
                .iter()
                .position(|c| c == &r.class_label)
                .ok_or_else(|| Error::Invalid(format!("label {} not in class set", r.class_label)))
        })
        .collect::<Result<_>>()?;

    let dims = cfg.dims_for(dim);
    let mut rng = rng_stream(seed, mix(&[0xC1A55]));
    let mut weights: Vec<(String, Tensor<f32>)> = Vec::new();
    let mut norms = Vec::new();
    let mut prev = dim;
    for (bi, &w) in dims.iter().enumerate() {
        weights.push((format!("block{bi}.w"), Tensor::kaiming(w, prev, &mut rng)));
        weights.push((format!("block{bi}.b"), Tensor::zeros(&[1, w])));
        norms.push(BatchNorm::new(w));
        prev = w;
    }
    weights.push(("out.w".into(), Tensor::kaiming(k, prev, &mut rng)));
    weights.push(("out.b".into(), Tensor::zeros(&[1, k])));
    // gamma/beta join the trainable list behind the weights
    let mut clf = Classifier { classes: classes.to_vec(), weights, norms, dims: dims.clone() };

    let n = store.len();
    let mut opt = AdamW::<f32>::new(AdamWConfig { weight_decay: cfg.weight_decay, ..Default::default() });
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_stream(seed, mix(&[0xC1A55E, epoch as u64])));
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * steps_per_epoch + bi;
            let lr = onecycle_lr(step, total_steps, cfg.max_lr)?;
            let rows = chunk.len();
            let mut x = Vec::with_capacity(rows * dim);
            for &i in chunk {
                x.extend_from_slice(store.vector(i));
            }
            let mut g = Graph::<f32>::new();
            let mut h = g.constant(Tensor::from_vec(x, &[rows, dim]).map_err(crate::Error::from)?);
            let mut learned: Vec<(Var, Vec<usize>)> = Vec::new(); // (var, shape)
            let mut var_of: BTreeMap<String, Var> = BTreeMap::new();
            for (name, t) in &clf.weights {
                let v = g.leaf(t.clone(), true);
                var_of.insert(name.clone(), v);
                learned.push((v, t.shape().to_vec()));
            }
            let mut bn_vars = Vec::new();
            for (bni, bn) in clf.norms.iter().enumerate() {
                let gamma = g.leaf(bn.gamma.clone(), true);
                let beta = g.leaf(bn.beta.clone(), true);
                bn_vars.push((gamma, beta));
                let _ = bni;
            }
            let mut drop_rng = rng_stream(seed, mix(&[0xD60, step as u64]));
            for bi2 in 0..clf.norms.len() {
                let lin = g.linear(h, var_of[&format!("block{bi2}.w")], Some(var_of[&format!("block{bi2}.b")]), Activation::None)?;
                let (gamma, beta) = bn_vars[bi2];
                let normed = clf.norms[bi2].forward_train(&mut g, lin, gamma, beta)?;
                let act = g.relu(normed);
                h = dropout_train(&mut g, act, cfg.dropout, &mut drop_rng)?;
            }
            let logits = g.linear(h, var_of["out.w"], Some(var_of["out.b"]), Activation::None)?;
            // stable log-softmax cross entropy against one-hot labels
            let rowmax: Vec<f32> = {
                let lv = g.value(logits).data();
                (0..rows).map(|r| lv[r * k..(r + 1) * k].iter().cloned().fold(f32::MIN, f32::max)).collect()
            };
            let shift = g.constant(Tensor::from_vec(rowmax.iter().map(|&v| -v).collect(), &[rows, 1]).map_err(crate::Error::from)?);
            let centered = g.add_col(logits, shift)?;
            let expd = g.exp(centered);
            let sums = g.sum_axis1(expd)?;
            let lse = g.log(sums);
            let neg_lse = g.affine(lse, -1.0, 0.0);
            let logsm = g.add_col(centered, neg_lse)?;
            let onehot = Tensor::from_fn(&[rows, k], |i| {
                if labels[chunk[i / k]] == i % k {
                    1.0f32
                } else {
                    0.0
                }
            });
            let picked = g.mul_const(logsm, &onehot)?;
            let total = g.sum_all(picked);
            let loss = g.affine(total, -1.0 / rows as f64, 0.0);
            let mut grads = g.backward(loss)?;

            let mut params: Vec<&mut Tensor<f32>> = Vec::new();
            let mut gl: Vec<Tensor<f32>> = Vec::new();
            for ((name, t), (v, shape)) in clf.weights.iter_mut().zip(&learned) {
                let _ = name;
                params.push(t);
                gl.push(grads.take(*v).map(|x| x.reshape(shape).unwrap()).unwrap_or_else(|| Tensor::zeros(shape)));
            }
            for (bn, (gv, bv)) in clf.norms.iter_mut().zip(&bn_vars) {
                let gshape = bn.gamma.shape().to_vec();
                params.push(&mut bn.gamma);
                gl.push(grads.take(*gv).map(|x| x.reshape(&gshape).unwrap()).unwrap_or_else(|| Tensor::zeros(&gshape)));
                let bshape = bn.beta.shape().to_vec();
                params.push(&mut bn.beta);
                gl.push(grads.take(*bv).map(|x| x.reshape(&bshape).unwrap()).unwrap_or_else(|| Tensor::zeros(&bshape)));
            }
            let grefs: Vec<&Tensor<f32>> = gl.iter().collect();
            opt.step(&mut params, &grefs, lr)?;
        }
    }
    Ok(clf)
}

/// Top-1 accuracy in percent.
pub fn evaluate_classifier(clf: &Classifier, store: &EmbeddingStore) -> Result<f64> {
    if store.is_empty() {
        return Ok(0.0);
    }
    let preds = clf.predict(&store.values, store.len())?;
    let correct = preds
        .iter()
        .zip(&store.rows)
        .filter(|(&p, r)| clf.classes.get(p).map(|c| c == &r.class_label).unwrap_or(false))
        .count();
    Ok(100.0 * correct as f64 / store.len() as f64)
}

// ─── retrieval ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalResult {
    pub k_values: Vec<usize>,
    /// recall@k per k, in percent.
    pub recall: BTreeMap<usize, f64>,
    pub random_baseline: BTreeMap<usize, f64>,
    pub gallery_size: usize,
    pub queries: usize,
    /// Queries whose target scene is absent from the gallery.
    pub excluded_queries: usize,
    /// Per-query gallery ranking (indices into the gallery store).
    pub rankings: Vec<Vec<u32>>,
}

pub fn distance(metric: DistanceMetric, a: &[f32], b: &[f32]) -> f64 {
    match metric {
        DistanceMetric::Euclidean => {
            a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>().sqrt()
        }
        DistanceMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
            let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            1.0 - dot / (na * nb).max(1e-30)
        }
    }
}

/// The random-ranking reference: `100 k / |gallery|`.
pub fn random_baseline_recall(k: usize, gallery: usize) -> f64 {
    100.0 * k as f64 / gallery as f64
}

/// Exact brute-force retrieval: rank the gallery by distance per query;
/// recall@k credits queries whose same-scene item ranks within k. The
/// query's own checkpoint is excluded from its gallery ranking.
pub fn retrieve(
    queries: &EmbeddingStore,
    gallery: &EmbeddingStore,
    ks: &[usize],
    metric: DistanceMetric,
) -> Result<RetrievalResult> {
    if queries.embed_dim != gallery.embed_dim {
        return Err(Error::Invalid(format!(
            "retrieve: query dim {} vs gallery dim {}",
            queries.embed_dim, gallery.embed_dim
        )));
    }
    if gallery.is_empty() || queries.is_empty() {
        return Err(Error::Invalid("retrieve: empty query or gallery set".into()));
    }
    let rankings: Vec<Vec<u32>> = adkernel::par::map_indexed(queries.len(), |qi| {
        let q = queries.vector(qi);
        let qrow = &queries.rows[qi];
        let mut order: Vec<(f64, u32)> = gallery
            .rows
            .iter()
            .enumerate()
            .filter(|(_, g)| !(g.checkpoint == qrow.checkpoint && g.family == qrow.family))
            .map(|(gi, _)| (distance(metric, q, gallery.vector(gi)), gi as u32))
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        order.into_iter().map(|(_, gi)| gi).collect()
    });
    let mut excluded = 0usize;
    let mut hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut counted = 0usize;
    for (qi, ranking) in rankings.iter().enumerate() {
        let qrow = &queries.rows[qi];
        let target_rank =
            ranking.iter().position(|&gi| gallery.rows[gi as usize].scene_id == qrow.scene_id);
        match target_rank {
            None => excluded += 1,
            Some(rank) => {
                counted += 1;
                for (&k, h) in hits.iter_mut() {
                    if rank < k {
                        *h += 1;
                    }
                }
            }
        }
    }
    let denom = counted.max(1) as f64;
    Ok(RetrievalResult {
        k_values: ks.to_vec(),
        recall: hits.iter().map(|(&k, &h)| (k, 100.0 * h as f64 / denom)).collect(),
        random_baseline: ks.iter().map(|&k| (k, random_baseline_recall(k, gallery.len()))).collect(),
        gallery_size: gallery.len(),
        queries: queries.len(),
        excluded_queries: excluded,
        rankings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, &str, &str, &str, Vec<f32>)]) -> EmbeddingStore {
        let dim = entries[0].4.len();
        let mut s = EmbeddingStore { embed_dim: dim, rows: Vec::new(), values: Vec::new() };
        for (ckpt, scene, class, family, v) in entries {
            s.rows.push(EmbeddingRow {
                checkpoint: ckpt.to_string(),
                scene_id: scene.to_string(),
                class_label: class.to_string(),
                family: family.to_string(),
                split: "test".into(),
            });
            s.values.extend_from_slice(v);
        }
        s
    }

    #[test]
    fn test_store_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = store(&[
            ("a.ngc", "s0", "sphere", "MLP", vec![1.0, 2.0]),
            ("b.ngc", "s1", "box", "TRI", vec![-0.5, 0.25]),
        ]);
        let path = dir.path().join("e.ngc");
        s.save(&path).unwrap();
        let back = EmbeddingStore::load(&path).unwrap();
        assert_eq!(back.rows, s.rows);
        assert_eq!(back.values, s.values);
    }

    #[test]
    fn test_random_baseline_formula() {
        assert_eq!(random_baseline_recall(1, 60), 100.0 / 60.0);
        // the reference configuration: k=10 over a 3961-item gallery
        assert!((random_baseline_recall(10, 3961) - 0.25).abs() < 0.005);
    }

    #[test]
    fn test_retrieve_exact_duplicate_gets_recall_at_1() {
        let q = store(&[("q.ngc", "s0", "sphere", "MLP", vec![0.5, 0.5])]);
        let g = store(&[
            ("g1.ngc", "s9", "box", "TRI", vec![5.0, 5.0]),
            ("g2.ngc", "s0", "sphere", "TRI", vec![0.5, 0.5]),
            ("g3.ngc", "s2", "box", "TRI", vec![-1.0, 2.0]),
        ]);
        let res = retrieve(&q, &g, &[1, 2], DistanceMetric::Euclidean).unwrap();
        assert_eq!(res.recall[&1], 100.0);
        assert_eq!(res.excluded_queries, 0);
        // non-decreasing in k
        assert!(res.recall[&2] >= res.recall[&1]);
    }

    #[test]
    fn test_retrieve_missing_target_counts_excluded() {
        let q = store(&[("q.ngc", "s0", "sphere", "MLP", vec![0.0, 0.0])]);
        let g = store(&[("g1.ngc", "s9", "box", "TRI", vec![1.0, 0.0])]);
        let res = retrieve(&q, &g, &[1], DistanceMetric::Euclidean).unwrap();
        assert_eq!(res.excluded_queries, 1);
        assert_eq!(res.recall[&1], 0.0);
    }

    #[test]
    fn test_retrieve_excludes_own_checkpoint() {
        // the query itself sits in the gallery; its twin of another family
        // must still be found at rank 1
        let q = store(&[("same.ngc", "s0", "sphere", "MLP", vec![1.0, 0.0])]);
        let g = store(&[
            ("same.ngc", "s0", "sphere", "MLP", vec![1.0, 0.0]),
            ("twin.ngc", "s0", "sphere", "TRI", vec![0.9, 0.0]),
            ("other.ngc", "s1", "box", "TRI", vec![-1.0, 0.0]),
        ]);
        let res = retrieve(&q, &g, &[1], DistanceMetric::Euclidean).unwrap();
        assert_eq!(res.recall[&1], 100.0);
        assert!(!res.rankings[0].contains(&0));
    }

    #[test]
    fn test_classifier_linearly_separable_reaches_full_train_accuracy() {
        let mut entries = Vec::new();
        let mut values = Vec::new();
        for i in 0..24 {
            let class = if i % 2 == 0 { "a" } else { "b" };
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let v = vec![
                sign * (1.0 + (i as f32) * 0.01),
                -sign * 0.5,
                0.1 * (i as f32 % 3.0),
            ];
            values.push((format!("c{i}.ngc"), format!("s{i}"), class.to_string(), "MLP".to_string(), v));
        }
        for (c, s, cl, f, v) in &values {
            entries.push((c.as_str(), s.as_str(), cl.as_str(), f.as_str(), v.clone()));
        }
        let store = store(&entries);
        let cfg = ClassifierConfig { epochs: 60, batch_size: 24, max_lr: 5e-3, ..Default::default() };
        let clf = train_classifier(&store, &["a".into(), "b".into()], &cfg, 5).unwrap();
        let acc = evaluate_classifier(&clf, &store).unwrap();
        assert_eq!(acc, 100.0);
        // eval is deterministic
        assert_eq!(
            clf.predict(&store.values, store.len()).unwrap(),
            clf.predict(&store.values, store.len()).unwrap()
        );
    }

    #[test]
    fn test_classifier_rejects_single_class() {
        let s = store(&[
            ("a.ngc", "s0", "same", "MLP", vec![1.0, 0.0]),
            ("b.ngc", "s1", "same", "MLP", vec![0.0, 1.0]),
        ]);
        assert!(train_classifier(&s, &["same".into()], &ClassifierConfig::default(), 1).is_err());
    }

    #[test]
    fn test_classifier_desk_dims_scale_with_embedding() {
        let cfg = ClassifierConfig::default();
        assert_eq!(cfg.dims_for(256), vec![256, 128, 64]);
        assert_eq!(cfg.dims_for(1024), vec![1024, 512, 256]);
    }
}
