//! Proposal feature aggregation for a key frame: a local pool of nearby
//! frames, a global pool drawn from a shuffled frame order, and a FIFO
//! memory of earlier key-frame features.
//!
//! Both relation variants are single-head scaled dot-product attention in
//! residual form, `out = X + softmax(QK^T / sqrt(a) + B) V Wo`, with a
//! zero-initialised output projection `Wo`. The location-free variant has
//! `B = 0`; the location-based variant adds `B_ij = sum_h v_h tanh(g_ij . U_h + c_h)`
//! over the box-pair geometry `g_ij`. Keys and values are treated as constants
//! when differentiating.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::BoundingBox;
use crate::detector::Proposal;
use crate::error::{Error, Result};
use crate::params::{gaussian, Mat, ParamStore};
use crate::seed::{rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    pub enabled: bool,
    /// Local pool half window `T_l`.
    pub local_half_window: usize,
    /// Global pool length `T_g`, in frames.
    pub global_frames: usize,
    /// Maximum number of memory features.
    pub memory_capacity: usize,
    pub stacks_n1: usize,
    pub stacks_n2: usize,
    pub attention_dim: usize,
    pub geometry_hidden: usize,
    /// Preceding frames whose features stand in for the memory during training.
    pub train_memory_frames: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            enabled: true,
            local_half_window: 12,
            global_frames: 10,
            memory_capacity: 25 * 50,
            stacks_n1: 1,
            stacks_n2: 1,
            attention_dim: 32,
            geometry_hidden: 8,
            train_memory_frames: 2,
        }
    }
}

impl AggregationConfig {
    /// Aggregation switched off: every stage is the identity.
    pub fn disabled() -> Self {
        AggregationConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.attention_dim == 0 {
            return Err(Error::Config("aggregation.attention_dim must be positive".into()));
        }
        if self.enabled && self.stacks_n2 > 0 && self.geometry_hidden == 0 {
            return Err(Error::Config("aggregation.geometry_hidden must be positive".into()));
        }
        Ok(())
    }
}

/// Frame range of the local pool around key frame `k` of a `len`-frame video.
pub fn local_frames(len: usize, k: usize, half_window: usize) -> std::ops::RangeInclusive<usize> {
    k.saturating_sub(half_window)..=(k + half_window).min(len - 1)
}

/// Proposals of frames `max(0, k - T_l) ..= min(T - 1, k + T_l)`.
pub fn build_local_pool(all: &[Vec<Proposal>], k: usize, half_window: usize) -> Vec<&Proposal> {
    local_frames(all.len(), k, half_window)
        .flat_map(|t| all[t].iter())
        .collect()
}

/// Seeded permutation `S` of `0..len`.
pub fn shuffle_permutation(len: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut rng(seed));
    perm
}

/// Frames `S_k, ..., S_{k+T_g-1}`, positions wrapping modulo the video length.
pub fn global_frames(perm: &[usize], k: usize, global_len: usize) -> Vec<usize> {
    (0..global_len).map(|i| perm[(k + i) % perm.len()]).collect()
}

/// Proposals of the global pool for key frame `k`.
pub fn build_global_pool(all: &[Vec<Proposal>], k: usize, global_len: usize, shuffle_seed: u64) -> Vec<&Proposal> {
    let perm = shuffle_permutation(all.len(), shuffle_seed);
    global_frames(&perm, k, global_len)
        .into_iter()
        .flat_map(|t| all[t].iter())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub feature: Vec<f64>,
    pub bbox: BoundingBox,
    pub frame_index: usize,
}

/// Append key-frame features, evicting the oldest entries beyond `capacity`.
pub fn update_memory(memory: &mut VecDeque<MemoryEntry>, entries: impl IntoIterator<Item = MemoryEntry>, capacity: usize) {
    memory.extend(entries);
    while memory.len() > capacity {
        memory.pop_front();
    }
}

/// Per-video aggregation state, advanced one key frame at a time.
#[derive(Debug, Clone)]
pub struct PoolState {
    pub shuffle: Vec<usize>,
    memory: VecDeque<MemoryEntry>,
    capacity: usize,
    last_key: Option<usize>,
}

impl PoolState {
    pub fn new(len: usize, shuffle_seed: u64, capacity: usize) -> Self {
        PoolState {
            shuffle: shuffle_permutation(len, shuffle_seed),
            memory: VecDeque::new(),
            capacity,
            last_key: None,
        }
    }

    pub fn memory(&self) -> &VecDeque<MemoryEntry> {
        &self.memory
    }

    /// Store the enhanced features of key frame `k`. Key frames must be
    /// visited in increasing order.
    pub fn commit(&mut self, k: usize, features: &Mat, boxes: &[BoundingBox]) -> Result<()> {
        if self.last_key.is_some_and(|last| k <= last) {
            return Err(Error::Contract(format!(
                "key frame {k} committed after key frame {}",
                self.last_key.unwrap_or_default()
            )));
        }
        self.last_key = Some(k);
        let entries = features.rows().into_iter().zip(boxes).map(|(f, b)| MemoryEntry {
            feature: f.to_vec(),
            bbox: *b,
            frame_index: k,
        });
        update_memory(&mut self.memory, entries, self.capacity);
        Ok(())
    }
}

/// Box-pair geometry used by the location-based variant.
pub fn pair_geometry(query: &BoundingBox, key: &BoundingBox) -> [f64; 4] {
    let (qw, qh) = (query.width().max(1e-6), query.height().max(1e-6));
    let (kw, kh) = (key.width().max(1e-6), key.height().max(1e-6));
    let (qx, qy) = query.center();
    let (kx, ky) = key.center();
    [(kx - qx) / qw, (ky - qy) / qh, (kw / qw).ln(), (kh / qh).ln()]
}

fn stack_prefix(variant: &str, s: usize) -> String {
    format!("agg.{variant}.{s}")
}

/// Add relation-module parameters for both variants to `params`.
pub fn init_params(config: &AggregationConfig, d: usize, rng: &mut Rng, params: &mut ParamStore) {
    let a = config.attention_dim;
    let std = 1.0 / (d as f64).sqrt();
    for (variant, stacks) in [("n1", config.stacks_n1), ("n2", config.stacks_n2)] {
        for s in 0..stacks {
            let p = stack_prefix(variant, s);
            params.insert(format!("{p}.wq"), gaussian(d, a, std, rng));
            params.insert(format!("{p}.wk"), gaussian(d, a, std, rng));
            params.insert(format!("{p}.wv"), gaussian(d, a, std, rng));
            params.insert(format!("{p}.wo"), Mat::zeros((a, d)));
            if variant == "n2" {
                let h = config.geometry_hidden;
                params.insert(format!("{p}.geo.u"), gaussian(4, h, 0.5, rng));
                params.insert(format!("{p}.geo.c"), Mat::zeros((1, h)));
                params.insert(format!("{p}.geo.v"), gaussian(1, h, 0.1, rng));
            }
        }
    }
}

#[derive(Debug, Clone)]
struct GeometryCache {
    /// `(n*m) x 4` pair geometry and `(n*m) x H` tanh activations.
    g: Mat,
    t: Mat,
}

#[derive(Debug, Clone)]
pub struct RelationCache {
    prefix: String,
    x: Mat,
    y: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    attn: Mat,
    mixed: Mat,
    geometry: Option<GeometryCache>,
}

fn softmax_rows(s: &mut Mat) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// One residual attention block. `boxes` selects the location-based variant.
/// With no keys the input is returned unchanged.
pub fn relation_forward(
    params: &ParamStore,
    prefix: &str,
    x: &Mat,
    y: &Mat,
    boxes: Option<(&[BoundingBox], &[BoundingBox])>,
) -> Result<(Mat, Option<RelationCache>)> {
    let d = x.ncols();
    if y.nrows() == 0 || x.nrows() == 0 {
        return Ok((x.clone(), None));
    }
    if y.ncols() != d || params.get(&format!("{prefix}.wq")).nrows() != d {
        return Err(Error::Model(format!(
            "{prefix}: feature dims differ (queries {d}, keys {}, weights {})",
            y.ncols(),
            params.get(&format!("{prefix}.wq")).nrows()
        )));
    }
    let wq = params.get(&format!("{prefix}.wq"));
    let a = wq.ncols() as f64;
    let q = x.dot(wq);
    let k = y.dot(params.get(&format!("{prefix}.wk")));
    let v = y.dot(params.get(&format!("{prefix}.wv")));
    let mut s = q.dot(&k.t()) / a.sqrt();
    let geometry = match boxes {
        Some((qb, kb)) => {
            if qb.len() != x.nrows() || kb.len() != y.nrows() {
                return Err(Error::Model(format!("{prefix}: box count does not match feature count")));
            }
            let (n, m) = (qb.len(), kb.len());
            let mut g = Mat::zeros((n * m, 4));
            for (i, bq) in qb.iter().enumerate() {
                for (j, bk) in kb.iter().enumerate() {
                    let pg = pair_geometry(bq, bk);
                    for (c, val) in pg.iter().enumerate() {
                        g[[i * m + j, c]] = *val;
                    }
                }
            }
            let mut t = g.dot(params.get(&format!("{prefix}.geo.u"))) + params.get(&format!("{prefix}.geo.c"));
            t.mapv_inplace(f64::tanh);
            let bias = t.dot(&params.get(&format!("{prefix}.geo.v")).t());
            s += &bias.into_shape_with_order((n, m)).expect("n*m rows");
            Some(GeometryCache { g, t })
        }
        None => None,
    };
    softmax_rows(&mut s);
    let mixed = s.dot(&v);
    let out = x + &mixed.dot(params.get(&format!("{prefix}.wo")));
    let cache = RelationCache {
        prefix: prefix.to_string(),
        x: x.clone(),
        y: y.clone(),
        q,
        k,
        v,
        attn: s,
        mixed,
        geometry,
    };
    Ok((out, Some(cache)))
}

/// Accumulates parameter gradients and returns the gradient w.r.t. the queries.
pub fn relation_backward(params: &ParamStore, cache: &RelationCache, dout: &Mat, grads: &mut ParamStore) -> Mat {
    let p = &cache.prefix;
    let wo = params.get(&format!("{p}.wo"));
    let wq = params.get(&format!("{p}.wq"));
    let a = wq.ncols() as f64;
    grads.accumulate(&format!("{p}.wo"), &cache.mixed.t().dot(dout));
    let dmixed = dout.dot(&wo.t());
    let dattn = dmixed.dot(&cache.v.t());
    grads.accumulate(&format!("{p}.wv"), &cache.y.t().dot(&cache.attn.t().dot(&dmixed)));
    let mut ds = &cache.attn * &dattn;
    for (mut row, arow) in ds.rows_mut().into_iter().zip(cache.attn.rows()) {
        let dot = row.sum();
        row.zip_mut_with(&arow, |d, &av| *d -= av * dot);
    }
    if let Some(geo) = &cache.geometry {
        let db = ds.clone().into_shape_with_order((geo.g.nrows(), 1)).expect("n*m");
        let v = params.get(&format!("{p}.geo.v"));
        grads.accumulate(&format!("{p}.geo.v"), &db.t().dot(&geo.t));
        let mut dz = db.dot(v);
        dz.zip_mut_with(&geo.t, |d, &t| *d *= 1.0 - t * t);
        grads.accumulate(&format!("{p}.geo.u"), &geo.g.t().dot(&dz));
        grads.accumulate(&format!("{p}.geo.c"), &dz.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0)));
    }
    ds /= a.sqrt();
    let dq = ds.dot(&cache.k);
    let dk = ds.t().dot(&cache.q);
    grads.accumulate(&format!("{p}.wq"), &cache.x.t().dot(&dq));
    grads.accumulate(&format!("{p}.wk"), &cache.y.t().dot(&dk));
    dout + &dq.dot(&wq.t())
}

/// Caches of a stack of relation blocks, innermost first.
#[derive(Debug, Clone, Default)]
pub struct StackCache {
    blocks: Vec<RelationCache>,
}

fn run_stack(
    params: &ParamStore,
    variant: &str,
    stacks: usize,
    x: &Mat,
    y: &Mat,
    boxes: Option<(&[BoundingBox], &[BoundingBox])>,
) -> Result<(Mat, StackCache)> {
    let mut out = x.clone();
    let mut cache = StackCache::default();
    for s in 0..stacks {
        let (next, c) = relation_forward(params, &stack_prefix(variant, s), &out, y, boxes)?;
        out = next;
        cache.blocks.extend(c);
    }
    Ok((out, cache))
}

/// Location-free aggregation of the global pool `g` into queries `x`.
pub fn aggregate_global(params: &ParamStore, config: &AggregationConfig, x: &Mat, g: &Mat) -> Result<(Mat, StackCache)> {
    if !config.enabled {
        return Ok((x.clone(), StackCache::default()));
    }
    run_stack(params, "n1", config.stacks_n1, x, g, None)
}

/// Location-based aggregation of `memory` into queries `x` with boxes `x_boxes`.
pub fn aggregate_memory(
    params: &ParamStore,
    config: &AggregationConfig,
    x: &Mat,
    x_boxes: &[BoundingBox],
    memory: &[&MemoryEntry],
) -> Result<(Mat, StackCache)> {
    if !config.enabled || memory.is_empty() {
        return Ok((x.clone(), StackCache::default()));
    }
    let d = x.ncols();
    if let Some(e) = memory.iter().find(|e| e.feature.len() != d) {
        return Err(Error::Model(format!(
            "memory feature from frame {} has dim {}, expected {d}",
            e.frame_index,
            e.feature.len()
        )));
    }
    let y = Mat::from_shape_fn((memory.len(), d), |(i, j)| memory[i].feature[j]);
    let kb: Vec<BoundingBox> = memory.iter().map(|e| e.bbox).collect();
    run_stack(params, "n2", config.stacks_n2, x, &y, Some((x_boxes, &kb)))
}

/// Backward through a stack; returns the query gradient.
pub fn stack_backward(params: &ParamStore, cache: &StackCache, dout: &Mat, grads: &mut ParamStore) -> Mat {
    let mut d = dout.clone();
    for block in cache.blocks.iter().rev() {
        d = relation_backward(params, block, &d, grads);
    }
    d
}
