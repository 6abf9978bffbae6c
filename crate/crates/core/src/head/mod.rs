//! Detection head: classifier (cosine or fully connected) with a background
//! column at index 0, plus a class-wise box regressor over the foreground
//! classes.

mod boxes;

use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

pub use boxes::{decode_boxes, BoxCoder};

use crate::corpus::ClassId;
use crate::error::{Error, Result};
use crate::params::{gaussian, Mat, ParamStore};
use crate::seed::rng;

pub const DEFAULT_SIGMA: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Cosine,
    FullyConnected,
}

/// Cosine similarity between `x` and every column of `w`. A zero-norm `x`
/// (or column) scores zero.
pub fn cosine_scores(w: &Mat, x: &[f64]) -> Vec<f64> {
    assert_eq!(w.nrows(), x.len(), "feature dimension mismatch");
    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if xn == 0.0 {
        log::warn!("zero-norm feature vector scored as all zeros");
        return vec![0.0; w.ncols()];
    }
    w.columns()
        .into_iter()
        .map(|col| {
            let wn = col.dot(&col).sqrt();
            if wn == 0.0 {
                0.0
            } else {
                (col.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / (wn * xn)).clamp(-1.0, 1.0)
            }
        })
        .collect()
}

/// `softmax(sigma * scores)`.
pub fn class_probabilities(scores: &[f64], sigma: f64) -> Vec<f64> {
    softmax(&scores.iter().map(|s| sigma * s).collect::<Vec<_>>())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead {
    pub variant: HeadVariant,
    pub sigma: f64,
    /// Foreground classes in column order; class `classes[i]` is column `i + 1`.
    pub classes: Vec<ClassId>,
    /// `cls.w` (d x C), `cls.b` (1 x C, fully connected only), `reg.w` (d x 4F), `reg.b` (1 x 4F).
    pub params: ParamStore,
}

/// Cached forward quantities needed by [`DetectionHead::backward`].
#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Mat,
    /// Unit-normalised rows of the input and their norms (cosine variant).
    normalized: Option<(Mat, Vec<f64>, Mat, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// `n x C` classification logits (already multiplied by sigma for the cosine variant).
    pub logits: Mat,
    /// `n x 4F` class-wise box deltas.
    pub deltas: Mat,
}

impl DetectionHead {
    pub fn new_fully_connected(feature_dim: usize, classes: Vec<ClassId>, seed: u64) -> Self {
        let mut r = rng(seed);
        let c = classes.len() + 1;
        let f = classes.len();
        let mut params = ParamStore::new();
        params.insert("cls.w", gaussian(feature_dim, c, 0.01, &mut r));
        params.insert("cls.b", Mat::zeros((1, c)));
        params.insert("reg.w", gaussian(feature_dim, 4 * f, 0.001, &mut r));
        params.insert("reg.b", Mat::zeros((1, 4 * f)));
        DetectionHead {
            variant: HeadVariant::FullyConnected,
            sigma: DEFAULT_SIGMA,
            classes,
            params,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.params.get("cls.w").nrows()
    }

    pub fn num_columns(&self) -> usize {
        self.classes.len() + 1
    }

    pub fn column_of(&self, class_id: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class_id).map(|i| i + 1)
    }

    /// Replace the fully connected classifier by a cosine classifier whose
    /// prototypes are the unit-normalised pretrained class weight vectors.
    /// The regressor is carried over unchanged.
    pub fn to_cosine(&self, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Argument(format!("sigma must be positive, got {sigma}")));
        }
        let mut params = ParamStore::new();
        let mut w = self.params.get("cls.w").clone();
        for mut col in w.columns_mut() {
            let n = col.dot(&col).sqrt();
            if n > 0.0 {
                col.mapv_inplace(|v| v / n);
            }
        }
        params.insert("cls.w", w);
        params.insert("reg.w", self.params.get("reg.w").clone());
        params.insert("reg.b", self.params.get("reg.b").clone());
        Ok(DetectionHead {
            variant: HeadVariant::Cosine,
            sigma,
            classes: self.classes.clone(),
            params,
        })
    }

    pub fn forward(&self, x: &Mat) -> (HeadOutput, HeadCache) {
        let w = self.params.get("cls.w");
        assert_eq!(x.ncols(), w.nrows(), "feature dimension mismatch");
        let (logits, normalized) = match self.variant {
            HeadVariant::FullyConnected => (x.dot(w) + self.params.get("cls.b"), None),
            HeadVariant::Cosine => {
                let (xn, xnorm) = normalize_rows(x);
                let (wn_t, wnorm) = normalize_rows(&w.t().to_owned());
                let wn = wn_t.t().to_owned();
                let logits = xn.dot(&wn) * self.sigma;
                (logits, Some((xn, xnorm, wn, wnorm)))
            }
        };
        let deltas = x.dot(self.params.get("reg.w")) + self.params.get("reg.b");
        (
            HeadOutput { logits, deltas },
            HeadCache {
                input: x.clone(),
                normalized,
            },
        )
    }

    /// Gradients of the head parameters and of the input features.
    pub fn backward(&self, cache: &HeadCache, dlogits: &Mat, ddeltas: &Mat) -> (ParamStore, Mat) {
        let x = &cache.input;
        let mut grads = ParamStore::new();
        let reg_w = self.params.get("reg.w");
        grads.insert("reg.w", x.t().dot(ddeltas));
        grads.insert("reg.b", ddeltas.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let mut dx = ddeltas.dot(&reg_w.t());
        match (&self.variant, &cache.normalized) {
            (HeadVariant::FullyConnected, _) => {
                let w = self.params.get("cls.w");
                grads.insert("cls.w", x.t().dot(dlogits));
                grads.insert("cls.b", dlogits.sum_axis(Axis(0)).insert_axis(Axis(0)));
                dx += &dlogits.dot(&w.t());
            }
            (HeadVariant::Cosine, Some((xn, xnorm, wn, wnorm))) => {
                let g = dlogits * self.sigma;
                let dxn = g.dot(&wn.t());
                let dwn = xn.t().dot(&g);
                dx += &unnormalize_rows_grad(xn, xnorm, &dxn);
                let dw = unnormalize_rows_grad(&wn.t().to_owned(), wnorm, &dwn.t().to_owned());
                grads.insert("cls.w", dw.t().to_owned());
            }
            (HeadVariant::Cosine, None) => unreachable!("cosine cache without normalisation"),
        }
        (grads, dx)
    }
}

/// Rows scaled to unit norm (zero rows stay zero) and the original norms.
fn normalize_rows(m: &Mat) -> (Mat, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
        norms.push(n);
    }
    (out, norms)
}

/// Back-propagate through row normalisation: `dx = (g - (g.u) u) / |x|`.
fn unnormalize_rows_grad(unit: &Mat, norms: &[f64], g: &Mat) -> Mat {
    let mut out = Mat::zeros(g.raw_dim());
    for (i, (u, gi)) in unit.rows().into_iter().zip(g.rows()).enumerate() {
        if norms[i] == 0.0 {
            continue;
        }
        let proj = u.dot(&gi);
        let mut row = out.row_mut(i);
        for ((o, &uv), &gv) in row.iter_mut().zip(u.iter()).zip(gi.iter()) {
            *o = (gv - proj * uv) / norms[i];
        }
    }
    out
}

/// Append `novel` classes: new classifier columns and `4 * N` regressor
/// outputs, randomly initialised from `init_seed`. Existing columns are
/// copied bit for bit.
pub fn expand_head(head: &DetectionHead, novel: &[ClassId], init_seed: u64) -> Result<DetectionHead> {
    if novel.is_empty() {
        return Err(Error::Argument("expand_head needs at least one novel class".into()));
    }
    if let Some(c) = novel.iter().find(|c| head.classes.contains(c)) {
        return Err(Error::Argument(format!("class {c} already has a head column")));
    }
    let mut r = rng(init_seed);
    let n = novel.len();
    let d = head.feature_dim();
    let (c_old, f_old) = (head.num_columns(), head.classes.len());

    let w_old = head.params.get("cls.w");
    let mut w = Mat::zeros((d, c_old + n));
    w.slice_mut(s![.., ..c_old]).assign(w_old);
    let mut fresh = gaussian(d, n, 1.0, &mut r);
    match head.variant {
        HeadVariant::Cosine => {
            for mut col in fresh.columns_mut() {
                let norm = col.dot(&col).sqrt();
                col.mapv_inplace(|v| v / norm);
            }
        }
        HeadVariant::FullyConnected => fresh *= 0.01,
    }
    w.slice_mut(s![.., c_old..]).assign(&fresh);

    let mut params = ParamStore::new();
    params.insert("cls.w", w);
    if let Some(b_old) = head.params.try_get("cls.b") {
        let mut b = Mat::zeros((1, c_old + n));
        b.slice_mut(s![.., ..c_old]).assign(b_old);
        params.insert("cls.b", b);
    }
    let rw_old = head.params.get("reg.w");
    let mut rw = Mat::zeros((d, 4 * (f_old + n)));
    rw.slice_mut(s![.., ..4 * f_old]).assign(rw_old);
    rw.slice_mut(s![.., 4 * f_old..]).assign(&gaussian(d, 4 * n, 0.001, &mut r));
    params.insert("reg.w", rw);
    let mut rb = Mat::zeros((1, 4 * (f_old + n)));
    rb.slice_mut(s![.., ..4 * f_old]).assign(head.params.get("reg.b"));
    params.insert("reg.b", rb);

    let mut classes = head.classes.clone();
    classes.extend_from_slice(novel);
    Ok(DetectionHead {
        variant: head.variant,
        sigma: head.sigma,
        classes,
        params,
    })
}
