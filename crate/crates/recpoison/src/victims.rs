//! Victim recommenders retrained on (possibly poisoned) data: an
//! attention-autoencoder with gated side-feature fusion plus a regression
//! head, a biased matrix-factorization model, and a neural MF model for the
//! rating-only ablation.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, RatingMatrix};
use crate::error::{Error, Result};
use crate::nn::{leaky, linear, Adam, Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VictimKind {
    Rsattae,
    SvdMf,
    Neumf,
}

impl std::fmt::Display for VictimKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VictimKind::Rsattae => write!(f, "rsattae"),
            VictimKind::SvdMf => write!(f, "svd_mf"),
            VictimKind::Neumf => write!(f, "neumf"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Feedforward,
    BoostedTrees,
}

/// Narrow adapter for an external gradient-boosted tree engine: train on a
/// tabular matrix and predict for another.
pub trait TreeHeadEngine {
    fn train_predict(
        &self,
        train_x: &Array2<f64>,
        train_y: &[f64],
        eval_x: &Array2<f64>,
    ) -> Vec<f64>;
}

/// A trained victim: the full predicted score matrix over the training
/// users, plus each user's observed items for top-k filtering.
#[derive(Clone, Debug)]
pub struct VictimModel {
    pub kind: VictimKind,
    pub scores: Array2<f64>,
    observed: Vec<Vec<usize>>,
}

impl VictimModel {
    /// Assemble a model from a precomputed score matrix and the ratings it
    /// was trained on (whose nonzeros define each user's observed set).
    pub fn from_scores(kind: VictimKind, scores: Array2<f64>, ratings: &RatingMatrix) -> Self {
        assert_eq!(scores.nrows(), ratings.n_users);
        assert_eq!(scores.ncols(), ratings.n_items);
        Self {
            kind,
            scores,
            observed: observed_lists(ratings),
        }
    }

    pub fn n_users(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.scores.ncols()
    }

    pub fn predict(&self, user: usize, item: usize) -> f64 {
        self.scores[[user, item]]
    }
}

/// Top-`k` unobserved items by predicted score, ties broken by ascending
/// item index. Returns all unobserved items when fewer than `k` exist.
pub fn recommend_topk(model: &VictimModel, user: usize, k: usize) -> Result<Vec<usize>> {
    if user >= model.n_users() {
        return Err(Error::Validation(format!("user {user} out of range")));
    }
    let observed = &model.observed[user];
    let mut candidates: Vec<usize> = (0..model.n_items())
        .filter(|i| observed.binary_search(i).is_err())
        .collect();
    candidates.sort_by(|&a, &b| {
        model.scores[[user, b]]
            .partial_cmp(&model.scores[[user, a]])
            .unwrap()
            .then(a.cmp(&b))
    });
    if candidates.len() < k {
        log::warn!(
            "user {user} has only {} unobserved items (requested {k})",
            candidates.len()
        );
    }
    candidates.truncate(k);
    Ok(candidates)
}

fn observed_lists(ratings: &RatingMatrix) -> Vec<Vec<usize>> {
    (0..ratings.n_users)
        .map(|u| ratings.row(u).iter().map(|&(i, _)| i).collect())
        .collect()
}

/// Square-root of the mean squared error over observed entries.
pub fn masked_rmse(preds: &Array2<f64>, ratings: &RatingMatrix) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (u, i, r) in ratings.iter_entries() {
        let e = preds[[u, i]] - r as f64;
        sum += e * e;
        count += 1;
    }
    (sum / count.max(1) as f64).sqrt()
}

/// Dot-product attention over per-entity tokens followed by the learnable
/// gate `h_fused = alpha * m + (1 - alpha) * h`.
///
/// `q` is `(B, d)`; `keys` and `values` hold one `(B, d)` matrix per token.
pub fn attention_fuse(
    tape: &Tape,
    h: Var,
    q: Var,
    keys: &[Var],
    values: &[Var],
    alpha: Var,
) -> Var {
    assert_eq!(keys.len(), values.len());
    assert!(!keys.is_empty());
    let d = tape.shape(q).1 as f64;
    let scale = 1.0 / d.sqrt();
    // per-token scores (B,1), stacked as columns then row-softmaxed
    let mut score_cols = Vec::with_capacity(keys.len());
    for &k in keys {
        score_cols.push(tape.scale(tape.sum_rows(tape.mul(q, k)), scale));
    }
    let mut logits = score_cols[0];
    for &c in score_cols.iter().skip(1) {
        logits = tape.concat_cols(logits, c);
    }
    let lse = tape.logsumexp_rows(logits);
    let probs = tape.exp(tape.sub(logits, lse)); // (B, T)
    let mut m = tape.mul(values[0], tape.slice_cols(probs, 0, 1));
    for (t, &v) in values.iter().enumerate().skip(1) {
        m = tape.add(m, tape.mul(v, tape.slice_cols(probs, t, t + 1)));
    }
    let one_minus = tape.sub(tape.scalar_const(1.0), alpha);
    tape.add(tape.mul(m, alpha), tape.mul(h, one_minus))
}

#[derive(Clone, Debug)]
pub struct RsattaeConfig {
    pub enc_hidden: usize,
    pub latent: usize,
    pub head_hidden: usize,
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub head_epochs: usize,
    pub head_lr: f64,
    pub batch: usize,
}

impl Default for RsattaeConfig {
    fn default() -> Self {
        Self {
            enc_hidden: 128,
            latent: 64,
            head_hidden: 64,
            stage1_epochs: 10,
            stage1_lr: 1e-3,
            head_epochs: 6,
            head_lr: 1e-3,
            batch: 128,
        }
    }
}

/// One attention-AE module: reconstructs its input rows, fusing side
/// features into the latent through single-query/two-token attention.
struct AttentionAe {
    store: ParamStore,
    feat_dim: usize,
}

impl AttentionAe {
    fn new(input_dim: usize, feat_dim: usize, cfg: &RsattaeConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.latent;
        store.init_linear("enc1", input_dim, cfg.enc_hidden, &mut rng);
        store.init_linear("enc2", cfg.enc_hidden, d, &mut rng);
        let fd = feat_dim.max(1);
        store.init_linear_nobias("q", fd, d, &mut rng);
        store.init_linear_nobias("kx", fd, d, &mut rng);
        store.init_linear_nobias("kh", d, d, &mut rng);
        store.init_linear_nobias("vx", fd, d, &mut rng);
        store.init_linear_nobias("vh", d, d, &mut rng);
        store.insert("gate", Array2::zeros((1, 1))); // sigmoid -> 0.5
        store.init_linear("dec1", d, cfg.enc_hidden, &mut rng);
        store.init_linear("dec2", cfg.enc_hidden, input_dim, &mut rng);
        Self { store, feat_dim }
    }

    /// Returns `(fused latent, reconstruction)`.
    fn forward(&self, tape: &Tape, bound: &Bound, rows: Var, feats: Var) -> (Var, Var) {
        let scaled = tape.scale(rows, 1.0 / 5.0);
        let e = leaky(tape, linear(tape, bound, "enc1", scaled));
        let h = linear(tape, bound, "enc2", e);
        let fused = if self.feat_dim > 0 {
            let q = tape.matmul(feats, bound.var("q.w"));
            let kx = tape.matmul(feats, bound.var("kx.w"));
            let kh = tape.matmul(h, bound.var("kh.w"));
            let vx = tape.matmul(feats, bound.var("vx.w"));
            let vh = tape.matmul(h, bound.var("vh.w"));
            let alpha = tape.sigmoid(bound.var("gate"));
            attention_fuse(tape, h, q, &[kx, kh], &[vx, vh], alpha)
        } else {
            h
        };
        let d = leaky(tape, linear(tape, bound, "dec1", fused));
        let recon = tape.scale(tape.sigmoid(linear(tape, bound, "dec2", d)), 5.0);
        (fused, recon)
    }

    /// Minimize masked squared error over observed entries; returns the
    /// final M-RMSE on the training rows.
    fn train(
        &mut self,
        rows: &Array2<f64>,
        feats: &Array2<f64>,
        epochs: usize,
        lr: f64,
        batch: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<f64> {
        let n = rows.nrows();
        let mut opt = Adam::new(lr);
        let mut last = f64::NAN;
        for _epoch in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let mut sq_sum = 0.0;
            let mut count = 0.0;
            for chunk in order.chunks(batch) {
                let rb = gather(rows, chunk);
                let fb = gather(feats, chunk);
                let mask = rb.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let tape = Tape::new();
                let bound = self.store.bind(&tape);
                let rv = tape.constant(rb.clone());
                let fv = tape.constant(fb);
                let (_, recon) = self.forward(&tape, &bound, rv, fv);
                let diff = tape.mul(tape.sub(recon, tape.constant(rb)), tape.constant(mask.clone()));
                let sq = tape.sum_all(tape.mul(diff, diff));
                let m_count = mask.sum();
                let loss = tape.scale(sq, 1.0 / m_count.max(1.0));
                let lv = tape.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::Diverged("attention-AE stage-1 loss".into()));
                }
                sq_sum += tape.scalar(sq);
                count += m_count;
                let grads = bound.grads(&tape, loss);
                opt.step(&mut self.store, &grads);
            }
            last = (sq_sum / count.max(1.0)).sqrt();
        }
        Ok(last)
    }

    /// Fused latents for all rows (values only).
    fn latents(&self, rows: &Array2<f64>, feats: &Array2<f64>) -> Array2<f64> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let rv = tape.constant(rows.clone());
        let fv = tape.constant(feats.clone());
        let (fused, _) = self.forward(&tape, &bound, rv, fv);
        tape.value(fused)
    }
}

fn gather(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), a.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).assign(&a.row(i));
    }
    out
}

/// Two-stage training: symmetric attention-AE modules over rows and columns
/// of the rating matrix, then a supervised head on `[z_u; z_i; x_u; x_i]`.
pub fn train_rsattae(
    dataset: &Dataset,
    cfg: &RsattaeConfig,
    head_kind: HeadKind,
    engine: Option<&dyn TreeHeadEngine>,
    seed: u64,
) -> Result<VictimModel> {
    let rows = dataset.ratings.to_dense();
    let cols = rows.t().to_owned();
    let n = dataset.n_users();
    let m = dataset.n_items();
    let du = dataset.user_features.dim;
    let di = dataset.item_features.dim;
    let uf = if du > 0 {
        dataset.user_features.rows.clone()
    } else {
        Array2::zeros((n, 1))
    };
    let itf = if di > 0 {
        dataset.item_features.rows.clone()
    } else {
        Array2::zeros((m, 1))
    };

    let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "rsattae"));
    let mut user_module = AttentionAe::new(m, du, cfg, crate::derive_seed(seed, "rsattae-user"));
    let mut item_module = AttentionAe::new(n, di, cfg, crate::derive_seed(seed, "rsattae-item"));
    user_module.train(&rows, &uf, cfg.stage1_epochs, cfg.stage1_lr, cfg.batch, &mut rng)?;
    item_module.train(&cols, &itf, cfg.stage1_epochs, cfg.stage1_lr, cfg.batch, &mut rng)?;

    let z_u = user_module.latents(&rows, &uf);
    let z_i = item_module.latents(&cols, &itf);

    // Stage 2: head on the concatenated features over observed pairs.
    let entries: Vec<(usize, usize, u8)> = dataset.ratings.iter_entries().collect();
    let scores = match (head_kind, engine) {
        (HeadKind::BoostedTrees, Some(engine)) => {
            let dim = z_u.ncols() + z_i.ncols() + du + di;
            let mut train_x = Array2::zeros((entries.len(), dim));
            let mut train_y = Vec::with_capacity(entries.len());
            for (row, &(u, i, r)) in entries.iter().enumerate() {
                fill_pair_features(&mut train_x, row, &z_u, &z_i, dataset, u, i);
                train_y.push(r as f64);
            }
            let mut eval_x = Array2::zeros((n * m, dim));
            for u in 0..n {
                for i in 0..m {
                    fill_pair_features(&mut eval_x, u * m + i, &z_u, &z_i, dataset, u, i);
                }
            }
            let preds = engine.train_predict(&train_x, &train_y, &eval_x);
            Array2::from_shape_vec((n, m), preds)
                .map_err(|_| Error::Dim("tree engine prediction shape".into()))?
        }
        (head, engine) => {
            if head == HeadKind::BoostedTrees && engine.is_none() {
                log::warn!("boosted-tree engine unavailable; falling back to feedforward head");
            }
            train_feedforward_head(dataset, &z_u, &z_i, &entries, cfg, &mut rng)?
        }
    };

    Ok(VictimModel {
        kind: VictimKind::Rsattae,
        scores,
        observed: observed_lists(&dataset.ratings),
    })
}

fn fill_pair_features(
    out: &mut Array2<f64>,
    row: usize,
    z_u: &Array2<f64>,
    z_i: &Array2<f64>,
    dataset: &Dataset,
    u: usize,
    i: usize,
) {
    let mut c = 0;
    for v in z_u.row(u) {
        out[[row, c]] = *v;
        c += 1;
    }
    for v in z_i.row(i) {
        out[[row, c]] = *v;
        c += 1;
    }
    if dataset.user_features.dim > 0 {
        for v in dataset.user_features.rows.row(u) {
            out[[row, c]] = *v;
            c += 1;
        }
    }
    if dataset.item_features.dim > 0 {
        for v in dataset.item_features.rows.row(i) {
            out[[row, c]] = *v;
            c += 1;
        }
    }
}

fn train_feedforward_head(
    dataset: &Dataset,
    z_u: &Array2<f64>,
    z_i: &Array2<f64>,
    entries: &[(usize, usize, u8)],
    cfg: &RsattaeConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Array2<f64>> {
    let n = dataset.n_users();
    let m = dataset.n_items();
    let du = dataset.user_features.dim;
    let di = dataset.item_features.dim;
    let zdim = z_u.ncols();

    let mut store = ParamStore::new();
    store.init_linear("h1u", zdim + du, cfg.head_hidden, rng);
    store.init_linear_nobias("h1i", zdim + di, cfg.head_hidden, rng);
    store.init_linear("h2", cfg.head_hidden, 1, rng);
    let mut opt = Adam::new(cfg.head_lr);

    let au = if du > 0 {
        ndarray::concatenate(ndarray::Axis(1), &[z_u.view(), dataset.user_features.rows.view()])
            .unwrap()
    } else {
        z_u.clone()
    };
    let ai = if di > 0 {
        ndarray::concatenate(ndarray::Axis(1), &[z_i.view(), dataset.item_features.rows.view()])
            .unwrap()
    } else {
        z_i.clone()
    };

    let batch = 8192;
    for _epoch in 0..cfg.head_epochs {
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let pu: Vec<usize> = chunk.iter().map(|&k| entries[k].0).collect();
            let pi: Vec<usize> = chunk.iter().map(|&k| entries[k].1).collect();
            let y: Vec<f64> = chunk.iter().map(|&k| entries[k].2 as f64).collect();
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let a = tape.matmul(tape.constant(au.clone()), bound.var("h1u.w"));
            let b = tape.matmul(tape.constant(ai.clone()), bound.var("h1i.w"));
            let pre = tape.add(
                tape.add(tape.gather_rows(a, &pu), tape.gather_rows(b, &pi)),
                bound.var("h1u.b"),
            );
            let hmid = leaky(&tape, pre);
            let preds = linear(&tape, &bound, "h2", hmid);
            let targets = Array2::from_shape_vec((chunk.len(), 1), y).unwrap();
            let diff = tape.sub(preds, tape.constant(targets));
            let loss = tape.mean_all(tape.mul(diff, diff));
            if !tape.scalar(loss).is_finite() {
                return Err(Error::Diverged("head training loss".into()));
            }
            let grads = bound.grads(&tape, loss);
            opt.step(&mut store, &grads);
        }
    }

    // Full score grid, evaluated in user blocks to bound memory.
    let mut scores = Array2::zeros((n, m));
    let block = 128;
    let mut u0 = 0;
    while u0 < n {
        let u1 = (u0 + block).min(n);
        let users: Vec<usize> = (u0..u1).collect();
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let a = tape.matmul(tape.constant(gather(&au, &users)), bound.var("h1u.w"));
        let b = tape.matmul(tape.constant(ai.clone()), bound.var("h1i.w"));
        let (pu, pi) = {
            let mut pu = Vec::with_capacity(users.len() * m);
            let mut pi = Vec::with_capacity(users.len() * m);
            for k in 0..users.len() {
                for i in 0..m {
                    pu.push(k);
                    pi.push(i);
                }
            }
            (pu, pi)
        };
        let pre = tape.add(
            tape.add(tape.gather_rows(a, &pu), tape.gather_rows(b, &pi)),
            bound.var("h1u.b"),
        );
        let hmid = leaky(&tape, pre);
        let preds = linear(&tape, &bound, "h2", hmid);
        let grid = tape.value(tape.reshape(preds, users.len(), m));
        for (k, u) in (u0..u1).enumerate() {
            scores.row_mut(u).assign(&grid.row(k));
        }
        u0 = u1;
    }
    Ok(scores)
}

#[derive(Clone, Debug)]
pub struct MfConfig {
    pub rank: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            epochs: 20,
            lr: 5e-3,
            reg: 0.05,
        }
    }
}

/// Biased matrix factorization trained by SGD on observed squared error.
/// Predictions are clipped to `[1, 5]` at inference.
pub fn train_mf_victim(dataset: &Dataset, cfg: &MfConfig, seed: u64) -> Result<VictimModel> {
    let n = dataset.n_users();
    let m = dataset.n_items();
    let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "svd-mf"));
    let mut p = Array2::from_shape_fn((n, cfg.rank), |_| rng.random_range(-0.05..0.05));
    let mut q = Array2::from_shape_fn((m, cfg.rank), |_| rng.random_range(-0.05..0.05));
    let mut bu = Array1::<f64>::zeros(n);
    let mut bi = Array1::<f64>::zeros(m);
    let entries: Vec<(usize, usize, u8)> = dataset.ratings.iter_entries().collect();
    if entries.is_empty() {
        return Err(Error::Validation("cannot train on empty ratings".into()));
    }
    let mu = entries.iter().map(|e| e.2 as f64).sum::<f64>() / entries.len() as f64;

    let mut order: Vec<usize> = (0..entries.len()).collect();
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &k in &order {
            let (u, i, r) = entries[k];
            let pred = mu + bu[u] + bi[i] + p.row(u).dot(&q.row(i));
            let err = r as f64 - pred;
            if !err.is_finite() {
                return Err(Error::Diverged("matrix factorization".into()));
            }
            bu[u] += cfg.lr * (err - cfg.reg * bu[u]);
            bi[i] += cfg.lr * (err - cfg.reg * bi[i]);
            for f in 0..cfg.rank {
                let pu = p[[u, f]];
                let qi = q[[i, f]];
                p[[u, f]] += cfg.lr * (err * qi - cfg.reg * pu);
                q[[i, f]] += cfg.lr * (err * pu - cfg.reg * qi);
            }
        }
    }

    let mut scores = Array2::zeros((n, m));
    for u in 0..n {
        for i in 0..m {
            let v = mu + bu[u] + bi[i] + p.row(u).dot(&q.row(i));
            scores[[u, i]] = v.clamp(1.0, 5.0);
        }
    }
    Ok(VictimModel {
        kind: VictimKind::SvdMf,
        scores,
        observed: observed_lists(&dataset.ratings),
    })
}

#[derive(Clone, Debug)]
pub struct NeumfConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for NeumfConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            epochs: 10,
            lr: 1e-3,
            batch: 4096,
        }
    }
}

/// Embedding concatenation + feedforward scorer, trained on observed
/// ratings; predictions clipped to `[1, 5]` at inference.
pub fn train_neumf_victim(dataset: &Dataset, cfg: &NeumfConfig, seed: u64) -> Result<VictimModel> {
    let n = dataset.n_users();
    let m = dataset.n_items();
    let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "neumf"));
    let mut store = ParamStore::new();
    store.insert(
        "emb_u",
        Array2::from_shape_fn((n, cfg.embed_dim), |_| rng.random_range(-0.1..0.1)),
    );
    store.insert(
        "emb_i",
        Array2::from_shape_fn((m, cfg.embed_dim), |_| rng.random_range(-0.1..0.1)),
    );
    store.init_linear("n1", 2 * cfg.embed_dim, cfg.hidden, &mut rng);
    store.init_linear("n2", cfg.hidden, 1, &mut rng);
    let mut opt = Adam::new(cfg.lr);

    let entries: Vec<(usize, usize, u8)> = dataset.ratings.iter_entries().collect();
    if entries.is_empty() {
        return Err(Error::Validation("cannot train on empty ratings".into()));
    }
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let pu: Vec<usize> = chunk.iter().map(|&k| entries[k].0).collect();
            let pi: Vec<usize> = chunk.iter().map(|&k| entries[k].1).collect();
            let y: Vec<f64> = chunk.iter().map(|&k| entries[k].2 as f64).collect();
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let eu = tape.gather_rows(bound.var("emb_u"), &pu);
            let ei = tape.gather_rows(bound.var("emb_i"), &pi);
            let joint = tape.concat_cols(eu, ei);
            let h = leaky(&tape, linear(&tape, &bound, "n1", joint));
            let preds = linear(&tape, &bound, "n2", h);
            let targets = Array2::from_shape_vec((chunk.len(), 1), y).unwrap();
            let diff = tape.sub(preds, tape.constant(targets));
            let loss = tape.mean_all(tape.mul(diff, diff));
            if !tape.scalar(loss).is_finite() {
                return Err(Error::Diverged("neural MF training".into()));
            }
            let grads = bound.grads(&tape, loss);
            opt.step(&mut store, &grads);
        }
    }

    // Score everything in user blocks.
    let mut scores = Array2::zeros((n, m));
    let block = 256;
    let mut u0 = 0;
    while u0 < n {
        let u1 = (u0 + block).min(n);
        let tape = Tape::new();
        let bound = store.bind(&tape);
        let (pu, pi) = {
            let mut pu = Vec::new();
            let mut pi = Vec::new();
            for u in u0..u1 {
                for i in 0..m {
                    pu.push(u);
                    pi.push(i);
                }
            }
            (pu, pi)
        };
        let eu = tape.gather_rows(bound.var("emb_u"), &pu);
        let ei = tape.gather_rows(bound.var("emb_i"), &pi);
        let joint = tape.concat_cols(eu, ei);
        let h = leaky(&tape, linear(&tape, &bound, "n1", joint));
        let preds = linear(&tape, &bound, "n2", h);
        let grid = tape.value(tape.reshape(preds, u1 - u0, m));
        for (k, u) in (u0..u1).enumerate() {
            scores
                .row_mut(u)
                .assign(&grid.row(k).mapv(|v| v.clamp(1.0, 5.0)));
        }
        u0 = u1;
    }
    Ok(VictimModel {
        kind: VictimKind::Neumf,
        scores,
        observed: observed_lists(&dataset.ratings),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SideFeatureTable;
    use ndarray::array;

    fn toy_dataset(n_users: usize, n_items: usize, density: f64, seed: u64) -> Dataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ratings = RatingMatrix::new(n_users, n_items);
        for u in 0..n_users {
            for i in 0..n_items {
                if rng.random::<f64>() < density {
                    ratings.set(u, i, rng.random_range(1..=5)).unwrap();
                }
            }
        }
        let uf = Array2::from_shape_fn((n_users, 3), |_| rng.random::<f64>());
        let itf = Array2::from_shape_fn((n_items, 2), |_| rng.random::<f64>());
        Dataset {
            ratings,
            user_features: SideFeatureTable::new(uf),
            item_features: SideFeatureTable::new(itf),
            name: "toy".into(),
        }
    }

    #[test]
    fn attention_gate_closed_returns_h() {
        let tape = Tape::new();
        let h = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let q = tape.constant(array![[0.5, 0.5], [0.2, 0.8]]);
        let k = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let v = tape.constant(array![[9.0, 9.0], [8.0, 8.0]]);
        let alpha = tape.constant(array![[0.0]]);
        let out = attention_fuse(&tape, h, q, &[k], &[v], alpha);
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn attention_gate_open_returns_m() {
        let tape = Tape::new();
        let h = tape.constant(array![[1.0, 2.0]]);
        let q = tape.constant(array![[0.5, 0.5]]);
        let k = tape.constant(array![[1.0, 0.0]]);
        let v = tape.constant(array![[9.0, 7.0]]);
        let alpha = tape.constant(array![[1.0]]);
        let out = attention_fuse(&tape, h, q, &[k], &[v], alpha);
        // single key: softmax weight 1, m = v exactly
        assert_eq!(tape.value(out), array![[9.0, 7.0]]);
    }

    #[test]
    fn attention_two_tokens_weights_sum_to_one() {
        let tape = Tape::new();
        let h = tape.constant(array![[0.0, 0.0]]);
        let q = tape.constant(array![[1.0, 0.0]]);
        let k1 = tape.constant(array![[2.0, 0.0]]);
        let k2 = tape.constant(array![[0.0, 2.0]]);
        let v1 = tape.constant(array![[1.0, 0.0]]);
        let v2 = tape.constant(array![[0.0, 1.0]]);
        let alpha = tape.constant(array![[1.0]]);
        let out = tape.value(attention_fuse(&tape, h, q, &[k1, k2], &[v1, v2], alpha));
        // convex combination of v1, v2
        assert!((out[[0, 0]] + out[[0, 1]] - 1.0).abs() < 1e-12);
        // q aligns with k1, so v1 dominates
        assert!(out[[0, 0]] > out[[0, 1]]);
    }

    #[test]
    fn masked_rmse_examples() {
        let mut ratings = RatingMatrix::new(1, 2);
        ratings.set(0, 0, 1).unwrap();
        ratings.set(0, 1, 5).unwrap();
        // perfect reconstruction -> 0
        let preds = array![[1.0, 5.0]];
        assert_eq!(masked_rmse(&preds, &ratings), 0.0);
        // constant 3 on ratings {1, 5} -> sqrt((4+4)/2) = 2
        let preds = array![[3.0, 3.0]];
        assert_eq!(masked_rmse(&preds, &ratings), 2.0);
    }

    #[test]
    fn topk_rules() {
        let mut ratings = RatingMatrix::new(1, 6);
        ratings.set(0, 0, 4).unwrap();
        ratings.set(0, 1, 3).unwrap();
        ratings.set(0, 2, 2).unwrap();
        let model = VictimModel::from_scores(
            VictimKind::SvdMf,
            array![[9.0, 9.0, 9.0, 2.0, 2.0, 2.0]],
            &ratings,
        );
        // user rated all but 3 items; k=5 returns exactly those 3
        let top = recommend_topk(&model, 0, 5).unwrap();
        assert_eq!(top, vec![3, 4, 5]);
        // never returns observed items
        for i in [0, 1, 2] {
            assert!(!top.contains(&i));
        }
        // tie on all scores -> ascending index order
        let empty = RatingMatrix::new(1, 6);
        let model = VictimModel::from_scores(
            VictimKind::SvdMf,
            array![[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]],
            &empty,
        );
        assert_eq!(recommend_topk(&model, 0, 3).unwrap(), vec![0, 1, 2]);
        // forced maximal score appears first
        let model = VictimModel::from_scores(
            VictimKind::SvdMf,
            array![[1.0, 1.0, 5.0, 1.0, 1.0, 1.0]],
            &empty,
        );
        assert_eq!(recommend_topk(&model, 0, 1).unwrap(), vec![2]);
    }

    #[test]
    fn mf_victim_fits_rank_one_structure() {
        // rank-1 synthetic: rating = clamp(u_i * v_j scaled)
        let mut ratings = RatingMatrix::new(6, 6);
        for u in 0..6 {
            for i in 0..6 {
                let v = 1 + ((u + 1) * (i + 1)) % 5;
                ratings.set(u, i, v as u8).unwrap();
            }
        }
        let ds = Dataset {
            ratings,
            user_features: SideFeatureTable::empty(6),
            item_features: SideFeatureTable::empty(6),
            name: "toy".into(),
        };
        let cfg = MfConfig {
            rank: 6,
            epochs: 300,
            lr: 2e-2,
            reg: 1e-4,
        };
        let model = train_mf_victim(&ds, &cfg, 3).unwrap();
        let rmse = masked_rmse(&model.scores, &ds.ratings);
        assert!(rmse < 1e-2, "rmse {rmse}");
        // bounded predictions
        for v in model.scores.iter() {
            assert!((1.0..=5.0).contains(v));
        }
        // determinism
        let model2 = train_mf_victim(&ds, &cfg, 3).unwrap();
        assert_eq!(model.scores, model2.scores);
    }

    #[test]
    fn neumf_trains_and_clips() {
        let ds = toy_dataset(20, 12, 0.5, 7);
        let cfg = NeumfConfig {
            embed_dim: 8,
            hidden: 16,
            epochs: 5,
            lr: 5e-3,
            batch: 64,
        };
        let model = train_neumf_victim(&ds, &cfg, 11).unwrap();
        for v in model.scores.iter() {
            assert!((1.0..=5.0).contains(v));
        }
        let model2 = train_neumf_victim(&ds, &cfg, 11).unwrap();
        assert_eq!(model.scores, model2.scores);
    }

    #[test]
    fn rsattae_trains_and_gate_zero_matches_plain_ae() {
        let ds = toy_dataset(15, 10, 0.5, 9);
        let cfg = RsattaeConfig {
            enc_hidden: 16,
            latent: 8,
            head_hidden: 8,
            stage1_epochs: 3,
            stage1_lr: 1e-3,
            head_epochs: 2,
            head_lr: 1e-3,
            batch: 8,
        };
        let model = train_rsattae(&ds, &cfg, HeadKind::Feedforward, None, 5).unwrap();
        assert_eq!(model.scores.dim(), (15, 10));
        for v in model.scores.iter() {
            assert!(v.is_finite());
        }

        // gate forced shut: attention path inert, reconstruction equals the
        // plain AE path with the same weights
        let mut module = AttentionAe::new(10, 3, &cfg, 77);
        module.store.insert("gate", Array2::from_elem((1, 1), -1e9));
        let rows = ds.ratings.to_dense();
        let tape = Tape::new();
        let bound = module.store.bind(&tape);
        let rv = tape.constant(rows.clone());
        let fv = tape.constant(ds.user_features.rows.clone());
        let (_, with_attention) = module.forward(&tape, &bound, rv, fv);

        // plain AE: same encoder/decoder weights, no fusion
        let tape2 = Tape::new();
        let bound2 = module.store.bind(&tape2);
        let rv2 = tape2.constant(rows.clone());
        let scaled = tape2.scale(rv2, 1.0 / 5.0);
        let e = leaky(&tape2, linear(&tape2, &bound2, "enc1", scaled));
        let h = linear(&tape2, &bound2, "enc2", e);
        let d = leaky(&tape2, linear(&tape2, &bound2, "dec1", h));
        let plain = tape2.scale(tape2.sigmoid(linear(&tape2, &bound2, "dec2", d)), 5.0);

        let a = tape.value(with_attention);
        let b = tape2.value(plain);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rsattae_boosted_head_adapter_and_fallback() {
        let ds = toy_dataset(8, 6, 0.6, 13);
        let cfg = RsattaeConfig {
            enc_hidden: 8,
            latent: 4,
            head_hidden: 4,
            stage1_epochs: 1,
            stage1_lr: 1e-3,
            head_epochs: 1,
            head_lr: 1e-3,
            batch: 8,
        };
        // mock engine: predicts the training mean everywhere
        struct MeanEngine;
        impl TreeHeadEngine for MeanEngine {
            fn train_predict(
                &self,
                _train_x: &Array2<f64>,
                train_y: &[f64],
                eval_x: &Array2<f64>,
            ) -> Vec<f64> {
                let mean = train_y.iter().sum::<f64>() / train_y.len() as f64;
                vec![mean; eval_x.nrows()]
            }
        }
        let model =
            train_rsattae(&ds, &cfg, HeadKind::BoostedTrees, Some(&MeanEngine), 1).unwrap();
        let mean = ds
            .ratings
            .iter_entries()
            .map(|e| e.2 as f64)
            .sum::<f64>()
            / ds.ratings.observed() as f64;
        assert!((model.scores[[0, 0]] - mean).abs() < 1e-12);
        // fallback without an engine still trains
        let model = train_rsattae(&ds, &cfg, HeadKind::BoostedTrees, None, 1).unwrap();
        assert!(model.scores.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_batch_retraining_reproduces_clean_topk() {
        let ds = toy_dataset(12, 9, 0.5, 17);
        let empty = crate::data::ProfileBatch {
            ratings: RatingMatrix::new(0, 9),
            user_features: SideFeatureTable::new(Array2::zeros((0, 3))),
            provenance: vec![],
            target: 0,
            cap: 3,
        };
        let aug = crate::data::inject(&ds, &empty).unwrap();
        let cfg = MfConfig {
            rank: 4,
            epochs: 10,
            lr: 1e-2,
            reg: 0.05,
        };
        let clean = train_mf_victim(&ds, &cfg, 23).unwrap();
        let poisoned = train_mf_victim(&aug, &cfg, 23).unwrap();
        for u in 0..12 {
            assert_eq!(
                recommend_topk(&clean, u, 5).unwrap(),
                recommend_topk(&poisoned, u, 5).unwrap()
            );
        }
    }
}
