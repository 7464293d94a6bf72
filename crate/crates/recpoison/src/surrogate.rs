//! Differentiable surrogate recommender and the attack objective: offline
//! fitting, the softmax push loss, unrolled inner updates that carry
//! gradients from predicted scores back into the generator, and a WRMF
//! surrogate (alternating least squares) for the rating-only ablation.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, RatingMatrix};
use crate::error::{Error, Result};
use crate::nn::{leaky, linear, Adam, Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurrogateMode {
    /// Refit the offline surrogate on each generated batch.
    FullRetrain,
    /// Fit once after pretraining and keep it fixed across batches.
    Persistent,
}

#[derive(Clone, Debug)]
pub struct AttackObjectiveConfig {
    pub target: usize,
    pub unroll_steps: usize,
    pub inner_lr: f64,
    pub mode: SurrogateMode,
    /// Real observed entries sampled into the inner fit loss per step.
    pub inner_pairs: usize,
    /// Eligible users scored by the push loss per step.
    pub push_batch: usize,
}

impl AttackObjectiveConfig {
    pub fn new(target: usize, mode: SurrogateMode) -> Self {
        Self {
            target,
            unroll_steps: 1,
            inner_lr: 1e-2,
            mode,
            inner_pairs: 8192,
            push_batch: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SurrogateConfig {
    pub n_items: usize,
    /// Item-encoder input width: real + fake user count at fit time.
    pub n_users_aug: usize,
    pub user_feat_dim: usize,
    pub item_feat_dim: usize,
    pub enc_hidden: usize,
    pub z_dim: usize,
    pub score_hidden: usize,
}

impl SurrogateConfig {
    pub fn defaults(n_items: usize, n_users_aug: usize, du: usize, di: usize) -> Self {
        Self {
            n_items,
            n_users_aug,
            user_feat_dim: du,
            item_feat_dim: di,
            enc_hidden: 128,
            z_dim: 64,
            score_hidden: 64,
        }
    }
}

/// User/item encoders plus a fully differentiable feedforward scorer on
/// `[z_u; z_i; x_u; x_i]` (the first scorer layer is stored as per-source
/// blocks, which is the same linear map).
pub struct Surrogate {
    pub config: SurrogateConfig,
    pub store: ParamStore,
}

impl Surrogate {
    pub fn new(config: SurrogateConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "surrogate-init"));
        let mut store = ParamStore::new();
        store.init_linear("ue1", config.n_items, config.enc_hidden, &mut rng);
        store.init_linear("ue2", config.enc_hidden, config.z_dim, &mut rng);
        store.init_linear("ie1", config.n_users_aug, config.enc_hidden, &mut rng);
        store.init_linear("ie2", config.enc_hidden, config.z_dim, &mut rng);
        store.init_linear("s1u", config.z_dim + config.user_feat_dim, config.score_hidden, &mut rng);
        store.init_linear_nobias("s1i", config.z_dim + config.item_feat_dim, config.score_hidden, &mut rng);
        store.init_linear("s2", config.score_hidden, 1, &mut rng);
        Self { config, store }
    }

    pub fn encode_users(&self, tape: &Tape, bound: &Bound, rows: Var) -> Var {
        let scaled = tape.scale(rows, 1.0 / 5.0);
        let h = leaky(tape, linear(tape, bound, "ue1", scaled));
        linear(tape, bound, "ue2", h)
    }

    pub fn encode_items(&self, tape: &Tape, bound: &Bound, cols: Var) -> Var {
        let scaled = tape.scale(cols, 1.0 / 5.0);
        let h = leaky(tape, linear(tape, bound, "ie1", scaled));
        linear(tape, bound, "ie2", h)
    }

    /// Score `(pair_u[k], pair_i[k])` pairs given per-entity embeddings and
    /// side features; returns `(P, 1)` predictions.
    #[allow(clippy::too_many_arguments)]
    pub fn score_pairs(
        &self,
        tape: &Tape,
        bound: &Bound,
        z_u: Var,
        x_u: Var,
        z_i: Var,
        x_i: Var,
        pair_u: &[usize],
        pair_i: &[usize],
    ) -> Var {
        assert_eq!(pair_u.len(), pair_i.len());
        let au = tape.concat_cols(z_u, x_u);
        let a = tape.matmul(au, bound.var("s1u.w"));
        let bi = tape.concat_cols(z_i, x_i);
        let b = tape.matmul(bi, bound.var("s1i.w"));
        let pre = tape.add(
            tape.add(tape.gather_rows(a, pair_u), tape.gather_rows(b, pair_i)),
            bound.var("s1u.b"),
        );
        let h = leaky(tape, pre);
        linear(tape, bound, "s2", h)
    }

    /// Dense predicted scores for the given users against all items
    /// (values only; used by evaluation paths and tests).
    pub fn score_users_all_items(
        &self,
        aug_rows: &Array2<f64>,
        user_feats: &Array2<f64>,
        item_feats: &Array2<f64>,
        users: &[usize],
    ) -> Array2<f64> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let rows = tape.constant(gather_rows_arr(aug_rows, users));
        let z_u = self.encode_users(&tape, &bound, rows);
        let cols = tape.constant(aug_rows.t().to_owned());
        let z_i = self.encode_items(&tape, &bound, cols);
        let xu = tape.constant(gather_rows_arr(user_feats, users));
        let xi = tape.constant(item_feats.clone());
        let m = self.config.n_items;
        let (pu, pi) = pair_grid(users.len(), m);
        let flat = self.score_pairs(&tape, &bound, z_u, xu, z_i, xi, &pu, &pi);
        let grid = tape.reshape(flat, users.len(), m);
        tape.value(grid)
    }
}

fn pair_grid(n_users: usize, n_items: usize) -> (Vec<usize>, Vec<usize>) {
    let mut pu = Vec::with_capacity(n_users * n_items);
    let mut pi = Vec::with_capacity(n_users * n_items);
    for u in 0..n_users {
        for i in 0..n_items {
            pu.push(u);
            pi.push(i);
        }
    }
    (pu, pi)
}

fn gather_rows_arr(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), a.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).assign(&a.row(i));
    }
    out
}

/// Masked squared-error fit of the surrogate on an augmented dataset.
/// Subsamples `pairs_per_epoch` observed entries per epoch (all of them if
/// fewer). Returns the per-epoch mean losses.
pub fn fit_surrogate_offline(
    surrogate: &mut Surrogate,
    augmented: &Dataset,
    epochs: usize,
    lr: f64,
    pairs_per_epoch: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "surrogate-fit"));
    let mut opt = Adam::new(lr);
    let entries: Vec<(usize, usize, u8)> = augmented.ratings.iter_entries().collect();
    if entries.is_empty() {
        return Err(Error::Validation("no observed entries to fit".into()));
    }
    let aug_rows = augmented.ratings.to_dense();
    let aug_cols = aug_rows.t().to_owned();
    let du = surrogate.config.user_feat_dim;
    let di = surrogate.config.item_feat_dim;
    let user_feats = if du > 0 {
        augmented.user_features.rows.clone()
    } else {
        Array2::zeros((augmented.n_users(), 0))
    };
    let item_feats = if di > 0 {
        augmented.item_features.rows.clone()
    } else {
        Array2::zeros((augmented.n_items(), 0))
    };

    let mut trace = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..entries.len()).collect();
    for _epoch in 0..epochs {
        order.shuffle(&mut rng);
        let take = pairs_per_epoch.min(entries.len());
        let batch: Vec<(usize, usize, u8)> =
            order[..take].iter().map(|&k| entries[k]).collect();

        let tape = Tape::new();
        let bound = surrogate.store.bind(&tape);
        let rows = tape.constant(aug_rows.clone());
        let z_u = surrogate.encode_users(&tape, &bound, rows);
        let cols = tape.constant(aug_cols.clone());
        let z_i = surrogate.encode_items(&tape, &bound, cols);
        let xu = tape.constant(user_feats.clone());
        let xi = tape.constant(item_feats.clone());
        let pu: Vec<usize> = batch.iter().map(|e| e.0).collect();
        let pi: Vec<usize> = batch.iter().map(|e| e.1).collect();
        let preds = surrogate.score_pairs(&tape, &bound, z_u, xu, z_i, xi, &pu, &pi);
        let targets = Array2::from_shape_vec(
            (batch.len(), 1),
            batch.iter().map(|e| e.2 as f64).collect(),
        )
        .unwrap();
        let diff = tape.sub(preds, tape.constant(targets));
        let loss = tape.mean_all(tape.mul(diff, diff));
        let lv = tape.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::Diverged(format!("surrogate fit loss {lv}")));
        }
        trace.push(lv);
        let grads = bound.grads(&tape, loss);
        opt.step(&mut surrogate.store, &grads);
    }
    Ok(trace)
}

/// Push objective on a full predicted-score matrix over eligible users:
/// `-sum_u log( exp(s[u,target]) / sum_j exp(s[u,j]) )`.
pub fn push_loss(tape: &Tape, scores: Var, target: usize) -> Result<Var> {
    let (rows, cols) = tape.shape(scores);
    if rows == 0 {
        return Err(Error::EmptyEligible(target));
    }
    assert!(target < cols, "target column out of range");
    let lse = tape.logsumexp_rows(scores);
    let t_col = tape.slice_cols(scores, target, target + 1);
    Ok(tape.sum_all(tape.sub(lse, t_col)))
}

/// Convenience value-level push loss for a plain score matrix.
pub fn push_loss_value(scores: &Array2<f64>, target: usize) -> Result<f64> {
    let tape = Tape::new();
    let s = tape.constant(scores.clone());
    let l = push_loss(&tape, s, target)?;
    Ok(tape.scalar(l))
}

/// Inner surrogate update + push loss, all on one tape.
///
/// Copies the surrogate parameters into an inner model, takes
/// `cfg.unroll_steps` gradient-descent steps on the masked squared error
/// over the concatenated real+fake data (fake ratings stay in the graph),
/// then scores the push-batch users against all items with the updated
/// weights and returns the push loss (summed over the batch).
#[allow(clippy::too_many_arguments)]
pub fn unrolled_push_value(
    tape: &Tape,
    surrogate: &Surrogate,
    bound: &Bound,
    fake_var: Var,
    real_rows: &Array2<f64>,
    user_feats_aug: &Array2<f64>,
    item_feats: &Array2<f64>,
    inner_real_pairs: &[(usize, usize, u8)],
    push_users: &[usize],
    cfg: &AttackObjectiveConfig,
) -> Result<Var> {
    let n_real = real_rows.nrows();
    let (n_fake, m) = tape.shape(fake_var);
    assert_eq!(m, surrogate.config.n_items);
    assert_eq!(user_feats_aug.nrows(), n_real + n_fake);
    if push_users.is_empty() {
        return Err(Error::EmptyEligible(cfg.target));
    }

    let du = surrogate.config.user_feat_dim;
    let di = surrogate.config.item_feat_dim;
    let xu_all = if du > 0 {
        user_feats_aug.clone()
    } else {
        Array2::zeros((n_real + n_fake, 0))
    };
    let xi_all = if di > 0 {
        item_feats.clone()
    } else {
        Array2::zeros((m, 0))
    };

    // Augmented rating matrix with the fake rows in the graph.
    let aug = tape.concat_rows(tape.constant(real_rows.clone()), fake_var);

    // Inner fit pairs: sampled real entries plus every fake entry.
    let mut pair_u: Vec<usize> = Vec::new();
    let mut pair_i: Vec<usize> = Vec::new();
    let mut real_targets: Vec<(usize, f64)> = Vec::new(); // (pair index, value)
    let mut fake_targets: Vec<(usize, usize, usize)> = Vec::new(); // (pair index, fake row, item)
    let fake_vals = tape.value(fake_var);
    for &(u, i, r) in inner_real_pairs {
        real_targets.push((pair_u.len(), r as f64));
        pair_u.push(u);
        pair_i.push(i);
    }
    for f in 0..n_fake {
        for i in 0..m {
            if fake_vals[[f, i]] > 0.0 {
                fake_targets.push((pair_u.len(), f, i));
                pair_u.push(n_real + f);
                pair_i.push(i);
            }
        }
    }
    let n_pairs = pair_u.len();
    if n_pairs == 0 {
        return Err(Error::Validation("no entries in inner fit loss".into()));
    }

    // Unique users touched by the inner loss (map into gathered rows).
    let mut uniq_users: Vec<usize> = pair_u.clone();
    uniq_users.sort_unstable();
    uniq_users.dedup();
    let user_slot: std::collections::BTreeMap<usize, usize> = uniq_users
        .iter()
        .enumerate()
        .map(|(k, &u)| (u, k))
        .collect();
    let pair_u_slots: Vec<usize> = pair_u.iter().map(|u| user_slot[u]).collect();

    // Targets: constant for real entries, graph-linked for fake entries.
    // Assemble target column = const + scatter of fake slices.
    let mut const_targets = Array2::zeros((n_pairs, 1));
    for &(k, v) in &real_targets {
        const_targets[[k, 0]] = v;
    }
    let fake_rows_gathered: Vec<usize> = fake_targets.iter().map(|&(_, f, _)| f).collect();
    let target_var = if fake_targets.is_empty() {
        tape.constant(const_targets)
    } else {
        // pick each fake value r̃[f,i]: gather the rows, then mask-select
        // the single item column via an elementwise dot with a one-hot row
        let picked = tape.gather_rows(fake_var, &fake_rows_gathered);
        let mut onehot = Array2::zeros((fake_targets.len(), m));
        for (row, &(_, _, i)) in fake_targets.iter().enumerate() {
            onehot[[row, i]] = 1.0;
        }
        let vals = tape.sum_rows(tape.mul(picked, tape.constant(onehot))); // (F*, 1)
        let scatter_idx: Vec<usize> = fake_targets.iter().map(|&(k, _, _)| k).collect();
        let scattered = tape.scatter_add_rows(vals, &scatter_idx, n_pairs);
        tape.add(scattered, tape.constant(const_targets))
    };

    // Copy surrogate parameters into the inner model and unroll.
    let param_names: Vec<String> = bound.names().cloned().collect();
    let mut inner: std::collections::BTreeMap<String, Var> = param_names
        .iter()
        .map(|n| (n.clone(), bound.var(n)))
        .collect();

    for _step in 0..cfg.unroll_steps {
        let fit = {
            let b = InnerBound { vars: &inner };
            let rows_sel = tape.gather_rows(aug, &uniq_users);
            let z_u = encode_users_with(surrogate, tape, &b, rows_sel);
            let cols = tape.transpose(aug);
            let z_i = encode_items_with(surrogate, tape, &b, cols);
            let xu = tape.constant(gather_rows_arr(&xu_all, &uniq_users));
            let xi = tape.constant(xi_all.clone());
            let preds =
                score_pairs_with(surrogate, tape, &b, z_u, xu, z_i, xi, &pair_u_slots, &pair_i);
            let diff = tape.sub(preds, target_var);
            tape.mean_all(tape.mul(diff, diff))
        };
        let vars: Vec<Var> = param_names.iter().map(|n| inner[n]).collect();
        let grads = tape.grad(fit, &vars);
        for (name, g) in param_names.iter().zip(grads) {
            let step = tape.scale(g, cfg.inner_lr);
            inner.insert(name.clone(), tape.sub(inner[name], step));
        }
    }

    // Score the eligible push batch against all items with updated weights.
    let b = InnerBound { vars: &inner };
    let rows_push = tape.gather_rows(aug, push_users);
    let z_u = encode_users_with(surrogate, tape, &b, rows_push);
    let cols = tape.transpose(aug);
    let z_i = encode_items_with(surrogate, tape, &b, cols);
    let xu = tape.constant(gather_rows_arr(&xu_all, push_users));
    let xi = tape.constant(xi_all);
    let (pu, pi) = pair_grid(push_users.len(), m);
    let flat = score_pairs_with(surrogate, tape, &b, z_u, xu, z_i, xi, &pu, &pi);
    let grid = tape.reshape(flat, push_users.len(), m);
    push_loss(tape, grid, cfg.target)
}

/// Parameter lookup that resolves to inner (unrolled) variables.
struct InnerBound<'a> {
    vars: &'a std::collections::BTreeMap<String, Var>,
}

impl InnerBound<'_> {
    fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound inner parameter {name}"))
    }
}

fn lin_with(tape: &Tape, b: &InnerBound, name: &str, x: Var, bias: bool) -> Var {
    let y = tape.matmul(x, b.var(&format!("{name}.w")));
    if bias {
        tape.add(y, b.var(&format!("{name}.b")))
    } else {
        y
    }
}

fn encode_users_with(s: &Surrogate, tape: &Tape, b: &InnerBound, rows: Var) -> Var {
    let _ = s;
    let scaled = tape.scale(rows, 1.0 / 5.0);
    let h = leaky(tape, lin_with(tape, b, "ue1", scaled, true));
    lin_with(tape, b, "ue2", h, true)
}

fn encode_items_with(s: &Surrogate, tape: &Tape, b: &InnerBound, cols: Var) -> Var {
    let _ = s;
    let scaled = tape.scale(cols, 1.0 / 5.0);
    let h = leaky(tape, lin_with(tape, b, "ie1", scaled, true));
    lin_with(tape, b, "ie2", h, true)
}

#[allow(clippy::too_many_arguments)]
fn score_pairs_with(
    s: &Surrogate,
    tape: &Tape,
    b: &InnerBound,
    z_u: Var,
    x_u: Var,
    z_i: Var,
    x_i: Var,
    pair_u: &[usize],
    pair_i: &[usize],
) -> Var {
    let _ = s;
    let au = tape.concat_cols(z_u, x_u);
    let a = tape.matmul(au, b.var("s1u.w"));
    let bi = tape.concat_cols(z_i, x_i);
    let bb = tape.matmul(bi, b.var("s1i.w"));
    let pre = tape.add(
        tape.add(tape.gather_rows(a, pair_u), tape.gather_rows(bb, pair_i)),
        b.var("s1u.b"),
    );
    let h = leaky(tape, pre);
    lin_with(tape, b, "s2", h, true)
}

pub struct AttackStepOutcome {
    pub push_loss: f64,
    pub generator_grad_norm: f64,
}

/// One unrolled attack step: decode fakes from the generator, run the inner
/// surrogate update, backpropagate the push loss through discretization into
/// the generator parameters, and apply one optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn unrolled_attack_step(
    gen: &mut crate::generator::Generator,
    surrogate: &Surrogate,
    dataset: &Dataset,
    templates: &crate::data::TemplateSet,
    pool: &crate::data::SideFeatureTable,
    cfg: &AttackObjectiveConfig,
    opt: &mut Adam,
    seed: u64,
) -> Result<AttackStepOutcome> {
    let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "attack-step"));
    let n_fake = templates.len();

    // Draw conditioning features and latent noise for this step's batch.
    let du = gen.config.feat_dim.max(1);
    let mut feat_rows = Array2::zeros((n_fake, du));
    for k in 0..n_fake {
        let pick = rng.random_range(0..pool.len().max(1));
        if pool.dim > 0 {
            feat_rows.row_mut(k).assign(&pool.rows.row(pick));
        }
    }
    let noise = crate::nn::randn((n_fake, gen.config.latent_dim), &mut rng);

    let eligible = dataset.eligible_users(cfg.target);
    if eligible.is_empty() {
        return Err(Error::EmptyEligible(cfg.target));
    }
    let mut push_users = eligible;
    push_users.shuffle(&mut rng);
    push_users.truncate(cfg.push_batch.max(1));

    let entries: Vec<(usize, usize, u8)> = dataset.ratings.iter_entries().collect();
    let mut idx: Vec<usize> = (0..entries.len()).collect();
    idx.shuffle(&mut rng);
    let inner_real: Vec<(usize, usize, u8)> = idx
        .into_iter()
        .take(cfg.inner_pairs.min(entries.len()))
        .map(|k| entries[k])
        .collect();

    // Augmented user features: real rows plus the fake rows' drawn features.
    let user_feats_aug = if gen.config.feat_dim > 0 {
        ndarray::concatenate(
            Axis(0),
            &[dataset.user_features.rows.view(), feat_rows.view()],
        )
        .unwrap()
    } else {
        Array2::zeros((dataset.n_users() + n_fake, 0))
    };

    let tape = Tape::new();
    let gen_bound = gen.store.bind(&tape);
    let sur_bound = surrogate.store.bind(&tape);
    let fake = gen.fake_profiles_var(
        &tape,
        &gen_bound,
        &templates.to_dense(),
        &feat_rows,
        Some(&noise),
        cfg.target,
    );
    let real_rows = dataset.ratings.to_dense();
    let loss = unrolled_push_value(
        &tape,
        surrogate,
        &sur_bound,
        fake,
        &real_rows,
        &user_feats_aug,
        &dataset.item_features.rows,
        &inner_real,
        &push_users,
        cfg,
    )?;
    let scaled = tape.scale(loss, 1.0 / push_users.len() as f64);
    let lv = tape.scalar(scaled) * push_users.len() as f64;
    if !lv.is_finite() {
        return Err(Error::Diverged(format!("push loss {lv}")));
    }

    let grads = gen_bound.grads(&tape, scaled);
    let norm: f64 = grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::DetachedGraph(
            "zero generator gradient with eligible users present".into(),
        ));
    }
    opt.step(&mut gen.store, &grads);
    Ok(AttackStepOutcome {
        push_loss: lv,
        generator_grad_norm: norm,
    })
}

// ---------------------------------------------------------------------------
// WRMF surrogate (rating-only ablation)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct WrmfFactors {
    pub user: Array2<f64>,
    pub item: Array2<f64>,
    pub rank: usize,
    pub weight: f64,
    pub reg: f64,
}

impl WrmfFactors {
    pub fn predict(&self, u: usize, i: usize) -> f64 {
        self.user.row(u).dot(&self.item.row(i))
    }

    /// Full weighted objective (dense; intended for small matrices/tests).
    pub fn objective(&self, ratings: &RatingMatrix) -> f64 {
        let n = ratings.n_users;
        let m = ratings.n_items;
        let mut total = 0.0;
        for u in 0..n {
            for i in 0..m {
                let r = ratings.get(u, i) as f64;
                let conf = 1.0 + self.weight * r;
                let pref = if r > 0.0 { 1.0 } else { 0.0 };
                let e = pref - self.predict(u, i);
                total += conf * e * e;
            }
        }
        total
            + self.reg
                * (self.user.iter().map(|x| x * x).sum::<f64>()
                    + self.item.iter().map(|x| x * x).sum::<f64>())
    }
}

/// Alternating least squares on implicit-confidence weighted squared error
/// (confidence `1 + weight * r`, preference `1{r > 0}`).
pub fn fit_wrmf(
    ratings: &RatingMatrix,
    rank: usize,
    weight: f64,
    reg: f64,
    sweeps: usize,
    seed: u64,
) -> Result<WrmfFactors> {
    let n = ratings.n_users;
    let m = ratings.n_items;
    if rank > n.min(m) {
        return Err(Error::Validation(format!(
            "rank {rank} exceeds min dimension {}",
            n.min(m)
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "wrmf-init"));
    let mut user = Array2::from_shape_fn((n, rank), |_| rng.random_range(-0.1..0.1));
    let mut item = Array2::from_shape_fn((m, rank), |_| rng.random_range(-0.1..0.1));

    // Per-entity observed lists.
    let mut by_user: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut by_item: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    for (u, i, r) in ratings.iter_entries() {
        by_user[u].push((i, r as f64));
        by_item[i].push((u, r as f64));
    }

    let solve_side = |fixed: &Array2<f64>, obs: &Vec<Vec<(usize, f64)>>, out: &mut Array2<f64>| {
        let gram = fixed.t().dot(fixed);
        for (e, list) in obs.iter().enumerate() {
            let mut a = gram.clone();
            for r in 0..rank {
                a[[r, r]] += reg;
            }
            let mut rhs = Array1::<f64>::zeros(rank);
            for &(j, rating) in list {
                let c = 1.0 + weight * rating;
                let fj = fixed.row(j);
                for p in 0..rank {
                    // (c - 1) correction to the gram term, c * preference rhs
                    rhs[p] += c * fj[p];
                    for q in 0..rank {
                        a[[p, q]] += (c - 1.0) * fj[p] * fj[q];
                    }
                }
            }
            let rhs2 = rhs.insert_axis(Axis(1));
            let sol = match crate::linalg::solve_lu(&a, &rhs2) {
                Some(s) => s,
                None => {
                    log::warn!("singular normal equations; adding ridge jitter");
                    for r in 0..rank {
                        a[[r, r]] += 1e-6;
                    }
                    crate::linalg::solve_lu(&a, &rhs2).expect("jittered solve")
                }
            };
            out.row_mut(e).assign(&sol.column(0));
        }
    };

    for _sweep in 0..sweeps {
        let mut new_user = user.clone();
        solve_side(&item, &by_user, &mut new_user);
        user = new_user;
        let mut new_item = item.clone();
        solve_side(&user, &by_item, &mut new_item);
        item = new_item;
    }

    Ok(WrmfFactors {
        user,
        item,
        rank,
        weight,
        reg,
    })
}

/// Differentiable last ALS step for WRMF: recompute the fake users' factors
/// and then every item's factors from the fake rating variable, score the
/// push batch, and return the push loss. Real-user factors stay fixed, which
/// is the last-step unrolling approximation.
#[allow(clippy::too_many_arguments)]
pub fn wrmf_unrolled_push(
    tape: &Tape,
    factors: &WrmfFactors,
    fake_var: Var,
    ratings_real: &RatingMatrix,
    fake_pattern: &[Vec<usize>],
    push_users: &[usize],
    target: usize,
) -> Result<Var> {
    let rank = factors.rank;
    let n_real = ratings_real.n_users;
    let m = ratings_real.n_items;
    let (n_fake, mf) = tape.shape(fake_var);
    assert_eq!(mf, m);
    assert_eq!(fake_pattern.len(), n_fake);
    if push_users.is_empty() {
        return Err(Error::EmptyEligible(target));
    }
    let alpha = factors.weight;
    let reg = factors.reg;

    let item_const = tape.constant(factors.item.clone());
    let gram_items = tape.constant(factors.item.t().dot(&factors.item));
    let eye = tape.constant(Array2::eye(rank) * reg);

    // Fake user factors from their rating rows.
    let mut fake_factors: Vec<Var> = Vec::with_capacity(n_fake);
    for (f, items) in fake_pattern.iter().enumerate() {
        let row = tape.gather_rows(fake_var, &[f]); // (1, M)
        let mut a = tape.add(gram_items, eye);
        let mut rhs = tape.zeros_const((rank, 1));
        for &i in items {
            let r_fi = pick_scalar(tape, row, i, m); // (1,1)
            let y = tape.gather_rows(item_const, &[i]); // (1, rank)
            let yt = tape.transpose(y); // (rank, 1)
            let outer = tape.matmul(yt, y); // (rank, rank)
            let cm1 = tape.scale(r_fi, alpha);
            a = tape.add(a, tape.mul(outer, cm1));
            let c = tape.add_scalar(tape.scale(r_fi, alpha), 1.0);
            rhs = tape.add(rhs, tape.mul(yt, c));
        }
        fake_factors.push(tape.transpose(tape.solve(a, rhs))); // (1, rank)
    }

    // Item factors from real raters (constant parts) plus fake raters.
    let mut fake_raters: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (f, items) in fake_pattern.iter().enumerate() {
        for &i in items {
            fake_raters[i].push(f);
        }
    }
    let user_const = factors.user.clone();
    let gram_real: Array2<f64> = {
        // real users only: P_real^T P_real
        let p = &user_const;
        let p_real = p.clone();
        p_real.t().dot(&p_real)
    };

    // Precompute the constant per-item corrections from real raters.
    let mut by_item: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    for (u, i, r) in ratings_real.iter_entries() {
        by_item[i].push((u, r as f64));
    }

    let mut item_rows: Vec<Var> = Vec::with_capacity(m);
    for i in 0..m {
        let mut a_const = gram_real.clone();
        for r in 0..rank {
            a_const[[r, r]] += reg;
        }
        let mut rhs_const = Array2::zeros((rank, 1));
        for &(u, rating) in &by_item[i] {
            if u >= n_real {
                continue;
            }
            let c = 1.0 + alpha * rating;
            let pu = user_const.row(u);
            for p in 0..rank {
                rhs_const[[p, 0]] += c * pu[p];
                for q in 0..rank {
                    a_const[[p, q]] += (c - 1.0) * pu[p] * pu[q];
                }
            }
        }
        let mut a = tape.constant(a_const);
        let mut rhs = tape.constant(rhs_const);
        for &f in &fake_raters[i] {
            let row = tape.gather_rows(fake_var, &[f]);
            let r_fi = pick_scalar(tape, row, i, m);
            let pf = fake_factors[f]; // (1, rank)
            let pft = tape.transpose(pf);
            let outer = tape.matmul(pft, pf);
            let cm1 = tape.scale(r_fi, alpha);
            // confidence-weighted gram correction plus (c * pref) rhs with pref = 1
            a = tape.add(a, tape.add(outer, tape.mul(outer, cm1)));
            let c = tape.add_scalar(tape.scale(r_fi, alpha), 1.0);
            rhs = tape.add(rhs, tape.mul(pft, c));
        }
        item_rows.push(tape.transpose(tape.solve(a, rhs))); // (1, rank)
    }

    // Assemble Q (M, rank) and score the push batch: S = P_real[push] Q^T.
    let mut q = item_rows[0];
    for &row in item_rows.iter().skip(1) {
        q = tape.concat_rows(q, row);
    }
    let p_push = tape.constant(gather_rows_arr(&user_const, push_users));
    let scores = tape.matmul(p_push, tape.transpose(q));
    push_loss(tape, scores, target)
}

/// Extract the scalar at column `i` of a `(1, M)` row as a `(1,1)` node.
fn pick_scalar(tape: &Tape, row: Var, i: usize, m: usize) -> Var {
    let mut onehot = Array2::zeros((1, m));
    onehot[[0, i]] = 1.0;
    tape.sum_rows(tape.mul(row, tape.constant(onehot)))
}
