//! Conditional critics and adversarial updates: BCE discriminator
//! (optionally spectrally normalized), WGAN-GP with a projection head, and
//! WGAN-SN with a cosine-mix projection head.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, SideFeatureTable, TemplateSet};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::{leaky, linear, linear_nobias, randn, Adam, Bound, ParamStore, SnState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticVariant {
    /// Plain feedforward discriminator with sigmoid output and BCE losses.
    /// `spectral_norm` turns every layer into an SN layer (GAN-SN ablation).
    Bce { spectral_norm: bool },
    WganGp,
    WganSn,
}

impl CriticVariant {
    pub fn is_wgan(&self) -> bool {
        matches!(self, CriticVariant::WganGp | CriticVariant::WganSn)
    }

    fn uses_sn(&self) -> bool {
        matches!(
            self,
            CriticVariant::WganSn | CriticVariant::Bce { spectral_norm: true }
        )
    }
}

#[derive(Clone, Debug)]
pub struct CriticConfig {
    pub n_items: usize,
    /// Side-feature dimension; 0 disables conditioning entirely.
    pub feat_dim: usize,
    pub hidden: usize,
    pub variant: CriticVariant,
}

impl CriticConfig {
    pub fn defaults(n_items: usize, feat_dim: usize, variant: CriticVariant) -> Self {
        Self {
            n_items,
            feat_dim,
            hidden: 128,
            variant,
        }
    }

    pub fn conditional(&self) -> bool {
        self.feat_dim > 0
    }
}

/// Projection-discriminator score `u(h) + <h, V e>` on row-batched inputs.
pub fn projection_score(tape: &Tape, h: Var, e: Var, u_w: Var, u_b: Var, v: Var) -> Var {
    let unconditional = tape.add(tape.matmul(h, u_w), u_b);
    let proj = tape.matmul(e, tape.transpose(v)); // (B, d_h)
    let cond = tape.sum_rows(tape.mul(h, proj));
    tape.add(unconditional, cond)
}

/// Cosine-mix score `(1-w) g([h,e]) + w s cos(h,e)`; cosine is guarded to 0
/// for zero-norm inputs.
pub fn cosine_mix_score(tape: &Tape, h: Var, e: Var, g_w: Var, w: Var, s: Var) -> Var {
    let joint = tape.concat_cols(h, e);
    let g_score = tape.matmul(joint, g_w);
    let dot = tape.sum_rows(tape.mul(h, e));
    let nh = tape.l2norm_rows(h, 1e-24);
    let ne = tape.l2norm_rows(e, 1e-24);
    let cosine = tape.mul(dot, tape.recip(tape.mul(nh, ne)));
    let one_minus_w = tape.sub(tape.scalar_const(1.0), w);
    let mixed = tape.mul(tape.mul(cosine, s), w);
    tape.add(tape.mul(g_score, one_minus_w), mixed)
}

pub struct Critic {
    pub config: CriticConfig,
    pub store: ParamStore,
    sn_state: SnState,
    sn_rng: ChaCha12Rng,
}

impl Critic {
    pub fn new(config: CriticConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "critic-init"));
        let mut store = ParamStore::new();
        let m = config.n_items;
        let d = config.hidden;
        let fd = config.feat_dim;
        match config.variant {
            CriticVariant::Bce { .. } => {
                store.init_linear("d1", m + fd, d, &mut rng);
                store.init_linear("d2", d, d, &mut rng);
                store.init_linear("d3", d, 1, &mut rng);
            }
            CriticVariant::WganGp => {
                store.init_linear("h1", m, d, &mut rng);
                store.init_linear("h2", d, d, &mut rng);
                store.init_linear("h3", d, d, &mut rng);
                store.init_linear("u", d, 1, &mut rng);
                if fd > 0 {
                    store.init_linear("e1", fd, d, &mut rng);
                    store.init_linear("e2", d, d, &mut rng);
                    store.init_linear("e3", d, d, &mut rng);
                    store.init_linear_nobias("v", d, d, &mut rng);
                }
            }
            CriticVariant::WganSn => {
                store.init_linear("h1", m, d, &mut rng);
                store.init_linear("h2", d, d, &mut rng);
                store.init_linear("h3", d, d, &mut rng);
                if fd > 0 {
                    store.init_linear("e1", fd, d, &mut rng);
                    store.init_linear("e2", d, d, &mut rng);
                    store.init_linear("e3", d, d, &mut rng);
                    store.init_linear_nobias("g", 2 * d, 1, &mut rng);
                    store.insert("mix.w_raw", Array2::zeros((1, 1))); // sigmoid -> 0.5
                    store.insert("mix.s_raw", Array2::from_elem((1, 1), 0.5413248546129181)); // softplus -> 1
                } else {
                    store.init_linear_nobias("g", d, 1, &mut rng);
                }
            }
        }
        Self {
            config,
            store,
            sn_state: SnState::new(),
            sn_rng: rng,
        }
    }

    fn sn_layer_names(&self) -> Vec<&'static str> {
        if !self.config.variant.uses_sn() {
            return Vec::new();
        }
        match self.config.variant {
            CriticVariant::Bce { .. } => vec!["d1", "d2", "d3"],
            CriticVariant::WganSn => {
                if self.config.conditional() {
                    vec!["h1", "h2", "h3", "e1", "e2", "e3", "g"]
                } else {
                    vec!["h1", "h2", "h3", "g"]
                }
            }
            CriticVariant::WganGp => Vec::new(),
        }
    }

    /// Power-iterate the persistent u/v vectors for every SN layer.
    pub fn refresh_sn(&mut self, iters: usize) {
        for name in self.sn_layer_names() {
            let wname = format!("{name}.w");
            let w = self.store.get(&wname).clone();
            self.sn_state.refresh(&wname, &w, iters, &mut self.sn_rng);
        }
    }

    fn layer(&self, tape: &Tape, bound: &Bound, name: &str, x: Var, bias: bool) -> Var {
        if self.config.variant.uses_sn() {
            crate::nn::sn_linear(tape, bound, &self.sn_state, name, x, bias)
        } else if bias {
            linear(tape, bound, name, x)
        } else {
            linear_nobias(tape, bound, name, x)
        }
    }

    fn encode_ratings(&self, tape: &Tape, bound: &Bound, r: Var) -> Var {
        let h = leaky(tape, self.layer(tape, bound, "h1", r, true));
        let h = leaky(tape, self.layer(tape, bound, "h2", h, true));
        self.layer(tape, bound, "h3", h, true)
    }

    fn encode_feats(&self, tape: &Tape, bound: &Bound, x: Var) -> Var {
        let e = leaky(tape, self.layer(tape, bound, "e1", x, true));
        let e = leaky(tape, self.layer(tape, bound, "e2", e, true));
        self.layer(tape, bound, "e3", e, true)
    }

    /// Raw critic output `(B,1)`. For the BCE variant this is the logit;
    /// use [`Tape::sigmoid`] to recover `D(r,x)`.
    pub fn score_var(&self, tape: &Tape, bound: &Bound, r: Var, x: Option<Var>) -> Var {
        match self.config.variant {
            CriticVariant::Bce { .. } => {
                let input = match x {
                    Some(x) if self.config.conditional() => tape.concat_cols(r, x),
                    _ => r,
                };
                let h = leaky(tape, self.layer(tape, bound, "d1", input, true));
                let h = leaky(tape, self.layer(tape, bound, "d2", h, true));
                self.layer(tape, bound, "d3", h, true)
            }
            CriticVariant::WganGp => {
                let h = self.encode_ratings(tape, bound, r);
                match x {
                    Some(x) if self.config.conditional() => {
                        let e = self.encode_feats(tape, bound, x);
                        projection_score(
                            tape,
                            h,
                            e,
                            bound.var("u.w"),
                            bound.var("u.b"),
                            bound.var("v.w"),
                        )
                    }
                    _ => tape.add(tape.matmul(h, bound.var("u.w")), bound.var("u.b")),
                }
            }
            CriticVariant::WganSn => {
                let h = self.encode_ratings(tape, bound, r);
                match x {
                    Some(x) if self.config.conditional() => {
                        let e = self.encode_feats(tape, bound, x);
                        let w = tape.sigmoid(bound.var("mix.w_raw"));
                        let s = tape.softplus(bound.var("mix.s_raw"));
                        let g_w = {
                            // g is itself spectrally normalized
                            let gname = "g.w";
                            if let Some((u, v)) = self.sn_state.vectors(gname) {
                                let gw = bound.var(gname);
                                let u_row =
                                    tape.constant(u.clone().insert_axis(ndarray::Axis(0)));
                                let v_col =
                                    tape.constant(v.clone().insert_axis(ndarray::Axis(1)));
                                let sigma = tape.matmul(tape.matmul(u_row, gw), v_col);
                                tape.mul(gw, tape.recip(sigma))
                            } else {
                                bound.var(gname)
                            }
                        };
                        cosine_mix_score(tape, h, e, g_w, w, s)
                    }
                    _ => self.layer(tape, bound, "g", h, false),
                }
            }
        }
    }

    /// Critic scores as plain values (refreshes SN state with `sn_iters`).
    pub fn score_values(
        &mut self,
        r: &Array2<f64>,
        x: Option<&Array2<f64>>,
        sn_iters: usize,
    ) -> Array1<f64> {
        if self.config.variant.uses_sn() {
            self.refresh_sn(sn_iters);
        }
        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let rv = tape.constant(r.clone());
        let xv = x.map(|x| tape.constant(x.clone()));
        let s = self.score_var(&tape, &bound, rv, xv);
        let v = tape.value(s);
        Array1::from_iter(v.column(0).iter().cloned())
    }

    /// In-graph gradient penalty
    /// `lambda * mean((||grad_interp D(interp, x)||_2 - 1)^2)`,
    /// with one epsilon draw per batch row; `x` stays fixed.
    pub fn gradient_penalty_var(
        &self,
        tape: &Tape,
        bound: &Bound,
        r_real: &Array2<f64>,
        r_fake: &Array2<f64>,
        x: Option<&Array2<f64>>,
        lambda: f64,
        rng: &mut ChaCha12Rng,
    ) -> Var {
        let score = |tape: &Tape, r: Var| {
            let xv = x.map(|x| tape.constant(x.clone()));
            self.score_var(tape, bound, r, xv)
        };
        gradient_penalty_with(tape, score, r_real, r_fake, lambda, rng)
    }
}

/// Gradient penalty against an arbitrary scoring function (the critic's
/// conditional score with `x` held fixed).
pub fn gradient_penalty_with(
    tape: &Tape,
    score: impl Fn(&Tape, Var) -> Var,
    r_real: &Array2<f64>,
    r_fake: &Array2<f64>,
    lambda: f64,
    rng: &mut ChaCha12Rng,
) -> Var {
    assert_eq!(r_real.dim(), r_fake.dim(), "gp batch shapes");
    let b = r_real.nrows();
    let mut interp = Array2::zeros(r_real.dim());
    for i in 0..b {
        let eps: f64 = rng.random();
        for j in 0..r_real.ncols() {
            interp[[i, j]] = eps * r_real[[i, j]] + (1.0 - eps) * r_fake[[i, j]];
        }
    }
    let ri = tape.leaf(interp);
    let d = score(tape, ri);
    let dsum = tape.sum_all(d);
    let g = tape.grad(dsum, &[ri])[0];
    let norms = tape.l2norm_rows(g, 1e-24);
    let dev = tape.add_scalar(norms, -1.0);
    let sq = tape.mul(dev, dev);
    tape.scale(tape.mean_all(sq), lambda)
}

#[derive(Clone, Debug)]
pub struct AdversarialHyper {
    pub critic_lr: f64,
    pub gen_lr: f64,
    pub betas: (f64, f64),
    pub lambda_gp: f64,
    pub batch_size: usize,
    /// Abort threshold for a diverging round.
    pub max_abs_loss: f64,
}

impl AdversarialHyper {
    /// Training-table defaults for a critic variant.
    pub fn for_variant(variant: CriticVariant) -> Self {
        match variant {
            CriticVariant::Bce { .. } => Self {
                critic_lr: 1e-2,
                gen_lr: 1e-2,
                betas: (0.9, 0.999),
                lambda_gp: 0.0,
                batch_size: 128,
                max_abs_loss: 1e6,
            },
            CriticVariant::WganGp => Self {
                critic_lr: 1e-4,
                gen_lr: 1e-4,
                betas: (0.5, 0.9),
                lambda_gp: 10.0,
                batch_size: 128,
                max_abs_loss: 1e6,
            },
            CriticVariant::WganSn => Self {
                critic_lr: 1e-5,
                gen_lr: 1e-4,
                betas: (0.5, 0.9),
                lambda_gp: 0.0,
                batch_size: 128,
                max_abs_loss: 1e6,
            },
        }
    }

    pub fn critic_opt(&self) -> Adam {
        Adam::with_betas(self.critic_lr, self.betas.0, self.betas.1)
    }

    pub fn gen_opt(&self) -> Adam {
        Adam::with_betas(self.gen_lr, self.betas.0, self.betas.1)
    }
}

#[derive(Clone, Debug, Default)]
pub struct RoundTraces {
    pub critic: Vec<f64>,
    pub generator: Vec<f64>,
}

/// Synthesize fake rating rows from one fixed template slot, conditioned on
/// a batch of side-feature rows (values only, no tape).
fn synth_fixed_template(
    gen: &Generator,
    template_row: &Array2<f64>,
    slot: usize,
    feat_rows: &Array2<f64>,
    rng: &mut ChaCha12Rng,
) -> Array2<f64> {
    let b = feat_rows.nrows();
    let mut rows = Array2::zeros((b, template_row.ncols()));
    for mut r in rows.rows_mut() {
        r.assign(&template_row.row(0));
    }
    let tape = Tape::new();
    let bound = gen.store.bind(&tape);
    let noise = randn((b, gen.config.latent_dim), rng);
    let out = gen.decode_profiles_var(
        &tape,
        &bound,
        &rows,
        &vec![slot; b],
        feat_rows,
        Some(&noise),
        None,
    );
    tape.value(out)
}

/// One critic sweep over all real profiles: for each real `(r, x)`,
/// synthesize a fake from the fixed template conditioned on the same `x`,
/// score both, and update the critic.
#[allow(clippy::too_many_arguments)]
pub fn critic_sweep(
    gen: &Generator,
    critic: &mut Critic,
    dataset: &Dataset,
    templates: &TemplateSet,
    hyper: &AdversarialHyper,
    opt: &mut Adam,
    round: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(
        seed,
        &format!("critic-sweep-{round}"),
    ));
    let slot = round % templates.len();
    let template_row = {
        let dense = templates.to_dense();
        dense.row(slot).insert_axis(ndarray::Axis(0)).to_owned()
    };
    let real = dataset.ratings.to_dense();
    let feats = &dataset.user_features.rows;
    let conditional = critic.config.conditional();

    let n = real.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut losses = Vec::new();
    for chunk in order.chunks(hyper.batch_size) {
        let rb = gather_rows(&real, chunk);
        let xb = gather_rows(feats, chunk);
        let fake = synth_fixed_template(gen, &template_row, slot, &xb, &mut rng);

        if critic.config.variant.uses_sn() {
            critic.refresh_sn(1);
        }
        let tape = Tape::new();
        let bound = critic.store.bind(&tape);
        let rv = tape.constant(rb.clone());
        let fv = tape.constant(fake.clone());
        let xv = conditional.then(|| tape.constant(xb.clone()));
        let real_score = critic.score_var(&tape, &bound, rv, xv);
        let xv2 = conditional.then(|| tape.constant(xb.clone()));
        let fake_score = critic.score_var(&tape, &bound, fv, xv2);

        let loss = match critic.config.variant {
            CriticVariant::Bce { .. } => {
                // -log D(real) - log(1 - D(fake)) via stable softplus forms
                let sp_real = tape.softplus(tape.neg(real_score));
                let sp_fake = tape.softplus(fake_score);
                tape.add(tape.mean_all(sp_real), tape.mean_all(sp_fake))
            }
            _ => {
                let base = tape.sub(tape.mean_all(fake_score), tape.mean_all(real_score));
                if matches!(critic.config.variant, CriticVariant::WganGp)
                    && hyper.lambda_gp > 0.0
                {
                    let gp = critic.gradient_penalty_var(
                        &tape,
                        &bound,
                        &rb,
                        &fake,
                        conditional.then_some(&xb),
                        hyper.lambda_gp,
                        &mut rng,
                    );
                    tape.add(base, gp)
                } else {
                    base
                }
            }
        };
        let lv = tape.scalar(loss);
        if !lv.is_finite() || lv.abs() > hyper.max_abs_loss {
            return Err(Error::Diverged(format!("critic loss {lv} in round {round}")));
        }
        losses.push(lv);
        let grads = bound.grads(&tape, loss);
        opt.step(&mut critic.store, &grads);
    }
    Ok(losses)
}

/// One generator sweep against the frozen critic, drawing side features
/// from the separate pool.
#[allow(clippy::too_many_arguments)]
pub fn generator_sweep(
    gen: &mut Generator,
    critic: &mut Critic,
    templates: &TemplateSet,
    pool: &SideFeatureTable,
    hyper: &AdversarialHyper,
    opt: &mut Adam,
    round: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(
        seed,
        &format!("generator-sweep-{round}"),
    ));
    let slot = round % templates.len();
    let template_row = {
        let dense = templates.to_dense();
        dense.row(slot).insert_axis(ndarray::Axis(0)).to_owned()
    };
    let conditional = critic.config.conditional();
    let n = pool.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut losses = Vec::new();
    for chunk in order.chunks(hyper.batch_size) {
        let xb = gather_rows(&pool.rows, chunk);
        let b = xb.nrows();
        if critic.config.variant.uses_sn() {
            critic.refresh_sn(1);
        }
        let tape = Tape::new();
        let bound_gen = gen.store.bind(&tape);
        let bound_critic = critic.store.bind(&tape);
        let mut rows = Array2::zeros((b, template_row.ncols()));
        for mut r in rows.rows_mut() {
            r.assign(&template_row.row(0));
        }
        let noise = randn((b, gen.config.latent_dim), &mut rng);
        let fake = gen.decode_profiles_var(
            &tape,
            &bound_gen,
            &rows,
            &vec![slot; b],
            &xb,
            Some(&noise),
            None,
        );
        let xv = conditional.then(|| tape.constant(xb.clone()));
        let fake_score = critic.score_var(&tape, &bound_critic, fake, xv);
        let loss = match critic.config.variant {
            CriticVariant::Bce { .. } => {
                // -log D(fake)
                tape.mean_all(tape.softplus(tape.neg(fake_score)))
            }
            _ => tape.neg(tape.mean_all(fake_score)),
        };
        let lv = tape.scalar(loss);
        if !lv.is_finite() || lv.abs() > hyper.max_abs_loss {
            return Err(Error::Diverged(format!(
                "generator adversarial loss {lv} in round {round}"
            )));
        }
        losses.push(lv);
        let grads = bound_gen.grads(&tape, loss);
        opt.step(&mut gen.store, &grads);
    }
    Ok(losses)
}

/// One full adversarial round: a critic sweep over all real profiles
/// followed by one generator sweep over the feature pool (1:1 ratio).
#[allow(clippy::too_many_arguments)]
pub fn adversarial_round(
    gen: &mut Generator,
    critic: &mut Critic,
    dataset: &Dataset,
    templates: &TemplateSet,
    pool: &SideFeatureTable,
    hyper: &AdversarialHyper,
    critic_opt: &mut Adam,
    gen_opt: &mut Adam,
    round: usize,
    seed: u64,
) -> Result<RoundTraces> {
    let critic_losses =
        critic_sweep(gen, critic, dataset, templates, hyper, critic_opt, round, seed)?;
    let gen_losses =
        generator_sweep(gen, critic, templates, pool, hyper, gen_opt, round, seed)?;
    Ok(RoundTraces {
        critic: critic_losses,
        generator: gen_losses,
    })
}

fn gather_rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), a.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).assign(&a.row(i));
    }
    out
}
