//! Conditional fake-rating generator: VAE backbone (or deterministic AE
//! baseline), FiLM side-feature conditioning on the last decoder layers,
//! and per-user discretization with a piecewise-linear gradient surrogate.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{ProfileBatch, RatingMatrix, SideFeatureTable, TemplateSet};
use crate::error::{Error, Result};
use crate::nn::{leaky, linear, randn, Adam, Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorVariant {
    /// Deterministic autoencoder: zero KL weight, sigma fixed to 0.
    AeBaseline,
    Vae,
}

#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    pub n_items: usize,
    pub feat_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    /// Number of decoder linear outputs modulated by FiLM (1 or 2).
    pub film_layers: usize,
    pub variant: GeneratorVariant,
}

impl GeneratorConfig {
    pub fn defaults(n_items: usize, feat_dim: usize, variant: GeneratorVariant) -> Self {
        Self {
            n_items,
            feat_dim,
            latent_dim: 64,
            hidden: 256,
            cond_dim: 32,
            film_layers: 2,
            variant,
        }
    }
}

/// Decoder output range is (0, RATING_SCALE); cutpoints live inside it.
pub const RATING_SCALE: f64 = 5.0;

/// Residual gated affine modulation:
/// `h + alpha * (gamma(c) ⊙ h + beta(c))` with
/// `gamma = 1 + 0.3 tanh(c W_g + b_g)` and `beta = 0.05 tanh(c W_b + b_b)`.
#[allow(clippy::too_many_arguments)]
pub fn film_modulate(
    tape: &Tape,
    h: Var,
    c: Var,
    w_gamma: Var,
    b_gamma: Var,
    w_beta: Var,
    b_beta: Var,
    alpha: Var,
) -> Var {
    let (hb, hd) = tape.shape(h);
    let (cb, _cd) = tape.shape(c);
    assert_eq!(hb, cb, "batch dims of h and c must match");
    assert_eq!(tape.shape(w_gamma).1, hd, "gamma projection must map to H");

    let pre_g = tape.add(tape.matmul(c, w_gamma), b_gamma);
    let gamma = tape.add_scalar(tape.scale(tape.tanh(pre_g), 0.3), 1.0);
    let pre_b = tape.add(tape.matmul(c, w_beta), b_beta);
    let beta = tape.scale(tape.tanh(pre_b), 0.05);
    let modulated = tape.add(tape.mul(gamma, h), beta);
    tape.add(h, tape.mul(modulated, alpha))
}

/// Strictly increasing cutpoints from a raw `(base, g1..g3)` row via
/// softplus gaps.
pub fn cutpoint_values(raw: &[f64]) -> [f64; 4] {
    let sp = |x: f64| if x > 30.0 { x } else { (1.0 + x.exp()).ln() };
    let mut c = [0.0; 4];
    c[0] = raw[0];
    for k in 1..4 {
        c[k] = c[k - 1] + sp(raw[k]);
    }
    c
}

fn raw_from_even_cutpoints() -> Array1<f64> {
    // cutpoints 1,2,3,4 over the (0,5) decoder range: base 1, unit gaps
    let inv_sp_one = (1f64.exp() - 1.0).ln();
    Array1::from_vec(vec![1.0, inv_sp_one, inv_sp_one, inv_sp_one])
}

/// Forward binning: `1 + #{cutpoints below x}`, zeroed off-template.
pub fn discretize_forward(x: &Array2<f64>, cuts: &[[f64; 4]], mask: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for i in 0..x.nrows() {
        let c = &cuts[i.min(cuts.len() - 1)];
        for j in 0..x.ncols() {
            if mask[[i, j]] == 0.0 {
                continue;
            }
            let v = x[[i, j]];
            let mut bin = 1.0;
            for ck in c {
                if v > *ck {
                    bin += 1.0;
                }
            }
            out[[i, j]] = bin;
        }
    }
    out
}

/// Discretize on-tape: hard bins in the forward value, straight-through
/// slope-1 gradient between the clamp bounds `[c1 - g, c4 + g]` (g = mean
/// cutpoint gap), zero outside; the template mask zeroes off-template
/// entries in both value and gradient.
pub fn discretize(tape: &Tape, x: Var, cuts: &[[f64; 4]], mask: &Array2<f64>) -> Var {
    let xv = tape.value(x);
    assert_eq!(xv.dim(), mask.dim(), "mask shape must match decode shape");
    let (lo, hi): (Vec<f64>, Vec<f64>) = (0..xv.nrows())
        .map(|i| {
            let c = &cuts[i.min(cuts.len() - 1)];
            let gap = (c[3] - c[0]) / 3.0;
            (c[0] - gap, c[3] + gap)
        })
        .unzip();
    let lin = tape.clamp_per_row(x, &lo, &hi);
    let hard = discretize_forward(&xv, cuts, mask);
    let masked_lin = tape.mul(lin, tape.constant(mask.clone()));
    let correction = tape.constant(&hard - &tape.value(masked_lin));
    tape.add(masked_lin, correction)
}

pub struct Generator {
    pub config: GeneratorConfig,
    pub store: ParamStore,
    /// Cutpoint rows: one per generated-user slot, plus a shared prototype
    /// used while pretraining on arbitrary users.
    pub n_slots: usize,
}

const GATE_INIT_RAW: f64 = -2.1972245773362196; // sigmoid(-2.197...) = 0.1

impl Generator {
    pub fn new(config: GeneratorConfig, n_slots: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "generator-init"));
        let mut store = ParamStore::new();
        let m = config.n_items;
        let h = config.hidden;
        let dz = config.latent_dim;
        store.init_linear("enc1", m, h, &mut rng);
        store.init_linear("enc_mu", h, dz, &mut rng);
        store.init_linear("enc_lv", h, dz, &mut rng);
        store.init_linear("dec1", dz, h, &mut rng);
        store.init_linear("dec2", h, h, &mut rng);
        store.init_linear("dec3", h, m, &mut rng);
        store.init_linear("cond1", config.feat_dim.max(1), 64, &mut rng);
        store.init_linear("cond2", 64, config.cond_dim, &mut rng);
        // FiLM heads: film0 modulates the final decoder linear output (dim m),
        // film1 the one before it (dim h) when film_layers == 2.
        store.init_linear("film0.gamma", config.cond_dim, m, &mut rng);
        store.init_linear("film0.beta", config.cond_dim, m, &mut rng);
        store.init_linear("film1.gamma", config.cond_dim, h, &mut rng);
        store.init_linear("film1.beta", config.cond_dim, h, &mut rng);
        store.insert("film.gate", Array2::from_elem((1, 1), GATE_INIT_RAW));

        let proto = raw_from_even_cutpoints();
        store.insert("disc.proto", proto.clone().insert_axis(Axis(0)).to_owned());
        let mut slots = Array2::zeros((n_slots.max(1), 4));
        for mut row in slots.rows_mut() {
            row.assign(&proto);
        }
        store.insert("disc.slots", slots);

        Self {
            config,
            store,
            n_slots: n_slots.max(1),
        }
    }

    pub fn slot_cutpoints(&self) -> Vec<[f64; 4]> {
        let raw = self.store.get("disc.slots");
        (0..raw.nrows())
            .map(|i| cutpoint_values(raw.row(i).as_slice().unwrap()))
            .collect()
    }

    fn film(&self, tape: &Tape, bound: &Bound, name: &str, h: Var, c: Var) -> Var {
        let alpha = tape.sigmoid(bound.var("film.gate"));
        film_modulate(
            tape,
            h,
            c,
            bound.var(&format!("{name}.gamma.w")),
            bound.var(&format!("{name}.gamma.b")),
            bound.var(&format!("{name}.beta.w")),
            bound.var(&format!("{name}.beta.b")),
            alpha,
        )
    }

    fn condition(&self, tape: &Tape, bound: &Bound, feats: Var) -> Var {
        let c = leaky(tape, linear(tape, bound, "cond1", feats));
        linear(tape, bound, "cond2", c)
    }

    /// Encoder + reparameterized decoder. Returns `(continuous, mu, logvar)`
    /// where `continuous` lies in `(0, RATING_SCALE)`.
    ///
    /// `noise` fixes the latent draw; otherwise `rng` samples it. The AE
    /// baseline ignores noise entirely (sigma = 0).
    pub fn forward_continuous(
        &self,
        tape: &Tape,
        bound: &Bound,
        ratings_in: Var,
        feats: Var,
        noise: Option<&Array2<f64>>,
        rng: Option<&mut ChaCha12Rng>,
    ) -> (Var, Var, Var) {
        let (batch, m) = tape.shape(ratings_in);
        assert_eq!(m, self.config.n_items, "rating input width");
        let scaled = tape.scale(ratings_in, 1.0 / RATING_SCALE);
        let eh = leaky(tape, linear(tape, bound, "enc1", scaled));
        let mu = linear(tape, bound, "enc_mu", eh);
        let logvar = tape.clamp(linear(tape, bound, "enc_lv", eh), -10.0, 10.0);

        let z = match self.config.variant {
            GeneratorVariant::AeBaseline => mu,
            GeneratorVariant::Vae => {
                let eps = match (noise, rng) {
                    (Some(n), _) => {
                        assert_eq!(n.dim(), (batch, self.config.latent_dim));
                        n.clone()
                    }
                    (None, Some(rng)) => randn((batch, self.config.latent_dim), rng),
                    (None, None) => Array2::zeros((batch, self.config.latent_dim)),
                };
                let sigma = tape.exp(tape.scale(logvar, 0.5));
                tape.add(mu, tape.mul(sigma, tape.constant(eps)))
            }
        };

        let c = self.condition(tape, bound, feats);
        let d1 = leaky(tape, linear(tape, bound, "dec1", z));
        let mut a2 = linear(tape, bound, "dec2", d1);
        if self.config.film_layers >= 2 {
            a2 = self.film(tape, bound, "film1", a2, c);
        }
        let d2 = leaky(tape, a2);
        let mut a3 = linear(tape, bound, "dec3", d2);
        if self.config.film_layers >= 1 {
            a3 = self.film(tape, bound, "film0", a3, c);
        }
        let cont = tape.scale(tape.sigmoid(a3), RATING_SCALE);

        let cv = tape.value(cont);
        assert!(
            cv.iter().all(|x| x.is_finite()),
            "non-finite generator activations"
        );
        (cont, mu, logvar)
    }

    /// Differentiable fake-profile path: decode each input row conditioned
    /// on its feature row, discretize with the per-slot cutpoints, apply the
    /// template mask, and (for attack batches) overwrite the target column
    /// with rating 5.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_profiles_var(
        &self,
        tape: &Tape,
        bound: &Bound,
        template_rows: &Array2<f64>,
        slots: &[usize],
        feat_rows: &Array2<f64>,
        noise: Option<&Array2<f64>>,
        target: Option<usize>,
    ) -> Var {
        let batch = template_rows.nrows();
        assert_eq!(slots.len(), batch, "one cutpoint slot per row");
        let rows_in = tape.constant(template_rows.clone());
        let feats = tape.constant(feat_rows.clone());
        let (cont, _, _) = self.forward_continuous(tape, bound, rows_in, feats, noise, None);
        let mask = template_rows.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let all_cuts = self.slot_cutpoints();
        let cuts: Vec<[f64; 4]> = slots
            .iter()
            .map(|&s| all_cuts[s.min(all_cuts.len() - 1)])
            .collect();
        let disc = discretize(tape, cont, &cuts, &mask);
        let Some(target) = target else { return disc };
        // force the promotion target to rating 5 (constant path, no gradient)
        let mut keep = Array2::ones((batch, self.config.n_items));
        let mut force = Array2::zeros((batch, self.config.n_items));
        for i in 0..batch {
            keep[[i, target]] = 0.0;
            force[[i, target]] = 5.0;
        }
        tape.add(tape.mul(disc, tape.constant(keep)), tape.constant(force))
    }

    /// Attack batch: one row per template slot, forced target rating.
    pub fn fake_profiles_var(
        &self,
        tape: &Tape,
        bound: &Bound,
        templates_dense: &Array2<f64>,
        feat_rows: &Array2<f64>,
        noise: Option<&Array2<f64>>,
        target: usize,
    ) -> Var {
        let slots: Vec<usize> = (0..templates_dense.nrows()).collect();
        self.decode_profiles_var(
            tape,
            bound,
            templates_dense,
            &slots,
            feat_rows,
            noise,
            Some(target),
        )
    }

    /// KL(q || N(0,I)) per batch element, summed over latent dims: `(B,1)`.
    pub fn kl_term(&self, tape: &Tape, mu: Var, logvar: Var) -> Var {
        // 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar)
        let mu2 = tape.mul(mu, mu);
        let var = tape.exp(logvar);
        let inner = tape.sub(tape.sub(tape.add(mu2, var), tape.scalar_const(1.0)), logvar);
        tape.scale(tape.sum_rows(inner), 0.5)
    }

    /// Categorical likelihood over the 5 bins induced by the prototype
    /// cutpoints, via soft binning with temperature 1. Returns the summed
    /// negative log-likelihood over observed entries, `(B,1)`.
    fn soft_bin_nll(&self, tape: &Tape, bound: &Bound, cont: Var, targets: &Array2<f64>) -> Var {
        let raw = bound.var("disc.proto");
        let base = tape.slice_cols(raw, 0, 1);
        let mut cut = base;
        let mut above = Vec::with_capacity(4);
        for k in 1..=4usize {
            if k > 1 {
                let gap = tape.softplus(tape.slice_cols(raw, k - 1, k));
                cut = tape.add(cut, gap);
            }
            // P(value above cutpoint k) — (1,1) broadcasts against (B,M)
            above.push(tape.sigmoid(tape.sub(cont, cut)));
        }
        let (b, m) = tape.shape(cont);
        let class_mask = |k: u8| {
            let mut mask = Array2::zeros((b, m));
            for i in 0..b {
                for j in 0..m {
                    if targets[[i, j]] as u8 == k {
                        mask[[i, j]] = 1.0;
                    }
                }
            }
            tape.constant(mask)
        };
        let one = tape.scalar_const(1.0);
        let p1 = tape.sub(one, above[0]);
        let p2 = tape.sub(above[0], above[1]);
        let p3 = tape.sub(above[1], above[2]);
        let p4 = tape.sub(above[2], above[3]);
        let p5 = above[3];
        let mut p_true = tape.mul(p1, class_mask(1));
        for (p, k) in [(p2, 2u8), (p3, 3), (p4, 4), (p5, 5)] {
            p_true = tape.add(p_true, tape.mul(p, class_mask(k)));
        }
        let obs = targets.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let logp = tape.ln(tape.add_scalar(p_true, 1e-9));
        let masked = tape.mul(logp, tape.constant(obs));
        tape.neg(tape.sum_rows(masked))
    }

    /// Pretraining: squared error on observed template entries for the AE
    /// baseline, negative ELBO over all users for the VAE. Returns per-epoch
    /// mean losses.
    pub fn pretrain(
        &mut self,
        dataset: &crate::data::Dataset,
        templates: &TemplateSet,
        epochs: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if epochs == 0 {
            return Err(Error::Validation("pretraining needs epochs >= 1".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "generator-pretrain"));
        let mut opt = Adam::new(lr);
        let mut trace = Vec::with_capacity(epochs);

        let (rows, feats): (Array2<f64>, Array2<f64>) = match self.config.variant {
            GeneratorVariant::AeBaseline => {
                let rows = templates.to_dense();
                let mut f = Array2::zeros((templates.len(), self.config.feat_dim.max(1)));
                for (k, &u) in templates.users.iter().enumerate() {
                    if dataset.user_features.dim > 0 {
                        f.row_mut(k).assign(&dataset.user_features.rows.row(u));
                    }
                }
                (rows, f)
            }
            GeneratorVariant::Vae => {
                let rows = dataset.ratings.to_dense();
                let f = if dataset.user_features.dim > 0 {
                    dataset.user_features.rows.clone()
                } else {
                    Array2::zeros((dataset.n_users(), 1))
                };
                (rows, f)
            }
        };

        let n = rows.nrows();
        let batch_size = 128.min(n.max(1));
        for _epoch in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut seen = 0usize;
            for chunk in order.chunks(batch_size) {
                let rb = gather(&rows, chunk);
                let fb = gather(&feats, chunk);
                let tape = Tape::new();
                let bound = self.store.bind(&tape);
                let rv = tape.constant(rb.clone());
                let fv = tape.constant(fb);
                let loss = match self.config.variant {
                    GeneratorVariant::AeBaseline => {
                        let (cont, _, _) =
                            self.forward_continuous(&tape, &bound, rv, fv, None, None);
                        let mask = rb.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                        let raw = self.store.get("disc.slots");
                        let cuts: Vec<[f64; 4]> = chunk
                            .iter()
                            .map(|&slot| {
                                let row = raw.row(slot.min(raw.nrows() - 1));
                                cutpoint_values(row.as_slice().unwrap())
                            })
                            .collect();
                        let disc = discretize(&tape, cont, &cuts, &mask);
                        let diff = tape.sub(disc, tape.constant(rb.clone()));
                        let sq = tape.mul(diff, diff);
                        tape.mean_all(tape.sum_rows(sq))
                    }
                    GeneratorVariant::Vae => {
                        let (cont, mu, logvar) = self.forward_continuous(
                            &tape,
                            &bound,
                            rv,
                            fv,
                            None,
                            Some(&mut rng),
                        );
                        let nll = self.soft_bin_nll(&tape, &bound, cont, &rb);
                        let kl = self.kl_term(&tape, mu, logvar);
                        tape.mean_all(tape.add(nll, kl))
                    }
                };
                let lv = tape.scalar(loss);
                if !lv.is_finite() {
                    return Err(Error::Diverged(format!("pretraining loss {lv}")));
                }
                epoch_loss += lv * chunk.len() as f64;
                seen += chunk.len();
                let grads = bound.grads(&tape, loss);
                opt.step(&mut self.store, &grads);
            }
            trace.push(epoch_loss / seen.max(1) as f64);
        }

        // Slots start from the pretrained prototype; afterwards they remain
        // independent per-slot parameters.
        if matches!(self.config.variant, GeneratorVariant::Vae) {
            let proto = self.store.get("disc.proto").row(0).to_owned();
            let slots = self.store.get_mut("disc.slots");
            for mut row in slots.rows_mut() {
                row.assign(&proto);
            }
        }
        Ok(trace)
    }

    /// Generate a discrete fake-profile batch (pure given the seed).
    pub fn generate(
        &self,
        templates: &TemplateSet,
        feature_pool: &SideFeatureTable,
        pool_users: &[usize],
        target: usize,
        seed: u64,
    ) -> Result<ProfileBatch> {
        let batch = templates.len();
        if feature_pool.len() != pool_users.len() {
            return Err(Error::Dim("feature pool rows vs provenance".into()));
        }
        if feature_pool.len() == 0 {
            return Err(Error::Validation("empty feature pool".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(crate::derive_seed(seed, "generate"));
        let mut feat_rows = Array2::zeros((batch, self.config.feat_dim.max(1)));
        let mut provenance = Vec::with_capacity(batch);
        for i in 0..batch {
            let pick = rng.random_range(0..feature_pool.len());
            if feature_pool.dim > 0 {
                feat_rows.row_mut(i).assign(&feature_pool.rows.row(pick));
            }
            provenance.push(pool_users[pick]);
        }
        let noise = match self.config.variant {
            GeneratorVariant::Vae => Some(randn((batch, self.config.latent_dim), &mut rng)),
            GeneratorVariant::AeBaseline => None,
        };

        let tape = Tape::new();
        let bound = self.store.bind(&tape);
        let dense = templates.to_dense();
        let fake =
            self.fake_profiles_var(&tape, &bound, &dense, &feat_rows, noise.as_ref(), target);
        let values = tape.value(fake);

        let mut ratings = RatingMatrix::new(batch, self.config.n_items);
        for i in 0..batch {
            for j in 0..self.config.n_items {
                let v = values[[i, j]].round() as i64;
                if v > 0 {
                    ratings.set(i, j, v.clamp(1, 5) as u8)?;
                }
            }
        }
        let feats_table = if self.config.feat_dim > 0 {
            SideFeatureTable::new(feat_rows)
        } else {
            SideFeatureTable::empty(batch)
        };
        let out = ProfileBatch {
            ratings,
            user_features: feats_table,
            provenance,
            target,
            cap: templates.cap,
        };
        out.validate()?;
        Ok(out)
    }
}

fn gather(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), a.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).assign(&a.row(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, SamplingStrategy};
    use ndarray::array;

    fn toy_dataset(n_users: usize, n_items: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ratings = RatingMatrix::new(n_users, n_items);
        for u in 0..n_users {
            for i in 0..n_items {
                if rng.random::<f64>() < 0.4 {
                    ratings.set(u, i, rng.random_range(1..=5)).unwrap();
                }
            }
        }
        let feats = Array2::from_shape_fn((n_users, 4), |_| rng.random::<f64>());
        Dataset {
            ratings,
            user_features: SideFeatureTable::new(feats),
            item_features: SideFeatureTable::new(Array2::zeros((n_items, 2))),
            name: "toy".into(),
        }
    }

    #[test]
    fn film_zero_weights_scales_by_one_plus_alpha() {
        let tape = Tape::new();
        let h = tape.leaf(array![[1.0, -2.0, 0.5]]);
        let c = tape.constant(array![[0.3, 0.7]]);
        let wz = tape.constant(Array2::zeros((2, 3)));
        let bz = tape.constant(Array2::zeros((1, 3)));
        let alpha = tape.constant(array![[0.25]]);
        let out = film_modulate(&tape, h, c, wz, bz, wz, bz, alpha);
        let expect = tape.value(h).mapv(|x| 1.25 * x);
        let got = tape.value(out);
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn film_gate_closed_is_identity() {
        let tape = Tape::new();
        let h = tape.leaf(array![[0.4, 1.2]]);
        let c = tape.constant(array![[1.0]]);
        let w = tape.constant(array![[0.5, -0.3]]);
        let b = tape.constant(array![[0.1, 0.2]]);
        let alpha = tape.constant(array![[0.0]]);
        let out = film_modulate(&tape, h, c, w, b, w, b, alpha);
        assert_eq!(tape.value(out), tape.value(h));
    }

    #[test]
    fn film_hand_evaluated_scalar_case() {
        // pre-activation 1 for both heads, h = 2, alpha = 0.5
        let tape = Tape::new();
        let h = tape.leaf(array![[2.0]]);
        let c = tape.constant(array![[1.0]]);
        let w = tape.constant(array![[1.0]]);
        let b = tape.constant(array![[0.0]]);
        let alpha = tape.constant(array![[0.5]]);
        let out = film_modulate(&tape, h, c, w, b, w, b, alpha);
        assert!((tape.scalar(out) - 3.247518).abs() < 1e-6);
    }

    #[test]
    fn film_gamma_beta_ranges_hold() {
        let tape = Tape::new();
        let c = tape.constant(Array2::from_elem((1, 3), 1e6));
        let w = tape.constant(Array2::from_elem((3, 2), 1e6));
        let b = tape.constant(Array2::zeros((1, 2)));
        let pre = tape.add(tape.matmul(c, w), b);
        let gamma = tape.add_scalar(tape.scale(tape.tanh(pre), 0.3), 1.0);
        let beta = tape.scale(tape.tanh(pre), 0.05);
        for g in tape.value(gamma).iter() {
            assert!((g - 1.0).abs() <= 0.3 + 1e-12);
        }
        for bb in tape.value(beta).iter() {
            assert!(bb.abs() <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn film_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let h0 = Array2::from_shape_fn((2, 3), |_| rng.random_range(-1.0..1.0));
        let c0 = Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0));
        let w0 = Array2::from_shape_fn((2, 3), |_| rng.random_range(-0.8..0.8));
        let b0 = Array2::from_shape_fn((1, 3), |_| rng.random_range(-0.3..0.3));
        let eval = |w: &Array2<f64>| {
            let tape = Tape::new();
            let h = tape.constant(h0.clone());
            let c = tape.constant(c0.clone());
            let wv = tape.leaf(w.clone());
            let bv = tape.constant(b0.clone());
            let alpha = tape.constant(array![[0.4]]);
            let out = film_modulate(&tape, h, c, wv, bv, wv, bv, alpha);
            tape.scalar(tape.sum_all(tape.mul(out, out)))
        };
        let tape = Tape::new();
        let h = tape.constant(h0.clone());
        let c = tape.constant(c0.clone());
        let wv = tape.leaf(w0.clone());
        let bv = tape.constant(b0.clone());
        let alpha = tape.constant(array![[0.4]]);
        let out = film_modulate(&tape, h, c, wv, bv, wv, bv, alpha);
        let loss = tape.sum_all(tape.mul(out, out));
        let analytic = tape.value(tape.grad(loss, &[wv])[0]);
        let mut worst: f64 = 0.0;
        for i in 0..w0.nrows() {
            for j in 0..w0.ncols() {
                let mut wp = w0.clone();
                wp[[i, j]] += 1e-6;
                let mut wm = w0.clone();
                wm[[i, j]] -= 1e-6;
                let fd = (eval(&wp) - eval(&wm)) / 2e-6;
                let denom = fd.abs().max(analytic[[i, j]].abs()).max(1e-8);
                worst = worst.max((fd - analytic[[i, j]]).abs() / denom);
            }
        }
        assert!(worst < 1e-4, "relative error {worst}");
    }

    #[test]
    fn decoder_path_gradients_match_finite_differences() {
        let ds = toy_dataset(6, 12, 3);
        let gen = Generator::new(
            GeneratorConfig {
                n_items: 12,
                feat_dim: 4,
                latent_dim: 5,
                hidden: 8,
                cond_dim: 3,
                film_layers: 2,
                variant: GeneratorVariant::Vae,
            },
            4,
            11,
        );
        let rows = ds.ratings.to_dense();
        let feats = ds.user_features.rows.clone();
        let noise = Array2::zeros((6, 5));
        let eval = |store: &ParamStore| {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let rv = tape.constant(rows.clone());
            let fv = tape.constant(feats.clone());
            let (cont, _, _) = gen.forward_continuous(&tape, &bound, rv, fv, Some(&noise), None);
            tape.scalar(tape.mean_all(tape.mul(cont, cont)))
        };
        let tape = Tape::new();
        let bound = gen.store.bind(&tape);
        let rv = tape.constant(rows.clone());
        let fv = tape.constant(feats.clone());
        let (cont, _, _) = gen.forward_continuous(&tape, &bound, rv, fv, Some(&noise), None);
        let loss = tape.mean_all(tape.mul(cont, cont));
        let grads = bound.grads(&tape, loss);

        for name in ["dec3.w", "film0.gamma.w", "cond2.w", "enc1.w"] {
            let g = &grads[name];
            let base = gen.store.get(name).clone();
            let mut worst: f64 = 0.0;
            let coords = [
                (0usize, 0usize),
                (0, 1),
                (1, 0),
                (base.nrows() - 1, base.ncols() - 1),
            ];
            for &(i, j) in &coords {
                let mut store = gen.store.clone();
                store.get_mut(name)[[i, j]] += 1e-5;
                let up = eval(&store);
                let mut store = gen.store.clone();
                store.get_mut(name)[[i, j]] -= 1e-5;
                let down = eval(&store);
                let fd = (up - down) / 2e-5;
                let denom = fd.abs().max(g[[i, j]].abs()).max(1e-7);
                worst = worst.max((fd - g[[i, j]]).abs() / denom);
            }
            assert!(worst < 1e-4, "{name}: relative error {worst}");
        }
    }

    #[test]
    fn discretize_bins_and_masks() {
        let tape = Tape::new();
        let x = tape.leaf(array![[0.7, 0.1, 0.95, 0.5]]);
        let cuts = vec![[0.2, 0.4, 0.6, 0.8]];
        let mask = array![[1.0, 1.0, 1.0, 0.0]];
        let d = discretize(&tape, x, &cuts, &mask);
        assert_eq!(tape.value(d), array![[4.0, 1.0, 5.0, 0.0]]);
        // straight-through: gradient 1 inside the clamp bounds, 0 off-template
        let g = tape.value(tape.grad(tape.sum_all(d), &[x])[0]);
        assert_eq!(g, array![[1.0, 1.0, 1.0, 0.0]]);
    }

    #[test]
    fn discretize_boundary_bins() {
        let tape = Tape::new();
        let x = tape.constant(array![[0.05, 0.99]]);
        let cuts = vec![[0.2, 0.4, 0.6, 0.8]];
        let mask = array![[1.0, 1.0]];
        let d = tape.value(discretize(&tape, x, &cuts, &mask));
        assert_eq!(d, array![[1.0, 5.0]]);
    }

    #[test]
    fn discretize_output_range_is_exact() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x0 = Array2::from_shape_fn((5, 30), |_| rng.random_range(-2.0..7.0));
        let mask = Array2::from_shape_fn((5, 30), |_| {
            if rng.random::<f64>() < 0.5 {
                1.0
            } else {
                0.0
            }
        });
        let cuts = vec![[1.0, 2.0, 3.0, 4.0]; 5];
        let tape = Tape::new();
        let x = tape.constant(x0);
        let d = tape.value(discretize(&tape, x, &cuts, &mask));
        for i in 0..5 {
            for j in 0..30 {
                let v = d[[i, j]];
                assert!([0.0, 1.0, 2.0, 3.0, 4.0, 5.0].contains(&v));
                if mask[[i, j]] == 0.0 {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn cutpoints_strictly_increase_for_any_raw() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..4).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c = cutpoint_values(&raw);
            assert!(c[0] < c[1] && c[1] < c[2] && c[2] < c[3], "{c:?}");
        }
    }

    #[test]
    fn kl_identities() {
        let gen = Generator::new(GeneratorConfig::defaults(4, 2, GeneratorVariant::Vae), 2, 0);
        let tape = Tape::new();
        // mu = 0, sigma = 1 -> KL 0
        let mu = tape.constant(Array2::zeros((1, 3)));
        let lv = tape.constant(Array2::zeros((1, 3)));
        assert!(tape.scalar(gen.kl_term(&tape, mu, lv)).abs() < 1e-12);
        // 1-dim, mu = 1, sigma = 1 -> 0.5
        let mu = tape.constant(array![[1.0]]);
        let lv = tape.constant(array![[0.0]]);
        assert!((tape.scalar(gen.kl_term(&tape, mu, lv)) - 0.5).abs() < 1e-12);
        // 1-dim, mu = 0, sigma^2 = e -> (e-2)/2 ~= 0.359141
        let mu = tape.constant(array![[0.0]]);
        let lv = tape.constant(array![[1.0]]);
        let expect = (1f64.exp() - 2.0) / 2.0;
        assert!((tape.scalar(gen.kl_term(&tape, mu, lv)) - expect).abs() < 1e-9);
        assert!((expect - 0.359141).abs() < 1e-6);
    }

    #[test]
    fn vae_mean_path_is_repeatable_and_conditioning_active() {
        let gen = Generator::new(
            GeneratorConfig {
                n_items: 10,
                feat_dim: 3,
                latent_dim: 4,
                hidden: 8,
                cond_dim: 3,
                film_layers: 1,
                variant: GeneratorVariant::Vae,
            },
            2,
            5,
        );
        let rows = Array2::from_elem((2, 10), 3.0);
        let noise = Array2::zeros((2, 4));
        let f1 = array![[0.1, 0.9, 0.4], [0.8, 0.2, 0.6]];
        let run = |feats: &Array2<f64>| {
            let tape = Tape::new();
            let bound = gen.store.bind(&tape);
            let rv = tape.constant(rows.clone());
            let fv = tape.constant(feats.clone());
            let (cont, _, _) = gen.forward_continuous(&tape, &bound, rv, fv, Some(&noise), None);
            tape.value(cont)
        };
        let a = run(&f1);
        let b = run(&f1);
        assert_eq!(a, b, "zero-noise decode must be deterministic");
        // different side features give different outputs (FiLM active)
        let f2 = array![[0.9, 0.1, 0.2], [0.3, 0.7, 0.5]];
        let c = run(&f2);
        assert_ne!(a, c);
    }

    #[test]
    fn ae_variant_ignores_noise() {
        let gen = Generator::new(
            GeneratorConfig {
                n_items: 8,
                feat_dim: 2,
                latent_dim: 3,
                hidden: 6,
                cond_dim: 2,
                film_layers: 1,
                variant: GeneratorVariant::AeBaseline,
            },
            2,
            6,
        );
        let rows = Array2::from_elem((1, 8), 4.0);
        let feats = Array2::from_elem((1, 2), 0.5);
        let run = |noise: Array2<f64>| {
            let tape = Tape::new();
            let bound = gen.store.bind(&tape);
            let rv = tape.constant(rows.clone());
            let fv = tape.constant(feats.clone());
            let (cont, _, _) = gen.forward_continuous(&tape, &bound, rv, fv, Some(&noise), None);
            tape.value(cont)
        };
        let a = run(Array2::zeros((1, 3)));
        let b = run(Array2::from_elem((1, 3), 2.5));
        assert_eq!(a, b);
    }

    #[test]
    fn pretrain_vae_loss_tracks_downward_on_toy() {
        let ds = toy_dataset(50, 20, 21);
        let templates =
            crate::data::sample_templates(&ds, 8, SamplingStrategy::Uniform, 10, 0, 3).unwrap();
        let mut gen = Generator::new(
            GeneratorConfig {
                n_items: 20,
                feat_dim: 4,
                latent_dim: 8,
                hidden: 32,
                cond_dim: 4,
                film_layers: 2,
                variant: GeneratorVariant::Vae,
            },
            8,
            7,
        );
        let trace = gen.pretrain(&ds, &templates, 10, 1e-3, 42).unwrap();
        assert_eq!(trace.len(), 10);
        for w in trace.windows(2) {
            assert!(
                w[1] <= w[0] * 1.05,
                "loss rose beyond tolerance: {} -> {}",
                w[0],
                w[1]
            );
        }
        assert!(trace.last().unwrap() < &trace[0]);
    }

    #[test]
    fn generate_respects_budget_mask_and_determinism() {
        let ds = toy_dataset(30, 15, 8);
        let templates =
            crate::data::sample_templates(&ds, 6, SamplingStrategy::Uniform, 5, 2, 4).unwrap();
        let gen = Generator::new(
            GeneratorConfig {
                n_items: 15,
                feat_dim: 4,
                latent_dim: 6,
                hidden: 16,
                cond_dim: 4,
                film_layers: 2,
                variant: GeneratorVariant::Vae,
            },
            6,
            9,
        );
        let pool_users: Vec<usize> = (0..10).collect();
        let pool = SideFeatureTable::new(
            ds.user_features.rows.slice(ndarray::s![0..10, ..]).to_owned(),
        );
        let b1 = gen.generate(&templates, &pool, &pool_users, 2, 77).unwrap();
        let b2 = gen.generate(&templates, &pool, &pool_users, 2, 77).unwrap();
        assert_eq!(b1, b2, "same seed must give identical batches");
        assert_eq!(b1.n_fakes(), 6);
        for k in 0..b1.n_fakes() {
            let row = b1.ratings.row(k);
            assert!(row.len() <= 5 + 1);
            assert_eq!(b1.ratings.get(k, 2), 5);
            // nonzero pattern within template pattern + target
            for &(i, _) in row {
                let in_template = templates.rows[k].iter().any(|&(ti, _)| ti == i);
                assert!(in_template || i == 2);
            }
            assert!(pool_users.contains(&b1.provenance[k]));
        }
        let b3 = gen.generate(&templates, &pool, &pool_users, 2, 78).unwrap();
        assert_ne!(b1, b3, "different seed should vary the batch");
    }
}
