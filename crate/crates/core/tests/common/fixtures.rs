//! Fixtures shared by the causality, training and acceptance suites.

use anda::data::synth::{synth_generate, PeriodicPattern, SynthConfig};
use anda::data::{Dataset, EvalInstance, UserSequence};
use anda::encoder::{encode_training, EncodedSequence};
use anda::model::{make_variant, AblationFlags, AnDaConfig, AnDaModel, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{random_user, tiny_config};

/// Rewrites every input at positions after `t`, including which positions
/// hold a basket or attribute record.
pub fn perturb_after(
    e: &EncodedSequence,
    t: usize,
    cfg: &anda::model::AnDaConfig,
    rng: &mut impl Rng,
) -> EncodedSequence {
    let mut p = e.clone();
    let vmax = cfg.vmax;
    let nc = cfg.num_cat_attrs;
    let nn = cfg.num_numerical;
    for pos in t + 1..e.len {
        p.presence[pos] = rng.gen_bool(0.5);
        p.attr_presence[pos] = rng.gen_bool(0.5);
        for s in 0..vmax {
            p.item_ids[pos * vmax + s] = rng.gen_range(0..cfg.num_items);
            p.item_slots[pos * vmax + s] = s == 0 || rng.gen_bool(0.5);
        }
        for a in 0..nc {
            p.cat_ids[pos * nc + a] = if a == 0 {
                rng.gen_range(0..3)
            } else {
                3 + rng.gen_range(0..2)
            };
        }
        for a in 0..nn {
            p.num_values[pos * nn + a] = rng.gen_range(-5.0..5.0);
        }
    }
    p
}

/// Scores `cases` random sequences, perturbs everything after a random step
/// `t` and returns the cases whose scores at or before `t` changed.
pub fn leaking_cases(cases: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut base = tiny_config();
    base.max_len = 8;
    base.time_heads = vec![2, 1];
    base.intra_heads = vec![1, 2];
    base.dropout = 0.3;
    let mut leaks = vec![];
    for case in 0..cases {
        let variant = [
            Variant::Full,
            Variant::P,
            Variant::B,
            Variant::BMinus,
            Variant::I,
        ][case % 5];
        let cfg = make_variant(&base, variant);
        let model = AnDaModel::new(cfg.clone(), case as u64).unwrap();
        let user = random_user(case as u64, 10, cfg.num_items, &mut rng);
        let e = encode_training(&user, &cfg.layout()).unwrap();
        let t = rng.gen_range(0..cfg.max_len - 1);
        let p = perturb_after(&e, t, &cfg, &mut rng);
        let a = model.scores(&[e]).unwrap();
        let b = model.scores(&[p]).unwrap();
        let n = (t + 1) * cfg.num_items;
        if a.data()[..n]
            .iter()
            .zip(&b.data()[..n])
            .any(|(x, y)| x.to_bits() != y.to_bits())
        {
            leaks.push(format!("case {case} ({variant}) t={t}"));
        }
    }
    leaks
}

pub fn overfit_setup() -> (AnDaModel, Vec<EncodedSequence>, EvalInstance) {
    let cfg = SynthConfig {
        num_users: 1,
        num_items: 60,
        num_steps: 30,
        basket_prob: 1.0,
        noise_items: 0,
        periodic: Some(PeriodicPattern {
            period: 7,
            items_per_user: 3,
            pool_size: 20,
        }),
        copurchase: None,
        attribute_switch: None,
    };
    let (data, _) = synth_generate(&cfg, 3).unwrap();
    let user = data.users[0].clone();
    let n = user.baskets.len();
    let inst = EvalInstance {
        context: UserSequence {
            baskets: user.baskets[..n - 1].to_vec(),
            ..user.clone()
        },
        target: user.baskets[n - 1].clone(),
    };
    let mc = AnDaConfig {
        num_items: 60,
        embed_dim: 16,
        max_len: 30,
        period: 7,
        vmax: Dataset::max_basket_size(&data.users),
        num_cat_values: 0,
        num_cat_attrs: 0,
        num_numerical: 0,
        time_heads: vec![1],
        intra_heads: vec![1],
        dropout: 0.0,
        flags: AblationFlags::default(),
        time_aware_padding: true,
    };
    let model = AnDaModel::new(mc, 1).unwrap();
    let train_set = vec![encode_training(&user, &model.layout()).unwrap()];
    (model, train_set, inst)
}
