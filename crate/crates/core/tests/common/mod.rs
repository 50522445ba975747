#![allow(dead_code)]

pub mod checks;
pub mod fixtures;
pub mod reference;

use anda::data::{AttributeRecord, AttributeSchema, Basket, CategoricalAttribute, UserSequence};
use anda::model::{AblationFlags, AnDaConfig};
use anda::tensor::{Tape, Tensor, Var};
use rand::Rng;

pub fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

pub const H: f64 = 1e-5;

/// Central differences of a scalar function over every entry of `inputs`,
/// compared with the tape's gradients. `f` builds a scalar from input leaves.
/// Returns the worst relative error across inputs.
pub fn check_op(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.param(x.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|g| g.data().to_vec())
            .unwrap_or(vec![0.0; x.numel()]);
        let mut numeric = vec![0.0; x.numel()];
        let mut ins = inputs.to_vec();
        for j in 0..x.numel() {
            let orig = x.data()[j];
            ins[i].data_mut()[j] = orig + H;
            let up = eval(&ins);
            ins[i].data_mut()[j] = orig - H;
            let down = eval(&ins);
            ins[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Weighted sum `Σ w ⊙ out` with fixed random weights, so every output
/// entry gets a distinct upstream gradient.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(tape.shape(out), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

pub fn tiny_schema() -> AttributeSchema {
    AttributeSchema {
        categorical: vec![
            CategoricalAttribute {
                name: "tier".into(),
                values: vec!["a".into(), "b".into(), "c".into()],
            },
            CategoricalAttribute {
                name: "member".into(),
                values: vec!["no".into(), "yes".into()],
            },
        ],
        numerical: vec!["income".into()],
    }
}

/// `|V| = 6, D = 4, T = 4, k = m = 1`.
pub fn tiny_config() -> AnDaConfig {
    AnDaConfig {
        num_items: 6,
        embed_dim: 4,
        max_len: 4,
        period: 3,
        vmax: 3,
        num_cat_values: 5,
        num_cat_attrs: 2,
        num_numerical: 1,
        time_heads: vec![1],
        intra_heads: vec![1],
        dropout: 0.0,
        flags: AblationFlags::default(),
        time_aware_padding: true,
    }
}

/// A random user over steps `0..steps` with gaps, attributes at random
/// steps, and baskets of 1..=4 items out of `num_items`.
pub fn random_user(user_id: u64, steps: i64, num_items: usize, rng: &mut impl Rng) -> UserSequence {
    let mut baskets = vec![];
    let mut attributes = vec![];
    for t in 0..steps {
        if rng.gen_bool(0.7) || (t == steps - 1 && baskets.len() < 2) {
            let n = rng.gen_range(1..=4);
            let items = (0..n).map(|_| rng.gen_range(0..num_items)).collect();
            baskets.push(Basket::new(t, items, num_items).unwrap());
        }
        if rng.gen_bool(0.6) {
            attributes.push(AttributeRecord {
                time_index: t,
                categorical: vec![rng.gen_range(0..3), 3 + rng.gen_range(0..2)],
                numerical: vec![rng.gen_range(-1.0..1.0)],
            });
        }
    }
    UserSequence {
        user_id,
        baskets,
        attributes,
    }
}
