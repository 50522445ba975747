//! Central-difference gradient checks shared by the gradient suite and the
//! acceptance run. Each returns `(name, relative error)` pairs.

use anda::attention::{build_masks, mhsab, ForwardCtx, MhsabParams};
use anda::encoder::{encode_training, EncodedSequence};
use anda::model::{bce_loss, make_variant, AnDaConfig, AnDaModel, Variant};
use anda::params::{Binder, ParamStore};
use anda::tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_op, project, rand_tensor, random_user, rel_err, tiny_config, H};

pub const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

type Op<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Var + 'a>;

/// Every tape primitive, each behind a random projection to a scalar.
pub fn primitive_errors() -> Vec<(String, f64)> {
    let r = &mut rng(1);
    let a = rand_tensor(&[2, 3, 4], r);
    let w = rand_tensor(&[4, 5], r);
    let wt = rand_tensor(&[5, 4], r);
    let k = rand_tensor(&[2, 5, 4], r);
    let m = rand_tensor(&[2, 4, 3], r);
    let x = rand_tensor(&[3, 5], r);
    let y = rand_tensor(&[3, 5], r);
    let row = rand_tensor(&[5], r);
    let mut masked = rand_tensor(&[2, 3, 6], r);
    // A masked entry as produced by the attention penalty.
    masked.data_mut()[1] = -1e9;
    let g = rand_tensor(&[6], r);
    let b = rand_tensor(&[6], r);
    let ln_in = rand_tensor(&[2, 3, 6], r);
    let narrow = rand_tensor(&[2, 3, 2], r);
    let wide = rand_tensor(&[2, 3, 4], r);
    let table = rand_tensor(&[5, 3], r);
    let z = rand_tensor(&[3, 4], r);
    let target = Tensor::new(
        vec![3, 4],
        vec![1., 0., 0., 1., 0., 0., 0., 0., 1., 1., 1., 0.],
    )
    .unwrap();

    let cases: Vec<(&str, Vec<Tensor>, Op)> = vec![
        (
            "matmul",
            vec![a.clone(), w],
            Box::new(|t, v| {
                let o = t.matmul(v[0], v[1]).unwrap();
                project(t, o, 7)
            }),
        ),
        (
            "matmul_nt",
            vec![a.clone(), wt],
            Box::new(|t, v| {
                let o = t.matmul_nt(v[0], v[1]).unwrap();
                project(t, o, 7)
            }),
        ),
        (
            "bmm_t",
            vec![a.clone(), k],
            Box::new(|t, v| {
                let o = t.bmm(v[0], v[1], true).unwrap();
                project(t, o, 8)
            }),
        ),
        (
            "bmm",
            vec![a, m],
            Box::new(|t, v| {
                let o = t.bmm(v[0], v[1], false).unwrap();
                project(t, o, 9)
            }),
        ),
        (
            "add",
            vec![x.clone(), y.clone()],
            Box::new(|t, v| {
                let o = t.add(v[0], v[1]).unwrap();
                project(t, o, 1)
            }),
        ),
        (
            "add_row",
            vec![x.clone(), row],
            Box::new(|t, v| {
                let o = t.add_row(v[0], v[1]).unwrap();
                project(t, o, 2)
            }),
        ),
        (
            "mul",
            vec![x.clone(), y],
            Box::new(|t, v| {
                let o = t.mul(v[0], v[1]).unwrap();
                project(t, o, 3)
            }),
        ),
        (
            "scale",
            vec![x.clone()],
            Box::new(|t, v| {
                let o = t.scale(v[0], -1.7);
                project(t, o, 4)
            }),
        ),
        (
            "relu",
            vec![x.clone()],
            Box::new(|t, v| {
                let o = t.relu(v[0]);
                project(t, o, 5)
            }),
        ),
        (
            "sigmoid",
            vec![x.clone()],
            Box::new(|t, v| {
                let o = t.sigmoid(v[0]);
                project(t, o, 6)
            }),
        ),
        ("sum", vec![x.clone()], Box::new(|t, v| t.sum(v[0]))),
        (
            "dropout",
            vec![x],
            Box::new(|t, v| {
                let o = t.dropout(v[0], 0.4, true, &mut rng(99)).unwrap();
                project(t, o, 7)
            }),
        ),
        (
            "softmax_last",
            vec![masked],
            Box::new(|t, v| {
                let o = t.softmax_last(v[0]);
                project(t, o, 1)
            }),
        ),
        (
            "layer_norm",
            vec![ln_in, g, b],
            Box::new(|t, v| {
                let o = t.layer_norm(v[0], v[1], v[2]).unwrap();
                project(t, o, 2)
            }),
        ),
        (
            "concat_last",
            vec![narrow, wide.clone()],
            Box::new(|t, v| {
                let o = t.concat_last(&[v[0], v[1], v[0]]).unwrap();
                project(t, o, 1)
            }),
        ),
        (
            "slice_last",
            vec![wide.clone()],
            Box::new(|t, v| {
                let o = t.slice_last(v[0], 1, 2).unwrap();
                project(t, o, 2)
            }),
        ),
        (
            "reshape",
            vec![wide],
            Box::new(|t, v| {
                let o = t.reshape(v[0], &[4, 6]).unwrap();
                project(t, o, 3)
            }),
        ),
        (
            "gather_rows",
            vec![table],
            Box::new(|t, v| {
                let o = t.gather_rows(v[0], &[4, 0, 4, 2, 4]).unwrap();
                project(t, o, 4)
            }),
        ),
        (
            "bce_with_logits",
            vec![z],
            Box::new(move |t, v| {
                t.bce_with_logits(v[0], &target, &[1.0, 0.0, 2.0], 0.5)
                    .unwrap()
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| (name.to_string(), check_op(&inputs, &*f)))
        .collect()
}

/// Checks every parameter in `store` against central differences of `loss`.
pub fn check_params(
    store: &ParamStore,
    loss: &dyn Fn(&ParamStore) -> (Tape, Var, Vec<Option<Var>>),
) -> Vec<(String, f64)> {
    let (tape, out, vars) = loss(store);
    let grads = tape.backward(out).unwrap();
    let value = |s: &ParamStore| {
        let (t, o, _) = loss(s);
        t.value(o).data()[0]
    };
    let mut results = vec![];
    let mut probe = store.clone();
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic = vars[id.index()]
            .and_then(|v| grads.get(v))
            .map(|g| g.data().to_vec())
            .unwrap_or(vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + H;
            let up = value(&probe);
            probe.get_mut(id).data_mut()[j] = orig - H;
            let down = value(&probe);
            probe.get_mut(id).data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * H);
        }
        results.push((store.name(id).to_string(), rel_err(&analytic, &numeric)));
    }
    results
}

/// One attention block with 1, 2 and 3 heads, causal and full masks, with
/// and without dropout: every parameter plus the block input.
pub fn block_errors() -> Vec<(String, f64)> {
    let r = &mut rng(5);
    let (b, l, c) = (2, 4, 6);
    let mut out = vec![];
    for (heads, causal, dropout) in [(1, true, 0.0), (2, false, 0.0), (3, true, 0.3)] {
        let mut store = ParamStore::new();
        let p = MhsabParams::register(&mut store, "blk", c, heads, dropout, r).unwrap();
        let x = rand_tensor(&[b, l, c], r);
        let presence = vec![true, false, true, true, true, true, false, true];
        let mask = build_masks(&presence, l, causal);
        let ctx = || {
            if dropout > 0.0 {
                ForwardCtx::train(11, 3)
            } else {
                ForwardCtx::eval()
            }
        };
        let tag = format!("heads={heads} causal={causal} dropout={dropout}");
        let per_param = check_params(&store, &|s| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(s);
            let xv = tape.constant(x.clone());
            let y = mhsab(&mut tape, &mut binder, xv, &p, &mask, &mut ctx(), "blk").unwrap();
            let o = project(&mut tape, y, 21);
            let vars = s.ids().map(|id| Some(binder.var(&mut tape, id))).collect();
            (tape, o, vars)
        });
        out.extend(
            per_param
                .into_iter()
                .map(|(n, e)| (format!("{tag}: {n}"), e)),
        );
        let err = check_op(&[x.clone()], &|t, v| {
            let mut binder = Binder::new(&store);
            let y = mhsab(t, &mut binder, v[0], &p, &mask, &mut ctx(), "blk").unwrap();
            project(t, y, 21)
        });
        out.push((format!("{tag}: input"), err));
    }
    out
}

pub fn tiny_batch(seed: u64, cfg: &AnDaConfig) -> Vec<EncodedSequence> {
    let r = &mut rng(seed);
    (0..3)
        .map(|u| {
            let user = random_user(u, 7, cfg.num_items, r);
            encode_training(&user, &cfg.layout()).unwrap()
        })
        .collect()
}

pub fn model_loss<'a>(
    model: &'a AnDaModel,
    batch: &[EncodedSequence],
    train: bool,
) -> impl Fn(&ParamStore) -> (Tape, Var, Vec<Option<Var>>) + 'a {
    let batch = batch.to_vec();
    move |s: &ParamStore| {
        let mut m = model.clone();
        m.params = s.clone();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&m.params);
        let mut ctx = if train {
            ForwardCtx::train(5, 1)
        } else {
            ForwardCtx::eval()
        };
        let out = m.forward(&mut tape, &mut binder, &batch, &mut ctx).unwrap();
        let loss = bce_loss(&mut tape, out.logits, &batch, m.config().num_items).unwrap();
        let vars = m
            .params
            .ids()
            .map(|id| Some(binder.var(&mut tape, id)))
            .collect();
        (tape, loss, vars)
    }
}

/// Every parameter of `variant` on the tiny config, through the full
/// forward pass and loss.
pub fn model_errors(variant: Variant, dropout: f64, seed: u64) -> Vec<(String, f64)> {
    let mut cfg = make_variant(&tiny_config(), variant);
    cfg.dropout = dropout;
    let model = AnDaModel::new(cfg.clone(), seed).unwrap();
    let batch = tiny_batch(seed + 14, &cfg);
    let loss = model_loss(&model, &batch, dropout > 0.0);
    let errors = check_params(&model.params, &loss);
    errors
        .into_iter()
        .map(|(n, e)| (format!("{variant} dropout={dropout}: {n}"), e))
        .collect()
}

/// All of the above.
pub fn all_gradient_errors() -> Vec<(String, f64)> {
    let mut out = primitive_errors();
    out.extend(block_errors());
    out.extend(model_errors(Variant::Full, 0.0, 3));
    out.extend(model_errors(Variant::Full, 0.2, 4));
    for v in [
        Variant::P,
        Variant::B,
        Variant::BMinus,
        Variant::T,
        Variant::I,
    ] {
        out.extend(model_errors(v, 0.0, 5));
    }
    out
}
