//! Plain scalar-loop references for attention, loss and ranking metrics,
//! plus random-instance drivers that compare them with the library.

use anda::attention::{build_masks, mhsa, AttentionMask, ForwardCtx, MhsabParams};
use anda::data::Basket;
use anda::encoder::EncodedSequence;
use anda::eval::{average_precision, hit_ratio, ndcg, rank_items};
use anda::model::{bce_loss, intra};
use anda::params::{Binder, ParamId, ParamStore};
use anda::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use super::rand_tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|r| t.data()[r * cols..(r + 1) * cols].to_vec())
        .collect()
}

pub fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for x in 0..k {
                s += a[i][x] * b[x][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn param(store: &ParamStore, id: ParamId) -> Mat {
    let t = store.get(id);
    let s = t.shape();
    if s.len() == 1 {
        vec![t.data().to_vec()]
    } else {
        to_mat(t, s[0], s[1])
    }
}

/// Multi-head attention for one sequence `x: [L][C]`.
pub fn mhsa_ref(
    x: &Mat,
    store: &ParamStore,
    p: &MhsabParams,
    allowed: &dyn Fn(usize, usize) -> bool,
    live: &dyn Fn(usize) -> bool,
) -> Mat {
    let l = x.len();
    let c = p.width;
    let mut cat = vec![Vec::new(); l];
    for h in 0..p.heads {
        let q = mat_mul(x, &param(store, p.w_query[h]));
        let k = mat_mul(x, &param(store, p.w_key[h]));
        let v = mat_mul(x, &param(store, p.w_value[h]));
        for i in 0..l {
            let mut logits: Vec<f64> = (0..l)
                .map(|j| {
                    let dot: f64 = (0..c).map(|d| q[i][d] * k[j][d]).sum();
                    dot / (c as f64).sqrt() + if allowed(i, j) { 0.0 } else { -1e9 }
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|s| (s - mx).exp()).sum();
            for s in logits.iter_mut() {
                *s = (*s - mx).exp() / z * if live(i) { 1.0 } else { 0.0 };
            }
            for d in 0..c {
                cat[i].push((0..l).map(|j| logits[j] * v[j][d]).sum());
            }
        }
    }
    mat_mul(&cat, &param(store, p.w_concat))
}

fn layer_norm_ref(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + 1e-8).sqrt() * g[j] + b[j])
        .collect()
}

pub fn mhsab_ref(
    x: &Mat,
    store: &ParamStore,
    p: &MhsabParams,
    allowed: &dyn Fn(usize, usize) -> bool,
    live: &dyn Fn(usize) -> bool,
) -> Mat {
    let a = mhsa_ref(x, store, p, allowed, live);
    let (g1, b1) = (param(store, p.ln1_gain), param(store, p.ln1_bias));
    let (g2, b2) = (param(store, p.ln2_gain), param(store, p.ln2_bias));
    let (w1, fb1) = (param(store, p.ffn_w1), param(store, p.ffn_b1));
    let (w2, fb2) = (param(store, p.ffn_w2), param(store, p.ffn_b2));
    x.iter()
        .zip(&a)
        .map(|(xi, ai)| {
            let r: Vec<f64> = xi.iter().zip(ai).map(|(u, v)| u + v).collect();
            let y = layer_norm_ref(&r, &g1[0], &b1[0]);
            let h: Vec<f64> = mat_mul(&vec![y.clone()], &w1)[0]
                .iter()
                .zip(&fb1[0])
                .map(|(u, b)| (u + b).max(0.0))
                .collect();
            let f: Vec<f64> = mat_mul(&vec![h], &w2)[0]
                .iter()
                .zip(&fb2[0])
                .map(|(u, b)| u + b)
                .collect();
            let r2: Vec<f64> = y.iter().zip(&f).map(|(u, v)| u + v).collect();
            layer_norm_ref(&r2, &g2[0], &b2[0])
        })
        .collect()
}

fn random_mask(rng: &mut impl Rng, b: usize, l: usize) -> AttentionMask {
    let presence: Vec<bool> = (0..b * l).map(|_| rng.gen_bool(0.75)).collect();
    build_masks(&presence, l, rng.gen_bool(0.5))
}

/// One random multi-head attention instance; returns the largest absolute
/// deviation from the reference.
pub fn mhsa_case(rng: &mut impl Rng) -> f64 {
    let (b, l, c, heads) = (
        rng.gen_range(1..=2),
        rng.gen_range(1..=5),
        rng.gen_range(2..=5),
        rng.gen_range(1..=3),
    );
    let mut store = ParamStore::new();
    let p = MhsabParams::register(&mut store, "m", c, heads, 0.0, rng).unwrap();
    let x = rand_tensor(&[b, l, c], rng);
    let mask = random_mask(rng, b, l);
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store);
    let xv = tape.constant(x.clone());
    let y = mhsa(
        &mut tape,
        &mut binder,
        xv,
        &p,
        &mask,
        &mut ForwardCtx::eval(),
        "m",
    )
    .unwrap();
    let got = tape.value(y).data();
    let mut worst: f64 = 0.0;
    for s in 0..b {
        let xs = to_mat(
            &Tensor::new(vec![l * c], x.data()[s * l * c..(s + 1) * l * c].to_vec()).unwrap(),
            l,
            c,
        );
        let want = mhsa_ref(&xs, &store, &p, &|i, j| mask.is_allowed(s, i, j), &|i| {
            mask.live_queries[s * l + i]
        });
        for i in 0..l {
            for d in 0..c {
                worst = worst.max((got[(s * l + i) * c + d] - want[i][d]).abs());
            }
        }
    }
    worst
}

/// One random intra-basket instance (1 or 2 stacked blocks).
pub fn intra_case(rng: &mut impl Rng) -> f64 {
    let rows = rng.gen_range(1..=4);
    let tokens = rng.gen_range(2..=5);
    let d = rng.gen_range(2..=4);
    let depth = rng.gen_range(1..=2);
    let mut store = ParamStore::new();
    let blocks: Vec<MhsabParams> = (0..depth)
        .map(|i| {
            let heads = rng.gen_range(1..=2);
            MhsabParams::register(&mut store, &format!("b{i}"), d, heads, 0.0, rng).unwrap()
        })
        .collect();
    let x = rand_tensor(&[rows, tokens * d], rng);
    let presence: Vec<bool> = (0..rows * tokens).map(|_| rng.gen_bool(0.7)).collect();
    let mut tape = Tape::new();
    let mut binder = Binder::new(&store);
    let xv = tape.constant(x.clone());
    let y = intra(
        &mut tape,
        &mut binder,
        xv,
        &blocks,
        &presence,
        tokens,
        d,
        &mut ForwardCtx::eval(),
        "intra",
    )
    .unwrap();
    let got = tape.value(y).data();
    let mut worst: f64 = 0.0;
    for r in 0..rows {
        let mut h: Mat = (0..tokens)
            .map(|t| x.data()[r * tokens * d + t * d..r * tokens * d + (t + 1) * d].to_vec())
            .collect();
        let real = |t: usize| presence[r * tokens + t];
        for blk in &blocks {
            h = mhsab_ref(&h, &store, blk, &|i, j| real(i) && real(j), &real);
        }
        for t in 0..tokens {
            for k in 0..d {
                let want = if real(t) { h[t][k] } else { 0.0 };
                worst = worst.max((got[r * tokens * d + t * d + k] - want).abs());
            }
        }
    }
    worst
}

fn log_sigmoid(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).ln()
}

/// One random loss instance; `None` when it drew no target at all.
pub fn bce_case(rng: &mut impl Rng) -> Option<f64> {
    let b = rng.gen_range(1..=3);
    let t = rng.gen_range(1..=4);
    let v = rng.gen_range(2..=7);
    let batch: Vec<EncodedSequence> = (0..b)
        .map(|u| {
            let presence: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.7)).collect();
            let targets = presence
                .iter()
                .map(|&p| {
                    (p && rng.gen_bool(0.8)).then(|| {
                        let n = rng.gen_range(1..=v);
                        let items = (0..n).map(|_| rng.gen_range(0..v)).collect();
                        Basket::new(0, items, v).unwrap().items().to_vec()
                    })
                })
                .collect();
            EncodedSequence {
                user_id: u as u64,
                len: t,
                steps: vec![None; t],
                presence,
                item_ids: vec![],
                item_slots: vec![],
                attr_presence: vec![false; t],
                cat_ids: vec![],
                num_values: vec![],
                targets,
            }
        })
        .collect();
    if batch.iter().all(|e| e.num_targets() == 0) {
        return None;
    }
    let z: Vec<f64> = (0..b * t * v).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let mut tape = Tape::new();
    let zv = tape.constant(Tensor::new(vec![b * t, v], z.clone()).unwrap());
    let loss = bce_loss(&mut tape, zv, &batch, v).unwrap();
    let got = tape.value(loss).data()[0];

    let mut want = 0.0;
    for (u, e) in batch.iter().enumerate() {
        for p in 0..t {
            let Some(next) = &e.targets[p] else { continue };
            if !e.presence[p] {
                continue;
            }
            for i in 0..v {
                let zi = z[(u * t + p) * v + i];
                want -= if next.contains(&i) {
                    log_sigmoid(zi)
                } else {
                    log_sigmoid(-zi)
                };
            }
        }
    }
    want /= b as f64;
    Some((got - want).abs())
}

/// Selection ranking: repeatedly take the best remaining item, lowest id
/// first on ties.
pub fn rank_ref(scores: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = vec![];
    while !left.is_empty() {
        let mut best = 0;
        for j in 1..left.len() {
            if scores[left[j]] > scores[left[best]] {
                best = j;
            }
        }
        out.push(left.remove(best));
    }
    out
}

pub fn hr_ref(ranking: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for &g in truth {
        if ranking[..k.min(ranking.len())].contains(&g) {
            hits += 1;
        }
    }
    hits as f64 / k.min(truth.len()) as f64
}

pub fn ndcg_ref(ranking: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut dcg = 0.0;
    for pos in 1..=k.min(ranking.len()) {
        if truth.contains(&ranking[pos - 1]) {
            dcg += 1.0 / (pos as f64 + 1.0).log2();
        }
    }
    let mut idcg = 0.0;
    for pos in 1..=k.min(truth.len()) {
        idcg += 1.0 / (pos as f64 + 1.0).log2();
    }
    dcg / idcg
}

pub fn ap_ref(ranking: &[usize], truth: &[usize]) -> f64 {
    let mut total = 0.0;
    for pos in 1..=ranking.len() {
        if truth.contains(&ranking[pos - 1]) {
            let hits = ranking[..pos].iter().filter(|i| truth.contains(i)).count();
            total += hits as f64 / pos as f64;
        }
    }
    total / truth.len() as f64
}

/// Coarse scores (ties are common) and a random ground-truth set.
pub fn metric_instance(rng: &mut impl Rng) -> (Vec<f64>, Vec<usize>) {
    let v = rng.gen_range(1..=20);
    let scores = (0..v).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
    let mut ids: Vec<usize> = (0..v).collect();
    ids.shuffle(rng);
    let g = rng.gen_range(1..=5.min(v));
    (scores, ids[..g].to_vec())
}

/// One random ranking instance; returns the largest metric deviation, or
/// infinity when the ranking itself differs.
pub fn metric_case(rng: &mut impl Rng) -> f64 {
    let (scores, truth) = metric_instance(rng);
    let ranking = rank_items(&scores).unwrap();
    if ranking != rank_ref(&scores) {
        return f64::INFINITY;
    }
    let mut worst: f64 = (average_precision(&ranking, &truth) - ap_ref(&ranking, &truth)).abs();
    for k in [1, 3, 5, 10, 20] {
        worst = worst.max((hit_ratio(&ranking, &truth, k) - hr_ref(&ranking, &truth, k)).abs());
        worst = worst.max((ndcg(&ranking, &truth, k) - ndcg_ref(&ranking, &truth, k)).abs());
    }
    worst
}
