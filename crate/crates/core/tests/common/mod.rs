#![allow(dead_code)]

pub mod oracles;

use mult::autograd::relative_error;
use mult::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-scale..scale)).collect())
}

/// `Σ w ⊙ v` with fixed random weights, so every output element matters.
pub fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random_tensor(tape.shape(v), seed, 1.0));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

/// Central difference of `f` along `dir`, Richardson-extrapolated.
pub fn directional_derivative(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    dir: &[f64],
    h: f64,
) -> f64 {
    let mut at = |t: f64| {
        let moved = Tensor::from_vec(
            x.shape(),
            x.data().iter().zip(dir).map(|(a, d)| a + t * d).collect(),
        );
        f(&moved)
    };
    let coarse = (at(h) - at(-h)) / (2.0 * h);
    let fine = (at(h / 2.0) - at(-h / 2.0)) / h;
    (4.0 * fine - coarse) / 3.0
}

/// Worst relative error of `grad · d` against finite differences over a
/// few random unit directions.
pub fn directional_check(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    grad: &Tensor,
    seed: u64,
    h: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let mut dir = random_tensor(x.shape(), seed + k, 1.0).into_data();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let analytic: f64 = grad.data().iter().zip(&dir).map(|(g, d)| g * d).sum();
        let numeric = directional_derivative(f, x, &dir, h);
        worst = worst.max(relative_error(analytic, numeric));
    }
    worst
}

pub fn set_param(store: &mut mult::params::ParamStore, name: &str, values: &[f64]) {
    let id = store
        .id(name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    let shape = store.get(id).value.shape().to_vec();
    store.get_mut(id).value = Tensor::from_vec(&shape, values.to_vec());
}

/// Runs `case` through the library's windowed shared attention, returning
/// the attention map and each task's output.
pub fn two_token_model(case: &oracles::TwoTokenCase) -> ([[f64; 2]; 2], Vec<[f64; 2]>) {
    use mult::decoder::shared_attention_windows;
    use mult::nn::{QueryKey, ValueOut};
    use mult::params::{Initializer, ParamStore};
    use mult::windowing::RelPosBias;

    let mut store = ParamStore::new();
    let mut init = Initializer::new(0);
    let qk = QueryKey::new(&mut store, &mut init, "ref", 1, &RelPosBias::new(1, 1));
    let vos: Vec<ValueOut> = (0..case.tasks.len())
        .map(|t| ValueOut::new(&mut store, &mut init, &format!("t{t}"), 1))
        .collect();
    set_param(&mut store, "ref.q.weight", &[case.wq]);
    set_param(&mut store, "ref.q.bias", &[case.bq]);
    set_param(&mut store, "ref.k.weight", &[case.wk]);
    set_param(&mut store, "ref.k.bias", &[case.bk]);
    for (t, (_, wv, bv, wo, bo)) in case.tasks.iter().enumerate() {
        set_param(&mut store, &format!("t{t}.v.weight"), &[*wv]);
        set_param(&mut store, &format!("t{t}.v.bias"), &[*bv]);
        set_param(&mut store, &format!("t{t}.out.weight"), &[*wo]);
        set_param(&mut store, &format!("t{t}.out.bias"), &[*bo]);
    }
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let sa = tape.constant(Tensor::from_vec(&[1, 2, 1], case.x_sa.to_vec()));
    let streams: Vec<_> = case
        .tasks
        .iter()
        .map(|(x, ..)| tape.constant(Tensor::from_vec(&[1, 2, 1], x.to_vec())))
        .collect();
    let b = tape.constant(Tensor::from_vec(
        &[1, 2, 2],
        case.bias.iter().flatten().copied().collect(),
    ));
    let refs: Vec<&ValueOut> = vos.iter().collect();
    let out = shared_attention_windows(&mut tape, &p, sa, &streams, &qk, &refs, 1, b).unwrap();
    let att = tape.value(out.attention);
    let a = std::array::from_fn(|i| std::array::from_fn(|j| att.at(&[0, 0, i, j])));
    let ys = out
        .outputs
        .iter()
        .map(|&y| std::array::from_fn(|i| tape.value(y).data()[i]))
        .collect();
    (a, ys)
}
