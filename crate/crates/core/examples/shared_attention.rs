//! One shared-attention layer over three task streams: the attention map
//! comes from the skip feature once and mixes every task's values.

use mult::decoder::shared_attention;
use mult::nn::{QueryKey, StageGeometry, ValueOut};
use mult::params::{Initializer, ParamStore};
use mult::{Result, Tape, Tensor};

fn main() -> Result<()> {
    let (side, window, shift, heads, width) = (8, 4, 2, 2, 8);
    let geom = StageGeometry::new(side, window, shift, heads)?;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(0);
    let qk = QueryKey::new(&mut store, &mut init, "reference", width, &geom.rel);
    let vos: Vec<ValueOut> = (0..3)
        .map(|t| ValueOut::new(&mut store, &mut init, &format!("task{t}"), width))
        .collect();

    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let shape = [1, side, side, width];
    let x_sa = tape.constant(init.trunc_normal(&shape, 1.0));
    let streams: Vec<_> = (0..3)
        .map(|_| tape.constant(init.trunc_normal(&shape, 1.0)))
        .collect();
    let vo_refs: Vec<&ValueOut> = vos.iter().collect();
    let out = shared_attention(
        &mut tape, &p, x_sa, &streams, &qk, &vo_refs, heads, &geom, true,
    )?;

    let attn = tape.value(out.attention);
    let n = window * window;
    let worst_row = attn
        .data()
        .chunks(n)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    println!(
        "attention {:?}, worst |row sum - 1| = {worst_row:.1e}",
        attn.shape()
    );
    for (t, &y) in out.outputs.iter().enumerate() {
        let (x, y) = (tape.value(streams[t]), tape.value(y));
        let delta = Tensor::from_vec(
            x.shape(),
            y.data().iter().zip(x.data()).map(|(a, b)| a - b).collect(),
        );
        println!(
            "task {t}: output {:?}, mean |update| {:.4}",
            y.shape(),
            delta.data().iter().map(|v| v.abs()).sum::<f64>() / delta.numel() as f64
        );
    }

    let mut total = None;
    for &y in &out.outputs {
        let s = tape.sum(y);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let grads = tape.backward(total.expect("three streams"))?;
    let gq = grads.wrt(p.var(qk.q.weight));
    println!(
        "reference query weight gradient norm {:.4}",
        gq.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    );
    Ok(())
}
