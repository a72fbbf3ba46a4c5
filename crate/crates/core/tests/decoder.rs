mod common;

use common::oracles::TwoTokenCase;
use common::{directional_check, random_tensor, two_token_model, weighted_sum};
use mult::config::count_parameters;
use mult::data::{generate_sample, make_batch};
use mult::decoder::{shared_attention, shared_attention_windows, unfold_2x2, PatchExpand};
use mult::encoder::{merge_neighbours, FeaturePyramid};
use mult::loss::per_task_loss_var;
use mult::nn::{QueryKey, StageGeometry, ValueOut};
use mult::params::{Initializer, ParamStore};
use mult::windowing::RelPosBias;
use mult::{ArchConfig, MultModel, Tape, Task, Tensor};

fn nano() -> ArchConfig {
    ArchConfig::preset("desk-nano").unwrap()
}

#[test]
fn patch_expand_shape_count_and_bijection() {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(0);
    let pe = PatchExpand::new(&mut store, &mut init, "pe", 8).unwrap();
    assert_eq!(store.num_scalars(), 2 * 8 * 8);
    assert!(PatchExpand::new(&mut store, &mut init, "odd", 7).is_err());
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(random_tensor(&[1, 4, 4, 8], 1, 1.0));
    let y = pe.forward(&mut tape, &p, x).unwrap();
    assert_eq!(tape.shape(y), [1, 8, 8, 4]);

    let data = random_tensor(&[2, 3, 5, 12], 2, 1.0);
    let d = tape.constant(data.clone());
    let unfolded = unfold_2x2(&mut tape, d).unwrap();
    let folded = merge_neighbours(&mut tape, unfolded).unwrap();
    assert_eq!(tape.value(folded), &data);
    // Channel block dy·2 + dx lands at spatial offset (dy, dx).
    let u = tape.value(unfolded);
    for k in 0..4 {
        for ch in 0..3 {
            assert_eq!(
                u.at(&[1, 2 * 2 + k / 2, 2 * 4 + k % 2, ch]),
                data.at(&[1, 2, 4, k * 3 + ch])
            );
        }
    }
}

#[test]
fn two_token_hand_oracle() {
    let case = TwoTokenCase::example();
    let (a, expected) = case.expected();
    let (got_a, got) = two_token_model(&case);
    for i in 0..2 {
        for j in 0..2 {
            assert!((got_a[i][j] - a[i][j]).abs() <= 1e-12);
        }
    }
    for (y, e) in got.iter().zip(&expected) {
        for i in 0..2 {
            assert!((y[i] - e[i]).abs() <= 1e-12, "{} vs {}", y[i], e[i]);
        }
    }
}

#[test]
fn single_token_attention_is_the_value_path() {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(4);
    let width = 3;
    let qk = QueryKey::new(&mut store, &mut init, "ref", width, &RelPosBias::new(1, 1));
    let vo = ValueOut::new(&mut store, &mut init, "t", width);
    let x = random_tensor(&[1, 1, width], 5, 1.0);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let sa = tape.constant(random_tensor(&[1, 1, width], 6, 1.0));
    let xv = tape.constant(x.clone());
    let b = tape.constant(Tensor::zeros(&[1, 1, 1]));
    let out = shared_attention_windows(&mut tape, &p, sa, &[xv], &qk, &[&vo], 1, b).unwrap();
    assert_eq!(tape.value(out.attention).data(), &[1.0]);
    let v = vo.v.forward(&mut tape, &p, xv).unwrap();
    let o = vo.out.forward(&mut tape, &p, v).unwrap();
    let expected = tape.add(xv, o).unwrap();
    assert!(
        tape.value(out.outputs[0])
            .max_abs_diff(tape.value(expected))
            <= 1e-15
    );
}

#[test]
fn shared_map_gives_identical_outputs_for_identical_streams_and_values() {
    let geom = StageGeometry::new(8, 4, 2, 2).unwrap();
    let mut store = ParamStore::new();
    let mut init = Initializer::new(7);
    let qk = QueryKey::new(&mut store, &mut init, "ref", 8, &geom.rel);
    let vo = ValueOut::new(&mut store, &mut init, "t", 8);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let sa = tape.constant(random_tensor(&[2, 8, 8, 8], 8, 1.0));
    let x = tape.constant(random_tensor(&[2, 8, 8, 8], 9, 1.0));
    let out =
        shared_attention(&mut tape, &p, sa, &[x, x], &qk, &[&vo, &vo], 2, &geom, true).unwrap();
    assert_eq!(tape.value(out.outputs[0]), tape.value(out.outputs[1]));
    let n = 16;
    for row in tape.value(out.attention).data().chunks(n) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    let wrong = tape.constant(random_tensor(&[2, 4, 4, 8], 10, 1.0));
    assert!(shared_attention(&mut tape, &p, sa, &[wrong], &qk, &[&vo], 2, &geom, true).is_err());
}

fn random_pyramid(cfg: &ArchConfig, seed: u64) -> [Tensor; 4] {
    std::array::from_fn(|s| {
        random_tensor(
            &[1, cfg.grid_side(s), cfg.grid_side(s), cfg.stage_channels(s)],
            seed + s as u64,
            1.0,
        )
    })
}

#[test]
fn identical_task_parameters_give_identical_outputs() {
    let cfg = nano();
    let (model, mut store) = MultModel::new(&cfg, 11).unwrap();
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in &names {
        let source = if let Some(rest) = name.strip_prefix("decoder.D.") {
            Some(rest.to_string())
        } else {
            name.strip_prefix("head.D.").map(|rest| format!("@{rest}"))
        };
        let Some(rest) = source else { continue };
        let value = store.get(store.id(name).unwrap()).value.clone();
        for t in Task::ALL.iter().filter(|&&t| t != Task::D) {
            let target = match rest.strip_prefix('@') {
                Some(h) if [Task::K, Task::E, Task::R].contains(t) => format!("head.{t}.{h}"),
                Some(_) => continue,
                None => format!("decoder.{t}.{rest}"),
            };
            if let Some(id) = store.id(&target) {
                store.get_mut(id).value = value.clone();
            }
        }
    }
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let levels = random_pyramid(&cfg, 12).map(|t| tape.constant(t));
    let out = model
        .forward_from_pyramid(&mut tape, &p, FeaturePyramid { levels }, None)
        .unwrap();
    let (_, first) = out.decoded.streams[0];
    for &(task, y) in &out.decoded.streams {
        let diff = tape.value(y).max_abs_diff(tape.value(first));
        assert!(diff <= 1e-12, "{task}: {diff:e}");
    }
    let d = tape.value(out.head(Task::D).unwrap().output).clone();
    for t in [Task::K, Task::E, Task::R] {
        assert!(tape.value(out.head(t).unwrap().output).max_abs_diff(&d) <= 1e-12);
    }
}

#[test]
fn reference_projections_learn_from_every_task() {
    let cfg = nano();
    let (model, store) = MultModel::new(&cfg, 13).unwrap();
    let sample = generate_sample(99, cfg.img_size);
    let batch = make_batch(&[&sample], &cfg.tasks).unwrap();
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let img = tape.constant(batch.images.clone());
    let out = model.forward(&mut tape, &p, img, None).unwrap();
    let r = cfg.reference_task;
    for (task, head) in &out.heads {
        let loss = per_task_loss_var(&mut tape, *task, head, batch.target(*task).unwrap()).unwrap();
        let grads = tape.backward(loss).unwrap();
        for stage in 0..4 {
            for part in ["q.weight", "k.weight", "rel_bias"] {
                let name = format!("decoder.{r}.stage{stage}.block1.attn.{part}");
                let g = grads.wrt(p.var(store.id(&name).unwrap()));
                let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(norm > 0.0, "{name} gets no gradient from {task}");
            }
        }
    }
    let owners: Vec<&str> = store
        .iter()
        .filter(|p| p.name.starts_with("decoder.") && p.name.contains(".block1.attn.q."))
        .map(|p| &p.name[..9])
        .collect();
    assert!(
        owners.iter().all(|o| *o == format!("decoder.{r}")),
        "{owners:?}"
    );
}

#[test]
fn shapes_heads_and_block_count() {
    let cfg = nano();
    let (model, store) = MultModel::new(&cfg, 14).unwrap();
    let sample = generate_sample(5, cfg.img_size);
    let batch = make_batch(&[&sample], &cfg.tasks).unwrap();
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let img = tape.constant(batch.images.clone());
    let out = model.forward(&mut tape, &p, img, None).unwrap();
    for (i, stage) in out.decoded.stage_outputs.iter().enumerate() {
        for &(_, y) in stage {
            assert_eq!(tape.shape(y), tape.shape(out.pyramid.levels[3 - i]));
        }
    }
    for &(_, y) in &out.decoded.streams {
        assert_eq!(tape.shape(y), [1, 32, 32, 16]);
    }
    let s = tape.value(out.head(Task::S).unwrap().output);
    assert_eq!(s.shape(), [1, 128, 128, 8]);
    assert!(s
        .data()
        .chunks(8)
        .all(|px| (px.iter().sum::<f64>() - 1.0).abs() <= 1e-6));
    let d = tape.value(out.head(Task::D).unwrap().output);
    assert!(d.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let n = tape.value(out.head(Task::N).unwrap().output);
    assert!(n
        .data()
        .chunks(3)
        .all(|px| (px.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-6));

    let blocks: std::collections::BTreeSet<String> = store
        .iter()
        .filter_map(|p| p.name.strip_prefix("decoder.D."))
        .filter(|rest| rest.contains(".block"))
        .map(|rest| rest.split('.').take(2).collect::<Vec<_>>().join("."))
        .collect();
    assert_eq!(blocks.len(), 8, "{blocks:?}");

    let large = ArchConfig::preset("mult-large").unwrap();
    assert_eq!(large.decoder_heads, [48, 24, 12, 6]);
    let narrow = ArchConfig {
        base_channels: 48,
        ..large
    }
    .with_tasks(&[Task::N]);
    let (m, _) = MultModel::new(&narrow, 0).unwrap();
    let heads: Vec<usize> = m.decoder.tasks[0]
        .stages
        .iter()
        .map(|s| s.block2.heads)
        .collect();
    assert_eq!(heads, [48, 24, 12, 6]);
}

#[test]
fn disabling_shared_attention_changes_outputs_and_adds_parameters() {
    let on = nano();
    let off = ArchConfig {
        shared_attention: false,
        ..on.clone()
    };
    let (m_on, s_on) = MultModel::new(&on, 15).unwrap();
    let (m_off, s_off) = MultModel::new(&off, 15).unwrap();
    assert_eq!(s_on.num_scalars(), count_parameters(&on).unwrap().total);
    assert_eq!(s_off.num_scalars(), count_parameters(&off).unwrap().total);
    assert!(s_on.num_scalars() < s_off.num_scalars());

    let pyramid = random_pyramid(&on, 16);
    let decode = |model: &MultModel, store: &ParamStore| {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let levels = pyramid.clone().map(|t| tape.constant(t));
        let out = model
            .decoder
            .decode(&mut tape, &p, &FeaturePyramid { levels }, None)
            .unwrap();
        out.streams
            .iter()
            .map(|&(_, y)| tape.value(y).clone())
            .collect::<Vec<_>>()
    };
    let (a, b) = (decode(&m_on, &s_on), decode(&m_off, &s_off));
    assert!(a.iter().zip(&b).any(|(x, y)| x.max_abs_diff(y) > 1e-6));

    for tasks in [
        &[Task::S, Task::N][..],
        &[Task::D, Task::N, Task::E],
        &Task::ALL,
    ] {
        let with = on.with_tasks(tasks);
        let without = ArchConfig {
            shared_attention: false,
            ..with.clone()
        };
        assert!(count_parameters(&with).unwrap().total < count_parameters(&without).unwrap().total);
    }
    let single = on.with_tasks(&[Task::N]);
    let single_off = ArchConfig {
        shared_attention: false,
        ..single.clone()
    };
    assert_eq!(
        count_parameters(&single).unwrap().total,
        count_parameters(&single_off).unwrap().total
    );
}

#[test]
fn decoder_gradient_with_respect_to_skip_features() {
    let cfg = nano();
    let (model, store) = MultModel::new(&cfg, 17).unwrap();
    let pyramid = random_pyramid(&cfg, 18);
    let loss = |levels_in: &[Tensor; 4], track: Option<usize>| {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let levels: [_; 4] = std::array::from_fn(|i| {
            if Some(i) == track {
                tape.leaf(levels_in[i].clone())
            } else {
                tape.constant(levels_in[i].clone())
            }
        });
        let out = model
            .decoder
            .decode(&mut tape, &p, &FeaturePyramid { levels }, None)
            .unwrap();
        let mut total = None;
        for (k, &(_, y)) in out.streams.iter().enumerate() {
            let s = weighted_sum(&mut tape, y, 40 + k as u64).unwrap();
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s).unwrap(),
            });
        }
        let total = total.unwrap();
        let value = tape.value(total).item();
        let grad = track.map(|i| tape.backward(total).unwrap().wrt(levels[i]));
        (value, grad)
    };
    for level in 0..4 {
        let grad = loss(&pyramid, Some(level)).1.unwrap();
        let err = directional_check(
            &mut |v| {
                let mut moved = pyramid.clone();
                moved[level] = v.clone();
                loss(&moved, None).0
            },
            &pyramid[level],
            &grad,
            50 + level as u64,
            1e-3,
        );
        assert!(err <= 1e-4, "level {level}: {err:e}");
    }
}
