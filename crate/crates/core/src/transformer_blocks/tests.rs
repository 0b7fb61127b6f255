use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use super::*;
use crate::config::Preset;
use crate::geometry::{CameraModel, RigidTransform};
use crate::heads::HeadParams;
use crate::numerics::{grad_check_param, AttentionParams, Tensor};
use crate::temporal_memory::{build_temporal_kv, Anchor, FrameMemory, TemporalParams, TemporalQueue};
use crate::tokenizer::{init_task_queries, tokenize_sensors, AgentAnchor, InitialAnchors, RgbImage, SensorEncoder};
use rand::SeedableRng;

fn cfg() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        ffn_dim: 16,
        num_layers: 2,
        num_agent_queries: 3,
        num_map_queries: 2,
        points_per_polyline: 3,
        num_freqs: 3,
        patch_size: 8,
        motion_modes: 2,
        motion_horizon: 3,
        plan_horizon: 3,
        ..ModelConfig::desk(Preset::Small)
    }
}

struct Fixture {
    cfg: ModelConfig,
    store: ParamStore,
    sensor: SensorEncoder,
    queries: QueryParams,
    temporal: TemporalParams,
    blocks: Vec<BlockParams>,
    heads: HeadParams,
    anchors: InitialAnchors,
}

fn fixture(seed: u64) -> Fixture {
    let cfg = cfg();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sensor = SensorEncoder::new(&mut store, &cfg, &mut rng).unwrap();
    let queries = QueryParams::new(&mut store, &cfg, &mut rng).unwrap();
    let temporal = TemporalParams::new(&mut store, &cfg, &mut rng).unwrap();
    let blocks = (0..cfg.num_layers)
        .map(|l| BlockParams::new(&mut store, &format!("b{l}"), &cfg, &mut rng).unwrap())
        .collect();
    let heads = HeadParams::new(&mut store, &cfg, &mut rng).unwrap();
    let anchors = InitialAnchors::generate(&cfg, seed).unwrap();
    Fixture {
        cfg,
        store,
        sensor,
        queries,
        temporal,
        blocks,
        heads,
        anchors,
    }
}

fn images(n: usize, size: usize, seed: u8) -> Vec<RgbImage> {
    (0..n)
        .map(|c| {
            let data = (0..size * size * 3)
                .map(|i| ((i * 31 + c * 17 + seed as usize * 7) % 256) as u8)
                .collect();
            RgbImage::new(size, size, data).unwrap()
        })
        .collect()
}

fn cameras(n: usize, size: usize) -> Vec<CameraModel> {
    (0..n)
        .map(|i| CameraModel::looking(i as f64 * std::f64::consts::FRAC_PI_2, 1.6, 1.0, size, size))
        .collect()
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn zero_linear(store: &mut ParamStore, l: &crate::numerics::Linear) {
    for id in [l.weight, l.bias] {
        let s = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&s)).unwrap();
    }
}

fn stacked<'t>(tq: &TaskQueries<'t>) -> Vec<f64> {
    [tq.ego_h, tq.agent_h, tq.map_h]
        .iter()
        .flat_map(|v| v.value().data().to_vec())
        .collect()
}

fn history(f: &Fixture, steps: i64) -> (TemporalQueue, BTreeMap<i64, RigidTransform>) {
    let d = f.cfg.hidden;
    let mut q = TemporalQueue::new(10).unwrap();
    let mut poses = BTreeMap::new();
    for t in 0..steps {
        let mem = FrameMemory {
            agent_h: random(2, d, 100 + t as u64),
            agent_anchors: (0..2)
                .map(|i| Anchor::Agent {
                    center: [3.0 * i as f64, 1.0, 0.5],
                    heading: 0.0,
                    velocity: [2.0, 0.0],
                })
                .collect(),
            agent_scores: vec![0.5, 0.7],
            map_h: random(1, d, 200 + t as u64),
            map_anchors: vec![Anchor::Map(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])],
            map_scores: vec![0.9],
            ego_h: random(1, d, 300 + t as u64),
        };
        q.push_frame(&mem, 50, t).unwrap();
        poses.insert(t, RigidTransform::from_translation(nalgebra::Vector3::new(t as f64, 0.0, 0.0)));
    }
    poses.insert(steps, RigidTransform::from_translation(nalgebra::Vector3::new(steps as f64, 0.0, 0.0)));
    (q, poses)
}

#[test]
fn zeroed_output_projections_make_block_identity() {
    let mut f = fixture(0);
    for l in f.blocks[0].output_projections() {
        zero_linear(&mut f.store, &l);
    }
    let (q, poses) = history(&f, 2);
    let tape = Tape::new();
    let s = tokenize_sensors(&tape, &f.store, &images(2, 16, 0), &cameras(2, 16), &f.cfg, &f.sensor).unwrap();
    let tq = init_task_queries(&tape, &f.store, &f.cfg, &f.queries, &f.anchors, &Default::default()).unwrap();
    let kv = build_temporal_kv(&tape, &f.store, &q, 2, &poses, &f.temporal, &f.cfg).unwrap();
    let out = block_forward(&tape, &f.store, &tq, &s, &kv, &f.blocks[0], &f.heads.pointnet, 2, None).unwrap();
    assert_eq!(stacked(&out), stacked(&tq));
}

#[test]
fn single_sensor_token_broadcasts_its_value() {
    let f = fixture(1);
    let tape = Tape::new();
    let tq = init_task_queries(&tape, &f.store, &f.cfg, &f.queries, &f.anchors, &Default::default()).unwrap();
    let tok = random(1, 8, 2);
    let s = SensorTokens {
        features: tape.constant(tok.clone()),
        pe: tape.constant(random(1, 8, 3)),
        cameras: cameras(1, 8),
        grid: (1, 1),
    };
    let out = sensor_cross_attention(&tape, &f.store, &tq, &s, &f.blocks[0], 2, None).unwrap();
    let a = &f.blocks[0].sca;
    let v = a.value.forward(&tape, &f.store, tape.constant(tok));
    let delta = a.output.forward(&tape, &f.store, v).value();
    let before = stacked(&tq);
    let after = stacked(&out);
    for (i, (b, x)) in before.iter().zip(&after).enumerate() {
        assert!((x - b - delta.data()[i % 8]).abs() < 1e-12);
    }
}

#[test]
fn zero_sensor_tokens_add_nothing() {
    let mut f = fixture(2);
    let a = f.blocks[0].sca;
    for l in [a.value, a.output] {
        let s = f.store.get(l.bias).shape().to_vec();
        f.store.set(l.bias, Tensor::zeros(&s)).unwrap();
    }
    let tape = Tape::new();
    let tq = init_task_queries(&tape, &f.store, &f.cfg, &f.queries, &f.anchors, &Default::default()).unwrap();
    let s = SensorTokens {
        features: tape.constant(Tensor::zeros(&[4, 8])),
        pe: tape.constant(Tensor::zeros(&[4, 8])),
        cameras: cameras(1, 8),
        grid: (2, 2),
    };
    let out = sensor_cross_attention(&tape, &f.store, &tq, &s, &f.blocks[0], 2, None).unwrap();
    assert_eq!(stacked(&out), stacked(&tq));
}

/// Direct softmax-attention formula, independent of the tape.
fn attention_oracle(store: &ParamStore, p: &AttentionParams, q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let proj = |x: &Tensor, l: &crate::numerics::Linear| -> Vec<Vec<f64>> {
        let w = store.get(l.weight);
        let b = store.get(l.bias);
        (0..x.rows())
            .map(|r| {
                (0..w.cols())
                    .map(|c| b.data()[c] + (0..w.rows()).map(|i| x.at(r, i) * w.at(i, c)).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let (qp, kp, vp) = (proj(q, &p.query), proj(k, &p.key), proj(v, &p.value));
    let d = qp[0].len();
    let dh = d / heads;
    let mut joined = vec![vec![0.0; d]; qp.len()];
    for h in 0..heads {
        for (i, qi) in qp.iter().enumerate() {
            let scores: Vec<f64> = kp
                .iter()
                .map(|kj| (0..dh).map(|c| qi[h * dh + c] * kj[h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                joined[i][h * dh + c] = e.iter().zip(&vp).map(|(w, vj)| w / z * vj[h * dh + c]).sum();
            }
        }
    }
    let j = Tensor::from_rows(&joined).unwrap();
    Tensor::from_rows(&proj(&j, &p.output)).unwrap()
}

fn layer_norm_rows(x: &Tensor, store: &ParamStore, p: &crate::numerics::LayerNormParams) -> Tensor {
    let g = store.get(p.gamma);
    let b = store.get(p.beta);
    let rows: Vec<Vec<f64>> = (0..x.rows())
        .map(|r| {
            let row = x.row(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + crate::numerics::LAYER_NORM_EPS).sqrt();
            row.iter().enumerate().map(|(c, v)| (v - mean) * inv * g.data()[c] + b.data()[c]).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap()
}

#[test]
fn sca_matches_direct_attention_oracle() {
    let f = fixture(3);
    let tape = Tape::new();
    let agent_h = random(3, 8, 4);
    let agent_pe = random(3, 8, 5);
    let tq = TaskQueries {
        agent_h: tape.constant(agent_h.clone()),
        agent_pe: tape.constant(agent_pe.clone()),
        agent_anchor: vec![AgentAnchor { center: [0.0; 3], class_probs: vec![] }; 3],
        map_h: tape.constant(Tensor::zeros(&[0, 8])),
        map_pe: tape.constant(Tensor::zeros(&[0, 8])),
        map_anchor: vec![],
        ego_h: tape.constant(Tensor::zeros(&[0, 8])),
        ego_pe: tape.constant(Tensor::zeros(&[0, 8])),
        ego_anchor: vec![],
    };
    let (sf, sp) = (random(4, 8, 6), random(4, 8, 7));
    let s = SensorTokens {
        features: tape.constant(sf.clone()),
        pe: tape.constant(sp.clone()),
        cameras: cameras(1, 16),
        grid: (2, 2),
    };
    let out = sensor_cross_attention(&tape, &f.store, &tq, &s, &f.blocks[0], 2, None).unwrap();
    let q = add(&layer_norm_rows(&agent_h, &f.store, &f.blocks[0].sca_norm), &agent_pe);
    let att = attention_oracle(&f.store, &f.blocks[0].sca, &q, &add(&sf, &sp), &sf, 2);
    let expect = add(&agent_h, &att);
    assert!(out.agent_h.value().max_abs_diff(&expect) < 1e-10);
}

#[test]
fn empty_history_leaves_queries_untouched() {
    let f = fixture(4);
    let tape = Tape::new();
    let tq = init_task_queries(&tape, &f.store, &f.cfg, &f.queries, &f.anchors, &Default::default()).unwrap();
    let out = temporal_cross_attention(&tape, &f.store, &tq, &TemporalKv::default(), &f.blocks[0], 2, None).unwrap();
    assert_eq!(out.agent_h.id(), tq.agent_h.id());
    assert_eq!(out.map_h.id(), tq.map_h.id());
    assert_eq!(out.ego_h.id(), tq.ego_h.id());
}

#[test]
fn tca_matches_oracle_over_built_keys() {
    let f = fixture(5);
    let (q, poses) = history(&f, 2);
    let tape = Tape::new();
    let tq = init_task_queries(&tape, &f.store, &f.cfg, &f.queries, &f.anchors, &Default::default()).unwrap();
    let kv = build_temporal_kv(&tape, &f.store, &q, 2, &poses, &f.temporal, &f.cfg).unwrap();
    let out = temporal_cross_attention(&tape, &f.store, &tq, &kv, &f.blocks[0], 2, None).unwrap();
    let pair = kv.agent.unwrap();
    assert_eq!(pair.keys.rows(), 4);
    let h = tq.agent_h.value();
    let qin = add(&layer_norm_rows(&h, &f.store, &f.blocks[0].tca_norm), &tq.agent_pe.value());
    let att = attention_oracle(&f.store, &f.blocks[0].tca, &qin, &pair.keys.value(), &pair.values.value(), 2);
    assert!(out.agent_h.value().max_abs_diff(&add(&h, &att)) < 1e-10);
}

#[test]
fn single_history_key_gets_full_weight() {
    let f = fixture(6);
    let tape = Tape::new();
    let tq = init_task_queries(&tape, &f.store, &f.cfg, &f.queries, &f.anchors, &Default::default()).unwrap();
    let hist = random(1, 8, 9);
    let kv = TemporalKv {
        ego: Some(crate::temporal_memory::KvPair {
            keys: tape.constant(random(1, 8, 10)),
            values: tape.constant(hist.clone()),
        }),
        ..Default::default()
    };
    let out = temporal_cross_attention(&tape, &f.store, &tq, &kv, &f.blocks[0], 2, None).unwrap();
    let a = &f.blocks[0].tca;
    let v = a.value.forward(&tape, &f.store, tape.constant(hist));
    let delta = a.output.forward(&tape, &f.store, v).value();
    let expect = add(&tq.ego_h.value(), &delta);
    assert!(out.ego_h.value().max_abs_diff(&expect) < 1e-12);
    assert_eq!(out.agent_h.id(), tq.agent_h.id());
}

fn agents_only<'t>(tape: &'t Tape, h: Tensor, pe: Tensor, ego: Tensor) -> TaskQueries<'t> {
    let n = h.rows();
    TaskQueries {
        agent_h: tape.constant(h),
        agent_pe: tape.constant(pe),
        agent_anchor: vec![AgentAnchor { center: [0.0; 3], class_probs: vec![] }; n],
        map_h: tape.constant(Tensor::zeros(&[0, 8])),
        map_pe: tape.constant(Tensor::zeros(&[0, 8])),
        map_anchor: vec![],
        ego_h: tape.constant(ego),
        ego_pe: tape.constant(Tensor::zeros(&[1, 8])),
        ego_anchor: vec![],
    }
}

#[test]
fn lone_ego_attends_to_itself() {
    let f = fixture(7);
    let tape = Tape::new();
    let ego = random(1, 8, 11);
    let tq = agents_only(&tape, Tensor::zeros(&[0, 8]), Tensor::zeros(&[0, 8]), ego.clone());
    let out = task_self_attention(&tape, &f.store, &tq, &f.blocks[0], &f.heads.pointnet, 2, None).unwrap();
    let normed = layer_norm_rows(&ego, &f.store, &f.blocks[0].tsa_norm);
    let a = &f.blocks[0].tsa;
    let v = a.value.forward(&tape, &f.store, tape.constant(normed));
    let expect = add(&ego, &a.output.forward(&tape, &f.store, v).value());
    assert!(out.ego_h.value().max_abs_diff(&expect) < 1e-12);
}

#[test]
fn tsa_is_permutation_equivariant_over_agents() {
    let f = fixture(8);
    let (h, pe, ego) = (random(4, 8, 12), random(4, 8, 13), random(1, 8, 14));
    let tape = Tape::new();
    let out = task_self_attention(&tape, &f.store, &agents_only(&tape, h.clone(), pe.clone(), ego.clone()), &f.blocks[0], &f.heads.pointnet, 2, None).unwrap();
    let perm = [2usize, 0, 3, 1];
    let ph = tape.constant(h).gather_rows(&perm).value();
    let ppe = tape.constant(pe).gather_rows(&perm).value();
    let out_p = task_self_attention(&tape, &f.store, &agents_only(&tape, (*ph).clone(), (*ppe).clone(), ego), &f.blocks[0], &f.heads.pointnet, 2, None).unwrap();
    let (a, b) = (out.agent_h.value(), out_p.agent_h.value());
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((b.at(i, c) - a.at(p, c)).abs() < 1e-12);
        }
    }
    assert!(out.ego_h.value().max_abs_diff(&out_p.ego_h.value()) < 1e-12);
}

#[test]
fn identical_agents_get_identical_rows() {
    let f = fixture(9);
    let row = random(1, 8, 15);
    let h = Tensor::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec()]).unwrap();
    let pe = Tensor::from_rows(&[vec![0.5; 8], vec![0.5; 8]]).unwrap();
    let tape = Tape::new();
    let out = task_self_attention(&tape, &f.store, &agents_only(&tape, h, pe, random(1, 8, 16)), &f.blocks[0], &f.heads.pointnet, 2, None).unwrap();
    let v = out.agent_h.value();
    assert_eq!(v.row(0), v.row(1));
}

#[test]
fn block_equals_manual_composition() {
    let f = fixture(10);
    let tape = Tape::new();
    let tq = init_task_queries(&tape, &f.store, &f.cfg, &f.queries, &f.anchors, &Default::default()).unwrap();
    let tok = random(1, 8, 17);
    let s = SensorTokens {
        features: tape.constant(tok.clone()),
        pe: tape.constant(random(1, 8, 18)),
        cameras: cameras(1, 8),
        grid: (1, 1),
    };
    let b = &f.blocks[0];
    let out = block_forward(&tape, &f.store, &tq, &s, &TemporalKv::default(), b, &f.heads.pointnet, 2, None).unwrap();

    let sv = b.sca.value.forward(&tape, &f.store, tape.constant(tok));
    let sca_delta = b.sca.output.forward(&tape, &f.store, sv).value();
    let rows = |v: &Var| (0..v.rows()).map(|r| v.value().row(r).to_vec()).collect::<Vec<_>>();
    let mut all: Vec<Vec<f64>> = [tq.ego_h, tq.agent_h, tq.map_h].iter().flat_map(rows).collect();
    for r in &mut all {
        r.iter_mut().zip(sca_delta.data()).for_each(|(x, d)| *x += d);
    }
    let (ne, na, nm, np) = (1, 3, 2, 3);
    let x = Tensor::from_rows(&all).unwrap();
    let normed = layer_norm_rows(&x, &f.store, &b.tsa_norm);
    let map_rows = tape.constant(Tensor::from_rows(&(ne + na..ne + na + nm * np).map(|r| normed.row(r).to_vec()).collect::<Vec<_>>()).unwrap());
    let inst = crate::heads::aggregate_map(&tape, &f.store, map_rows, np, &f.heads.pointnet).unwrap().value();
    let pes: Vec<Vec<f64>> = [tq.ego_pe, tq.agent_pe].iter().flat_map(rows).collect();
    let map_pe = tq.map_pe.value();
    let mut v_rows: Vec<Vec<f64>> = (0..ne + na).map(|r| normed.row(r).to_vec()).collect();
    v_rows.extend((0..nm).map(|i| inst.row(i).to_vec()));
    let mut pe_rows = pes;
    pe_rows.extend((0..nm).map(|i| (0..8).map(|c| (0..np).map(|j| map_pe.at(i * np + j, c)).sum::<f64>() / np as f64).collect()));
    let v = Tensor::from_rows(&v_rows).unwrap();
    let qk = add(&v, &Tensor::from_rows(&pe_rows).unwrap());
    let att = attention_oracle(&f.store, &b.tsa, &qk, &qk, &v, 2);
    for r in 0..ne + na {
        all[r].iter_mut().zip(att.row(r)).for_each(|(x, d)| *x += d);
    }
    for i in 0..nm {
        for j in 0..np {
            all[ne + na + i * np + j].iter_mut().zip(att.row(ne + na + i)).for_each(|(x, d)| *x += d);
        }
    }
    let x = Tensor::from_rows(&all).unwrap();
    let normed = tape.constant(layer_norm_rows(&x, &f.store, &b.ffn_norm));
    let ffn = mlp_forward(&tape, &f.store, normed, &b.ffn).unwrap().value();
    let expect = add(&x, &ffn);
    let got = Tensor::matrix(expect.rows(), 8, stacked(&out)).unwrap();
    assert!(got.max_abs_diff(&expect) < 1e-10, "{}", got.max_abs_diff(&expect));
}

#[test]
fn block_gradients_pass_finite_differences() {
    let f = fixture(11);
    let (q, poses) = history(&f, 2);
    let b = &f.blocks[0];
    let ids = [
        b.sca.query.weight,
        b.sca.output.bias,
        b.tca.key.weight,
        b.tsa.value.weight,
        b.ffn.layers[0].weight,
        b.ffn_norm.gamma,
        b.sca_norm.beta,
        f.heads.pointnet.point.layers[0].weight,
        f.temporal.motion.layers[0].weight,
    ];
    for id in ids {
        let coords: Vec<usize> = (0..f.store.get(id).len()).step_by(5).collect();
        let err = grad_check_param(&f.store, id, Some(&coords), 1e-6, |tape, store| {
            let s = tokenize_sensors(tape, store, &images(1, 16, 1), &cameras(1, 16), &f.cfg, &f.sensor)?;
            let tq = init_task_queries(tape, store, &f.cfg, &f.queries, &f.anchors, &Default::default())?;
            let kv = build_temporal_kv(tape, store, &q, 2, &poses, &f.temporal, &f.cfg)?;
            let out = block_forward(tape, store, &tq, &s, &kv, b, &f.heads.pointnet, 2, None)?;
            let h = concat_rows(&[out.ego_h, out.agent_h, out.map_h]);
            Ok(h.mul(h).mean())
        })
        .unwrap();
        assert!(err < 1e-4, "{}: {err}", f.store.name(id));
    }
}

fn run_stack(f: &Fixture, layers: usize) -> (Vec<FramePredictions>, Vec<Vec<f64>>, bool) {
    let (q, poses) = history(f, 3);
    let tape = Tape::new();
    let s = tokenize_sensors(&tape, &f.store, &images(2, 16, 2), &cameras(2, 16), &f.cfg, &f.sensor).unwrap();
    let feats_before = s.features.value().data().to_vec();
    let tq = init_task_queries(&tape, &f.store, &f.cfg, &f.queries, &f.anchors, &Default::default()).unwrap();
    let kv = build_temporal_kv(&tape, &f.store, &q, 3, &poses, &f.temporal, &f.cfg).unwrap();
    let queue_before = q.clone();
    let out = stack_forward(&tape, &f.store, &tq, &s, &kv, &f.blocks[..layers], &f.heads, &f.queries, &f.cfg, None).unwrap();
    assert_eq!(s.features.value().data(), &feats_before[..]);
    assert_eq!(q, queue_before);
    tape.check_finite().unwrap();
    let pes = out.queries.iter().map(|t| t.agent_pe.value().data().to_vec()).collect();
    let intact = out.layers.len() == layers && out.predictions.len() == layers;
    (out.predictions, pes, intact)
}

#[test]
fn stack_returns_one_prediction_set_per_block() {
    let f = fixture(12);
    let (preds, pes, intact) = run_stack(&f, 2);
    assert!(intact);
    assert_ne!(pes[0], pes[1]);
    let (one, _, _) = run_stack(&f, 1);
    assert_eq!(one[0], preds[0]);
}

#[test]
fn one_block_stack_is_block_plus_heads() {
    let f = fixture(13);
    let tape = Tape::new();
    let s = tokenize_sensors(&tape, &f.store, &images(2, 16, 3), &cameras(2, 16), &f.cfg, &f.sensor).unwrap();
    let tq = init_task_queries(&tape, &f.store, &f.cfg, &f.queries, &f.anchors, &Default::default()).unwrap();
    let kv = TemporalKv::default();
    let out = stack_forward(&tape, &f.store, &tq, &s, &kv, &f.blocks[..1], &f.heads, &f.queries, &f.cfg, None).unwrap();
    let next = block_forward(&tape, &f.store, &tq, &s, &kv, &f.blocks[0], &f.heads.pointnet, 2, None).unwrap();
    let modes = crate::heads::ModeEmbedding::compute(&tape, &f.store, &f.heads, f.cfg.num_freqs).unwrap();
    let direct = crate::heads::decode_layer(&tape, &f.store, &next, &modes, &f.heads, &f.cfg).unwrap();
    assert_eq!(out.predictions[0], direct.to_predictions());
}

#[test]
fn small_two_layer_stack_is_deterministic() {
    let hash = || {
        let cfg = ModelConfig {
            num_layers: 2,
            num_agent_queries: 8,
            num_map_queries: 4,
            points_per_polyline: 4,
            patch_size: 16,
            ..ModelConfig::desk(Preset::Small)
        };
        let m = crate::model::DriveTransformer::new(cfg).unwrap();
        let imgs = images(2, 32, 4);
        let cams = cameras(2, 32);
        let poses: BTreeMap<i64, RigidTransform> = [(0, RigidTransform::identity())].into_iter().collect();
        let input = crate::model::FrameInput {
            images: &imgs,
            cameras: &cams,
            canbus: Default::default(),
            step: 0,
            ego_poses: &poses,
        };
        let tape = Tape::new();
        let out = m.forward(&tape, &input, &m.new_queue(), None).unwrap();
        tape.check_finite().unwrap();
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in &out.predictions {
            for b in &p.boxes {
                b.center.iter().for_each(|v| v.to_bits().hash(&mut h));
            }
            p.plan.logits.iter().for_each(|v| v.to_bits().hash(&mut h));
        }
        h.finish()
    };
    assert_eq!(hash(), hash());
}

#[test]
fn dropout_only_changes_training_passes() {
    let f = fixture(14);
    let tape = Tape::new();
    let s = tokenize_sensors(&tape, &f.store, &images(1, 16, 5), &cameras(1, 16), &f.cfg, &f.sensor).unwrap();
    let tq = init_task_queries(&tape, &f.store, &f.cfg, &f.queries, &f.anchors, &Default::default()).unwrap();
    let kv = TemporalKv::default();
    let plain = block_forward(&tape, &f.store, &tq, &s, &kv, &f.blocks[0], &f.heads.pointnet, 2, None).unwrap();
    let off = Dropout::new(0.0, ChaCha8Rng::seed_from_u64(0));
    let same = block_forward(&tape, &f.store, &tq, &s, &kv, &f.blocks[0], &f.heads.pointnet, 2, Some(&off)).unwrap();
    assert_eq!(stacked(&plain), stacked(&same));
    let on = Dropout::new(0.5, ChaCha8Rng::seed_from_u64(0));
    let noisy = block_forward(&tape, &f.store, &tq, &s, &kv, &f.blocks[0], &f.heads.pointnet, 2, Some(&on)).unwrap();
    assert_ne!(stacked(&plain), stacked(&noisy));
}
