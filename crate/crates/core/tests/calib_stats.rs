mod common;

use common::*;
use pmq_core::calib::{collect_layer_stats, collect_layer_stats_chunked, TaskData};
use pmq_core::matrix::frobenius_sq;
use pmq_core::merge::merge_average;
use pmq_core::model::WeightSource;
use pmq_core::quant::rtn_quantize;
use pmq_core::synthetic::{make_synthetic_tasks, mean_squared_error, SyntheticSpec};
use pmq_core::{anchor_lambda, CalibSet, LayerCalibStats, Matrix, Model, QuantConfig};

fn partially_quantized(seed: u64) -> (Model, CalibSet) {
    let mut r = rng(seed);
    let ck = random_checkpoint(&mut r, &[5, 9, 7, 3]);
    let mut m = Model::from_checkpoint(&ck);
    let q = rtn_quantize(&ck.layer(0).weight, &QuantConfig::default().with_bits(3)).unwrap();
    m.replace_weight(0, WeightSource::quantized(q)).unwrap();
    let calib = calib_from(&mut r, 3, 5, 45);
    (m, calib)
}

#[test]
fn first_layer_sees_raw_inputs() {
    let (m, calib) = partially_quantized(1);
    let (stats, acts) = collect_layer_stats(&m, &calib, 0, None).unwrap();
    for (a, t) in acts.iter().zip(calib.tasks()) {
        assert_eq!(a, &t.inputs);
    }
    assert_eq!(stats.counts, vec![45, 45, 45]);
}

#[test]
fn single_sample_is_rank_one() {
    let x = Matrix::from_rows(&[vec![1.0], vec![-2.0], vec![0.5]]);
    let s = LayerCalibStats::from_activations(std::slice::from_ref(&x), 32).unwrap();
    assert_eq!(s.hessians[0], x.matmul(&x.transpose()).unwrap());
    assert_eq!(s.energies[0], 5.25);
}

#[test]
fn cached_activations_match_full_rerun() {
    let (m, calib) = partially_quantized(2);
    let mut cache: Option<Vec<Matrix>> = None;
    for idx in 0..m.num_layers() {
        let (cached, acts) = collect_layer_stats(&m, &calib, idx, cache.as_deref()).unwrap();
        let (fresh, _) = collect_layer_stats(&m, &calib, idx, None).unwrap();
        for (a, b) in cached.hessians.iter().zip(&fresh.hessians) {
            assert!(max_abs_diff(a, b) <= 1e-10);
        }
        cache = Some(
            acts.iter()
                .map(|x| pmq_core::model::propagate_through_layer(x, m.layer(idx)).unwrap())
                .collect(),
        );
    }
}

#[test]
fn cache_shape_drift_is_an_error() {
    let (m, calib) = partially_quantized(3);
    let wrong: Vec<Matrix> = calib.tasks().iter().map(|t| t.inputs.clone()).collect();
    assert!(collect_layer_stats(&m, &calib, 1, Some(&wrong)).is_err());
    assert!(collect_layer_stats(&m, &calib, 3, None).is_err());
}

#[test]
fn chunking_does_not_change_statistics() {
    let (m, calib) = partially_quantized(4);
    for idx in 0..3 {
        let (base, _) = collect_layer_stats_chunked(&m, &calib, idx, None, 32).unwrap();
        for chunk in [1, 7] {
            let (s, _) = collect_layer_stats_chunked(&m, &calib, idx, None, chunk).unwrap();
            for (a, b) in s.hessians.iter().zip(&base.hessians) {
                assert!(max_abs_diff(a, b) <= 1e-10);
            }
            assert_eq!(s.energies, base.energies);
        }
    }
}

#[test]
fn trace_identity_and_psd() {
    let mut r = rng(5);
    for seed in 0..10 {
        let (m, calib) = partially_quantized(10 + seed);
        for idx in 0..3 {
            let (s, _) = collect_layer_stats(&m, &calib, idx, None).unwrap();
            for (h, e) in s.hessians.iter().zip(&s.energies) {
                assert!(rel_err(h.trace(), *e) <= 1e-9);
                assert!(h.is_symmetric());
                for _ in 0..5 {
                    let v = normal(&mut r, 1, s.dim);
                    let q = v
                        .matmul(h)
                        .unwrap()
                        .matmul(&v.transpose())
                        .unwrap()
                        .get(0, 0);
                    assert!(q >= -1e-8 * frobenius_sq(&v) * h.trace());
                }
            }
        }
    }
}

#[test]
fn anchor_lambda_formula() {
    let (m, calib) = partially_quantized(6);
    let (s, _) = collect_layer_stats(&m, &calib, 1, None).unwrap();
    assert_eq!(anchor_lambda(&s, 0.0), 0.0);
    for alpha in [0.01, 0.1, 1.0, 10.0] {
        let trace_form = alpha / s.dim as f64 * s.pooled_hessian().trace();
        assert!(rel_err(anchor_lambda(&s, alpha), trace_form) <= 1e-9);
    }
    let hand = LayerCalibStats {
        hessians: vec![Matrix::zeros(4, 4), Matrix::zeros(4, 4)],
        energies: vec![8.0, 8.0],
        counts: vec![1, 1],
        dim: 4,
    };
    assert!((anchor_lambda(&hand, 0.1) - 0.4).abs() < 1e-15);
    let zero = LayerCalibStats::from_activations(&[Matrix::zeros(3, 4)], 32).unwrap();
    assert_eq!(anchor_lambda(&zero, 5.0), 0.0);
}

#[test]
fn calib_set_round_trips_through_files() {
    let mut r = rng(7);
    let tasks: Vec<TaskData> = (0..3)
        .map(|_| TaskData {
            inputs: normal(&mut r, 4, 6),
            targets: Some(normal(&mut r, 2, 6)),
        })
        .collect();
    let set = CalibSet::new(tasks, 99).unwrap();
    let dir = tempfile::tempdir().unwrap();
    set.save(dir.path()).unwrap();
    for i in 1..=3 {
        assert!(dir.path().join(format!("task{i}.safetensors")).exists());
    }
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("index.json")).unwrap())
            .unwrap();
    assert_eq!(index["K"], 3);
    assert_eq!(index["samples_per_task"], 6);
    assert_eq!(index["seed"], 99);
    assert_eq!(CalibSet::load(dir.path()).unwrap(), set);
    assert!(CalibSet::new(vec![], 0).is_err());
}

#[test]
fn synthetic_generator_contracts() {
    let spec = SyntheticSpec {
        num_tasks: 1,
        train_steps: 0,
        ..small_spec()
    };
    let p = make_synthetic_tasks(11, &spec).unwrap();
    assert_eq!(p.experts[0], p.base);
    assert_eq!(merge_average(&p.experts).unwrap(), p.base);
    let a = make_synthetic_tasks(12, &small_spec()).unwrap();
    let b = make_synthetic_tasks(12, &small_spec()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.calib.num_tasks(), 2);
    assert_eq!(a.calib.samples_per_task(), 24);
    for (c, h) in a.calib.tasks().iter().zip(a.heldout.tasks()) {
        assert_ne!(c.inputs.column(0), h.inputs.column(0));
    }
}

#[test]
fn experts_beat_base_on_their_task() {
    let spec = SyntheticSpec::default();
    let mut ok = 0;
    for seed in 0..40 {
        let p = make_synthetic_tasks(seed, &spec).unwrap();
        let base = Model::from_checkpoint(&p.base);
        let all = p.heldout.tasks().iter().zip(&p.experts).all(|(t, e)| {
            let y = t.targets.as_ref().unwrap();
            let eb = mean_squared_error(&base.forward(&t.inputs).unwrap(), y).unwrap();
            let ee = mean_squared_error(&Model::from_checkpoint(e).forward(&t.inputs).unwrap(), y)
                .unwrap();
            ee < eb
        });
        ok += all as usize;
    }
    assert!(ok >= 38, "{ok}/40 seeds");
}
