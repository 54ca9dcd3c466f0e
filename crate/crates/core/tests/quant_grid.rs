mod common;

use std::collections::BTreeMap;

use common::*;
use pmq_core::checkpoint::{decode_tensors, encode_tensors};
use pmq_core::matrix::frobenius_sq;
use pmq_core::quant::{
    dequantize_value, fit_grid, max_code, pack_codes, quantize_value, rtn_quantize, unpack_codes,
    QuantizedLayer,
};
use pmq_core::{Matrix, PmqError, QuantConfig};
use proptest::prelude::*;
use rand::Rng;

fn cfg(bits: u8, group: usize) -> QuantConfig {
    QuantConfig::default()
        .with_bits(bits)
        .with_group_size(group)
}

#[test]
fn random_groups_within_half_step() {
    let mut r = rng(1);
    for _ in 0..10_000 {
        let n = r.gen_range(1..40);
        let shift: f64 = r.gen_range(-3.0..3.0);
        let g: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0) + shift).collect();
        let grid = fit_grid(&g, 4).unwrap();
        assert!(grid.scale > 0.0 && grid.scale.is_finite());
        for &w in &g {
            let deq = dequantize_value(
                quantize_value(w, grid.scale, grid.zero, 4),
                grid.scale,
                grid.zero,
            );
            assert!(
                (w - deq).abs()
                    <= grid.scale / 2.0 + 4.0 * f64::EPSILON * w.abs().max(grid.scale * 15.0)
            );
        }
    }
}

#[test]
fn exhaustive_sweep_over_grid_range() {
    for bits in [2u8, 3, 4, 8] {
        let grid = fit_grid(&[-0.7, 1.3], bits).unwrap();
        let lo = dequantize_value(0, grid.scale, grid.zero);
        let hi = dequantize_value(max_code(bits) as u8, grid.scale, grid.zero);
        let steps = 10_000;
        for i in 0..=steps {
            let w = lo + (hi - lo) * i as f64 / steps as f64;
            let deq = dequantize_value(
                quantize_value(w, grid.scale, grid.zero, bits),
                grid.scale,
                grid.zero,
            );
            assert!((w - deq).abs() <= grid.scale / 2.0 + 1e-15);
        }
    }
}

#[test]
fn eight_bit_unit_range_resolution() {
    let mut r = rng(2);
    let mut vals: Vec<f64> = (0..2000).map(|_| r.gen_range(-1.0..1.0)).collect();
    vals[0] = -1.0;
    vals[1] = 1.0;
    let w = Matrix::from_vec(1, vals.len(), vals.clone()).unwrap();
    let q = rtn_quantize(&w, &cfg(8, vals.len())).unwrap();
    let err = max_abs_diff(&q.dequantize(), &w);
    assert!(err <= (2.0 / 255.0) / 2.0 + f64::EPSILON, "err {err}");
}

#[test]
fn two_bit_row_matches_per_entry_enumeration() {
    let mut r = rng(3);
    for _ in 0..500 {
        let w = normal(&mut r, 1, 4);
        let q = rtn_quantize(&w, &cfg(2, 4)).unwrap();
        let g = q.grids().grid(0, 0);
        for (c, &v) in w.row(0).iter().enumerate() {
            let best = (0u8..4)
                .min_by(|&a, &b| {
                    let ea = (v - dequantize_value(a, g.scale, g.zero)).abs();
                    let eb = (v - dequantize_value(b, g.scale, g.zero)).abs();
                    ea.partial_cmp(&eb).unwrap()
                })
                .unwrap();
            assert_eq!(q.codes()[c], best);
        }
    }
}

/// Shift-register packer, independent of the library's bit loop.
fn reference_pack(codes: &[u8], bits: u8, rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for r in 0..rows {
        let (mut acc, mut n) = (0u64, 0u32);
        for &c in &codes[r * cols..(r + 1) * cols] {
            acc |= (c as u64) << n;
            n += bits as u32;
            while n >= 8 {
                out.push(acc as u8);
                acc >>= 8;
                n -= 8;
            }
        }
        if n > 0 {
            out.push(acc as u8);
        }
    }
    out
}

#[test]
fn packer_matches_reference_for_all_widths() {
    let mut r = rng(4);
    for bits in 2u8..=8 {
        for (rows, cols) in [(1, 1), (3, 5), (4, 17), (2, 64)] {
            let codes: Vec<u8> = (0..rows * cols)
                .map(|_| r.gen_range(0..=max_code(bits)) as u8)
                .collect();
            assert_eq!(
                pack_codes(&codes, bits, rows, cols),
                reference_pack(&codes, bits, rows, cols)
            );
        }
    }
    assert_eq!(pack_codes(&[1, 2], 4, 1, 2), vec![0x21]);
}

#[test]
fn unpack_rejects_wrong_length() {
    assert!(matches!(
        unpack_codes(&[0u8; 3], 4, 2, 3),
        Err(PmqError::PayloadLength {
            expected: 4,
            found: 3
        })
    ));
}

#[test]
fn rtn_error_decreases_with_bits() {
    let mut r = rng(5);
    let ws: Vec<Matrix> = (0..50).map(|_| normal(&mut r, 32, 128)).collect();
    let mean_err = |bits: u8| {
        ws.iter()
            .map(|w| {
                frobenius_sq(
                    &rtn_quantize(w, &cfg(bits, 128))
                        .unwrap()
                        .dequantize()
                        .sub(w)
                        .unwrap(),
                )
                .sqrt()
            })
            .sum::<f64>()
            / ws.len() as f64
    };
    let errs: Vec<f64> = [2u8, 3, 4, 8].iter().map(|&b| mean_err(b)).collect();
    assert!(errs.windows(2).all(|p| p[1] < p[0]), "{errs:?}");
}

fn arb_matrix() -> impl Strategy<Value = Matrix> {
    (1usize..6, 1usize..40).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-10.0f64..10.0, r * c)
            .prop_map(move |v| Matrix::from_vec(r, c, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pack_round_trip(bits in prop::sample::select(vec![2u8, 3, 4, 8]), rows in 1usize..5, cols in 1usize..30, seed in 0u64..1000) {
        let mut r = rng(seed);
        let codes: Vec<u8> = (0..rows * cols).map(|_| r.gen_range(0..=max_code(bits)) as u8).collect();
        let packed = pack_codes(&codes, bits, rows, cols);
        prop_assert_eq!(unpack_codes(&packed, bits, rows, cols).unwrap(), codes);
    }

    #[test]
    fn rtn_error_bound(w in arb_matrix(), bits in 2u8..=8, group in 1usize..20) {
        let q = rtn_quantize(&w, &cfg(bits, group)).unwrap();
        let d = q.dequantize();
        let (rows, cols) = w.shape();
        for r in 0..rows {
            for c in 0..cols {
                let g = q.grids().grid(r, c);
                let v = w.get(r, c);
                let ulp = f64::EPSILON * v.abs().max(g.scale * max_code(bits) as f64);
                prop_assert!((v - d.get(r, c)).abs() <= g.scale / 2.0 + 4.0 * ulp);
                prop_assert!(q.codes()[r * cols + c] as u32 <= max_code(bits));
            }
        }
    }

    #[test]
    fn rtn_is_idempotent(w in arb_matrix(), bits in 2u8..=8, group in 1usize..20) {
        let q = rtn_quantize(&w, &cfg(bits, group)).unwrap();
        let again = rtn_quantize(&q.dequantize(), &cfg(bits, group)).unwrap();
        prop_assert_eq!(again.codes(), q.codes());
        prop_assert_eq!(again.dequantize(), q.dequantize());
    }

    #[test]
    fn quantized_tensors_round_trip(w in arb_matrix(), bits in prop::sample::select(vec![2u8, 3, 4, 8]), group in 1usize..20) {
        let q = rtn_quantize(&w, &cfg(bits, group)).unwrap();
        let mut t = BTreeMap::new();
        q.to_tensors("x", &mut t);
        let bytes = encode_tensors(&t, None).unwrap();
        let (back, _) = decode_tensors(&bytes).unwrap();
        let (rows, cols) = w.shape();
        let q2 = QuantizedLayer::from_tensors("x", &back, rows, cols, q.attrs()).unwrap();
        prop_assert_eq!(&q2, &q);
        prop_assert_eq!(encode_tensors(&back, None).unwrap(), bytes);
    }
}
