use rayon::prelude::*;

use super::{ConvSpec, DenseBlock, FeatureMap, SparseBlock};
use crate::analysis::{FlopCategory, FlopsLedger};
use crate::error::{MevcError, Result};

fn check_input(input: &FeatureMap, spec: &ConvSpec) -> Result<(usize, usize)> {
    if input.channels() != spec.in_channels() {
        return Err(MevcError::shape(format!(
            "input has {} channels, layer expects {}",
            input.channels(),
            spec.in_channels()
        )));
    }
    spec.output_dims(input.height(), input.width())
}

/// Gathers the zero-padded receptive field of output grid position `(gy, gx)`.
/// The position may lie off the output grid; everything outside the input reads as zero.
pub(crate) fn gather_block(input: &FeatureMap, spec: &ConvSpec, gy: isize, gx: isize, out: &mut DenseBlock) {
    let k = spec.kernel_size();
    let s = spec.stride() as isize;
    let p = spec.padding() as isize;
    let y0 = gy * s - p;
    let x0 = gx * s - p;
    let (h, w) = (input.height() as isize, input.width() as isize);
    let dst = out.data_mut();
    let mut idx = 0;
    for c in 0..input.channels() {
        for dy in 0..k as isize {
            let y = y0 + dy;
            for dx in 0..k as isize {
                let x = x0 + dx;
                dst[idx] = if y >= 0 && y < h && x >= 0 && x < w {
                    input.get(c, y as usize, x as usize)
                } else {
                    0.0
                };
                idx += 1;
            }
        }
    }
}

/// Dense convolution of one receptive-field block into `out[o]`, bias included.
/// Accumulation order is fixed (c, dy, dx), so every path that computes an
/// output pixel densely produces the same bits.
#[inline]
pub(crate) fn dense_at(block: &DenseBlock, spec: &ConvSpec, out: &mut [f32]) {
    let x = block.data();
    for (o, slot) in out.iter_mut().enumerate() {
        let acc = spec.filter(o).iter().zip(x).fold(0.0f32, |acc, (w, v)| acc + w * v);
        *slot = acc + spec.bias().map_or(0.0, |b| b[o]);
    }
}

/// Standard zero-padded 2-D convolution. Cost `2k²·C_in·C_out·H_out·W_out`
/// is booked as dense (key) convolution.
pub fn conv2d(input: &FeatureMap, spec: &ConvSpec, ledger: &mut FlopsLedger) -> Result<FeatureMap> {
    let (out_h, out_w) = check_input(input, spec)?;
    if input.data().iter().any(|v| !v.is_finite()) {
        return Err(MevcError::NonFinite("convolution input"));
    }
    let c_out = spec.out_channels();
    let rows: Vec<Vec<f32>> = (0..out_h)
        .into_par_iter()
        .map(|i| {
            let mut block = DenseBlock::zeros(spec.in_channels(), spec.kernel_size());
            let mut row = vec![0.0f32; out_w * c_out];
            for j in 0..out_w {
                gather_block(input, spec, i as isize, j as isize, &mut block);
                dense_at(&block, spec, &mut row[j * c_out..(j + 1) * c_out]);
            }
            row
        })
        .collect();

    let mut out = FeatureMap::zeros(c_out, out_h, out_w);
    let data = out.data_mut();
    for (i, row) in rows.iter().enumerate() {
        for j in 0..out_w {
            for o in 0..c_out {
                data[(o * out_h + i) * out_w + j] = row[j * c_out + o];
            }
        }
    }
    if out.data().iter().any(|v| !v.is_finite()) {
        return Err(MevcError::NonFinite("convolution output"));
    }
    ledger.charge(FlopCategory::Key, spec.dense_flops(out_h, out_w));
    Ok(out)
}

/// Receptive field of output position `(i, j)` with zeros where it overhangs the frame.
pub fn extract_block(input: &FeatureMap, spec: &ConvSpec, i: usize, j: usize) -> Result<DenseBlock> {
    let (out_h, out_w) = check_input(input, spec)?;
    if i >= out_h || j >= out_w {
        return Err(MevcError::OutOfGrid { i, j, out_h, out_w });
    }
    let mut block = DenseBlock::zeros(spec.in_channels(), spec.kernel_size());
    gather_block(input, spec, i as isize, j as isize, &mut block);
    Ok(block)
}

/// Convolves only the nonzero entries of a residual block. No bias is added.
/// Charges `2·nnz·C_out` to the residual counter.
pub fn conv_sparse_block(block: &SparseBlock, spec: &ConvSpec, ledger: &mut FlopsLedger) -> Result<Vec<f32>> {
    let k = spec.kernel_size();
    for e in &block.entries {
        if e.channel >= spec.in_channels() || e.dy >= k || e.dx >= k {
            return Err(MevcError::KernelBounds {
                channel: e.channel,
                dy: e.dy,
                dx: e.dx,
            });
        }
    }
    let mut out = vec![0.0f32; spec.out_channels()];
    for (o, slot) in out.iter_mut().enumerate() {
        let filter = spec.filter(o);
        *slot = block.entries.iter().fold(0.0f32, |acc, e| {
            acc + filter[(e.channel * k + e.dy) * k + e.dx] * e.value
        });
    }
    ledger.charge(FlopCategory::Residual, 2 * (block.nnz() * spec.out_channels()) as u64);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::SparseEntry;

    /// Independent nested-loop oracle, computed in f64 straight from the
    /// definition of zero-padded strided convolution.
    fn naive_conv(input: &FeatureMap, spec: &ConvSpec) -> Vec<f64> {
        let (c_in, h, w) = input.shape();
        let k = spec.kernel_size();
        let (s, p) = (spec.stride() as i64, spec.padding() as i64);
        let oh = ((h as i64 + 2 * p - k as i64) / s + 1) as usize;
        let ow = ((w as i64 + 2 * p - k as i64) / s + 1) as usize;
        let mut out = vec![0.0f64; spec.out_channels() * oh * ow];
        for o in 0..spec.out_channels() {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = spec.bias().map_or(0.0, |b| b[o] as f64);
                    for c in 0..c_in {
                        for dy in 0..k {
                            for dx in 0..k {
                                let y = i as i64 * s + dy as i64 - p;
                                let x = j as i64 * s + dx as i64 - p;
                                if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
                                    continue;
                                }
                                let wv = spec.weights()[((o * c_in + c) * k + dy) * k + dx];
                                acc += wv as f64 * input.get(c, y as usize, x as usize) as f64;
                            }
                        }
                    }
                    out[(o * oh + i) * ow + j] = acc;
                }
            }
        }
        out
    }

    fn random_spec(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        s: usize,
        p: usize,
        bias: bool,
    ) -> ConvSpec {
        let n = c_out * c_in * k * k;
        let weights = (0..n).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
        let bias = bias.then(|| (0..c_out).map(|_| rng.gen_range(-0.5f32..0.5)).collect());
        ConvSpec::new(c_in, c_out, k, s, p, weights, bias).unwrap()
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen::<f32>()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let input = FeatureMap::from_vec(1, 3, 3, vec![1.0; 9]).unwrap();
        let spec = ConvSpec::new(1, 1, 1, 1, 0, vec![1.0], None).unwrap();
        let mut ledger = FlopsLedger::default();
        let out = conv2d(&input, &spec, &mut ledger).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_flops_charge() {
        // k=3, C_in=4, C_out=16, 8x8 output.
        let input = FeatureMap::zeros(4, 8, 8);
        let spec = ConvSpec::new(4, 16, 3, 1, 1, vec![0.1; 16 * 4 * 9], None).unwrap();
        let mut ledger = FlopsLedger::default();
        conv2d(&input, &spec, &mut ledger).unwrap();
        assert_eq!(ledger.key(), 73_728);
        assert_eq!(ledger.total(), 73_728);
    }

    #[test]
    fn strided_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_map(&mut rng, 3, 16, 16);
        let spec = random_spec(&mut rng, 3, 5, 3, 2, 1, true);
        let out = conv2d(&input, &spec, &mut FlopsLedger::default()).unwrap();
        assert_eq!(out.shape(), (5, 8, 8));
        for (a, b) in out.data().iter().zip(naive_conv(&input, &spec)) {
            assert!((*a as f64 - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_rejects_bad_inputs() {
        let spec = ConvSpec::new(2, 1, 3, 1, 1, vec![0.0; 18], None).unwrap();
        let mut l = FlopsLedger::default();
        assert!(matches!(
            conv2d(&FeatureMap::zeros(1, 4, 4), &spec, &mut l),
            Err(MevcError::Shape(_))
        ));
        assert_eq!(l.total(), 0);
    }

    #[test]
    fn extract_block_examples() {
        let input = FeatureMap::from_vec(1, 4, 4, (0..16).map(|v| v as f32).collect()).unwrap();
        let spec = ConvSpec::new(1, 1, 3, 1, 1, vec![0.0; 9], None).unwrap();
        let b = extract_block(&input, &spec, 0, 0).unwrap();
        assert_eq!(b.data(), &[0., 0., 0., 0., 0., 1., 0., 4., 5.]);
        let b = extract_block(&input, &spec, 1, 1).unwrap();
        assert_eq!(b.data(), &[0., 1., 2., 4., 5., 6., 8., 9., 10.]);
        assert!(matches!(
            extract_block(&input, &spec, 4, 0),
            Err(MevcError::OutOfGrid { .. })
        ));

        let input = FeatureMap::from_vec(1, 5, 5, (0..25).map(|v| v as f32).collect()).unwrap();
        let spec = ConvSpec::new(1, 1, 3, 2, 0, vec![0.0; 9], None).unwrap();
        let b = extract_block(&input, &spec, 1, 1).unwrap();
        // anchored at input (2, 2)
        assert_eq!(b.get(0, 0, 0), 12.0);
        assert_eq!(b.get(0, 2, 2), 24.0);
    }

    #[test]
    fn sparse_block_examples() {
        let spec = ConvSpec::new(2, 4, 3, 1, 1, vec![0.5; 72], Some(vec![9.0; 4])).unwrap();
        let mut l = FlopsLedger::default();
        let out = conv_sparse_block(&SparseBlock::default(), &spec, &mut l).unwrap();
        assert_eq!(out, vec![0.0; 4]);
        assert_eq!(l.total(), 0);

        let one = SparseBlock::new(
            (0, 0),
            vec![SparseEntry {
                channel: 0,
                dy: 1,
                dx: 1,
                value: 2.0,
            }],
        );
        let out = conv_sparse_block(&one, &spec, &mut l).unwrap();
        assert_eq!(out, vec![1.0; 4]);
        assert_eq!(l.residual(), 2 * 4);

        let bad = SparseBlock::new(
            (0, 0),
            vec![SparseEntry {
                channel: 2,
                dy: 0,
                dx: 0,
                value: 1.0,
            }],
        );
        assert!(matches!(
            conv_sparse_block(&bad, &spec, &mut l),
            Err(MevcError::KernelBounds { .. })
        ));
    }

    #[test]
    fn dense_residual_matches_oracle_minus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input = random_map(&mut rng, 3, 6, 6);
        let spec = random_spec(&mut rng, 3, 7, 3, 1, 1, true);
        let oracle = naive_conv(&input, &spec);
        let (oh, ow) = spec.output_dims(6, 6).unwrap();
        for (i, j) in [(0, 0), (2, 3), (5, 5)] {
            let block = extract_block(&input, &spec, i, j).unwrap();
            let sparse = SparseBlock::from_dense((i, j), &block);
            let out = conv_sparse_block(&sparse, &spec, &mut FlopsLedger::default()).unwrap();
            for o in 0..7 {
                let want = oracle[(o * oh + i) * ow + j] - spec.bias().unwrap()[o] as f64;
                assert!((out[o] as f64 - want).abs() <= 1e-5);
            }
        }
    }

    fn sparse_strategy(c: usize, k: usize) -> impl Strategy<Value = SparseBlock> {
        prop::collection::vec((0..c, 0..k, 0..k, -1.0f32..1.0), 0..(c * k * k)).prop_map(|v| {
            SparseBlock::new(
                (0, 0),
                v.into_iter()
                    .map(|(channel, dy, dx, value)| SparseEntry { channel, dy, dx, value })
                    .collect(),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn prop_conv2d_matches_oracle(
            seed in any::<u64>(),
            c_in in 1usize..4,
            c_out in 1usize..5,
            k in prop::sample::select(vec![1usize, 3, 5]),
            s in 1usize..3,
            p in 0usize..2,
            h in 5usize..17,
            w in 5usize..17,
            bias in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let input = random_map(&mut rng, c_in, h, w);
            let spec = random_spec(&mut rng, c_in, c_out, k, s, p, bias);
            let mut l1 = FlopsLedger::default();
            let out = conv2d(&input, &spec, &mut l1).unwrap();
            for (a, b) in out.data().iter().zip(naive_conv(&input, &spec)) {
                prop_assert!((*a as f64 - b).abs() <= 1e-5);
            }
            // determinism of the counters
            let mut l2 = FlopsLedger::default();
            let again = conv2d(&input, &spec, &mut l2).unwrap();
            prop_assert_eq!(out, again);
            prop_assert_eq!(l1, l2);
        }

        #[test]
        fn prop_sparse_conv_is_linear(
            seed in any::<u64>(),
            a in sparse_strategy(3, 3),
            b in sparse_strategy(3, 3),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = random_spec(&mut rng, 3, 6, 3, 1, 1, true);
            let mut l = FlopsLedger::default();
            let ya = conv_sparse_block(&a, &spec, &mut l).unwrap();
            let yb = conv_sparse_block(&b, &spec, &mut l).unwrap();
            let mut ab = a.clone();
            ab.entries.extend(b.entries.iter().copied());
            let yab = conv_sparse_block(&ab, &spec, &mut l).unwrap();
            for o in 0..6 {
                prop_assert!((yab[o] - (ya[o] + yb[o])).abs() <= 1e-5);
            }
        }
    }
}
