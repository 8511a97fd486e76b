//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the PASS/FAIL lines always show up in `cargo test` output.

use std::time::Instant;

use mevc::analysis::{model_conv_flops, model_mevc_flops, CandidateCount};
use mevc::bayer::{self, BayerFrame, BayerPattern};
use mevc::experiment::{self, ExperimentConfig, SweepAxis};
use mevc::gop::{run_sequence, GopConfig, Network};
use mevc::synth::{self, SceneKind, SceneSpec};
use mevc::{Activation, ConvSpec, FeatureMap, FlopsLedger, LayerParams, MevcLayer, MotionParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

/// Dense reference: direct convolution in f64, bias, then activation.
fn oracle_layer(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    spec: &ConvSpec,
    act: Activation,
) -> (Vec<f64>, (usize, usize, usize)) {
    let (k, s, p) = (spec.kernel_size(), spec.stride(), spec.padding());
    let co = spec.out_channels();
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let wts = spec.weights();
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        let b = spec.bias().map_or(0.0, |b| b[o] as f64);
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b;
                for ci in 0..c {
                    for dy in 0..k {
                        for dx in 0..k {
                            let y = (i * s + dy) as isize - p as isize;
                            let xx = (j * s + dx) as isize - p as isize;
                            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                continue;
                            }
                            let wv = wts[((o * c + ci) * k + dy) * k + dx] as f64;
                            acc += wv * x[(ci * h + y as usize) * w + xx as usize];
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = match act {
                    Activation::Relu => acc.max(0.0),
                    Activation::Identity => acc,
                };
            }
        }
    }
    (out, (co, oh, ow))
}

fn oracle_net(net: &Network, frame: &FeatureMap) -> Vec<f64> {
    let mut x: Vec<f64> = frame.data().iter().map(|&v| v as f64).collect();
    let mut shape = frame.shape();
    for l in net.layers() {
        let (y, s) = oracle_layer(&x, shape, l.spec(), l.params().activation);
        x = y;
        shape = s;
    }
    x
}

#[derive(Debug, Clone)]
struct RandomCase {
    net: Network,
    frames: Vec<FeatureMap>,
    label: String,
}

fn random_case(seed: u64) -> RandomCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.gen_range(1..=4);
    let c_in = rng.gen_range(1..=8);
    let h = rng.gen_range(8..=32);
    let w = rng.gen_range(8..=32);
    let mut layers = Vec::new();
    let mut c = c_in;
    let (mut ch, mut cw) = (h, w);
    let mut label = format!("{c_in}x{h}x{w}");
    for d in 0..depth {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let s = rng.gen_range(1..=2);
        let mut p = rng.gen_range(0..=k / 2);
        while ch + 2 * p < k || cw + 2 * p < k {
            p += 1;
        }
        let co = if d + 1 == depth {
            rng.gen_range(1..=32)
        } else {
            rng.gen_range(1..=8)
        };
        let bound = (6.0 / (c * k * k) as f32).sqrt();
        let wts = (0..co * c * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
        let bias = (0..co).map(|_| rng.gen_range(-0.2f32..0.2)).collect();
        let spec = ConvSpec::new(c, co, k, s, p, wts, Some(bias)).unwrap();
        (ch, cw) = spec.output_dims(ch, cw).unwrap();
        let params = LayerParams {
            motion: MotionParams {
                search_range: rng.gen_range(0..=2),
                threshold: 0.0,
                early_stop_density: if rng.gen_bool(0.5) {
                    Some(rng.gen_range(0.0..0.6))
                } else {
                    None
                },
                match_max_density: if rng.gen_bool(0.5) { 0.9 } else { 1.0 },
            },
            activation: if d + 1 < depth && rng.gen_bool(0.7) {
                Activation::Relu
            } else {
                Activation::Identity
            },
            compensate: true,
        };
        label += &format!(" -> k{k}s{s}p{p}c{co}");
        layers.push(MevcLayer::new(spec, params).unwrap());
        c = co;
    }
    let kind = [
        SceneKind::GlobalTranslate,
        SceneKind::BlockTranslate,
        SceneKind::NoiseMix,
        SceneKind::Static,
    ][rng.gen_range(0..4)];
    let mut scene = SceneSpec::new(kind, h, w, 12)
        .with_channels(c_in)
        .with_seed(seed)
        .with_motion(rng.gen_range(-2..=2), rng.gen_range(-2..=2));
    if kind == SceneKind::NoiseMix {
        scene = scene.with_noise(0.05);
    }
    RandomCase {
        net: Network::new(layers).unwrap(),
        frames: synth::generate(&scene).unwrap(),
        label,
    }
}

const N_CASES: u64 = 60;

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0f64;
    for seed in 0..N_CASES {
        let mut case = random_case(seed);
        let run = run_sequence(&mut case.net, &case.frames, GopConfig { gop_length: 12 }, false)
            .map_err(|e| format!("case {seed}: {e}"))?;
        for (t, (frame, out)) in case.frames.iter().zip(&run.outputs).enumerate() {
            let want = oracle_net(&case.net, frame);
            let err = out
                .data()
                .iter()
                .zip(&want)
                .map(|(a, b)| (*a as f64 - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(err);
            if err > 1e-4 {
                return Err(format!("case {seed} ({}), frame {t}: max|err| {err:.3e}", case.label));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        return Err(format!("took {secs:.1}s, budget 120s"));
    }
    Ok(format!(
        "{N_CASES} configs x 12 frames, max|err| {worst:.2e}, {secs:.1}s"
    ))
}

fn criterion_2() -> Outcome {
    let mut layer_frames = 0;
    for seed in 0..N_CASES {
        let mut case = random_case(seed);
        for l in case.net.layers_mut() {
            let mut p = *l.params();
            p.motion.early_stop_density = None;
            l.set_params(p).unwrap();
        }
        let run = run_sequence(&mut case.net, &case.frames, GopConfig { gop_length: 12 }, false)
            .map_err(|e| format!("case {seed}: {e}"))?;
        for rec in &run.frames {
            for (li, lr) in rec.layers.iter().enumerate() {
                let led: &FlopsLedger = &lr.ledger;
                let where_ = format!("case {seed}, frame {}, layer {li}", rec.index);
                match &lr.stats {
                    None => {
                        let m = lr.dims.cost_model(0.0, 0.0);
                        let conv = model_conv_flops(&m).unwrap();
                        if led.key() != conv || led.mevc() != 0 {
                            return Err(format!("{where_}: key {} vs model {conv}", led.key()));
                        }
                    }
                    Some(st) => {
                        let m = lr.dims.cost_model(st.alpha(), st.beta());
                        let b = model_mevc_flops(&m, CandidateCount::Exact).unwrap();
                        let got = (led.me(), led.unmatched(), led.residual());
                        if got != (b.me, b.unmatched, b.res) || led.key() != 0 {
                            return Err(format!("{where_}: ledger {got:?} vs model {b:?}"));
                        }
                        layer_frames += 1;
                    }
                }
            }
        }
    }
    Ok(format!("{layer_frames} non-key layer-frames equal term by term"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut checked = 0usize;
    let mut cases = 0usize;
    for seed in 0..40u64 {
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let s = rng.gen_range(1..=2);
        let r = rng.gen_range(1..=2);
        let d = rng.gen_range(-(r as i32)..=r as i32);
        let c_in = rng.gen_range(1..=4);
        let (h, w) = (rng.gen_range(16..=32), rng.gen_range(16..=32));
        let p = k / 2;
        let spec = ConvSpec::new(c_in, 4, k, s, p, vec![0.1; 4 * c_in * k * k], None).unwrap();
        let params = LayerParams {
            motion: MotionParams {
                search_range: r,
                threshold: 0.0,
                ..MotionParams::default()
            },
            ..LayerParams::default()
        };
        let mut layer = MevcLayer::new(spec.clone(), params).unwrap();
        let dx = s as i32 * d;
        let scene = SceneSpec::new(SceneKind::GlobalTranslate, h, w, 2)
            .with_channels(c_in)
            .with_seed(seed)
            .with_motion(dx, 0);
        let frames = synth::generate(&scene).unwrap();
        let truth = synth::expected_motion(&scene, 1, &spec).unwrap();
        let mut ledger = FlopsLedger::default();
        layer.forward_key(&frames[0], &mut ledger).unwrap();
        let (_, field) = layer.forward_nonkey(&frames[1], &mut ledger).unwrap();
        let (oh, ow) = spec.output_dims(h, w).unwrap();
        for i in 0..oh {
            for j in 0..ow {
                let y0 = (i * s) as i64 - p as i64;
                let x0 = (j * s) as i64 - p as i64;
                let (k, hh, ww, sh) = (k as i64, h as i64, w as i64, dx as i64);
                // Receptive field and its translated source both inside the frame.
                if y0 < 0 || y0 + k > hh || x0.min(x0 + sh) < 0 || x0.max(x0 + sh) + k > ww {
                    continue;
                }
                checked += 1;
                let pm = field.get(i, j);
                let want = truth[i * ow + j].expect("global translation has ground truth");
                match &pm.matched {
                    Some(m) if m.mv == want && m.residual.is_empty() => {}
                    other => {
                        return Err(format!(
                            "seed {seed} k{k}s{s}R{r} d{d}: ({i},{j}) got {other:?}, want {want:?}"
                        ))
                    }
                }
            }
        }
        cases += 1;
    }
    Ok(format!("{checked} interior positions over {cases} scenes recovered"))
}

fn criterion_4() -> Outcome {
    let rgb = synth::generate(&SceneSpec::new(SceneKind::Static, 128, 128, 3).with_seed(4)).unwrap();
    let frames: Vec<FeatureMap> = rgb
        .iter()
        .map(|f| bayer::pack(&bayer::mosaic(f, BayerPattern::Rggb).unwrap()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let wts = (0..64 * 4 * 9).map(|_| rng.gen_range(-0.3f32..0.3)).collect();
    let spec = ConvSpec::new(4, 64, 3, 1, 1, wts, Some(vec![0.0; 64])).unwrap();
    let params = LayerParams {
        motion: MotionParams {
            search_range: 1,
            early_stop_density: None,
            ..MotionParams::default()
        },
        ..LayerParams::default()
    };
    let mut net = Network::new(vec![MevcLayer::new(spec, params).unwrap()]).unwrap();
    let run = run_sequence(&mut net, &frames, GopConfig { gop_length: 12 }, false).unwrap();
    let dense = run.dense_frame_flops as f64;
    let want = 100.0 * (1.0 - 9.0 / 64.0);
    let mut detail = Vec::new();
    for rec in run.frames.iter().filter(|r| !r.key) {
        let saved = 100.0 * (1.0 - rec.ledger.total() as f64 / dense);
        if (saved - want).abs() > 0.5 {
            return Err(format!("frame {}: savings {saved:.4}% vs {want:.4}%", rec.index));
        }
        detail.push(format!("{saved:.4}%"));
    }
    Ok(format!(
        "64x64 packed input, non-key savings {} vs {want:.4}%",
        detail.join(", ")
    ))
}

fn criterion_5() -> Outcome {
    let cfg = ExperimentConfig {
        seed: 5,
        ..Default::default()
    };
    let rgb = synth::generate(&SceneSpec::new(SceneKind::Static, 32, 32, 120).with_seed(5)).unwrap();
    let frames: Vec<FeatureMap> = rgb
        .iter()
        .map(|f| bayer::pack(&bayer::mosaic(f, BayerPattern::Rggb).unwrap()))
        .collect();
    let mut net = experiment::default_network(4, &cfg).unwrap();
    let values = [2.0, 4.0, 6.0, 8.0, 10.0, 12.0];
    let r = experiment::sweep(
        &mut net,
        &frames,
        &cfg,
        SweepAxis::Gop,
        &values,
        serde_json::Value::Null,
    )
    .map_err(|e| e.to_string())?;
    let d: Vec<f64> = r.rows.iter().map(|row| row.delta_flops_pct).collect();
    let inc: Vec<f64> = d.windows(2).map(|w| w[1] - w[0]).collect();
    let table = d.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" ");
    if inc.iter().any(|&x| x <= 0.0) {
        return Err(format!("savings not strictly increasing: {table}"));
    }
    if inc.windows(2).any(|w| w[1] >= w[0]) {
        return Err(format!("increments not strictly diminishing: {table}"));
    }
    Ok(format!("savings % over L=2..12: {table}"))
}

fn noisy_frames(n: usize, seed: u64) -> Vec<FeatureMap> {
    let spec = SceneSpec::new(SceneKind::NoiseMix, 48, 48, n)
        .with_motion(2, 0)
        .with_noise(0.03)
        .with_seed(seed);
    synth::generate(&spec)
        .unwrap()
        .iter()
        .map(|f| bayer::pack(&bayer::mosaic(f, BayerPattern::Rggb).unwrap()))
        .collect()
}

fn criterion_6() -> Outcome {
    let cfg = ExperimentConfig {
        oracle: true,
        seed: 6,
        ..Default::default()
    };
    let frames = noisy_frames(24, 6);
    let mut net = experiment::default_network(4, &cfg).unwrap();
    let r = experiment::sweep(
        &mut net,
        &frames,
        &cfg,
        SweepAxis::Threshold,
        &[0.0, 0.01, 0.05, 0.1],
        serde_json::Value::Null,
    )
    .map_err(|e| e.to_string())?;
    let flops: Vec<u64> = r.rows.iter().map(|x| x.total_flops).collect();
    let err: Vec<f64> = r.rows.iter().map(|x| x.oracle_mean_abs.unwrap()).collect();
    let maxerr: Vec<f32> = r.rows.iter().map(|x| x.oracle_max_abs.unwrap()).collect();
    let detail = format!("FLOPs {flops:?}, mean|err| {err:.3?}, max|err| {maxerr:.3?}");
    if flops.windows(2).any(|w| w[1] > w[0]) {
        return Err(format!("FLOPs increase with tau: {detail}"));
    }
    if err.windows(2).any(|w| w[1] < w[0]) || maxerr.windows(2).any(|w| w[1] < w[0]) {
        return Err(format!("error decreases with tau: {detail}"));
    }
    Ok(detail)
}

fn criterion_7() -> Outcome {
    let cfg = ExperimentConfig {
        seed: 7,
        ..Default::default()
    };
    let frames = noisy_frames(12, 7);
    let mut net = experiment::default_network(4, &cfg).unwrap();
    let r = experiment::verify(&mut net, &frames, &cfg, serde_json::Value::Null).map_err(|e| e.to_string())?;
    let summary = r
        .settings
        .iter()
        .map(|s| format!("s{}: {:.1}% err {:.1e}", s.setting, s.delta_flops_pct, s.max_abs_err))
        .collect::<Vec<_>>()
        .join("; ");
    if r.passed {
        Ok(summary)
    } else {
        Err(format!("{summary}\n{}", r.matrix()))
    }
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut n = 0;
    for pattern in BayerPattern::ALL {
        let rgb = FeatureMap::from_fn(3, 10, 14, |_, _, _| rng.gen::<f32>()).unwrap();
        let m = bayer::mosaic(&rgb, pattern).unwrap();
        for y in 0..10 {
            for x in 0..14 {
                let c = pattern.site(y, x).rgb_channel();
                if m.get(y, x).to_bits() != rgb.get(c, y, x).to_bits() {
                    return Err(format!("{pattern}: mosaic altered ({y},{x})"));
                }
            }
        }
        if bayer::unpack(&bayer::pack(&m), pattern).unwrap() != m {
            return Err(format!("{pattern}: unpack(pack) differs"));
        }
        let packed = bayer::pack(&m);
        if bayer::pack(&bayer::unpack(&packed, pattern).unwrap()) != packed {
            return Err(format!("{pattern}: pack(unpack) differs"));
        }
        for depth in [8u32, 16] {
            let max = ((1u32 << depth) - 1) as f32;
            let frames: Vec<BayerFrame> = (0..3)
                .map(|_| {
                    let plane = (0..10 * 14)
                        .map(|_| rng.gen_range(0..=max as u32) as f32 / max)
                        .collect();
                    BayerFrame::new(pattern, 10, 14, plane).unwrap()
                })
                .collect();
            let rp = dir.path().join(format!("{pattern}{depth}.raw"));
            let sp = dir.path().join(format!("{pattern}{depth}.json"));
            bayer::write_raw_sequence(&frames, depth, &rp, &sp).unwrap();
            let bytes = std::fs::read(&rp).unwrap();
            let back: Vec<BayerFrame> = bayer::load_raw_sequence(&rp, &sp)
                .unwrap()
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let bit_equal = back.len() == frames.len()
                && back.iter().zip(&frames).all(|(a, b)| {
                    a.pattern() == b.pattern()
                        && a.plane().iter().zip(b.plane()).all(|(x, y)| x.to_bits() == y.to_bits())
                });
            if !bit_equal {
                return Err(format!("{pattern} {depth}-bit: reloaded frames differ"));
            }
            let (_, again) = bayer::encode_raw(&back, depth).unwrap();
            if again != bytes {
                return Err(format!("{pattern} {depth}-bit: re-encoded bytes differ"));
            }
            n += 1;
        }
    }
    Ok(format!("4 patterns, {n} raw files bit-exact"))
}

fn determinism_run(threads: usize) -> Vec<u8> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let cfg = ExperimentConfig {
            oracle: true,
            gop_length: 4,
            seed: 9,
            ..Default::default()
        };
        let frames = noisy_frames(8, 9);
        let mut net = experiment::default_network(4, &cfg).unwrap();
        let (report, run) = experiment::run_experiment(&mut net, &frames, &cfg, serde_json::Value::Null).unwrap();
        let mut bytes = report.to_json().unwrap();
        for out in &run.outputs {
            bytes.extend(out.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        bytes
    })
}

fn criterion_9() -> Outcome {
    let a = determinism_run(1);
    let b = determinism_run(4);
    let c = determinism_run(4);
    if a != b {
        return Err("1-thread and 4-thread runs differ".into());
    }
    if b != c {
        return Err("repeated 4-thread runs differ".into());
    }
    Ok(format!(
        "report + outputs identical across 1/4 threads ({} bytes)",
        a.len()
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("lossless decomposition vs dense oracle", criterion_1),
        ("exact counter/model reconciliation", criterion_2),
        ("motion vector recovery", criterion_3),
        ("acceleration formula on static scene", criterion_4),
        ("GOP sweep trend", criterion_5),
        ("threshold sweep trend", criterion_6),
        ("four-setting ablation", criterion_7),
        ("Bayer round trips", criterion_8),
        ("determinism across thread counts", criterion_9),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("criterion {} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
