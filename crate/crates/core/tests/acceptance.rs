//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! to stderr (uncaptured), then asserts.
//!
//! Run with `cargo test --test acceptance -- --test-threads=1` for clean
//! output and timings that are not skewed by neighbours.

mod common;

use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use proptest::test_runner::{Config, TestCaseError, TestRunner};
use sidetune::cli::epoch_accuracy;
use sidetune::cost::{device_memory_estimate, payload_per_iteration, Mode, ModelSpec};
use sidetune::device::DeviceConfig;
use sidetune::gradcheck::{run_gradcheck, GRADCHECK_SEEDS, GRADCHECK_TOLERANCE};
use sidetune::quant::{nf4_codebook, pack_nibbles, quantize, unpack_nibbles, QuantScheme};
use sidetune::rng::Rng;
use sidetune::server::local_mode;
use sidetune::train::IterationMetrics;
use sidetune::transport::RateLimited;
use sidetune::wire::{encode, FrameReader};
use sidetune::{Exec, Tensor};

use common::*;

const MIB: f64 = 1024.0 * 1024.0;
const GB: f64 = 1e9;

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn within(actual: f64, target: f64, rel: f64) -> bool {
    ((actual - target) / target).abs() <= rel
}

#[test]
fn criterion_1_gradient_correctness() {
    let t = Instant::now();
    let r = run_gradcheck(&GRADCHECK_SEEDS, Exec::default()).unwrap();
    let elapsed = t.elapsed();
    let pass = r.max_rel_err < GRADCHECK_TOLERANCE && elapsed < Duration::from_secs(30);
    verdict(1, pass, &format!("max rel err {:.2e} over {} cases in {elapsed:.1?}", r.max_rel_err, r.cases.len()));
    assert!(pass);
}

#[test]
fn criterion_2_split_matches_local() {
    let t = Instant::now();
    let dev = DeviceConfig { batches_per_epoch: 50, ..toy_device(QuantScheme::NoneFp16, 1) };
    let (_, local) = local_mode(&dev, &toy_server()).unwrap();
    let (_, split) = split_tcp(&dev, &toy_server());
    let bits = |m: &[IterationMetrics]| m.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    let elapsed = t.elapsed();
    let pass = local.metrics.len() == 50 && bits(&local.metrics) == bits(&split.metrics) && elapsed < Duration::from_secs(60);
    verdict(2, pass, &format!("{} vs {} losses, bit-identical: {}, {elapsed:.1?}", local.metrics.len(), split.metrics.len(), bits(&local.metrics) == bits(&split.metrics)));
    assert!(pass);
}

struct ToyRun {
    acc: f64,
    elapsed: Duration,
}

fn toy_run(scheme: QuantScheme) -> ToyRun {
    let t = Instant::now();
    let dev = toy_device(scheme, 20);
    let (_, s) = local_mode(&dev, &toy_server()).unwrap();
    assert_eq!(s.metrics.len(), 500);
    let acc = epoch_accuracy(&dev, &s.params).unwrap();
    ToyRun { acc, elapsed: t.elapsed() }
}

fn fp16_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| toy_run(QuantScheme::NoneFp16))
}

fn majority_baseline() -> f64 {
    let dev = toy_device(QuantScheme::NoneFp16, 1);
    let data = dev.dataset().unwrap();
    let labels: Vec<u32> = (0..dev.batches_per_epoch as u64).flat_map(|i| data.make_batch(i, dev.batch).1).collect();
    let ones = labels.iter().filter(|&&y| y == 1).count() as f64 / labels.len() as f64;
    ones.max(1.0 - ones)
}

#[test]
fn criterion_3_toy_convergence() {
    let r = fp16_run();
    let base = majority_baseline();
    let pass = r.acc >= 0.95 && r.elapsed < Duration::from_secs(120);
    verdict(3, pass, &format!("train acc {:.4} after 500 iterations, majority baseline {base:.4}, {:.1?}", r.acc, r.elapsed));
    assert!(pass);
}

#[test]
fn criterion_4_quantization_robustness() {
    let base = fp16_run().acc;
    let nf4 = toy_run(QuantScheme::Nf4).acc;
    let fp4 = toy_run(QuantScheme::Fp4Grid).acc;
    let pass = (nf4 - base).abs() <= 0.02 && (fp4 - base).abs() <= 0.04;
    verdict(4, pass, &format!("fp16 {base:.4}, nf4 {nf4:.4} (limit 2 points), fp4 {fp4:.4} (limit 4 points)"));
    assert!(pass);
}

#[test]
fn criterion_5_payload_accounting() {
    let mib = |spec: &ModelSpec, q| payload_per_iteration(spec, q) as f64 / MIB;
    let (s350, s13) = (ModelSpec::opt350m(), ModelSpec::opt1_3b());
    let rows = [
        (mib(&s350, QuantScheme::NoneFp16), 190.0, 0.05),
        (mib(&s350, QuantScheme::Nf4), 49.2, 0.05),
        (mib(&s13, QuantScheme::NoneFp16), 400.0, 0.10),
        (mib(&s13, QuantScheme::Nf4), 100.2, 0.10),
    ];
    let table_ok = rows.iter().all(|&(a, t, tol)| within(a, t, tol));

    // the toy session measured on a loopback socket
    let mut wire_ok = true;
    let mut worst = 0.0f64;
    for scheme in [QuantScheme::NoneFp16, QuantScheme::Nf4] {
        let dev = DeviceConfig { batches_per_epoch: 5, ..toy_device(scheme, 1) };
        let (d, _) = split_tcp(&dev, &toy_server());
        let spec = ModelSpec {
            name: "toy".into(),
            layers: dev.layers,
            hidden: dev.hidden,
            heads: dev.heads,
            seq: dev.seq,
            batch: dev.batch,
            gamma: 4,
            ..ModelSpec::opt350m()
        };
        let predicted = payload_per_iteration(&spec, scheme) as f64;
        for r in &d.records {
            let err = (r.bytes as f64 - predicted).abs() / predicted;
            worst = worst.max(err);
            wire_ok &= err <= 0.01;
        }
        wire_ok &= d.act_bytes as f64 == predicted * d.iterations as f64;
    }
    let pass = table_ok && wire_ok;
    verdict(
        5,
        pass,
        &format!(
            "opt350m {:.1}/{:.1} MiB, opt1.3b {:.1}/{:.1} MiB, worst wire deviation {:.2}%",
            rows[0].0,
            rows[1].0,
            rows[2].0,
            rows[3].0,
            worst * 100.0
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_memory_accounting() {
    let spec = ModelSpec::opt1_3b();
    let full = device_memory_estimate(&spec, Mode::FullFt, QuantScheme::Nf4).unwrap();
    let mob = device_memory_estimate(&spec, Mode::Offload, QuantScheme::Nf4).unwrap();
    let weights = spec.params * 2.0 / GB;
    let acts = full.activation_bytes / GB;
    let pass = within(weights, 2.509, 0.10)
        && full.weights_bytes == spec.params * 2.0
        && within(acts, 10.859, 0.10)
        && mob.optimizer_bytes == 0.0;
    verdict(
        6,
        pass,
        &format!("weights {weights:.3} GB, full-FT activations {acts:.3} GB, offloaded optimizer {} B", mob.optimizer_bytes),
    );
    assert!(pass);
}

struct OverlapRun {
    pipelined: Duration,
    serial: Duration,
    t_send: Duration,
}

fn overlap_run() -> &'static OverlapRun {
    static RUN: OnceLock<OverlapRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let t_fwd = Duration::from_millis(40);
        let base = DeviceConfig { queue_depth: 2, min_compute: Some(t_fwd), ..tiny_device(20) };
        let frame = common::act_frame_len(&base);
        // one frame takes exactly 2 × t_fwd on the link
        let rate = frame as f64 * 8.0 / (2.0 * t_fwd.as_secs_f64());
        let t_send = RateLimited::new(std::io::sink(), rate).transmit_time(frame);
        let cfg = DeviceConfig { rate_bps: Some(rate), ..base };
        let (p, _) = local_mode(&cfg, &tiny_server()).unwrap();
        let (s, _) = local_mode(&DeviceConfig { serial: true, ..cfg }, &tiny_server()).unwrap();
        OverlapRun { pipelined: p.wall, serial: s.wall, t_send }
    })
}

#[test]
fn criterion_7_overlap_bound() {
    let r = overlap_run();
    let bound = r.t_send.mul_f64(1.15 * 20.0);
    let speedup = r.serial.as_secs_f64() / r.pipelined.as_secs_f64();
    let bound_ok = r.pipelined <= bound;
    let pass = bound_ok && speedup >= 1.8;
    verdict(
        7,
        pass,
        &format!(
            "pipelined {:.2?} vs bound {bound:.2?} ({}), serial {:.2?}, speedup {speedup:.2}x vs 1.8x required; \
             with t_send = 2 t_fwd the serial/pipelined ratio cannot exceed 1.5x",
            r.pipelined,
            if bound_ok { "met" } else { "missed" },
            r.serial
        ),
    );
    assert!(bound_ok, "pipelined wall {:?} exceeds {bound:?}", r.pipelined);
}

/// The speedup half of criterion 7 as stated. It cannot hold when sending
/// takes twice as long as computing: overlap saves at most the compute
/// time, a ratio of (1 + 2) / 2 = 1.5.
#[test]
#[ignore = "speedup of 1.8x is unreachable at t_send = 2 t_fwd; see criterion_7_overlap_bound"]
fn criterion_7_speedup_strict() {
    let r = overlap_run();
    let speedup = r.serial.as_secs_f64() / r.pipelined.as_secs_f64();
    assert!(speedup >= 1.8, "speedup {speedup:.2}x");
}

#[test]
fn criterion_8_quantizer_properties() {
    // nf4 against a linear nearest-entry search
    let cb = nf4_codebook();
    let mut rng = Rng::new(8);
    let x = Tensor::<f32>::randn(&[1, 1, 10_000], 1.0, &mut rng);
    let q = quantize(&x, QuantScheme::Nf4).unwrap();
    let got = unpack_nibbles(&q.codes, x.len());
    let mut nf4_mismatch = 0;
    for (v, &code) in x.data().iter().zip(&got) {
        let u = (v / q.scale) as f64;
        let mut best = 0;
        for k in 1..16 {
            if (u - cb[k] as f64).abs() < (u - cb[best] as f64).abs() {
                best = k;
            }
        }
        nf4_mismatch += usize::from(best as u8 != code);
    }

    // fp4 codes under positive rescaling
    let mut fp4_mismatch = 0;
    let mut trials = 0;
    for seed in 0..20 {
        let mut rng = Rng::new(100 + seed);
        let x = Tensor::<f32>::randn(&[4, 8, 32], 1.0, &mut rng);
        let base = quantize(&x, QuantScheme::Fp4Grid).unwrap().codes;
        for c in [0.001f32, 0.37, 1.0, 2.0, 3.14159, 1e3, (rng.uniform() * 10.0 + 0.01) as f32] {
            let mut y = x.clone();
            y.data_mut().iter_mut().for_each(|v| *v *= c);
            fp4_mismatch += usize::from(quantize(&y, QuantScheme::Fp4Grid).unwrap().codes != base);
            trials += 1;
        }
    }

    // every nibble pair, and odd lengths
    let mut pack_ok = true;
    for b in 0..=255u8 {
        let pair = [b & 0x0f, b >> 4];
        pack_ok &= pack_nibbles(&pair) == [b] && unpack_nibbles(&[b], 2) == pair;
        pack_ok &= unpack_nibbles(&pack_nibbles(&pair[..1]), 1) == pair[..1];
    }
    let all: Vec<u8> = (0..16u8).cycle().take(33).collect();
    pack_ok &= unpack_nibbles(&pack_nibbles(&all), all.len()) == all;

    let pass = nf4_mismatch == 0 && fp4_mismatch == 0 && pack_ok;
    verdict(
        8,
        pass,
        &format!("nf4 {nf4_mismatch}/10000 mismatches, fp4 {fp4_mismatch}/{trials} rescalings changed codes, nibble round trip {pack_ok}"),
    );
    assert!(pass);
}

#[test]
fn criterion_9_protocol() {
    let mut runner = TestRunner::new(Config { cases: 1000, ..Config::default() });
    let strategy = (
        proptest::collection::vec(message(), 1..4),
        proptest::collection::vec(1usize..64, 1..6),
    );
    let roundtrip = runner.run(&strategy, |(msgs, sizes)| {
        let stream: Vec<u8> = msgs.iter().flat_map(|m| encode(m).unwrap()).collect();
        let mut reader = FrameReader::new(Chunked::new(stream, sizes));
        let mut got = Vec::new();
        while let Some((m, _)) = reader.next_message().map_err(|e| TestCaseError::fail(e.to_string()))? {
            got.push(m);
        }
        if got == msgs {
            Ok(())
        } else {
            Err(TestCaseError::fail("decoded messages differ"))
        }
    });

    let a = recorded_session(&tiny_device(2), &tiny_server());
    let b = recorded_session(&tiny_device(2), &tiny_server());
    let golden = a.up.bytes() == b.up.bytes()
        && a.down.bytes() == b.down.bytes()
        && golden_matches("transcript_up.hex", &hex(&a.up.bytes()))
        && golden_matches("transcript_down.hex", &hex(&a.down.bytes()));

    let dev = DeviceConfig { fetch_checkpoint: true, ..toy_device(QuantScheme::Nf4, 1) };
    let r = recorded_session(&dev, &toy_server());
    let one_way = check_one_way(&r.up.bytes(), &r.down.bytes(), &token_rows(&dev));

    let pass = roundtrip.is_ok() && golden && one_way.is_ok();
    verdict(
        9,
        pass,
        &format!(
            "1000 fragmented round trips: {}, golden transcript stable: {golden}, one-way contract: {}",
            roundtrip.as_ref().map_or_else(|e| e.to_string(), |_| "ok".into()),
            one_way.as_ref().map_or_else(|e| e.clone(), |_| "ok".into())
        ),
    );
    assert!(pass);
}
