//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use hyperscope::protocol::MAX_PAYLOAD_LEN;
use hyperscope::report::config::*;
use hyperscope::report::json::to_canonical_string;
use hyperscope::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_logits(r: &mut ChaCha8Rng, v: usize, spread: f64) -> Vec<f64> {
    (0..v).map(|_| r.gen_range(-spread..spread)).collect()
}

fn synth(seed: u64, k: usize, r: f64, scale: f64, vocab: usize) -> SyntheticModel {
    SyntheticModel::new(SyntheticModelParams::new(seed, k, r, scale), vocab).unwrap()
}

fn pair_trace(seed: u64, vocab: usize, len: usize) -> TeacherForcedTrace {
    let a = synth(seed, 3, 0.0, 4.0, vocab);
    let b = synth(seed + 1000, 3, 2.0, 4.0, vocab);
    gen_synthetic_trace(&a, &b, &random_tokens(seed, len, vocab), false).unwrap()
}

fn rank_preservation() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let temps = [0.1, 0.59, 1.0, 3.0];
    for i in 0..1000 {
        let z = LogitVector::new(random_logits(&mut r, 50, 10.0)).unwrap();
        let base = ranks_of(&z);
        for &t in &temps {
            check(ranks_of(&z.scaled(t).unwrap()) == base, || {
                format!("vector {i}, T = {t}")
            })?;
        }
    }
    for seed in 0..20 {
        let tr = pair_trace(seed, 50, 50);
        let mut tr_r = rng(100 + seed);
        let per_pos: Vec<f32> = (0..tr.positions())
            .map(|_| temps[tr_r.gen_range(0..temps.len())] as f32)
            .collect();
        let scaled = tr
            .map_logits(Model::B, |t, row| {
                row.iter_mut().for_each(|x| *x /= per_pos[t])
            })
            .unwrap();
        check(
            top1_agreement(&tr).unwrap() == top1_agreement(&scaled).unwrap(),
            || format!("top1_agreement changed, trace {seed}"),
        )?;
        check(
            provenance_histogram(&tr) == provenance_histogram(&scaled),
            || format!("provenance changed, trace {seed}"),
        )?;
        check(
            spearman_rho_per_step(&tr).unwrap() == spearman_rho_per_step(&scaled).unwrap(),
            || format!("spearman changed, trace {seed}"),
        )?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(5), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "1000 vectors x 4 temperatures, 20 traces, {elapsed:.2?}"
    ))
}

fn solver_soundness() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let v = r.gen_range(2..=128);
        let spread = r.gen_range(0.5..30.0);
        let z = LogitVector::new(random_logits(&mut r, v, spread)).unwrap();
        let ln_v = (v as f64).ln();
        let target = r.gen_range(0.05..ln_v - 0.05);
        let s = solve_temperature_for_entropy(&z, target, SolverOptions::default())
            .map_err(|e| format!("case {i}: {e}"))?;
        let h = entropy(&softmax_with_temperature(&z, s.t_star).unwrap());
        let err = (h - target).abs();
        worst = worst.max(err);
        check(!s.clamped && err <= 1e-6, || {
            format!("case {i}: V = {v}, target {target}, |err| = {err:e}")
        })?;
    }
    for i in 0..1000 {
        let v = r.gen_range(2..=128);
        let z = LogitVector::new(random_logits(&mut r, v, 10.0)).unwrap();
        let t1 = r.gen_range(0.01..10.0);
        let t2 = t1 * r.gen_range(1.0001..10.0);
        let h1 = entropy(&softmax_with_temperature(&z, t1).unwrap());
        let h2 = entropy(&softmax_with_temperature(&z, t2).unwrap());
        check(h1 <= h2 + 1e-12, || {
            format!("monotonicity case {i}: H({t1}) = {h1} > H({t2}) = {h2}")
        })?;
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(10), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "1000 solves, worst |err| {worst:.1e}; 1000 monotone pairs; {elapsed:.2?}"
    ))
}

fn choose(n: u64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn statistics_oracles() -> Outcome {
    let mut r = rng(3);
    // Spearman: tie-free permutations against 1 - 6 sum d^2 / (n (n^2 - 1)).
    for i in 0..500 {
        let n = r.gen_range(3..200usize);
        let x: Vec<f64> = (0..n).map(|j| j as f64 + r.gen_range(0.0..0.5)).collect();
        let mut y: Vec<f64> = (0..n).map(|j| j as f64 * 1.5).collect();
        for j in (1..n).rev() {
            y.swap(j, r.gen_range(0..=j));
        }
        // x is increasing, so rank(x_j) = j + 1; y holds distinct multiples of 1.5.
        let ry: Vec<u64> = y.iter().map(|v| (v / 1.5) as u64 + 1).collect();
        let d2: u64 = ry
            .iter()
            .enumerate()
            .map(|(j, &ryj)| (j as u64 + 1).abs_diff(ryj).pow(2))
            .sum();
        let nn = n as f64;
        let oracle = 1.0 - 6.0 * d2 as f64 / (nn * (nn * nn - 1.0));
        let got = spearman_test(&x, &y).unwrap().statistic;
        check(got == oracle, || {
            format!("spearman case {i}: {got} vs {oracle}")
        })?;
        let ra: Vec<u32> = (1..=n as u32).collect();
        let rb: Vec<u32> = ry.iter().map(|&v| v as u32).collect();
        let from_ranks = spearman_from_ranks(&ra, &rb);
        check(from_ranks == oracle, || {
            format!("spearman ranks case {i}: {from_ranks} vs {oracle}")
        })?;
    }
    // Binomial: exhaustive pmf summation.
    let mut binom_cases = 0;
    for &p0 in &[0.3f64, 0.5] {
        for n in 1..=30u64 {
            let pmf: Vec<f64> = (0..=n)
                .map(|i| choose(n, i) * p0.powi(i as i32) * (1.0 - p0).powi((n - i) as i32))
                .collect();
            for k in 0..=n {
                let upper: f64 = pmf[k as usize..].iter().sum();
                let cut = pmf[k as usize] * (1.0 + 1e-7);
                let two: f64 = pmf.iter().filter(|&&p| p <= cut).sum();
                let got1 = binomial_test(k, n, p0, false).unwrap().p_value;
                let got2 = binomial_test(k, n, p0, true).unwrap().p_value;
                check((got1 - upper.min(1.0)).abs() <= 1e-12, || {
                    format!("binomial one-sided k={k} n={n} p0={p0}: {got1} vs {upper}")
                })?;
                check((got2 - two.min(1.0)).abs() <= 1e-12, || {
                    format!("binomial two-sided k={k} n={n} p0={p0}: {got2} vs {two}")
                })?;
                binom_cases += 1;
            }
        }
    }
    // Welch: direct formula with an independent t distribution.
    for i in 0..100 {
        let na = r.gen_range(2..60);
        let nb = r.gen_range(2..60);
        let shift = r.gen_range(-2.0..2.0);
        let a: Vec<f64> = (0..na).map(|_| r.gen_range(0.0..3.0)).collect();
        let b: Vec<f64> = (0..nb)
            .map(|_| r.gen_range(0.0..1.0) * 2.0 + shift)
            .collect();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let var = |x: &[f64]| {
            let m = mean(x);
            x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
        };
        let (sa, sb) = (var(&a) / na as f64, var(&b) / nb as f64);
        let t = (mean(&a) - mean(&b)) / (sa + sb).sqrt();
        let dof = (sa + sb).powi(2) / (sa * sa / (na - 1) as f64 + sb * sb / (nb - 1) as f64);
        let p = 2.0 * StudentsT::new(0.0, 1.0, dof).unwrap().cdf(-t.abs());
        let got = welch_t_test(&a, &b, true).unwrap();
        let gd = got.dof.unwrap();
        check(
            (got.statistic - t).abs() <= 1e-9 * t.abs().max(1.0)
                && (gd - dof).abs() <= 1e-9 * dof
                && (got.p_value - p).abs() <= 1e-9,
            || {
                format!(
                    "welch case {i}: ({}, {gd}, {}) vs ({t}, {dof}, {p})",
                    got.statistic, got.p_value
                )
            },
        )?;
    }
    Ok(format!(
        "500 spearman exact, {binom_cases} binomial cases, 100 welch within 1e-9"
    ))
}

fn random_rotation(r: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| r.gen_range(-1.0..1.0));
    g.qr().q()
}

fn sample_from(m: &DMatrix<f64>) -> ActivationSample {
    // DMatrix is column-major; the sample wants rows contiguous.
    let values: Vec<f64> = m.transpose().iter().copied().collect();
    ActivationSample::new(m.nrows(), m.ncols(), values).unwrap()
}

fn participation_ratio_oracle() -> Outcome {
    // d equal variances: rows +-c e_i.
    for d in 1..=12usize {
        let m = DMatrix::from_fn(2 * d, d, |row, col| {
            if row / 2 == col {
                if row % 2 == 0 {
                    1.5
                } else {
                    -1.5
                }
            } else {
                0.0
            }
        });
        let pr = participation_ratio(&sample_from(&m));
        check(pr == d as f64, || {
            format!("equal spectrum d = {d}: PR = {pr}")
        })?;
    }
    // Spectrum [3, 1]: rows +-a e1, +-b e2 with N = 4 gives variances 2a^2/3, 2b^2/3.
    let (a, b) = (4.5f64.sqrt(), 1.5f64.sqrt());
    let m = DMatrix::from_row_slice(4, 2, &[a, 0.0, -a, 0.0, 0.0, b, 0.0, -b]);
    let pr31 = participation_ratio(&sample_from(&m));
    check((pr31 - 1.6).abs() <= 1e-9, || {
        format!("[3, 1]: PR = {pr31}")
    })?;

    // Gaussian draws with a configured spectrum.
    let spectrum: Vec<f64> = (0..16).map(|i| (-0.3 * i as f64).exp()).collect();
    let params = SyntheticModelParams::new(9, 6, 0.0, 1.0).with_hidden_spectrum(vec![spectrum]);
    let model = SyntheticModel::new(params, 1000).unwrap();
    let analytic = model.analytic_participation_ratio(0).unwrap();
    let tokens = random_tokens(11, 10_000, 1000);
    let values: Vec<f64> = (0..tokens.len())
        .flat_map(|t| model.hidden(&tokens[..=t]).into_iter().map(f64::from))
        .collect();
    let gauss = participation_ratio(&ActivationSample::new(10_000, 16, values).unwrap());
    let rel = (gauss - analytic).abs() / analytic;
    check(rel <= 0.05, || {
        format!("gaussian: PR {gauss} vs analytic {analytic}")
    })?;

    // Rotation and scale invariance.
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for (n, d) in [(200, 12), (8, 30), (50, 50)] {
        let x = DMatrix::from_fn(n, d, |_, j| r.gen_range(-1.0..1.0) * (1.0 + j as f64));
        let base = participation_ratio(&sample_from(&x));
        let q = random_rotation(&mut r, d);
        for variant in [&x * &q, &x * 7.25, (&x * &q) * 1e-3] {
            let pr = participation_ratio(&sample_from(&variant));
            let rel = (pr - base).abs() / base;
            worst = worst.max(rel);
            check(rel <= 1e-6, || {
                format!("invariance N = {n}, D = {d}: {pr} vs {base}")
            })?;
        }
    }
    Ok(format!(
        "equal spectra exact, [3,1] -> {pr31:.12}, gaussian {gauss:.3} vs {analytic:.3}, invariance worst {worst:.1e}"
    ))
}

fn brute_force_ranks(row: &[f32]) -> Vec<i64> {
    (0..row.len())
        .map(|v| {
            1 + (0..row.len())
                .filter(|&i| row[i] > row[v] || (row[i] == row[v] && i < v))
                .count() as i64
        })
        .collect()
}

fn injection_identity_and_construction() -> Outcome {
    let vocab = 48;
    let mut m = synth(5, 3, 0.5, 3.0, vocab);
    let prompt = [1, 2, 3];
    let base = greedy_decode(&mut m, &prompt, 60, None, None).unwrap();
    let mut delta = vec![0.0; vocab];
    delta[7] = 2.5;
    let zero_alpha = InjectionSpec::new(1, 0.0, delta.clone(), BTreeSet::new()).unwrap();
    let zero_delta = InjectionSpec::new(1, 4.0, vec![0.0; vocab], BTreeSet::new()).unwrap();
    for (name, spec) in [("alpha = 0", &zero_alpha), ("delta = 0", &zero_delta)] {
        let got = greedy_decode(&mut m, &prompt, 60, Some(spec), None).unwrap();
        check(
            got.tokens == base.tokens && got.entropies == base.entropies,
            || format!("{name} differs from baseline"),
        )?;
    }

    // Single-token bias: argmax flips exactly where z_j + alpha d beats the rest.
    let mut r = rng(6);
    let mut flips = 0;
    for i in 0..2000 {
        let ctx = random_tokens(i, r.gen_range(1..10), vocab);
        let z = m.logits(&ctx);
        let j = r.gen_range(0..vocab);
        let d = r.gen_range(0.1..3.0);
        let alpha = r.gen_range(0.0..2.0);
        let mut delta = vec![0.0; vocab];
        delta[j] = d;
        let spec = InjectionSpec::new(1, alpha, delta, BTreeSet::new()).unwrap();
        let zf: Vec<f64> = z.iter().map(|&x| f64::from(x)).collect();
        let boosted = zf[j] + alpha * d;
        let (best_other, best_id) = (0..vocab).filter(|&i| i != j).map(|i| (zf[i], i)).fold(
            (f64::NEG_INFINITY, usize::MAX),
            |acc, c| if c.0 > acc.0 { c } else { acc },
        );
        let expected = if boosted > best_other || (boosted == best_other && j < best_id) {
            j
        } else {
            best_id
        };
        let got =
            argmax_token(&inject_logits(&LogitVector::new(zf).unwrap(), &spec).unwrap()) as usize;
        check(got == expected, || {
            format!("construction case {i}: argmax {got}, expected {expected}")
        })?;
        flips += usize::from(expected == j);
    }

    // Rank-improved extraction against brute force.
    for seed in 0..25u64 {
        let v = 8 + (seed as usize * 7) % 57;
        let tr = pair_trace(seed, v, 30);
        let k = 1 + seed as usize % 6;
        let excluded: BTreeSet<u32> = [0u32, (seed % v as u64) as u32].into_iter().collect();
        let mut sums = vec![0i64; v];
        for t in 0..tr.positions() {
            let ra = brute_force_ranks(tr.logits_a(t));
            let rb = brute_force_ranks(tr.logits_b(t));
            for tok in 0..v {
                sums[tok] += ra[tok] - rb[tok];
            }
        }
        let n = tr.positions() as f64;
        let mut cand: Vec<usize> = (0..v)
            .filter(|t| !excluded.contains(&(*t as u32)))
            .collect();
        cand.sort_by(|&a, &b| {
            (sums[b] as f64 / n)
                .partial_cmp(&(sums[a] as f64 / n))
                .unwrap()
                .then(a.cmp(&b))
        });
        let oracle: Vec<u32> = cand.iter().take(k).map(|&t| t as u32).collect();
        let got = extract_rank_improved_tokens(&tr, k, &excluded).unwrap();
        check(got == oracle, || {
            format!("extraction seed {seed}: {got:?} vs {oracle:?}")
        })?;
    }
    Ok(format!(
        "identity holds; 2000 constructed cases ({flips} flips); 25 extraction cases"
    ))
}

fn degeneration_detection() -> Outcome {
    let vocab = 512;
    let steps = 256;
    let prompt = random_tokens(42, 4, vocab);
    let mut looping = synth(7, 4, 50.0, 1.0, vocab);
    let mut free = synth(7, 4, 0.0, 1.0, vocab);
    let hot = greedy_decode(&mut looping, &prompt, steps, None, None)
        .unwrap()
        .tokens;
    let cold = greedy_decode(&mut free, &prompt, steps, None, None)
        .unwrap()
        .tokens;
    let (bigram, ttr_hot) = (ngram_repetition(&hot, 2).unwrap(), ttr(&hot).unwrap());
    let ttr_cold = ttr(&cold).unwrap();
    check(bigram >= 0.9, || format!("bigram repetition {bigram}"))?;
    check(ttr_hot <= 0.05, || format!("looping TTR {ttr_hot}"))?;
    check(ttr_cold >= 0.5, || format!("r = 0 TTR {ttr_cold}"))?;
    Ok(format!(
        "r = 50: bigram {bigram:.3}, TTR {ttr_hot:.4}; r = 0: TTR {ttr_cold:.3}"
    ))
}

fn random_trace(r: &mut ChaCha8Rng) -> TeacherForcedTrace {
    let v = r.gen_range(2..20);
    let t = r.gen_range(1..12);
    let (layers, dim) = (r.gen_range(1..4), r.gen_range(1..6));
    let mut floats = |n: usize| -> Vec<f32> { (0..n).map(|_| r.gen_range(-1e3f32..1e3)).collect() };
    let la = floats(t * v);
    let lb = floats(t * v);
    let ha = floats(t * layers * dim);
    let hb = floats(t * layers * dim);
    let flags: u8 = r.gen_range(0..4);
    let hs = |on: bool, values: Vec<f32>| {
        on.then_some(HiddenStates {
            layer_count: layers,
            hidden_dim: dim,
            values,
        })
    };
    let tokens = (0..t).map(|_| r.gen_range(0..v as u32)).collect();
    TeacherForcedTrace::new(
        v,
        tokens,
        la,
        lb,
        hs(flags & 1 != 0, ha),
        hs(flags & 2 != 0, hb),
    )
    .unwrap()
}

fn format_protocol_conformance() -> Outcome {
    let mut r = rng(8);
    for i in 0..300 {
        let tr = random_trace(&mut r);
        let bytes = encode_trace(&tr).unwrap();
        check(bytes.len() == tr.byte_len(), || {
            format!("trace {i}: size formula")
        })?;
        let back = decode_trace(&bytes).map_err(|e| format!("trace {i}: {e}"))?;
        check(back == tr, || format!("trace {i}: round trip"))?;
        check(encode_trace(&back).unwrap() == bytes, || {
            format!("trace {i}: bytes differ")
        })?;
    }

    let golden: [(Message, Vec<u8>); 3] = [
        (
            Message::LogitsRequest {
                want_hidden: true,
                tokens: vec![1, 258],
            },
            vec![13, 0, 0, 0, 1, 1, 2, 0, 0, 0, 1, 0, 0, 0, 2, 1, 0, 0],
        ),
        (
            Message::LogitsResponse {
                logits: vec![1.0, -2.0],
                hidden: None,
            },
            vec![
                13, 0, 0, 0, 2, 2, 0, 0, 0, 0, 0, 0x80, 0x3f, 0, 0, 0, 0xc0, 0,
            ],
        ),
        (
            Message::Error {
                code: 2,
                message: "bad".into(),
            },
            vec![7, 0, 0, 0, 3, 2, 0, 0, 0, b'b', b'a', b'd'],
        ),
    ];
    for (msg, bytes) in &golden {
        check(&msg.encode() == bytes, || format!("golden encode {msg:?}"))?;
        let back = read_message(&mut Cursor::new(bytes)).map_err(|e| e.to_string())?;
        check(back.as_ref() == Some(msg), || {
            format!("golden decode {msg:?}")
        })?;
    }

    // Corruption fuzzing over both formats.
    let mut frames: Vec<Vec<u8>> = golden.iter().map(|(_, b)| b.clone()).collect();
    frames.push(
        Message::LogitsResponse {
            logits: vec![0.5; 5],
            hidden: Some(HiddenStack {
                layer_count: 2,
                hidden_dim: 3,
                values: vec![0.25; 6],
            }),
        }
        .encode(),
    );
    let traces: Vec<Vec<u8>> = (0..5)
        .map(|_| encode_trace(&random_trace(&mut r)).unwrap())
        .collect();
    let (mut typed_frames, mut typed_traces) = (0, 0);
    for i in 0..20_000 {
        let use_trace = i % 2 == 0;
        let src = if use_trace {
            &traces[i % traces.len()]
        } else {
            &frames[i % frames.len()]
        };
        let mut buf = src.clone();
        match r.gen_range(0..4) {
            0 => {
                let cut = r.gen_range(0..buf.len());
                buf.truncate(cut);
            }
            1 => {
                for _ in 0..r.gen_range(1..6) {
                    let at = r.gen_range(0..buf.len());
                    buf[at] ^= 1 << r.gen_range(0..8);
                }
            }
            2 => {
                let at = r.gen_range(0..buf.len().min(25));
                buf[at] = r.gen();
            }
            _ => buf = (0..r.gen_range(0..64)).map(|_| r.gen()).collect(),
        }
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            if use_trace {
                decode_trace(&buf).is_err()
            } else {
                let mut cur = Cursor::new(&buf);
                read_message(&mut cur).is_err()
            }
        }));
        let failed = outcome.map_err(|_| format!("fuzz case {i} panicked"))?;
        if failed {
            if use_trace {
                typed_traces += 1;
            } else {
                typed_frames += 1;
            }
        }
    }
    let huge = [&(MAX_PAYLOAD_LEN + 1).to_le_bytes()[..], &[1u8]].concat();
    check(
        matches!(
            read_message(&mut Cursor::new(&huge)),
            Err(ProtocolError::FrameTooLarge(_))
        ),
        || "oversized frame accepted".into(),
    )?;
    Ok(format!(
        "300 HFT1 round trips, 3 golden frames, 20000 corruptions without panic ({typed_traces} trace / {typed_frames} frame typed errors)"
    ))
}

fn write_trace_file(dir: &std::path::Path, name: &str, tr: &TeacherForcedTrace) -> PathBuf {
    fs::write(dir.join(name), encode_trace(tr).unwrap()).unwrap();
    PathBuf::from(name)
}

fn report_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spectrum = |decay: f64| -> Vec<Vec<f64>> {
        (0..3)
            .map(|l| {
                (0..6)
                    .map(|i| (-(decay + 0.1 * l as f64) * i as f64).exp())
                    .collect()
            })
            .collect()
    };
    let a = SyntheticModel::new(
        SyntheticModelParams::new(1, 3, 0.0, 4.0).with_hidden_spectrum(spectrum(0.5)),
        40,
    )
    .unwrap();
    let b = SyntheticModel::new(
        SyntheticModelParams::new(2, 3, 3.0, 4.0).with_hidden_spectrum(spectrum(0.2)),
        40,
    )
    .unwrap();
    let traces: Vec<PathBuf> = (0..4)
        .map(|s| {
            let tr = gen_synthetic_trace(&a, &b, &random_tokens(s, 40, 40), true).unwrap();
            write_trace_file(dir.path(), &format!("t{s}.hft"), &tr)
        })
        .collect();
    let configs = vec![
        ExperimentConfig::EntropyMatch(EntropyMatchConfig {
            traces: traces.clone(),
            solver: SolverOptions::default(),
        }),
        ExperimentConfig::Rank(RankConfig {
            traces: traces.clone(),
        }),
        ExperimentConfig::TriadSeries(TriadSeriesConfig {
            checkpoints: traces.clone(),
        }),
        ExperimentConfig::Diversity(DiversityConfig {
            traces: traces.clone(),
            sequences: vec![vec![1, 2, 1, 2, 3]],
        }),
        ExperimentConfig::Geometry(GeometryConfig {
            trace: traces[0].clone(),
            positions: PositionPolicy::Subsample { count: 20, seed: 3 },
        }),
        ExperimentConfig::Ablation(AblationConfig {
            provider: ProviderConfig::Synthetic {
                vocab_size: 40,
                params: SyntheticModelParams::new(1, 3, 0.0, 4.0),
            },
            delta_trace: traces[0].clone(),
            k: 4,
            excluded_tokens: BTreeSet::from([0]),
            alphas: vec![0.0, 0.5, 2.0],
            steps: 30,
            prompts: vec![vec![1, 2], vec![5]],
        }),
    ];
    let mut kinds = Vec::new();
    for cfg in &configs {
        // The config is read back from its own JSON, as the CLI does.
        let text = to_canonical_string(cfg).unwrap();
        let parsed =
            ExperimentConfig::from_json(&text).map_err(|e| format!("{}: {e}", cfg.kind()))?;
        let mut outputs = Vec::new();
        for run_no in 0..2 {
            let report =
                report::run(&parsed, dir.path()).map_err(|e| format!("{}: {e}", cfg.kind()))?;
            let out = dir.path().join(format!("{}-{run_no}.json", cfg.kind()));
            emit_report(&report, OutputFormat::Json, &out).unwrap();
            outputs.push(fs::read(&out).unwrap());
        }
        check(outputs[0] == outputs[1], || {
            format!("{} reports differ", cfg.kind())
        })?;
        let back: Report =
            serde_json::from_slice(&outputs[0]).map_err(|e| format!("{}: {e}", cfg.kind()))?;
        check(&back.config == cfg, || {
            format!("{}: config echo differs", cfg.kind())
        })?;
        kinds.push(cfg.kind());
    }
    Ok(format!("byte-identical JSON for {}", kinds.join(", ")))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("rank-preservation", rank_preservation),
        ("entropy-solver-soundness", solver_soundness),
        ("statistics-oracles", statistics_oracles),
        ("participation-ratio-oracle", participation_ratio_oracle),
        (
            "injection-identity-and-construction",
            injection_identity_and_construction,
        ),
        ("degeneration-detection", degeneration_detection),
        ("format-protocol-conformance", format_protocol_conformance),
        ("report-reproducibility", report_reproducibility),
    ];
    let mut failures = 0;
    for (name, f) in criteria {
        match catch_unwind(f) {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failures += 1;
                println!("FAIL {name}: {why}");
            }
            Err(_) => {
                failures += 1;
                println!("FAIL {name}: panicked");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failures} failed",
        criteria.len() - failures
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
