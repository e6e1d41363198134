//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs with a plain `main` so every line is printed even when an earlier
//! criterion fails; the process exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsvae::detect::{detect, detect_scores, prune, threshold, AnomalySequence, DetectConfig, ScoreSeries};
use tsvae::encode2d::{encode_into, gaf_encode, gaf_rescale, rp_encode, CHANNELS};
use tsvae::evaluate::{aggregate, overlap_counts, f1, OverlapCounts};
use tsvae::hvae::net::{hwc_to_chw, Source};
use tsvae::hvae::tape::Tape;
use tsvae::hvae::{kl_variable, ArchConfig, ModelParams};
use tsvae::synth::{acceptance_corpus, generate};
use tsvae::train::{
    adversarial_sample_grads, adversarial_terms, fit, vae_sample_grad, AdvNoise, Frozen, Hinge, TrainConfig,
};
use tsvae::Interval;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Instant, limit: Duration) -> Result<(), String> {
    check(t.elapsed() <= limit, || format!("took {:.1?}, limit {:?}", t.elapsed(), limit))
}

// 1. Encoders against textbook double loops.

fn criterion_encoders() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=16);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();

        let (lo, hi) = w.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let phi: Vec<f64> = w.iter().map(|&x| (((x - hi) + (x - lo)) / (hi - lo)).clamp(-1.0, 1.0).acos()).collect();
        let g = gaf_encode(&gaf_rescale(&w)).map_err(|e| e.to_string())?;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((g[i * n + j] - (phi[i] + phi[j]).cos()).abs());
            }
        }

        let m = rng.random_range(1..=3);
        let tau = rng.random_range(1..=3);
        if (m - 1) * tau >= n {
            continue;
        }
        let side = n - (m - 1) * tau;
        let traj: Vec<Vec<f64>> = (0..side).map(|i| (0..m).map(|e| w[i + e * tau]).collect()).collect();
        let r = rp_encode(&w, m, tau).map_err(|e| e.to_string())?;
        for i in 0..side {
            for j in 0..side {
                let d: f64 = traj[i].iter().zip(&traj[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                worst = worst.max((r[i * side + j] - d).abs());
            }
        }
    }
    check(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    within(t, Duration::from_secs(10))?;
    Ok(format!("max deviation {worst:.1e} over 1000 windows"))
}

// 2. Residual KL against the general two-Gaussian KL.

fn criterion_kl() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let mu = rng.random_range(-3.0..3.0);
        let sigma = rng.random_range(0.05..3.0);
        let dmu = rng.random_range(-3.0..3.0);
        let dsigma = rng.random_range(0.05..3.0);
        let (m1, s1, m0, s0): (f64, f64, f64, f64) = (mu + dmu, sigma * dsigma, mu, sigma);
        let general = (s0 / s1).ln() + (s1 * s1 + (m1 - m0).powi(2)) / (2.0 * s0 * s0) - 0.5;
        let k = kl_variable(mu, sigma, dmu, dsigma).map_err(|e| e.to_string())?;
        worst = worst.max((k - general).abs());
        check(k > 0.0, || format!("KL {k} not positive at dmu={dmu}, dsigma={dsigma}"))?;
        let zero = kl_variable(mu, sigma, 0.0, 1.0).map_err(|e| e.to_string())?;
        check(zero == 0.0, || format!("KL at the prior is {zero}"))?;
    }
    check(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    within(t, Duration::from_secs(1))?;
    Ok(format!("max deviation {worst:.1e} over 1000 draws; zero exactly at the prior"))
}

// 3. Gradient checks on the miniature model in f64.

/// Relative error with a small absolute floor so that entries which are zero
/// up to finite-difference noise count as matches.
fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

struct GradStats {
    n: usize,
    under_1e3: usize,
    worst: f64,
}

impl GradStats {
    fn ok(&self) -> bool {
        self.n > 0 && self.under_1e3 as f64 >= 0.95 * self.n as f64 && self.worst < 1e-2
    }

    fn describe(&self, name: &str) -> String {
        format!("{name}: {}/{} < 1e-3, worst {:.1e}", self.under_1e3, self.n, self.worst)
    }
}

fn fd_compare(params: &[f64], idx: &[usize], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> GradStats {
    let h = 1e-6;
    let mut s = GradStats { n: 0, under_1e3: 0, worst: 0.0 };
    let mut p = params.to_vec();
    for &i in idx {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let dn = f(&p);
        p[i] = orig;
        let e = rel_err(analytic[i], (up - dn) / (2.0 * h));
        s.n += 1;
        s.under_1e3 += usize::from(e < 1e-3);
        s.worst = s.worst.max(e);
    }
    s
}

fn criterion_gradients() -> Outcome {
    let t = Instant::now();
    let arch = ArchConfig::miniature();
    let base = ModelParams::<f64>::init(&arch, 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Move away from the zero-bias, unit-gain initialization so every path carries signal.
    let params: Vec<f64> = base.params.iter().map(|&p| p + rng.random_range(-0.2..0.2)).collect();
    let model = ModelParams::<f64>::from_params(&arch, params.clone()).map_err(|e| e.to_string())?;
    let rebuild = |p: &[f64]| ModelParams::<f64>::from_params(&arch, p.to_vec()).expect("same arch");
    let n = arch.window;
    let values: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).sin() + rng.random_range(-0.3..0.3)).collect();
    let mut x = vec![0f64; n * n * CHANNELS];
    encode_into(&values, &mut x).map_err(|e| e.to_string())?;
    let noise = AdvNoise::draw(&model, &mut rng);
    let net = model.net();
    let all: Vec<usize> = (0..params.len()).collect();
    let enc: Vec<usize> = all.iter().copied().filter(|&i| net.is_encoder(i)).collect();
    let dec: Vec<usize> = all.iter().copied().filter(|&i| !net.is_encoder(i)).collect();
    let (alpha, beta) = (0.5, 0.1);

    // Joint objective.
    let mut g = vec![0.0; params.len()];
    vae_sample_grad(&model, &x, Some(&noise.real), &mut g);
    let s11 = fd_compare(&params, &all, &g, |p| {
        let mut scratch = vec![0.0; p.len()];
        let v = vae_sample_grad(&rebuild(p), &x, Some(&noise.real), &mut scratch);
        v.lr + v.kl
    });

    // Discriminator loss over encoder parameters, hinges active; the
    // re-encoded decoder outputs are frozen at their current values.
    let mut g_enc = vec![0.0; params.len()];
    let mut g_dec = vec![0.0; params.len()];
    let hinge = Hinge { rec: true, prior: true };
    adversarial_sample_grads(&model, &x, &noise, alpha, beta, hinge, &mut g_enc, &mut g_dec);
    let (_, xh, xp) = adversarial_terms(&model, &x, &noise, None);
    let frozen = Frozen { x_hat: &xh, x_hat_prior: &xp };
    let s12 = fd_compare(&params, &enc, &g_enc, |p| {
        let (a, _, _) = adversarial_terms(&rebuild(p), &x, &noise, Some(&frozen));
        a.lr + beta * a.kl_real - alpha * a.kl_rec - alpha * a.kl_prior
    });
    let enc_only = dec.iter().all(|&i| g_enc[i] == 0.0) && enc.iter().all(|&i| g_dec[i] == 0.0);

    // Generator loss over decoder parameters, gradients through the reconstructions.
    let s13 = fd_compare(&params, &dec, &g_dec, |p| {
        let (a, _, _) = adversarial_terms(&rebuild(p), &x, &noise, None);
        a.lr + alpha * (a.kl_rec + a.kl_prior)
    });

    // The decoder output head reaches the re-encoded KL only through the
    // stop-gradient, so its gradient must vanish exactly when it is honoured.
    let head: Vec<_> = net.slots.iter().filter(|s| s.name.starts_with("dec.out.")).map(|s| s.slot).collect();
    let kl_rec_grad = |honour: bool| {
        let mut tape = Tape::new(&params);
        let xi = tape.input(hwc_to_chw(&x, n, CHANNELS), net.input_shape(), false);
        let feats = net.bottom_up(&mut tape, xi);
        let td = net.top_down(&mut tape, Source::Posterior { feats: &feats, noise: Some(&noise.real) }, true);
        let x_hat = td.out.expect("output");
        let sg = tape.stop_grad(x_hat);
        let f2 = net.bottom_up(&mut tape, sg);
        let td2 = net.top_down(&mut tape, Source::Posterior { feats: &f2, noise: Some(&noise.rec) }, false);
        let mut grad = vec![0.0; params.len()];
        tape.backward(&[(td2.kl.expect("kl"), 1.0)], honour, &|_| true, &mut grad);
        head.iter().flat_map(|s| grad[s.range()].iter()).map(|a| a.abs()).sum::<f64>()
    };
    let head_on = kl_rec_grad(true);
    let head_off = kl_rec_grad(false);

    check(s11.ok(), || s11.describe("joint"))?;
    check(s12.ok(), || s12.describe("discriminator"))?;
    check(s13.ok(), || s13.describe("generator"))?;
    check(enc_only, || "discriminator/generator gradients leaked across roles".into())?;
    check(head_on == 0.0, || format!("stop-gradient leaked {head_on:e}"))?;
    check(head_off > 0.0, || "control path without stop-gradient carries no gradient".into())?;
    within(t, Duration::from_secs(300))?;
    Ok(format!(
        "{}; {}; {}; stop-gradient paths exactly zero",
        s11.describe("joint"),
        s12.describe("discriminator"),
        s13.describe("generator")
    ))
}

// 4. Threshold and pruning hand traces.

fn seqs(maxima: &[f64]) -> Vec<AnomalySequence> {
    maxima
        .iter()
        .enumerate()
        .map(|(i, &m)| AnomalySequence { start: 10 * i, end: 10 * i + 3, max_score: m })
        .collect()
}

fn criterion_prune() -> Outcome {
    let pruned = prune(&seqs(&[10.0, 9.3, 2.0]), 3.0, 0.1, 0.95);
    check(pruned == seqs(&[10.0]), || format!("[10, 9.3, 2]/std 3 gave {pruned:?}"))?;
    let kept = prune(&seqs(&[10.0, 9.5, 3.0]), 2.0, 0.1, 0.95);
    check(kept == seqs(&[10.0, 9.5, 3.0]), || format!("[10, 9.5, 3]/std 2 gave {kept:?}"))?;
    let mut v = vec![0.0; 9];
    v.push(10.0);
    let s = ScoreSeries::new(0, v).map_err(|e| e.to_string())?;
    let thr = threshold(&s);
    check((s.mean, s.std, thr) == (1.0, 3.0, 7.0), || format!("mean {} std {} threshold {thr}", s.mean, s.std))?;
    Ok("[10, 9.3, 2] pruned to [10]; [10, 9.5, 3] kept; {0 x9, 10} -> threshold 7".into())
}

// 5. Weighted aggregation reproduces the published dataset means.

fn criterion_aggregation() -> Outcome {
    let expand = |rows: &[(&str, usize, f64)]| -> BTreeMap<String, Vec<f64>> {
        rows.iter().map(|&(name, count, mean)| (name.to_string(), vec![mean; count])).collect()
    };
    let (_, nasa) = aggregate(&expand(&[("MSL", 27, 0.595), ("SMAP", 53, 0.679)])).map_err(|e| e.to_string())?;
    let nab_rows = [("Art", 6, 0.626), ("AdEx", 5, 0.572), ("AWS", 17, 0.692), ("Traf", 7, 0.595), ("Tweets", 10, 0.628)];
    let (_, nab) = aggregate(&expand(&nab_rows)).map_err(|e| e.to_string())?;
    check((nasa - 0.651).abs() <= 0.001, || format!("NASA {nasa:.4}"))?;
    check((nab - 0.639).abs() <= 0.003, || format!("NAB {nab:.4}"))?;
    Ok(format!("NASA {nasa:.4} (0.651), NAB {nab:.4} (0.639)"))
}

// 6. Synthetic corpus end to end.

fn criterion_synthetic() -> Outcome {
    let cfg = TrainConfig::default();
    let arch = ArchConfig::compact();
    let mut scores = Vec::new();
    let mut slowest = Duration::ZERO;
    let mut lines = Vec::new();
    for (i, spec) in acceptance_corpus().iter().enumerate() {
        let t = Instant::now();
        let series = generate(spec).map_err(|e| e.to_string())?;
        let fitted = fit(&series, &TrainConfig { seed: i as u64, ..cfg.clone() }, &arch).map_err(|e| e.to_string())?;
        let report = detect(&fitted.model, &series, fitted.standardization, &DetectConfig::default()).map_err(|e| e.to_string())?;
        let pred: Vec<Interval> = report.sequences.iter().map(|s| Interval { start: s.start, end: s.end }).collect();
        let c = overlap_counts(&pred, series.label_ranges.as_deref().unwrap_or(&[])).map_err(|e| e.to_string())?;
        let elapsed = t.elapsed();
        slowest = slowest.max(elapsed);
        let OverlapCounts { tp, fp, fn_ } = c;
        let line = format!("{}: f1 {:.3} (tp {tp} fp {fp} fn {fn_}) in {:.0}s", spec.id, f1(c), elapsed.as_secs_f64());
        println!("    {line}");
        lines.push(line);
        scores.push(f1(c));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let summary = format!("mean F1 {mean:.3} over {} series, slowest run {:.0}s", scores.len(), slowest.as_secs_f64());
    check(slowest <= Duration::from_secs(15 * 60), || summary.clone())?;
    check(mean >= 0.8, || summary.clone())?;
    Ok(summary)
}

// 7. Detection decisions are invariant to score scale.

fn criterion_scale() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..100 {
        let len = rng.random_range(20..400);
        let mut scores: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
        for _ in 0..rng.random_range(0..6) {
            let at = rng.random_range(0..len);
            let width = rng.random_range(1..8).min(len - at);
            let bump = rng.random_range(1.0..10.0);
            scores[at..at + width].iter_mut().for_each(|s| *s += bump);
        }
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
        let offset = rng.random_range(0..10);
        let a = detect_scores("s", len + 2 * offset, &ScoreSeries::new(offset, scores).map_err(|e| e.to_string())?, None, 0.1, 0.95)
            .map_err(|e| e.to_string())?;
        let b = detect_scores("s", len + 2 * offset, &ScoreSeries::new(offset, scaled).map_err(|e| e.to_string())?, None, 0.1, 0.95)
            .map_err(|e| e.to_string())?;
        let spans = |r: &tsvae::detect::DetectionReport| r.sequences.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>();
        let raw = |r: &tsvae::detect::DetectionReport| r.sequences_raw.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>();
        check(spans(&a) == spans(&b) && raw(&a) == raw(&b), || format!("case {case}, c = {c}: {:?} vs {:?}", spans(&a), spans(&b)))?;
    }
    Ok("100 random score vectors, identical sequences under scaling".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("1 encoder oracle equivalence", criterion_encoders),
        ("2 KL closed form", criterion_kl),
        ("3 gradient check", criterion_gradients),
        ("4 threshold and pruning traces", criterion_prune),
        ("5 metric aggregation", criterion_aggregation),
        ("6 synthetic end-to-end", criterion_synthetic),
        ("7 score-scale invariance", criterion_scale),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} [{secs:.1}s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name} [{secs:.1}s]: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
