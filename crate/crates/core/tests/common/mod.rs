//! Checks shared by the integration tests and the acceptance runner. Each
//! returns `Err(description)` on the first violation.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slimformer::numcore::{AttentionMask, Graph, Tensor, Var};

pub type Check = Result<(), String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> slimformer::Result<Var> + 'a;

/// Loss of `build` reduced to a scalar with a fixed random projection when
/// the output is not already scalar.
fn scalar_loss(inputs: &[Tensor<f64>], build: &Builder<'_>, proj_seed: u64, grads: bool) -> (f64, Option<Vec<Tensor<f64>>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars).expect("op builds");
    let loss = if g.value(out).len() == 1 {
        out
    } else {
        let shape = g.value(out).shape().to_vec();
        let r = g.leaf(random_tensor(&mut rng(proj_seed), &shape, 1.0));
        let m = g.mul(out, r).unwrap();
        g.sum(m)
    };
    let value = g.value(loss).data()[0];
    if !grads {
        return (value, None);
    }
    let gr = g.backward(loss).unwrap();
    let all = vars.iter().zip(inputs).map(|(&v, t)| gr.get_or_zeros(v, t)).collect();
    (value, Some(all))
}

/// Largest norm-wise relative error between analytic and central-difference
/// gradients over the inputs listed in `wrt`.
pub fn gradient_error(inputs: &[Tensor<f64>], wrt: &[usize], build: &Builder<'_>, proj_seed: u64) -> f64 {
    const H: f64 = 1e-5;
    let (_, analytic) = scalar_loss(inputs, build, proj_seed, true);
    let analytic = analytic.unwrap();
    let mut worst: f64 = 0.0;
    for &i in wrt {
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            *n = (scalar_loss(&plus, build, proj_seed, false).0 - scalar_loss(&minus, build, proj_seed, false).0) / (2.0 * H);
        }
        let a = analytic[i].data();
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        let err = if denom < 1e-9 { diff } else { diff / denom };
        worst = worst.max(err);
    }
    worst
}

/// Every differentiable graph primitive plus the KD and hybrid losses,
/// checked against central differences at `seed`. Returns the worst
/// relative error per case.
pub fn gradcheck_cases(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let (m, k, n) = (r.random_range(1..4), r.random_range(1..5), r.random_range(1..4));
    let p = seed.wrapping_mul(31).wrapping_add(7);

    let a = random_tensor(&mut r, &[m, k], 1.0);
    let b = random_tensor(&mut r, &[k, n], 1.0);
    let bt = random_tensor(&mut r, &[n, k], 1.0);
    out.push(("matmul", gradient_error(&[a.clone(), b], &[0, 1], &|g, v| g.matmul(v[0], v[1]), p)));
    out.push(("matmul_transposed", gradient_error(&[a.clone(), bt], &[0, 1], &|g, v| g.matmul_ex(v[0], v[1], true), p)));

    let groups = r.random_range(1..3);
    let ba = random_tensor(&mut r, &[groups, m, k], 1.0);
    let bb = random_tensor(&mut r, &[groups, k, n], 1.0);
    let bbt = random_tensor(&mut r, &[groups, n, k], 1.0);
    out.push(("batch_matmul", gradient_error(&[ba.clone(), bb], &[0, 1], &|g, v| g.batch_matmul(v[0], v[1], false), p)));
    out.push(("batch_matmul_transposed", gradient_error(&[ba, bbt], &[0, 1], &|g, v| g.batch_matmul(v[0], v[1], true), p)));

    let x = random_tensor(&mut r, &[m, k], 2.0);
    let y = random_tensor(&mut r, &[m, k], 2.0);
    let bias = random_tensor(&mut r, &[k], 1.0);
    out.push(("add", gradient_error(&[x.clone(), y.clone()], &[0, 1], &|g, v| g.add(v[0], v[1]), p)));
    out.push(("mul", gradient_error(&[x.clone(), y.clone()], &[0, 1], &|g, v| g.mul(v[0], v[1]), p)));
    out.push(("add_bias", gradient_error(&[x.clone(), bias.clone()], &[0, 1], &|g, v| g.add_bias(v[0], v[1]), p)));
    let factor = r.random_range(-3.0..3.0);
    out.push(("scale", gradient_error(&[x.clone()], &[0], &|g, v| Ok(g.scale(v[0], factor)), p)));
    out.push(("sum", gradient_error(&[x.clone()], &[0], &|g, v| Ok(g.sum(v[0])), p)));
    let (wa, wb) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
    out.push((
        "weighted_sum",
        gradient_error(&[x.clone(), y.clone()], &[0, 1], &|g, v| {
            let (sa, sb) = (g.sum(v[0]), g.sum(v[1]));
            g.weighted_sum(sa, wa, sb, wb)
        }, p),
    ));
    out.push(("gelu", gradient_error(&[x.clone()], &[0], &|g, v| Ok(g.gelu(v[0])), p)));

    let width = r.random_range(2..6);
    let ln_x = random_tensor(&mut r, &[m, width], 2.0);
    let gain = random_tensor(&mut r, &[width], 1.5);
    let ln_b = random_tensor(&mut r, &[width], 1.0);
    out.push(("layer_norm", gradient_error(&[ln_x, gain, ln_b], &[0, 1, 2], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), p)));

    let t = r.random_range(0.5..3.0);
    let logits = random_tensor(&mut r, &[m, width], 3.0);
    out.push(("softmax", gradient_error(&[logits.clone()], &[0], &|g, v| g.softmax(v[0], t), p)));
    let keys = r.random_range(2..6);
    let scores = random_tensor(&mut r, &[groups, keys, keys], 3.0);
    let key_lens: Vec<usize> = (0..groups).map(|_| r.random_range(1..=keys)).collect();
    let causal = r.random_bool(0.5);
    let mask = AttentionMask { causal, key_lens };
    out.push((
        "softmax_masked",
        gradient_error(&[scores], &[0], &|g, v| g.softmax_masked(v[0], t, mask.clone()), p),
    ));

    let rows = r.random_range(2..5);
    let table = random_tensor(&mut r, &[rows, width], 1.0);
    let ids: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(0..rows)).collect();
    out.push(("gather", gradient_error(&[table.clone()], &[0], &|g, v| g.gather(v[0], &ids), p)));
    out.push(("select_rows", gradient_error(&[table], &[0], &|g, v| g.select_rows(v[0], &ids), p)));

    let (bsz, seq, heads, hd) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..3), r.random_range(1..3));
    let h = random_tensor(&mut r, &[bsz * seq, heads * hd], 1.0);
    out.push(("split_heads", gradient_error(&[h.clone()], &[0], &|g, v| g.split_heads(v[0], bsz, seq, heads), p)));
    out.push((
        "merge_heads",
        gradient_error(&[h], &[0], &|g, v| {
            let s = g.split_heads(v[0], bsz, seq, heads)?;
            let s = g.scale(s, 1.5);
            g.merge_heads(s, bsz, seq, heads)
        }, p),
    ));

    let labels: Vec<Option<usize>> =
        (0..m).map(|i| if i == 0 || r.random_bool(0.8) { Some(r.random_range(0..width)) } else { None }).collect();
    out.push(("cross_entropy", gradient_error(&[logits.clone()], &[0], &|g, v| g.cross_entropy(v[0], &labels), p)));

    let teacher = random_tensor(&mut r, &[m, width], 3.0);
    let tau = [1.0, 2.0, 5.0][r.random_range(0..3)];
    let flags: Vec<bool> = (0..m).map(|i| i == 0 || r.random_bool(0.8)).collect();
    out.push((
        "kl_divergence",
        gradient_error(&[logits.clone()], &[0], &|g, v| g.kl_divergence(v[0], &teacher, &flags, tau, tau * tau), p),
    ));

    // kd_loss and hybrid_loss: the graph path used in training against
    // finite differences of the standalone loss functions.
    let hard: Vec<usize> = (0..m).map(|_| r.random_range(0..width)).collect();
    let alpha = r.random_range(0.0..1.0);
    out.push(("kd_loss", loss_fn_error(&logits, &|z| slimformer::distiller::kd_loss(&teacher, z, tau).unwrap(), &|g, s| {
        g.kl_divergence(s, &teacher, &vec![true; m], tau, tau * tau)
    })));
    let some: Vec<Option<usize>> = hard.iter().copied().map(Some).collect();
    out.push((
        "hybrid_loss",
        loss_fn_error(&logits, &|z| slimformer::distiller::hybrid_loss(&teacher, z, &hard, tau, alpha).unwrap(), &|g, s| {
            let kd = g.kl_divergence(s, &teacher, &vec![true; m], tau, tau * tau)?;
            let ce = g.cross_entropy(s, &some)?;
            g.weighted_sum(kd, alpha, ce, 1.0 - alpha)
        }),
    ));
    out
}

fn loss_fn_error(
    z: &Tensor<f64>,
    f: &dyn Fn(&Tensor<f64>) -> f64,
    graph: &dyn Fn(&mut Graph<f64>, Var) -> slimformer::Result<Var>,
) -> f64 {
    const H: f64 = 1e-5;
    let mut g = Graph::new();
    let s = g.leaf(z.clone());
    let loss = graph(&mut g, s).unwrap();
    let analytic = g.backward(loss).unwrap().get_or_zeros(s, z);
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for j in 0..z.len() {
        let (mut p, mut q) = (z.clone(), z.clone());
        p.data_mut()[j] += H;
        q.data_mut()[j] -= H;
        let num = (f(&p) - f(&q)) / (2.0 * H);
        let a = analytic.data()[j];
        diff += (a - num).powi(2);
        na += a * a;
        nn += num * num;
    }
    let denom = f64::max(na, nn).sqrt();
    if denom < 1e-9 {
        diff.sqrt()
    } else {
        diff.sqrt() / denom
    }
}

/// Criterion: every case over `seeds` within `tol`.
pub fn check_gradients(seeds: std::ops::Range<u64>, tol: f64) -> Check {
    for seed in seeds {
        for (name, err) in gradcheck_cases(seed) {
            ensure(err <= tol, || format!("{name} at seed {seed}: relative error {err:.3e}"))?;
        }
    }
    Ok(())
}

pub fn check_quantization(n_tensors: u64) -> Check {
    use slimformer::compressor::{dequantize, quantize_tensor};
    for seed in 0..n_tensors {
        let mut r = rng(seed ^ 0x5eed);
        let len = r.random_range(1..200);
        let mag = 10f64.powf(r.random_range(-4.0..3.0));
        let w = random_tensor(&mut r, &[len], mag);
        let q = quantize_tensor(&w).map_err(|e| e.to_string())?;
        let back = dequantize(&q);
        let half = q.scale() / 2.0;
        for (a, b) in w.data().iter().zip(back.data()) {
            ensure((a - b).abs() <= half, || format!("tensor {seed}: |{a} - {b}| exceeds scale/2 = {half}"))?;
        }
    }
    let w = Tensor::<f64>::from_f64(&[3], &[-2.54, 0.02, 2.54]).unwrap();
    let q = quantize_tensor(&w).map_err(|e| e.to_string())?;
    ensure((q.scale() - 0.02).abs() < 1e-12, || format!("worked example scale {}", q.scale()))?;
    ensure(q.values() == [-127, 1, 127], || format!("worked example codes {:?}", q.values()))?;
    check_checkpoint_roundtrip()
}

pub fn check_checkpoint_roundtrip() -> Check {
    use slimformer::compressor::quantize_model;
    use slimformer::model::{build_model, checkpoint, ArchConfig};
    let cfg = ArchConfig::encoder_classifier(2, 2, 4, 16, 20, 16, 2);
    let real = build_model::<f32>(&cfg, 3).map_err(|e| e.to_string())?;
    for m in [real.clone(), quantize_model(&real).map_err(|e| e.to_string())?] {
        let bytes = checkpoint::to_bytes(&m).map_err(|e| e.to_string())?;
        let back: slimformer::model::ModelState<f32> = checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure(checkpoint::to_bytes(&back).map_err(|e| e.to_string())? == bytes, || "checkpoint bytes differ after round-trip".into())?;
        ensure(back.fingerprint() == m.fingerprint(), || "checkpoint fingerprint differs after round-trip".into())?;
    }
    Ok(())
}

/// `τ²·KL(p ‖ q)` evaluated directly, independent of the library.
pub fn kd_oracle(z_t: &[f64], z_s: &[f64], tau: f64) -> f64 {
    let soft = |z: &[f64]| {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect::<Vec<_>>()
    };
    let (p, q) = (soft(z_t), soft(z_s));
    tau * tau * p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
}

pub fn check_kd_cases() -> Check {
    use slimformer::distiller::kd_loss;
    for seed in 0..100 {
        let mut r = rng(seed ^ 0xd157);
        let (rows, classes) = (r.random_range(1..5), r.random_range(2..8));
        let z = random_tensor(&mut r, &[rows, classes], 5.0);
        for tau in [1.0, 2.0, 5.0] {
            let v = kd_loss(&z, &z, tau).map_err(|e| e.to_string())?;
            ensure(v == 0.0, || format!("kd_loss(z, z, {tau}) = {v} at seed {seed}"))?;
        }
    }
    let zt = Tensor::<f64>::from_f64(&[1, 2], &[2.0, 0.0]).unwrap();
    let zs = Tensor::<f64>::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
    let got = kd_loss(&zt, &zs, 2.0).map_err(|e| e.to_string())?;
    let oracle = kd_oracle(&[2.0, 0.0], &[0.0, 0.0], 2.0);
    ensure((oracle - 0.4444).abs() <= 1e-3, || format!("oracle {oracle}"))?;
    ensure((got - oracle).abs() <= 1e-3, || format!("kd_loss {got} vs oracle {oracle}"))
}

pub fn check_diagnostics() -> Check {
    use slimformer::diagnostics::{attention_concentration, attention_head_score, depth_prior};
    use slimformer::model::{build_model, ArchConfig, ParamValue, TokenBatch};
    let dp = (depth_prior(0), depth_prior(1), depth_prior(7));
    ensure(dp == (1.0, 0.5, 0.125), || format!("depth priors {dp:?}"))?;
    for n in [1usize, 2, 5, 13] {
        let mut one_hot = vec![0.0; 2 * n * n];
        for row in 0..2 * n {
            one_hot[row * n + (row * 7) % n] = 1.0;
        }
        let t = Tensor::<f64>::new(vec![1, 2, n, n], one_hot).unwrap();
        let s = attention_concentration(&t, &[n]).map_err(|e| e.to_string())?;
        ensure(s == 1.0, || format!("one-hot n={n}: {s}"))?;
        let u = Tensor::<f64>::full(&[1, 2, n, n], 1.0 / n as f64);
        let s = attention_concentration(&u, &[n]).map_err(|e| e.to_string())?;
        ensure(s == 1.0 / n as f64, || format!("uniform n={n}: {s}"))?;
    }
    // zero query projections make every score equal, so attention is uniform
    let cfg = ArchConfig::encoder_classifier(2, 2, 4, 8, 20, 16, 2);
    let mut m = build_model::<f64>(&cfg, 1).map_err(|e| e.to_string())?;
    for p in m.params_mut() {
        if p.name.ends_with("attn.wq") || p.name.ends_with("attn.bq") {
            if let ParamValue::Real(t) = &mut p.value {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    let seq: Vec<usize> = (0..13).map(|i| 3 + i).collect();
    let batch = TokenBatch::from_sequences(&[seq]).map_err(|e| e.to_string())?;
    let (_, trace) = m.forward(&batch, true).map_err(|e| e.to_string())?;
    let trace = trace.ok_or("no trace")?;
    for layer in 0..2 {
        let s = attention_head_score(&trace, layer).map_err(|e| e.to_string())?;
        ensure(s == 1.0 / 13.0, || format!("uniform model attention score {s} at layer {layer}"))?;
        ensure(format!("{s:.6}") == "0.076923", || format!("{s:.6}"))?;
    }
    Ok(())
}

pub fn check_carbon() -> Check {
    use slimformer::greenmeter::{co2_from_energy, estimate_energy, measure_run, ConstantPower, ManualClock, MeterSettings, WorkloadOutput};
    use slimformer::pipeline::extra_vs_student_pct;
    let g = co2_from_energy(estimate_energy(36.0, 100.0), 170.043);
    ensure(g == 0.170043, || format!("100 W x 36 s gives {g} g"))?;
    let clock = ManualClock::new();
    let settings = MeterSettings { carbon_intensity_g_per_kwh: 170.043, ..MeterSettings::default() };
    let report = measure_run(
        || {
            clock.advance(36.0);
            Ok(WorkloadOutput { n_samples: 4, latency_ms: vec![3.0, 1.0, 4.0, 2.0], peak_memory_bytes: 10 })
        },
        &ConstantPower(100.0),
        &clock,
        &settings,
    )
    .map_err(|e| e.to_string())?;
    ensure(report.is_consistent(), || format!("inconsistent report {report:?}"))?;
    ensure((report.co2_g - 0.170043).abs() < 1e-12, || format!("metered co2 {}", report.co2_g))?;
    ensure(report.co2_g_per_sample == report.co2_g / 4.0, || "per-sample co2".into())?;
    ensure(report.p50_ms == 2.0 && report.p95_ms == 4.0, || format!("percentiles {} {}", report.p50_ms, report.p95_ms))?;
    let extra = extra_vs_student_pct(0.004213, 0.001975).ok_or("undefined ratio")?;
    ensure((extra - 113.3).abs() <= 0.1, || format!("extra vs student {extra}"))
}

pub mod desk {
    use slimformer::model::ArchConfig;
    use slimformer::nas::{FeasibilityContext, ProxySettings, SearchSpace};
    use slimformer::synthdata::{generate_lm_dataset, split, Dataset, LM_VOCAB_SIZE};
    use slimformer::trainer::DEFAULT_BATCH_SIZE;

    pub struct Desk {
        pub train: Dataset,
        pub val: Dataset,
        pub base: ArchConfig,
        pub space: SearchSpace,
        pub proxy: ProxySettings,
        pub context: FeasibilityContext,
    }

    /// Small grammar LM task, a capped search space and short proxy
    /// training. Token-level loss separates model sizes within a few dozen
    /// steps, where the clone task is still at chance.
    pub fn desk(seed: u64, proxy_steps: usize) -> Desk {
        let ds = generate_lm_dataset(seed, 500, (3, 15)).unwrap();
        let (train, val, _) = split(&ds, (0.7, 0.2, 0.1), seed).unwrap();
        let base = ArchConfig::decoder_lm(4, 4, 16, 128, LM_VOCAB_SIZE, 16);
        let space = SearchSpace::capped_at(&base).unwrap();
        let mut proxy = ProxySettings { steps: proxy_steps, batch_size: 16, ..ProxySettings::default() };
        proxy.optim.lr = 3e-3;
        let context = FeasibilityContext::new(val.max_input_len(), DEFAULT_BATCH_SIZE);
        Desk { train, val, base, space, proxy, context }
    }
}

pub struct NasStats {
    pub searches: usize,
    pub trained: usize,
}

/// Seeded searches at several memory budgets: best-ever fitness never
/// worsens, ranked genomes always satisfy the budget, and tightening the
/// memory budget never grows the winner's estimated memory.
pub fn check_nas_invariants(seeds: &[u64], fractions: &[f64], proxy_steps: usize) -> Result<NasStats, String> {
    use slimformer::model::{estimate_memory, Precision};
    use slimformer::nas::{check_feasibility, run_nas, Budget, NasSettings, ProxyData};
    let mut stats = NasStats { searches: 0, trained: 0 };
    for &seed in seeds {
        let d = desk::desk(seed, proxy_steps);
        let data = ProxyData::<f32> { train: &d.train, val: &d.val, targets: None };
        let full = estimate_memory(&d.base, d.context.batch, d.context.seq_len, Precision::Real) as f64;
        let mut previous: Option<(f64, u64)> = None;
        for &fraction in fractions {
            let budget = Budget { max_memory_bytes: (full * fraction) as u64, ..Budget::unlimited() };
            let settings = NasSettings::new(d.context);
            let settings = NasSettings { proxy: d.proxy.clone(), ..settings };
            let out = run_nas(&d.space, &budget, &d.base, data, &settings, seed).map_err(|e| format!("seed {seed}: {e}"))?;
            stats.searches += 1;
            stats.trained += out.log.trained;
            let mut best = f64::INFINITY;
            for g in &out.log.generations {
                // no best yet while every genome so far was infeasible
                match g.best_ever_fitness {
                    Some(b) => {
                        ensure(b <= best, || format!("seed {seed}: best-ever fitness rose from {best} to {b}"))?;
                        best = b;
                    }
                    None => ensure(best.is_infinite(), || format!("seed {seed}: best-ever lost at generation {}", g.generation))?,
                }
                for e in g.entries.iter().filter(|e| e.rank.is_some()) {
                    let f = check_feasibility(&e.genome, &d.base, &budget, &d.context).map_err(|e| e.to_string())?;
                    ensure(f.feasible && f.memory_bytes <= budget.max_memory_bytes, || {
                        format!("seed {seed}: ranked genome {} violates the budget", e.genome)
                    })?;
                }
            }
            let mem = estimate_memory(&out.config, d.context.batch, d.context.seq_len, Precision::Real);
            if let Some((pf, pm)) = previous {
                ensure(mem <= pm, || {
                    format!("seed {seed}: tightening memory {pf} -> {fraction} grew the winner from {pm} to {mem} bytes")
                })?;
            }
            previous = Some((fraction, mem));
        }
    }
    Ok(stats)
}

/// ε = ∞ reaches the ladder minima, ε = −1 changes nothing, replay
/// reproduces the output and every accepted step shrinks the model.
pub fn check_prune_invariants(seeds: &[u64], proxy_steps: usize) -> Check {
    use slimformer::compressor::{structured_prune, PruneDecision, PruneSettings};
    use slimformer::nas::{Genome, ProxyData};
    for &seed in seeds {
        let d = desk::desk(seed, proxy_steps);
        let data = ProxyData::<f32> { train: &d.train, val: &d.val, targets: None };
        let base = d.base.with_body(3, 4, 8, 64);
        for epsilon in [f64::INFINITY, -1.0, 0.02] {
            let settings = PruneSettings { epsilon, proxy: d.proxy.clone(), space: d.space.clone() };
            let out = structured_prune(&base, data, &settings, seed).map_err(|e| e.to_string())?;
            let replayed = out.log.replay(&base).map_err(|e| e.to_string())?;
            ensure(replayed == out.config, || format!("seed {seed} eps {epsilon}: replay {replayed:?} != {:?}", out.config))?;
            for r in out.log.records.iter().filter(|r| r.decision == PruneDecision::Accepted) {
                ensure(r.parameters_after < r.parameters_before, || format!("seed {seed}: accepted step {r:?} did not shrink"))?;
            }
            if epsilon == f64::INFINITY {
                ensure(Genome::of(&out.config) == d.space.minimal(), || {
                    format!("seed {seed}: eps=inf stopped at {}", Genome::of(&out.config))
                })?;
            }
            if epsilon == -1.0 {
                ensure(out.config == base && out.log.accepted() == 0, || format!("seed {seed}: eps=-1 changed the model"))?;
            }
        }
    }
    Ok(())
}

/// A pipeline configuration small enough to run end to end in seconds.
pub fn tiny_pipeline_config(seed: u64) -> slimformer::pipeline::PipelineConfig {
    slimformer::pipeline::PipelineConfig {
        seed,
        n_examples: 300,
        min_len: 4,
        max_len: 6,
        teacher_layers: 2,
        teacher_heads: 2,
        teacher_head_dim: 8,
        teacher_ffd: 32,
        max_seq_len: 16,
        teacher_steps: 40,
        population: 4,
        generations: 2,
        proxy_steps: 4,
        proxy_examples: 96,
        budget_memory_fraction: 0.8,
        budget_latency_fraction: 0.8,
        kd_steps: 10,
        timing_batch: 16,
        timing_warmup: 0,
        timing_reps: 1,
        ..Default::default()
    }
}

/// Required columns of the ordering table, checked on the rendered header
/// and on every successful row.
pub fn check_ordering_table(table: &slimformer::pipeline::OrderingTable, expected_rows: usize) -> Check {
    let text = table.render();
    let header = text.lines().next().unwrap_or_default();
    for col in ["P50/P95", "total", "peak mem", "gCO2/smp", "accuracy"] {
        ensure(header.contains(col), || format!("missing column {col} in {header:?}"))?;
    }
    ensure(table.rows.len() == expected_rows, || format!("{} rows, expected {expected_rows}", table.rows.len()))?;
    for r in &table.rows {
        ensure(r.ok, || format!("ordering {} failed: {:?}", r.ordering, r.error))?;
        ensure(
            r.p50_ms.is_some()
                && r.p95_ms.is_some()
                && r.total_time_s.is_some()
                && r.peak_memory_bytes.is_some()
                && r.gco2_per_sample.is_some()
                && r.accuracy.is_some(),
            || format!("ordering {} has empty columns", r.ordering),
        )?;
    }
    Ok(())
}
