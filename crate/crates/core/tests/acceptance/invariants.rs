//! Property checks of every module invariant, driven by proptest's runner so
//! they can report instead of panicking.

use adaagg_core::adaagg::{apply_threshold, mask_state, mask_weights, normalize_scores, penalized_aggregate, update_h};
use adaagg_core::attacks::{ipm_gradient, Eb, Ipm, Lmp};
use adaagg_core::cues::{
    build_cues, mmd, sim_from_distance, ClientEvidence, CueEntry, EnvState, FeatureSet, HistoryStore, EPS_S,
};
use adaagg_core::data::{synthetic_blobs, BlobSpec};
use adaagg_core::experiment::runner::RunWriter;
use adaagg_core::experiment::{run_experiment, ExperimentConfig};
use adaagg_core::fl::{
    partition_noniid, sample_round, weighted_aggregate, Attack, AttackContext, FedAvg, LocalSchedule, NoAttack,
};
use adaagg_core::inversion::{invert_gradients, InversionConfig};
use adaagg_core::rl::{soft_update, td3_target, ReplayBuffer, Td3Agent, Transition};
use adaagg_core::rng::rng_from;
use adaagg_core::robust::{coord_median, fltrust_combine, krum, norm_clip};
use adaagg_core::{cosine, Federation, ImageDims, ModelSpec, ParamVector, Td3Config};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Check = std::result::Result<(), TestCaseError>;
type Group = fn() -> Vec<(&'static str, Check)>;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

fn ensure(cond: bool, msg: impl Into<String>) -> Check {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(msg.into()))
    }
}

fn pv(v: Vec<f64>) -> ParamVector {
    ParamVector(v)
}

fn vectors(
    n: std::ops::RangeInclusive<usize>,
    p: std::ops::RangeInclusive<usize>,
) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (n, p).prop_flat_map(|(n, p)| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, p), n))
}

fn tiny_federation(clients: usize, n_mal: usize, seed: u64) -> Federation {
    let spec = BlobSpec { dims: ImageDims::new(1, 6, 6), classes: 3, radius: 0.3, sigma: 0.1 };
    let train = synthetic_blobs(clients * 20, &spec, seed).unwrap();
    let test = synthetic_blobs(60, &spec, seed + 1000).unwrap();
    let assignment = partition_noniid(&train.labels, clients, 0.5, 3, seed).unwrap().with_malicious(n_mal).unwrap();
    Federation {
        model: ModelSpec::logreg(spec.dims, 3).build().unwrap(),
        train,
        assignment,
        test,
        lr: 0.5,
        schedule: LocalSchedule::Epochs(1),
        batch_size: 8,
        rounds: 3,
        seed,
        timing: false,
    }
}

/// Records what the wrapped attack uploads.
struct Recording<A> {
    inner: A,
    uploads: Vec<ParamVector>,
}

impl<A: Attack> Attack for Recording<A> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn craft(&mut self, ctx: &AttackContext<'_>) -> adaagg_core::Result<Vec<ParamVector>> {
        let out = self.inner.craft(ctx)?;
        self.uploads = out.clone();
        Ok(out)
    }
}

fn model_core() -> Vec<(&'static str, Check)> {
    let mut out = Vec::new();
    let r = runner(24).run(&(0u64..1000), |seed| {
        let model = ModelSpec::small_cnn(ImageDims::new(1, 12, 12), 4).build().unwrap();
        let data = synthetic_blobs(16, &BlobSpec::default(), seed).unwrap();
        let p = model.init(seed);
        ensure(p == model.init(seed), "init differs for equal seeds")?;
        ensure(p.len() == model.num_params(), "init length")?;
        let a = model.loss_and_grad(&p, &data).unwrap();
        let b = model.loss_and_grad(&p, &data).unwrap();
        ensure(a == b, "loss_and_grad not deterministic")?;
        ensure(a.1.len() == model.num_params(), "gradient length")?;
        let t = model.local_train(&p, data.all(), 0.1, 3, 8, seed).unwrap();
        ensure(t == model.local_train(&p, data.all(), 0.1, 3, 8, seed).unwrap(), "local_train not deterministic")?;
        ensure(t.len() == model.num_params(), "local_train length")
    });
    out.push((
        "model: determinism and parameter-count conservation",
        r.map_err(|e| TestCaseError::fail(e.to_string())),
    ));
    out
}

fn fl_engine() -> Vec<(&'static str, Check)> {
    let mut out = Vec::new();
    let strat = (2usize..=10, 0.1f64..=1.0, 0u64..1000, 60usize..300);
    let r = runner(64).run(&strat, |(classes, q, seed, n)| {
        let clients = classes * 2;
        let q = q.max(1.0 / classes as f64);
        let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % classes).collect();
        let a = partition_noniid(&labels, clients, q, classes, seed).unwrap();
        let mut seen = vec![0u32; n];
        for s in &a.shards {
            for &i in s {
                seen[i] += 1;
            }
        }
        ensure(seen.iter().all(|&c| c == 1), "partition is not a disjoint cover")?;
        let a = a.with_malicious(clients / 3).unwrap();
        ensure((0..clients).all(|c| a.is_malicious(c) == (c < clients / 3)), "malicious flags not positional")
    });
    out.push((
        "fl: partition disjointness and coverage, positional flags",
        r.map_err(|e| TestCaseError::fail(e.to_string())),
    ));

    let r = runner(8).run(&(0u64..100), |seed| {
        let fed = tiny_federation(6, 2, seed);
        let mut global = fed.model.init(seed);
        let mut prev = None;
        for t in 0..3 {
            let plan = sample_round(6, 0.5, t, seed).unwrap();
            let before = global.clone();
            let (next, _) = fed.run_round(&global, prev.as_ref(), &plan, &mut NoAttack, &mut FedAvg).unwrap();
            ensure(global == before, "run_round mutated the global model")?;
            prev = Some(std::mem::replace(&mut global, next));
        }
        Ok(())
    });
    out.push(("fl: run_round leaves its input global untouched", r.map_err(|e| TestCaseError::fail(e.to_string()))));
    out
}

fn attacks() -> Vec<(&'static str, Check)> {
    let mut out = Vec::new();
    let r = runner(6).run(&(0u64..100), |seed| {
        let fed = tiny_federation(6, 3, seed);
        let global = fed.model.init(seed);
        let p = fed.model.num_params();
        let plan = adaagg_core::RoundPlan { round: 0, clients: vec![0, 1, 2, 3, 4, 5], seed };
        let check = |uploads: &[ParamVector], colluding: bool| -> Check {
            ensure(uploads.len() == 3, "one upload per attacker")?;
            ensure(uploads.iter().all(|u| u.len() == p && u.is_finite()), "upload length or finiteness")?;
            let same = uploads.windows(2).all(|w| w[0] == w[1]);
            ensure(same == colluding, format!("collusion pattern wrong (identical = {same})"))
        };
        let mut ipm = Recording { inner: Ipm { eps: 1.0 }, uploads: vec![] };
        fed.run_round(&global, None, &plan, &mut ipm, &mut FedAvg).unwrap();
        check(&ipm.uploads, true)?;
        let mut lmp = Recording { inner: Lmp::default(), uploads: vec![] };
        fed.run_round(&global, None, &plan, &mut lmp, &mut FedAvg).unwrap();
        check(&lmp.uploads, true)?;
        let mut eb = Recording { inner: Eb, uploads: vec![] };
        fed.run_round(&global, None, &plan, &mut eb, &mut FedAvg).unwrap();
        check(&eb.uploads, false)
    });
    out.push((
        "attacks: finite length-P uploads, ipm/lmp collude, eb differs",
        r.map_err(|e| TestCaseError::fail(e.to_string())),
    ));

    let strat = (prop::collection::vec(-3.0f64..3.0, 1..20), 0.01f64..10.0);
    let r = runner(256).run(&strat, |(m, eps)| {
        let m = pv(m);
        prop_assume!(m.norm() > 1e-9);
        ensure(ipm_gradient(&m, eps).dot(&m) < 0.0, "ipm inner product not negative")
    });
    out.push(("attacks: ipm inner-product negativity", r.map_err(|e| TestCaseError::fail(e.to_string()))));
    out
}

fn robust() -> Vec<(&'static str, Check)> {
    let mut out = Vec::new();
    let r = runner(256).run(&vectors(3..=9, 1..=6), |vs| {
        let ups: Vec<ParamVector> = vs.into_iter().map(pv).collect();
        let refs: Vec<&ParamVector> = ups.iter().collect();
        let n = refs.len();
        for f in 0..=n - 3 {
            let (i, v) = krum(&refs, f).unwrap();
            ensure(v == *refs[i], "krum output is not its selected input")?;
        }
        let med = coord_median(&refs).unwrap();
        for j in 0..med.len() {
            let lo = refs.iter().map(|u| u.0[j]).fold(f64::INFINITY, f64::min);
            let hi = refs.iter().map(|u| u.0[j]).fold(f64::NEG_INFINITY, f64::max);
            ensure(med.0[j] >= lo && med.0[j] <= hi, "median outside input range")?;
        }
        Ok(())
    });
    out.push(("robust: krum selects an input, median bounded", r.map_err(|e| TestCaseError::fail(e.to_string()))));

    let r = runner(256).run(&(vectors(1..=6, 1..=6), 0.01f64..5.0), |(vs, tau)| {
        let global = pv(vec![0.3; vs[0].len()]);
        let ups: Vec<ParamVector> = vs.into_iter().map(pv).collect();
        let refs: Vec<&ParamVector> = ups.iter().collect();
        let once = norm_clip(&refs, &global, tau).unwrap();
        let once_refs: Vec<&ParamVector> = once.iter().collect();
        let twice = norm_clip(&once_refs, &global, tau).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            for (x, y) in a.0.iter().zip(&b.0) {
                ensure((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "norm_clip not idempotent")?;
            }
        }
        Ok(())
    });
    out.push(("robust: norm_clip idempotent", r.map_err(|e| TestCaseError::fail(e.to_string()))));

    let strat = (vectors(2..=6, 2..=6), 0.1f64..20.0, any::<prop::sample::Index>());
    let r = runner(256).run(&strat, |(vs, c, which)| {
        let p = vs[0].len();
        let global = pv(vec![0.1; p]);
        let g0 = pv((0..p).map(|j| 1.0 + j as f64 * 0.3).collect());
        let ups: Vec<ParamVector> = vs.into_iter().map(pv).collect();
        let k = which.index(ups.len());
        prop_assume!(ups.iter().all(|u| u.sub(&global).norm() > 1e-6));
        let mut scaled = ups.clone();
        scaled[k] = global.add(&ups[k].sub(&global).scale(c));
        let a_refs: Vec<&ParamVector> = ups.iter().collect();
        let b_refs: Vec<&ParamVector> = scaled.iter().collect();
        let a = fltrust_combine(&a_refs, &global, &g0);
        let b = fltrust_combine(&b_refs, &global, &g0);
        match (a, b) {
            (Ok((a, ta)), Ok((b, tb))) => {
                for (x, y) in ta.iter().zip(&tb) {
                    ensure((x - y).abs() <= 1e-9, "trust score changed under rescaling")?;
                }
                for (x, y) in a.0.iter().zip(&b.0) {
                    ensure((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "fltrust output changed under rescaling")?;
                }
                Ok(())
            }
            (Err(_), Err(_)) => Ok(()),
            _ => Err(TestCaseError::fail("fltrust succeeded on only one of the rescaled inputs")),
        }
    });
    out.push((
        "robust: fltrust invariant to positive rescaling of one delta",
        r.map_err(|e| TestCaseError::fail(e.to_string())),
    ));
    out
}

fn distribution_learning() -> Vec<(&'static str, Check)> {
    let mut out = Vec::new();
    let r = runner(8).run(&(0u64..1000, 0usize..12), |(seed, iters)| {
        let spec = BlobSpec { dims: ImageDims::new(1, 6, 6), classes: 3, radius: 0.3, sigma: 0.1 };
        let model = ModelSpec::logreg(spec.dims, 3).build().unwrap();
        let theta = model.init(seed);
        let data = synthetic_blobs(8, &spec, seed).unwrap();
        let (_, target) = model.loss_and_grad(&theta, &data).unwrap();
        let cfg = InversionConfig { images: 4, max_iters: iters, lr: 0.05, beta: 1e-4 };
        let a = invert_gradients(&model, &target, &theta, &cfg, seed).unwrap();
        let b = invert_gradients(&model, &target, &theta, &cfg, seed).unwrap();
        ensure(a.images == b.images && a.s_r == b.s_r, "inversion not deterministic")?;
        ensure(a.objective <= a.initial_objective, "objective rose above its initial value")
    });
    out.push((
        "inversion: deterministic, objective never above init",
        r.map_err(|e| TestCaseError::fail(e.to_string())),
    ));

    let strat = (prop::collection::vec(-4.0f64..4.0, 2..10), 0.01f64..100.0, any::<u64>());
    let r = runner(256).run(&strat, |(u, c, s)| {
        let v: Vec<f64> = u.iter().enumerate().map(|(i, x)| x * 0.5 + ((s >> (i % 60)) & 1) as f64).collect();
        prop_assume!(u.iter().any(|x| x.abs() > 1e-6) && v.iter().any(|x| x.abs() > 1e-6));
        let cu: Vec<f64> = u.iter().map(|x| x * c).collect();
        let a = cosine(&u, &v).unwrap();
        let b = cosine(&cu, &v).unwrap();
        ensure((a - b).abs() <= 1e-12, "cosine not scale invariant")
    });
    out.push(("inversion: cosine scale invariance", r.map_err(|e| TestCaseError::fail(e.to_string()))));
    out
}

fn feature_set(rows: usize, dim: usize, seed: u64) -> FeatureSet {
    let mut rng = rng_from(seed, &[77]);
    FeatureSet::new(dim, (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

use rand::Rng as _;

fn cue_engine() -> Vec<(&'static str, Check)> {
    let mut out = Vec::new();
    let r = runner(128).run(&(1usize..6, 2usize..6, any::<u64>(), any::<u64>()), |(n, dim, s1, s2)| {
        let x = feature_set(n + 1, dim, s1);
        let y = feature_set(n + 2, dim, s2);
        let bw = [0.5, 1.0, 2.0];
        let dxy = mmd(&x, &y, &bw).unwrap();
        let dyx = mmd(&y, &x, &bw).unwrap();
        ensure(dxy >= 0.0, "mmd negative")?;
        ensure((dxy - dyx).abs() <= 1e-12, "mmd not symmetric")?;
        ensure(mmd(&x, &x, &bw).unwrap() == 0.0, "mmd of a set with itself is non-zero")
    });
    out.push((
        "cues: mmd non-negative, symmetric, zero on identical",
        r.map_err(|e| TestCaseError::fail(e.to_string())),
    ));

    let r = runner(256).run(&(0.0f64..20.0, 0.0f64..20.0), |(a, b)| {
        prop_assume!((a - b).abs() > 1e-6);
        let (d1, d2) = if a < b { (a, b) } else { (b, a) };
        let (s1, s2) = (sim_from_distance(d1).unwrap(), sim_from_distance(d2).unwrap());
        ensure(s1 > s2, format!("S({d1}) = {s1} not above S({d2}) = {s2}"))
    });
    out.push(("cues: sim_from_distance strictly decreasing", r.map_err(|e| TestCaseError::fail(e.to_string()))));

    let strat =
        (2usize..7, any::<u64>(), prop::collection::vec(any::<bool>(), 7), prop::collection::vec(-1.0f64..1.5, 7));
    let r = runner(128).run(&strat, |(k, seed, failed, s_r)| {
        let mut history = HistoryStore::new(10);
        for round in 0..3u64 {
            let ev: Vec<ClientEvidence> = (0..k)
                .map(|c| ClientEvidence {
                    client: c,
                    s_r: s_r[c],
                    features: if failed[c] && round == 1 {
                        None
                    } else {
                        Some(feature_set(4, 3, seed ^ (round * 31 + c as u64)))
                    },
                })
                .collect();
            let before = history.features.clone();
            let env = build_cues(&ev, &mut history, None).unwrap();
            ensure(env.len() == k && env.flatten().len() == 4 * k, "cue matrix shape")?;
            ensure(env.flatten().iter().all(|&v| (EPS_S..=1.0).contains(&v)), "cue outside [eps, 1]")?;
            for e in &ev {
                match &e.features {
                    Some(f) => {
                        ensure(history.features[e.client].as_ref() == Some(f), "history is not this round's features")?
                    }
                    None => ensure(history.features[e.client] == before[e.client], "failed client's history changed")?,
                }
            }
        }
        Ok(())
    });
    out.push((
        "cues: bounded entries, |C|x4 shape, one-step history",
        r.map_err(|e| TestCaseError::fail(e.to_string())),
    ));
    out
}

fn small_td3() -> Td3Config {
    Td3Config { hidden: vec![8, 8], batch_size: 4, warmup: 0, capacity: 64, lr: 1e-3, ..Td3Config::default() }
}

fn rl_core() -> Vec<(&'static str, Check)> {
    let mut out = Vec::new();
    let strat = (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, 0.0f64..1.0, any::<bool>());
    let r = runner(256).run(&strat, |(r, q1, q2, g, done)| {
        let y = td3_target(r, done, g, q1, q2);
        let want = if done { r } else { r + g * q1.min(q2) };
        ensure(y == want, "target does not use the min of the twin critics")
    });
    out.push(("rl: clipped double-Q target uses the min", r.map_err(|e| TestCaseError::fail(e.to_string()))));

    let r = runner(16).run(&(any::<u64>(), -3.0f64..3.0, -3.0f64..3.0), |(seed, c1, c2)| {
        let mut agent = Td3Agent::new(3, 2, small_td3(), seed).unwrap();
        let blocks = agent.critic_net.blocks().to_vec();
        let last = blocks.last().unwrap().clone();
        for (params, c) in [(&mut agent.q1_target, c1), (&mut agent.q2_target, c2)] {
            params.iter_mut().for_each(|x| *x = 0.0);
            params[last.start] = c;
        }
        let mut rng = rng_from(seed, &[3]);
        for _ in 0..8 {
            let s: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            agent
                .push(Transition {
                    state: s.clone(),
                    action: a,
                    reward: rng.gen_range(-1.0..1.0),
                    next_state: s,
                    done: false,
                })
                .unwrap();
        }
        let stats = agent.train_step().unwrap();
        ensure(stats.targets.len() == 4, "batch size")?;
        let rewards: Vec<f64> = (0..agent.replay.len()).map(|i| agent.replay.get(i).unwrap().reward).collect();
        for y in &stats.targets {
            let r = y - agent.cfg.gamma * c1.min(c2);
            ensure(
                rewards.iter().any(|x| (x - r).abs() <= 1e-12),
                "instrumented target not built from the min critic",
            )?;
        }
        Ok(())
    });
    out.push((
        "rl: instrumented train step regresses onto the min target",
        r.map_err(|e| TestCaseError::fail(e.to_string())),
    ));

    let r = runner(16).run(&any::<u64>(), |seed| {
        let mut agent = Td3Agent::new(2, 2, Td3Config { policy_delay: 1, ..small_td3() }, seed).unwrap();
        for i in 0..6 {
            let x = i as f64 / 6.0;
            agent
                .push(Transition {
                    state: vec![x, -x],
                    action: vec![x, x],
                    reward: x,
                    next_state: vec![x, x],
                    done: i == 5,
                })
                .unwrap();
        }
        let old = (agent.actor_target.clone(), agent.q1_target.clone(), agent.q2_target.clone());
        agent.train_step().unwrap();
        let tau = agent.cfg.tau;
        for (target, params, old) in [
            (&agent.actor_target, &agent.actor, &old.0),
            (&agent.q1_target, &agent.q1, &old.1),
            (&agent.q2_target, &agent.q2, &old.2),
        ] {
            for ((t, p), o) in target.iter().zip(params.iter()).zip(old.iter()) {
                ensure(*t == tau * p + (1.0 - tau) * o, "soft update is not exact")?;
            }
        }
        let mut t = vec![1.0, -2.0];
        soft_update(&mut t, &[3.0, 4.0], 0.25);
        ensure(t == vec![0.25 * 3.0 + 0.75 * 1.0, 0.25 * 4.0 + 0.75 * -2.0], "soft_update arithmetic")
    });
    out.push(("rl: soft update exact", r.map_err(|e| TestCaseError::fail(e.to_string()))));

    let r = runner(64).run(&(1usize..20, 1usize..60, any::<u64>()), |(cap, pushes, seed)| {
        let mut buf = ReplayBuffer::new(cap);
        for i in 0..pushes {
            buf.push(Transition {
                state: vec![i as f64],
                action: vec![],
                reward: i as f64,
                next_state: vec![],
                done: false,
            });
        }
        let kept = pushes.min(cap);
        ensure(buf.len() == kept, "buffer length")?;
        let rewards: Vec<f64> = (0..kept).map(|i| buf.get(i).unwrap().reward).collect();
        let want: Vec<f64> = (pushes - kept..pushes).map(|i| i as f64).collect();
        let (mut a, mut b) = (rewards.clone(), want.clone());
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        ensure(a == b, "FIFO eviction kept the wrong transitions")?;
        let s1: Vec<f64> = buf.sample(10, &mut rng_from(seed, &[1])).iter().map(|t| t.reward).collect();
        let s2: Vec<f64> = buf.sample(10, &mut rng_from(seed, &[1])).iter().map(|t| t.reward).collect();
        ensure(s1 == s2, "sampling not reproducible under a seed")
    });
    out.push(("rl: replay FIFO eviction and seeded sampling", r.map_err(|e| TestCaseError::fail(e.to_string()))));

    let mut buf = ReplayBuffer::new(5);
    for i in 0..5 {
        buf.push(Transition { state: vec![], action: vec![], reward: i as f64, next_state: vec![], done: false });
    }
    let mut counts = [0usize; 5];
    let mut rng = rng_from(9, &[2]);
    for t in buf.sample(50_000, &mut rng) {
        counts[t.reward as usize] += 1;
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - 10_000.0).powi(2) / 10_000.0).sum();
    out.push((
        "rl: replay sampling uniform (chi-square, 4 dof, p > 0.001)",
        ensure(chi2 < 18.47, format!("chi2 = {chi2}")),
    ));
    out
}

fn env_from(cues: &[[f64; 4]]) -> EnvState {
    EnvState { rows: cues.iter().enumerate().map(|(client, &c)| CueEntry { client, cues: c }).collect() }
}

fn adaagg() -> Vec<(&'static str, Check)> {
    let mut out = Vec::new();
    let strat = (
        vectors(1..=8, 1..=4),
        prop::collection::vec(-3.0f64..3.0, 8),
        prop::collection::vec(0u32..5, 8),
        1.0f64..4.0,
        0.0f64..1.0,
        0.01f64..0.2,
    );
    let r = runner(512).run(&strat, |(vs, w_hat, h, lambda, b, kappa)| {
        let n = vs.len();
        let ups: Vec<ParamVector> = vs.into_iter().map(pv).collect();
        let refs: Vec<&ParamVector> = ups.iter().collect();
        let global = pv(vec![0.0; ups[0].len()]);
        let w_tilde = normalize_scores(&w_hat[..n], kappa);
        let (w, excluded) = apply_threshold(&w_tilde, b);
        let (_, e) = penalized_aggregate(&refs, &w, &h[..n], lambda, &global).unwrap();
        ensure(e.iter().all(|&x| x >= 0.0), "negative effective weight")?;
        let total: f64 = e.iter().sum();
        ensure(total == 0.0 || (total - 1.0).abs() <= 1e-12, format!("weights sum to {total}"))?;
        ensure(excluded.iter().zip(&w).all(|(&x, &wk)| !x || wk == 0.0), "excluded client kept weight")?;
        for b2 in [b, (b + 0.1).min(1.0), 1.0] {
            let (_, ex2) = apply_threshold(&w_tilde, b2);
            ensure(excluded.iter().zip(&ex2).all(|(&a, &c)| !a || c), "exclusion set shrank as b grew")?;
        }
        // λ = 1 collapses to thresholded weighted averaging.
        if w.iter().sum::<f64>() > 0.0 {
            let (agg, _) = penalized_aggregate(&refs, &w, &h[..n], 1.0, &global).unwrap();
            let s: f64 = w.iter().sum();
            let mut want = vec![0.0; global.len()];
            for (u, wk) in refs.iter().zip(&w) {
                for (o, x) in want.iter_mut().zip(&u.0) {
                    *o += wk / s * x;
                }
            }
            let reference = weighted_aggregate(&refs, &w).unwrap();
            for ((a, b), c) in agg.0.iter().zip(&want).zip(&reference.0) {
                ensure((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "λ = 1 differs from weighted FedAvg oracle")?;
                ensure((a - c).abs() <= 1e-12 * (1.0 + c.abs()), "λ = 1 differs from weighted_aggregate")?;
            }
        }
        Ok(())
    });
    out.push((
        "adaagg: weight conservation, exclusion monotone in b, λ = 1 collapse",
        r.map_err(|e| TestCaseError::fail(e.to_string())),
    ));

    let r = runner(256).run(
        &prop::collection::vec(
            (prop::collection::vec(any::<bool>(), 6), prop::sample::subsequence((0..10).collect::<Vec<usize>>(), 6)),
            1..20,
        ),
        |rounds| {
            let mut h = vec![0u32; 10];
            for (ex, clients) in rounds {
                let before = h.clone();
                update_h(&ex[..clients.len()], &clients, &mut h);
                for c in 0..10 {
                    let d = h[c] as i64 - before[c] as i64;
                    ensure((-1..=1).contains(&d), "h moved by more than one")?;
                    if !clients.contains(&c) {
                        ensure(d == 0, "unsampled client's h changed")?;
                    }
                }
            }
            Ok(())
        },
    );
    out.push((
        "adaagg: h moves by at most one per round and never below zero",
        r.map_err(|e| TestCaseError::fail(e.to_string())),
    ));

    let strat = (
        prop::collection::vec(prop::array::uniform4(0.0f64..1.0), 1..6),
        prop::array::uniform4(0.0f64..1.0),
        0usize..4,
    );
    let r = runner(256).run(&strat, |(cues, a, col)| {
        let mut mask = [false; 4];
        mask[col] = true;
        let masked = mask_state(&env_from(&cues), &mask);
        ensure(masked.rows.iter().all(|r| r.cues[col] == 0.0), "masked column not zeroed")?;
        let aw = mask_weights(&a, &mask);
        ensure(aw[col] == 0.0, "masked weight not zero")?;
        ensure((aw.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "remaining weights do not sum to one")?;
        let open: f64 = (0..4).filter(|&j| j != col).map(|j| a[j]).sum();
        if open > 0.0 {
            for j in (0..4).filter(|&j| j != col) {
                ensure((aw[j] - a[j] / open).abs() <= 1e-12, "renormalization is not proportional")?;
            }
        }
        Ok(())
    });
    out.push((
        "adaagg: cue masking zeroes the column and renormalizes a",
        r.map_err(|e| TestCaseError::fail(e.to_string())),
    ));
    out
}

fn synthetic_config(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.data.dataset = adaagg_core::experiment::DatasetKind::Synthetic;
    cfg.data.train_size = 400;
    cfg.data.test_size = 100;
    cfg.data.validation_size = 50;
    cfg.federation.model = adaagg_core::model::Architecture::Logreg;
    cfg.federation.clients = 8;
    cfg.federation.malicious = 2;
    cfg.federation.q = 0.5;
    cfg.federation.sample_fraction = 0.5;
    cfg.federation.rounds = 4;
    cfg.federation.lr = 0.5;
    cfg.run.output = out.to_path_buf();
    cfg.run.timing = false;
    cfg
}

fn experiment() -> Vec<(&'static str, Check)> {
    let mut out = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    let cfg = synthetic_config(dir.path());
    let r = (|| -> Check {
        run_experiment(&cfg, &mut |_| {}).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let text = std::fs::read_to_string(dir.path().join("config.resolved"))
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        let back = ExperimentConfig::from_toml(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
        ensure(back == cfg, "config.resolved does not reproduce the effective config")?;
        ensure(
            text.contains("kappa") && text.contains("policy_delay") && text.contains("fltrust_size"),
            "defaults missing from config.resolved",
        )
    })();
    out.push(("experiment: config.resolved captures every effective value", r));

    let r = (|| -> Check {
        let fed = tiny_federation(6, 2, 5);
        let wdir = tempfile::tempdir().unwrap();
        let mut w = RunWriter::create(wdir.path(), true).unwrap();
        let mut global = fed.model.init(5);
        for t in 0..4 {
            let plan = sample_round(6, 0.5, t, 5).unwrap();
            let (next, rec) = fed.run_round(&global, None, &plan, &mut NoAttack, &mut FedAvg).unwrap();
            global = next;
            w.write(&cfg, 5, &rec).unwrap();
            let metrics = std::fs::read_to_string(wdir.path().join("metrics.csv")).unwrap();
            ensure(metrics.lines().count() == t + 2, "metrics.csv not flushed after the round")?;
            ensure(metrics.ends_with('\n'), "partial metrics row on disk")?;
            let wall = std::fs::read_to_string(wdir.path().join("wall.csv")).unwrap();
            ensure(wall.lines().count() == t + 2, "wall.csv not flushed after the round")?;
        }
        Ok(())
    })();
    out.push(("experiment: CSVs append and flush every round", r));
    out
}

/// Runs every invariant group; returns `(name, error)` for each failure and
/// the number of properties checked.
pub fn run_all() -> (usize, Vec<(String, String)>) {
    let groups: Vec<Group> =
        vec![model_core, fl_engine, attacks, robust, distribution_learning, cue_engine, rl_core, adaagg, experiment];
    let mut total = 0;
    let mut failures = Vec::new();
    for g in groups {
        for (name, res) in g() {
            total += 1;
            if let Err(e) = res {
                failures.push((name.to_string(), e.to_string()));
            }
        }
    }
    (total, failures)
}
