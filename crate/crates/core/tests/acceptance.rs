//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any criterion outside `KNOWN_RED` fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dlo_core::env::{compute_reward, execute_episode, oracle_action, oracle_scene, EnvConfig, RewardBranch, RewardInputs};
use dlo_core::estimator::{evaluation_samples, matched_distances, report_row, train_estimator, EstimatorSpec, Method};
use dlo_core::flexibility::{
    compute_flexibility, generate_flex_dataset, linear_sweep, point_point_distance, project_point, spearman, DatasetSpec,
    ProjectedCurve,
};
use dlo_core::neural::{gradient_check, Activation, ChainGnn, DenseNet, TrainConfig};
use dlo_core::policy::{
    cem_optimize, evaluate, sac_train, table_row, Agent, Bandit, CemConfig, EvalSpec, FMode, InsertionBandit, Metrics,
    QuadraticBandit, RandomAgent, Sac, SacAgent, SacConfig, VisualBaseline,
};
use dlo_core::seed;
use dlo_core::sim::{
    init_rope, settle_quasi_static, step, Grasp, RingConfig, RopeParams, RopeState, Vec3, World, CONTACT_MARGIN,
};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;

/// Criteria expected to fail; the reasons are in the decisions ledger.
const KNOWN_RED: &[u32] = &[2, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn gradient_checks() -> Outcome {
    let t = Instant::now();
    let mut worst_dense: f64 = 0.0;
    let mut worst_gnn: f64 = 0.0;
    for k in 0..100 {
        let mut r = seed::stream(11, "acceptance-dense", k);
        let depth = r.random_range(1..=3);
        let mut widths = vec![r.random_range(1..=5)];
        let mut acts = Vec::new();
        for d in 0..depth {
            widths.push(r.random_range(1..=5));
            acts.push(if d + 1 == depth { Activation::Identity } else { Activation::Tanh });
        }
        let net = DenseNet::new(&widths, &acts, &mut r).unwrap();
        let batch = r.random_range(1..=4);
        let x = Array2::from_shape_fn((batch, widths[0]), |_| r.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((batch, *widths.last().unwrap()), |_| r.random_range(-1.0..1.0));
        let (_, cache) = net.forward(x.view()).unwrap();
        let (g, _) = net.backward(&cache, w.view()).unwrap();
        let err = gradient_check(&net, &g, 1e-6, 1e-6, |m| (m.predict(x.view()).unwrap() * &w).sum());
        worst_dense = worst_dense.max(err);

        let mut r = seed::stream(11, "acceptance-gnn", k);
        let gnn = ChainGnn::new(2, r.random_range(2..=6), &mut r).unwrap();
        let batch = r.random_range(1..=3);
        let x = Array3::from_shape_fn((batch, r.random_range(3..=8), 2), |_| r.random_range(-1.0..1.0));
        let w = Array1::from_shape_fn(batch, |_| r.random_range(-1.0..1.0));
        let (_, cache) = gnn.forward(x.view()).unwrap();
        let (g, _) = gnn.backward(&cache, w.view()).unwrap();
        let err = gradient_check(&gnn, &g, 1e-5, 1e-6, |m| m.predict(x.view()).unwrap().dot(&w));
        worst_gnn = worst_gnn.max(err);
    }
    let e = t.elapsed();
    outcome(
        worst_dense < 1e-5 && worst_gnn < 1e-5 && within(e, 60),
        format!("worst relative error dense {worst_dense:.2e}, gnn {worst_gnn:.2e} over 100 instances each; {e:.1?}"),
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn formula_suite() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };

    let p = Vec3::new(1.0, 2.0, 3.0);
    let a = project_point(&p, &Vec3::x()).unwrap();
    check("projection x-normal", close(a[0], 2.0) && close(a[1], -3.0));
    let b = project_point(&p, &Vec3::y()).unwrap();
    check("projection y-normal", close(b[0], -1.0) && close(b[1], -3.0));
    let n = Vec3::new(0.6, 0.8, 0.0);
    let o = project_point(&Vec3::zeros(), &n).unwrap();
    check("projection origin", o == [0.0, 0.0]);

    let line = ProjectedCurve::from_points((0..6).map(|i| [0.013 * i as f64, 0.0]).collect()).unwrap();
    check("collinear gives zero", compute_flexibility(&line, 1).unwrap() == 0.0);
    let bent = ProjectedCurve::from_points(vec![[0.0, 0.0], [0.01, 0.002], [0.02, 0.003], [0.03, 0.001], [0.04, -0.004]]).unwrap();
    let f = compute_flexibility(&bent, 0).unwrap();
    let mirrored = compute_flexibility(&bent.map_points(|q| [q[0], -q[1]]), 0).unwrap();
    check("mirror negates", close(f, -mirrored) && f != 0.0);

    let radius = 0.5;
    let h = 0.012;
    let circle: Vec<[f64; 2]> = (0..6)
        .map(|k| {
            let phi = (k as f64 - 1.0) * h / radius;
            [radius * phi.sin(), radius * phi.cos()]
        })
        .collect();
    let fc = compute_flexibility(&ProjectedCurve::from_points(circle).unwrap(), 1).unwrap();
    let circle_ok = (fc * radius - 1.0).abs() < 0.05;
    check(&format!("circle |f·R − 1| < 0.05 (f·R = {:.4})", fc * radius), circle_ok);

    let reward = |rope_in, rope_out, d_floor, d_ceil, stretch_ratio| {
        compute_reward(&RewardInputs { rope_in, rope_out, d_floor, d_ceil, stretch_ratio })
    };
    let r = reward(false, false, 0.10, 0.0, 1.0);
    check("reward not inserted", close(r.reward, -1.0) && r.branch == RewardBranch::NotInserted);
    let r = reward(true, false, 0.03, 0.02, 1.1);
    check("reward halfway", close(r.reward, 0.6) && r.branch == RewardBranch::Halfway);
    let r = reward(true, true, 0.05, 0.04, 1.3);
    check("reward through with penalty", close(r.reward, -0.5) && r.branch == RewardBranch::Through);

    let mut rng = seed::stream(12, "acceptance-pp", 0);
    let pts: Vec<[f64; 2]> = (0..20).map(|_| [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)]).collect();
    let c = ProjectedCurve::from_points(pts).unwrap();
    check("pp identity", point_point_distance(&c, &c).unwrap() == 0.0);
    let shifted = c.map_points(|q| [q[0] + 0.001, q[1]]);
    check("pp offset", close(point_point_distance(&c, &shifted).unwrap(), 0.001));

    outcome(failures.is_empty(), if failures.is_empty() { "all examples hold".into() } else { format!("failed: {}", failures.join("; ")) })
}

fn ring_penetration(ring: &RingConfig, p: &Vec3) -> f64 {
    let e = ring.axis();
    let r = p - ring.center;
    let s = r.dot(&e);
    let rho = (r - e * s).norm();
    (ring.depth / 2.0 - s.abs()).min(rho - ring.inner_radius).min(ring.outer_radius - rho).max(0.0)
}

fn bitwise_equal(a: &RopeState, b: &RopeState) -> bool {
    a.positions.iter().zip(&b.positions).all(|(p, q)| p.iter().zip(q.iter()).all(|(x, y)| x.to_bits() == y.to_bits()))
}

fn simulator_properties() -> Outcome {
    let t = Instant::now();
    let mut worst_residual: f64 = 0.0;
    let mut pinned = true;
    let mut worst_penetration: f64 = 0.0;
    let mut deterministic = true;
    for k in 0..16 {
        let mut r = seed::stream(13, "acceptance-sim", k);

        let params = RopeParams::from_sweep(r.random_range(0.5..=1.0), 20);
        let grasp = r.random_range(0..10);
        let mut st = init_rope(&params, Vec3::new(-(grasp as f64) * params.rest_len, 0.0, 0.5), Vec3::x()).unwrap();
        st.grasp = Some(Grasp::jaw(grasp, Vec3::new(0.0, 0.0, 0.5), Vec3::x()));
        for _ in 0..400 {
            step(&mut st, &params, &World::floor_only()).unwrap();
            for w in st.positions.windows(2) {
                worst_residual = worst_residual.max(((w[1] - w[0]).norm() - params.rest_len).abs() / params.rest_len);
            }
        }

        let params = RopeParams::from_sweep(r.random_range(0.0..=1.0), 20);
        let target = Vec3::new(r.random_range(-0.2..0.2), r.random_range(-0.2..0.2), r.random_range(0.1..0.6));
        let g = r.random_range(0..20);
        let mut st = init_rope(&params, Vec3::new(0.0, 0.0, 0.3), Vec3::x()).unwrap();
        st.grasp = Some(Grasp::point(g, target));
        for _ in 0..30 {
            step(&mut st, &params, &World::floor_only()).unwrap();
            pinned &= st.positions[g] == target;
        }

        let ring = RingConfig::new(Vec3::new(0.0, 0.0, 0.2), r.random_range(0.0..2.3), r.random_range(0.01..0.025));
        let world = World::with_ring(ring.clone());
        let params = RopeParams::from_sweep(r.random_range(0.0..=1.0), 30);
        let base = ring.center + Vec3::new(-0.15, 0.0, r.random_range(0.02..0.15)) + ring.horizontal() * r.random_range(-0.05..0.05);
        let run = || {
            let mut st = init_rope(&params, base, ring.horizontal()).unwrap();
            let mut worst: f64 = 0.0;
            for _ in 0..300 {
                step(&mut st, &params, &world).unwrap();
                for p in &st.positions {
                    worst = worst.max(ring_penetration(&ring, p)).max(-p.z);
                }
            }
            (st, worst)
        };
        let (a, worst) = run();
        let (b, _) = run();
        worst_penetration = worst_penetration.max(worst);
        deterministic &= bitwise_equal(&a, &b);
    }

    let base = RopeParams::from_sweep(0.5, 20);
    let mut droops = Vec::new();
    let mut settled = true;
    for k in 0..10 {
        let params = RopeParams { bend_stiffness: 0.1 + 0.1 * k as f64, ..base.clone() };
        let mut st = init_rope(&params, Vec3::new(0.0, 0.0, 0.5), Vec3::x()).unwrap();
        st.grasp = Some(Grasp::jaw(0, Vec3::new(0.0, 0.0, 0.5), Vec3::x()));
        settled &= settle_quasi_static(&mut st, &params, &World::floor_only(), 4000, 1e-4).unwrap().converged;
        droops.push(0.5 - st.positions[params.n - 1].z);
    }
    let monotone = droops.windows(2).all(|w| w[1] <= w[0]);

    let e = t.elapsed();
    let pass = worst_residual <= 0.05
        && pinned
        && worst_penetration <= CONTACT_MARGIN + 1e-12
        && deterministic
        && settled
        && monotone
        && within(e, 120);
    outcome(
        pass,
        format!(
            "residual {:.2}% of rest, pinned {pinned}, penetration {:.2} mm, deterministic {deterministic}, droop {:.1}→{:.1} cm non-increasing {monotone}; {e:.1?}",
            100.0 * worst_residual,
            1e3 * worst_penetration,
            100.0 * droops[0],
            100.0 * droops[9],
        ),
    )
}

fn flexibility_pipeline() -> Outcome {
    let t = Instant::now();
    let ds = generate_flex_dataset(&DatasetSpec::new(linear_sweep(0.05, 1.0, 200), 50, 0)).unwrap();
    let lib = ds.library();
    let sweeps: Vec<f64> = lib.iter().map(|s| s.sweep_param).collect();
    let labels: Vec<f64> = lib.iter().map(|s| s.label_f).collect();
    let rho = spearman(&sweeps, &labels);

    let evals = evaluation_samples(&ds);
    let analytic = report_row("Analytic", &matched_distances(&Method::Analytic, &evals, &lib).unwrap()).mean_mm;
    let tc = TrainConfig::default();
    let learned = |spec: EstimatorSpec| {
        let (est, _) = train_estimator(&spec, &ds).unwrap();
        report_row("", &matched_distances(&Method::Learned(&est), &evals, &lib).unwrap()).mean_mm
    };
    let gnn = learned(EstimatorSpec::gnn(true, tc.clone()));
    let no_aug = learned(EstimatorSpec::gnn(false, tc));
    let e = t.elapsed();
    let pass = gnn <= 0.95 * no_aug && gnn <= 0.95 * analytic && rho <= -0.9 && within(e, 900);
    outcome(
        pass,
        format!(
            "d_pp mm: GNN {gnn:.2}, GNN w/o aug {no_aug:.2} (margin {:.1}%), Analytic {analytic:.2} (margin {:.1}%); spearman {rho:.3}; {e:.1?}",
            100.0 * (1.0 - gnn / no_aug),
            100.0 * (1.0 - gnn / analytic),
        ),
    )
}

fn policy_sanity() -> Outcome {
    let t = Instant::now();
    let q = QuadraticBandit { target: vec![0.3, -0.2, 0.5, -0.6, 0.1, 0.0, 0.4], context_dim: 3, seed: 5 };
    let mut sac_worst: f64 = 0.0;
    for s in 0..3 {
        let cfg = SacConfig { episodes: 5000, eval_every: 5000, updates_per_episode: 2, seed: s, ..SacConfig::default() };
        let mut sac = Sac::new(q.feature_dim(), q.action_dim(), cfg).unwrap();
        sac_train(&q, &mut sac).unwrap();
        for k in 0..20 {
            let (x, _) = q.reset("eval", k).unwrap();
            let a = sac.actor.mean_action(&x).unwrap();
            for (ai, c) in a.iter().zip(&q.target) {
                sac_worst = sac_worst.max((ai - c).abs());
            }
        }
    }
    let cfg = CemConfig::default();
    let res = cem_optimize(q.action_dim(), &cfg, |_, a| Ok(q.play(&(), a)?.reward)).unwrap();
    let cem_worst = res.mean.iter().zip(&q.target).map(|(m, c)| (m - c).abs()).fold(0.0, f64::max);
    let cem_episodes = cfg.population * cfg.iterations;
    let e = t.elapsed();
    outcome(
        sac_worst <= 0.05 && cem_worst <= 0.05 && cem_episodes <= 5000 && within(e, 300),
        format!("SAC worst |a − c|∞ {sac_worst:.4} (3 seeds × 20 contexts, 5000 episodes), CEM {cem_worst:.4} ({cem_episodes} episodes); {e:.1?}"),
    )
}

fn oracle_smoke() -> Outcome {
    let t = Instant::now();
    let cfg = EnvConfig::default();
    let scene = oracle_scene(&cfg, 0).unwrap();
    let action = oracle_action(cfg.rope_n, &cfg.bounds());
    let a = execute_episode(&scene, &action);
    let b = execute_episode(&scene, &action);
    let e = t.elapsed();
    outcome(a.rope_out && a == b && within(e, 10), format!("rope_in {} rope_out {} repeatable {}; {e:.1?}", a.rope_in, a.rope_out, a == b))
}

struct Ablation {
    ours_f: Vec<Metrics>,
    ours_no_f: Vec<Metrics>,
    random_f: Vec<Metrics>,
    vb_f: Vec<Metrics>,
    vb_no_f: Vec<Metrics>,
    random: Vec<Metrics>,
    elapsed: Duration,
}

fn train_policy(base: &EnvConfig, provide_f: bool, s: u64) -> SacAgent {
    let cfg = EnvConfig { provide_f, seed: s, ..base.clone() };
    let bandit = InsertionBandit::new(cfg, FMode::Truth, None).unwrap();
    let sc = SacConfig { episodes: 8000, eval_every: 8000, seed: s, ..SacConfig::default() };
    let mut sac = Sac::new(bandit.feature_dim(), bandit.action_dim(), sc).unwrap();
    sac_train(&bandit, &mut sac).unwrap();
    let label = if provide_f { "Ours w/ f" } else { "Ours w/o f" };
    SacAgent { label: label.into(), policy: sac.actor, provide_f }
}

fn ablation() -> Ablation {
    let t = Instant::now();
    let base = EnvConfig::default();
    let mut ab = Ablation {
        ours_f: vec![],
        ours_no_f: vec![],
        random_f: vec![],
        vb_f: vec![],
        vb_no_f: vec![],
        random: vec![],
        elapsed: Duration::ZERO,
    };
    for s in 0..3u64 {
        let with_f = train_policy(&base, true, s);
        let without_f = train_policy(&base, false, s);
        let spec = EvalSpec { episodes: 100, seed: 100 + s, f_mode: FMode::Truth, radius: Some(0.025) };
        let random_spec = EvalSpec { f_mode: FMode::Random, ..spec.clone() };
        let run = |agent: &dyn Agent, spec: &EvalSpec| evaluate(agent, &base, spec, None).unwrap().0;
        ab.ours_f.push(run(&with_f, &spec));
        ab.ours_no_f.push(run(&without_f, &spec));
        ab.random_f.push(run(&with_f, &random_spec));
        ab.vb_f.push(run(&VisualBaseline::new(true), &spec));
        ab.vb_no_f.push(run(&VisualBaseline::new(false), &spec));
        ab.random.push(run(&RandomAgent, &spec));
    }
    ab.elapsed = t.elapsed();
    ab
}

fn ablation_ordering(ab: &Ablation) -> Outcome {
    let row = |name: &str, m: &[Metrics]| table_row(name, "rand", m);
    let rows = [
        row("Ours w/ f", &ab.ours_f),
        row("Ours w/o f", &ab.ours_no_f),
        row("Random f", &ab.random_f),
        row("VB w/ f", &ab.vb_f),
        row("VB w/o f", &ab.vb_no_f),
        row("Random", &ab.random),
    ];
    for r in &rows {
        println!(
            "    {:<11} success {:5.1} ± {:4.1} %  avg dist {:6.2} ± {:4.2} cm",
            r.method, r.success_pct, r.success_std, r.avg_dist_cm, r.avg_dist_std_cm
        );
    }
    let (ours, no_f, rand_f, vb) = (rows[0].success_pct, rows[1].success_pct, rows[2].success_pct, rows[3].success_pct);
    outcome(
        ours >= no_f && no_f >= rand_f && ours >= vb && within(ab.elapsed, 4 * 3600),
        format!("success %: ours w/ f {ours:.1} ≥ ours w/o f {no_f:.1} ≥ random f {rand_f:.1}; ours w/ f ≥ VB w/ f {vb:.1}; {:.1?}", ab.elapsed),
    )
}

fn angle_trend(ab: &Ablation) -> Outcome {
    let mut wins = [0.0; 3];
    let mut counts = [0usize; 3];
    for m in &ab.ours_f {
        for (k, b) in m.bands.iter().enumerate() {
            wins[k] += b.success_pct / 100.0 * b.episodes as f64;
            counts[k] += b.episodes;
        }
    }
    let rates: Vec<f64> = wins.iter().zip(&counts).map(|(w, &c)| if c == 0 { 0.0 } else { 100.0 * w / c as f64 }).collect();
    outcome(
        rates[0] >= rates[1] && rates[1] >= rates[2] && counts.iter().all(|&c| c > 0),
        format!(
            "ours w/ f success by band: low {:.1}% ({}), mid {:.1}% ({}), high {:.1}% ({})",
            rates[0], counts[0], rates[1], counts[1], rates[2], counts[2]
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        let tag = if o.pass { "PASS" } else if KNOWN_RED.contains(&id) { "FAIL (known red)" } else { "FAIL" };
        println!("[{tag}] criterion {id}: {name}: {}", o.detail);
        results.push((id, name, o));
    };
    report(1, "gradient checks", gradient_checks());
    report(2, "formula unit suite", formula_suite());
    report(3, "simulator properties", simulator_properties());
    report(4, "flexibility pipeline ordering", flexibility_pipeline());
    report(5, "policy sanity", policy_sanity());
    report(6, "oracle insertion smoke", oracle_smoke());
    let ab = ablation();
    report(7, "ablation ordering", ablation_ordering(&ab));
    report(8, "angle difficulty trend", angle_trend(&ab));

    let unexpected: Vec<u32> = results.iter().filter(|(id, _, o)| !o.pass && !KNOWN_RED.contains(id)).map(|(id, _, _)| *id).collect();
    let fixed: Vec<u32> = results.iter().filter(|(id, _, o)| o.pass && KNOWN_RED.contains(id)).map(|(id, _, _)| *id).collect();
    if !fixed.is_empty() {
        println!("known-red criteria now passing: {fixed:?}");
    }
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
