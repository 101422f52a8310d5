//! Acceptance suite: one PASS/FAIL line per criterion, with runtime.
//!
//! Set `PIDFLOW_ACCEPT=1,4` to run a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use pidflow::analysis::{
    compare_trajectories, dep_from_deltas, mean, Delta, ShareRow,
};
use pidflow::pid::{self, nats_to_bits, Component, InfoState, JointGaussian};
use pidflow::pipeline::{estimate_layer, run_pipeline, EstimatorSettings, PipelineConfig, Profile};
use pidflow::synth::{self, solve_profile, DiscreteSystem, GaussianLayerSpec, ProfileRow, RegimeScript};
use pidflow::trajectory::{
    assemble_trajectory, classify_mechanism, detect_turning_points, threshold_sweep, Mechanism, SweepGrid,
    ThresholdConfig, Trajectory, TrajectoryMeta,
};
use pidflow::{store, Result};

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Result<(bool, String)>,
    /// Analysed deviation: a failure is reported but does not fail the run.
    known: Option<&'static str>,
}

fn fixtures() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/regimes")
}

fn bits(x: f64) -> f64 {
    nats_to_bits(x)
}

// ---------------------------------------------------------------------------
// 1. Gaussian MI exactness
// ---------------------------------------------------------------------------

fn c1_gaussian_mi() -> Result<(bool, String)> {
    // -1/2 log2(1 - rho^2), 30-digit mpmath.
    let frozen = [(0.0, 0.0), (0.5, 0.207_518_749_639_421_9), (0.9, 1.197_964_338_165_569_6)];
    let printed = [0.0, 0.207519, 1.197971];
    let mut ok = true;
    let mut parts = Vec::new();
    for ((rho, want), lit) in frozen.iter().zip(printed) {
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, *rho, 0.0, 1.0, 0.0, *rho, 0.0, 1.0]);
        let j = JointGaussian::from_cov(1, 1, 1, cov)?;
        let got = bits(pid::gaussian_mi(&j, &j.language(), &j.target())?);
        let err = (got - want).abs();
        ok &= err <= 1e-9;
        parts.push(format!("rho={rho}: {got:.9} bits (err {err:.1e}, printed {lit} off by {:.1e})", (got - lit).abs()));
    }
    Ok((ok, parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 2. PID algebra on random covariances
// ---------------------------------------------------------------------------

fn random_cov(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a: DMatrix<f64> = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    (&a * a.transpose()) / d as f64 + DMatrix::identity(d, d) * 0.05
}

fn c2_pid_algebra() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (mut worst_clamp, mut worst_add, mut worst_id) = (0.0f64, 0.0f64, 0.0f64);
    let (mut neg, mut min_nonzero) = (0, 0);
    for _ in 0..1000 {
        let (dq, di, dy) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=2));
        let j = JointGaussian::from_cov(dq, di, dy, random_cov(&mut rng, dq + di + dy))?;
        let t = pid::mmi_terms(&j)?;
        let r = t.i_v.min(t.i_l);
        let raw = [r, t.i_v - r, t.i_l - r, t.i_joint - t.i_l - t.i_v + r];
        worst_clamp = raw.iter().fold(worst_clamp, |w, v| w.max(-v));
        let s = pid::decompose_terms(0, t);
        neg += [s.r, s.u_v, s.u_l, s.s].iter().filter(|v| **v < 0.0).count();
        worst_add = worst_add.max(s.additivity_error());
        worst_id = worst_id.max(pid::check_identities(&s, &j)?.max_residual());
        if s.u_v.min(s.u_l) != 0.0 {
            min_nonzero += 1;
        }
    }
    let ok = neg == 0 && worst_clamp < 1e-6 && worst_add < 1e-6 && worst_id < 1e-9 && min_nonzero == 0;
    Ok((
        ok,
        format!(
            "1000 covariances: negatives {neg}, max clamp {:.1e} nats, max additivity err {worst_add:.1e}, \
             max identity residual {worst_id:.1e} nats, min(U_V,U_L) != 0 in {min_nonzero}",
            worst_clamp.max(0.0)
        ),
    ))
}

// ---------------------------------------------------------------------------
// 3. Discrete oracle
// ---------------------------------------------------------------------------

fn c3_discrete() -> Result<(bool, String)> {
    let run = |s| pid::discrete_pid_brute(&synth::gen_discrete_system(s));
    let (xor, copy, and, u1) = (
        run(DiscreteSystem::Xor),
        run(DiscreteSystem::Copy),
        run(DiscreteSystem::And),
        run(DiscreteSystem::Unique1),
    );
    let ok = xor.s == 1.0
        && copy.r == 1.0
        && (and.r - 0.3113).abs() <= 1e-4
        && (and.s - 0.5).abs() <= 1e-4
        && u1.u1 == 1.0;
    Ok((
        ok,
        format!(
            "XOR S={} COPY R={} AND R={:.6} S={:.6} UNIQUE1 U1={}",
            xor.s, copy.r, and.r, and.s, u1.u1
        ),
    ))
}

// ---------------------------------------------------------------------------
// 4. Estimator consistency
// ---------------------------------------------------------------------------

fn generators() -> Result<Vec<(&'static str, GaussianLayerSpec)>> {
    let from = |r, u_v, u_l, s| -> Result<GaussianLayerSpec> { Ok(solve_profile(&ProfileRow { r, u_v, u_l, s })?.spec(0, 0)) };
    Ok(vec![
        ("triplet(.5,.9,.45)", GaussianLayerSpec::scalar(0.5, 0.9, 0.45, 0, 0)),
        ("synergy", from(0.4, 0.0, 0.5, 1.0)?),
        ("redundant", from(1.5, 0.0, 0.4, 0.4)?),
        ("vision-unique", from(0.4, 1.0, 0.0, 0.5)?),
        ("no-redundancy", from(0.0, 0.0, 1.0, 0.6)?),
    ])
}

fn estimate(spec: &GaussianLayerSpec, n: usize, seed: u64) -> Result<InfoState> {
    let spec = GaussianLayerSpec { n, seed, ..spec.clone() };
    let (x_v, x_l, y) = synth::gen_gaussian_layer(&spec)?;
    Ok(estimate_layer(0, &x_v, &x_l, &y, false, None, &EstimatorSettings::new(Profile::Test, 42))?.state)
}

fn total_error(a: &InfoState, b: &InfoState) -> f64 {
    Component::PID.iter().map(|&c| (a.component(c) - b.component(c)).abs()).sum()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 0 {
        0.5 * (xs[m - 1] + xs[m])
    } else {
        xs[m]
    }
}

fn c4_consistency() -> Result<(bool, String)> {
    let gens = generators()?;
    let sizes = [1_000usize, 5_000, 25_000];
    let jobs: Vec<(usize, usize, u64)> = (0..gens.len())
        .flat_map(|g| sizes.iter().flat_map(move |&n| (0..20u64).map(move |s| (g, n, s))))
        .collect();
    let errs: Vec<((usize, usize), f64)> = jobs
        .par_iter()
        .map(|&(g, n, s)| {
            let truth = synth::ground_truth_pid(&gens[g].1)?;
            let est = estimate(&gens[g].1, n, 1000 * g as u64 + 17 * s + n as u64)?;
            Ok(((g, n), total_error(&est, &truth)))
        })
        .collect::<Result<_>>()?;
    let mut by: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for (k, e) in errs {
        by.entry(k).or_default().push(e);
    }
    let mut ok = true;
    let mut parts = Vec::new();
    for (g, (name, spec)) in gens.iter().enumerate() {
        let meds: Vec<f64> = sizes.iter().map(|&n| median(by[&(g, n)].clone())).collect();
        let decreasing = meds.windows(2).all(|w| w[1] < w[0]);
        let truth = synth::ground_truth_pid(spec)?;
        let big = estimate(spec, 50_000, 424_242 + g as u64)?;
        let mut worst_rel = 0.0f64;
        for c in Component::PID {
            let t = truth.component(c);
            if t > 0.1 {
                worst_rel = worst_rel.max((big.component(c) - t).abs() / t);
            }
        }
        ok &= decreasing && worst_rel < 0.05;
        parts.push(format!(
            "{name}: median err {:.4}/{:.4}/{:.4} bits, 50k worst rel {:.2}%",
            meds[0],
            meds[1],
            meds[2],
            100.0 * worst_rel
        ));
    }
    Ok((ok, parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 5. Bijection invariance
// ---------------------------------------------------------------------------

fn c5_invariance() -> Result<(bool, String)> {
    let n = 50_000;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let rho: f64 = 0.8;
    let mut x = DMatrix::zeros(n, 1);
    let mut noise = DMatrix::zeros(n, 1);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        x[(i, 0)] = a;
        y.push(rho * a + (1.0 - rho * rho).sqrt() * b);
        noise[(i, 0)] = StandardNormal.sample(&mut rng);
    }
    let settings = EstimatorSettings::new(Profile::Test, 42);
    // Language source carries the signal; the vision source is independent noise.
    let mi = |xl: &DMatrix<f64>| -> Result<f64> {
        let s = estimate_layer(0, &noise, xl, &y, false, None, &settings)?.state;
        Ok(s.r + s.u_l)
    };
    let base = mi(&x)?;
    let cubic = mi(&x.map(|v| v * v * v))?;
    let affine = mi(&x.map(|v| 3.0 * v - 2.0))?;
    let truth = bits(-0.5 * (1.0 - rho * rho).ln());
    let (dc, da) = ((cubic - base).abs(), (affine - base).abs());
    Ok((
        dc < 0.05 && da < 0.01,
        format!(
            "MI {base:.4} bits (closed form {truth:.4}); cubic {cubic:.4} (diff {dc:.4}); affine {affine:.4} (diff {da:.1e})"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 6. Regime classification end to end
// ---------------------------------------------------------------------------

fn c6_regimes() -> Result<(bool, String)> {
    let dir = tempfile::tempdir().map_err(|e| pidflow::Error::io("tempdir", e))?;
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["transduction", "persistent_synergy", "redundancy_dominant"] {
        let script = RegimeScript::load(&fixtures().join(format!("{name}.json")))?;
        let s = synth::gen_regime_dataset(&script, 42)?;
        let sp = dir.path().join(name);
        store::write_store(&s, &sp)?;
        let mut cfg = PipelineConfig::new(&sp, dir.path().join(format!("{name}-run")), Profile::Test);
        cfg.save_models = false;
        let run = run_pipeline(&cfg)?;
        let label = run.mechanism.as_ref().map_or("none", |m| m.label());
        let sweep = threshold_sweep(&run.baseline, &SweepGrid::around_defaults(), &cfg.thresholds)?;
        let pass = label == script.regime.name() && sweep.stability == 1.0;
        ok &= pass;
        parts.push(format!(
            "{name} -> {label}, sweep {}/{}",
            (sweep.stability * sweep.points.len() as f64).round(),
            sweep.points.len()
        ));
    }
    Ok((ok, parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 7. Published-table arithmetic
// ---------------------------------------------------------------------------

/// Final-layer rows: task, R, U_L, U_V, S, printed U_L share (%).
const SHARES: [(&str, f64, f64, f64, f64, f64); 6] = [
    ("ChooseAttr", 1.13, 14.18, 2.01, 1.71, 74.5),
    ("ChooseCat", 7.74, 15.40, 5.31, 3.54, 48.1),
    ("ChooseRel", 0.13, 18.83, 0.50, 0.65, 93.6),
    ("CompareAttr", 0.22, 24.54, 0.01, 0.83, 95.9),
    ("LogicalObj", 0.07, 12.62, 0.58, 0.35, 92.7),
    ("QueryAttr", 0.03, 22.70, 0.00, 0.59, 97.3),
];

/// Landmarks: U_V peak, U_L trough, U_L surge onset.
const LANDMARKS: [(usize, Option<usize>, usize); 6] = [
    (0, Some(13), 20),
    (1, Some(14), 19),
    (0, Some(11), 19),
    (1, None, 17),
    (0, Some(13), 19),
    (1, Some(13), 20),
];

/// Knockout totals: task, base, knockout, printed delta (%).
const KO_TOTALS: [(&str, f64, f64, f64); 6] = [
    ("ChooseRel", 23.20, 25.20, 8.6),
    ("LogicalObj", 15.45, 16.09, 4.1),
    ("QueryAttr", 29.02, 31.93, 10.0),
    ("CompareAttr", 24.40, 24.24, -0.7),
    ("ChooseAttr", 19.18, 18.77, -2.1),
    ("ChooseCat", 30.56, 30.29, -0.9),
];

/// 32-layer trajectory with the given final row and landmarks: U_V decays
/// from an early peak, U_L dips to a trough, creeps, then surges to its
/// final value; R and S hold their final values.
fn landmark_trajectory(row: (f64, f64, f64, f64), peak: usize, trough: Option<usize>, onset: usize) -> Result<Trajectory> {
    let (r, ul_fin, uv_fin, s) = row;
    let last = 31;
    let uv_top = uv_fin + 3.0;
    let floor = 0.5;
    let ul_at = |l: usize| -> f64 {
        let creep = 0.02;
        match trough {
            Some(t) if l <= t => floor + 0.1 * (t - l) as f64,
            Some(t) if l <= onset => floor + creep * (l - t) as f64,
            None if l <= onset => floor,
            _ => 0.0,
        }
    };
    let ul_onset = ul_at(onset);
    let states = (0..=last)
        .map(|l| {
            let u_v = if l < peak {
                uv_fin + 0.5 * (uv_top - uv_fin)
            } else {
                uv_fin + (uv_top - uv_fin) * (-((l - peak) as f64) / 4.0).exp()
            };
            let u_l = if l <= onset {
                ul_at(l)
            } else {
                ul_onset + (ul_fin - ul_onset) * (l - onset) as f64 / (last - onset) as f64
            };
            let u_v = if l == last { uv_fin } else { u_v };
            InfoState::new(l, r, u_v, u_l, s)
        })
        .collect();
    assemble_trajectory(states, TrajectoryMeta::default())
}

fn c7_fixture_arithmetic() -> Result<(bool, String)> {
    let mut ok = true;
    let mut worst_share = 0.0f64;
    for (_, r, ul, uv, s, printed) in SHARES {
        let row = ShareRow::from_state(&InfoState::new(31, r, uv, ul, s));
        worst_share = worst_share.max((100.0 * row.u_l_share - printed).abs());
    }
    ok &= worst_share <= 0.1 + 1e-9;

    let mut worst_delta = 0.0f64;
    for (_, base, ko, printed) in KO_TOTALS {
        let d = Delta::new(base, ko).percent.expect("positive base");
        worst_delta = worst_delta.max((d - printed).abs());
    }
    ok &= worst_delta <= 0.1 + 1e-9;

    // ChooseRel components (R, U_L, U_V, S): normal and knockout, printed totals.
    let deltas: BTreeMap<Component, Delta> = [
        (Component::R, Delta::new(0.15, 0.15)),
        (Component::UL, Delta::new(21.48, 23.14)),
        (Component::UV, Delta::new(0.72, 0.85)),
        (Component::S, Delta::new(0.85, 1.07)),
        (Component::Total, Delta::new(23.20, 25.20)),
    ]
    .into_iter()
    .collect();
    let dep = dep_from_deltas(&deltas)?.percent;
    ok &= (dep - 17.5).abs() <= 0.1;

    let cfg = ThresholdConfig::default();
    let mut labels = Vec::new();
    let mut landmarks_ok = true;
    for ((name, r, ul, uv, s, _), (peak, trough, onset)) in SHARES.iter().zip(LANDMARKS) {
        let t = landmark_trajectory((*r, *ul, *uv, *s), peak, trough, onset)?;
        let tp = detect_turning_points(&t, &cfg)?;
        landmarks_ok &= tp.uv_peak == Some(peak) && tp.ul_trough == trough && tp.ul_surge_onset == Some(onset);
        let rep = classify_mechanism(&t, &cfg)?;
        if rep.primary_label != Some(Mechanism::ModalTransduction) || rep.ambiguous {
            labels.push(format!("{name}={}", rep.label()));
        }
    }
    ok &= labels.is_empty() && landmarks_ok;
    Ok((
        ok,
        format!(
            "max share dev {worst_share:.3} pp; max delta dev {worst_delta:.3} pp; Dep(ChooseRel) {dep:.2}%; \
             landmarks recovered: {landmarks_ok}; non-transduction: [{}]",
            labels.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------------------
// 8. Comparison arithmetic
// ---------------------------------------------------------------------------

/// Per-task r for (R, U_L, U_V, S).
const CORRELATIONS: [[f64; 4]; 6] = [
    [0.968, 0.993, 0.978, 0.941],
    [0.989, 0.981, 0.953, 0.968],
    [0.972, 0.996, 0.945, 0.892],
    [0.963, 0.987, 0.968, 0.913],
    [0.981, 0.974, 0.972, 0.925],
    [0.984, 0.959, 0.948, 0.923],
];
const PRINTED_AVG: [f64; 4] = [0.976, 0.982, 0.961, 0.927];
const PRINTED_MEAN: f64 = 0.962;

/// Centred orthonormal pair (u, w) over 32 layers.
fn basis(phase: f64) -> (Vec<f64>, Vec<f64>) {
    let n = 32;
    let center = |v: Vec<f64>| {
        let m = mean(&v);
        v.into_iter().map(|x| x - m).collect::<Vec<f64>>()
    };
    let norm = |v: Vec<f64>| {
        let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    let u = norm(center((0..n).map(|l| (0.3 * l as f64 + phase).sin() + 0.05 * l as f64).collect()));
    let w0 = center((0..n).map(|l| (0.7 * l as f64 + 2.0 * phase).cos()).collect());
    let dot: f64 = u.iter().zip(&w0).map(|(a, b)| a * b).sum();
    let w = norm(w0.iter().zip(&u).map(|(a, b)| a - dot * b).collect());
    (u, w)
}

fn c8_comparison() -> Result<(bool, String)> {
    let order = [Component::R, Component::UL, Component::UV, Component::S];
    let mut per_comp: BTreeMap<Component, Vec<f64>> = BTreeMap::new();
    for (task, rs) in CORRELATIONS.iter().enumerate() {
        let mut a_cols = Vec::new();
        let mut b_cols = Vec::new();
        for (k, r) in rs.iter().enumerate() {
            let (u, w) = basis(task as f64 + 0.37 * k as f64);
            let s = (1.0 - r * r).sqrt();
            a_cols.push(u.iter().map(|x| 2.0 + x).collect::<Vec<f64>>());
            b_cols.push(u.iter().zip(&w).map(|(x, y)| 3.0 + 1.7 * (r * x + s * y)).collect::<Vec<f64>>());
        }
        let traj = |cols: &[Vec<f64>]| {
            let states = (0..32)
                .map(|l| InfoState::new(l, cols[0][l], cols[2][l], cols[1][l], cols[3][l]))
                .collect();
            assemble_trajectory(states, TrajectoryMeta::default())
        };
        let rep = compare_trajectories(&traj(&a_cols)?, &traj(&b_cols)?, &ThresholdConfig::default())?;
        for c in order {
            per_comp.entry(c).or_default().push(rep.pearson_per_component[&c].expect("non-constant"));
        }
    }
    let avgs: Vec<f64> = order.iter().map(|c| mean(&per_comp[c])).collect();
    let overall = mean(&avgs);
    let worst = avgs.iter().zip(PRINTED_AVG).map(|(a, p)| (a - p).abs()).fold(0.0, f64::max);
    let mean_dev = (overall - PRINTED_MEAN).abs();
    let ok = worst <= 5e-4 && mean_dev <= 5e-4;
    Ok((
        ok,
        format!(
            "averages {:.4}/{:.4}/{:.4}/{:.4} (max dev {worst:.1e}); mean {overall:.6} vs printed {PRINTED_MEAN} (dev {mean_dev:.2e})",
            avgs[0], avgs[1], avgs[2], avgs[3]
        ),
    ))
}

// ---------------------------------------------------------------------------
// 9. Determinism
// ---------------------------------------------------------------------------

fn cli(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_pidflow"))
        .args(args)
        .env("PIDFLOW_THREADS", "1")
        .output()
        .map_err(|e| pidflow::Error::io("pidflow binary", e))?;
    if !out.status.success() {
        return Err(pidflow::Error::Invalid(format!(
            "pidflow {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        )));
    }
    Ok(())
}

fn csv_files(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c9_determinism() -> Result<(bool, String)> {
    let dir = tempfile::tempdir().map_err(|e| pidflow::Error::io("tempdir", e))?;
    let p = |s: &str| dir.path().join(s).display().to_string();
    let script = fixtures().join("transduction.json").display().to_string();
    cli(&["synth", "--script", &script, "--out", &p("base"), "--samples", "2000", "--knockout-out", &p("ko"), "--ko-scale", "1,1.2,1,1.3"])?;
    for run in ["run1", "run2"] {
        cli(&["run", "--baseline", &p("base"), "--knockout", &p("ko"), "--out", &p(run), "--seed", "42", "--profile", "test"])?;
        cli(&["report", &p(run), "--format", "plotdata"])?;
        cli(&["report", &p(run), "--format", "csv"])?;
    }
    let files = csv_files(&dir.path().join("run1"));
    let mut differing = Vec::new();
    for f in &files {
        let a = std::fs::read(dir.path().join("run1").join(f)).ok();
        let b = std::fs::read(dir.path().join("run2").join(f)).ok();
        if a.is_none() || a != b {
            differing.push(f.display().to_string());
        }
    }
    let ok = !files.is_empty() && differing.is_empty();
    Ok((ok, format!("{} CSV files compared, differing: [{}]", files.len(), differing.join(", "))))
}

fn main() {
    let criteria = [
        Criterion { id: 1, name: "Gaussian MI exactness", budget: Duration::from_secs(1), run: c1_gaussian_mi, known: None },
        Criterion { id: 2, name: "PID algebra", budget: Duration::from_secs(30), run: c2_pid_algebra, known: None },
        Criterion { id: 3, name: "discrete oracle", budget: Duration::from_secs(5), run: c3_discrete, known: None },
        Criterion { id: 4, name: "estimator consistency", budget: Duration::from_secs(600), run: c4_consistency, known: None },
        Criterion { id: 5, name: "bijection invariance", budget: Duration::from_secs(300), run: c5_invariance, known: None },
        Criterion { id: 6, name: "regime classification", budget: Duration::from_secs(600), run: c6_regimes, known: None },
        Criterion { id: 7, name: "fixture arithmetic", budget: Duration::from_secs(1), run: c7_fixture_arithmetic, known: None },
        Criterion {
            id: 8,
            name: "comparison arithmetic",
            budget: Duration::from_secs(1),
            run: c8_comparison,
            known: Some("the printed overall mean is a double-rounding artifact; the exact mean of the per-task values is 0.961375"),
        },
        Criterion { id: 9, name: "determinism", budget: Duration::from_secs(1200), run: c9_determinism, known: None },
    ];
    let only: Option<Vec<usize>> = std::env::var("PIDFLOW_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut hard_failures = 0;
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let t0 = Instant::now();
        let res = (c.run)();
        let dt = t0.elapsed();
        let (pass, detail) = match res {
            Ok((ok, d)) => (ok && dt <= c.budget, d),
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if pass { "PASS" } else { "FAIL" };
        let note = match (pass, c.known) {
            (false, Some(k)) => format!(" [known deviation: {k}]"),
            _ => String::new(),
        };
        println!(
            "[{tag}] {}. {}: {detail} ({:.2}s, budget {}s){note}",
            c.id,
            c.name,
            dt.as_secs_f64(),
            c.budget.as_secs()
        );
        if !pass && c.known.is_none() {
            hard_failures += 1;
        }
    }
    if hard_failures > 0 {
        eprintln!("{hard_failures} acceptance criterion/criteria failed");
        std::process::exit(1);
    }
}
