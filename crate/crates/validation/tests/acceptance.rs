//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL` line.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::f64::consts::{FRAC_2_PI, PI, SQRT_2};
use std::path::{Path, PathBuf};
use std::time::Instant;

use hombell::chsh::{rectangle_integral_numeric, CHSH_PRECISION};
use hombell::fock::{fock_correlators, fock_run, FockOptions};
use hombell::gaussian::{partial_trace, squeezing_db};
use hombell::herald::{condition_click, condition_no_click, herald_all, herald_single_photon_projection};
use hombell::optimize::SweepPoint;
use hombell::ppo::{batch_gradient, batch_loss, softmax, Environment, PolicyValueNet, Transition};
use hombell::search::Strategy;
use hombell::{
    chsh_score, correlator, evaluate, random_search, sweep_distance, sweep_efficiency, BellMeasurement, Binning,
    Circuit, CircuitFile, EnvConfig, EvalOptions, Evaluation, Gate, GaussianState, LcgState, OptimizeConfig,
    PpoConfig, Result, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use common::{fock_side, gaussian_side, random_gates, Variant};

const TSIRELSON: f64 = 2.0 * SQRT_2;

/// Prints the criterion line, then fails the test if the criterion does not hold.
fn verdict(id: &str, pass: bool, detail: String) {
    println!("criterion {id}: {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}

/// Every score the suite computes goes through here, so the Tsirelson bound is checked on all of them.
fn scored(chsh: f64) -> f64 {
    assert!(chsh <= TSIRELSON + 1e-4, "CHSH {chsh} above the Tsirelson bound");
    chsh
}

fn circuits_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../circuits")
}

fn load(name: &str) -> (Circuit, BellMeasurement) {
    let f = CircuitFile::load(&circuits_dir().join(name)).unwrap();
    (f.circuit().unwrap(), f.measurement().unwrap())
}

fn eval_within(circuit: &Circuit, meas: &BellMeasurement, precision: f64) -> Evaluation {
    let e = evaluate(circuit, meas, &EvalOptions { chsh_precision: precision, ..Default::default() }).unwrap();
    scored(e.chsh);
    e
}

#[test]
fn criterion_1_reference_circuit() {
    let (c, m) = load("fig1.json");
    let start = Instant::now();
    let e = eval_within(&c, &m, CHSH_PRECISION);
    let secs = start.elapsed().as_secs_f64();
    let pass = (e.chsh - 2.068).abs() <= 0.002 && (e.herald_probability / 3e-6 - 1.0).abs() <= 0.3 && secs < 60.0;
    verdict("1", pass, format!("CHSH {:.5}, p {:.3e}, {secs:.3} s", e.chsh, e.herald_probability));
}

#[derive(Deserialize)]
struct Corpus {
    circuits: Vec<CorpusEntry>,
}

#[derive(Deserialize)]
struct CorpusEntry {
    file: String,
    strategy: u8,
    scheme: String,
    chsh: f64,
    herald_probability: f64,
    chsh_precision: f64,
}

#[test]
fn criterion_2_regression_corpus() {
    let text = std::fs::read_to_string(circuits_dir().join("corpus.json")).unwrap();
    let corpus: Corpus = serde_json::from_str(&text).unwrap();
    let mut failures = Vec::new();
    for entry in &corpus.circuits {
        let (c, m) = load(&entry.file);
        let e = eval_within(&c, &m, entry.chsh_precision);
        let ok = (e.chsh - entry.chsh).abs() <= 0.003 && (e.herald_probability / entry.herald_probability - 1.0).abs() <= 0.5;
        println!(
            "  {:<24} CHSH {:.5} (listed {:.3})  p {:.3e} (listed {:.1e})  {}",
            entry.file,
            e.chsh,
            entry.chsh,
            e.herald_probability,
            entry.herald_probability,
            if ok { "ok" } else { "MISMATCH" }
        );
        if !ok {
            failures.push(entry.file.clone());
        }
    }
    let covers = |s: u8| corpus.circuits.iter().any(|e| e.strategy == s);
    let schemes = ["click", "single_photon_projection"].iter().all(|s| corpus.circuits.iter().any(|e| e.scheme == *s));
    let pass = failures.is_empty() && corpus.circuits.len() >= 5 && covers(1) && covers(3) && covers(5) && schemes;
    verdict("2", pass, format!("{} circuits, mismatches {failures:?}", corpus.circuits.len()));
}

#[test]
fn criterion_3_decibels() {
    let big = squeezing_db(0.44993);
    let small = squeezing_db(0.00096);
    let pass = (big - 3.9).abs() <= 0.05 && (small - 0.008).abs() <= 0.002;
    verdict("3", pass, format!("{big:.4} dB, {small:.5} dB"));
}

fn rebuild(circuit: &Circuit, p: &SweepPoint) -> (Circuit, BellMeasurement) {
    let [t0, t1, f0, f1] = p.angles;
    (circuit.with_params(&p.params), BellMeasurement::with_angles([t0, t1], [f0, f1]))
}

#[test]
fn criterion_4_distance_sweep() {
    let (c, m) = load("fig1.json");
    let cfg = OptimizeConfig { squeeze_cap_db: 10.0, ..Default::default() };
    let sweep = sweep_distance(&c, &m, 12.0, 0.5, &cfg).unwrap();
    for p in &sweep.points {
        scored(p.chsh);
    }
    let persists = sweep.points.iter().filter(|p| p.x <= 7.0).all(|p| p.chsh > 2.0);
    let ends = sweep.points.iter().filter(|p| p.x >= 10.0).all(|p| p.chsh <= 2.0);
    // Loss acts on Bob's mode after heralding, so at every point's parameters the heralding
    // probability must be the lossless one.
    let mut worst = 0.0f64;
    for p in &sweep.points {
        let (circuit, meas) = rebuild(&c, p);
        let lossless = evaluate(&circuit, &meas, &EvalOptions::default()).unwrap().herald_probability;
        worst = worst.max((p.herald_probability - lossless).abs() / lossless);
    }
    let ps: Vec<f64> = sweep.points.iter().map(|p| p.herald_probability).collect();
    let spread = ps.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ps.iter().cloned().fold(f64::INFINITY, f64::min);
    let last = sweep.last_violation();
    let pass = persists && ends && worst <= 1e-9;
    verdict(
        "4",
        pass,
        format!(
            "last violation at {last:?} km, loss-induced herald change {worst:.1e} (relative), \
             herald spread across re-optimized points {spread:.1e}"
        ),
    );
}

fn efficiency_sweep() -> hombell::SweepResult {
    // The reference circuit is the eta = 1 optimum; parameters stay fixed along the sweep.
    let (c, m) = load("fig1.json");
    let cfg = OptimizeConfig { chsh_precision: 1e-4, ..Default::default() };
    let sweep = sweep_efficiency(&c, &m, &[0.05, 0.25, 1.0], &cfg).unwrap();
    for p in &sweep.points {
        scored(p.chsh);
    }
    sweep
}

#[test]
fn criterion_5a_herald_rate_at_quarter_efficiency() {
    let s = efficiency_sweep();
    let ratio = s.points[2].herald_probability / s.points[1].herald_probability;
    verdict("5a", ratio <= 10.0, format!("p(eta=1) / p(eta=0.25) = {ratio:.2}"));
}

#[test]
fn criterion_5b_chsh_at_low_efficiency() {
    let s = efficiency_sweep();
    let chsh = s.points[0].chsh;
    verdict("5b", (2.066..=2.069).contains(&chsh), format!("CHSH(eta=0.05) = {chsh:.5}"));
}

fn moment_gap(a: &LcgState, b: &hombell::fock::FockMixture) -> f64 {
    let (mu_a, s_a) = a.moments();
    let (mu_b, s_b) = b.moments();
    (mu_a - mu_b).amax().max((s_a - s_b).amax())
}

#[test]
fn criterion_6_fock_oracle() {
    let variants = [Variant::Unheralded, Variant::Click, Variant::NoClick, Variant::SinglePhoton];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases: Vec<_> = (0..200)
        .map(|i| {
            let variant = variants[i % 4];
            let n_modes = rng.random_range(2..=3);
            let eta = rng.random_range(0.2..=1.0);
            // Redraw until the event is likely enough for a meaningful comparison.
            loop {
                let gates = random_gates(&mut rng, n_modes, 5, 0.6);
                if let Ok((_, p)) = gaussian_side(&gates, n_modes, variant, eta) {
                    if p > 1e-5 {
                        return (gates, n_modes, variant, eta);
                    }
                }
            }
        })
        .collect();
    let gaps: Vec<(f64, f64)> = cases
        .par_iter()
        .map(|(gates, n, variant, eta)| {
            let (g, pg) = gaussian_side(gates, *n, *variant, *eta).unwrap();
            let (f, pf, _) = fock_side(gates, *n, *variant, *eta).unwrap();
            ((pg - pf).abs(), moment_gap(&g, &f))
        })
        .collect();
    let dp = gaps.iter().map(|g| g.0).fold(0.0, f64::max);
    let dm = gaps.iter().map(|g| g.1).fold(0.0, f64::max);

    let (c, m) = load("fig1.json");
    let gaussian = eval_within(&c, &m, CHSH_PRECISION).correlators;
    let opts = FockOptions { cutoff: 12, max_cutoff: 24, cutoff_step: 4, ..Default::default() };
    let run = fock_run(&c, 1.0, &opts).unwrap();
    let fock = fock_correlators(&run.state, &m).unwrap();
    let dc = (0..4).map(|k| (gaussian[k / 2][k % 2] - fock[k / 2][k % 2]).abs()).fold(0.0, f64::max);

    let pass = dp <= 1e-6 && dm <= 1e-6 && dc <= 1e-3 && run.cutoff >= 12;
    verdict(
        "6",
        pass,
        format!("200 circuits: max |dp| {dp:.1e}, max moment gap {dm:.1e}; reference correlators {dc:.1e} at cutoff {}", run.cutoff),
    );
}

#[test]
fn criterion_7_arcsine_law() {
    let mut worst = 0.0f64;
    for k in 0..=38 {
        let rho = -0.95 + 0.05 * k as f64;
        for var in [0.25, 1.7] {
            let sigma = [[var, rho * var], [rho * var, var]];
            let inf = f64::INFINITY;
            let agree = rectangle_integral_numeric([0.0; 2], sigma, 0.0, inf, 0.0, inf).unwrap()
                + rectangle_integral_numeric([0.0; 2], sigma, -inf, 0.0, -inf, 0.0).unwrap();
            worst = worst.max((2.0 * agree - 1.0 - FRAC_2_PI * rho.asin()).abs());
        }
        // Through a physical state: the x-quadratures of a two-mode squeezed vacuum with
        // tanh(2r) = rho, via a custom binning that equals sign() but takes the general path.
        let state = LcgState::vacuum(2).unwrap().map_gate(&Gate::two_mode_squeezer(1, 2, rho.atanh() / 2.0)).unwrap();
        let x_corr = state.components()[0].state.sigma()[(0, 2)] / state.components()[0].state.sigma()[(0, 0)];
        let sign = Binning::sign();
        let shifted = Binning::new(vec![-1e300, 0.0], vec![-1, -1, 1]).unwrap();
        let fast = correlator(&state, 0.0, 0.0, &sign, &sign).unwrap();
        let general = correlator(&state, 0.0, 0.0, &shifted, &shifted).unwrap();
        let exact = FRAC_2_PI * x_corr.asin();
        worst = worst.max((fast - exact).abs()).max((general - exact).abs());
    }
    verdict("7", worst <= 1e-6, format!("max deviation from (2/pi) asin(rho): {worst:.1e}"));
}

fn check_conditioning(state: &LcgState, mode: usize, eta: f64, worst_p: &mut f64, worst_w: &mut f64) -> Result<()> {
    let (click, pc) = condition_click(state, mode, eta)?;
    let (no_click, pn) = condition_no_click(state, mode, eta)?;
    *worst_p = worst_p.max((pc + pn - 1.0).abs());
    *worst_w = worst_w.max((click.weight_sum() - 1.0).abs()).max((no_click.weight_sum() - 1.0).abs());
    if let Ok((sp, _)) = herald_single_photon_projection(state, mode, eta) {
        *worst_w = worst_w.max((sp.weight_sum() - 1.0).abs());
    }
    Ok(())
}

#[test]
fn criterion_8_physics_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut max_classical = f64::NEG_INFINITY;
    let mut max_quantum = f64::NEG_INFINITY;
    let (mut worst_p, mut worst_w) = (0.0f64, 0.0f64);

    for _ in 0..1000 {
        let n = rng.random_range(2..=4);
        let gates = random_gates(&mut rng, n, 8, 2.0);
        let mut state: GaussianState = hombell::vacuum_state(n).unwrap();
        for g in &gates {
            state = hombell::apply_gate(&state, g).unwrap();
        }
        for mode in (3..=n).rev() {
            state = partial_trace(&state, mode).unwrap();
        }
        let meas = BellMeasurement::with_angles(
            [rng.random_range(0.0..PI), rng.random_range(0.0..PI)],
            [rng.random_range(0.0..PI), rng.random_range(0.0..PI)],
        );
        let s = scored(chsh_score(&LcgState::gaussian(state), &meas).unwrap().score);
        max_classical = max_classical.max(s);
    }

    // Heralded states: conditioning identities at every stage, and the Tsirelson bound.
    for _ in 0..200 {
        let n = rng.random_range(3..=4);
        let gates = random_gates(&mut rng, n, 8, 1.5);
        let eta = rng.random_range(0.1..=1.0);
        let mut state = LcgState::vacuum(n).unwrap();
        for g in &gates {
            state = state.map_gate(g).unwrap();
        }
        let mut current = state.clone();
        for mode in (3..=n).rev() {
            if check_conditioning(&current, mode, eta, &mut worst_p, &mut worst_w).is_err() {
                break;
            }
            match condition_click(&current, mode, eta) {
                Ok((next, _)) => current = next,
                Err(_) => break,
            }
        }
        if current.n_modes() == 2 {
            // Random heralded states can cancel badly; only scores that resolve are bounded.
            if let Ok(r) = hombell::chsh_score_within(&current, &BellMeasurement::default(), 1e-4) {
                max_quantum = max_quantum.max(scored(r.score));
            }
        }
        let spec = hombell::HeraldSpec::uniform(n, hombell::HeraldScheme::SinglePhotonProjection, eta);
        if let Ok(out) = herald_all(&state, &spec) {
            worst_w = worst_w.max((out.state.weight_sum() - 1.0).abs());
        }
    }

    let pass = max_classical <= 2.0 + 1e-6 && max_quantum <= TSIRELSON + 1e-4 && worst_p <= 1e-10 && worst_w <= 1e-9;
    verdict(
        "8",
        pass,
        format!(
            "unheralded max CHSH {max_classical:.6}, heralded max {max_quantum:.5}, \
             |p_click + p_no_click - 1| {worst_p:.1e}, |sum w - 1| {worst_w:.1e}"
        ),
    );
}

#[test]
fn criterion_9_random_search() {
    let cfg = EnvConfig { strategy: Strategy::new(3).unwrap(), n_modes: 4, n_circuit: 5, ..Default::default() };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let start = Instant::now();
    let best: Vec<f64> = pool.install(|| {
        (0..10u64)
            .map(|seed| {
                let records = random_search(&cfg, 2000, seed).unwrap();
                records.iter().map(|r| scored(r.chsh)).fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    });
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let hits = best.iter().filter(|&&b| b >= 2.06).count();
    let pass = hits >= 5 && minutes < 30.0;
    verdict("9", pass, format!("{hits}/10 seeds reach CHSH >= 2.06 in {minutes:.1} min; best per seed {best:.4?}"));
}

struct Bandit;

impl Environment for Bandit {
    fn observation_len(&self) -> usize {
        4
    }
    fn n_actions(&self) -> usize {
        2
    }
    fn reset(&mut self) -> Result<Vec<f64>> {
        Ok(vec![1.0; 4])
    }
    fn step(&mut self, action: usize) -> Result<(Vec<f64>, f64, bool)> {
        Ok((vec![1.0; 4], action as f64, true))
    }
}

#[test]
fn criterion_10_ppo() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut softmax_gap = 0.0f64;
    for _ in 0..1000 {
        let len = rng.random_range(1..=60);
        let logits: Vec<f64> = (0..len).map(|_| rng.random_range(-50.0..50.0)).collect();
        softmax_gap = softmax_gap.max((softmax(&logits).iter().sum::<f64>() - 1.0).abs());
    }

    // Toy net, batch mixing clipped and unclipped samples.
    let mut net = PolicyValueNet::new(2, [3, 3], 3, &mut rng).unwrap();
    for p in net.params_mut() {
        *p = rng.random_range(-1.0..1.0);
    }
    let cfg = PpoConfig::default();
    let owned: Vec<(Transition, f64, f64)> = (0..8)
        .map(|i| {
            let observation = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let f = net.forward(&observation).unwrap();
            let action = i % 3;
            let log_prob = f.log_prob(action) + rng.random_range(-0.4..0.4);
            let t = Transition { observation, action, log_prob, reward: 0.0, value: 0.0, done: true };
            (t, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
        .collect();
    let batch: Vec<(&Transition, f64, f64)> = owned.iter().map(|(t, a, r)| (t, *a, *r)).collect();
    let (grad, _, _) = batch_gradient(&net, &batch, &cfg).unwrap();
    let h = 1e-6;
    let mut fd_gap = 0.0f64;
    for (k, g) in grad.iter().enumerate() {
        let mut plus = net.clone();
        plus.params_mut()[k] += h;
        let mut minus = net.clone();
        minus.params_mut()[k] -= h;
        let fd = (batch_loss(&plus, &batch, &cfg).unwrap() - batch_loss(&minus, &batch, &cfg).unwrap()) / (2.0 * h);
        fd_gap = fd_gap.max((g - fd).abs() / g.abs().max(fd.abs()).max(1e-3));
    }

    let converged = (0..20u64)
        .into_par_iter()
        .filter(|&seed| {
            let mut t = Trainer::new(Bandit, PpoConfig { seed, hidden: [8, 8], ..Default::default() }).unwrap();
            while t.updates < 200 {
                t.run_episode().unwrap();
            }
            t.net.forward(&[1.0; 4]).unwrap().probs[1] > 0.9
        })
        .count();

    let pass = softmax_gap <= 1e-6 && fd_gap <= 1e-4 && converged >= 18;
    verdict(
        "10",
        pass,
        format!("softmax |sum - 1| {softmax_gap:.1e}, gradient vs finite differences {fd_gap:.1e}, bandit {converged}/20"),
    );
}
