//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits 0 after reporting so the workspace test run stays usable while a
//! criterion is failing; set `VQSIM_ACCEPTANCE_STRICT=1` to exit 1 on any FAIL.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde_json::json;

use vqsim_core::analysis::{self, GradientAnsatz, ScanSpec};
use vqsim_core::channels::{
    self, pauli_basis, AxisCorrection, AxisEstimate, ChannelKind, Sweep,
};
use vqsim_core::circuits::{
    last_qubit_one_probability, neuron_activation_closed_form, neuron_circuit, AnsatzKind, AnsatzSpec, Backend,
    Circuit, GateKind, Op, QnnMode, Slot, Topology,
};
use vqsim_core::experiment::{self, Command, ExperimentConfig};
use vqsim_core::mps::TruncationPolicy;
use vqsim_core::optimize::{self, ExpectationModel, Measure, OptimizerConfig, OptimizerKind, UnsampleEntangler};
use vqsim_core::rng;
use vqsim_core::statevector::{pm_one_statistics, von_neumann_entropy, DensityMatrix, Observable};
use vqsim_core::Result;

type Mat2 = [[vqsim_core::C64; 2]; 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn random_circuit(n: usize, depth: usize, r: &mut rng::Rng, nonadjacent: bool) -> Circuit {
    let rot = [GateKind::Rx, GateKind::Ry, GateKind::Rz, GateKind::P];
    let mut ops = Vec::new();
    let mut np = 0;
    for _ in 0..depth {
        for q in 0..n {
            let g = rot[r.random_range(0..rot.len())];
            let slot = if np > 0 && r.random_bool(0.2) {
                Slot::Train { index: r.random_range(0..np), scale: r.random_range(-2.0..2.0) }
            } else {
                np += 1;
                Slot::train(np - 1)
            };
            ops.push(Op::param(g, vec![q], slot));
        }
        if n > 1 {
            for _ in 0..n.div_ceil(2) {
                let a = r.random_range(0..n);
                let b = if nonadjacent { (a + 1 + r.random_range(0..n - 1)) % n } else if a + 1 < n { a + 1 } else { a - 1 };
                let g = [GateKind::Cnot, GateKind::Cz, GateKind::Rzz, GateKind::Cp, GateKind::Swap][r.random_range(0..5)];
                if g.is_parametric() {
                    np += 1;
                    ops.push(Op::param(g, vec![a, b], Slot::train(np - 1)));
                } else {
                    ops.push(Op::fixed(g, vec![a, b]));
                }
            }
        }
    }
    Circuit::from_ops(n, ops).expect("random circuit")
}

fn random_params(c: &Circuit, r: &mut rng::Rng) -> Vec<f64> {
    (0..c.num_trainable()).map(|_| r.random_range(0.0..2.0 * PI)).collect()
}

fn criterion_1() -> Result<Outcome> {
    let results: Vec<(f64, bool)> = (0..200u64)
        .into_par_iter()
        .map(|i| -> Result<(f64, bool)> {
            let mut r = rng::stream(101, i);
            let n = 2 + (i as usize % 11);
            let c = random_circuit(n, n, &mut r, true);
            let theta = random_params(&c, &mut r);
            let dense = c.run_dense(&[], &theta)?;
            let policy = TruncationPolicy::new(1 << (n / 2), 0.0)?;
            let mut mps = c.run_mps(&[], &theta, &policy)?;
            let ent = mps.bond_entropies()?;
            let mut worst = 0.0f64;
            for k in 1..n {
                let keep: Vec<usize> = if k <= n - k { (0..k).collect() } else { (k..n).collect() };
                let e = von_neumann_entropy(&dense.partial_trace(&keep)?)?;
                worst = worst.max((ent[k - 1] - e).abs());
            }
            Ok((worst, mps.fidelity_lower_bound() == 1.0))
        })
        .collect::<Result<_>>()?;
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let exact = results.iter().all(|r| r.1);
    outcome(worst < 1e-7 && exact, format!("200 circuits n=2..12, max entropy deviation {worst:.2e}, all fidelity bounds 1: {exact}"))
}

fn random_observable(n: usize, r: &mut rng::Rng) -> Observable {
    let terms = (0..3)
        .map(|_| {
            let s: String = (0..n).map(|_| ['I', 'X', 'Y', 'Z'][r.random_range(0..4)]).collect();
            (r.random_range(-1.0..1.0), s)
        })
        .collect();
    Observable::new(terms).expect("observable")
}

fn criterion_2() -> Result<Outcome> {
    let h = 1e-6;
    let devs: Vec<(f64, f64)> = (0..100u64)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let mut r = rng::stream(202, i);
            let n = 1 + r.random_range(0..4);
            let c = random_circuit(n, 1 + r.random_range(0..4), &mut r, true);
            let theta = random_params(&c, &mut r);
            let k = r.random_range(0..theta.len());
            let m = ExpectationModel::new(c, Measure::Observable(random_observable(n, &mut r)));
            let g = m.shift_grad(&theta, k)?;
            let fd = m.finite_difference_grad(&theta, k, h)?;
            let hs = m.hessian_diag(&theta, k)?;
            let (mut tp, mut tm) = (theta.clone(), theta.clone());
            tp[k] += h;
            tm[k] -= h;
            let hfd = (m.shift_grad(&tp, k)? - m.shift_grad(&tm, k)?) / (2.0 * h);
            Ok(((g - fd).abs(), (hs - hfd).abs()))
        })
        .collect::<Result<_>>()?;
    let gw = devs.iter().map(|d| d.0).fold(0.0, f64::max);
    let hw = devs.iter().map(|d| d.1).fold(0.0, f64::max);
    outcome(gw < 1e-6 && hw < 1e-5, format!("100 triples, max gradient deviation {gw:.2e}, max Hessian-diagonal deviation {hw:.2e}"))
}

fn criterion_3() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [2usize, 4, 6] {
        let v = analysis::toy_cost_variances(n, 10_000, rng::derive_seed(303, n as u64))?;
        for (name, c) in [("global", v.global), ("local", v.local)] {
            let rel = c.empirical / c.analytic - 1.0;
            let z = c.mean / c.mean_stderr;
            pass &= rel.abs() <= 0.2 && z.abs() <= 3.0;
            parts.push(format!("n={n} {name} var ratio-1 {rel:+.3} mean z {z:+.2}"));
        }
    }
    outcome(pass, parts.join("; "))
}

fn criterion_4() -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [2usize, 3, 4] {
        let layers = 3 * n;
        let cost = Observable::pauli(&"Z".repeat(n))?;
        let k = (layers / 2) * n;
        let s = analysis::gradient_variance_experiment(
            &GradientAnsatz::RandomPqc { layers },
            n,
            &cost,
            &[k],
            10_000,
            rng::derive_seed(404, n as u64),
        )?[0];
        let rel = s.variance / analytic_2design(n) - 1.0;
        pass &= rel.abs() <= 0.3;
        parts.push(format!("n={n} variance {:.4e} ratio-1 {rel:+.3}", s.variance));
    }
    outcome(pass, parts.join("; "))
}

fn analytic_2design(n: usize) -> f64 {
    let d = (1u64 << n) as f64;
    d * d / (2.0 * (d + 1.0) * (d * d - 1.0))
}

fn linspace(a: f64, b: f64, k: usize) -> Vec<f64> {
    (0..k).map(|i| a + (b - a) * i as f64 / (k - 1) as f64).collect()
}

/// Ten non-singular parameter points per named channel.
fn channel_grid() -> Vec<(String, Vec<ChannelKind>)> {
    let drop_half = |v: Vec<f64>, bad: f64| -> Vec<f64> { v.into_iter().filter(|x| (x - bad).abs() > 1e-12).collect() };
    let p01 = drop_half(linspace(0.0, 1.0, 11), 0.5);
    let dep = drop_half(linspace(0.0, 1.0, 11), 1.0);
    let pauli = drop_half(linspace(0.0, 2.5, 11), 2.0);
    let g = linspace(0.0, 0.9, 10);
    vec![
        ("bit_flip".into(), p01.iter().map(|&p| ChannelKind::BitFlip { p }).collect()),
        ("phase_flip".into(), p01.iter().map(|&p| ChannelKind::PhaseFlip { p }).collect()),
        ("bit_phase_flip".into(), p01.iter().map(|&p| ChannelKind::BitPhaseFlip { p }).collect()),
        ("depolarizing".into(), dep.iter().map(|&p| ChannelKind::Depolarizing { p }).collect()),
        ("pauli".into(), pauli.iter().map(|&s| ChannelKind::Pauli { px: 0.1 * s, py: 0.05 * s, pz: 0.2 * s }).collect()),
        ("amplitude_damping".into(), g.iter().map(|&gamma| ChannelKind::AmplitudeDamping { gamma }).collect()),
        ("generalized_ad".into(), g.iter().map(|&gamma| ChannelKind::GeneralizedAd { gamma, p: 0.3 }).collect()),
        (
            "two_kraus".into(),
            linspace(-1.2, 1.2, 10).iter().map(|&alpha| ChannelKind::TwoKraus { alpha, beta: 0.5 }).collect(),
        ),
        (
            "decoherence".into(),
            linspace(1e-6, 10e-6, 10).iter().map(|&t| ChannelKind::Decoherence { t, t1: 35.91e-6, t2: 25.11e-6 }).collect(),
        ),
    ]
}

fn to_mat2(d: &DensityMatrix) -> Mat2 {
    let m = d.matrix();
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

fn criterion_5() -> Result<Outcome> {
    let b = pauli_basis();
    let grid = channel_grid();
    let mut exact_worst = 0.0f64;
    let (mut cases, mut within, mut points) = (0usize, 0usize, 0usize);
    let mut excluded = 0usize;
    for (ci, (_, kinds)) in grid.iter().enumerate() {
        for (pi, kind) in kinds.iter().enumerate() {
            let corr = match AxisCorrection::for_channel(kind, 1) {
                Ok(c) => c,
                Err(_) => {
                    excluded += 1;
                    continue;
                }
            };
            points += 1;
            let channel = channels::make_channel(kind)?;
            let stream_base = ((ci * 16 + pi) as u64) << 20;
            let res: Vec<(f64, bool)> = (0..1000u64)
                .into_par_iter()
                .map(|s| -> Result<(f64, bool)> {
                    let mut r = rng::stream(505, stream_base + s);
                    let rho = to_mat2(&DensityMatrix::random(2, &mut r));
                    let o = channels::from_pauli_coefficients(&[0; 4].map(|_| r.random_range(-1.0..1.0)));
                    let ideal = channels::expectation_of(&rho, &o);
                    let noisy_rho = channel.apply(&rho);
                    let mut exact = [None; 3];
                    let mut sampled = [None; 3];
                    for a in 0..3 {
                        let e = channels::expectation_of(&noisy_rho, &b[a + 1]);
                        exact[a] = Some(AxisEstimate { mean: e, stderr: 0.0 });
                        let p_plus = ((1.0 + e) / 2.0).clamp(0.0, 1.0);
                        let k = Binomial::new(10_000, p_plus).expect("binomial").sample(&mut r);
                        let (mean, stderr) = pm_one_statistics(k, 10_000);
                        sampled[a] = Some(AxisEstimate { mean, stderr });
                    }
                    let (m_exact, _) = channels::deconvolve_with(&o, &exact, &corr)?;
                    let (m_s, se) = channels::deconvolve_with(&o, &sampled, &corr)?;
                    Ok(((m_exact - ideal).abs(), (m_s - ideal).abs() <= 5.0 * se))
                })
                .collect::<Result<_>>()?;
            exact_worst = res.iter().map(|r| r.0).fold(exact_worst, f64::max);
            cases += res.len();
            within += res.iter().filter(|r| r.1).count();
        }
    }
    let frac = within as f64 / cases as f64;
    let prep = Circuit::from_ops(1, vec![Op::param(GateKind::Ry, vec![0], Slot::feature(0))])?;
    let sweep = Sweep::Feature(linspace(0.0, 2.0 * PI, 25));
    let gpc = ChannelKind::Pauli { px: 0.1, py: 0.05, pz: 0.2 };
    let pts = channels::self_consistency_run(&gpc, &prep, &Observable::pauli("Z")?, Some(10_000), 5050, 1, &sweep)?;
    let gpc_ok = pts.iter().all(|p| (p.mitigated - p.ideal).abs() <= 5.0 * p.stderr);
    let damping = pts.iter().map(|p| (p.noisy - p.ideal).abs()).fold(0.0, f64::max);
    let pass = exact_worst < 1e-9 && frac >= 0.99 && gpc_ok && damping > 0.1;
    outcome(
        pass,
        format!(
            "{points} channel points ({excluded} singular excluded), exact max error {exact_worst:.2e}, sampled within 5 stderr {:.2}%, GPC sweep mitigated within 5 stderr at all {} points: {gpc_ok}, max noisy bias {damping:.3}",
            100.0 * frac,
            pts.len()
        ),
    )
}

fn criterion_6() -> Result<Outcome> {
    let mut eq_worst = 0.0f64;
    let mut inv_worst = 0.0f64;
    for n in 1..=3usize {
        let d = 1usize << n;
        for k in 0..200u64 {
            let mut r = rng::stream(606 + n as u64, k);
            let theta: Vec<f64> = (0..d).map(|_| r.random_range(0.0..2.0 * PI)).collect();
            let phi: Vec<f64> = (0..d).map(|_| r.random_range(0.0..2.0 * PI)).collect();
            let delta = r.random_range(0.0..2.0 * PI);
            let circ = last_qubit_one_probability(&neuron_circuit(&theta, &phi)?.run_dense(&[], &[])?);
            eq_worst = eq_worst.max((circ - neuron_activation_closed_form(&theta, &phi)?).abs());
            let shifted: Vec<f64> = theta.iter().map(|t| t + delta).collect();
            let circ_shift = last_qubit_one_probability(&neuron_circuit(&shifted, &phi)?.run_dense(&[], &[])?);
            let matched: Vec<f64> = phi.iter().map(|p| p + delta).collect();
            let circ_matched = last_qubit_one_probability(&neuron_circuit(&matched, &phi)?.run_dense(&[], &[])?);
            let circ_same = last_qubit_one_probability(&neuron_circuit(&phi, &phi)?.run_dense(&[], &[])?);
            inv_worst = inv_worst.max((circ_shift - circ).abs()).max((circ_matched - circ_same).abs());
        }
    }
    let mut noise_ok = true;
    let mut parts = Vec::new();
    for a in [0.5, 1.0] {
        for n in [1usize, 2] {
            let res = analysis::neuron_noise_resilience(a, n, 100_000, rng::derive_seed(660, (a * 10.0) as u64 * 8 + n as u64))?;
            let z = (res.empirical_mean - res.analytic_mean) / res.stderr;
            noise_ok &= z.abs() <= 3.0;
            parts.push(format!("a={a} n={n} z {z:+.2}"));
        }
    }
    outcome(
        eq_worst < 1e-9 && inv_worst < 1e-9 && noise_ok,
        format!("circuit vs closed form {eq_worst:.2e}, colour invariance {inv_worst:.2e}, noise {}", parts.join(", ")),
    )
}

fn criterion_7() -> Result<Outcome> {
    let target = vqsim_core::experiment::TargetSpec::Hypergraph { label: 20032, qubits: 4 }.state()?;
    let runs: Vec<(f64, f64, f64, f64)> = (0..10u64)
        .into_par_iter()
        .map(|s| -> Result<(f64, f64, f64, f64)> {
            let cfg = OptimizerConfig::new(OptimizerKind::Adam, 0.05, 800, rng::derive_seed(707, s));
            let g = optimize::unsample_global(&target, 3, UnsampleEntangler::AllToAll, &cfg)?;
            let l = optimize::unsample_local(&target, "321", UnsampleEntangler::NearestNeighbour, &cfg, 0.1)?;
            Ok((g.metrics["final_fidelity"], g.metrics["two_qubit_gates"], l.metrics["final_fidelity"], l.metrics["two_qubit_gates"]))
        })
        .collect::<Result<_>>()?;
    let g_ok = runs.iter().filter(|r| r.0 > 0.999).count();
    let l_ok = runs.iter().filter(|r| r.2 > 0.99).count();
    let gmin = runs.iter().map(|r| r.0).fold(1.0, f64::min);
    let lmin = runs.iter().map(|r| r.2).fold(1.0, f64::min);
    outcome(
        g_ok >= 8 && l_ok >= 8,
        format!(
            "global all-to-all l=3: {g_ok}/10 above 0.999 (min {gmin:.5}, {} two-qubit gates); local 321: {l_ok}/10 above 0.99 (min {lmin:.5}, {} two-qubit gates)",
            runs[0].1, runs[0].3
        ),
    )
}

fn spec(kind: AnsatzKind, top: Topology, n: usize) -> AnsatzSpec {
    AnsatzSpec::new(kind, top, n)
}

fn mps_scan(feature: AnsatzKind, var: AnsatzKind, top: Topology, n: usize, max_layers: usize, seed: u64) -> Result<analysis::EntanglementProfile> {
    let mut s = ScanSpec::new(spec(feature, Topology::Linear, n), spec(var, top, n), QnnMode::Alternated, max_layers, 100);
    s.backend = Backend::Mps;
    analysis::entanglement_scan(&s, seed)
}

fn criterion_8() -> Result<Outcome> {
    use AnsatzKind::*;
    let n = 8;
    let lin = mps_scan(ZzFeatureMap, Circuit2, Topology::Linear, n, n, 808)?;
    let page = analysis::page_profile(n);
    let at_n = &lin.mean[n - 1];
    let page_dev = at_n.iter().zip(&page).map(|(s, p)| (s / p - 1.0).abs()).fold(0.0, f64::max);

    let ns: Vec<usize> = (4..=12).collect();
    let tildes: Vec<Option<usize>> = ns
        .par_iter()
        .map(|&m| mps_scan(ZzFeatureMap, Circuit2, Topology::Linear, m, 2 * m, 810 + m as u64).map(|p| analysis::derived_metrics(&p).l_tilde))
        .collect::<Result<_>>()?;
    let all_found = tildes.iter().all(Option::is_some);
    let r = if all_found {
        let x: Vec<f64> = ns.iter().map(|v| *v as f64).collect();
        let y: Vec<f64> = tildes.iter().map(|t| t.unwrap_or(0) as f64).collect();
        analysis::pearson_r(&x, &y)?
    } else {
        f64::NAN
    };

    let full = mps_scan(ZzFeatureMap, Circuit2, Topology::Full, n, n, 809)?;
    let cmp = analysis::compare_profiles(&lin, &full, 0.05)?;

    let vs = |p: &analysis::EntanglementProfile| analysis::derived_metrics(p).v_s;
    let v_zz2 = vs(&lin);
    let v_zz3 = vs(&mps_scan(ZzFeatureMap, Circuit3, Topology::Linear, n, n, 811)?);
    let v_c13 = vs(&mps_scan(Circuit1, Circuit3, Topology::Linear, n, n, 812)?);
    let order = matches!((v_zz2, v_zz3, v_c13), (Some(a), Some(b), Some(c)) if a > b && b > c);
    let range = v_zz2.is_some_and(|v| (1.5..=2.1).contains(&v));

    let fmt = |v: Option<f64>| v.map_or("none".into(), |x| format!("{x:.3}"));
    let pass = page_dev <= 0.1 && r > 0.95 && cmp.indistinguishable && order && range;
    outcome(
        pass,
        format!(
            "L=n max Page deviation {:.1}% [{}]; L~ {:?} r={r:.3} [{}]; full vs linear min p {:.3} vs {:.4} [{}]; v_s zz+c2 {} zz+c3 {} c1+c3 {} ordering [{}] range [1.5, 2.1] [{}]",
            100.0 * page_dev,
            ok(page_dev <= 0.1),
            tildes.iter().map(|t| t.map_or(-1, |v| v as i64)).collect::<Vec<_>>(),
            ok(r > 0.95),
            cmp.min_p,
            cmp.corrected_alpha,
            ok(cmp.indistinguishable),
            fmt(v_zz2),
            fmt(v_zz3),
            fmt(v_c13),
            ok(order),
            ok(range)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "fail"
    }
}

/// Non-increasing up to `tol` at each step.
fn decreasing_within(v: &[f64], tol: f64) -> bool {
    v.windows(2).all(|w| w[1] <= w[0] + tol)
}

fn criterion_9() -> Result<Outcome> {
    let n = 8;
    let haar = |r: &mut rng::Rng| analysis::haar_state(n, r);
    let kl_haar = analysis::expressibility(haar, n, 5000, 75, 909)?;
    let ks_haar = analysis::spectrum_distribution_distance(haar, n, 200, 910)?;
    let f = spec(AnsatzKind::ZzFeatureMap, Topology::Linear, n);
    let v = spec(AnsatzKind::Circuit2, Topology::Linear, n);
    let stats: Vec<(f64, f64)> = (1..=n)
        .into_par_iter()
        .map(|l| -> Result<(f64, f64)> {
            let c = vqsim_core::circuits::build_qnn(&f, &v, l, QnnMode::Alternated)?;
            let kl = analysis::expressibility(analysis::circuit_sampler(&c, PI), n, 5000, 75, rng::derive_seed(920, l as u64))?;
            let ks = analysis::spectrum_distribution_distance(analysis::circuit_sampler(&c, PI), n, 200, rng::derive_seed(930, l as u64))?;
            Ok((kl, ks))
        })
        .collect::<Result<_>>()?;
    let kl: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let ks: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let self_ok = kl_haar < 0.01 && ks_haar < 0.05;
    let kl_ok = kl[0] > kl[n - 1] && decreasing_within(&kl, 0.01) && (kl[n - 1] - kl[n - 2]).abs() < 0.01;
    let ks_ok = ks[0] > ks[n - 1] && decreasing_within(&ks, 0.05);
    outcome(
        self_ok && kl_ok && ks_ok,
        format!(
            "Haar KL {kl_haar:.4} KS {ks_haar:.4} [{}]; KL by L {:?} [{}]; KS by L {:?} [{}]",
            ok(self_ok),
            kl.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>(),
            ok(kl_ok),
            ks.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>(),
            ok(ks_ok)
        ),
    )
}

fn criterion_10() -> Result<Outcome> {
    let z = Observable::pauli("Z")?;
    let mut bins_ok = true;
    let mut parts = Vec::new();
    for l in 1..=5usize {
        let c = analysis::reuploading_circuit(l)?;
        let mut r = rng::stream(1010, l as u64);
        let theta = random_params(&c, &mut r);
        let rep = analysis::circuit_spectrum(&c, &z, &theta, l, 4 * l + 3)?;
        let nz: Vec<i64> = rep.dft_frequencies.iter().zip(&rep.dft).filter(|(_, c)| c.norm() >= 1e-10).map(|(w, _)| *w).collect();
        let good = nz.len() == 2 * l + 1 && nz.iter().all(|w| w.unsigned_abs() as usize <= l);
        bins_ok &= good;
        parts.push(format!("L={l}: {} nonzero", nz.len()));
    }
    let mut parseval = 0.0f64;
    for s in 0..50u64 {
        let mut r = rng::stream(1011, s);
        let l = 1 + r.random_range(0..5);
        let c = analysis::reuploading_circuit(l)?;
        let theta = random_params(&c, &mut r);
        parseval = parseval.max(analysis::circuit_spectrum(&c, &z, &theta, l, 4 * l + 3)?.l2_norm());
    }
    let parseval_ok = parseval <= 1.0 + 1e-12;
    let b = analysis::generalization_bound(3, 100, 1.0, 1.0, 1.0, 0.05)?;
    let bound_ok = (b.bound_value - 1.100361).abs() <= 1e-6;
    outcome(
        bins_ok && parseval_ok && bound_ok,
        format!(
            "{} [{}]; max ||c||_2 {parseval:.6} over 50 circuits [{}]; bound {:.6} = {:.6} + {:.6} vs expected 1.100361 [{}]",
            parts.join(", "),
            ok(bins_ok),
            ok(parseval_ok),
            b.bound_value,
            b.complexity_term,
            b.confidence_term,
            ok(bound_ok)
        ),
    )
}

fn autoencoder_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::new(Command::Autoencoder);
    c.seed = 1111;
    c.params = json!({ "m": 512, "noise": 0.05, "optimizer": { "kind": "adam", "learning_rate": 0.05, "max_iters": 300, "batch_size": 20 } });
    c
}

fn classifier_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::new(Command::Train);
    c.seed = 1112;
    c.params = json!({ "model": "classifier", "synthetic": { "m": 400 } });
    c
}

fn criterion_11() -> Result<Outcome> {
    let (_, ae) = experiment::run_config(autoencoder_config())?;
    let vf = ae.metrics["validation_fidelity"].as_f64().unwrap_or(f64::NAN);
    let tf = ae.metrics["train_fidelity"].as_f64().unwrap_or(f64::NAN);
    let (_, cl) = experiment::run_config(classifier_config())?;
    let acc = cl.metrics["test_accuracy"].as_f64().unwrap_or(f64::NAN);
    let train_acc = cl.metrics["accuracy"].as_f64().unwrap_or(f64::NAN);
    outcome(
        vf >= 0.95 && tf >= 0.95 && acc >= 0.95,
        format!("autoencoder fidelity train {tf:.4} validation {vf:.4}; classifier accuracy train {train_acc:.3} held-out {acc:.3}"),
    )
}

/// Dense-mode configs exercising each criterion's code path.
fn determinism_configs() -> Vec<ExperimentConfig> {
    let mk = |cmd: Command, seed: u64, params: serde_json::Value| {
        let mut c = ExperimentConfig::new(cmd);
        c.seed = seed;
        c.params = params;
        c
    };
    let zz = spec(AnsatzKind::ZzFeatureMap, Topology::Linear, 6);
    let c2 = spec(AnsatzKind::Circuit2, Topology::Linear, 6);
    let mut deconv = mk(Command::Deconvolve, 5, json!({ "channel": { "kind": "pauli", "px": 0.1, "py": 0.05, "pz": 0.2 } }));
    deconv.shots = Some(10_000);
    vec![
        mk(Command::Gradvar, 3, json!({ "model": "toy", "n_values": [2, 4], "samples": 2000 })),
        mk(Command::Gradvar, 4, json!({ "n_values": [2, 3], "samples": 2000 })),
        deconv,
        mk(Command::Neuron, 6, json!({ "task": "noise", "samples": 10000 })),
        mk(Command::Neuron, 6, json!({ "task": "equivalence", "pairs": 20 })),
        mk(Command::Unsample, 7, json!({ "method": { "kind": "local", "structure": "321", "entangler": "nearest_neighbour" }, "runs": 2, "optimizer": { "max_iters": 100 } })),
        mk(Command::EntanglementScan, 8, json!({ "feature": zz, "var": c2, "max_layers": 6, "samples": 20, "paired": true, "compare_topology": "full" })),
        mk(Command::Expressibility, 9, json!({ "ensemble": { "kind": "qnn", "feature": zz, "var": c2 }, "layers": [1, 2], "samples": 1000, "spectrum": true, "spectrum_samples": 50 })),
        mk(Command::Fourier, 10, json!({ "layers": [1, 2, 3], "trials": 3 })),
        mk(Command::Bound, 10, json!({})),
        autoencoder_config(),
        classifier_config(),
    ]
}

fn artifacts(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<(String, Vec<u8>)>> {
    let dir = tempfile::tempdir()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| vqsim_core::VqError::Invalid(e.to_string()))?;
    let (rec, out) = pool.install(|| experiment::run_config(cfg.clone()))?;
    experiment::write_outputs(dir.path(), &rec, &out, "")?;
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir.path())?
        .map(|e| {
            let e = e?;
            Ok((e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path())?))
        })
        .collect::<Result<_>>()?;
    files.sort();
    Ok(files)
}

fn criterion_12() -> Result<Outcome> {
    let configs = determinism_configs();
    let mut mismatched = Vec::new();
    for cfg in &configs {
        let a = artifacts(cfg, 1)?;
        let b = artifacts(cfg, 4)?;
        if a != b {
            mismatched.push(cfg.command.name());
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("{} configs rerun with 1 and 4 threads, byte-identical outputs; mismatches: {mismatched:?}", configs.len()),
    )
}

type Criterion = fn() -> Result<Outcome>;

fn main() {
    let criteria: [(&str, Criterion, Duration); 12] = [
        ("MPS vs dense oracle", criterion_1, Duration::from_secs(300)),
        ("parameter-shift gradients", criterion_2, Duration::from_secs(60)),
        ("toy-model gradient variance", criterion_3, Duration::from_secs(120)),
        ("2-design gradient variance", criterion_4, Duration::from_secs(300)),
        ("deconvolution exactness", criterion_5, Duration::from_secs(300)),
        ("quantum neuron", criterion_6, Duration::from_secs(120)),
        ("unsampling fidelities", criterion_7, Duration::from_secs(600)),
        ("entanglement convergence", criterion_8, Duration::from_secs(1800)),
        ("expressibility and spectrum", criterion_9, Duration::from_secs(600)),
        ("Fourier spectrum and bound", criterion_10, Duration::from_secs(120)),
        ("autoencoder and classifier", criterion_11, Duration::from_secs(600)),
        ("determinism", criterion_12, Duration::from_secs(600)),
    ];
    let only: Option<Vec<usize>> = std::env::var("VQSIM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failures = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let res = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let (pass, detail) = match res {
            Ok(o) => (o.pass && in_time, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failures += 1;
        }
        println!(
            "{} criterion {id:>2} ({name}): {detail} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {failures} failing");
    if failures > 0 && std::env::var("VQSIM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
