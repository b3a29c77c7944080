use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ncs_robust::analysis::{ncs_robust_check, ResidueLedger};
use ncs_robust::sim::{self, LoopSimulator, SimConfig};
use ncs_robust::{graphsym, margin, StateSpaceModel};
use ncs_robust_bench::{integrator, integrator_network, random_stable};

fn benchmarks(c: &mut Criterion) {
    let p6 = random_stable(6, 2, 2, 1);
    c.bench_function("stability_margin_integrator", |b| {
        let (p, k) = (integrator(), StateSpaceModel::scalar_gain(-1.0));
        b.iter(|| margin::stability_margin(&p, &k))
    })
    .bench_function("stability_margin_6_states", |b| {
        let k = StateSpaceModel::static_gain(nalgebra::DMatrix::zeros(2, 2));
        b.iter(|| margin::stability_margin(&p6, &k))
    })
    .bench_function("hinf_norm_6_states", |b| b.iter(|| p6.hinf_norm()))
    .bench_function("normalized_rcf_6_states", |b| b.iter(|| graphsym::normalized_rcf(&p6)))
    .bench_function("max_stability_margin_6_states", |b| b.iter(|| margin::max_stability_margin(&p6)))
    .bench_function("ncs_robust_check", |b| {
        let net = integrator_network();
        b.iter(|| ncs_robust_check(&net))
    });

    c.bench_function("ledger_1000_events", |b| {
        b.iter(|| {
            let mut ledger = ResidueLedger::new(0.7).expect("angle in range");
            for i in 0..1000 {
                let label = format!("ch{}", i % 50);
                if i < 50 {
                    ledger.add(&label, 0.01).expect("fresh label");
                } else {
                    ledger.modify(&label, 0.001 * (i % 7) as f64).expect("known label");
                }
            }
            ledger.residue()
        })
    });

    let mut group = c.benchmark_group("simulation");
    group.sample_size(10);
    let net = integrator_network();
    let config = SimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let chain = net.draw_chain(&mut rng).expect("catalog draw");
    let simulator = LoopSimulator::new(net.plant(), net.controller(), chain, &config).expect("contractive loop");
    let inj = sim::probe_injection(2, &config, 0, 1, 0);
    group.bench_function("closed_loop_4000_steps", |b| b.iter(|| simulator.run(1, &inj)));
    group.bench_function("monte_carlo_4_trials", |b| b.iter(|| sim::monte_carlo_robustness(&net, 4, &config)));
    group.finish();
}

criterion_group!(benches, benchmarks);
criterion_main!(benches);
