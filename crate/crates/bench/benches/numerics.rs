use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lmt_core::cohort::{extract_pairs, generate_cohort, CohortConfig, ConsecutivePair};
use lmt_core::mixing::MixDraw;
use lmt_core::odesolve::{solve_ivp, LinearField, SolverConfig};
use lmt_core::timeaware::{node_adjoint, node_forward, NodeDynamics};
use lmt_core::training::{lmt_loss, BatchDraw, ClassLoss, LmtConfig, Model, PairBatch};
use lmt_core::{ParamSet, Profile, Tape, Tensor};

fn solver(c: &mut Criterion) {
    let rot = LinearField::from_system_matrix(&Tensor::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]).unwrap()).unwrap();
    let z0 = Tensor::row(&[1.0, 0.0]);
    let cfg = SolverConfig::default();
    c.bench_function("dopri5 rotation quarter turn", |b| {
        b.iter(|| solve_ivp(&rot, black_box(&z0), 0.0, std::f64::consts::FRAC_PI_2, &cfg).unwrap())
    });
}

fn node(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParamSet::new();
    let d = NodeDynamics::new(&mut params, 32, 64, &mut rng);
    let z0 = Tensor::randn(&[64, 32], 1.0, &mut rng);
    let t_i = vec![0.0; 64];
    let t_t: Vec<f64> = (0..64).map(|i| 0.1 + i as f64 / 64.0).collect();
    let seed = Tensor::randn(&[64, 32], 1.0, &mut rng);
    let cfg = SolverConfig::default();
    c.bench_function("node forward batch 64", |b| {
        b.iter(|| node_forward(&d, &params, black_box(&z0), &t_i, &t_t, &cfg).unwrap())
    });
    let z1 = node_forward(&d, &params, &z0, &t_i, &t_t, &cfg).unwrap();
    c.bench_function("node adjoint batch 64", |b| {
        b.iter(|| node_adjoint(&d, &params, black_box(&z1), &t_i, &t_t, &seed, &cfg).unwrap())
    });
}

fn loss(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cohort = generate_cohort(&CohortConfig { n_patients: 100, ..CohortConfig::default() }, 1).unwrap();
    let pairs = extract_pairs(&cohort, None);
    let refs: Vec<&ConsecutivePair> = pairs.iter().take(64).collect();
    let batch = PairBatch::new(&refs).unwrap();
    let cfg = LmtConfig::default();
    let model = Model::new(cohort.feature_dim(), &cfg, &mut rng);
    let draw = BatchDraw::shared(MixDraw { lambda: 0.4, layer_k: 3, alpha: 1.0 }, batch.len());
    c.bench_function("lmt loss forward+backward batch 64", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let bound = model.params.bind_all(&mut t);
            let l = lmt_loss(&mut t, &model, &bound, &batch, &draw, Profile::Linear, ClassLoss::Bce).unwrap();
            t.backward(l).unwrap()
        })
    });
}

criterion_group!(benches, solver, node, loss);
criterion_main!(benches);
