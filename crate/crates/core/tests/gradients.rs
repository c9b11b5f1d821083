use fedpet_core::delta::{attach, DeltaSpec, LoraTarget};
use fedpet_core::model::{build, Batch, ModelConfig};
use fedpet_core::train::{gradient_check, loss_and_gradients};
use fedpet_core::model::Mode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        max_positions: 6,
        d_model: 4,
        n_layers: 2,
        n_heads: 2,
        d_ff: 8,
        n_labels: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn random_batch(rng: &mut ChaCha8Rng, vocab: usize) -> Batch {
    let seqs: Vec<Vec<usize>> = (0..2)
        .map(|_| {
            let len = rng.random_range(1..=4);
            (0..len).map(|_| rng.random_range(1..vocab)).collect()
        })
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
    Batch::from_sequences(&refs, &labels, 4).unwrap()
}

/// Random non-zero values everywhere so no gradient path is trivially dead.
fn perturbed(seed: u64, spec: &DeltaSpec) -> (fedpet_core::model::ParameterStore, fedpet_core::delta::DeltaState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = build(&tiny(), seed).unwrap();
    let names: Vec<String> = store.names().map(String::from).collect();
    for n in &names {
        let t = store.tensor(n).unwrap().map(|_| 0.0).unwrap();
        let t = fedpet_autodiff::Tensor::from_fn(t.shape().to_vec(), |_| rng.random_range(-1.0..1.0)).unwrap();
        store.set(n, t).unwrap();
    }
    let mut delta = attach(&mut store, spec, seed).unwrap();
    let dn: Vec<String> = delta.tensors().map(|(n, _)| n.to_string()).collect();
    for n in &dn {
        let shape = delta.get(n).unwrap().shape().to_vec();
        let t = fedpet_autodiff::Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap();
        delta.set(n, t).unwrap();
    }
    (store, delta)
}

#[test]
fn two_layer_model_matches_finite_differences() {
    for seed in 0..100 {
        let (store, delta) = perturbed(seed, &DeltaSpec::full());
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let batch = random_batch(&mut rng, 12);
        let err = gradient_check(&store, &delta, &batch, 1e-5).unwrap();
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn delta_methods_match_finite_differences() {
    let specs = [
        DeltaSpec::adapter(2),
        DeltaSpec::lora(1, 2.0, &[LoraTarget::Q, LoraTarget::K, LoraTarget::V, LoraTarget::O]),
        DeltaSpec::bitfit(),
        DeltaSpec::prefix(2),
    ];
    for seed in 0..10 {
        for spec in &specs {
            let (store, delta) = perturbed(seed, spec);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
            let batch = random_batch(&mut rng, 12);
            let err = gradient_check(&store, &delta, &batch, 1e-5).unwrap();
            assert!(err < 1e-4, "{spec} seed {seed}: {err:e}");
        }
    }
}

#[test]
fn gradients_cover_exactly_the_trainable_set() {
    let specs = [
        DeltaSpec::full(),
        DeltaSpec::adapter(2),
        DeltaSpec::lora(1, 2.0, &[LoraTarget::Q, LoraTarget::V]),
        DeltaSpec::bitfit(),
        DeltaSpec::prefix(2),
        DeltaSpec {
            head_trainable: false,
            ..DeltaSpec::bitfit()
        },
    ];
    for spec in &specs {
        let (store, delta) = perturbed(3, spec);
        let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(1), 12);
        let (_, g) = loss_and_gradients(&store, &delta, &batch, Mode::Eval).unwrap();
        let got: Vec<&str> = g.iter().map(|(n, _)| n).collect();
        let want = delta.trainable_names();
        assert_eq!(got, want.iter().map(String::as_str).collect::<Vec<_>>(), "{spec}");
    }
}
