mod common;

use common::small_autoencoder;
use irc_core::autoencoder::{AeTrainConfig, AeTrainer, Autoencoder};
use irc_core::datasets::{toy_dataset, ToyConfig};
use irc_core::tensor::AdamConfig;

fn shapes(count: usize, seed: u64) -> Vec<irc_core::PointCloud> {
    toy_dataset(&ToyConfig {
        count,
        n_points: 64,
        seed,
    })
    .unwrap()
}

#[test]
fn decode_is_bit_deterministic() {
    let ae = Autoencoder::new(&small_autoencoder(), 3).unwrap();
    let cloud = &shapes(1, 0)[0];
    let latent = ae.encode(cloud).unwrap();
    assert_eq!(latent.len(), 16);
    assert_eq!(latent.channels(), 4);
    let a = ae.decode(&latent, 64, 9).unwrap();
    assert_eq!(a, ae.decode(&latent, 64, 9).unwrap());
    assert_ne!(a, ae.decode(&latent, 64, 10).unwrap());
    assert_eq!(a.len(), 64);
}

#[test]
fn every_parameter_receives_gradient() {
    let data = shapes(4, 1);
    let ae = Autoencoder::new(&small_autoencoder(), 1).unwrap();
    let cfg = AeTrainConfig {
        batch_size: 4,
        ..AeTrainConfig::default()
    };
    let mut trainer = AeTrainer::new(ae, cfg, &data).unwrap();
    let (loss, grads) = trainer.loss_and_grads(&data, 0).unwrap();
    assert!(loss.is_finite());
    let store = &trainer.model.store;
    for (id, g) in store.ids().zip(&grads) {
        assert!(
            g.data().iter().any(|&v| v != 0.0),
            "{} has a zero gradient",
            store.name(id)
        );
    }
}

#[test]
fn training_lowers_the_loss() {
    let data = shapes(8, 2);
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..3 {
        let cfg = AeTrainConfig {
            iterations: 500,
            batch_size: 2,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            seed,
            ..AeTrainConfig::default()
        };
        let ae = Autoencoder::new(&small_autoencoder(), seed).unwrap();
        let mut trainer = AeTrainer::new(ae, cfg, &data).unwrap();
        let (l0, _) = trainer.loss_and_grads(&data, 0).unwrap();
        trainer.run(&data, |_| {}).unwrap();
        let (l500, _) = trainer.loss_and_grads(&data, 0).unwrap();
        first += l0 / 3.0;
        last += l500 / 3.0;
    }
    assert!(last < first, "loss {first} -> {last}");
}
