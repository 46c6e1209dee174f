// scratch probe: capacity sweep for the memorization check
use advae_core::data::Dataset;
use advae_core::models::{Family, Likelihood, ModelDescriptor, ModelParameters};
use advae_core::tensor::Tensor;
use advae_core::train::{elbo_grad, AdamState};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() {
    let side = 12;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut make = |n: usize| -> Vec<f64> {
        (0..n * side * side)
            .map(|_| f64::from(rng.random_range(0..2u8)))
            .collect()
    };
    let train = make(8);
    let test = make(8);
    let ds = Dataset::from_corpora("noise", (1, side, side), train, test, 11, 0.2).unwrap();
    for (hidden, latent, lr, steps) in [
        (vec![64usize, 32], 3usize, 1e-2, 500usize),
        (vec![64, 64], 4, 1e-2, 500),
        (vec![128, 64], 4, 1e-2, 500),
        (vec![64, 64], 4, 5e-3, 500),
    ] {
        let desc = ModelDescriptor {
            family: Family::Vae { hidden: hidden.clone() },
            ..ModelDescriptor::vae(1, side, side, latent, Likelihood::Bernoulli)
        };
        let mut params = ModelParameters::init(desc, 13).unwrap();
        let mut adam = AdamState::new(&params);
        let indices: Vec<usize> = (0..8).collect();
        let x = ds.batch(&indices);
        let mut nrng = ChaCha8Rng::seed_from_u64(17);
        let lt = params.descriptor().latent_total();
        let mut initial = 0.0;
        let mut last = 0.0;
        for step in 0..steps {
            let noise = Tensor::new(
                vec![8, lt],
                (0..8 * lt).map(|_| nrng.sample(rand_distr::StandardNormal)).collect(),
            ).unwrap();
            let (loss, grads) = elbo_grad(&params, &x, &noise).unwrap();
            if step == 0 { initial = loss; }
            last = loss;
            adam.step(&mut params, &grads, lr).unwrap();
        }
        let kl: f64 = indices.iter().map(|&i| {
            params.encode_image(&ds.image(i)).unwrap().kl_to_standard_normal()
        }).sum::<f64>() / 8.0;
        println!("hidden {hidden:?} latent {latent} lr {lr}: init {initial:.1} final {last:.2} ratio {:.3} KL {kl:.2}", last / initial);
    }
}
