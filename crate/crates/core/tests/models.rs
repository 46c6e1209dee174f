//! Model zoo contracts: shapes, degenerate-weight collapses, the shared
//! encode/sample/decode surface, and gradient checks for every family.

use advae_core::gaussian::DiagonalGaussian;
use advae_core::models::{
    kl_between_nodes, kl_to_standard_normal_node, ConvSpec, Family, Likelihood, ModelDescriptor,
    ModelParameters,
};
use advae_core::tensor::{finite_difference_check, Tape, Tensor};
use approx::assert_abs_diff_eq;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn tiny_vae() -> ModelDescriptor {
    ModelDescriptor {
        family: Family::Vae {
            hidden: vec![6, 5],
        },
        ..ModelDescriptor::vae(1, 4, 4, 3, Likelihood::Bernoulli)
    }
}

fn tiny_cvae() -> ModelDescriptor {
    ModelDescriptor {
        family: Family::Cvae {
            conv: vec![ConvSpec::new(3, 2, 2)],
            enc_dense: 10,
            dec_dense: 4,
            deconv: vec![ConvSpec::new(4, 2, 2), ConvSpec::new(2, 4, 2)],
        },
        channels: 1,
        height: 6,
        width: 6,
        latent: 3,
        likelihood: Likelihood::Bernoulli,
    }
}

fn tiny_draw(window: Option<usize>) -> ModelDescriptor {
    ModelDescriptor::draw(1, 6, 6, 2, 3, 5, window, Likelihood::Bernoulli)
}

fn random_image(rng: &mut ChaCha8Rng, pixels: usize) -> Tensor {
    Tensor::new(
        vec![pixels],
        (0..pixels).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn vae_encode_shape_matches_latent() {
    let params = ModelParameters::init(
        ModelDescriptor::vae(1, 28, 28, 32, Likelihood::Bernoulli),
        1,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let q = params.encode_image(&random_image(&mut rng, 784)).unwrap();
    assert_eq!(q.mu.len(), 32);
    assert_eq!(q.log_var.len(), 32);
}

#[test]
fn encode_rejects_wrong_shape() {
    let params = ModelParameters::init(tiny_vae(), 1).unwrap();
    let bad = Tensor::zeros(&[7]);
    assert!(params.encode_image(&bad).is_err());
}

#[test]
fn zero_weights_collapse_to_biases() {
    let mut params = ModelParameters::init(tiny_vae(), 3).unwrap();
    let mu_bias = vec![0.25, -0.5, 1.5];
    for (name, t) in params.tensors_mut().iter_mut() {
        if name.ends_with(".w") {
            t.data_mut().fill(0.0);
        }
    }
    params.tensors_mut().get_mut("mu.b").unwrap().data_mut()[..].copy_from_slice(&mu_bias);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = params.encode_image(&random_image(&mut rng, 16)).unwrap();
    assert_eq!(q.mu, mu_bias);
    assert_eq!(q.log_var, vec![0.0, 0.0, 0.0]);

    // decode collapses to sigmoid(out bias)
    let out_bias = 0.3;
    params
        .tensors_mut()
        .get_mut("out.b")
        .unwrap()
        .data_mut()
        .fill(out_bias);
    let recon = params.decode_latent(&[9.0, -9.0, 0.0]).unwrap();
    let expect = 1.0 / (1.0 + (-out_bias as f64).exp());
    for &v in recon.data() {
        assert_abs_diff_eq!(v, expect, epsilon = 1e-15);
    }
}

#[test]
fn draw_concatenates_per_step_posteriors() {
    let desc = ModelDescriptor::draw(1, 28, 28, 32, 16, 16, Some(8), Likelihood::Bernoulli);
    let params = ModelParameters::init(desc, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = params.encode_image(&random_image(&mut rng, 784)).unwrap();
    assert_eq!(q.mu.len(), 512);
    assert_eq!(q.log_var.len(), 512);
}

#[test]
fn decode_output_has_image_shape_and_unit_range() {
    for desc in [tiny_vae(), tiny_cvae(), tiny_draw(None), tiny_draw(Some(3))] {
        let pixels = desc.pixels();
        let latent_total = desc.latent_total();
        let params = ModelParameters::init(desc, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z: Vec<f64> = (0..latent_total).map(|_| rng.random_range(-2.0..2.0)).collect();
        let recon = params.decode_latent(&z).unwrap();
        assert_eq!(recon.len(), pixels);
        for &v in recon.data() {
            assert!((0.0..=1.0).contains(&v), "bernoulli output {v} out of range");
        }
    }
}

#[test]
fn decode_rejects_wrong_latent_length() {
    let params = ModelParameters::init(tiny_vae(), 7).unwrap();
    assert!(params.decode_latent(&[0.0; 5]).is_err());
}

#[test]
fn forward_with_zero_noise_passes_mean() {
    let params = ModelParameters::init(tiny_vae(), 9).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(&Tensor::filled(&[2, 16], 0.5));
    let noise = Tensor::zeros(&[2, 3]);
    let out = bound.forward(&mut tape, x, &noise).unwrap();
    assert_eq!(tape.value(out.z).data(), tape.value(out.q.mu).data());
}

#[test]
fn draw_decode_agrees_with_forward_canvas() {
    // The decoder-only path must replay exactly the canvas the full pass
    // painted, given the same latent trajectory.
    for window in [None, Some(3)] {
        let params = ModelParameters::init(tiny_draw(window), 11).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x_data: Vec<f64> = (0..72).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = tape.constant(&Tensor::new(vec![2, 36], x_data).unwrap());
        let noise = Tensor::new(
            vec![2, 6],
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let fwd = bound.forward(&mut tape, x, &noise).unwrap();
        let z = tape.constant(&tape.value(fwd.z).clone());
        let replay = bound.decode(&mut tape, z).unwrap();
        let a = tape.value(fwd.recon).data();
        let b = tape.value(replay).data();
        for i in 0..a.len() {
            assert_abs_diff_eq!(a[i], b[i], epsilon = 1e-12);
        }
    }
}

#[test]
fn tape_kl_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let len = 4;
    let batch = 3;
    let make = |rng: &mut ChaCha8Rng| -> Vec<DiagonalGaussian> {
        (0..batch)
            .map(|_| {
                DiagonalGaussian::new(
                    (0..len).map(|_| rng.random_range(-1.5..1.5)).collect(),
                    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect()
    };
    let qa = make(&mut rng);
    let qb = make(&mut rng);

    let pack = |qs: &[DiagonalGaussian]| -> (Tensor, Tensor) {
        let mu: Vec<f64> = qs.iter().flat_map(|q| q.mu.clone()).collect();
        let lv: Vec<f64> = qs.iter().flat_map(|q| q.log_var.clone()).collect();
        (
            Tensor::new(vec![batch, len], mu).unwrap(),
            Tensor::new(vec![batch, len], lv).unwrap(),
        )
    };

    let mut tape = Tape::new();
    let (mu_a, lv_a) = pack(&qa);
    let (mu_b, lv_b) = pack(&qb);
    let a = advae_core::models::GaussianNodes {
        mu: tape.constant(&mu_a),
        log_var: tape.constant(&lv_a),
    };
    let b = advae_core::models::GaussianNodes {
        mu: tape.constant(&mu_b),
        log_var: tape.constant(&lv_b),
    };
    let kl_std = kl_to_standard_normal_node(&mut tape, a).unwrap();
    let kl_ab = kl_between_nodes(&mut tape, a, b).unwrap();

    let expect_std: f64 = qa.iter().map(|q| q.kl_to_standard_normal()).sum();
    let expect_ab: f64 = qa
        .iter()
        .zip(&qb)
        .map(|(x, y)| x.kl_between(y).unwrap())
        .sum();
    assert_abs_diff_eq!(tape.value(kl_std).item(), expect_std, epsilon = 1e-12);
    assert_abs_diff_eq!(tape.value(kl_ab).item(), expect_ab, epsilon = 1e-12);
}

#[test]
fn family_gradients_pass_finite_differences() {
    // d/dx of a reconstruction + KL objective through the full pass.
    let cases = [tiny_vae(), tiny_cvae(), tiny_draw(None), tiny_draw(Some(3))];
    for desc in cases {
        let pixels = desc.pixels();
        let latent_total = desc.latent_total();
        let name = desc.family.name();
        let params = ModelParameters::init(desc, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let noise = Tensor::new(
            vec![1, latent_total],
            (0..latent_total).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let point = Tensor::new(
            vec![1, pixels],
            (0..pixels).map(|_| rng.random_range(0.05..0.95)).collect(),
        )
        .unwrap();
        let err = finite_difference_check(
            |tape, x| {
                let bound = params.bind(tape, false);
                let out = bound.forward(tape, x, &noise)?;
                let sq = tape.square(out.recon);
                let rec = tape.sum(sq);
                let kl = kl_to_standard_normal_node(tape, out.q)?;
                tape.add(rec, kl)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{name}: forward gradient error {err:.3e}");

        // d/dz of the decoder alone
        let zpoint = Tensor::new(
            vec![1, latent_total],
            (0..latent_total).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let err = finite_difference_check(
            |tape, z| {
                let bound = params.bind(tape, false);
                let recon = bound.decode(tape, z)?;
                let sq = tape.square(recon);
                Ok(tape.sum(sq))
            },
            &zpoint,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{name}: decode gradient error {err:.3e}");
    }
}

#[test]
fn kl_between_gradient_passes_finite_differences() {
    let desc = tiny_vae();
    let params = ModelParameters::init(desc, 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let target_mu = Tensor::new(vec![1, 3], vec![0.4, -0.2, 0.9]).unwrap();
    let target_lv = Tensor::new(vec![1, 3], vec![-0.3, 0.2, 0.5]).unwrap();
    let point = Tensor::new(
        vec![1, 16],
        (0..16).map(|_| rng.random_range(0.05..0.95)).collect(),
    )
    .unwrap();
    let err = finite_difference_check(
        |tape, x| {
            let bound = params.bind(tape, false);
            let q = bound.encode(tape, x, None)?;
            let target = advae_core::models::GaussianNodes {
                mu: tape.constant(&target_mu),
                log_var: tape.constant(&target_lv),
            };
            kl_between_nodes(tape, q, target)
        },
        &point,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-3, "latent objective gradient error {err:.3e}");
}

#[test]
fn encode_is_deterministic_and_bit_stable() {
    for desc in [tiny_vae(), tiny_cvae(), tiny_draw(Some(3))] {
        let pixels = desc.pixels();
        let params = ModelParameters::init(desc, 41).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let img = random_image(&mut rng, pixels);
        let a = params.encode_image(&img).unwrap();
        let b = params.encode_image(&img).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.mu), bits(&b.mu));
        assert_eq!(bits(&a.log_var), bits(&b.log_var));
    }
}

#[test]
fn descriptor_text_round_trip() {
    for desc in [
        ModelDescriptor::vae(1, 28, 28, 32, Likelihood::Bernoulli),
        ModelDescriptor::cvae_28(128, Likelihood::Bernoulli),
        tiny_cvae(),
        ModelDescriptor::draw(3, 32, 32, 32, 16, 256, Some(16), Likelihood::Gaussian),
        tiny_draw(None),
    ] {
        let text = desc.to_text();
        let back = ModelDescriptor::from_text(&text).unwrap();
        assert_eq!(back, desc, "round trip of `{text}`");
    }
}

#[test]
fn cvae_stack_must_land_on_image_dims() {
    let mut desc = tiny_cvae();
    desc.height = 7;
    assert!(ModelParameters::init(desc, 1).is_err());
}

#[test]
fn paper_cvae_preset_is_valid_for_28x28() {
    let desc = ModelDescriptor::cvae_28(32, Likelihood::Bernoulli);
    desc.validate().unwrap();
    let params = ModelParameters::init(desc, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(&mut rng, 784);
    let q = params.encode_image(&img).unwrap();
    assert_eq!(q.mu.len(), 32);
    let recon = params.reconstruct(&img).unwrap();
    assert_eq!(recon.len(), 784);
}
