//! A small network regressing the quantiles of a standard normal with the
//! quantile Huber loss, compared against the closed-form values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sleepctl::nn::{quantile_huber_grad, Activation, Adam, DenseNet};

const BATCH: usize = 128;

fn main() -> sleepctl::Result<()> {
    let taus = [0.1, 0.5, 0.9];
    let exact = [-1.281_551_565_5, 0.0, 1.281_551_565_5];
    let kappa = 0.01;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = DenseNet::new(
        &[1, 16, taus.len()],
        Activation::Relu,
        Activation::Linear,
        &mut rng,
    )?;
    // A fast phase followed by a slow one to settle the noisy estimates.
    for (lr, iters) in [(1e-2, 2000), (1e-3, 2000)] {
        let mut opt = Adam::new(net.params().len(), lr);
        for _ in 0..iters {
            let mut grads = vec![0.0; net.params().len()];
            for _ in 0..BATCH {
                let y: f64 = StandardNormal.sample(&mut rng);
                let cache = net.forward_cached(&[1.0])?;
                let up: Vec<f64> = taus
                    .iter()
                    .zip(cache.output())
                    .map(|(t, q)| -quantile_huber_grad(*t, y - q, kappa) / BATCH as f64)
                    .collect();
                for (g, d) in grads.iter_mut().zip(net.backward(&cache, &up)?.params) {
                    *g += d;
                }
            }
            opt.update(net.params_mut(), &grads)?;
        }
    }
    for ((t, q), e) in taus.iter().zip(net.forward(&[1.0])?).zip(exact) {
        println!("tau {t}: learned {q:+.3}, exact {e:+.3}");
    }
    Ok(())
}
