//! Fixed-point refinement of the noisy latent on a single Gaussian, where
//! the fixed point is known in closed form.

use idslab::fpr::{fpr_refine, FprConfig};
use idslab::tasks::single_gaussian;
use idslab::{alpha_at, Condition, Latent, NoiseSchedule, Rng, ScoreBackend};

fn main() -> idslab::Result<()> {
    let (mu, sigma, t) = ([0.5, -0.3], 1.2, 0.6);
    let b = single_gaussian(&mu, sigma, NoiseSchedule::default())?;
    let mut rng = Rng::new(7);
    let z_src = b.sample(Condition::Label(0), &mut rng)?;
    let eps = rng.sample_gaussian(&[2])?;

    let a = alpha_at(b.schedule(), t)?;
    let c = a.sqrt() * sigma * sigma / (a * sigma * sigma + 1.0 - a);
    let star: Vec<f64> = (0..2)
        .map(|i| a.sqrt() * mu[i] + (z_src.data()[i] - mu[i]) / c)
        .collect();

    let cfg = FprConfig {
        n_iters: 12,
        ..FprConfig::default()
    };
    let tr = fpr_refine(&b, &z_src, Condition::Label(0), t, &eps, &cfg)?;
    for (i, l) in tr.losses.iter().enumerate() {
        println!("iter {i:2}: loss {l:.3e}");
    }
    println!("final loss {:.3e}", tr.final_loss);
    println!("z_t* found  {:?}", tr.z_t_star.data());
    println!("z_t* exact  {:?}", star);
    println!("distance    {:.3e}", tr.z_t_star.distance(&Latent::from_vec(star)?)?);
    println!("guided noise {:?} (drawn {:?})", tr.eps_star.data(), eps.data());
    Ok(())
}
