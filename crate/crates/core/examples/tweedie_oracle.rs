//! Posterior mean from the noise prediction, checked against the mixture's
//! closed form across noise levels.

use idslab::tasks::{make_vector_world, VectorWorldSpec};
use idslab::tweedie::guided_posterior_mean;
use idslab::{forward_diffuse, Condition, Rng, ScoreBackend};

fn main() -> idslab::Result<()> {
    let world = make_vector_world(&VectorWorldSpec::two_mode())?;
    let b = world.backend();
    let mut rng = Rng::new(1);
    let z0 = world.sample(Condition::Label(0), &mut rng)?;
    let eps = rng.sample_gaussian(&[2])?;
    println!("z0 = {:?}", z0.data());
    for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let z_t = forward_diffuse(&z0, &eps, t, b.schedule())?;
        let tweedie = guided_posterior_mean(b, &z_t, Condition::Label(0), t, 0.0)?;
        let exact = b.exact_posterior_mean(&z_t, Condition::Label(0), t)?;
        println!(
            "t {t:.1}: E[z0|z_t] = {:>8.4?}  |tweedie - exact| = {:.1e}  distance to z0 = {:.4}",
            tweedie.data(),
            tweedie.distance(&exact)?,
            tweedie.distance(&z0)?
        );
    }
    Ok(())
}
