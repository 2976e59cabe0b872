//! How far the one-step posterior mean lands from the source before and
//! after fixed-point refinement, for both update variants.

use idslab::fpr::{refine, FprConfig, UpdateTarget};
use idslab::tasks::{make_vector_world, VectorWorldSpec};
use idslab::tweedie::guided_posterior_mean;
use idslab::{forward_diffuse, Condition, Rng, ScoreBackend};

fn main() -> idslab::Result<()> {
    let world = make_vector_world(&VectorWorldSpec::two_mode())?;
    let b = world.backend();
    let cond = Condition::Label(0);
    let mut rng = Rng::new(9);
    let z_src = world.sample(cond, &mut rng)?;
    let eps = rng.sample_gaussian(&[2])?;
    println!("   t      pre  post(z_t)  post(eps)");
    for k in 1..10 {
        let t = k as f64 / 10.0;
        let pre = guided_posterior_mean(b, &forward_diffuse(&z_src, &eps, t, b.schedule())?, cond, t, 0.0)?;
        let mut post = Vec::new();
        for update in [UpdateTarget::NoisyLatent, UpdateTarget::Noise] {
            let cfg = FprConfig {
                omega: 0.0,
                update,
                ..FprConfig::default()
            };
            let r = refine(b, &z_src, cond, t, &eps, &cfg)?;
            post.push(guided_posterior_mean(b, &r.z_t, cond, t, 0.0)?.distance(&z_src)?);
        }
        println!(
            "{t:4.1} {:8.4} {:10.4} {:10.4}",
            pre.distance(&z_src)?,
            post[0],
            post[1]
        );
    }
    Ok(())
}
