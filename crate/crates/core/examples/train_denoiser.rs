//! Trains the small conditional denoiser on two clusters and saves it as a
//! backend JSON document usable from a config's `backend` section.

use idslab::backend::{train_denoiser, MlpDenoiserBackend, TrainConfig};
use idslab::tasks::{make_vector_world, VectorWorldSpec};
use idslab::{Backend, Condition, NoiseSchedule, Rng};

fn main() -> idslab::Result<()> {
    let world = make_vector_world(&VectorWorldSpec::two_mode())?;
    let mut rng = Rng::new(5);
    let mut data = Vec::new();
    for cond in [Condition::Label(0), Condition::Label(1)] {
        for _ in 0..200 {
            data.push((world.sample(cond, &mut rng)?, cond));
        }
    }
    let init = MlpDenoiserBackend::new(&[2], 2, &[64, 64], NoiseSchedule::default(), &mut rng)?;
    let report = train_denoiser(init, &data, &mut rng, &TrainConfig::default())?;
    for (epoch, loss) in report.losses.iter().enumerate().step_by(25) {
        println!("epoch {epoch:3}: loss {loss:.4}");
    }
    println!("final loss {:.4}", report.losses.last().copied().unwrap_or(f64::NAN));
    let path = std::env::temp_dir().join("idslab-mlp.json");
    Backend::Mlp(report.backend).save(&path)?;
    println!("saved {}", path.display());
    Ok(())
}
