//! Moves a sample from one mode to the other with each distillation method
//! and reports how much of its offset from the mode survived.

use idslab::distill::{edit, DistillConfig, EditTask, Method};
use idslab::metrics::identity_residual;
use idslab::tasks::{make_vector_world, VectorWorldSpec};
use idslab::{Condition, Rng};

fn main() -> idslab::Result<()> {
    let world = make_vector_world(&VectorWorldSpec::two_mode())?;
    let (src, trg) = (Condition::Label(0), Condition::Label(1));
    let task = EditTask {
        z_src: world.sample(src, &mut Rng::new(3))?,
        cond_src: src,
        cond_trg: trg,
    };
    println!("source {:?}", task.z_src.data());
    for method in [Method::Sds, Method::Dds, Method::Ids, Method::FprSds] {
        for (t_min, t_max) in [(0.05, 0.95), (0.0, 0.2)] {
            let cfg = DistillConfig {
                method,
                t_min,
                t_max,
                seed: 1,
                ..DistillConfig::default()
            };
            match edit(world.backend(), &task, &cfg) {
                Ok(r) => println!(
                    "{:>7} t~U({t_min}, {t_max}): {:>8.4?} identity residual {:.4}",
                    method.name(),
                    r.z_trg.data(),
                    identity_residual(&r.z_trg, world.mode(trg)?, &task.z_src, world.mode(src)?)?
                ),
                Err(e) => println!("{:>7} t~U({t_min}, {t_max}): {e}", method.name()),
            }
        }
    }
    Ok(())
}
