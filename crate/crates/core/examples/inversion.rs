//! Edits, then replays the recorded noise backwards to recover the source.

use idslab::distill::{edit, invert, DistillConfig, EditTask, Method};
use idslab::metrics::mse;
use idslab::tasks::{make_vector_world, VectorWorldSpec};
use idslab::{Condition, Rng};

fn main() -> idslab::Result<()> {
    let world = make_vector_world(&VectorWorldSpec::two_mode())?;
    for seed in 0..5 {
        let z_src = world.sample(Condition::Label(0), &mut Rng::derive(42, seed))?;
        let task = EditTask {
            z_src,
            cond_src: Condition::Label(0),
            cond_trg: Condition::Label(1),
        };
        for method in [Method::Dds, Method::Ids] {
            let cfg = DistillConfig {
                method,
                seed,
                ..DistillConfig::default()
            };
            let line = edit(world.backend(), &task, &cfg).and_then(|r| {
                let back = invert(world.backend(), &r, &task, &cfg)?;
                Ok(format!("reconstruction mse {:.3e}", mse(&back, &task.z_src)?))
            });
            println!("seed {seed} {method}: {}", line.unwrap_or_else(|e| e.to_string()));
        }
    }
    Ok(())
}
