use nz_core::model::RefinerConfig;
use nz_core::params::Bound;
use nz_core::synthetic::synthetic_collection;
use nz_core::training::{Trainer, TrainingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A loss on the last frame of a 3-step rollout must reach the parameters
/// used at step 1, through the two later warps and refinements.
#[test]
fn last_frame_loss_reaches_first_step_parameters() {
    let trainer = Trainer::new(TrainingConfig::default(), RefinerConfig::for_size(16, 4, 8).unwrap()).unwrap();
    let start = synthetic_collection(1, 16, 9).unwrap().remove(0);
    let bounds: Vec<Bound> = (0..3).map(|_| Bound::new(&trainer.state.refiner, true)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frames = trainer.rollout_var(&bounds, &start, 3, &mut rng).unwrap();
    let loss = frames[2].rgbd().square().mean();
    let grads = loss.backward();
    let norm = |b: &Bound| {
        let g = b.grads(&grads, "gen.");
        assert!(g.all_finite());
        g.sq_norm().sqrt()
    };
    let (g1, g2, g3) = (norm(&bounds[0]), norm(&bounds[1]), norm(&bounds[2]));
    eprintln!("per-step generator gradient norms {g1:.3e} {g2:.3e} {g3:.3e}");
    assert!(g1 > 1e-8, "step-1 parameters get no gradient: {g1:e}");
    assert!(g2 > 1e-8 && g3 > 1e-8);
}
