mod common;

use common::gradcheck::{autograd, finite_difference, relative_error, sample_config};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn decode_box_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (z, p, t) = sample_config(&mut rng);
        let err = relative_error(&autograd(z, &p, &t), &finite_difference(z, &p, &t, 1e-6));
        worst = worst.max(err);
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}
