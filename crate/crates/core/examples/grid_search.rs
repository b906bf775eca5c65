//! Learning-rate x L2 grid on a small phantom, selecting by validation accuracy.

use adasmooth::phantom::{generate, PhantomSpec};
use adasmooth::trainer::{grid_search, TrainConfig};
use adasmooth::volume::Dims;

fn main() -> adasmooth::Result<()> {
    let spec = PhantomSpec {
        dims: Dims::cube(16),
        volumes_per_subject_per_class: 10,
        amplitude: 0.3,
        blob_radius: 1.5,
        center_offset: 4.0,
        ..PhantomSpec::default()
    };
    let phantom = generate(&spec, 3)?;
    let config = TrainConfig {
        max_epochs: 20,
        lr_grid: vec![1e-3, 1e-2, 1e-1],
        lambda_grid: vec![0.0, 1e-2],
        ..TrainConfig::default()
    };
    let result = grid_search(&config, &phantom.dataset)?;
    print!("{}", result.to_csv());
    if let Some(best) = result.best_row() {
        println!("best: lr {} lambda {} (val acc {:.3})", best.learning_rate, best.lambda_l2, best.val_accuracy);
    }
    Ok(())
}
