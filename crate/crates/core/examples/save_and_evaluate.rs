//! Train briefly, save the weights, reload them and evaluate per noise level
//! with and without a fixed-width override.

use adasmooth::filter::fwhm_mm_to_sigma;
use adasmooth::manifest::Split;
use adasmooth::phantom::{generate, PhantomSpec};
use adasmooth::trainer::{evaluate, load_model, save_model, train, TrainConfig};

fn main() -> adasmooth::Result<()> {
    let phantom = generate(&PhantomSpec::default(), 11)?;
    let config = TrainConfig {
        max_epochs: 15,
        learning_rate: 0.03,
        ..TrainConfig::default()
    };
    let (model, report) = train(&config, &phantom.dataset)?;
    println!("trained {} epochs, best {}", report.stopped_epoch, report.best_epoch);

    let dir = std::env::temp_dir().join("adasmooth_weights");
    std::fs::create_dir_all(&dir).expect("create weights directory");
    save_model(&model, &dir)?;
    let loaded = load_model(&dir)?;
    let (slope, intercept) = loaded.params.effective_affine();
    println!("log sigma_f = {slope:.4} * feature + {intercept:.4}");

    print!("{}", evaluate(&loaded, &phantom.dataset, Split::Test, config.truncation, None)?.to_text());
    let sigma = fwhm_mm_to_sigma(8.0, 3.0)?;
    print!("{}", evaluate(&loaded, &phantom.dataset, Split::Test, config.truncation, Some(sigma))?.to_text());
    Ok(())
}
