//! Train ERM and IRM on CMNIST+ at a mild and a strong spuriousness level
//! and report test accuracy of the selected checkpoints.

use irmlab::sampler::{sample_dataset, split_train_val, EncodingConfig};
use irmlab::spec::cmnist_plus;
use irmlab::train::{train_run, Method, TrainConfig};

fn main() -> irmlab::Result<()> {
    for rho in [0.55, 0.9] {
        let ds = sample_dataset(&cmnist_plus(rho)?, 5000, 1, EncodingConfig::default())?;
        let ds = split_train_val(&ds, 0.8, 1)?;
        for (method, alpha) in [(Method::Erm, 0.0), (Method::Irm, 1e4)] {
            let cfg = TrainConfig { method, alpha, iterations: 600, batch_size: 256, ..TrainConfig::default() };
            let r = train_run(&ds, &cfg)?;
            println!(
                "rho={rho} {method:<4} selected iter {:?}: train {:.3} val {:.3} test {:.3}",
                r.selected_iteration,
                r.train_acc,
                r.val_acc,
                r.test_acc.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}
