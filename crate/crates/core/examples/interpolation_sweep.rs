//! IRM along the CMNIST → CMNIST+ interpolation, evaluated on both test
//! environments, with a small grid and a few seeds.

use irmlab::experiments::{run_sweep_interp, ExperimentConfig};
use irmlab::train::{HyperGrid, Method, TrainConfig};

fn main() -> irmlab::Result<()> {
    let cfg = ExperimentConfig {
        w_plus: vec![0.0, 0.5, 1.0],
        methods: vec![Method::Irm],
        n_per_env: 3000,
        train: TrainConfig { iterations: 400, batch_size: 256, runs: 3, ..TrainConfig::default() },
        grid: HyperGrid { alpha_grid: vec![1e2, 1e4], k_irm_grid: vec![200], ..HyperGrid::default() },
        ..ExperimentConfig::default()
    };
    for s in run_sweep_interp(&cfg)? {
        println!(
            "test={:?} w_plus={} p_ye={:.2}: {} {:.3} ± {:.3}",
            s.setting.test_spec.unwrap(),
            s.setting.w_plus.unwrap(),
            s.setting.p_ye.unwrap(),
            s.method,
            s.mean_test.unwrap_or(f64::NAN),
            s.std_test.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
