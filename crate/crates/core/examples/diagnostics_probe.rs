//! Representation probes on a trained model and on two hand-built extremes.

use irmlab::diagnostics::{conditional_independence_gap, domain_probe, ProbeConfig, RepSample};
use irmlab::experiments::validation_reps;
use irmlab::sampler::{sample_dataset, split_train_val, EncodingConfig};
use irmlab::spec::cmnist_plus;
use irmlab::train::{train_run, Method, TrainConfig};

fn report(name: &str, s: &RepSample) -> irmlab::Result<()> {
    let p = domain_probe(s, &ProbeConfig::default())?;
    let g = conditional_independence_gap(s, 16, 0)?;
    println!(
        "{name:<12} probe E~F {:.3}, E~(F,Y) {:.3}, overlap {:.3}, CI gap {:?}, shared cells {:.2}",
        p.domain_probe_accuracy, p.domain_probe_accuracy_with_label, p.overlap_score, g.gap, g.shared_cell_fraction
    );
    Ok(())
}

fn main() -> irmlab::Result<()> {
    let ds = split_train_val(&sample_dataset(&cmnist_plus(0.9)?, 4000, 3, EncodingConfig::default())?, 0.8, 3)?;
    let rows: Vec<_> = ds.train_envs().flat_map(|e| e.instances.iter()).collect();
    let labels: Vec<_> = rows.iter().map(|i| i.y).collect();
    let envs: Vec<_> = rows.iter().map(|i| i.env).collect();

    let onehot = rows.iter().flat_map(|i| [(i.env == 1) as u8 as f64, (i.env == 2) as u8 as f64]).collect();
    report("F = E", &RepSample::new(2, onehot, labels.clone(), envs.clone())?)?;
    let y = labels.iter().map(|l| l.as_f64()).collect();
    report("F = Y", &RepSample::new(1, y, labels.clone(), envs.clone())?)?;
    let color = rows.iter().flat_map(|i| i.features[..3].to_vec()).collect();
    report("F = C", &RepSample::new(3, color, labels, envs)?)?;

    for (method, alpha) in [(Method::Erm, 0.0), (Method::Irm, 1e4)] {
        let cfg = TrainConfig { method, alpha, iterations: 400, batch_size: 256, ..TrainConfig::default() };
        let r = train_run(&ds, &cfg)?;
        report(method.name(), &validation_reps(&r.model, &ds)?)?;
    }
    Ok(())
}
