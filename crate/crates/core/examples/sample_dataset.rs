//! Sample a CMNIST+ dataset, split it, and compare empirical tables with the
//! spec it came from.

use irmlab::sampler::{empirical_distributions, sample_dataset, split_train_val, EncodingConfig};
use irmlab::spec::{cmnist_plus, Label};

fn main() -> irmlab::Result<()> {
    let spec = cmnist_plus(0.8)?;
    println!("{}", spec.to_toml()?);
    let ds = sample_dataset(&spec, 20_000, 42, EncodingConfig::default())?;
    let ds = split_train_val(&ds, 0.8, 42)?;
    let emp = empirical_distributions(&ds)?;
    for (e, s) in emp.envs.iter().zip(&spec.environments) {
        println!(
            "E={} n={} P(Y=1|E): empirical {:.4}, spec {:.4}; P(C|Y=1,E): {:?}",
            e.env_id,
            e.n,
            e.p_y1.unwrap_or(f64::NAN),
            s.p_y1,
            e.color_table[0].map(|v| v.map(|x| (x * 1e4).round() / 1e4)),
        );
    }
    println!("label noise: {:.4}", emp.flip_rate);
    for env in ds.train_envs() {
        let t = irmlab::sampler::SplitTag::Train;
        println!("E={} train rows with Y=1: {}", env.env_id, env.count(t, Label::One));
    }
    let mut csv = Vec::new();
    ds.write_csv(&mut csv)?;
    let text = String::from_utf8(csv).expect("utf-8");
    for line in text.lines().take(4) {
        println!("{line}");
    }
    println!("{}", serde_json::to_string_pretty(&ds.manifest())?);
    Ok(())
}
