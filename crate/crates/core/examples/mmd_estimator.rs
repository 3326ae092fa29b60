//! Unbiased MMD between Gaussian samples and the class-conditional penalty
//! over (label, environment) groups.

use irmlab::cdm::{cdm_mmd_penalty, mmd_unbiased, GroupKey, GroupedRepresentations, KernelSpec};
use irmlab::rng::{stream_rng, Stream};
use irmlab::spec::Label;
use rand_distr::{Distribution, Normal};

fn draw(n: usize, mean: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, Stream::Probe, 0);
    let d = Normal::new(mean, 1.0).unwrap();
    (0..n).map(|_| vec![d.sample(&mut rng), d.sample(&mut rng)]).collect()
}

fn main() -> irmlab::Result<()> {
    let flat: Vec<f64> = draw(200, 0.0, 1).concat();
    let k = KernelSpec::median_heuristic(&flat, 2);
    println!("bandwidths {:?}", k.bandwidths);
    for shift in [0.0, 0.5, 1.0, 2.0] {
        let m = mmd_unbiased(&draw(300, 0.0, 2), &draw(300, shift, 3), &k)?;
        println!("mean shift {shift}: MMD^2 {m:.5}");
    }

    let mut g = GroupedRepresentations::new(2);
    g.insert(GroupKey { y: Label::One, env: 1 }, &draw(100, 1.0, 4))?;
    g.insert(GroupKey { y: Label::One, env: 2 }, &draw(100, 1.0, 5))?;
    g.insert(GroupKey { y: Label::Zero, env: 1 }, &draw(100, -1.0, 6))?;
    g.insert(GroupKey { y: Label::Zero, env: 2 }, &draw(100, 0.5, 7))?;
    println!("conditional penalty (Y=0 groups differ): {:.5}", cdm_mmd_penalty(&g, &k)?);
    Ok(())
}
