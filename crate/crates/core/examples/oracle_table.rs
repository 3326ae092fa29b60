//! Exact Bayes accuracies of the four feature families on CMNIST+ for a
//! range of ρ, with and without label balancing.

use irmlab::experiments::{run_oracle_table, DEFAULT_RHOS};
use irmlab::oracle::{posterior_e_given_c, render_table};
use irmlab::spec::{cmnist_plus, Color};

fn main() -> irmlab::Result<()> {
    let reports = run_oracle_table(&DEFAULT_RHOS, None)?;
    print!("{}", render_table(&reports));

    let spec = cmnist_plus(0.9)?;
    let pe = posterior_e_given_c(&spec, true);
    for c in Color::ALL {
        println!("balanced P(E=1|C={c}) at rho=0.9: {:.3}", pe.get(c, Some(1)).unwrap());
    }
    Ok(())
}
