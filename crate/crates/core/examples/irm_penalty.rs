//! The IRM penalty on hand-made batches: zero at a perfect fit, and a
//! nonzero gradient pressure when the dummy scale could still reduce the risk.

use irmlab::penalty::{irm_penalty, irm_penalty_grad, irm_regularized_loss, risk, EnvBatch, LossKind, PenaltyMode};

fn main() -> irmlab::Result<()> {
    let labels = vec![1.0, 0.0, 1.0, 0.0];
    let fit = EnvBatch::bce_from_probabilities(1, &labels, labels.clone())?;
    println!("BCE perfect fit: penalty {:.3e}", irm_penalty(&fit, LossKind::Bce)?);

    let single = EnvBatch::new(1, vec![2.0], vec![1.0])?;
    println!("MSE F=2, y=1: risk {}, penalty {}", risk(&single, LossKind::Mse)?, irm_penalty(&single, LossKind::Mse)?);

    let under = EnvBatch::new(1, vec![0.5, -0.5, 0.3, -0.2], labels.clone())?;
    let over = EnvBatch::new(2, vec![6.0, -6.0, 5.0, -7.0], labels)?;
    for b in [&under, &over] {
        let g = irm_penalty_grad(b, LossKind::Bce, PenaltyMode::MeanRisk)?;
        println!("E={}: risk {:.4}, penalty {:.4}, d/dlogit {:?}", b.env_id, risk(b, LossKind::Bce)?, g.value, g.grad);
    }
    for alpha in [0.0, 1.0, 100.0] {
        let total = irm_regularized_loss(&[under.clone(), over.clone()], LossKind::Bce, alpha)?;
        println!("alpha={alpha}: regularized loss {total:.4}");
    }
    Ok(())
}
