//! Proximal maps and their firm nonexpansiveness on a pair of points.

use proxskip::numerics::dist_sq;
use proxskip::prox::{prox, ProxOperator};

fn main() -> proxskip::Result<()> {
    let x = vec![1.5, -0.2, 0.7, 2.0, -1.0, 0.1];
    let y = vec![0.5, 0.3, -0.4, 1.0, 0.0, 0.9];
    let ops = [
        ("l1(0.5)", ProxOperator::l1(0.5)?),
        ("squared_l2(0.5)", ProxOperator::squared_l2(0.5)?),
        ("consensus(3 x 2)", ProxOperator::consensus(3, 2)?),
    ];
    for (name, op) in &ops {
        let px = prox(op, 1.0, &x)?;
        let py = prox(op, 1.0, &y)?;
        let qx: Vec<f64> = x.iter().zip(&px).map(|(a, b)| a - b).collect();
        let qy: Vec<f64> = y.iter().zip(&py).map(|(a, b)| a - b).collect();
        println!("{name:<18} prox(x) = {px:.3?}");
        println!(
            "{:<18} |Px-Py|^2 + |Qx-Qy|^2 = {:.4} <= |x-y|^2 = {:.4}",
            "",
            dist_sq(&px, &py) + dist_sq(&qx, &qy),
            dist_sq(&x, &y)
        );
    }
    Ok(())
}
