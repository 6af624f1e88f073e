//! Ready-made problems used by the test suites, the examples and the CLI's
//! built-in presets.

use crate::model::SwitchingProblem;

/// Three modes on the real line: mean-reverting drift `0.2 (1 - x)`,
/// volatility 0.5, rewards `cos(x + i) + 0.1 * sum_l max(y^l, -10)`, affine
/// terminal payoffs of equal slope and constant costs 0.3 for both players.
pub fn standard() -> SwitchingProblem {
    let mut b = SwitchingProblem::builder(3, 1.0)
        .drift_1d("0.2*(1-x)", |_, x| 0.2 * (1.0 - x))
        .vol_1d("0.5", |_, _| 0.5)
        .constant_costs(0.3, 0.3);
    for (i, shift) in [0.0, 0.2, 0.1].into_iter().enumerate() {
        let phase = (i + 1) as f64;
        b = b
            .reward(i, format!("cos(x+{phase})+0.1*sum(max(y,-10))"), move |_, x, y| {
                (x[0] + phase).cos() + 0.1 * y.iter().map(|v| v.max(-10.0)).sum::<f64>()
            })
            .terminal(i, format!("0.5x+{shift}"), move |x| 0.5 * x[0] + shift);
    }
    b.build().expect("standard fixture is well formed")
}

/// Two modes with opposite rewards and zero terminal payoff; under a
/// driftless diffusion of size `sigma` the unconstrained values separate
/// linearly in time, so the upper obstacle binds for small costs.
pub fn opposed_rewards(down: f64, up: f64, sigma: f64) -> SwitchingProblem {
    SwitchingProblem::builder(2, 1.0)
        .vol_1d("sigma", move |_, _| sigma)
        .reward(0, "1+0.5cos(x)", |_, x, _| 1.0 + 0.5 * x[0].cos())
        .reward(1, "-1", |_, _, _| -1.0)
        .constant_costs(down, up)
        .build()
        .expect("opposed-rewards fixture is well formed")
}
