use crate::error::{Error, Result};

use super::graph::{Graph, Var};

/// Compares the analytic gradient of `loss` with respect to `leaf` against
/// central differences, replaying the recorded graph at `leaf ± epsilon`
/// for each entry.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`. The
/// graph's leaf values are restored before returning.
pub fn finite_difference_check(
    graph: &mut Graph,
    loss: Var,
    leaf: Var,
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("finite-difference epsilon must be positive"));
    }
    graph.zero_grad();
    graph.backward(loss)?;
    let original = graph.value(leaf).clone();
    let analytic = graph
        .grad(leaf)
        .map(|g| g.into_data())
        .unwrap_or_else(|| vec![0.0; original.numel()]);

    let mut worst: f64 = 0.0;
    for i in 0..original.numel() {
        let mut probe = original.clone();
        probe.data_mut()[i] += epsilon;
        graph.set_value(leaf, probe.clone())?;
        graph.replay()?;
        let plus = graph.value(loss).item();

        probe.data_mut()[i] = original.data()[i] - epsilon;
        graph.set_value(leaf, probe)?;
        graph.replay()?;
        let minus = graph.value(loss).item();

        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    graph.set_value(leaf, original)?;
    graph.replay()?;
    Ok(worst)
}
