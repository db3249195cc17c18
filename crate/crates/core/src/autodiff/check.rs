use super::{Array, Graph, GraphError, Var};

/// Entries where `|analytic| + |numeric|` falls below this are not compared.
const SKIP_BELOW: f64 = 1e-10;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(leaf, entry)` of the worst comparison.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped: usize,
}

/// Compares reverse-mode gradients against the five-point central
/// difference `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / (12 h)` for
/// every entry of every leaf, with `h = eps`.
///
/// `build` receives a fresh graph and the leaves (registered trainable) and
/// must return a scalar node.
pub fn grad_check<F>(leaves: &[Array], eps: f64, mut build: F) -> Result<GradCheck, GraphError>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, GraphError>,
{
    if !(eps > 0.0) {
        return Err(GraphError::InvalidStep(eps));
    }
    let analytic: Vec<Array> = {
        let mut g = Graph::new();
        let vars = leaves
            .iter()
            .map(|v| g.trainable(v.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let root = build(&mut g, &vars)?;
        let grads = g.backward(root)?;
        vars.iter().map(|&v| grads.wrt(&g, v)).collect()
    };

    let mut eval = |values: &[Array]| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|v| g.trainable(v.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let root = build(&mut g, &vars)?;
        let out = g.value(root);
        if out.len() != 1 {
            return Err(GraphError::NonScalarRoot(out.shape().to_vec()));
        }
        Ok(out.item())
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe: Vec<Array> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.len() {
            let x0 = leaf.data()[e];
            let mut at = |offset: f64| -> Result<f64, GraphError> {
                probe[li].data_mut()[e] = x0 + offset;
                eval(&probe)
            };
            let near = at(eps)? - at(-eps)?;
            let far = at(2.0 * eps)? - at(-2.0 * eps)?;
            probe[li].data_mut()[e] = x0;

            let numeric = (8.0 * near - far) / (12.0 * eps);
            let a = analytic[li].data()[e];
            if a.abs() + numeric.abs() < SKIP_BELOW {
                report.skipped += 1;
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((li, e));
            }
        }
    }
    Ok(report)
}
