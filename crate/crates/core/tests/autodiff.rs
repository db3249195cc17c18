mod common;

use boter_core::autodiff::{Array, Graph};
use common::grad::{primitive_cases, primitive_error, random, Case, PRIMITIVE_TOL, SEEDS};

fn failures(case: &Case) -> Vec<String> {
    (0..SEEDS)
        .filter_map(|seed| {
            let err = primitive_error(case, seed);
            (err >= PRIMITIVE_TOL).then(|| format!("{} seed {seed}: {err:.3e}", case.name))
        })
        .collect()
}

#[test]
fn every_primitive_matches_finite_differences() {
    let cases = primitive_cases();
    assert!(cases.len() > 30);
    let bad: Vec<String> = cases.iter().flat_map(failures).collect();
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn composed_chain_matches_finite_differences() {
    let chain = Case {
        name: "chain",
        leaves: |r| vec![random(r, &[4, 3], -1.0, 1.0), random(r, &[3, 3], -1.0, 1.0), random(r, &[3], -1.0, 1.0)],
        op: Box::new(|g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add(h, v[2])?;
            let h = g.sin(h)?;
            let n = g.layer_norm(h, 1e-5)?;
            let e = g.exp(n)?;
            g.softmax_masked(e, &[])
        }),
    };
    assert_eq!(failures(&chain), Vec::<String>::new());
}

#[test]
fn backward_accumulates_over_reuse() {
    let mut g = Graph::new();
    let x = g.trainable(Array::vector(vec![1.5, -2.0])).unwrap();
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    let s = g.sum(z).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[4.0, -3.0]);
}
