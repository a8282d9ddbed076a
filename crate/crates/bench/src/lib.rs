//! Fixtures shared by the benchmarks.

use hyperscope::{
    gen_synthetic_trace, random_tokens, SyntheticModel, SyntheticModelParams, TeacherForcedTrace,
};

/// A synthetic trace pair with `positions` tokens over `vocab` and optional
/// hidden states of `layers` x `dim`.
pub fn synthetic_trace(
    vocab: usize,
    positions: usize,
    hidden: Option<(usize, usize)>,
) -> TeacherForcedTrace {
    let spectrum = |decay: f64| -> Vec<Vec<f64>> {
        hidden
            .map(|(layers, dim)| {
                (0..layers)
                    .map(|l| {
                        (0..dim)
                            .map(|i| (-(decay + l as f64 * 0.01) * i as f64).exp())
                            .collect()
                    })
                    .collect()
            })
            .unwrap_or_default()
    };
    let a = SyntheticModelParams::new(1, 4, 0.0, 3.0).with_hidden_spectrum(spectrum(0.2));
    let b = SyntheticModelParams::new(1, 4, 1.5, 3.0).with_hidden_spectrum(spectrum(0.1));
    let a = SyntheticModel::new(a, vocab).expect("valid params");
    let b = SyntheticModel::new(b, vocab).expect("valid params");
    let tokens = random_tokens(7, positions, vocab);
    gen_synthetic_trace(&a, &b, &tokens, hidden.is_some()).expect("valid trace")
}
