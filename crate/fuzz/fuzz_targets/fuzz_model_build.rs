#![no_main]

use libfuzzer_sys::fuzz_target;
use slowfast::models::{build_model, ModelConfig};
use slowfast::{CVec, Complex64};

// Model tables carry user-chosen parameters (frequencies, friction, noise,
// potential coefficients). Building the ingredients and evaluating them at
// a probe point must never panic, whatever the numbers are; bad parameter
// sets come back as errors.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = toml::from_str::<ModelConfig>(text) else {
        return;
    };
    let Ok(model) = build_model(&cfg) else {
        return;
    };
    let v = CVec::from_element(model.dim, Complex64::new(0.6, -0.4));
    let _ = model.perturbation.eval(&v);
    let _ = model.dispersion.eval(&v);
    let actions = slowfast::state::actions_of(&v);
    let _ = model.hamiltonian.energy(&actions);
    let _ = model.hamiltonian.frequencies(&actions);
});
