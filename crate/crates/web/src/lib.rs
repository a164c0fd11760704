//! Browser bindings. Every export returns a JSON string; the plain Rust
//! functions underneath are what the native tests call.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use vads::adversarial::Fusion;
use vads::data::{generate_dataset, held_out, GenerationParams};
use vads::eval::{evaluate_model, CmcCurve};
use vads::numerics::{gaussian_kl_diag, gaussian_kl_monte_carlo, GaussianParams, Rng};
use vads::recurrent::{mult_count_projected, mult_count_vanilla};
use vads::training::{model_config_for, EvalSet, TrainConfig, Trainer};
use vads::{Error, Result};

/// Per-step multiplications of a plain and a projected LSTM cell.
pub fn cost_model(
    input_dim: u32,
    cell_dim: u32,
    proj_input_dim: u32,
    proj_dim: u32,
) -> Result<Value> {
    if proj_dim > cell_dim || cell_dim == 0 {
        return Err(Error::InvalidConfig(
            "need 0 < projection ≤ cell size".into(),
        ));
    }
    let vanilla = mult_count_vanilla(input_dim.into(), cell_dim.into());
    let projected = mult_count_projected(proj_input_dim.into(), cell_dim.into(), proj_dim.into());
    Ok(json!({
        "vanilla": vanilla,
        "projected": projected,
        "reduction": 1.0 - projected as f64 / vanilla as f64,
    }))
}

/// Closed-form KL between two random diagonal Gaussians next to running
/// sample estimates at 10, 100, … up to `samples` draws.
pub fn kl_comparison(dim: u32, samples: u32, seed: u64) -> Result<Value> {
    if !(1..=64).contains(&dim) {
        return Err(Error::InvalidConfig("dimension must be in 1..=64".into()));
    }
    let mut rng = Rng::new(seed);
    let draw = |rng: &mut Rng| -> Result<GaussianParams> {
        let mean = (0..dim).map(|_| rng.normal()).collect();
        let std = (0..dim).map(|_| rng.uniform(0.5, 2.0)).collect();
        GaussianParams::new(mean, std)
    };
    let q = draw(&mut rng)?;
    let p = draw(&mut rng)?;
    let exact = gaussian_kl_diag(&q, &p)?;
    let mut trace = Vec::new();
    let mut n = 10u32;
    while n <= samples.max(10) {
        let est = gaussian_kl_monte_carlo(&q, &p, n as usize, &mut Rng::derive(seed, n.into()))?;
        trace.push(
            json!({ "samples": n, "estimate": est, "rel_error": (est - exact).abs() / exact }),
        );
        n = match n.checked_mul(10) {
            Some(m) => m,
            None => break,
        };
    }
    Ok(json!({
        "q": { "mean": q.mean(), "std": q.std() },
        "p": { "mean": p.mean(), "std": p.std() },
        "exact": exact,
        "trace": trace,
    }))
}

/// A small end-to-end run: per-epoch loss, cross-view KL and rank-1 on
/// held-out identities, then the final CMC curve.
pub fn training_demo(
    identities: u32,
    epochs: u32,
    lambda: f64,
    late_fusion: bool,
    seed: u64,
) -> Result<Value> {
    if !(4..=64).contains(&identities) || epochs > 100 {
        return Err(Error::InvalidConfig(
            "identities must be in 4..=64 and epochs ≤ 100".into(),
        ));
    }
    let params = GenerationParams {
        identities: identities as usize,
        min_len: 6,
        max_len: 16,
        frame_dim: 16,
        ..GenerationParams::default()
    };
    let ds = generate_dataset(&params, seed)?;
    let test = EvalSet::from_dataset(&held_out(&ds, 32)?);
    let cfg = TrainConfig {
        epochs: epochs as usize,
        patience: (epochs as usize).max(1),
        lambda,
        fusion: if late_fusion {
            Fusion::Late
        } else {
            Fusion::Early
        },
        seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&ds, model_config_for(&ds), cfg)?.with_monitor(test.clone());
    trainer.run()?;
    let curve: Vec<Value> = trainer
        .records()
        .iter()
        .map(|r| {
            let m = r.monitor.expect("monitor set");
            json!({ "epoch": r.epoch, "loss": r.train.total, "kl": m.kl, "rank1": m.rank1 })
        })
        .collect();
    let model = trainer.model();
    let e = evaluate_model(model, &test.probe, &test.gallery)?;
    let cmc = CmcCurve::from_ranks(&e.ranks, test.gallery.len())?;
    Ok(json!({
        "epochs": curve,
        "cmc": cmc.values(),
        "mean_ap": e.mean_ap,
        "kl": e.kl,
    }))
}

fn to_js(v: Result<Value>) -> std::result::Result<String, JsError> {
    v.map(|v| v.to_string())
        .map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = costModel)]
pub fn cost_model_js(
    input_dim: u32,
    cell_dim: u32,
    proj_input_dim: u32,
    proj_dim: u32,
) -> std::result::Result<String, JsError> {
    to_js(cost_model(input_dim, cell_dim, proj_input_dim, proj_dim))
}

#[wasm_bindgen(js_name = klComparison)]
pub fn kl_comparison_js(dim: u32, samples: u32, seed: u64) -> std::result::Result<String, JsError> {
    to_js(kl_comparison(dim, samples, seed))
}

#[wasm_bindgen(js_name = trainingDemo)]
pub fn training_demo_js(
    identities: u32,
    epochs: u32,
    lambda: f64,
    late_fusion: bool,
    seed: u64,
) -> std::result::Result<String, JsError> {
    to_js(training_demo(identities, epochs, lambda, late_fusion, seed))
}
