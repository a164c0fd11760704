use vads_web::{cost_model, kl_comparison, training_demo};

#[test]
fn cost_model_numbers() {
    let v = cost_model(1024, 1024, 256, 256).unwrap();
    assert_eq!(v["vanilla"], 8_388_608);
    assert_eq!(v["projected"], 2_359_296);
    assert!((v["reduction"].as_f64().unwrap() - 0.71875).abs() < 1e-15);
    assert!(cost_model(8, 4, 8, 5).is_err());
}

#[test]
fn kl_trace_converges() {
    let v = kl_comparison(3, 100_000, 1).unwrap();
    let trace = v["trace"].as_array().unwrap();
    assert_eq!(trace.len(), 5);
    assert!(trace.last().unwrap()["rel_error"].as_f64().unwrap() < 0.05);
    assert!(kl_comparison(0, 10, 1).is_err());
}

#[test]
fn training_demo_shape() {
    let v = training_demo(8, 2, 0.6, false, 3).unwrap();
    let epochs = v["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 2);
    assert!(epochs.iter().all(|e| e["kl"].as_f64().unwrap() >= 0.0));
    let cmc = v["cmc"].as_array().unwrap();
    assert_eq!(cmc.len(), 32);
    assert_eq!(cmc.last().unwrap().as_f64(), Some(1.0));
    assert_eq!(
        v.to_string(),
        training_demo(8, 2, 0.6, false, 3).unwrap().to_string()
    );
}
