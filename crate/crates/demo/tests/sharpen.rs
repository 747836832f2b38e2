use zeroshot_demo::sharpen_weights;

#[test]
fn higher_beta_concentrates_weight() {
    let a = [0.2, 0.9, 0.4, 0.85, 0.1];
    let w1 = sharpen_weights(&a, 1.0).unwrap();
    let w2 = sharpen_weights(&a, 2.0).unwrap();
    let w4 = sharpen_weights(&a, 4.0).unwrap();
    assert!(w1[1] < w2[1] && w2[1] < w4[1]);
    for w in [&w1, &w2, &w4] {
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-7);
    }
}

#[test]
fn all_zero_input_stays_zero() {
    assert_eq!(sharpen_weights(&[0.0, 0.0], 2.0).unwrap(), vec![0.0, 0.0]);
}
