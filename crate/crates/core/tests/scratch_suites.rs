use dfno_core::selftest;

#[test]
#[ignore]
fn probe_gradient_check() {
    let t0 = std::time::Instant::now();
    let (report, rows) = selftest::gradient_check_suite().unwrap();
    println!("{} in {:?}", report.line(), t0.elapsed());
    for (label, rel) in rows {
        println!("  {label:<18} rel err {rel:.3e}");
    }
    assert!(report.passed);
}

#[test]
#[ignore]
fn probe_partition_invariance() {
    let t0 = std::time::Instant::now();
    let report = selftest::partition_invariance_suite().unwrap();
    println!("{} in {:?}", report.line(), t0.elapsed());
    assert!(report.passed);
}

#[test]
#[ignore]
fn probe_dfft_oracle() {
    let t0 = std::time::Instant::now();
    let report = selftest::dfft_oracle_suite().unwrap();
    println!("{} in {:?}", report.line(), t0.elapsed());
    assert!(report.passed);
}

#[test]
#[ignore]
fn probe_adjoint_sweep_full() {
    let t0 = std::time::Instant::now();
    let report = selftest::adjoint_sweep(50, false).unwrap();
    println!("{} in {:?}", report.line(), t0.elapsed());
    assert!(report.passed);
}
