use std::time::Instant;
#[test]
#[ignore]
fn run_full_suite() {
    let t0 = Instant::now();
    let reports = stgan_core::gradcheck::run(None, None).unwrap();
    for r in &reports { println!("{r}"); }
    println!("total: {:.1}s, {} checks", t0.elapsed().as_secs_f64(), reports.len());
    assert!(reports.iter().all(|r| r.passed()));
}
