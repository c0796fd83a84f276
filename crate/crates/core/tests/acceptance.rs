use std::io::Write;

use entroproj::verify::run_all;

#[test]
fn acceptance_suite() {
    let results = run_all();
    // Written to the raw handle so the lines survive the harness's capture.
    let mut out = std::io::stdout().lock();
    for r in &results {
        let _ = writeln!(out, "{}  [{:.1}s]", r.line(), r.seconds);
    }
    let _ = out.flush();
    let failed: Vec<u8> = results.iter().filter(|r| !r.pass).map(|r| r.id).collect();
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
