//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//! `ACCEPTANCE_ONLY=3,5` restricts the run to the listed criteria.

use microservo::harness::{verify, VerifyContext};

fn main() {
    let ids: Vec<u8> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    let ctx = VerifyContext::new(0);
    let mut failed = 0;
    println!("acceptance criteria (seed 0)");
    for r in verify(&ctx, &ids) {
        println!("{r}");
        if !r.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
