//! Runs the gradient, oracle and invariant checks and prints each result.
//!
//! cargo run --release --example verify

fn main() -> faim::Result<()> {
    let checks = faim::verify::run_all()?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{failed} of {} checks failed", checks.len());
    std::process::exit(i32::from(failed > 0));
}
