//! Verification pass on the bundled fixture: finite-difference gradient
//! check of the full training loss, stop-gradient path checks, and the
//! sparse-engine-vs-dense-reference comparison.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

fn main() -> copf::Result<()> {
    let summary = copf::cli::run_gradcheck(None, false)?;
    print!("{}", summary.render());
    assert!(summary.passed());
    Ok(())
}
