//! Compares every op's tape gradient with central finite differences.
//!
//! ```bash
//! cargo run --release --example gradcheck -- losses
//! ```

use refseg3d::gradcheck::{run_suite, TOLERANCE};

fn main() -> refseg3d::Result<()> {
    let filter = std::env::args().nth(1);
    let results = run_suite(filter.as_deref(), 5, 0)?;
    for r in &results {
        let tag = if r.passed() { "ok  " } else { "FAIL" };
        println!("{tag} {:9} {:18} worst {:.2e} over {}", r.module, r.name, r.worst, r.instances);
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} above {TOLERANCE:e}", results.len());
    Ok(())
}
