//! Finite-difference check of every trainable model and the skip-gram step.

use tripvec::pipeline::gradient_check_suite;

fn main() -> tripvec::Result<()> {
    for line in gradient_check_suite(20, false, 1)? {
        println!("{}", line.render());
    }
    println!("with a corrupted gradient:");
    for line in gradient_check_suite(3, true, 1)? {
        println!("{}", line.render());
    }
    Ok(())
}
