//! Regenerate the shipped fixture files: `cargo run --example gen_fixtures [dir]`.

use std::path::PathBuf;

use graphfi_core::fixtures;

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(fixtures::fixtures_dir);
    for f in fixtures::all() {
        fixtures::write_fixture(&f, &dir).expect("write fixture");
        println!("{} -> {}", f.name, dir.join(f.name).display());
    }
}
