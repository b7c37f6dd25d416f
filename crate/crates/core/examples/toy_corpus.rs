//! Writes the two-subject grating corpus into the given directory.

use mbfusion::prep::CanonicalLayout;
use mbfusion::toy::{write_corpus, ToySpec};

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "toy".to_string());
    match write_corpus(
        dir.as_ref(),
        &ToySpec::default(),
        &CanonicalLayout::default(),
    ) {
        Ok(path) => println!("{}", path.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
