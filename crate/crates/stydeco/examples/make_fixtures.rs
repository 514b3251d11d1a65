//! Regenerates `fixtures/source/*.png` and `fixtures/smoke.json`.
//!
//! ```text
//! cargo run -p stydeco --example make_fixtures -- crates/stydeco/fixtures
//! ```

use std::path::PathBuf;

use stydeco::config_io::save_config;
use stydeco::fixtures::{smoke_config, write_source_corpus, FIXTURE_COUNT, FIXTURE_SIZE};

fn main() -> anyhow::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    write_source_corpus(&root.join("source"), FIXTURE_COUNT, FIXTURE_SIZE)?;
    save_config(&smoke_config(), &root.join("smoke.json"))?;
    println!("wrote {} scenes and smoke.json to {}", FIXTURE_COUNT, root.display());
    Ok(())
}
