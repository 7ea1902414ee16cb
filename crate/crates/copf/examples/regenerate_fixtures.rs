//! Regenerates the bundled data under `fixtures/`: the randomized
//! verification fixtures and the synthetic three-behavior dataset. Output
//! is deterministic, so rerunning reproduces the committed files byte for
//! byte.
//!
//! ```text
//! cargo run --example regenerate_fixtures
//! ```

use std::path::PathBuf;

use copf::oracle::DenseFixture;
use copf::synth::{generate, SynthSpec};

fn main() -> copf::Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");

    let random_dir = root.join("random");
    std::fs::create_dir_all(&random_dir)?;
    for i in 0..20u64 {
        // vary the shapes, keeping every graph at ten nodes or fewer
        let num_users = 2 + (i as usize % 4);
        let num_items = 2 + ((i as usize * 3) % 4);
        let behaviors = 2 + (i as usize % 3);
        let dim = 2 + (i as usize % 3);
        let layers = 1 + (i as usize % 3);
        let fixture =
            DenseFixture::random(1000 + i, num_users, num_items, behaviors, dim, layers);
        fixture.save(&random_dir.join(format!("fixture_{i:02}.json")))?;
    }
    println!("wrote 20 fixtures to {}", random_dir.display());

    let synth_dir = root.join("synthetic");
    let spec = SynthSpec::default();
    let files = generate(&spec).write_files(&synth_dir)?;
    for (name, path) in files {
        println!("wrote {name} -> {}", path.display());
    }
    Ok(())
}
