//! Writes the ten-record demo source and its scripted generator.
//!
//! cargo run -p snowball-cli --example demo_data -- data/demo

use std::path::PathBuf;

use snowball_core::fixtures::builder_fixture;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data/demo".into()));
    std::fs::create_dir_all(&dir)?;
    let (raws, mock, _) = builder_fixture();
    let lines: String = raws.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(dir.join("raw.jsonl"), lines)?;
    std::fs::write(dir.join("generator.json"), mock.to_json() + "\n")?;
    println!("wrote {} records to {}", raws.len(), dir.display());
    Ok(())
}
