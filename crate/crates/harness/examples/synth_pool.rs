//! Writes a synthetic pool as `pool.jsonl` plus `labels.txt`.
//!
//! cargo run -p ddfh-harness --example synth_pool -- <out-dir> [frames] [seed] [initial-labeled]

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use ddfh_core::io::{write_jsonl, write_labels};
use ddfh_harness::{synth_generate, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().ok_or("usage: synth_pool <out-dir> [frames] [seed] [initial-labeled]")?);
    let mut cfg = SynthConfig::default();
    if let Some(v) = args.get(1) {
        cfg.frames = v.parse()?;
    }
    if let Some(v) = args.get(2) {
        cfg.seed = v.parse()?;
    }
    if let Some(v) = args.get(3) {
        cfg.initial_labeled = v.parse()?;
    }
    let pool = synth_generate(&cfg)?;
    std::fs::create_dir_all(&out)?;
    write_jsonl(&pool, BufWriter::new(File::create(out.join("pool.jsonl"))?))?;
    write_labels(&pool, BufWriter::new(File::create(out.join("labels.txt"))?))?;
    eprintln!("{} frames, {} instances, {} labeled", pool.frame_count(), pool.instance_count(), pool.labeled().len());
    Ok(())
}
