//! Generates a small multi-site phantom set with retest scans and prints the
//! manifest, the split per subject and one volume header.
//!
//! cargo run --release --example phantom_dataset -- [out_dir]

use std::path::PathBuf;

use tabs::data::{generate_dataset, inspect, PhantomOptions, Split};

fn main() -> tabs::Result<()> {
    let out: PathBuf = std::env::args().nth(1).map_or("target/example-phantoms".into(), PathBuf::from);
    for (site, seed) in [("siteA", 1), ("siteB", 2)] {
        let mut opts = PhantomOptions::desk(site, 10, seed)?;
        opts.retest = site == "siteB";
        let manifest = generate_dataset(&opts, &out.join(site))?;
        println!("{site}: {} scans of {} subjects", manifest.rows.len(), manifest.subjects().len());
        for split in [Split::Train, Split::Val, Split::Test] {
            let rows = manifest.rows_in(Some(split));
            let atrophy: Vec<String> = rows.iter().filter(|r| r.timepoint == 1).map(|r| format!("{:.2}", r.atrophy)).collect();
            println!("  {:5} atrophy [{}]", split.name(), atrophy.join(" "));
        }
    }
    let first = std::fs::read_dir(out.join("siteB"))
        .map_err(|e| tabs::TabsError::io("read_dir", e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "tvol"))
        .min()
        .expect("no volumes written");
    println!("{}:\n{:#?}", first.display(), inspect(&first)?);
    Ok(())
}
