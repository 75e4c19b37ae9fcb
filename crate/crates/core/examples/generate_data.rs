//! Writes the bundled cases to `data/`: network JSON, one day of boundary
//! profiles and, for the large case, the metering mask.
//!
//! cargo run --example generate_data -- [output dir]

use std::path::PathBuf;

use gasnet::cases;

fn main() -> gasnet::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    let write = |path: PathBuf, text: String| -> gasnet::Result<()> {
        std::fs::create_dir_all(path.parent().expect("file has a parent"))
            .and_then(|_| std::fs::write(&path, text))
            .map_err(|e| gasnet::Error::Io { path, source: e })
    };

    let six = cases::six_node();
    write(root.join("six_node/network.json"), six.to_json())?;
    let profiles = cases::six_node_profiles(24)?;
    write(
        root.join("six_node/profiles.csv"),
        profiles.to_table(&six).to_csv_string(),
    )?;

    let large = cases::large_network();
    write(root.join("large/network.json"), large.to_json())?;
    let profiles = cases::large_profiles(&large, 24)?;
    write(
        root.join("large/profiles.csv"),
        profiles.to_table(&large).to_csv_string(),
    )?;
    let mask: String = cases::large_mask(&large, &profiles)
        .iter()
        .map(|id| format!("{id}\n"))
        .collect();
    write(root.join("large/mask.txt"), mask)?;
    println!("wrote cases under {}", root.display());
    Ok(())
}
