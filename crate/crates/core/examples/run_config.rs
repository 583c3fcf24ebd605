// Print the default run configuration as TOML, the file format read by
// `certspoof --config`, and show what the fast profile changes.

use certspoof::cli::{Profile, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::default();
    print!("{}", cfg.to_toml());

    let fast = RunConfig { profile: Profile::Fast, ..cfg.clone() }.resolve();
    println!(
        "\nfast profile: {} images, N = {}, budgets {:?}",
        fast.grid.images, fast.grid.certification.n, fast.grid.epsilons
    );
    let parsed = RunConfig::from_toml("seed = 3\n[grid]\nimages = 10\n")?.resolve();
    parsed.validate()?;
    println!("config hash {}", parsed.hash());
    Ok(())
}
