use latent_extremes::cli::{format_table, parameter_rows};
use latent_extremes::mcem::{fit, parameter_table, FitConfig};
use latent_extremes::synthetic::{random_sites, simulate_world, WorldParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> latent_extremes::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let sites = random_sites(12, 8, 150.0, &mut rng)?;
    let world = WorldParams::reference().for_sites(&sites)?;
    let data = simulate_world(&world.theta1, &world.theta2, &sites, 50, &mut rng)?;

    let cfg = FitConfig {
        iterations: 30,
        ..FitConfig::default()
    };
    let result = fit(&data, &cfg, &mut rng)?;
    let last = result.trace.last().expect("at least one iteration");
    println!("{} iterations, final N = {}", result.trace.len(), last.n_draws);
    print!("{}", format_table(&parameter_rows(&result)));
    println!("\ntruth:");
    for (name, value) in parameter_table(&world.theta1, &world.theta2) {
        println!("  {name:<8} {value}");
    }
    Ok(())
}
