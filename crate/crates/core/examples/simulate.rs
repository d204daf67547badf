use latent_extremes::ingest::write_maxima_csv;
use latent_extremes::synthetic::{random_sites, simulate_world, WorldParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> latent_extremes::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let sites = random_sites(3, 2, 100.0, &mut rng)?;
    let world = WorldParams::reference().for_sites(&sites)?;
    eprintln!("{}", serde_json::to_string_pretty(&world)?);
    let data = simulate_world(&world.theta1, &world.theta2, &sites, 5, &mut rng)?;
    write_maxima_csv(&data, std::io::stdout().lock(), None)
}
