use latent_extremes::sampler::{sample_latent_field, SamplerConfig};
use latent_extremes::synthetic::{random_sites, simulate_world_with_field, WorldParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> latent_extremes::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sites = random_sites(6, 4, 150.0, &mut rng)?;
    let world = WorldParams::reference().for_sites(&sites)?;
    let (data, truth) = simulate_world_with_field(&world.theta1, &world.theta2, &sites, 30, &mut rng)?;

    let cfg = SamplerConfig {
        n_draws: 2000,
        ..SamplerConfig::default()
    };
    let draws = sample_latent_field(&data, &world.theta1, &world.theta2, &cfg, &mut rng)?;
    let post = draws.mean();
    println!("site   true mu  posterior mean  acceptance");
    for (j, id) in data.site_ids().iter().enumerate() {
        println!("{id}  {:>8.2}  {:>14.2}  {:>10.2}", truth[j], post[j], draws.acceptance_rates[j]);
    }
    Ok(())
}
