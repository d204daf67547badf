use latent_extremes::mcem::{fit, FitConfig};
use latent_extremes::synthetic::{random_sites, simulate_misspecified, WorldParams};
use latent_extremes::uncertainty::{sandwich_covariance, ScoreClustering};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> latent_extremes::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sites = random_sites(12, 8, 150.0, &mut rng)?;
    let world = WorldParams::reference().for_sites(&sites)?;
    // maxima share a year effect that the model does not know about
    let data = simulate_misspecified(&world.theta1, &world.theta2, &sites, 50, 100.0, &mut rng)?;
    let cfg = FitConfig {
        iterations: 20,
        ..FitConfig::default()
    };
    let result = fit(&data, &cfg, &mut rng)?;
    let draws = result.draws()?;

    println!("{:<8} {:>10} {:>12} {:>12}", "param", "naive", "sandwich", "by year");
    let obs = sandwich_covariance(&data, draws, &result.theta1, ScoreClustering::Observation)?;
    let year = sandwich_covariance(&data, draws, &result.theta1, ScoreClustering::Year)?;
    for (k, name) in obs.theta1_names.iter().enumerate() {
        println!(
            "{name:<8} {:>10.5} {:>12.5} {:>12.5}",
            obs.naive_se()[k],
            obs.sandwich_se()[k],
            year.sandwich_se()[k]
        );
    }
    Ok(())
}
