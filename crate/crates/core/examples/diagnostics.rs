use latent_extremes::diagnostics::{crossvalidate, quantile_plots, spatial_correlation_check, CrossValidationOptions, QuantilePlotOptions};
use latent_extremes::mcem::{fit, FitConfig};
use latent_extremes::model::DownscalingFunction;
use latent_extremes::synthetic::{random_sites, simulate_world, WorldParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> latent_extremes::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let sites = random_sites(14, 6, 150.0, &mut rng)?;
    let world = WorldParams::reference().for_sites(&sites)?;
    let data = simulate_world(&world.theta1, &world.theta2, &sites, 40, &mut rng)?;
    let cfg = FitConfig {
        iterations: 20,
        ..FitConfig::default()
    };
    let result = fit(&data, &cfg, &mut rng)?;
    let g = DownscalingFunction::Identity;

    let plots = quantile_plots(&data, &result, &g, &QuantilePlotOptions::default(), &mut rng)?;
    let inside: usize = plots.iter().map(|p| p.inside_bounds()).sum();
    let total: usize = plots.iter().map(|p| p.pairs.len()).sum();
    println!("quantile plots: {inside}/{total} order statistics inside the 95% bounds");

    for k in [0.0, 1.0] {
        let check = spatial_correlation_check(&data, &result, &g, k, 5)?;
        println!("correlation bins, k = {k}:");
        for b in &check.bins {
            println!("  model {:.3}  empirical {:.3}  ({} pairs)", b.model_corr, b.empirical_corr, b.pair_count);
        }
    }

    let holdout: Vec<String> = vec!["F001".into(), "F002".into(), "F003".into()];
    let cv = crossvalidate(&data, &holdout, &cfg, &CrossValidationOptions::default(), &mut rng)?;
    for h in &cv.holdouts {
        println!(
            "{}: 95% interval [{:.1}, {:.1}] covers {}/{}",
            h.site_id, h.interval.0, h.interval.1, h.n_covered, h.n_observations
        );
    }
    println!("overall coverage {:.3}", cv.coverage());
    Ok(())
}
