use latent_extremes::gev::GevParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> latent_extremes::Result<()> {
    let g = GevParams::new(40.0, 8.0, 0.1)?;
    let (lo, hi) = g.support();
    println!("support [{lo:.2}, {hi}]");
    for p in [10.0, 50.0, 100.0] {
        println!("{p}-year return level {:.2} mm", g.return_level(p)?);
    }
    let z = g.quantile(0.9)?;
    println!("q(0.9) = {z:.4}, cdf back = {:.12}", g.cdf(z));
    println!("log density at q(0.9) = {:.4}", g.log_density(z));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = g.sample(100_000, &mut rng)?;
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (x.len() - 1) as f64;
    println!("variance: exact {:.3}, sample {v:.3}", g.variance().unwrap_or(f64::INFINITY));
    Ok(())
}
