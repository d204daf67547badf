use latent_extremes::gp::{gp_simulate, Kriger};
use latent_extremes::model::MeanStructure;
use latent_extremes::spatial::{CovarianceSpec, Location, SourceTag};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> latent_extremes::Result<()> {
    let sites: Vec<Location> = (0..8)
        .map(|i| Location::planar(15.0 * (i % 4) as f64, 20.0 * (i / 4) as f64, 50.0 * i as f64, SourceTag::Field))
        .collect();
    let mean = MeanStructure::new(vec![SourceTag::Field], vec![40.0, 0.03, -0.3, -0.25])?;
    let spec = CovarianceSpec::new(9.0, 0.0, 40.0, 1.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let field = gp_simulate(&mean, &spec, &sites, &mut rng)?;

    let kriger = Kriger::new(&mean, &spec, &sites)?;
    for east in [0.0, 22.5, 60.0, 150.0] {
        let target = Location::planar(east, 10.0, 120.0, SourceTag::Field);
        let k = kriger.krige(&field, &target)?;
        println!("east {east:>5} km: mean {:.3}, sd {:.3}", k.cond_mean, k.cond_var.sqrt());
    }
    let at_site = kriger.krige(&field, &sites[2])?;
    println!("at a data site: {:.6} vs {:.6}, var {:.1e}", at_site.cond_mean, field[2], at_site.cond_var);
    Ok(())
}
