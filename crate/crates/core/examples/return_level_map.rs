use latent_extremes::map::{grid_locations, return_level_map, write_map_csv, ElevationRaster, GridSpec, MapOptions};
use latent_extremes::mcem::{fit, FitConfig};
use latent_extremes::synthetic::{random_sites, simulate_world, WorldParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> latent_extremes::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let sites = random_sites(12, 8, 150.0, &mut rng)?;
    let world = WorldParams::reference().for_sites(&sites)?;
    let data = simulate_world(&world.theta1, &world.theta2, &sites, 40, &mut rng)?;
    let cfg = FitConfig {
        iterations: 20,
        ..FitConfig::default()
    };
    let result = fit(&data, &cfg, &mut rng)?;

    let mut raster = String::from("lon,lat,elevation_m\n");
    for i in 0..=30 {
        for j in 0..=20 {
            let (lon, lat) = (-2.5 + 0.07 * i as f64, 52.0 + 0.05 * j as f64);
            raster.push_str(&format!("{lon:.2},{lat:.2},{:.0}\n", 250.0 + 150.0 * (4.0 * lon).cos()));
        }
    }
    let raster = ElevationRaster::read(raster.as_bytes())?;
    let grid = GridSpec::from_bbox("-2.2,52.1,-0.8,52.9", 25.0)?;
    let targets = grid_locations(&grid, &raster, data.origin())?;
    let map = return_level_map(&result, &targets, &MapOptions::default(), &mut rng)?;
    for w in &map.warnings {
        eprintln!("warning: {w}");
    }
    write_map_csv(&map, std::io::stdout().lock(), Some("100-year return levels, mm"))
}
