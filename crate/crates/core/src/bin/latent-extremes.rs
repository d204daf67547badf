fn main() {
    std::process::exit(latent_extremes::cli::run(std::env::args_os()));
}
