fn main() {
    std::process::exit(ugvae::cli::run(std::env::args_os()));
}
