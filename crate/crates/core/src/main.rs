fn main() {
    std::process::exit(balanced_sde::cli::run(std::env::args_os()));
}
