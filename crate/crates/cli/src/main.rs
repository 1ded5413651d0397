fn main() {
    std::process::exit(orbit_lab::cli::run(std::env::args_os()));
}
