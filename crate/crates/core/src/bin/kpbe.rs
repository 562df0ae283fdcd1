fn main() {
    std::process::exit(kpbe::cli::run(std::env::args_os()));
}
