fn main() {
    std::process::exit(phg2st::cli::run(std::env::args().skip(1)));
}
