fn main() {
    std::process::exit(gpkrylov::cli::run());
}
