fn main() {
    std::process::exit(singlet_sim::cli::run());
}
