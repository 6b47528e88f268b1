fn main() {
    std::process::exit(torus_dirac::run());
}
