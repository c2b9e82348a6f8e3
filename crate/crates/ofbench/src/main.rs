fn main() {
    std::process::exit(ofbench::cli::run());
}
