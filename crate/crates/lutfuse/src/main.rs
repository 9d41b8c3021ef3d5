fn main() {
    std::process::exit(lutfuse::run_cli());
}
