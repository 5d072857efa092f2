fn main() {
    std::process::exit(icl_fusion::cli::run());
}
