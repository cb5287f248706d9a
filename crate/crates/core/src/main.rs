fn main() {
    std::process::exit(rankdiff::cli::run());
}
