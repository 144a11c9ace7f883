fn main() {
    std::process::exit(prophet_lab::cli::run());
}
