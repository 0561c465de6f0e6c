fn main() {
    std::process::exit(causaladv::cli::parse_and_dispatch(std::env::args_os()));
}
