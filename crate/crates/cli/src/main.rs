fn main() {
    std::process::exit(commitlens_cli::run(std::env::args_os()));
}
