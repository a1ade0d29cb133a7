fn main() {
    std::process::exit(protoret_cli::run(std::env::args_os()));
}
