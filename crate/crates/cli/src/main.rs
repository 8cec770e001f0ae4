fn main() {
    std::process::exit(cfeval_cli::run(std::env::args_os()));
}
