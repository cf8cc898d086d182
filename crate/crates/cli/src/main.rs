fn main() {
    std::process::exit(deturb_cli::run(std::env::args_os()));
}
