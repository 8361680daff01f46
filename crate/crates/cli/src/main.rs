fn main() {
    std::process::exit(mitdet_cli::run_cli(std::env::args_os()));
}
