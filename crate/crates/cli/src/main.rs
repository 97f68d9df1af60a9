fn main() {
    std::process::exit(ddgen_cli::run(std::env::args_os()));
}
