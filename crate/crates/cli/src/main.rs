fn main() {
    std::process::exit(clspool_cli::run(std::env::args_os()));
}
