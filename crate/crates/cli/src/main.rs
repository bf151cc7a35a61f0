fn main() {
    std::process::exit(bspmpnet_cli::run(std::env::args_os()));
}
