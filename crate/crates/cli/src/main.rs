fn main() {
    std::process::exit(tcnn_cli::cli_dispatch(std::env::args_os()));
}
