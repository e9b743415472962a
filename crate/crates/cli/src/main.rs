fn main() {
    std::process::exit(nimbus_cli::cli_main(std::env::args_os()));
}
