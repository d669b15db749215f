fn main() {
    std::process::exit(imbforge_cli::main_with_args(std::env::args_os()));
}
