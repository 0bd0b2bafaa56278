fn main() {
    std::process::exit(cxrlab_cli::main_with(std::env::args_os()));
}
