fn main() {
    std::process::exit(protocil::cli::main_with_args(std::env::args_os()));
}
