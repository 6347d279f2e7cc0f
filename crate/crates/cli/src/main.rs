fn main() {
    std::process::exit(matcomp_cli::main_with_args(std::env::args_os()));
}
