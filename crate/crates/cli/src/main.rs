fn main() {
    std::process::exit(pmq_cli::main_with_args(std::env::args_os()));
}
